"""
Growing a sparse model from a dense one, then cutting a piece back out
======================================================================

A dense donor seeds every expert with its own FFN weights, so the new model
starts out computing exactly the donor's function. Later, any single domain
can be extracted as a standalone model with identical outputs.
"""
import numpy as np

from rremoe.model import ModelConfig, count_params, forward, init_model
from rremoe.surgery import extract_submodel, inherit_model

donor = init_model(ModelConfig(dense_layers=3, rre_layers=0, heads=2, hidden=16, ffn=32, vocab=40, max_seq_len=16))
target = ModelConfig(dense_layers=1, rre_layers=2, heads=2, hidden=16, ffn=32, vocab=48,
                     num_domains=4, experts_per_domain=2, max_seq_len=16)
child = inherit_model(donor, target, seed=0)
print("donor params", count_params(donor.config), "-> child params", count_params(target))

tokens = np.random.default_rng(1).integers(0, 40, size=(2, 12))
gap = np.abs(forward(child, tokens, [3, 3])[..., :40] - forward(donor, tokens, [0, 0])).max()
print("largest logit gap to the donor:", gap)

sub = extract_submodel(child, 3)
print("extracted domain 3:", count_params(sub.config), "params")
print("largest logit gap to the parent:", np.abs(forward(sub, tokens, [0, 0]) - forward(child, tokens, [3, 3])).max())
