"""
A mixed dense / sparse forward pass
===================================

The bottom layers are shared by all domains. The top layers hold one group of
experts per domain, and a token only ever touches its own domain's experts.
"""
import numpy as np

from rremoe.model import ModelConfig, count_params, detect_mode, forward, init_model, lm_split, loss_and_grads

cfg = ModelConfig(dense_layers=1, rre_layers=2, heads=2, hidden=16, ffn=32, vocab=40,
                  num_domains=3, experts_per_domain=2, max_seq_len=16)
model = init_model(cfg)
print(detect_mode(cfg), "model with", count_params(cfg), "parameters")

rng = np.random.default_rng(0)
tokens = rng.integers(0, cfg.vocab, size=(4, 13))
inputs, targets, mask = lm_split(tokens)

logits = forward(model, inputs, [0, 0, 1, 2])
print("logits:", logits.shape)

# a batch from domain 0 leaves every other domain's experts with zero gradient
value, grads = loss_and_grads(model, inputs, [0] * 4, targets, mask)
print(f"loss {value:.4f}")
for name in model.params.names("rre"):
    if not name.endswith("w1"):
        continue
    print(f"  {name:40s} |grad| = {np.abs(grads[name]).sum():.3e}")
