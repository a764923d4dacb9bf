"""
Training on a toy three-domain corpus
=====================================

Each synthetic domain walks the token range with a different stride, so the
same token has a different successor in every domain. Domain 2 is held back
for the first half of training; its experts stay untouched until it joins.
Takes about a minute on one core.
"""
import numpy as np

from rremoe.data import SpecialTokens, pack_pretrain, synthetic_corpus
from rremoe.model import ModelConfig, init_model
from rremoe.optim import AdamConfig, StageSchedule, train

specials = SpecialTokens.reserve(30)
source = {k: pack_pretrain(docs, 64, specials) for k, docs in synthetic_corpus(3, 200, 24).items()}

cfg = ModelConfig(1, 2, 2, 16, 64, 30, num_domains=3, experts_per_domain=2, max_seq_len=64)
model = init_model(cfg)
adam = AdamConfig(peak_lr=1e-2, end_lr=1e-3, warmup_steps=50, decay_steps=500)
schedule = StageSchedule([(0, 250, [0, 1]), (250, 500, [0, 1, 2])])

name = "layer2.rre.domain2.expert0.w1"
w0 = model.params[name].copy()


def report(row):
    if row["step"] % 50 == 0 or row["step"] == 249:
        moved = not np.array_equal(model.params[name], w0)
        print(f"step {row['step']:3d} stage {row['stage']} loss {row['loss']:.3f} "
              f"lr {row['lr']:.2e} domain-2 expert moved: {moved}")


result = train(model, source, adam, schedule, 500, batch_size=16, callback=report)
print(f"final loss {result.trace[-1]['loss']:.3f}")
