import os

# single-threaded BLAS, so exact-equality checks do not depend on thread scheduling
for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
    os.environ.setdefault(_var, "1")

import numpy as np
import pytest

from rremoe.model import ModelConfig, init_model


def splitmix64_reference(seed: int, n: int) -> list[int]:
    """Independent splitmix64 using numpy's wrapping uint64 arithmetic."""
    out = []
    with np.errstate(over="ignore"):
        s = np.uint64(seed)
        for _ in range(n):
            s = s + np.uint64(0x9E3779B97F4A7C15)
            z = s
            z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
            z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
            out.append(int(z ^ (z >> np.uint64(31))))
    return out


TOY = ModelConfig(dense_layers=1, rre_layers=1, heads=2, hidden=8, ffn=16, vocab=32,
                  num_domains=2, experts_per_domain=2, embedding_slots=1, max_seq_len=16)


@pytest.fixture
def toy_config():
    return TOY


@pytest.fixture
def mixed_model():
    cfg = ModelConfig(dense_layers=1, rre_layers=2, heads=2, hidden=16, ffn=32, vocab=70,
                      num_domains=3, experts_per_domain=2, embedding_slots=2, code_domains=(2,),
                      max_seq_len=16, init_seed=3)
    return init_model(cfg)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
