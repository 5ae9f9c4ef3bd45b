"""Small builders shared by the test modules."""

from __future__ import annotations

import numpy as np

from feddeap.encoders import FrozenTextEncoder, class_text_table
from feddeap.etf import make_etf
from feddeap.prompts import PromptContext
from feddeap.transforms import TransformNet


def tiny_context(seed: int, k: int = 3, n: int = 2, length: int = 2, dim: int = 4, text_len: int = 1, tau: float = 0.5):
    rng = np.random.default_rng([seed, 1])
    etf_dim = max(k, n) + int(rng.integers(0, 3))
    enc = FrozenTextEncoder.create(2 * length + text_len, dim, dim, 6, seed)
    ctx = PromptContext(
        enc,
        class_text_table(k, text_len, dim, seed),
        make_etf(k, etf_dim, seed),
        make_etf(n, etf_dim, seed + 7),
        tau,
    )
    phi_s = TransformNet.create("semantic", dim, etf_dim, seed, 5)
    phi_d = TransformNet.create("domain", dim, etf_dim, seed + 1, 5)
    p_s = 0.3 * rng.standard_normal((k, length, dim))
    p_d = 0.3 * rng.standard_normal((k, length, dim))
    images = rng.standard_normal((5, dim))
    labels = rng.integers(0, k, 5)
    return ctx, phi_s, phi_d, p_s, p_d, images, labels
