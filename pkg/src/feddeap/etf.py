"""Equiangular tight frames and the closed-form bounds that go with them."""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass

import numpy as np

from .errors import DimensionTooSmall

__all__ = [
    "EtfFrame",
    "BoundReport",
    "make_etf",
    "single_prototype_frame",
    "delta_bound",
    "entropy_floor",
    "mi_lower_bound",
    "sample_pairs_within_angle",
    "check_pairwise_distance_bound",
    "bound_report",
]


@dataclass(frozen=True)
class EtfFrame:
    """``prototypes`` is ``M x K``; column ``k`` is the unit prototype of class ``k``."""

    prototypes: np.ndarray

    def __post_init__(self):
        arr = np.array(self.prototypes, dtype=np.float64, order="C")
        arr.flags.writeable = False
        object.__setattr__(self, "prototypes", arr)

    @property
    def dim(self) -> int:
        return self.prototypes.shape[0]

    @property
    def count(self) -> int:
        return self.prototypes.shape[1]

    @property
    def vectors(self) -> np.ndarray:
        """Prototypes as rows (``K x M``)."""
        return self.prototypes.T

    def digest(self) -> str:
        return hashlib.sha256(self.prototypes.tobytes()).hexdigest()


def make_etf(k: int, m: int, seed: int) -> EtfFrame:
    """Simplex ETF ``sqrt(k/(k-1)) U (I - 11^T/k)`` with a seeded orthonormal ``U``.

    ``U`` is the Q factor of an ``m x k`` standard Gaussian matrix, so
    ``U^T U = I`` and the frame is deterministic in ``(k, m, seed)``.
    """
    if k < 2:
        raise DimensionTooSmall(f"an ETF needs at least 2 prototypes, got {k}")
    if m < k:
        raise DimensionTooSmall(f"feature dim {m} < prototype count {k}")
    rng = np.random.default_rng(seed)
    u, r = np.linalg.qr(rng.standard_normal((m, k)))
    # fix the sign ambiguity of QR so the frame depends only on the draw
    u = u * np.sign(np.diag(r))
    centering = np.eye(k) - np.full((k, k), 1.0 / k)
    v = math.sqrt(k / (k - 1)) * (u @ centering)
    # the construction is exact up to rounding; renormalise columns to absorb it
    v = v / np.linalg.norm(v, axis=0, keepdims=True)
    return EtfFrame(v)


def single_prototype_frame(m: int, seed: int) -> EtfFrame:
    # degenerate one-prototype "frame" for single-domain runs; any loss over it is 0
    rng = np.random.default_rng(seed)
    v = rng.standard_normal((m, 1))
    return EtfFrame(v / np.linalg.norm(v))


def delta_bound(k: int) -> float:
    """Largest distance between unit vectors within half the ETF angle."""
    if k < 2:
        raise ValueError("k must be >= 2")
    return math.sqrt(2.0 - math.sqrt((2.0 * k - 4.0) / (k - 1.0)))


def entropy_floor(k: int) -> float:
    """Entropy (nats) of the softmax over logits ``(1, -1/(k-1), ...)``."""
    if k < 2:
        raise ValueError("k must be >= 2")
    off = math.exp(-1.0 / (k - 1))
    z = math.e + (k - 1) * off
    return math.log(z) - (math.e - off) / z


def mi_lower_bound(k: int) -> float:
    """Variable part of the mutual-information lower bound; the additive constant is omitted."""
    if k < 2:
        raise ValueError("k must be >= 2")
    return entropy_floor(k) - 0.5 * (k - 1) * math.log(2.0 - math.sqrt((2.0 * k - 4.0) / (k - 1.0)))


def half_angle(k: int) -> float:
    return 0.5 * math.acos(-1.0 / (k - 1))


def sample_pairs_within_angle(
    dim: int, samples: int, max_angle: float, rng: np.random.Generator, exact: bool = False
) -> tuple[np.ndarray, np.ndarray]:
    """Random unit-vector pairs whose mutual angle is at most ``max_angle``.

    With ``exact`` every pair sits at exactly ``max_angle``; otherwise the angle
    is uniform on ``[0, max_angle]``.
    """
    a = rng.standard_normal((samples, dim))
    a /= np.linalg.norm(a, axis=1, keepdims=True)
    u = rng.standard_normal((samples, dim))
    u -= (u * a).sum(axis=1, keepdims=True) * a
    u /= np.linalg.norm(u, axis=1, keepdims=True)
    phi = np.full(samples, max_angle) if exact else rng.uniform(0.0, max_angle, samples)
    b = np.cos(phi)[:, None] * a + np.sin(phi)[:, None] * u
    return a, b


def check_pairwise_distance_bound(frame: EtfFrame, samples: int, seed: int, exact: bool = False) -> float:
    """Max ``||a - b||`` over sampled unit pairs within half the frame's angle."""
    if samples < 1:
        raise ValueError("samples must be >= 1")
    rng = np.random.default_rng(seed)
    a, b = sample_pairs_within_angle(frame.dim, samples, half_angle(frame.count), rng, exact=exact)
    return float(np.linalg.norm(a - b, axis=1).max())


@dataclass(frozen=True)
class BoundReport:
    k_classes: int
    delta: float
    gamma_note: str
    entropy_floor: float
    mi_lower_bound_up_to_const: float

    def as_dict(self) -> dict:
        return {
            "k_classes": self.k_classes,
            "delta": self.delta,
            "gamma_note": self.gamma_note,
            "entropy_floor": self.entropy_floor,
            "mi_lower_bound_up_to_const": self.mi_lower_bound_up_to_const,
        }


def bound_report(k: int, samples: int = 10_000, seed: int = 0) -> BoundReport:
    frame = make_etf(k, k, seed)
    rng = np.random.default_rng(seed)
    a, b = sample_pairs_within_angle(frame.dim, samples, half_angle(k), rng)
    delta = delta_bound(k)
    frac = float(np.mean(np.linalg.norm(a - b, axis=1) <= delta + 1e-9))
    note = (
        f"empirical fraction of {samples} pairs within half-angle having distance <= delta: {frac:.6f}; "
        "additive constants are omitted from the MI bound"
    )
    return BoundReport(k, delta, note, entropy_floor(k), mi_lower_bound(k))
