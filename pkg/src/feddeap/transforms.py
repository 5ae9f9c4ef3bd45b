"""Semantic / domain transformation networks and their ETF alignment losses."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .errors import DimensionMismatch, IndexOutOfRange
from .etf import EtfFrame

PARAM_NAMES = ("w1", "b1", "w2", "b2")


@dataclass(frozen=True)
class TransformNet:
    """Two-layer tanh MLP ``in_dim -> hidden -> out_dim``; ``kind`` is ``semantic`` or ``domain``."""

    kind: str
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray

    def __post_init__(self):
        if self.kind not in ("semantic", "domain"):
            raise ValueError(f"unknown transform kind {self.kind!r}")
        for name in PARAM_NAMES:
            object.__setattr__(self, name, nx.as_tensor(getattr(self, name)))
        if self.w1.shape[0] != self.b1.shape[0] or self.w2.shape != (self.b2.shape[0], self.w1.shape[0]):
            raise DimensionMismatch("inconsistent transform layer shapes")

    @classmethod
    def create(cls, kind: str, in_dim: int, out_dim: int, seed: int, hidden: int | None = None) -> "TransformNet":
        hidden = hidden or 2 * in_dim
        rng = np.random.default_rng([seed, 404, 0 if kind == "semantic" else 1])
        return cls(
            kind,
            rng.standard_normal((hidden, in_dim)) / np.sqrt(in_dim),
            np.zeros(hidden),
            rng.standard_normal((out_dim, hidden)) / np.sqrt(hidden),
            np.zeros(out_dim),
        )

    @property
    def prefix(self) -> str:
        return "phi_s" if self.kind == "semantic" else "phi_d"

    @property
    def in_dim(self) -> int:
        return self.w1.shape[1]

    @property
    def out_dim(self) -> int:
        return self.w2.shape[0]

    def params(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in PARAM_NAMES}

    def replace(self, params: dict[str, np.ndarray]) -> "TransformNet":
        return TransformNet(self.kind, *(params[name] for name in PARAM_NAMES))

    def register(self, tape: nx.Tape) -> dict[str, nx.Var]:
        """Put the parameters on ``tape`` as trainable leaves."""
        return {name: tape.param(f"{self.prefix}.{name}", value) for name, value in self.params().items()}

    def digest(self) -> str:
        h = hashlib.sha256()
        for name in PARAM_NAMES:
            h.update(getattr(self, name).tobytes())
        return h.hexdigest()


def transform(net: TransformNet, feature, params: dict | None = None):
    """Apply ``net`` to one feature vector or a batch of rows.

    ``params`` overrides the stored weights, e.g. with tape leaves from
    :meth:`TransformNet.register` when the net itself is being trained.
    """
    p = params if params is not None else net.params()
    shape = nx._val(feature).shape
    if shape[-1] != net.in_dim or len(shape) not in (1, 2):
        raise DimensionMismatch(f"feature {shape} does not match transform input dim {net.in_dim}")
    x = nx.reshape(feature, (1, shape[0])) if len(shape) == 1 else feature
    h = nx.tanh(nx.add(nx.matmul(x, nx.transpose(p["w1"])), p["b1"]))
    out = nx.add(nx.matmul(h, nx.transpose(p["w2"])), p["b2"])
    return nx.reshape(out, (net.out_dim,)) if len(shape) == 1 else out


def etf_alignment_loss(features, frame: EtfFrame, targets, tau: float):
    """Mean cross-entropy of ``cos(feature, prototype) / tau`` against ``targets``."""
    if tau <= 0:
        raise ValueError("tau must be positive")
    x = features
    if nx._val(x).ndim == 1:
        x = nx.reshape(x, (1, -1))
    targets = np.broadcast_to(np.asarray(targets, dtype=np.intp), (nx._val(x).shape[0],))
    if np.any(targets >= frame.count) or np.any(targets < 0):
        raise IndexOutOfRange(f"target outside [0, {frame.count})")
    logits = nx.mul(nx.cosine_matrix(x, frame.vectors), 1.0 / tau)
    return nx.cross_entropy(logits, targets)


def semantic_alignment_loss(net: TransformNet, frame: EtfFrame, feature, label, tau: float, params=None):
    """Image features pulled toward the semantic prototype of their class."""
    return etf_alignment_loss(transform(net, feature, params), frame, label, tau)


def domain_alignment_loss(net: TransformNet, frame: EtfFrame, feature, domain: int, tau: float, params=None):
    """Image features pulled toward the prototype of the owning client's domain."""
    return etf_alignment_loss(transform(net, feature, params), frame, domain, tau)


def sgd_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], lr: float) -> dict[str, np.ndarray]:
    return {name: value - lr * grads[name] for name, value in params.items()}


def minibatches(n: int, batch_size: int, rng: np.random.Generator) -> list[np.ndarray]:
    order = rng.permutation(n)
    return [order[i : i + batch_size] for i in range(0, n, batch_size)]


@dataclass
class TransformTrainStats:
    semantic_loss: list[float]
    domain_loss: list[float]


def train_transforms(
    phi_s: TransformNet,
    phi_d: TransformNet,
    embeddings: np.ndarray,
    labels: np.ndarray,
    domain: int,
    frame_s: EtfFrame,
    frame_d: EtfFrame,
    *,
    tau: float,
    epochs: int,
    lr: float,
    batch_size: int,
    rng: np.random.Generator,
) -> tuple[TransformNet, TransformNet, TransformTrainStats]:
    """SGD on the two alignment losses; encoders and frames are only read.

    Returns the updated nets and per-epoch mean losses.
    """
    stats = TransformTrainStats([], [])
    ps, pd = phi_s.params(), phi_d.params()
    for _ in range(epochs):
        ls, ld = [], []
        for idx in minibatches(len(labels), batch_size, rng):
            x = embeddings[idx]
            tape = nx.Tape()
            leaves = phi_s.register(tape)
            loss = semantic_alignment_loss(phi_s, frame_s, x, labels[idx], tau, params=leaves)
            grads = tape.backward(loss)
            ps = sgd_step(ps, {n: grads[f"phi_s.{n}"] for n in PARAM_NAMES}, lr)
            phi_s = phi_s.replace(ps)
            ls.append(float(loss.value))

            tape = nx.Tape()
            leaves = phi_d.register(tape)
            loss = domain_alignment_loss(phi_d, frame_d, x, domain, tau, params=leaves)
            grads = tape.backward(loss)
            pd = sgd_step(pd, {n: grads[f"phi_d.{n}"] for n in PARAM_NAMES}, lr)
            phi_d = phi_d.replace(pd)
            ld.append(float(loss.value))
        stats.semantic_loss.append(float(np.mean(ls)))
        stats.domain_loss.append(float(np.mean(ld)))
    return phi_s, phi_d, stats
