"""Synthetic multi-domain data, Dirichlet label partitioning and train/test splits."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .encoders import EmbeddingDataset
from .errors import ConfigError, DegenerateDraw, EmptyClass

MAX_DIRICHLET_RETRIES = 100


@dataclass(frozen=True)
class SyntheticSpec:
    """Generator settings.

    A sample of class ``k`` in domain ``n`` is ``A_n mu_k + b_n + noise`` with
    class means ``mu_k`` shared by all domains and a per-domain affine map
    ``A_n = I + domain_shift * G_n / sqrt(raw_dim)``, ``b_n = domain_shift * class_scale * g_n``.
    """

    num_classes: int = 7
    num_domains: int = 4
    raw_dim: int = 16
    samples_per_class: int = 100
    class_scale: float = 1.0
    domain_shift: float = 1.5
    noise: float = 1.5
    seed: int = 0

    def __post_init__(self):
        for name in ("num_classes", "num_domains", "raw_dim", "samples_per_class"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        for name in ("class_scale", "domain_shift", "noise"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")


def domain_maps(spec: SyntheticSpec) -> list[tuple[np.ndarray, np.ndarray]]:
    maps = []
    for n in range(spec.num_domains):
        rng = np.random.default_rng([spec.seed, 505, n])
        a = np.eye(spec.raw_dim) + spec.domain_shift * rng.standard_normal((spec.raw_dim, spec.raw_dim)) / np.sqrt(spec.raw_dim)
        b = spec.domain_shift * spec.class_scale * rng.standard_normal(spec.raw_dim)
        maps.append((a, b))
    return maps


def class_means(spec: SyntheticSpec) -> np.ndarray:
    rng = np.random.default_rng([spec.seed, 506])
    return spec.class_scale * rng.standard_normal((spec.num_classes, spec.raw_dim))


def generate_synthetic(spec: SyntheticSpec) -> list[EmbeddingDataset]:
    """One raw-feature dataset per domain, rounded to float32 precision."""
    mus = class_means(spec)
    out = []
    for n, (a, b) in enumerate(domain_maps(spec)):
        rng = np.random.default_rng([spec.seed, 507, n])
        labels = np.repeat(np.arange(spec.num_classes), spec.samples_per_class)
        x = mus[labels] @ a.T + b + spec.noise * rng.standard_normal((labels.size, spec.raw_dim))
        x = x.astype(np.float32).astype(np.float64)
        out.append(EmbeddingDataset(x, labels, np.full(labels.size, n), spec.num_classes, spec.num_domains, raw=True))
    return out


@dataclass(frozen=True)
class PartitionMap:
    """``assignment[i]`` is the client owning sample ``i``."""

    assignment: np.ndarray
    alpha: float
    num_clients: int

    def indices(self, client: int) -> np.ndarray:
        return np.flatnonzero(self.assignment == client)

    def histograms(self, labels: np.ndarray, num_classes: int) -> np.ndarray:
        """Normalised class histogram per client (``num_clients x num_classes``)."""
        h = np.zeros((self.num_clients, num_classes))
        np.add.at(h, (self.assignment, labels), 1.0)
        return h / h.sum(axis=1, keepdims=True)


def dirichlet_partition(ds: EmbeddingDataset, clients_per_domain: int, alpha: float, seed: int) -> PartitionMap:
    """Split each domain among ``clients_per_domain`` sub-clients.

    For every (domain, class) the class's samples are divided according to a
    Dirichlet(alpha) draw over the domain's sub-clients.  Draws leaving a
    sub-client empty are redrawn; sub-client ``c`` of domain ``n`` gets global
    index ``n * clients_per_domain + c``.
    """
    if alpha <= 0:
        raise ConfigError("alpha must be > 0")
    if clients_per_domain < 1:
        raise ConfigError("clients_per_domain must be >= 1")
    assignment = np.full(len(ds), -1, dtype=np.int64)
    for n in range(ds.num_domains):
        in_domain = np.flatnonzero(ds.domains == n)
        if in_domain.size == 0:
            continue
        rng = np.random.default_rng([seed, 606, n])
        for _ in range(MAX_DIRICHLET_RETRIES):
            local = np.full(in_domain.size, -1, dtype=np.int64)
            for k in range(ds.num_classes):
                members = np.flatnonzero(ds.labels[in_domain] == k)
                if members.size == 0:
                    continue
                members = rng.permutation(members)
                props = rng.dirichlet(np.full(clients_per_domain, alpha))
                cuts = np.floor(np.cumsum(props)[:-1] * members.size).astype(np.int64)
                for c, part in enumerate(np.split(members, cuts)):
                    local[part] = c
            if np.all(np.bincount(local, minlength=clients_per_domain) > 0):
                break
        else:
            raise DegenerateDraw(f"domain {n}: empty sub-client after {MAX_DIRICHLET_RETRIES} draws")
        assignment[in_domain] = n * clients_per_domain + local
    return PartitionMap(assignment, alpha, ds.num_domains * clients_per_domain)


def split_train_test(ds: EmbeddingDataset, fraction: float, seed: int) -> tuple[EmbeddingDataset, EmbeddingDataset]:
    """Stratified split per (domain, class); ``round(fraction * n)`` samples go to train."""
    if not 0.0 < fraction < 1.0:
        raise ConfigError(f"train fraction must lie strictly between 0 and 1, got {fraction}")
    rng = np.random.default_rng([seed, 707])
    train, test = [], []
    for n in range(ds.num_domains):
        for k in range(ds.num_classes):
            members = np.flatnonzero((ds.domains == n) & (ds.labels == k))
            if members.size == 0:
                continue
            if members.size < 2:
                raise EmptyClass(f"domain {n} class {k} has {members.size} sample(s); need >= 2 to split")
            members = rng.permutation(members)
            cut = min(max(int(round(fraction * members.size)), 1), members.size - 1)
            train.append(members[:cut])
            test.append(members[cut:])
    tr = np.sort(np.concatenate(train))
    te = np.sort(np.concatenate(test))
    return ds.subset(tr), ds.subset(te)


def nearest_class_mean_accuracy(train: EmbeddingDataset, test: EmbeddingDataset) -> float:
    """Accuracy of a nearest-class-mean classifier fit on ``train``."""
    means = np.stack([train.embeddings[train.labels == k].mean(axis=0) for k in range(train.num_classes)])
    d = ((test.embeddings[:, None, :] - means[None]) ** 2).sum(axis=2)
    return float(np.mean(d.argmin(axis=1) == test.labels))
