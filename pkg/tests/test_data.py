import numpy as np
import pytest

from feddeap.data import (
    SyntheticSpec,
    dirichlet_partition,
    generate_synthetic,
    nearest_class_mean_accuracy,
    split_train_test,
)
from feddeap.encoders import EmbeddingDataset
from feddeap.errors import ConfigError, EmptyClass


@pytest.fixture(scope="module")
def pooled():
    return EmbeddingDataset.concat(generate_synthetic(SyntheticSpec()))


def test_generator_shapes_and_determinism():
    spec = SyntheticSpec(samples_per_class=5)
    a, b = generate_synthetic(spec), generate_synthetic(spec)
    assert len(a) == spec.num_domains
    assert all(x == y for x, y in zip(a, b))
    assert len(a[0]) == spec.num_classes * 5 and a[0].raw


@pytest.mark.parametrize("alpha", [0.05, 1.0, 100.0])
def test_partition_disjoint_and_exhaustive(pooled, alpha):
    part = dirichlet_partition(pooled, 3, alpha, 0)
    assert part.assignment.min() >= 0
    counts = np.bincount(part.assignment, minlength=part.num_clients)
    assert counts.sum() == len(pooled) and (counts > 0).all()
    # sub-clients only hold data from their own domain
    assert np.array_equal(part.assignment // 3, pooled.domains)


def test_partition_deterministic(pooled):
    a = dirichlet_partition(pooled, 2, 0.5, 7).assignment
    assert np.array_equal(a, dirichlet_partition(pooled, 2, 0.5, 7).assignment)


def test_partition_rejects_bad_alpha(pooled):
    with pytest.raises(ConfigError):
        dirichlet_partition(pooled, 3, 0.0, 0)


def test_split_stratified_and_disjoint(pooled):
    train, test = split_train_test(pooled, 0.8, 0)
    assert len(train) + len(test) == len(pooled)
    assert np.array_equal(train.counts(), np.full((4, 7), 80))
    assert np.array_equal(test.counts(), np.full((4, 7), 20))
    rows = {r.tobytes() for r in train.embeddings}
    assert not any(r.tobytes() in rows for r in test.embeddings)


def test_split_errors(pooled):
    with pytest.raises(ConfigError):
        split_train_test(pooled, 1.0, 0)
    lonely = pooled.subset(np.flatnonzero((pooled.labels != 0) | (np.arange(len(pooled)) == 0)))
    with pytest.raises(EmptyClass):
        split_train_test(lonely, 0.8, 0)


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_default_task_separable_per_domain(seed):
    ds = EmbeddingDataset.concat(generate_synthetic(SyntheticSpec(seed=seed)))
    train, test = split_train_test(ds, 0.8, seed)
    for n in range(4):
        tr = train.subset(np.flatnonzero(train.domains == n))
        te = test.subset(np.flatnonzero(test.domains == n))
        assert nearest_class_mean_accuracy(tr, te) > 0.9
