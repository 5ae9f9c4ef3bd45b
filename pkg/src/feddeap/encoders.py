"""Frozen image/text encoder stand-ins and the binary embedding container."""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import numerics as nx
from .errors import BadMagic, DataError, DimensionMismatch, TruncatedFile

EMBEDDING_MAGIC = b"FDEP"
EMBEDDING_VERSION = 1
RAW_FLAG = 1 << 16
_HEADER = struct.Struct("<4sIQIII")


def _frozen(a) -> np.ndarray:
    arr = np.array(a, dtype=np.float64, order="C")
    arr.flags.writeable = False
    return arr


def _digest(*arrays: np.ndarray) -> str:
    h = hashlib.sha256()
    for a in arrays:
        h.update(a.tobytes())
    return h.hexdigest()


@dataclass(frozen=True)
class FrozenImageEncoder:
    """Fixed affine map ``raw -> W raw + b``."""

    weight: np.ndarray
    bias: np.ndarray
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "weight", _frozen(self.weight))
        object.__setattr__(self, "bias", _frozen(self.bias))

    @classmethod
    def create(cls, in_dim: int, out_dim: int, seed: int) -> "FrozenImageEncoder":
        rng = np.random.default_rng([seed, 101])
        w = rng.standard_normal((out_dim, in_dim)) / np.sqrt(in_dim)
        b = 0.1 * rng.standard_normal(out_dim)
        return cls(w, b, seed)

    @property
    def in_dim(self) -> int:
        return self.weight.shape[1]

    @property
    def out_dim(self) -> int:
        return self.weight.shape[0]

    def digest(self) -> str:
        return _digest(self.weight, self.bias)


def encode_image(enc: FrozenImageEncoder, raw) -> np.ndarray:
    """Embed one raw vector or a batch of rows.  Never tracked on a tape."""
    x = np.asarray(raw, dtype=np.float64)
    if x.shape[-1] != enc.in_dim or x.ndim not in (1, 2):
        raise DimensionMismatch(f"raw input {x.shape} does not match encoder input dim {enc.in_dim}")
    return x @ enc.weight.T + enc.bias


@dataclass(frozen=True)
class FrozenTextEncoder:
    """Two-layer tanh MLP over a flattened ``num_tokens x token_dim`` sequence.

    The weights are constants; only the input tokens can carry gradients.
    """

    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray
    num_tokens: int
    token_dim: int
    seed: int = 0

    def __post_init__(self):
        for name in ("w1", "b1", "w2", "b2"):
            object.__setattr__(self, name, _frozen(getattr(self, name)))
        if self.w1.shape[1] != self.num_tokens * self.token_dim:
            raise DimensionMismatch("w1 does not match num_tokens * token_dim")

    @classmethod
    def create(cls, num_tokens: int, token_dim: int, out_dim: int, hidden: int, seed: int) -> "FrozenTextEncoder":
        rng = np.random.default_rng([seed, 202])
        fan_in = num_tokens * token_dim
        w1 = rng.standard_normal((hidden, fan_in)) / np.sqrt(fan_in) * 2.0
        b1 = 0.1 * rng.standard_normal(hidden)
        w2 = rng.standard_normal((out_dim, hidden)) / np.sqrt(hidden)
        b2 = 0.1 * rng.standard_normal(out_dim)
        return cls(w1, b1, w2, b2, num_tokens, token_dim, seed)

    @property
    def out_dim(self) -> int:
        return self.w2.shape[0]

    def digest(self) -> str:
        return _digest(self.w1, self.b1, self.w2, self.b2)


def encode_text(enc: FrozenTextEncoder, tokens):
    """Text feature(s) for a ``(T, D)`` sequence or a ``(K, T, D)`` stack of them.

    ``tokens`` may be a tape ``Var``; the output then carries gradients back to it.
    """
    shape = nx._val(tokens).shape
    if shape[-2:] != (enc.num_tokens, enc.token_dim) or len(shape) not in (2, 3):
        raise DimensionMismatch(
            f"token tensor {shape} does not match ({enc.num_tokens}, {enc.token_dim})"
        )
    single = len(shape) == 2
    flat = nx.reshape(tokens, (1 if single else shape[0], enc.num_tokens * enc.token_dim))
    hidden = nx.tanh(nx.add(nx.matmul(flat, enc.w1.T), enc.b1))
    out = nx.add(nx.matmul(hidden, enc.w2.T), enc.b2)
    return nx.reshape(out, (enc.out_dim,)) if single else out


def class_text_table(num_classes: int, text_len: int, token_dim: int, seed: int) -> np.ndarray:
    """Fixed ``(K, T_text, D)`` class-text embeddings, one seeded stream per class."""
    rows = [
        np.random.default_rng([seed, 303, k]).standard_normal((text_len, token_dim))
        for k in range(num_classes)
    ]
    return _frozen(np.stack(rows))


@dataclass
class EmbeddingDataset:
    """Rows of ``embeddings`` with matching ``labels`` and ``domains``.

    ``raw`` marks features that still need the image encoder.
    """

    embeddings: np.ndarray
    labels: np.ndarray
    domains: np.ndarray
    num_classes: int
    num_domains: int
    raw: bool = False

    def __post_init__(self):
        self.embeddings = np.asarray(self.embeddings, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.domains = np.asarray(self.domains, dtype=np.int64)
        if self.embeddings.ndim != 2:
            raise DimensionMismatch("embeddings must be a 2-D array")
        n = self.embeddings.shape[0]
        if self.labels.shape != (n,) or self.domains.shape != (n,):
            raise DimensionMismatch("labels/domains must have one entry per embedding")
        if n and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise DataError("label outside [0, num_classes)")
        if n and (self.domains.min() < 0 or self.domains.max() >= self.num_domains):
            raise DataError("domain outside [0, num_domains)")
        if not np.all(np.isfinite(self.embeddings)):
            raise DataError("non-finite embedding value")

    def __len__(self) -> int:
        return self.embeddings.shape[0]

    def __eq__(self, other) -> bool:
        if not isinstance(other, EmbeddingDataset):
            return NotImplemented
        return (
            self.num_classes == other.num_classes
            and self.num_domains == other.num_domains
            and self.raw == other.raw
            and np.array_equal(self.embeddings, other.embeddings)
            and np.array_equal(self.labels, other.labels)
            and np.array_equal(self.domains, other.domains)
        )

    @property
    def dim(self) -> int:
        return self.embeddings.shape[1]

    @property
    def records(self):
        return list(zip(self.embeddings, self.labels.tolist(), self.domains.tolist()))

    def subset(self, index) -> "EmbeddingDataset":
        index = np.asarray(index, dtype=np.int64)
        return EmbeddingDataset(
            self.embeddings[index], self.labels[index], self.domains[index],
            self.num_classes, self.num_domains, self.raw,
        )

    def counts(self) -> np.ndarray:
        """``num_domains x num_classes`` sample counts."""
        out = np.zeros((self.num_domains, self.num_classes), dtype=np.int64)
        np.add.at(out, (self.domains, self.labels), 1)
        return out

    @staticmethod
    def concat(parts: list["EmbeddingDataset"]) -> "EmbeddingDataset":
        first = parts[0]
        return EmbeddingDataset(
            np.concatenate([p.embeddings for p in parts]),
            np.concatenate([p.labels for p in parts]),
            np.concatenate([p.domains for p in parts]),
            first.num_classes, first.num_domains, first.raw,
        )


def encode_dataset(enc: FrozenImageEncoder, ds: EmbeddingDataset) -> EmbeddingDataset:
    if not ds.raw:
        return ds
    return EmbeddingDataset(encode_image(enc, ds.embeddings), ds.labels, ds.domains, ds.num_classes, ds.num_domains)


def save_embeddings(ds: EmbeddingDataset, path) -> None:
    # stored as float32; values are expected to be float32-representable for exact round trips
    version = EMBEDDING_VERSION | (RAW_FLAG if ds.raw else 0)
    header = _HEADER.pack(EMBEDDING_MAGIC, version, len(ds), ds.dim, ds.num_classes, ds.num_domains)
    rec = np.dtype([("domain", "<u2"), ("label", "<u2"), ("x", "<f4", (ds.dim,))])
    body = np.empty(len(ds), dtype=rec)
    body["domain"] = ds.domains
    body["label"] = ds.labels
    body["x"] = ds.embeddings.astype(np.float32)
    Path(path).write_bytes(header + body.tobytes())


def read_header(blob: bytes) -> dict:
    if len(blob) < 4 or blob[:4] != EMBEDDING_MAGIC:
        raise BadMagic(f"expected magic {EMBEDDING_MAGIC!r}, found {blob[:4]!r}")
    if len(blob) < _HEADER.size:
        raise TruncatedFile("file ends inside the header")
    _, version, count, dim, k, n = _HEADER.unpack_from(blob)
    if version & 0xFFFF != EMBEDDING_VERSION:
        raise DataError(f"unsupported embedding file version {version & 0xFFFF}")
    return {
        "version": version & 0xFFFF,
        "raw": bool(version & RAW_FLAG),
        "record_count": count,
        "dim": dim,
        "num_classes": k,
        "num_domains": n,
    }


def load_embeddings(path) -> EmbeddingDataset:
    blob = Path(path).read_bytes()
    head = read_header(blob)
    dim, count = head["dim"], head["record_count"]
    rec = np.dtype([("domain", "<u2"), ("label", "<u2"), ("x", "<f4", (dim,))])
    payload = len(blob) - _HEADER.size
    if payload < count * rec.itemsize:
        raise TruncatedFile(f"header promises {count} records, file holds {payload // rec.itemsize}")
    if payload != count * rec.itemsize:
        raise DimensionMismatch("record payload size disagrees with header dim/count")
    body = np.frombuffer(blob, dtype=rec, count=count, offset=_HEADER.size)
    return EmbeddingDataset(
        body["x"].astype(np.float64),
        body["label"].astype(np.int64),
        body["domain"].astype(np.int64),
        head["num_classes"],
        head["num_domains"],
        raw=head["raw"],
    )
