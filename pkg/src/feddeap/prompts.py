"""Dual prompts: a shared semantic prompt and a per-client domain prompt.

A class's text-encoder input is ``p_s[k] ++ (m * p_d[k]) ++ E_text[k]``
where ``m`` is the mean image embedding of the current batch (a constant).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .encoders import FrozenTextEncoder, encode_text
from .errors import EmptyBatch, ShapeMismatch
from .etf import EtfFrame
from .transforms import TransformNet, etf_alignment_loss, transform

SCOPES = ("global-semantic", "local-domain")


@dataclass(frozen=True)
class PromptSet:
    tokens: np.ndarray  # K x L x D
    scope: str

    def __post_init__(self):
        if self.scope not in SCOPES:
            raise ValueError(f"unknown prompt scope {self.scope!r}")
        tokens = nx.as_tensor(self.tokens)
        if tokens.ndim != 3:
            raise ShapeMismatch(f"prompt tokens must be K x L x D, got {tokens.shape}")
        object.__setattr__(self, "tokens", tokens)

    @classmethod
    def init(cls, k: int, length: int, dim: int, scope: str, rng: np.random.Generator, std: float = 0.02):
        return cls(std * rng.standard_normal((k, length, dim)), scope)

    @classmethod
    def zeros(cls, k: int, length: int, dim: int, scope: str):
        return cls(np.zeros((k, length, dim)), scope)

    def with_tokens(self, tokens) -> "PromptSet":
        if np.shape(tokens) != self.tokens.shape:
            raise ShapeMismatch(f"prompt shape changed from {self.tokens.shape} to {np.shape(tokens)}")
        return PromptSet(tokens, self.scope)

    @property
    def shape(self):
        return self.tokens.shape


@dataclass(frozen=True)
class PromptContext:
    """Everything frozen during prompt training."""

    text_encoder: FrozenTextEncoder
    text_table: np.ndarray  # K x T_text x D
    frame_s: EtfFrame
    frame_d: EtfFrame
    tau: float

    @property
    def num_classes(self) -> int:
        return self.text_table.shape[0]


def batch_mean(batch_embeddings) -> np.ndarray:
    x = np.asarray(batch_embeddings, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] == 0:
        raise EmptyBatch("cannot modulate a domain prompt with an empty batch")
    return x.mean(axis=0)


def modulate_domain_prompt(p_d, batch_embeddings):
    """``mean(batch) * p_d`` broadcast over classes and tokens.

    The mean is a constant; on a tape only ``p_d`` receives gradient.
    Embedding and token dimensions must agree.
    """
    m = batch_mean(batch_embeddings)
    if m.shape[0] != nx._val(p_d).shape[-1]:
        raise ShapeMismatch(f"image embedding dim {m.shape[0]} != token dim {nx._val(p_d).shape[-1]}")
    return nx.mul(p_d, m)


def build_prompt_input(p_s, p_d_mod, text_table, cls: int | None = None):
    """Concatenate ``p_s``, modulated ``p_d`` and class text along the token axis.

    Returns ``K x (2L + T_text) x D``, or a single ``(2L + T_text) x D`` row for ``cls``.
    """
    s, d, t = nx._val(p_s).shape, nx._val(p_d_mod).shape, np.shape(text_table)
    if s != d or s[0] != t[0] or s[2] != t[2]:
        raise ShapeMismatch(f"cannot concatenate prompt blocks {s}, {d}, {t}")
    seq = nx.concat([p_s, p_d_mod, text_table], axis=1)
    if cls is None:
        return seq
    return nx.reshape(nx.take(seq, [cls]), seq_shape(s, t))


def seq_shape(s, t):
    return (2 * s[1] + t[1], s[2])


def class_text_features(p_s, p_d, batch_embeddings, ctx: PromptContext):
    """Text features ``T(E_k)`` for all K classes (``K x D_img``)."""
    seq = build_prompt_input(p_s, modulate_domain_prompt(p_d, batch_embeddings), ctx.text_table)
    return encode_text(ctx.text_encoder, seq)


def contrastive_loss(text_features, image_embeddings, labels, tau: float):
    """Mean cross-entropy of image-vs-class-text cosines over ``tau``."""
    img = np.asarray(image_embeddings, dtype=np.float64)
    if img.ndim != 2 or img.shape[0] == 0:
        raise EmptyBatch("contrastive loss needs a non-empty batch")
    logits = nx.mul(nx.cosine_matrix(img, text_features), 1.0 / tau)
    return nx.cross_entropy(logits, labels)


def semantic_prompt_loss(text_features, phi_s: TransformNet, frame_s: EtfFrame, tau: float):
    """Class text feature ``y`` pushed, through frozen ``phi_s``, toward semantic prototype ``y``."""
    k = nx._val(text_features).shape[0]
    return etf_alignment_loss(transform(phi_s, text_features), frame_s, np.arange(k), tau)


def domain_prompt_loss(text_features, phi_d: TransformNet, frame_d: EtfFrame, client: int, tau: float):
    """Every class text feature pushed, through frozen ``phi_d``, toward the client's domain prototype."""
    return etf_alignment_loss(transform(phi_d, text_features), frame_d, client, tau)


@dataclass
class ObjectiveResult:
    loss: float
    contrastive: float
    alignment: float
    grads: dict  # full gradient map of the tape; holds exactly one prompt


def global_prompt_objective(p_s, p_d, images, labels, phi_s, ctx: PromptContext, lam: float) -> ObjectiveResult:
    """``L_c + lam * L_sp`` with only ``p_s`` on the tape as a parameter."""
    tape = nx.Tape()
    ps = tape.param("p_s", p_s)
    feats = class_text_features(ps, np.asarray(p_d), images, ctx)
    lc = contrastive_loss(feats, images, labels, ctx.tau)
    if lam:
        lsp = semantic_prompt_loss(feats, phi_s, ctx.frame_s, ctx.tau)
        loss = nx.add(lc, nx.mul(lsp, lam))
        align = float(lsp.value)
    else:
        loss, align = lc, 0.0
    grads = tape.backward(loss)
    return ObjectiveResult(float(loss.value), float(lc.value), align, grads)


def local_prompt_objective(p_s, p_d, images, labels, phi_d, client: int, ctx: PromptContext, eta: float) -> ObjectiveResult:
    """``L_c + eta * L_dp`` with only ``p_d`` on the tape as a parameter."""
    tape = nx.Tape()
    pd = tape.param("p_d", p_d)
    feats = class_text_features(np.asarray(p_s), pd, images, ctx)
    lc = contrastive_loss(feats, images, labels, ctx.tau)
    if eta:
        ldp = domain_prompt_loss(feats, phi_d, ctx.frame_d, client, ctx.tau)
        loss = nx.add(lc, nx.mul(ldp, eta))
        align = float(ldp.value)
    else:
        loss, align = lc, 0.0
    grads = tape.backward(loss)
    return ObjectiveResult(float(loss.value), float(lc.value), align, grads)


def predict(embeddings, p_s, p_d, reference_mean, ctx: PromptContext, tau: float | None = None):
    """Class index and probability vector for each row of ``embeddings``.

    ``reference_mean`` stands in for the batch mean of the modulation; using
    a fixed training-shard mean makes predictions independent of batching.
    """
    tau = ctx.tau if tau is None else tau
    x = np.atleast_2d(np.asarray(embeddings, dtype=np.float64))
    feats = class_text_features(np.asarray(p_s), np.asarray(p_d), np.atleast_2d(reference_mean), ctx)
    probs = nx.softmax(nx.cosine_matrix(x, feats) / tau)
    probs = probs / probs.sum(axis=1, keepdims=True)
    classes = probs.argmax(axis=1)
    if np.ndim(embeddings) == 1:
        return int(classes[0]), probs[0]
    return classes, probs
