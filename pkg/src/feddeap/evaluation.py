"""Accuracy metrics, cross-domain heatmaps and feature dumps."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .encoders import EmbeddingDataset
from .errors import DataError
from .prompts import PromptContext, class_text_features, predict

LOSS_KEYS = ("L_s", "L_d", "L_c", "L_sp", "L_dp")


@dataclass
class MetricsRecord:
    round: int
    domain_accuracy: list[float]
    average_accuracy: float
    losses: dict = field(default_factory=dict)
    heatmap_gap: float | None = None

    def to_json(self) -> str:
        return json.dumps(
            {
                "round": self.round,
                "domain_accuracy": self.domain_accuracy,
                "average_accuracy": self.average_accuracy,
                "losses": {k: self.losses[k] for k in LOSS_KEYS if k in self.losses},
                "heatmap_gap": self.heatmap_gap,
            },
            sort_keys=True,
        )

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsRecord":
        return cls(d["round"], list(d["domain_accuracy"]), d["average_accuracy"], dict(d.get("losses", {})), d.get("heatmap_gap"))


def accuracy(test: EmbeddingDataset, p_s, p_d, reference_mean, ctx: PromptContext) -> float:
    if len(test) == 0:
        raise DataError("cannot evaluate on an empty test shard")
    classes, _ = predict(test.embeddings, p_s, p_d, reference_mean, ctx)
    return float(np.mean(classes == test.labels))


def evaluate(bundle, round_index: int = 0, losses: dict | None = None) -> MetricsRecord:
    """Per-domain test accuracy with each client's own domain prompt and the global semantic prompt.

    When a domain is split among several sub-clients its accuracy is the mean
    over them; the average is the unweighted mean over domains.
    """
    per_domain = []
    for n, test in enumerate(bundle.test_sets):
        accs = [
            accuracy(test, bundle.server.p_s.tokens, c.p_d.tokens, c.reference_mean, bundle.ctx)
            for c in bundle.clients
            if c.domain == n
        ]
        if not accs:
            raise DataError(f"no client holds domain {n}")
        per_domain.append(float(np.mean(accs)))
    return MetricsRecord(round_index, per_domain, float(np.mean(per_domain)), dict(losses or {}))


def cross_domain_heatmap(bundle) -> np.ndarray:
    """Entry ``(i, j)``: accuracy on domain ``j``'s test set with client ``i``'s domain prompt."""
    rows = []
    for c in bundle.clients:
        rows.append(
            [accuracy(test, bundle.server.p_s.tokens, c.p_d.tokens, c.reference_mean, bundle.ctx) for test in bundle.test_sets]
        )
    return np.array(rows)


def diagonal_gap(heat: np.ndarray, client_domains) -> float:
    """Mean matched-domain accuracy minus mean mismatched accuracy."""
    mask = np.zeros(heat.shape, dtype=bool)
    for i, d in enumerate(client_domains):
        mask[i, d] = True
    if mask.all():
        return 0.0
    return float(heat[mask].mean() - heat[~mask].mean())


def export_features(bundle, shard: EmbeddingDataset, path) -> int:
    """Write text features per (class, client) and the shard's image features as TSV.

    Columns: kind, client, domain, label, then the feature vector.  Returns
    the number of rows written.
    """
    lines = []
    for c in bundle.clients:
        feats = class_text_features(
            bundle.server.p_s.tokens, c.p_d.tokens, c.reference_mean[None, :], bundle.ctx
        )
        for k, f in enumerate(feats):
            lines.append("\t".join(["text", str(c.client_id), str(c.domain), str(k)] + [repr(float(v)) for v in f]))
    for x, y, d in zip(shard.embeddings, shard.labels, shard.domains):
        lines.append("\t".join(["image", "-1", str(int(d)), str(int(y))] + [repr(float(v)) for v in x]))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
    return len(lines)


def format_table(record: MetricsRecord, domain_names=None) -> str:
    names = domain_names or [f"d{n}" for n in range(len(record.domain_accuracy))]
    head = " | ".join(f"{n:>7}" for n in names) + " | " + f"{'Avg':>7}"
    body = " | ".join(f"{100 * a:7.2f}" for a in record.domain_accuracy) + " | " + f"{100 * record.average_accuracy:7.2f}"
    return f"round {record.round}\n{head}\n{body}"
