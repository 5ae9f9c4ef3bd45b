"""Experiment assembly, the round loop, checkpointing and ablations."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import ExperimentConfig
from .data import dirichlet_partition, generate_synthetic, split_train_test
from .encoders import (
    EmbeddingDataset,
    FrozenImageEncoder,
    FrozenTextEncoder,
    class_text_table,
    encode_dataset,
    load_embeddings,
)
from .errors import ConfigError, DataError, ShapeMismatch
from .etf import make_etf, single_prototype_frame
from .evaluation import MetricsRecord, cross_domain_heatmap, diagonal_gap, evaluate
from .federation import ClientState, MessageBus, ServerState, decode_container, encode_container, run_round
from .prompts import PromptContext, PromptSet
from .transforms import PARAM_NAMES, TransformNet

log = logging.getLogger(__name__)

CHECKPOINT_KIND = "checkpoint"


@dataclass
class Experiment:
    config: ExperimentConfig
    image_encoder: FrozenImageEncoder | None
    ctx: PromptContext
    server: ServerState
    clients: list[ClientState]
    test_sets: list[EmbeddingDataset]
    history: list[MetricsRecord] = field(default_factory=list)
    bus: MessageBus = field(default_factory=MessageBus)

    @property
    def client_domains(self) -> list[int]:
        return [c.domain for c in self.clients]

    def step(self) -> MetricsRecord:
        self.server, losses = run_round(self.server, self.clients, self.ctx, self.bus)
        record = evaluate(self, self.server.round, losses)
        record.heatmap_gap = diagonal_gap(cross_domain_heatmap(self), self.client_domains)
        self.history.append(record)
        return record

    def run(self, rounds: int | None = None, checkpoint_path=None, on_record=None) -> list[MetricsRecord]:
        target = self.config.rounds if rounds is None else rounds
        every = self.config.checkpoint_every
        while self.server.round < target:
            record = self.step()
            log.info("round %d avg acc %.4f", record.round, record.average_accuracy)
            if on_record:
                on_record(record)
            if checkpoint_path and every and self.server.round % every == 0:
                save_checkpoint(self, checkpoint_path)
        return self.history

    def parameter_digest(self) -> dict[str, str]:
        import hashlib

        out = {"p_s": hashlib.sha256(self.server.p_s.tokens.tobytes()).hexdigest()}
        out["phi_s"] = self.server.phi_s.digest()
        out["phi_d"] = self.server.phi_d.digest()
        for c in self.clients:
            out[f"client{c.client_id}.p_d"] = hashlib.sha256(c.p_d.tokens.tobytes()).hexdigest()
        return out


def load_dataset(cfg: ExperimentConfig) -> EmbeddingDataset:
    if cfg.data_path:
        try:
            ds = load_embeddings(cfg.data_path)
        except OSError as exc:
            raise DataError(f"cannot read {cfg.data_path}: {exc}") from exc
        if ds.num_classes != cfg.num_classes or ds.num_domains != cfg.num_domains:
            raise DataError(
                f"data has K={ds.num_classes}, N={ds.num_domains}; config says K={cfg.num_classes}, N={cfg.num_domains}"
            )
        return ds
    return EmbeddingDataset.concat(generate_synthetic(cfg.synthetic_spec))


def build_experiment(cfg: ExperimentConfig, dataset: EmbeddingDataset | None = None) -> Experiment:
    """Everything a run needs, at round 0.  All randomness derives from ``cfg.seed``."""
    seed = cfg.seed
    ds = dataset if dataset is not None else load_dataset(cfg)
    if ds.raw:
        image_encoder = FrozenImageEncoder.create(ds.dim, cfg.image_dim, seed)
        ds = encode_dataset(image_encoder, ds)
    else:
        image_encoder = None
        if ds.dim != cfg.image_dim:
            raise DataError(f"embedding dim {ds.dim} != configured image_dim {cfg.image_dim}")

    train, test = split_train_test(ds, cfg.train_fraction, seed)
    test_sets = [test.subset(np.flatnonzero(test.domains == n)) for n in range(cfg.num_domains)]
    if any(len(t) == 0 for t in test_sets):
        raise DataError("every domain needs test data")

    if cfg.dirichlet:
        part = dirichlet_partition(train, cfg.clients_per_domain, cfg.alpha, seed)
        shards = [(cid, cid // cfg.clients_per_domain, train.subset(part.indices(cid))) for cid in range(part.num_clients)]
    else:
        shards = [(n, n, train.subset(np.flatnonzero(train.domains == n))) for n in range(cfg.num_domains)]

    frame_s = make_etf(cfg.num_classes, cfg.etf_dim, seed * 1000 + 1)
    if cfg.num_domains >= 2:
        frame_d = make_etf(cfg.num_domains, cfg.etf_dim, seed * 1000 + 2)
    else:
        frame_d = single_prototype_frame(cfg.etf_dim, seed * 1000 + 2)

    text_encoder = FrozenTextEncoder.create(
        2 * cfg.prompt_len + cfg.text_len, cfg.token_dim, cfg.image_dim, cfg.text_hidden, seed
    )
    table = class_text_table(cfg.num_classes, cfg.text_len, cfg.token_dim, seed)
    ctx = PromptContext(text_encoder, table, frame_s, frame_d, cfg.tau)

    rng = np.random.default_rng([seed, 909])
    shape = (cfg.num_classes, cfg.prompt_len, cfg.token_dim)
    p_s = PromptSet.init(*shape, "global-semantic", rng, cfg.prompt_init_std)
    phi_s = TransformNet.create("semantic", cfg.image_dim, cfg.etf_dim, seed, cfg.transform_hidden)
    phi_d = TransformNet.create("domain", cfg.image_dim, cfg.etf_dim, seed, cfg.transform_hidden)
    server = ServerState(p_s, phi_s, phi_d, frame_s, frame_d, 0, cfg)

    clients = []
    for cid, domain, shard in shards:
        if cfg.personalized_prompt:
            p_d = PromptSet.init(*shape, "local-domain", np.random.default_rng([seed, 910, cid]), cfg.prompt_init_std)
        else:
            p_d = PromptSet.zeros(*shape, "local-domain")
        clients.append(ClientState(cid, domain, shard, p_s, p_d, phi_s, phi_d, seed))
    exp = Experiment(cfg, image_encoder, ctx, server, clients, test_sets)
    return exp


def run_experiment(cfg: ExperimentConfig, dataset: EmbeddingDataset | None = None, **kwargs) -> Experiment:
    """Round-0 evaluation, then ``cfg.rounds`` federated rounds."""
    exp = build_experiment(cfg, dataset)
    initial = evaluate(exp, 0)
    initial.heatmap_gap = diagonal_gap(cross_domain_heatmap(exp), exp.client_domains)
    exp.history.append(initial)
    exp.run(**kwargs)
    return exp


# ---------------------------------------------------------------------------
# checkpoints
#
# Block order: p_s, phi_s.{w1,b1,w2,b2}, phi_d.{w1,b1,w2,b2}, frame_s, frame_d,
# then client<id>.p_d for every client in ascending id.


def checkpoint_bytes(exp: Experiment) -> bytes:
    header = {
        "kind": CHECKPOINT_KIND,
        "round": exp.server.round,
        "config": exp.config.to_dict(),
        "clients": [{"id": c.client_id, "domain": c.domain} for c in exp.clients],
        "history": [_record_dict(r) for r in exp.history],
    }
    blocks = [("p_s", exp.server.p_s.tokens)]
    blocks += [(f"phi_s.{n}", v) for n, v in exp.server.phi_s.params().items()]
    blocks += [(f"phi_d.{n}", v) for n, v in exp.server.phi_d.params().items()]
    blocks += [("frame_s", exp.server.frame_s.prototypes), ("frame_d", exp.server.frame_d.prototypes)]
    blocks += [(f"client{c.client_id}.p_d", c.p_d.tokens) for c in sorted(exp.clients, key=lambda c: c.client_id)]
    return encode_container(header, blocks)


def _record_dict(r: MetricsRecord) -> dict:
    return {
        "round": r.round,
        "domain_accuracy": r.domain_accuracy,
        "average_accuracy": r.average_accuracy,
        "losses": r.losses,
        "heatmap_gap": r.heatmap_gap,
    }


def save_checkpoint(exp: Experiment, path) -> None:
    Path(path).write_bytes(checkpoint_bytes(exp))


def load_checkpoint(path, dataset: EmbeddingDataset | None = None) -> Experiment:
    """Rebuild the run from its config, then restore the saved parameters."""
    header, blocks = decode_container(Path(path).read_bytes())
    if header.get("kind") != CHECKPOINT_KIND:
        raise ConfigError(f"{path} is not a checkpoint")
    cfg = ExperimentConfig.from_dict(header["config"])
    exp = build_experiment(cfg, dataset)
    named = dict(blocks)
    server = exp.server
    if not np.array_equal(named["frame_s"], server.frame_s.prototypes) or not np.array_equal(
        named["frame_d"], server.frame_d.prototypes
    ):
        raise ShapeMismatch("checkpoint frames differ from the ones rebuilt from its config")
    server.p_s = server.p_s.with_tokens(named["p_s"])
    server.phi_s = server.phi_s.replace({n: named[f"phi_s.{n}"] for n in PARAM_NAMES})
    server.phi_d = server.phi_d.replace({n: named[f"phi_d.{n}"] for n in PARAM_NAMES})
    server.round = header["round"]
    for c in exp.clients:
        c.p_d = c.p_d.with_tokens(named[f"client{c.client_id}.p_d"])
    exp.history = [MetricsRecord.from_dict(d) for d in header["history"]]
    return exp


# ---------------------------------------------------------------------------
# ablation

ABLATION_ROWS = (
    ("Baseline", dict(personalized_prompt=False, semantic_align=False, domain_align=False)),
    ("w/ Personalized Prompt", dict(personalized_prompt=True, semantic_align=False, domain_align=False)),
    ("w/o Semantic Align.", dict(personalized_prompt=True, semantic_align=False, domain_align=True)),
    ("w/o Domain Align.", dict(personalized_prompt=True, semantic_align=True, domain_align=False)),
    ("Full", dict(personalized_prompt=True, semantic_align=True, domain_align=True)),
)


def run_ablation(cfg: ExperimentConfig, seeds=(0,)) -> list[tuple[str, float]]:
    """Final average accuracy per ablation row, averaged over ``seeds``."""
    rows = []
    for name, flags in ABLATION_ROWS:
        accs = []
        for s in seeds:
            exp = run_experiment(cfg.replace(seed=s, **flags))
            accs.append(exp.history[-1].average_accuracy)
        rows.append((name, float(np.mean(accs))))
    return rows
