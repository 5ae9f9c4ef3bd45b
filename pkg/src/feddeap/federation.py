"""Synchronous client/server round protocol with selective aggregation.

Only the semantic prompt and the two transformation networks travel to the
server.  Domain prompts stay on their clients.  Every message crosses an
in-process queue as bytes in the same container format used for checkpoints.
"""

from __future__ import annotations

import json
import queue
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .config import ExperimentConfig
from .encoders import EmbeddingDataset
from .errors import BadMagic, EmptyUpdateSet, MissingClient, ShapeMismatch, TruncatedFile
from .etf import EtfFrame
from .prompts import PromptContext, PromptSet, global_prompt_objective, local_prompt_objective
from .transforms import PARAM_NAMES, TransformNet, minibatches, train_transforms

CONTAINER_MAGIC = b"FDCK"
CONTAINER_VERSION = 1


# ---------------------------------------------------------------------------
# container codec
#
#   magic "FDCK" | version u32 | header_len u32 | header (UTF-8 JSON)
#   | block_count u32 | blocks
#   block = name_len u16 | name (UTF-8) | ndim u8 | dims u32[ndim] | f64[prod(dims)]
#
# All integers and floats little-endian.


def encode_container(header: dict, blocks: list[tuple[str, np.ndarray]]) -> bytes:
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    out = [CONTAINER_MAGIC, struct.pack("<II", CONTAINER_VERSION, len(head)), head, struct.pack("<I", len(blocks))]
    for name, arr in blocks:
        arr = np.asarray(arr, dtype="<f8", order="C")
        key = name.encode("utf-8")
        out.append(struct.pack("<H", len(key)) + key)
        out.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.append(arr.tobytes())
    return b"".join(out)


def decode_container(blob: bytes) -> tuple[dict, list[tuple[str, np.ndarray]]]:
    if blob[:4] != CONTAINER_MAGIC:
        raise BadMagic(f"expected magic {CONTAINER_MAGIC!r}, found {blob[:4]!r}")
    pos = 4

    def read(n):
        nonlocal pos
        if pos + n > len(blob):
            raise TruncatedFile("container ends early")
        chunk = blob[pos : pos + n]
        pos += n
        return chunk

    version, head_len = struct.unpack("<II", read(8))
    if version != CONTAINER_VERSION:
        raise BadMagic(f"unsupported container version {version}")
    header = json.loads(read(head_len).decode("utf-8"))
    (count,) = struct.unpack("<I", read(4))
    blocks = []
    for _ in range(count):
        (klen,) = struct.unpack("<H", read(2))
        name = read(klen).decode("utf-8")
        (ndim,) = struct.unpack("<B", read(1))
        shape = struct.unpack(f"<{ndim}I", read(4 * ndim))
        n = int(np.prod(shape, dtype=np.int64))
        arr = np.frombuffer(read(8 * n), dtype="<f8").astype(np.float64).reshape(shape)
        blocks.append((name, arr))
    if pos != len(blob):
        raise ShapeMismatch("trailing bytes after the last block")
    return header, blocks


# ---------------------------------------------------------------------------
# states and messages


@dataclass
class ClientState:
    client_id: int
    domain: int
    shard: EmbeddingDataset  # image embeddings, not raw features
    p_s: PromptSet
    p_d: PromptSet
    phi_s: TransformNet
    phi_d: TransformNet
    seed: int
    reference_mean: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        if len(self.shard) == 0:
            raise MissingClient(f"client {self.client_id} has no training data")
        self.reference_mean = self.shard.embeddings.mean(axis=0)

    def round_rng(self, round_index: int) -> np.random.Generator:
        return np.random.default_rng([self.seed, 808, self.client_id, round_index])


@dataclass(frozen=True)
class RoundUpdate:
    client_id: int
    round: int
    p_s: np.ndarray
    phi_s: dict
    phi_d: dict
    sample_count: int
    metrics: dict = field(default_factory=dict, compare=False)

    def blocks(self) -> list[tuple[str, np.ndarray]]:
        out = [("p_s", self.p_s)]
        out += [(f"phi_s.{n}", self.phi_s[n]) for n in PARAM_NAMES]
        out += [(f"phi_d.{n}", self.phi_d[n]) for n in PARAM_NAMES]
        return out

    def to_bytes(self) -> bytes:
        header = {
            "kind": "update",
            "client_id": self.client_id,
            "round": self.round,
            "sample_count": self.sample_count,
            "metrics": self.metrics,
        }
        return encode_container(header, self.blocks())

    @classmethod
    def from_bytes(cls, blob: bytes) -> "RoundUpdate":
        header, blocks = decode_container(blob)
        if header.get("kind") != "update":
            raise ShapeMismatch("container is not a round update")
        named = dict(blocks)
        expected = {"p_s"} | {f"phi_s.{n}" for n in PARAM_NAMES} | {f"phi_d.{n}" for n in PARAM_NAMES}
        if set(named) != expected:
            raise ShapeMismatch(f"update blocks {sorted(named)} do not match the protocol")
        return cls(
            header["client_id"],
            header["round"],
            named["p_s"],
            {n: named[f"phi_s.{n}"] for n in PARAM_NAMES},
            {n: named[f"phi_d.{n}"] for n in PARAM_NAMES},
            header["sample_count"],
            header.get("metrics", {}),
        )


@dataclass
class ServerState:
    p_s: PromptSet
    phi_s: TransformNet
    phi_d: TransformNet
    frame_s: EtfFrame
    frame_d: EtfFrame
    round: int
    config: ExperimentConfig

    def broadcast(self) -> bytes:
        header = {"kind": "broadcast", "round": self.round}
        blocks = [("p_s", self.p_s.tokens)]
        blocks += [(f"phi_s.{n}", v) for n, v in self.phi_s.params().items()]
        blocks += [(f"phi_d.{n}", v) for n, v in self.phi_d.params().items()]
        return encode_container(header, blocks)


class MessageBus:
    """In-process stand-in for the network: a FIFO of serialized messages."""

    def __init__(self):
        self._q: queue.Queue[bytes] = queue.Queue()
        self.log: list[bytes] = []

    def send(self, blob: bytes) -> None:
        self.log.append(blob)
        self._q.put(blob)

    def drain(self) -> list[bytes]:
        out = []
        while True:
            try:
                out.append(self._q.get_nowait())
            except queue.Empty:
                return out


# ---------------------------------------------------------------------------
# aggregation


def aggregate(updates: list[RoundUpdate], weighted: bool = False) -> tuple[np.ndarray, dict, dict]:
    """Entrywise mean of the uploaded ``p_s``, ``phi_s`` and ``phi_d``.

    Summation runs in ascending client id, so the result does not depend on
    arrival order.  ``weighted`` switches to sample-count weights.
    """
    if not updates:
        raise EmptyUpdateSet("nothing to aggregate")
    ordered = sorted(updates, key=lambda u: u.client_id)
    ref = ordered[0].blocks()
    for u in ordered[1:]:
        for (name, a), (_, b) in zip(ref, u.blocks()):
            if np.shape(a) != np.shape(b):
                raise ShapeMismatch(f"client {u.client_id} sent {name} with shape {np.shape(b)}, expected {np.shape(a)}")
    n = len(ordered)
    if weighted:
        total = float(sum(u.sample_count for u in ordered))
        weights = [u.sample_count / total for u in ordered]
    else:
        weights = [None] * n

    # mean written as ref + mean(u - ref): identical uploads come back bit-exact
    def mean(get):
        ref_value = np.asarray(get(ordered[0]), dtype=np.float64)
        acc = np.zeros_like(ref_value)
        for w, u in zip(weights, ordered):
            delta = get(u) - ref_value
            acc = acc + (delta / n if w is None else w * delta)
        return ref_value + acc

    p_s = mean(lambda u: u.p_s)
    phi_s = {n: mean(lambda u, n=n: u.phi_s[n]) for n in PARAM_NAMES}
    phi_d = {n: mean(lambda u, n=n: u.phi_d[n]) for n in PARAM_NAMES}
    return p_s, phi_s, phi_d


# ---------------------------------------------------------------------------
# local training


def local_train(client: ClientState, broadcast: bytes, ctx: PromptContext, cfg: ExperimentConfig) -> RoundUpdate:
    """One client's round: adopt the broadcast, train transforms, then prompts.

    Mutates ``client`` (its local copies and ``p_d``) and returns the upload.
    """
    header, blocks = decode_container(broadcast)
    named = dict(blocks)
    round_index = header["round"]
    client.p_s = client.p_s.with_tokens(named["p_s"])
    client.phi_s = client.phi_s.replace({n: named[f"phi_s.{n}"] for n in PARAM_NAMES})
    client.phi_d = client.phi_d.replace({n: named[f"phi_d.{n}"] for n in PARAM_NAMES})

    rng = client.round_rng(round_index)
    x, y = client.shard.embeddings, client.shard.labels
    metrics = {}

    if cfg.transform_epochs:
        phi_s, phi_d, stats = train_transforms(
            client.phi_s, client.phi_d, x, y, client.domain, ctx.frame_s, ctx.frame_d,
            tau=ctx.tau, epochs=cfg.transform_epochs, lr=cfg.lr_transform,
            batch_size=cfg.batch_size, rng=rng,
        )
        client.phi_s, client.phi_d = phi_s, phi_d
        metrics["L_s"] = float(np.mean(stats.semantic_loss))
        metrics["L_d"] = float(np.mean(stats.domain_loss))

    lam = cfg.lam if cfg.semantic_align else 0.0
    eta = cfg.eta if cfg.domain_align else 0.0
    p_s, p_d = client.p_s.tokens, client.p_d.tokens
    lc, lsp, ldp = [], [], []
    for _ in range(cfg.prompt_epochs):
        for idx in minibatches(len(y), cfg.batch_size, rng):
            xb, yb = x[idx], y[idx]
            g = global_prompt_objective(p_s, p_d, xb, yb, client.phi_s, ctx, lam)
            p_s = p_s - cfg.lr_prompt * g.grads["p_s"]
            lc.append(g.contrastive)
            lsp.append(g.alignment)
            if cfg.personalized_prompt:
                loc = local_prompt_objective(p_s, p_d, xb, yb, client.phi_d, client.domain, ctx, eta)
                p_d = p_d - cfg.lr_prompt * loc.grads["p_d"]
                ldp.append(loc.alignment)
    client.p_s = client.p_s.with_tokens(p_s)
    client.p_d = client.p_d.with_tokens(p_d)
    if lc:
        metrics["L_c"] = float(np.mean(lc))
        metrics["L_sp"] = float(np.mean(lsp))
    if ldp:
        metrics["L_dp"] = float(np.mean(ldp))

    return RoundUpdate(
        client.client_id, round_index, client.p_s.tokens,
        client.phi_s.params(), client.phi_d.params(), len(y), metrics,
    )


def run_round(
    server: ServerState, clients: list[ClientState], ctx: PromptContext, bus: MessageBus | None = None
) -> tuple[ServerState, dict]:
    """Broadcast, train every client, aggregate; returns the next server state and mean client losses."""
    cfg = server.config
    bus = bus or MessageBus()
    msg = server.broadcast()

    def work(client):
        bus.send(local_train(client, msg, ctx, cfg).to_bytes())

    if cfg.workers > 1 and len(clients) > 1:
        with ThreadPoolExecutor(max_workers=cfg.workers) as pool:
            list(pool.map(work, clients))
    else:
        for c in clients:
            work(c)

    updates = [RoundUpdate.from_bytes(b) for b in bus.drain()]
    stale = [u.client_id for u in updates if u.round != server.round]
    if stale:
        raise MissingClient(f"updates from clients {stale} carry a stale round stamp")
    got = sorted(u.client_id for u in updates)
    want = sorted(c.client_id for c in clients)
    if got != want:
        raise MissingClient(f"expected updates from {want}, received {got}")

    p_s, phi_s, phi_d = aggregate(updates, weighted=cfg.weighted_aggregation)
    new = ServerState(
        server.p_s.with_tokens(p_s),
        server.phi_s.replace(phi_s),
        server.phi_d.replace(phi_d),
        server.frame_s,
        server.frame_d,
        server.round + 1,
        cfg,
    )
    keys = sorted({k for u in updates for k in u.metrics})
    losses = {}
    for k in keys:
        vals = [u.metrics[k] for u in sorted(updates, key=lambda u: u.client_id) if k in u.metrics]
        losses[k] = float(np.mean(vals))
    return new, losses
