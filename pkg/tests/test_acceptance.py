"""Acceptance criteria, one test per criterion.

Each test records a PASS/FAIL line; ``conftest.py`` prints them in the pytest
summary and running this file directly prints them to stdout.
"""

from __future__ import annotations

import functools
import math
import time

import numpy as np
import pytest

from feddeap import numerics as nx
from feddeap.config import ExperimentConfig
from feddeap.data import dirichlet_partition, generate_synthetic, split_train_test
from feddeap.encoders import EmbeddingDataset, load_embeddings, save_embeddings
from feddeap.etf import check_pairwise_distance_bound, delta_bound, entropy_floor, make_etf
from feddeap.evaluation import cross_domain_heatmap, diagonal_gap
from feddeap.experiment import ABLATION_ROWS, build_experiment, checkpoint_bytes, load_checkpoint, run_experiment, save_checkpoint
from feddeap.federation import RoundUpdate, aggregate, decode_container
from feddeap.prompts import (
    class_text_features,
    contrastive_loss,
    domain_prompt_loss,
    global_prompt_objective,
    local_prompt_objective,
    semantic_prompt_loss,
)
from feddeap.transforms import PARAM_NAMES, domain_alignment_loss, semantic_alignment_loss

from helpers import tiny_context

RESULTS: list[str] = []
SEEDS = (0, 1, 2)


def report(number: int, title: str, ok: bool, detail: str) -> None:
    RESULTS.append(f"{'PASS' if ok else 'FAIL'}  criterion {number:>2}  {title}: {detail}")
    assert ok, detail


# ---------------------------------------------------------------------------


def test_criterion_01_etf_geometry():
    t0 = time.perf_counter()
    worst_norm = worst_cos = worst_gram = 0.0
    for k in (2, 3, 5, 7, 10, 126):
        for m in (k, k + 3):
            v = make_etf(k, m, seed=k).prototypes
            worst_norm = max(worst_norm, float(np.abs(np.linalg.norm(v, axis=0) - 1).max()))
            gram = v.T @ v
            off = gram[~np.eye(k, dtype=bool)]
            worst_cos = max(worst_cos, float(np.abs(off + 1 / (k - 1)).max()))
            target = k / (k - 1) * (np.eye(k) - np.ones((k, k)) / k)
            worst_gram = max(worst_gram, float(np.abs(gram - target).max()))
    elapsed = time.perf_counter() - t0
    ok = worst_norm <= 1e-9 and worst_cos <= 1e-9 and worst_gram <= 1e-9 and elapsed < 5
    report(1, "ETF geometry", ok, f"norm err {worst_norm:.1e}, cos err {worst_cos:.1e}, gram err {worst_gram:.1e}, {elapsed:.2f}s")


def test_criterion_02_distance_bound():
    t0 = time.perf_counter()
    lines, ok = [], True
    for k in (3, 7, 126):
        frame = make_etf(k, k, seed=1)
        d = delta_bound(k)
        worst = check_pairwise_distance_bound(frame, 10_000, seed=k)
        at_edge = check_pairwise_distance_bound(frame, 100, seed=k, exact=True)
        ok &= worst <= d + 1e-9 and abs(at_edge - d) <= 1e-6
        lines.append(f"K={k} max {worst:.6f} <= {d:.6f}, edge gap {abs(at_edge - d):.1e}")
    elapsed = time.perf_counter() - t0
    ok &= elapsed < 10
    report(2, "pairwise distance bound", ok, "; ".join(lines) + f"; {elapsed:.2f}s")


def test_criterion_03_entropy_floor():
    t0 = time.perf_counter()
    worst, below = 0.0, True
    for k in range(2, 201):
        logits = np.array([1.0] + [-1.0 / (k - 1)] * (k - 1))
        p = np.exp(logits - logits.max())
        p /= p.sum()
        brute = float(-(p * np.log(p)).sum())
        worst = max(worst, abs(entropy_floor(k) - brute))
        below &= entropy_floor(k) < math.log(k)
    elapsed = time.perf_counter() - t0
    ok = worst <= 1e-12 and below and elapsed < 1
    report(3, "entropy floor", ok, f"max |H - brute| {worst:.1e}, H<lnK for all K: {below}, {elapsed:.3f}s")


# ---------------------------------------------------------------------------
# criterion 4: every loss against central differences


def _fd_check(f_tape, f_plain, x) -> float:
    tape = nx.Tape()
    leaf = tape.param("x", x)
    grads = tape.backward(f_tape(leaf))
    numeric = nx.finite_difference_grad(f_plain, x)
    return nx.max_relative_error(grads["x"], numeric)


def _phi_check(net, loss_of_params) -> float:
    worst = 0.0
    base = net.params()
    tape = nx.Tape()
    leaves = net.register(tape)
    grads = tape.backward(loss_of_params(leaves))
    for name in PARAM_NAMES:
        def plain(v, name=name):
            return float(loss_of_params(dict(base, **{name: v})))

        numeric = nx.finite_difference_grad(plain, base[name])
        worst = max(worst, nx.max_relative_error(grads[f"{net.prefix}.{name}"], numeric))
    return worst


def _gradient_errors(seed: int) -> dict[str, float]:
    ctx, phi_s, phi_d, p_s, p_d, images, labels = tiny_context(seed, tau=0.2 + 0.1 * (seed % 5))
    tau = ctx.tau
    client = seed % ctx.frame_d.count
    err = {}

    err["L_s"] = _phi_check(phi_s, lambda p: semantic_alignment_loss(phi_s, ctx.frame_s, images, labels, tau, params=p))
    err["L_d"] = _phi_check(phi_d, lambda p: domain_alignment_loss(phi_d, ctx.frame_d, images, client, tau, params=p))

    def feats_ps(ps):
        return class_text_features(ps, p_d, images, ctx)

    def feats_pd(pd):
        return class_text_features(p_s, pd, images, ctx)

    lc = lambda feats: contrastive_loss(feats, images, labels, tau)  # noqa: E731
    lsp = lambda feats: semantic_prompt_loss(feats, phi_s, ctx.frame_s, tau)  # noqa: E731
    ldp = lambda feats: domain_prompt_loss(feats, phi_d, ctx.frame_d, client, tau)  # noqa: E731

    err["L_c"] = max(
        _fd_check(lambda v: lc(feats_ps(v)), lambda v: float(lc(feats_ps(v))), p_s),
        _fd_check(lambda v: lc(feats_pd(v)), lambda v: float(lc(feats_pd(v))), p_d),
    )
    err["L_sp"] = max(
        _fd_check(lambda v: lsp(feats_ps(v)), lambda v: float(lsp(feats_ps(v))), p_s),
        _fd_check(lambda v: lsp(feats_pd(v)), lambda v: float(lsp(feats_pd(v))), p_d),
    )
    err["L_dp"] = max(
        _fd_check(lambda v: ldp(feats_ps(v)), lambda v: float(ldp(feats_ps(v))), p_s),
        _fd_check(lambda v: ldp(feats_pd(v)), lambda v: float(ldp(feats_pd(v))), p_d),
    )

    lam, eta = 0.5 + seed % 3, 0.25 + seed % 4
    g = global_prompt_objective(p_s, p_d, images, labels, phi_s, ctx, lam).grads["p_s"]
    num = nx.finite_difference_grad(lambda v: global_prompt_objective(v, p_d, images, labels, phi_s, ctx, lam).loss, p_s)
    err["L_pg"] = nx.max_relative_error(g, num)
    g = local_prompt_objective(p_s, p_d, images, labels, phi_d, client, ctx, eta).grads["p_d"]
    num = nx.finite_difference_grad(lambda v: local_prompt_objective(p_s, v, images, labels, phi_d, client, ctx, eta).loss, p_d)
    err["L_pl"] = nx.max_relative_error(g, num)
    return err


def test_criterion_04_gradients():
    t0 = time.perf_counter()
    configs = 20
    worst: dict[str, float] = {}
    for seed in range(configs):
        for name, e in _gradient_errors(seed).items():
            worst[name] = max(worst.get(name, 0.0), e)
    elapsed = time.perf_counter() - t0
    ok = all(v <= 1e-4 for v in worst.values()) and len(worst) == 7 and elapsed < 60
    detail = ", ".join(f"{k} {v:.1e}" for k, v in worst.items())
    report(4, "gradient correctness", ok, f"{configs} configs; max rel err {detail}; {elapsed:.1f}s")


# ---------------------------------------------------------------------------


def test_criterion_05_parameter_isolation():
    cfg = ExperimentConfig(rounds=5)
    exp = build_experiment(cfg)
    ctx = exp.ctx
    client = exp.clients[0]
    x, y = client.shard.embeddings[:16], client.shard.labels[:16]
    g_keys = set(global_prompt_objective(client.p_s.tokens, client.p_d.tokens, x, y, exp.server.phi_s, ctx, cfg.lam).grads)
    l_keys = set(
        local_prompt_objective(client.p_s.tokens, client.p_d.tokens, x, y, exp.server.phi_d, client.domain, ctx, cfg.eta).grads
    )

    def frozen_digests():
        return (
            exp.image_encoder.digest(),
            ctx.text_encoder.digest(),
            nx.as_tensor(ctx.text_table).tobytes(),
            ctx.frame_s.digest(),
            ctx.frame_d.digest(),
            exp.server.frame_s.digest(),
            exp.server.frame_d.digest(),
        )

    before = frozen_digests()
    initial_pd = [c.p_d.tokens.tobytes() for c in exp.clients]
    seen_pd = list(initial_pd)
    for _ in range(cfg.rounds):
        exp.step()
        seen_pd += [c.p_d.tokens.tobytes() for c in exp.clients]
    after = frozen_digests()

    names = {name for blob in exp.bus.log for name, _ in decode_container(blob)[1]}
    leaked = any(pd in blob for pd in seen_pd for blob in exp.bus.log)
    moved = any(c.p_d.tokens.tobytes() != b for c, b in zip(exp.clients, initial_pd))
    ok = g_keys == {"p_s"} and l_keys == {"p_d"} and before == after and not any("p_d" in n for n in names) and not leaked and moved
    report(
        5,
        "parameter isolation",
        ok,
        f"global grads {sorted(g_keys)}, local grads {sorted(l_keys)}, frozen parts unchanged {before == after}, "
        f"{len(exp.bus.log)} messages with p_d bytes: {leaked}",
    )


def test_criterion_06_aggregation():
    rng = np.random.default_rng(6)
    shapes = {"p_s": (7, 4, 16), "w1": (32, 16), "b1": (32,), "w2": (16, 32), "b2": (16,)}

    def update(cid):
        return RoundUpdate(
            cid, 0, rng.standard_normal(shapes["p_s"]),
            {n: rng.standard_normal(shapes[n]) for n in PARAM_NAMES},
            {n: rng.standard_normal(shapes[n]) for n in PARAM_NAMES},
            10 + cid,
        )

    ups = [update(c) for c in range(5)]
    p_s, phi_s, phi_d = aggregate(ups)

    def oracle(arrays):
        out = np.empty(arrays[0].shape)
        for idx in np.ndindex(out.shape):
            out[idx] = math.fsum(a[idx] for a in arrays) / len(arrays)
        return out

    err = float(np.abs(p_s - oracle([u.p_s for u in ups])).max())
    for n in PARAM_NAMES:
        err = max(err, float(np.abs(phi_s[n] - oracle([u.phi_s[n] for u in ups])).max()))
        err = max(err, float(np.abs(phi_d[n] - oracle([u.phi_d[n] for u in ups])).max()))

    single = aggregate([ups[2]])
    identity = np.array_equal(single[0], ups[2].p_s) and all(np.array_equal(single[1][n], ups[2].phi_s[n]) for n in PARAM_NAMES)

    shuffle_err = 0.0
    for s in range(10):
        perm = [ups[i] for i in np.random.default_rng(s).permutation(len(ups))]
        q = aggregate(perm)
        shuffle_err = max(shuffle_err, float(np.abs(q[0] - p_s).max()))
        for n in PARAM_NAMES:
            shuffle_err = max(shuffle_err, float(np.abs(q[1][n] - phi_s[n]).max()), float(np.abs(q[2][n] - phi_d[n]).max()))

    ok = err <= 1e-15 and identity and shuffle_err < 1e-12
    report(6, "aggregation", ok, f"max |agg - oracle| {err:.1e}, single-update identity {identity}, shuffle diff {shuffle_err:.1e}")


def test_criterion_07_dirichlet_heterogeneity():
    alphas = (0.01, 0.1, 1.0, 10.0, 1e6)
    cfg = ExperimentConfig()
    ds = EmbeddingDataset.concat(generate_synthetic(cfg.synthetic_spec))
    train, _ = split_train_test(ds, 0.8, 0)
    per_alpha = []
    valid = True
    for alpha in alphas:
        divs = []
        for seed in range(10):
            part = dirichlet_partition(train, 3, alpha, seed)
            counts = np.bincount(part.assignment, minlength=part.num_clients)
            valid &= bool(part.assignment.min() >= 0) and int(counts.sum()) == len(train) and bool((counts > 0).all())
            hist = part.histograms(train.labels, train.num_classes)
            for cid in range(part.num_clients):
                domain = cid // 3
                ref = np.bincount(train.labels[train.domains == domain], minlength=train.num_classes)
                ref = ref / ref.sum()
                divs.append(0.5 * np.abs(hist[cid] - ref).sum())
        per_alpha.append(float(np.mean(divs)))
    monotone = all(a > b for a, b in zip(per_alpha, per_alpha[1:]))
    ok = monotone and valid
    detail = ", ".join(f"a={a:g}: {d:.4f}" for a, d in zip(alphas, per_alpha))
    report(7, "Dirichlet heterogeneity", ok, f"mean TV to domain label mix {detail}; disjoint and exhaustive {valid}")


# ---------------------------------------------------------------------------
# criteria 8 and 9 share the end-to-end runs


@functools.lru_cache(maxsize=None)
def _ablation_runs():
    t0 = time.perf_counter()
    runs = {}
    for name, flags in ABLATION_ROWS:
        for seed in SEEDS:
            runs[name, seed] = run_experiment(ExperimentConfig(seed=seed, **flags))
    return runs, time.perf_counter() - t0


def test_criterion_08_ablation_ordering():
    runs, elapsed = _ablation_runs()
    means = {name: 100 * float(np.mean([runs[name, s].history[-1].average_accuracy for s in SEEDS])) for name, _ in ABLATION_ROWS}
    base, full = means["Baseline"], means["Full"]
    lo, hi = min(base, full) - 0.5, max(base, full) + 0.5
    inside = all(lo <= means[n] <= hi for n in means)
    ok = full >= base + 1.0 and inside and elapsed < 300
    detail = ", ".join(f"{n} {v:.2f}" for n, v in means.items())
    report(8, "ablation ordering", ok, f"{detail}; {elapsed:.0f}s")


def test_criterion_09_domain_adaptivity():
    runs, _ = _ablation_runs()
    gaps = []
    for s in SEEDS:
        exp = runs["Full", s]
        gaps.append(100 * diagonal_gap(cross_domain_heatmap(exp), exp.client_domains))
    ok = all(g >= 0 for g in gaps) and float(np.mean(gaps)) > 1.0
    report(9, "domain adaptivity", ok, "diag - offdiag per seed " + ", ".join(f"{g:.2f}" for g in gaps) + f"; mean {np.mean(gaps):.2f}")


def test_criterion_10_determinism_and_persistence(tmp_path):
    runs, _ = _ablation_runs()
    cfg = ExperimentConfig(seed=0)
    reference = runs["Full", 0]
    again = run_experiment(cfg)
    same_stream = [r.to_json() for r in again.history] == [r.to_json() for r in reference.history]

    half = run_experiment(cfg, rounds=cfg.rounds // 2)
    path = tmp_path / "mid.fdck"
    save_checkpoint(half, path)
    resumed = load_checkpoint(path)
    resumed.run()
    same_params = resumed.parameter_digest() == reference.parameter_digest()
    same_tail = [r.to_json() for r in resumed.history] == [r.to_json() for r in reference.history]

    ckpt_round_trip = checkpoint_bytes(load_checkpoint(path)) == path.read_bytes()
    ds = EmbeddingDataset.concat(generate_synthetic(cfg.synthetic_spec))
    emb = tmp_path / "data.fdep"
    save_embeddings(ds, emb)
    emb_round_trip = load_embeddings(emb) == ds
    save_embeddings(load_embeddings(emb), tmp_path / "again.fdep")
    emb_round_trip &= (tmp_path / "again.fdep").read_bytes() == emb.read_bytes()

    ok = same_stream and same_params and same_tail and ckpt_round_trip and emb_round_trip
    report(
        10,
        "determinism and persistence",
        ok,
        f"identical metric streams {same_stream}, resume at round {cfg.rounds // 2} bit-exact params {same_params} "
        f"and metrics {same_tail}, checkpoint round trip {ckpt_round_trip}, embedding round trip {emb_round_trip}",
    )


if __name__ == "__main__":
    import sys

    sys.exit(pytest.main([__file__, "-q", "-p", "no:cacheprovider"]))
