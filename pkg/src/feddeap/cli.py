"""Command line entry point (``feddeap <subcommand>``).

Exit codes: 0 success, 2 configuration error, 3 data error, 4 runtime error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import etf
from .config import PRESETS, ExperimentConfig, load_config
from .data import generate_synthetic
from .encoders import EmbeddingDataset, load_embeddings, read_header, save_embeddings
from .errors import ConfigError, DataError, DimensionMismatch, FedDeapError
from .evaluation import cross_domain_heatmap, diagonal_gap, evaluate, export_features, format_table
from .experiment import ABLATION_ROWS, load_checkpoint, run_ablation, run_experiment, save_checkpoint

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_RUNTIME = 0, 2, 3, 4


def _config(args) -> ExperimentConfig:
    if getattr(args, "config", None):
        cfg = load_config(args.config)
    else:
        cfg = PRESETS[getattr(args, "preset", "desk") or "desk"]
    if getattr(args, "seed", None) is not None:
        cfg = cfg.replace(seed=args.seed)
    return cfg


def _emit(args, payload, text: str) -> None:
    print(json.dumps(payload, sort_keys=True) if args.json else text)


def cmd_generate_data(args) -> int:
    cfg = _config(args)
    ds = EmbeddingDataset.concat(generate_synthetic(cfg.synthetic_spec))
    save_embeddings(ds, args.out)
    _emit(args, {"path": str(args.out), "records": len(ds)}, f"wrote {len(ds)} raw records to {args.out}")
    return EXIT_OK


def cmd_inspect_data(args) -> int:
    head = read_header(Path(args.path).read_bytes())
    ds = load_embeddings(args.path)
    counts = ds.counts()
    payload = dict(head, per_domain=counts.sum(axis=1).tolist(), per_class=counts.sum(axis=0).tolist())
    lines = [f"{k}: {v}" for k, v in head.items()]
    lines.append("per-domain counts: " + " ".join(map(str, payload["per_domain"])))
    lines.append("per-class counts:  " + " ".join(map(str, payload["per_class"])))
    _emit(args, payload, "\n".join(lines))
    return EXIT_OK


def cmd_train(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ckpt = out / "checkpoint.fdck"
    metrics_path = out / "metrics.jsonl"
    if args.resume:
        exp = load_checkpoint(args.resume)
        if args.config:
            # a config given with --resume may only extend the number of rounds
            cfg = load_config(args.config)
            if cfg.replace(rounds=exp.config.rounds) != exp.config:
                raise ConfigError("--config differs from the checkpoint's config beyond 'rounds'")
            exp.config = cfg
            exp.server.config = cfg
    else:
        exp = run_experiment(_config(args), rounds=0)
    with metrics_path.open("w", encoding="utf-8") as fh:
        for r in exp.history:
            fh.write(r.to_json() + "\n")

        def write(record):
            fh.write(record.to_json() + "\n")
            fh.flush()
            if not args.json:
                print(record.to_json())

        exp.run(checkpoint_path=ckpt, on_record=write)
    save_checkpoint(exp, ckpt)
    final = exp.history[-1]
    _emit(args, json.loads(final.to_json()), format_table(final) + f"\ncheckpoint: {ckpt}\nmetrics: {metrics_path}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    exp = load_checkpoint(args.checkpoint)
    rec = evaluate(exp, exp.server.round)
    _emit(args, json.loads(rec.to_json()), format_table(rec))
    return EXIT_OK


def cmd_heatmap(args) -> int:
    exp = load_checkpoint(args.checkpoint)
    heat = cross_domain_heatmap(exp)
    gap = diagonal_gap(heat, exp.client_domains)
    rows = [" ".join(f"{100 * v:6.2f}" for v in row) for row in heat]
    text = "rows: client domain prompt, columns: test domain\n" + "\n".join(rows) + f"\ndiagonal gap: {100 * gap:.2f}"
    _emit(args, {"heatmap": heat.tolist(), "diagonal_gap": gap}, text)
    return EXIT_OK


def cmd_ablate(args) -> int:
    cfg = _config(args)
    seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else [cfg.seed]
    rows = run_ablation(cfg, seeds)
    text = "\n".join(f"{name:<24} {100 * acc:6.2f}" for name, acc in rows)
    _emit(args, {"seeds": seeds, "rows": [{"component": n, "average_accuracy": a} for n, a in rows]}, text)
    return EXIT_OK


def cmd_bounds(args) -> int:
    rep = etf.bound_report(args.k)
    text = "\n".join(
        [
            f"K                         {rep.k_classes}",
            f"delta                     {rep.delta:.10f}",
            f"entropy floor H(K) [nats] {rep.entropy_floor:.10f}",
            f"MI bound (up to const)    {rep.mi_lower_bound_up_to_const:.10f}",
            f"note: {rep.gamma_note}",
        ]
    )
    _emit(args, rep.as_dict(), text)
    return EXIT_OK


def cmd_export_features(args) -> int:
    exp = load_checkpoint(args.checkpoint)
    if args.split == "test":
        shard = EmbeddingDataset.concat(exp.test_sets)
    else:
        shard = EmbeddingDataset.concat([c.shard for c in exp.clients])
    n = export_features(exp, shard, args.out)
    _emit(args, {"path": str(args.out), "rows": n}, f"wrote {n} rows to {args.out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="feddeap", description="Dual-prompt federated prompt tuning simulator")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config=True, seed=True):
        sp.add_argument("--json", action="store_true", help="machine-readable output")
        if config:
            sp.add_argument("--config", help="flat TOML experiment config")
            sp.add_argument("--preset", choices=sorted(PRESETS), default="desk")
        if seed:
            sp.add_argument("--seed", type=int)

    sp = sub.add_parser("generate-data", help="write a synthetic raw-feature dataset")
    common(sp)
    sp.add_argument("--spec", dest="config", help="alias of --config")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_generate_data)

    sp = sub.add_parser("inspect-data", help="print an embedding file's header and counts")
    common(sp, config=False, seed=False)
    sp.add_argument("path")
    sp.set_defaults(func=cmd_inspect_data)

    sp = sub.add_parser("train", help="run federated training")
    common(sp)
    sp.add_argument("--resume", help="checkpoint to continue from")
    sp.add_argument("--out", default="runs/latest")
    sp.set_defaults(func=cmd_train)

    for name, func, help_ in (
        ("evaluate", cmd_evaluate, "per-domain accuracy of a checkpoint"),
        ("heatmap", cmd_heatmap, "prompt-domain x image-domain accuracy matrix"),
    ):
        sp = sub.add_parser(name, help=help_)
        common(sp, config=False, seed=False)
        sp.add_argument("--checkpoint", "--resume", dest="checkpoint", required=True)
        sp.set_defaults(func=func)

    sp = sub.add_parser("ablate", help=f"run the {len(ABLATION_ROWS)} ablation rows")
    common(sp)
    sp.add_argument("--seeds", help="comma-separated seeds, e.g. 0,1,2")
    sp.set_defaults(func=cmd_ablate)

    sp = sub.add_parser("bounds", help="closed-form ETF bounds for K classes")
    common(sp, config=False, seed=False)
    sp.add_argument("--k", type=int, required=True)
    sp.set_defaults(func=cmd_bounds)

    sp = sub.add_parser("export-features", help="dump text/image features for external plotting")
    common(sp, config=False, seed=False)
    sp.add_argument("--checkpoint", "--resume", dest="checkpoint", required=True)
    sp.add_argument("--split", choices=("test", "train"), default="test")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_export_features)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, DimensionMismatch, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (FedDeapError, ValueError, ArithmeticError) as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
