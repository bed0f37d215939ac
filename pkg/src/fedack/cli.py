"""Command-line entry point: ``fedack <verb> ...``.

Relative output paths are resolved under ``$FEDACK_OUTPUT_ROOT`` when it is set.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from . import data as D
from . import experiment as X
from . import lingual as L
from .models import tensorize
from .numkit import ParamSet

OUTPUT_ROOT_ENV = "FEDACK_OUTPUT_ROOT"

log = logging.getLogger("fedack")


def out_path(p):
    p = Path(p)
    root = os.environ.get(OUTPUT_ROOT_ENV)
    if root and not p.is_absolute():
        p = Path(root) / p
    p.parent.mkdir(parents=True, exist_ok=True)
    return p


def in_path(p):
    """Relative inputs fall back to the output root when absent from the cwd."""
    p = Path(p)
    root = os.environ.get(OUTPUT_ROOT_ENV)
    if root and not p.is_absolute() and not p.exists() and (Path(root) / p).exists():
        return Path(root) / p
    return p


def _ints(text):
    return [int(x) for x in text.split(",") if x.strip()]


def _parse_grid(items):
    grid = {}
    for item in items:
        key, _, vals = item.partition("=")
        if not vals:
            raise ValueError(f"bad grid spec {item!r}; expected name=v1,v2,...")
        grid[key.strip()] = [float(v) for v in vals.split(",")]
    return grid


def load_config(args):
    cfg = X.ExperimentConfig.load(args.config) if args.config else X.ExperimentConfig()
    overrides = {}
    for name in ("method", "rounds", "epochs", "batch", "lr", "gamma", "mu", "tau", "alpha_kd", "fraction",
                 "n_clients", "concentration", "feature_dim", "workers"):
        v = getattr(args, name, None)
        if v is not None:
            overrides[name] = v
    if getattr(args, "seeds", None):
        overrides["seeds"] = _ints(args.seeds)
    if getattr(args, "data", None):
        overrides["data.path"] = args.data
    return cfg.replace(**overrides) if overrides else cfg


def _add_train_flags(p):
    p.add_argument("--config", help="JSON experiment config; missing keys take defaults")
    p.add_argument("--data", help="dataset JSONL (default: synthetic from config)")
    p.add_argument("--method", choices=X.METHODS)
    p.add_argument("--rounds", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--gamma", type=float)
    p.add_argument("--mu", type=float)
    p.add_argument("--tau", type=float)
    p.add_argument("--alpha-kd", dest="alpha_kd", type=float)
    p.add_argument("--fraction", type=float)
    p.add_argument("--clients", dest="n_clients", type=int)
    p.add_argument("--alpha", dest="concentration", type=float, help="Dirichlet concentration")
    p.add_argument("--feature-dim", type=int)
    p.add_argument("--workers", type=int)
    p.add_argument("--seeds", help="comma-separated, default 0,1,2")
    p.add_argument("--out", default="runs/train")


# ---------------------------------------------------------------- verbs


def cmd_gen_data(args):
    ds = D.synth_dataset(args.users, args.prop_dim, args.embed_dim, (args.tweets_min, args.tweets_max),
                         (args.tokens_min, args.tokens_max), args.sep, args.seed)
    path = out_path(args.out)
    D.save_jsonl(ds, path)
    print(f"wrote {len(ds)} users to {path}")


def cmd_partition(args):
    ds = D.load_jsonl(args.data)
    spec = D.PartitionSpec(args.alpha, args.clients, args.seed)
    shards, stats = D.dirichlet_partition(ds, spec)
    path = out_path(args.out)
    D.save_partition(spec, shards, ds, path)
    print(f"wrote {len(shards)} shards to {path}; per-client label counts: {stats.counts.tolist()}")


def cmd_train(args):
    cfg = load_config(args)
    print(json.dumps(cfg.to_dict(), indent=1))
    root = out_path(Path(args.out) / "_")
    root = root.parent
    for o in X.run_seeds(cfg, root):
        r = o.result
        print(f"method={r.method} seed={r.seed} max_acc={r.max_accuracy:.4f} final_acc={r.final_accuracy:.4f} "
              f"rounds_to_target={r.rounds_to_target} time={r.wall_clock:.1f}s")


def cmd_sweep(args):
    cfg = load_config(args)
    grid = _parse_grid(args.grid)
    print(json.dumps({"config": cfg.to_dict(), "grid": grid}, indent=1))
    root = out_path(Path(args.out) / "_").parent
    raw, summary = X.sweep(cfg, grid, root)
    X.write_rows_csv(raw, root / "raw.csv")
    X.write_rows_csv(summary, root / "summary.csv")
    for row in summary:
        print(row)


def cmd_export_features(args):
    run_dir = in_path(args.run)
    cfg = X.ExperimentConfig.load(run_dir / "config.json")
    if cfg.feature_dim != 2:
        raise ValueError(f"run uses feature_dim={cfg.feature_dim}; feature export needs a run with --feature-dim 2")
    rounds = sorted(run_dir.glob("round_*"), key=lambda p: int(p.name.split("_")[1]))
    if not args.checkpoint and not rounds:
        raise ValueError(f"no round_* checkpoints under {run_dir}")
    ckpt = in_path(args.checkpoint) if args.checkpoint else rounds[-1]
    extractors = {}
    for f in sorted((ckpt / "clients").glob("client_*_extractor.json")):
        k = int(f.stem.split("_")[1])
        extractors[k] = ParamSet.from_dict(json.loads(f.read_text())["params"])
    if args.clients:
        wanted = set(_ints(args.clients))
        extractors = {k: v for k, v in extractors.items() if k in wanted}
    if not extractors:
        raise ValueError(f"no client extractors found under {ckpt / 'clients'}")
    dataset = X.load_dataset(cfg.data)
    _, test_idx = D.train_test_split(dataset, cfg.data.test_fraction, cfg.data.seed)
    test = dataset.subset(test_idx)
    batch = tensorize(test.users, cfg.data.prop_dim, cfg.data.embed_dim)
    rows = X.export_features(extractors, batch, [u.id for u in test.users])
    path = out_path(args.out)
    X.write_features_csv(rows, path)
    print(f"wrote {len(rows)} rows for clients {sorted(extractors)} to {path}")


def cmd_align(args):
    pairs = L.load_pairs(args.pairs_file) if args.pairs_file else L.synth_bilingual(
        args.pairs, args.dim, args.tokens, args.noise, args.seed)
    cfg = L.AlignConfig(dim=pairs[0].source.tokens.shape[1] if pairs else args.dim, epochs=args.epochs,
                        lr=args.lr, parallel_weight=args.parallel_weight)
    _, report = L.train_alignment(pairs, cfg, seed=args.seed)
    path = out_path(args.out)
    path.write_text(report.to_json())
    print(f"initial cosine {report.initial_cosine:.4f} -> final {report.final_cosine:.4f}; report at {path}")


def cmd_score_consistency(args):
    rows = X.read_features_csv(in_path(args.features))
    print(f"{X.feature_consistency_score(rows):.6f}")


# ---------------------------------------------------------------- parser


def build_parser():
    ap = argparse.ArgumentParser(prog="fedack", description=__doc__)
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="verb", required=True)

    p = sub.add_parser("gen-data", help="write a synthetic account dataset as JSONL")
    p.add_argument("--users", type=int, default=2000)
    p.add_argument("--prop-dim", type=int, default=8)
    p.add_argument("--embed-dim", type=int, default=16)
    p.add_argument("--sep", type=float, default=2.0)
    p.add_argument("--tweets-min", type=int, default=1)
    p.add_argument("--tweets-max", type=int, default=6)
    p.add_argument("--tokens-min", type=int, default=4)
    p.add_argument("--tokens-max", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="data/users.jsonl")
    p.set_defaults(fn=cmd_gen_data)

    p = sub.add_parser("partition", help="Dirichlet non-IID split of a dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--clients", type=int, default=10)
    p.add_argument("--alpha", type=float, default=0.5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="data/partition.json")
    p.set_defaults(fn=cmd_partition)

    p = sub.add_parser("train", help="run one method for every seed")
    _add_train_flags(p)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("sweep", help="train over a hyperparameter grid")
    _add_train_flags(p)
    p.add_argument("--grid", action="append", required=True, help="name=v1,v2 (repeatable)")
    p.set_defaults(fn=cmd_sweep, out="runs/sweep")

    p = sub.add_parser("export-features", help="2-D test features per client from a finished run")
    p.add_argument("--run", required=True, help="run directory holding config.json and round_*/")
    p.add_argument("--checkpoint", help="round directory (default: last round)")
    p.add_argument("--clients", help="comma-separated client ids (default: all exported)")
    p.add_argument("--out", default="features.csv")
    p.set_defaults(fn=cmd_export_features)

    p = sub.add_parser("align", help="train the cross-lingual mapper on bilingual pairs")
    p.add_argument("--pairs-file", help="JSONL of {src, tgt} token matrices")
    p.add_argument("--pairs", type=int, default=500)
    p.add_argument("--dim", type=int, default=16)
    p.add_argument("--tokens", type=int, default=8)
    p.add_argument("--noise", type=float, default=0.01)
    p.add_argument("--epochs", type=int, default=200)
    p.add_argument("--lr", type=float, default=0.01)
    p.add_argument("--parallel-weight", type=float, default=1.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="align_report.json")
    p.set_defaults(fn=cmd_align)

    p = sub.add_parser("score-consistency", help="feature-space consistency of an exported CSV")
    p.add_argument("--features", required=True)
    p.set_defaults(fn=cmd_score_consistency)
    return ap


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    if not args.verbose:
        logging.getLogger("fedack.client").setLevel(logging.ERROR)
    try:
        args.fn(args)
    except (ValueError, OSError, FloatingPointError, KeyError) as e:
        print(f"fedack {args.verb}: error: {e}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
