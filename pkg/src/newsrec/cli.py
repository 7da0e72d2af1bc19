"""Command-line entry point.

Results go to stdout as tab-delimited rows (a header row, then data rows);
logs go to stderr. Exit codes: 0 success, 2 config or usage error, 3 data
error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys

import yaml

from .errors import ConfigError, DataError, DegenerateInputError, DimensionError, NumericError, UsageError

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
METRIC_COLS = ("auc", "mrr", "ndcg5", "ndcg10")


def _rows(header, rows, out=None):
    out = out or sys.stdout
    out.write("\t".join(map(str, header)) + "\n")
    for r in rows:
        out.write("\t".join(_fmt(v) for v in r) + "\n")
    out.flush()


def _fmt(v):
    if isinstance(v, float):
        return f"{v:.4f}"
    return "" if v is None else str(v)


def _config(args, require=True):
    from .config import resolve_config
    overrides = list(args.set or [])
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    if args.out:
        overrides.append(f"output.dir={args.out}")
    return resolve_config(args.config, overrides=overrides, require=require)


def _dataset(cfg):
    from .runner import load_run_dataset
    return load_run_dataset(cfg)


# -- commands ------------------------------------------------------------------------


def cmd_synth(args):
    from .data.synthetic import SyntheticSpec, generate_synthetic
    spec = SyntheticSpec(topics=args.topics, users=args.users, articles=args.articles,
                         impressions=args.impressions, purity=args.purity)
    if not 0 <= spec.purity <= 1:
        raise ConfigError("--purity must be in [0, 1]")
    out = args.out or "synthetic"
    data = generate_synthetic(out, spec, seed=args.seed or 0)
    _rows(("split", "dir", "impressions", "articles"),
          [("train", os.path.join(out, "train"), len(data.train), len(data.articles)),
           ("test", os.path.join(out, "test"), len(data.test), len(data.articles))])


def cmd_preprocess(args):
    cfg = _config(args)
    ds, hit = _dataset(cfg)
    st = ds.stats
    _rows(("key", "value"), [
        ("articles", len(ds.articles)), ("vocab", len(ds.vocab)), ("users", len(ds.users) - 1),
        ("train_impressions", len(ds.train)), ("valid_impressions", len(ds.valid)),
        ("test_impressions", len(ds.test)), ("rejected_empty_title", st.rejected_empty_title),
        ("duplicate_ids", st.duplicate_ids), ("dropped_history_refs", st.dropped_history_refs),
        ("dropped_candidate_refs", st.dropped_candidate_refs), ("dropped_impressions", st.dropped_impressions),
        ("embedding_hits", st.embedding_hits), ("cache_hit", hit),
    ])


def _record_row(label, rec):
    t = rec.test or {}
    return (label,) + tuple(t.get(m) for m in METRIC_COLS) + (len(rec.epochs), rec.status)


def cmd_train(args):
    from .runner import repeat, run
    cfg = _config(args)
    header = ("run",) + METRIC_COLS + ("epochs", "status")
    if args.seeds:
        seeds = [int(s) for s in args.seeds.split(",") if s.strip()]
        records, summary = repeat(cfg, seeds)
        rows = [_record_row(f"seed={s}", r) for s, r in zip(seeds, records)]
        rows.append(("mean",) + tuple(summary[m]["mean"] for m in METRIC_COLS) + (None, None))
        rows.append(("std",) + tuple(summary[m]["std"] for m in METRIC_COLS) + (None, None))
        _rows(header, rows)
    else:
        rec = run(cfg)
        _rows(header, [_record_row(cfg["output"]["dir"], rec)])


def _load_for_eval(args):
    from .evaluation import Lookup
    from .training import model_from_checkpoint
    cfg = _config(args)
    ckpt = args.checkpoint or os.path.join(cfg["output"]["dir"], "checkpoint.bin")
    ds, _ = _dataset(cfg)
    model = model_from_checkpoint(ckpt, ds)
    return cfg, ds, model, Lookup.from_dataset(ds, model.spec.max_history_len)


def cmd_evaluate(args):
    from .evaluation import evaluate_naive, fast_evaluate, timing_harness
    cfg, ds, model, lookup = _load_for_eval(args)
    ev = cfg["evaluation"]
    imps = ds.test if args.split == "test" else ds.valid
    if args.naive:
        report = evaluate_naive(model, imps, lookup)
    else:
        report = fast_evaluate(model, imps, lookup, batch_size=ev["batch_size"], workers=ev["workers"])
    d = report.to_dict()
    _rows(("split",) + METRIC_COLS + ("n_evaluated", "n_skipped"),
          [(args.split,) + tuple(d[m] for m in METRIC_COLS) + (d["n_evaluated"], d["n_skipped"])])
    if args.timing:
        t = timing_harness(model, imps, lookup, ev["batch_size"]).to_dict()
        sys.stdout.write("\n")
        _rows(("key", "value"), sorted(t.items()))


def cmd_analyze(args):
    from .insight.report import emit_analysis
    cfg = _config(args)
    out_dir = cfg["output"]["dir"]
    if args.checkpoint or os.path.exists(os.path.join(out_dir, "checkpoint.bin")):
        from .evaluation import fast_evaluate
        cfg, ds, model, lookup = _load_for_eval(args)
        _, scores = fast_evaluate(model, ds.test, lookup, return_scores=True,
                                  batch_size=cfg["evaluation"]["batch_size"])
    else:
        ds, _ = _dataset(cfg)
        scores = None
    paths = emit_analysis(ds, ds.test, scores, out_dir, cfg["output"]["formats"], cfg["evaluation"]["top_n"],
                          cfg["output"]["png"])
    _rows(("artifact",), [(os.path.join(out_dir, p),) for p in paths])


def parse_values(text):
    """``16,32,64`` or a YAML list; each item parsed as a YAML scalar."""
    text = text.strip()
    if text.startswith("["):
        try:
            vals = yaml.safe_load(text)
        except yaml.YAMLError as exc:
            raise UsageError(f"--values: {exc}") from None
        if not isinstance(vals, list):
            raise UsageError("--values must be a list")
        return vals
    return [yaml.safe_load(v) for v in text.split(",") if v.strip()]


def cmd_sweep(args):
    from .runner import sweep
    cfg = _config(args)
    values = parse_values(args.values)
    records, path = sweep(cfg, args.axis, values, parallel=args.parallel, workers=args.workers)
    _rows((args.axis,) + METRIC_COLS + ("epochs", "status"),
          [_record_row(v, r) for v, r in zip(values, records)])
    logging.getLogger(__name__).info("table written to %s", path)


# -- parser --------------------------------------------------------------------------


def _common(p, out_help="output directory (sets output.dir)"):
    p.add_argument("--config", help="YAML config file")
    p.add_argument("--set", action="append", metavar="PATH=VALUE", help="override a config key (repeatable)")
    p.add_argument("--seed", type=int, help="shorthand for --set seed=N")
    p.add_argument("--out", help=out_help)


def build_parser():
    ap = argparse.ArgumentParser(prog="newsrec", description="Neural news recommendation experiments.")
    ap.add_argument("-v", "--verbose", action="count", default=0)
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write planted-preference synthetic data in MIND layout")
    p.add_argument("--topics", type=int, default=10)
    p.add_argument("--users", type=int, default=200)
    p.add_argument("--articles", type=int, default=500)
    p.add_argument("--impressions", type=int, default=10_000)
    p.add_argument("--purity", type=float, default=0.9)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="target directory (gets train/ and test/)")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("preprocess", help="parse, split and cache a dataset")
    _common(p)
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("train", help="train, evaluate on test and write the run record")
    _common(p)
    p.add_argument("--seeds", help="comma-separated seeds; one run each plus mean and std")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="score a checkpoint")
    _common(p)
    p.add_argument("--checkpoint", help="defaults to <output.dir>/checkpoint.bin")
    p.add_argument("--split", choices=("test", "valid"), default="test")
    p.add_argument("--naive", action="store_true", help="full forward pass per impression")
    p.add_argument("--timing", action="store_true", help="also time fast against naive evaluation")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("analyze", help="write exposure and distribution artifacts")
    _common(p)
    p.add_argument("--checkpoint", help="model used for the recommended side")
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("sweep", help="one run per value of a config key")
    _common(p)
    p.add_argument("--axis", required=True, help="dotted config key, e.g. training.batch_size")
    p.add_argument("--values", required=True, help="comma-separated values or a YAML list")
    p.add_argument("--parallel", action="store_true")
    p.add_argument("--workers", type=int)
    p.set_defaults(func=cmd_sweep)
    return ap


def exit_code(exc):
    if isinstance(exc, (ConfigError, UsageError)):
        return EXIT_CONFIG
    if isinstance(exc, (DataError, OSError)):
        return EXIT_DATA
    if isinstance(exc, (NumericError, DimensionError, DegenerateInputError)):
        return EXIT_NUMERIC
    return 1


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except (ConfigError, UsageError, DataError, OSError, NumericError, DimensionError, DegenerateInputError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exit_code(exc)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
