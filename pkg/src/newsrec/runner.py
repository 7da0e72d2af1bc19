"""End-to-end runs, repeated seeds and one-axis sweeps.

Each run writes ``run.json`` (a :class:`RunRecord`) into its output
directory. The record holds the resolved config, so :func:`replay` can launch
the same run again.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field

from . import __version__
from .config import LEAVES, ExperimentConfig
from .data.dataset import load_dataset
from .errors import ConfigError, NewsRecError, UsageError
from .evaluation import Lookup, build_cache, fast_evaluate, timing_harness
from .insight.report import emit_analysis
from .metrics import METRICS, MetricsReport
from .training import TrainingDiverged, model_from_dataset, train

log = logging.getLogger(__name__)


def code_version():
    """Package version plus a digest of the installed source files."""
    root = os.path.dirname(os.path.abspath(__file__))
    h = hashlib.blake2b(digest_size=8)
    for dirpath, dirnames, filenames in os.walk(root):
        dirnames.sort()
        for name in sorted(filenames):
            if name.endswith(".py"):
                path = os.path.join(dirpath, name)
                h.update(os.path.relpath(path, root).encode())
                with open(path, "rb") as fh:
                    h.update(fh.read())
    return f"{__version__}+{h.hexdigest()}"


@dataclass
class RunRecord:
    config: dict
    fingerprint: str
    version: str
    status: str = "running"
    epochs: list = field(default_factory=list)
    test: dict = None
    timing: dict = field(default_factory=dict)
    checkpoint: str = None
    params_fingerprint: str = None
    cache_hit: bool = None
    artifacts: list = field(default_factory=list)
    error: str = None

    @property
    def test_report(self):
        return MetricsReport.from_dict(self.test) if self.test else None

    def save(self, path):
        os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(asdict(self), fh, indent=1, sort_keys=True)
            fh.write("\n")

    @classmethod
    def load(cls, path):
        with open(path, encoding="utf-8") as fh:
            return cls(**json.load(fh))


class _Stage:
    """Times a pipeline stage and prefixes errors raised inside it with the stage name."""

    def __init__(self, name, timing):
        self.name = name
        self.timing = timing

    def __enter__(self):
        self.t0 = time.perf_counter()
        return self

    def __exit__(self, exc_type, exc, tb):
        self.timing[self.name] = round(time.perf_counter() - self.t0, 6)
        if isinstance(exc, NewsRecError) and not getattr(exc, "stage", None):
            exc.stage = self.name
            if exc.args:
                exc.args = (f"[{self.name}] {exc.args[0]}",) + tuple(exc.args[1:])
        return False


def load_run_dataset(config):
    d = config["dataset"]
    return load_dataset(d["train_dir"], d["test_dir"], d["embed_dim"], d["embedding_file"],
                        config["split"]["mode"], config["split"]["ratio"], config["seed"], d["cache"])


def run(config, out_dir=None):
    """Preprocess, train, evaluate on the test split and emit the analysis files.

    The record is written to ``<out_dir>/run.json`` whatever happens; on
    failure it carries ``status="failed"`` and the error text before the
    exception propagates.
    """
    if not isinstance(config, ExperimentConfig):
        raise UsageError("run() expects an ExperimentConfig")
    config.validate()
    out_dir = out_dir or config["output"]["dir"]
    os.makedirs(out_dir, exist_ok=True)
    record = RunRecord(config.tree, config.fingerprint(), code_version())
    record_path = os.path.join(out_dir, "run.json")
    timing = record.timing
    try:
        with _Stage("data", timing):
            ds, record.cache_hit = load_run_dataset(config)
        with _Stage("model", timing):
            model = model_from_dataset(ds, seed=config["seed"], precision=config["training"]["precision"],
                                       **config.model_kwargs())
        ckpt = os.path.join(out_dir, "checkpoint.bin")
        with _Stage("train", timing):
            try:
                _, records = train(model, ds, config.train_config(), log_path=os.path.join(out_dir, "epochs.jsonl"),
                                   checkpoint_path=ckpt, eval_batch_size=config["evaluation"]["batch_size"])
            except TrainingDiverged as exc:
                record.epochs = [r.to_dict() for r in exc.records]
                record.checkpoint = ckpt
                raise
        record.epochs = [r.to_dict() for r in records]
        record.checkpoint = ckpt
        record.params_fingerprint = model.store.fingerprint()
        with _Stage("evaluate", timing):
            ev = config["evaluation"]
            lookup = Lookup.from_dataset(ds, model.spec.max_history_len)
            cache = build_cache(model, ds.test, lookup, ev["batch_size"], ev["workers"])
            if ev["vector_cache"]:
                cache.save(ev["vector_cache"])
            report, scores = fast_evaluate(model, ds.test, lookup, cache=cache, return_scores=True,
                                           workers=ev["workers"])
            record.test = report.to_dict()
            if ev["timing"]:
                timing["eval"] = timing_harness(model, ds.test, lookup, ev["batch_size"]).to_dict()
        if config["output"]["analyze"]:
            with _Stage("analyze", timing):
                record.artifacts = emit_analysis(ds, ds.test, scores, out_dir, config["output"]["formats"],
                                                 config["evaluation"]["top_n"], config["output"]["png"])
        record.status = "ok"
        return record
    except BaseException as exc:
        record.status = "failed"
        record.error = f"{type(exc).__name__}: {exc}"
        raise
    finally:
        record.save(record_path)


def replay(record_or_path, out_dir=None):
    """Run again from a record's configuration snapshot."""
    record = RunRecord.load(record_or_path) if isinstance(record_or_path, str) else record_or_path
    return run(ExperimentConfig(record.config), out_dir)


def summarize(records):
    """Mean and sample standard deviation of each test metric (x100) over runs."""
    out = {}
    for m in METRICS:
        vals = [100.0 * r.test[f"{m}_raw"] for r in records if r.test]
        if not vals:
            continue
        mean = math.fsum(vals) / len(vals)
        std = math.sqrt(math.fsum((v - mean) ** 2 for v in vals) / (len(vals) - 1)) if len(vals) > 1 else 0.0
        out[m] = {"mean": mean, "std": std, "n": len(vals)}
    return out


def repeat(config, seeds, out_dir=None):
    """One run per seed; returns (records, summary)."""
    if not seeds:
        raise UsageError("repeat needs at least one seed")
    base = out_dir or config["output"]["dir"]
    records = [run(config.with_overrides({"seed": int(s)}), os.path.join(base, f"seed={s}")) for s in seeds]
    return records, summarize(records)


def _run_child(args):
    tree, out = args
    return run(ExperimentConfig(tree), out)


SWEEP_COLUMNS = ("auc", "mrr", "ndcg5", "ndcg10", "epochs_run", "train_seconds")


def sweep(config, axis, values, out_dir=None, parallel=False, workers=None):
    """One run per value of ``axis``; writes ``sweep.csv`` and returns (records, csv_path)."""
    if axis not in LEAVES:
        raise ConfigError(f"sweep axis {axis!r} is not a config key")
    values = list(values)
    if not values:
        raise UsageError("sweep needs at least one value")
    base = out_dir or config["output"]["dir"]
    jobs = []
    for v in values:
        cfg = config.with_overrides({axis: v})
        cfg.validate()
        jobs.append((cfg.tree, os.path.join(base, f"{axis}={v}")))
    if parallel and len(jobs) > 1:
        with ProcessPoolExecutor(workers) as pool:
            records = list(pool.map(_run_child, jobs))
    else:
        records = [_run_child(j) for j in jobs]
    path = os.path.join(base, "sweep.csv")
    write_sweep_table(path, axis, values, records)
    return records, path


def write_sweep_table(path, axis, values, records):
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow((axis,) + SWEEP_COLUMNS)
        for v, r in zip(values, records):
            t = r.test or {}
            w.writerow([v] + [f"{t[m]:.2f}" if m in t else "" for m in METRICS]
                       + [len(r.epochs), f"{r.timing.get('train', 0.0):.2f}"])
    return path
