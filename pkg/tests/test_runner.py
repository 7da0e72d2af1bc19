import csv
import json
import os

import pytest

from newsrec.cli import main, parse_values
from newsrec.config import resolve_config
from newsrec.errors import ConfigError, DataError, UsageError
from newsrec.runner import RunRecord, repeat, replay, run, summarize, sweep

TINY_SET = ["dataset.embed_dim=8", "model.heads=2", "model.head_dim=4", "model.d_att=6", "model.max_title_len=8",
            "model.max_history_len=10", "model.filters=8", "model.category_dim=4", "training.epochs=2",
            "output.png=false"]


@pytest.fixture
def cfg(small_data_dir, tmp_path):
    return resolve_config(overrides=[f"dataset.train_dir={small_data_dir / 'train'}",
                                     f"dataset.test_dir={small_data_dir / 'test'}",
                                     f"output.dir={tmp_path / 'out'}"] + TINY_SET)


def test_run_writes_record_and_artifacts(cfg, tmp_path):
    rec = run(cfg, str(tmp_path / "r"))
    assert rec.status == "ok" and len(rec.epochs) == 2
    loaded = RunRecord.load(str(tmp_path / "r" / "run.json"))
    assert loaded.test == rec.test and loaded.fingerprint == cfg.fingerprint()
    assert loaded.config == cfg.tree
    assert {"data", "model", "train", "evaluate", "analyze"} <= set(loaded.timing)
    for p in rec.artifacts:
        assert os.path.exists(tmp_path / "r" / p)
    assert os.path.exists(tmp_path / "r" / "epochs.jsonl")


def test_replay_is_bitwise_identical(cfg, tmp_path):
    a = run(cfg, str(tmp_path / "a"))
    b = replay(str(tmp_path / "a" / "run.json"), str(tmp_path / "b"))
    assert a.test == b.test
    assert a.params_fingerprint == b.params_fingerprint
    assert open(tmp_path / "a" / "checkpoint.bin", "rb").read() == open(tmp_path / "b" / "checkpoint.bin", "rb").read()
    assert [e | {"seconds": 0} for e in a.epochs] == [e | {"seconds": 0} for e in b.epochs]


def test_failure_names_stage_and_still_records(cfg, tmp_path):
    bad = cfg.with_overrides({"dataset.train_dir": str(tmp_path / "missing")})
    with pytest.raises(DataError, match=r"^\[data\]"):
        run(bad, str(tmp_path / "f"))
    rec = RunRecord.load(str(tmp_path / "f" / "run.json"))
    assert rec.status == "failed" and "[data]" in rec.error


@pytest.mark.filterwarnings("ignore::RuntimeWarning")  # the diverging run overflows on purpose
def test_divergence_records_completed_epochs(cfg, tmp_path):
    from newsrec.training import TrainingDiverged
    bad = cfg.with_overrides({"training.learning_rate": 1e9})
    with pytest.raises(TrainingDiverged):
        run(bad, str(tmp_path / "d"))
    assert RunRecord.load(str(tmp_path / "d" / "run.json")).status == "failed"


def test_repeat_summary(cfg, tmp_path):
    records, summary = repeat(cfg.with_overrides({"training.epochs": 1}), [0, 1, 2], str(tmp_path / "rep"))
    assert len(records) == 3
    aucs = [100 * r.test["auc_raw"] for r in records]
    mean = sum(aucs) / 3
    assert summary["auc"]["mean"] == pytest.approx(mean)
    assert summary["auc"]["std"] == pytest.approx((sum((a - mean) ** 2 for a in aucs) / 2) ** 0.5)
    assert summarize(records[:1])["auc"]["std"] == 0.0


def test_sweep_table(cfg, tmp_path):
    records, path = sweep(cfg.with_overrides({"training.epochs": 1}), "training.batch_size", [16, 32],
                          str(tmp_path / "sw"))
    assert len(records) == 2
    rows = list(csv.reader(open(path)))
    assert rows[0][:5] == ["training.batch_size", "auc", "mrr", "ndcg5", "ndcg10"]
    assert [r[0] for r in rows[1:]] == ["16", "32"]
    assert float(rows[1][1]) == pytest.approx(records[0].test["auc"], abs=0.005)
    # same seed everywhere unless overridden
    assert {r.config["seed"] for r in records} == {cfg["seed"]}


def test_sweep_errors(cfg, tmp_path):
    with pytest.raises(UsageError):
        sweep(cfg, "training.batch_size", [], str(tmp_path))
    with pytest.raises(ConfigError):
        sweep(cfg, "training.bach_size", [1], str(tmp_path))
    with pytest.raises(ConfigError):
        sweep(cfg, "training.batch_size", ["big"], str(tmp_path))


def test_parallel_sweep_matches_sequential(cfg, tmp_path):
    c = cfg.with_overrides({"training.epochs": 1, "output.analyze": False})
    seq, _ = sweep(c, "sampling.strategy", ["shuffled", "unshuffled"], str(tmp_path / "s"))
    par, _ = sweep(c, "sampling.strategy", ["shuffled", "unshuffled"], str(tmp_path / "p"), parallel=True, workers=2)
    assert [r.test for r in seq] == [r.test for r in par]


# -- CLI -----------------------------------------------------------------------------


def _cli(capsys, *argv):
    code = main(list(argv))
    return code, capsys.readouterr()


def _data_sets(d):
    return ["--set", f"dataset.train_dir={d / 'train'}", "--set", f"dataset.test_dir={d / 'test'}"] + \
        [a for s in TINY_SET for a in ("--set", s)]


def test_cli_train_evaluate_analyze(small_data_dir, tmp_path, capsys):
    sets = _data_sets(small_data_dir)
    out = str(tmp_path / "cli")
    code, res = _cli(capsys, "train", *sets, "--out", out, "--seed", "3")
    assert code == 0
    header, row = [line.split("\t") for line in res.out.strip().splitlines()]
    assert header == ["run", "auc", "mrr", "ndcg5", "ndcg10", "epochs", "status"] and row[-1] == "ok"
    assert json.load(open(os.path.join(out, "run.json")))["config"]["seed"] == 3

    code, res = _cli(capsys, "evaluate", *sets, "--out", out, "--seed", "3", "--timing")
    assert code == 0
    first = res.out.split("\n\n")[0].splitlines()
    assert first[1].split("\t")[1:5] == row[1:5]
    assert "speedup" in res.out

    code, res = _cli(capsys, "evaluate", *sets, "--out", out, "--seed", "3", "--naive")
    assert code == 0 and res.out.splitlines()[1].split("\t")[1:5] == row[1:5]

    code, res = _cli(capsys, "analyze", *sets, "--out", out, "--seed", "3")
    assert code == 0 and "distribution.svg" in res.out


def test_cli_synth_and_preprocess(tmp_path, capsys):
    d = tmp_path / "syn"
    code, res = _cli(capsys, "synth", "--topics", "3", "--users", "10", "--articles", "30", "--impressions", "50",
                     "--out", str(d))
    assert code == 0 and (d / "train" / "behaviors.tsv").exists()
    assert res.out.splitlines()[0] == "split\tdir\timpressions\tarticles"
    code, res = _cli(capsys, "preprocess", "--set", f"dataset.train_dir={d / 'train'}",
                     "--set", f"dataset.test_dir={d / 'test'}", "--set", "dataset.embed_dim=4")
    assert code == 0
    stats = dict(line.split("\t") for line in res.out.strip().splitlines()[1:])
    assert stats["articles"] == "30" and stats["test_impressions"] == "10"


def test_cli_sweep(small_data_dir, tmp_path, capsys):
    out = tmp_path / "sw"
    code, res = _cli(capsys, "sweep", *_data_sets(small_data_dir), "--set", "training.epochs=1", "--out", str(out),
                     "--axis", "training.batch_size", "--values", "16,64")
    assert code == 0 and (out / "sweep.csv").exists()
    assert [line.split("\t")[0] for line in res.out.strip().splitlines()] == ["training.batch_size", "16", "64"]


@pytest.mark.filterwarnings("ignore::RuntimeWarning")  # the diverging run overflows on purpose
def test_cli_exit_codes(small_data_dir, tmp_path, capsys):
    sets = _data_sets(small_data_dir)
    assert _cli(capsys, "train", "--set", "trainin.batch=1")[0] == 2
    assert _cli(capsys, "train")[0] == 2  # required keys missing
    assert _cli(capsys, "sweep", *sets, "--axis", "training.epochs", "--values", "")[0] == 2
    assert _cli(capsys, "train", "--set", f"dataset.train_dir={tmp_path}/x", "--set",
                f"dataset.test_dir={tmp_path}/y", "--out", str(tmp_path / "missing"))[0] == 3
    (tmp_path / "junk.bin").write_bytes(b"nope")
    assert _cli(capsys, "evaluate", *sets, "--checkpoint", str(tmp_path / "junk.bin"))[0] == 3
    assert _cli(capsys, "train", *sets, "--out", str(tmp_path / "div"),
                "--set", "training.learning_rate=1e9")[0] == 4
    with pytest.raises(SystemExit) as exc:
        main(["bogus"])
    assert exc.value.code == 2


def test_unknown_key_message(capsys):
    code, res = _cli(capsys, "train", "--set", "trainin.batch=1")
    assert code == 2 and "did you mean 'training.batch_size'" in res.err


def test_parse_values():
    assert parse_values("16,32,64") == [16, 32, 64]
    assert parse_values("[shuffled, unshuffled]") == ["shuffled", "unshuffled"]
    assert parse_values("") == []
