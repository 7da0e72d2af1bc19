import time
from contextlib import contextmanager

import numpy as np
import pytest

from newsrec.data import SyntheticSpec, generate_synthetic, preprocess
from newsrec.training import model_from_dataset

TINY = dict(heads=2, head_dim=4, d_att=6, filters=8, window=3, max_title_len=8, max_abstract_len=8,
            max_history_len=10, category_dim=4, dropout=0.2)


@pytest.fixture(scope="session")
def small_dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("small")
    spec = SyntheticSpec(topics=4, users=40, articles=80, impressions=700, words_per_topic=12)
    generate_synthetic(str(root), spec, seed=11)
    return preprocess(str(root / "train"), str(root / "test"), embed_dim=8, seed=0)


@pytest.fixture(scope="session")
def small_data_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("small_dir")
    spec = SyntheticSpec(topics=4, users=40, articles=80, impressions=400, words_per_topic=12)
    generate_synthetic(str(root), spec, seed=5)
    return root


@pytest.fixture
def make_model(small_dataset):
    def factory(family="nrms", seed=0, precision="f32", **kw):
        cfg = dict(TINY, **kw)
        return model_from_dataset(small_dataset, seed=seed, precision=precision, family=family, **cfg)
    return factory


def rows_equal(a, b):
    return all(np.array_equal(x, y) for x, y in zip(a, b)) and len(a) == len(b)


# -- acceptance verdict lines ----------------------------------------------------------

ACCEPTANCE = {}


@contextmanager
def criterion(n, title):
    """Record PASS/FAIL/SKIP for acceptance criterion ``n``; the body fills ``rec["detail"]``."""
    rec = {"title": title, "status": "FAIL", "detail": ""}
    ACCEPTANCE[n] = rec
    t0 = time.perf_counter()
    try:
        yield rec
    except pytest.skip.Exception as exc:
        rec["status"] = "SKIP"
        rec["detail"] = rec["detail"] or str(exc.msg)
        raise
    except BaseException as exc:
        msg = f"{type(exc).__name__}: {exc}".splitlines()[0][:160]
        rec["detail"] = f"{rec['detail']}; {msg}" if rec["detail"] else msg
        raise
    else:
        rec["status"] = "PASS"
    finally:
        rec["seconds"] = time.perf_counter() - t0


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        r = ACCEPTANCE[n]
        terminalreporter.write_line(f"{r['status']:4}  criterion {n}: {r['title']} ({r['seconds']:.1f}s) {r['detail']}")
