import numpy as np
import pytest

from newsrec.data.mind import ImpressionLog
from newsrec.errors import CacheMissError, DataError, StaleCacheError
from newsrec.evaluation import (
    Lookup,
    VectorCache,
    build_cache,
    evaluate_naive,
    fast_evaluate,
    precompute_news,
    precompute_users,
    timing_harness,
)
from newsrec.metrics import METRICS, ImpressionScores, auc, mrr, ndcg_at_k
from newsrec.training import TrainConfig, train


@pytest.fixture
def lookup(small_dataset):
    return Lookup.from_dataset(small_dataset, 10)


@pytest.mark.parametrize("family", ["nrms", "naml", "lstur"])
def test_fast_matches_naive(make_model, small_dataset, lookup, family):
    model = make_model(family)
    imps = small_dataset.test[:120]
    fast, fs = fast_evaluate(model, imps, lookup, return_scores=True)
    naive, ns = evaluate_naive(model, imps, lookup, return_scores=True)
    for m in METRICS:
        assert abs(getattr(fast, m) - getattr(naive, m)) < 1e-5
    for a, b in zip(fs, ns):
        assert np.max(np.abs(a - b)) < 1e-5
        np.testing.assert_array_equal(np.argsort(-a, kind="stable"), np.argsort(-b, kind="stable"))


def test_each_article_encoded_once(make_model, small_dataset, lookup):
    model = make_model("nrms")
    imps = small_dataset.test
    ids = {n for i in imps for n, _ in i.candidates} | {n for i in imps for n in i.history}
    model.reset_counters()
    cache = build_cache(model, imps, lookup, batch_size=7)
    assert model.news_encoder_calls == len(ids) == len(cache.news_ids)
    keys = {(i.user_id, tuple(i.history[-10:])) for i in imps}
    assert model.user_encoder_calls == len(keys)


def test_batched_precompute_bitwise_equals_single(make_model, small_dataset, lookup):
    model = make_model("naml")
    ids = list(small_dataset.articles)[:30]
    index, matrix = precompute_news(model, ids, lookup, batch_size=8)
    for n in ids[:10]:
        single = model.encode_news(lookup.rows([n]))[0]
        assert single.tobytes() == matrix[index[n]].tobytes()


def test_user_cache_keys(make_model, small_dataset, lookup):
    model = make_model("lstur")
    a = ImpressionLog("1", "U1", 0, ["N1", "N2"], [("N3", 1), ("N4", 0)])
    b = ImpressionLog("2", "U1", 5, ["N1", "N2"], [("N5", 1), ("N4", 0)])
    c = ImpressionLog("3", "U1", 9, ["N2"], [("N5", 1), ("N4", 0)])
    model.reset_counters()
    cache = build_cache(model, [a, b], lookup)
    assert model.user_encoder_calls == 1 and len(cache.user_keys) == 1
    cache = build_cache(model, [a, b, c], lookup)
    assert len(cache.user_keys) == 2


def test_empty_history_user(make_model, lookup):
    model = make_model("nrms")
    imp = ImpressionLog("1", "U1", 0, [], [("N3", 1), ("N4", 0)])
    model.empty_histories = 0
    cache = build_cache(model, [imp], lookup)
    assert model.empty_histories == 1
    assert not cache.user_matrix.any()


def test_warm_cache_no_encoder_calls(make_model, small_dataset, lookup):
    model = make_model("nrms")
    imps = small_dataset.valid
    cache = build_cache(model, imps, lookup)
    model.reset_counters()
    fast_evaluate(model, imps, lookup, cache=cache)
    assert model.news_encoder_calls == model.user_encoder_calls == 0


def test_stale_cache_after_weight_change(make_model, small_dataset, lookup):
    model = make_model("nrms")
    cache = build_cache(model, small_dataset.valid, lookup)
    model.store["news.att.v"][0] += 1e-3
    with pytest.raises(StaleCacheError):
        fast_evaluate(model, small_dataset.valid, lookup, cache=cache)


def test_cache_miss(make_model, small_dataset, lookup):
    model = make_model("nrms")
    cache = VectorCache(model.fingerprint())
    cache.news_ids, cache.news_matrix = precompute_news(model, ["N3"], lookup)
    with pytest.raises(CacheMissError):
        precompute_users(model, [ImpressionLog("1", "U1", 0, ["N1"], [("N3", 1)])], cache, lookup)


def test_unknown_article_and_bad_tokens(make_model, lookup):
    model = make_model("nrms")
    with pytest.raises(DataError):
        precompute_news(model, ["N-missing"], lookup)
    model.features.title[3, 0] = 10 ** 6
    with pytest.raises(DataError):
        precompute_news(model, [n for n, r in lookup.news_index.items() if r == 3], lookup)


def test_vector_cache_disk_round_trip(make_model, small_dataset, lookup, tmp_path):
    model = make_model("lstur")
    cache = build_cache(model, small_dataset.valid, lookup)
    path = str(tmp_path / "vec.bin")
    cache.save(path)
    loaded = VectorCache.load(path, model)
    a = fast_evaluate(model, small_dataset.valid, lookup, cache=cache)
    b = fast_evaluate(model, small_dataset.valid, lookup, cache=loaded)
    assert a == b
    model.store["user.gru.b_z"][0] += 1
    with pytest.raises(StaleCacheError):
        VectorCache.load(path, model)


def test_naive_deterministic(make_model, small_dataset, lookup):
    model = make_model("naml")
    assert evaluate_naive(model, small_dataset.valid, lookup) == evaluate_naive(model, small_dataset.valid, lookup)


def test_single_impression_hand_chain(make_model, small_dataset, lookup):
    model = make_model("nrms", precision="f64")
    imp = small_dataset.test[0]
    cand = model.encode_news(lookup.rows([n for n, _ in imp.candidates]))
    hist_ids = imp.history[-10:]
    H = 10
    hist = np.zeros((1, H, model.d_news))
    mask = np.zeros((1, H), dtype=bool)
    if hist_ids:
        hist[0, H - len(hist_ids):] = model.encode_news(lookup.rows(hist_ids))
        mask[0, H - len(hist_ids):] = True
    u = model.encode_user(hist, mask)[0]
    s = ImpressionScores(cand @ u, [y for _, y in imp.candidates])
    rep = evaluate_naive(model, [imp], lookup)
    assert rep.auc == pytest.approx(auc(s), abs=1e-12)
    assert rep.mrr == pytest.approx(mrr(s), abs=1e-12)
    assert rep.ndcg10 == pytest.approx(ndcg_at_k(s, 10), abs=1e-12)


def test_fast_matches_naive_after_training(make_model, small_dataset, lookup):
    model = make_model("nrms")
    train(model, small_dataset, TrainConfig(batch_size=32, learning_rate=1e-3, epochs=1))
    imps = small_dataset.test
    fast, fs = fast_evaluate(model, imps, lookup, return_scores=True)
    naive, ns = evaluate_naive(model, imps, lookup, return_scores=True)
    for m in METRICS:
        assert abs(getattr(fast, m) - getattr(naive, m)) < 1e-5
    for a, b in zip(fs, ns):
        np.testing.assert_array_equal(np.argsort(-a, kind="stable"), np.argsort(-b, kind="stable"))


def test_timing_harness_counts(make_model, small_dataset, lookup):
    model = make_model("nrms")
    t = timing_harness(model, small_dataset.test, lookup)
    assert t.fast_encoder_calls < t.naive_encoder_calls
    assert t.speedup > 0 and set(t.to_dict()) >= {"speedup", "naive_s", "steady_pass_s"}
