import itertools
import math

import numpy as np
import pytest

from newsrec.errors import DegenerateInputError, DimensionError
from newsrec.models import (
    AdditiveAttention,
    AdditiveAttentionParams,
    ModelSpec,
    NewsFeatures,
    SelfAttention,
    SelfAttentionParams,
    additive_attention,
    build_model,
    create_model,
    glorot_limit,
    score,
    self_attention,
)
from newsrec.numeric import ParamStore, max_relative_error, numerical_grad

# -- scalar oracles -----------------------------------------------------------


def oracle_additive(seq, W1, b1, v, mask=None):
    L, d = len(seq), len(seq[0])
    mask = mask if mask is not None else [True] * L
    s = []
    for i in range(L):
        total = 0.0
        for a in range(len(b1)):
            pre = b1[a] + sum(seq[i][j] * W1[j][a] for j in range(d))
            total += v[a] * math.tanh(pre)
        s.append(total)
    m = max(s[i] for i in range(L) if mask[i])
    e = [math.exp(s[i] - m) if mask[i] else 0.0 for i in range(L)]
    w = [x / sum(e) for x in e]
    pooled = [sum(w[i] * seq[i][j] for i in range(L)) for j in range(d)]
    return pooled, w


def oracle_self_attention(seq, Wq, Wk, Wv, heads, mask=None):
    n, d_in = len(seq), len(seq[0])
    d_model = len(Wq[0])
    dk = d_model // heads
    mask = mask if mask is not None else [True] * n

    def proj(W):
        return [[sum(seq[i][j] * W[j][c] for j in range(d_in)) for c in range(d_model)] for i in range(n)]

    Q, K, V = proj(Wq), proj(Wk), proj(Wv)
    out = [[0.0] * d_model for _ in range(n)]
    for h in range(heads):
        cols = range(h * dk, (h + 1) * dk)
        for i in range(n):
            logits = [sum(Q[i][c] * K[j][c] for c in cols) / math.sqrt(dk) for j in range(n)]
            m = max(logits[j] for j in range(n) if mask[j])
            e = [math.exp(logits[j] - m) if mask[j] else 0.0 for j in range(n)]
            a = [x / sum(e) for x in e]
            for c in cols:
                out[i][c] = sum(a[j] * V[j][c] for j in range(n))
    return out


def oracle_gru(h, x, p):
    sig = lambda v: 1 / (1 + math.exp(-v))
    z = sig(p["W_z"] * x + p["U_z"] * h + p["b_z"])
    r = sig(p["W_r"] * x + p["U_r"] * h + p["b_r"])
    c = math.tanh(p["W_h"] * x + p["U_h"] * (r * h) + p["b_h"])
    return (1 - z) * h + z * c


def lst(a):
    return np.asarray(a).tolist()


# -- additive attention ---------------------------------------------------


def _add_params(rng, d, d_att):
    return AdditiveAttentionParams(rng.uniform(-1, 1, (d, d_att)), rng.uniform(-1, 1, d_att), rng.uniform(-1, 1, d_att))


def test_additive_single_position_passes_row_through():
    rng = np.random.default_rng(0)
    row = rng.standard_normal((1, 4))
    pooled, w = additive_attention(row, None, _add_params(rng, 4, 3))
    np.testing.assert_array_equal(w, [1.0])
    np.testing.assert_array_equal(pooled, row[0])


def test_additive_identical_rows_uniform_weights():
    rng = np.random.default_rng(1)
    row = rng.standard_normal(3)
    seq = np.tile(row, (4, 1))
    mask = np.array([True, True, False, True])
    pooled, w = additive_attention(seq, mask, _add_params(rng, 3, 5))
    np.testing.assert_allclose(w, [1 / 3, 1 / 3, 0, 1 / 3], atol=1e-15)
    np.testing.assert_allclose(pooled, row, atol=1e-15)


def test_additive_matches_scalar_oracle():
    rng = np.random.default_rng(2)
    P = _add_params(rng, 1, 2)
    seq = np.array([[0.7], [-1.3]])
    pooled, w = additive_attention(seq, None, P)
    ref_pooled, ref_w = oracle_additive(lst(seq), lst(P.W1), lst(P.b1), lst(P.v))
    np.testing.assert_allclose(w, ref_w, atol=1e-12, rtol=0)
    np.testing.assert_allclose(pooled, ref_pooled, atol=1e-12, rtol=0)


def test_additive_fully_masked_errors():
    rng = np.random.default_rng(3)
    with pytest.raises(DegenerateInputError):
        additive_attention(np.ones((2, 2)), np.array([False, False]), _add_params(rng, 2, 2))


def test_additive_pooled_in_convex_hull():
    rng = np.random.default_rng(4)
    P = _add_params(rng, 5, 4)
    for _ in range(50):
        seq = rng.uniform(-3, 3, (6, 5))
        mask = rng.random(6) > 0.4
        mask[rng.integers(6)] = True
        pooled, w = additive_attention(seq, mask, P)
        assert np.abs(pooled).max() <= np.abs(seq[mask]).max() + 1e-12
        np.testing.assert_allclose(w.sum(), 1.0, atol=1e-6)


# -- self attention -------------------------------------------------------


def _sa_params(rng, d_in, d_model, heads):
    return SelfAttentionParams(*(rng.uniform(-1, 1, (d_in, d_model)) for _ in range(3)), heads=heads)


def test_self_attention_single_row_is_value_projection():
    rng = np.random.default_rng(0)
    P = _sa_params(rng, 3, 4, 2)
    x = rng.standard_normal((1, 3))
    np.testing.assert_allclose(self_attention(x, None, P), x @ P.Wv, atol=1e-14)


def test_self_attention_zero_query_averages_values():
    rng = np.random.default_rng(1)
    P = _sa_params(rng, 3, 4, 2)
    P.Wq[:] = 0
    x = rng.standard_normal((5, 3))
    out = self_attention(x, None, P)
    np.testing.assert_allclose(out, np.tile((x @ P.Wv).mean(axis=0), (5, 1)), atol=1e-14)


def test_self_attention_matches_scalar_oracle():
    rng = np.random.default_rng(2)
    P = _sa_params(rng, 2, 2, 1)
    x = rng.standard_normal((2, 2))
    ref = oracle_self_attention(lst(x), lst(P.Wq), lst(P.Wk), lst(P.Wv), 1)
    np.testing.assert_allclose(self_attention(x, None, P), ref, atol=1e-12, rtol=0)
    P2 = _sa_params(rng, 3, 4, 2)
    x2 = rng.standard_normal((4, 3))
    mask = [True, False, True, True]
    ref2 = oracle_self_attention(lst(x2), lst(P2.Wq), lst(P2.Wk), lst(P2.Wv), 2, mask)
    np.testing.assert_allclose(self_attention(x2, np.array(mask), P2), ref2, atol=1e-12, rtol=0)


def test_self_attention_params_validate_heads():
    with pytest.raises(DimensionError):
        SelfAttentionParams(np.zeros((2, 3)), np.zeros((2, 3)), np.zeros((2, 3)), heads=2)


def test_self_attention_fully_masked_errors():
    rng = np.random.default_rng(3)
    with pytest.raises(DegenerateInputError):
        self_attention(np.ones((2, 3)), np.array([False, False]), _sa_params(rng, 3, 4, 2))


def test_attention_layer_gradients():
    rng = np.random.default_rng(5)
    store = ParamStore(np.float64)
    for k, shape in {"a.W1": (4, 3), "a.b1": (3,), "a.v": (3,), "s.Wq": (4, 4), "s.Wk": (4, 4), "s.Wv": (4, 4)}.items():
        store.add(k, rng.uniform(-1, 1, shape))
    mask = np.array([[True, True, False, True], [True, False, False, False], [False] * 4])
    x = rng.uniform(-1, 1, (3, 4, 4))
    w = rng.standard_normal((3, 4))
    for layer in (AdditiveAttention(store, "a", allow_empty=True), SelfAttention(store, "s", 2, allow_empty=True)):
        out, cache = layer.forward(x, mask)
        out = out[0] if isinstance(out, tuple) else out
        wt = w if out.ndim == 2 else rng.standard_normal(out.shape)

        def f():
            o, _ = layer.forward(x, mask)
            o = o[0] if isinstance(o, tuple) else o
            return float((o * wt).sum())

        lg = layer.backward(cache, wt)
        assert max_relative_error(lg.input_grads[0], numerical_grad(f, x)) < 1e-4
        for name, g in lg.param_grads.items():
            assert max_relative_error(g, numerical_grad(f, store.params[name])) < 1e-4, name
        assert np.all(out[2] == 0)  # fully masked sequence


# -- score ----------------------------------------------------------------


def test_score_examples():
    rng = np.random.default_rng(0)
    cands = rng.standard_normal((3, 4))
    np.testing.assert_array_equal(score(np.zeros(4), cands), np.zeros(3))
    u = rng.standard_normal(4)
    u /= np.linalg.norm(u)
    assert abs(score(u, u[None])[0] - 1.0) < 1e-12
    ref = [sum(c[j] * u[j] for j in range(4)) for c in cands]
    np.testing.assert_allclose(score(u, cands), ref, atol=1e-12)
    with pytest.raises(DimensionError):
        score(np.zeros(3), cands)


# -- model construction ---------------------------------------------------


def tiny_features(rng, n_articles=8, L=3, L_abs=4, vocab=10, n_cat=3, n_sub=4):
    title = rng.integers(2, vocab, (n_articles, L))
    title[:, 1:] *= rng.random((n_articles, L - 1)) > 0.3  # some padding
    title[0] = 0
    abstract = rng.integers(0, vocab, (n_articles, L_abs))
    abstract[0] = 0
    abstract[1] = 0  # an empty abstract
    cat = rng.integers(0, n_cat, n_articles)
    sub = rng.integers(0, n_sub, n_articles)
    return NewsFeatures(title, abstract, cat, sub)


def tiny_spec(family, **kw):
    base = dict(family=family, vocab_size=10, embed_dim=4, heads=2, head_dim=2, d_att=3, filters=4,
                window=3, max_title_len=3, max_abstract_len=4, max_history_len=4, n_categories=3,
                n_subcategories=4, category_dim=3, n_users=5, dropout=0.0)
    base.update(kw)
    return ModelSpec(**base)


def tiny_model(family, dtype=np.float64, seed=0, **kw):
    spec = tiny_spec(family, **kw)
    rng = np.random.default_rng(seed)
    emb = rng.uniform(-1, 1, (spec.vocab_size, spec.embed_dim))
    emb[0] = 0
    store = build_model(spec, emb, seed=seed, dtype=dtype)
    return create_model(spec, store, tiny_features(rng))


def test_build_model_deterministic_and_biases_zero():
    a, b = tiny_model("naml"), tiny_model("naml")
    assert a.store.equal(b.store)
    assert all(a.store[n].tobytes() == b.store[n].tobytes() for n in a.store)
    for name, value in a.store.items():
        if name.endswith((".b1", ".bias", ".b")) or name.split(".")[-1].startswith("b_"):
            assert not value.any(), name


@pytest.mark.parametrize("family", ["nrms", "naml", "lstur"])
def test_projection_init_bounded_by_fan_limit(family):
    m = tiny_model(family)
    for name, value in m.store.items():
        if name.endswith((".W1", ".Wq", ".Wk", ".Wv", ".W")) or name.split(".")[-1][:2] in ("W_", "U_"):
            limit = glorot_limit(value.shape[0], value.shape[1])
            assert np.abs(value).max() <= limit, name
        if name.endswith(".filters"):
            w, di, do = value.shape
            assert np.abs(value).max() <= glorot_limit(w * di, w * do)


def test_build_model_rejects_wrong_embedding_shape():
    spec = tiny_spec("nrms")
    with pytest.raises(DimensionError):
        build_model(spec, np.zeros((spec.vocab_size + 1, spec.embed_dim)))


def test_model_spec_validation():
    from newsrec.errors import ConfigError

    with pytest.raises(ConfigError):
        tiny_spec("naml", views=())
    with pytest.raises(ConfigError):
        tiny_spec("bert")
    with pytest.raises(ConfigError):
        tiny_spec("nrms", d_att=0)


# -- encoders -------------------------------------------------------------


def test_nrms_single_token_title():
    m = tiny_model("nrms")
    m.features.title[3] = [7, 0, 0]
    vec = m.encode_news([3])[0]
    emb = m.store["word.table"][7][None]
    sa = emb @ m.store["news.self_att.Wv"]  # single position: weight 1
    np.testing.assert_allclose(vec, sa[0], atol=1e-14)


def test_nrms_tiny_matches_composed_oracle():
    m = tiny_model("nrms")
    s = {k: lst(v) for k, v in m.store.items()}
    for row in range(1, len(m.features)):
        tokens = m.features.title[row]
        mask = (tokens != 0).tolist()
        emb = [s["word.table"][t] for t in tokens]
        h = oracle_self_attention(emb, s["news.self_att.Wq"], s["news.self_att.Wk"], s["news.self_att.Wv"], 2, mask)
        ref, _ = oracle_additive(h, s["news.att.W1"], s["news.att.b1"], s["news.att.v"], mask)
        np.testing.assert_allclose(m.encode_news([row])[0], ref, atol=1e-10, rtol=0)


def test_naml_single_view_equals_tower():
    m = tiny_model("naml", views=("title",))
    vec = m.encode_news([2, 3])
    tower, _ = m._tower_forward("title", np.array([2, 3]), None)
    np.testing.assert_allclose(vec, tower, atol=1e-15)


def test_naml_all_padding_title_rejected():
    m = tiny_model("naml")
    m.features.title[4] = 0
    with pytest.raises(DegenerateInputError):
        m.encode_news([4])


@pytest.mark.parametrize("family", ["nrms", "naml", "lstur"])
def test_batched_news_encoding_equals_item_by_item(family):
    m = tiny_model(family, dtype=np.float32)
    rows = np.arange(1, len(m.features))
    batched = m.encode_news(rows)
    for i, r in enumerate(rows):
        assert batched[i].tobytes() == m.encode_news([r])[0].tobytes()


def test_user_single_history_item():
    for family in ("nrms", "naml"):
        m = tiny_model(family)
        hv = np.random.default_rng(0).standard_normal((1, 1, m.d_news))
        u = m.encode_user(hv, np.array([[True]]))
        if family == "naml":
            np.testing.assert_allclose(u[0], hv[0, 0], atol=1e-15)
        else:
            expected = hv[0, 0] @ m.store["user.self_att.Wv"]
            np.testing.assert_allclose(u[0], expected, atol=1e-14)


def test_nrms_user_permutation_invariant():
    m = tiny_model("nrms", dtype=np.float32)
    rng = np.random.default_rng(3)
    hist = rng.standard_normal((1, 4, m.d_news)).astype(np.float32)
    mask = np.array([[False, True, True, True]])
    base = m.encode_user(hist, mask)
    for perm in itertools.permutations([1, 2, 3]):
        h2 = hist.copy()
        h2[0, 1:] = hist[0, list(perm)]
        assert np.abs(m.encode_user(h2, mask) - base).max() < 1e-5


def test_lstur_user_order_sensitive():
    m = tiny_model("lstur", dtype=np.float32, seed=11)
    rng = np.random.default_rng(4)
    hist = rng.standard_normal((1, 3, m.d_news)).astype(np.float32)
    mask = np.ones((1, 3), dtype=bool)
    base = m.encode_user(hist, mask, [2])
    diffs = [np.abs(m.encode_user(hist[:, list(p)], mask, [2]) - base).max()
             for p in itertools.permutations(range(3))]
    assert max(diffs) > 1e-6


def test_lstur_matches_scalar_gru_oracle():
    spec = tiny_spec("lstur", filters=1, embed_dim=1, user_embedding=False)
    emb = np.random.default_rng(0).uniform(-1, 1, (10, 1))
    store = build_model(spec, emb, seed=5, dtype=np.float64)
    m = create_model(spec, store, tiny_features(np.random.default_rng(1)))
    p = {k: float(store[f"user.gru.{k}"].ravel()[0]) for k in
         ("W_z", "U_z", "b_z", "W_r", "U_r", "b_r", "W_h", "U_h", "b_h")}
    p.update(b_z=0.1, b_h=-0.2)
    store.params["user.gru.b_z"][:] = 0.1
    store.params["user.gru.b_h"][:] = -0.2
    x1, x2 = 0.6, -0.9
    h = oracle_gru(oracle_gru(0.0, x1, p), x2, p)
    hist = np.array([[[0.0], [x1], [x2]]])
    u = m.encode_user(hist, np.array([[False, True, True]]))
    assert abs(u[0, 0] - h) < 1e-12


def test_empty_history_rules():
    for family in ("nrms", "naml"):
        m = tiny_model(family)
        u = m.encode_user(np.ones((2, 4, m.d_news)), np.array([[False] * 4, [True] * 4]))
        assert not u[0].any() and u[1].any()
        assert m.empty_histories == 1
    m = tiny_model("lstur")
    u = m.encode_user(np.ones((1, 4, m.d_news)), np.zeros((1, 4), dtype=bool), [3])
    np.testing.assert_array_equal(u[0], m.store["user.id.table"][3])
    m = tiny_model("lstur", lstur_mode="concat")
    u = m.encode_user(np.ones((1, 4, m.d_news)), np.zeros((1, 4), dtype=bool), [3])
    G = m.spec.gru_dim
    lt = m.store["user.id.table"][3]
    np.testing.assert_allclose(u[0], lt @ m.store["user.proj.W"][G:] + m.store["user.proj.b"], atol=1e-14)


# -- end-to-end gradient --------------------------------------------------


def _slate_loss(logits, label):
    m = logits.max(axis=1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(logits - m).sum(axis=1))
    return float((lse - logits[np.arange(len(label)), label]).mean())


@pytest.mark.parametrize("family,kw", [("nrms", {}), ("naml", {}), ("lstur", {}), ("lstur", {"lstur_mode": "concat"})])
def test_end_to_end_gradient(family, kw):
    m = tiny_model(family, **kw)
    cand = np.array([[1, 2, 3], [4, 5, 6]])
    hist = np.array([[0, 0, 7, 1], [2, 3, 4, 5]])
    hmask = hist != 0
    user = np.array([1, 4])
    label = np.array([0, 2])

    def f():
        logits, _ = m.forward(cand, hist, hmask, user)
        return _slate_loss(logits, label)

    logits, cache = m.forward(cand, hist, hmask, user)
    p = np.exp(logits - logits.max(1, keepdims=True))
    p /= p.sum(1, keepdims=True)
    dlogits = (p - np.eye(3)[label]) / 2
    m.store.zero_grad()
    m.backward(cache, dlogits)
    for name in m.store:
        num = numerical_grad(f, m.store.params[name])
        if name == "word.table":
            num[0] = 0  # padding row is frozen
        err = max_relative_error(m.store.grads[name], num)
        assert err < 1e-3, (name, err)
