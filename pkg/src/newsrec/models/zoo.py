"""NRMS, NAML and LSTUR encoders behind a single model interface.

Articles are addressed by integer row into a :class:`NewsFeatures` table.
Row 0 is the padding article: it is never encoded and stands in for empty
history slots.
"""

from __future__ import annotations

import hashlib
import logging
from dataclasses import asdict, dataclass

import numpy as np

from ..errors import ConfigError, DegenerateInputError, DimensionError
from ..numeric import GRU, Conv1D, Dropout, Embedding, Linear, ParamStore, TanhAffine
from .attention import AdditiveAttention, SelfAttention

log = logging.getLogger(__name__)

FAMILIES = ("nrms", "naml", "lstur")
VIEWS = ("title", "abstract", "category", "subcategory")


@dataclass(frozen=True)
class ModelSpec:
    family: str = "nrms"
    vocab_size: int = 2
    embed_dim: int = 300
    heads: int = 16
    head_dim: int = 16
    d_att: int = 200
    filters: int = 400
    window: int = 3
    max_title_len: int = 30
    max_abstract_len: int = 50
    max_history_len: int = 50
    views: tuple = VIEWS
    n_categories: int = 1
    n_subcategories: int = 1
    category_dim: int = 100
    n_users: int = 1
    user_embedding: bool = True
    lstur_mode: str = "init"
    dropout: float = 0.2

    def __post_init__(self):
        object.__setattr__(self, "family", self.family.lower())
        object.__setattr__(self, "views", tuple(self.views))
        if self.family not in FAMILIES:
            raise ConfigError(f"unknown model family {self.family!r}; expected one of {FAMILIES}")
        dims = ("vocab_size", "embed_dim", "heads", "head_dim", "d_att", "filters", "window",
                "max_title_len", "max_abstract_len", "max_history_len", "n_categories",
                "n_subcategories", "category_dim", "n_users")
        for name in dims:
            if getattr(self, name) < 1:
                raise ConfigError(f"model.{name} must be positive, got {getattr(self, name)}")
        if self.family == "naml":
            if not self.views:
                raise ConfigError("NAML needs at least one view")
            bad = [v for v in self.views if v not in VIEWS]
            if bad:
                raise ConfigError(f"unknown NAML views {bad}; expected a subset of {VIEWS}")
        if self.lstur_mode not in ("init", "concat"):
            raise ConfigError(f"lstur_mode must be 'init' or 'concat', got {self.lstur_mode!r}")

    @property
    def d_model(self):
        return self.heads * self.head_dim

    @property
    def d_news(self):
        return self.d_model if self.family == "nrms" else self.filters

    @property
    def gru_dim(self):
        return self.d_news

    def to_dict(self):
        return asdict(self)

    def digest(self):
        return hashlib.blake2b(repr(sorted(self.to_dict().items())).encode(), digest_size=8).hexdigest()


@dataclass
class NewsFeatures:
    """Per-article integer features; row 0 is the all-padding article."""

    title: np.ndarray  # (N, L) token ids
    abstract: np.ndarray  # (N, L_abs)
    category: np.ndarray  # (N,)
    subcategory: np.ndarray  # (N,)

    def __len__(self):
        return self.title.shape[0]


# ---------------------------------------------------------------------------
# parameter initialisation


def glorot_limit(fan_in, fan_out):
    return float(np.sqrt(6.0 / (fan_in + fan_out)))


def _glorot(rng, shape, fan_in, fan_out):
    lim = glorot_limit(fan_in, fan_out)
    return rng.uniform(-lim, lim, size=shape)


def _add_additive(store, rng, prefix, d_in, d_att):
    store.add(f"{prefix}.W1", _glorot(rng, (d_in, d_att), d_in, d_att))
    store.add(f"{prefix}.b1", np.zeros(d_att))
    store.add(f"{prefix}.v", _glorot(rng, (d_att,), d_att, 1))


def _add_self_attention(store, rng, prefix, d_in, d_model):
    for name in ("Wq", "Wk", "Wv"):
        store.add(f"{prefix}.{name}", _glorot(rng, (d_in, d_model), d_in, d_model))


def _add_conv(store, rng, prefix, window, d_in, d_out):
    store.add(f"{prefix}.filters", _glorot(rng, (window, d_in, d_out), window * d_in, window * d_out))
    store.add(f"{prefix}.bias", np.zeros(d_out))


def _add_gru(store, rng, prefix, d_in, d):
    for gate in ("z", "r", "h"):
        store.add(f"{prefix}.W_{gate}", _glorot(rng, (d_in, d), d_in, d))
        store.add(f"{prefix}.U_{gate}", _glorot(rng, (d, d), d, d))
        store.add(f"{prefix}.b_{gate}", np.zeros(d))


def build_model(spec, embeddings, seed=0, dtype=np.float32):
    """Create a freshly initialised :class:`ParamStore` for ``spec``.

    Projections draw from U(-lim, lim) with lim = sqrt(6 / (fan_in + fan_out));
    biases start at zero; the word table is a trainable copy of ``embeddings``.
    """
    embeddings = np.asarray(embeddings)
    if embeddings.shape != (spec.vocab_size, spec.embed_dim):
        raise DimensionError(
            f"embedding matrix {embeddings.shape} does not match vocab_size={spec.vocab_size}, "
            f"embed_dim={spec.embed_dim}"
        )
    rng = np.random.default_rng(seed)
    store = ParamStore(dtype)
    store.add("word.table", embeddings)
    E, F = spec.embed_dim, spec.filters
    if spec.family == "nrms":
        D = spec.d_model
        _add_self_attention(store, rng, "news.self_att", E, D)
        _add_additive(store, rng, "news.att", D, spec.d_att)
        _add_self_attention(store, rng, "user.self_att", D, D)
        _add_additive(store, rng, "user.att", D, spec.d_att)
    elif spec.family == "naml":
        for view in spec.views:
            if view in ("title", "abstract"):
                _add_conv(store, rng, f"news.{view}.conv", spec.window, E, F)
                _add_additive(store, rng, f"news.{view}.att", F, spec.d_att)
            else:
                n = spec.n_categories if view == "category" else spec.n_subcategories
                store.add(f"news.{view}.table", rng.uniform(-0.1, 0.1, size=(n, spec.category_dim)))
                store.add(f"news.{view}.dense.W", _glorot(rng, (spec.category_dim, F), spec.category_dim, F))
                store.add(f"news.{view}.dense.b", np.zeros(F))
        _add_additive(store, rng, "news.view_att", F, spec.d_att)
        _add_additive(store, rng, "user.att", F, spec.d_att)
    else:
        _add_conv(store, rng, "news.conv", spec.window, E, F)
        _add_additive(store, rng, "news.att", F, spec.d_att)
        G = spec.gru_dim
        _add_gru(store, rng, "user.gru", F, G)
        if spec.user_embedding:
            table = rng.uniform(-0.1, 0.1, size=(spec.n_users, G))
            table[0] = 0  # unknown user
            store.add("user.id.table", table)
        if spec.lstur_mode == "concat":
            store.add("user.proj.W", _glorot(rng, (2 * G, G), 2 * G, G))
            store.add("user.proj.b", np.zeros(G))
    return store


# ---------------------------------------------------------------------------
# models


def score(user, candidates):
    """Inner-product click scores of (m, d) candidates against a (d,) user."""
    user = np.asarray(user)
    candidates = np.asarray(candidates)
    if candidates.ndim != 2 or user.shape != (candidates.shape[1],):
        raise DimensionError(f"score: user {user.shape} vs candidates {candidates.shape}")
    return candidates @ user


class NewsRecModel:
    """Shared plumbing; subclasses implement the four ``_news_*``/``_user_*`` hooks.

    ``forward`` / ``backward`` compute slate logits for a training batch and
    push gradients into ``store.grads``. ``encode_news`` / ``encode_user`` are
    the inference entry points and count how many items they encode.
    """

    def __init__(self, spec, store, features):
        if features.title.shape[1] != spec.max_title_len:
            raise DimensionError(f"title length {features.title.shape[1]} != spec {spec.max_title_len}")
        self.spec = spec
        self.store = store
        self.features = features
        self.word = Embedding(store, "word", frozen_row=0)
        self.drop = Dropout(spec.dropout)
        self.news_encoder_calls = 0
        self.user_encoder_calls = 0
        self.empty_histories = 0

    @property
    def d_news(self):
        return self.spec.d_news

    def fingerprint(self):
        h = hashlib.blake2b(digest_size=8)
        h.update(self.store.fingerprint().encode())
        h.update(self.spec.digest().encode())
        return h.hexdigest()

    def reset_counters(self):
        self.news_encoder_calls = 0
        self.user_encoder_calls = 0

    # -- inference -------------------------------------------------------

    def encode_news(self, rows):
        rows = np.asarray(rows, dtype=np.int64)
        self.news_encoder_calls += len(rows)
        vecs, _ = self._news_forward(rows, None)
        return vecs

    def encode_user(self, history, mask, user_idx=None):
        """``history`` is (B, H, d_news); returns (B, d_news)."""
        history = np.asarray(history, dtype=self.store.dtype)
        mask = np.asarray(mask, dtype=bool)
        if user_idx is None:
            user_idx = np.zeros(history.shape[0], dtype=np.int64)
        self.user_encoder_calls += history.shape[0]
        empty = int((~mask.any(axis=-1)).sum())
        if empty:
            self.empty_histories += empty
            log.debug("%d user(s) with empty history", empty)
        u, _ = self._user_forward(history, mask, np.asarray(user_idx), None)
        return u

    def score(self, user, candidates):
        return score(user, candidates)

    # -- training --------------------------------------------------------

    def forward(self, cand_rows, hist_rows, hist_mask, user_idx, rng=None):
        """Slate logits (B, S) for candidate rows (B, S) and history rows (B, H)."""
        B, S = cand_rows.shape
        rows = np.concatenate([cand_rows.reshape(-1), hist_rows.reshape(-1)])
        uniq, inv = np.unique(rows, return_inverse=True)
        real = uniq != 0
        news_vecs, ncache = self._news_forward(uniq[real], rng)
        table = np.zeros((len(uniq), self.d_news), dtype=self.store.dtype)
        table[real] = news_vecs
        vecs = table[inv]
        cand = vecs[: B * S].reshape(B, S, -1)
        hist = vecs[B * S:].reshape(B, hist_rows.shape[1], -1)
        u, ucache = self._user_forward(hist, hist_mask, user_idx, rng)
        logits = (cand @ u[:, :, None])[..., 0]
        return logits, (uniq, inv, real, ncache, ucache, cand, u, B, S)

    def backward(self, cache, dlogits):
        uniq, inv, real, ncache, ucache, cand, u, B, S = cache
        dcand = dlogits[..., None] * u[:, None, :]
        du = (dlogits[..., None] * cand).sum(axis=1)
        dhist, grads = self._user_backward(ucache, du)
        self.store.accumulate(grads)
        dvecs = np.concatenate([dcand.reshape(-1, self.d_news), dhist.reshape(-1, self.d_news)])
        dtable = np.zeros((len(uniq), self.d_news), dtype=dvecs.dtype)
        np.add.at(dtable, inv, dvecs)
        self.store.accumulate(self._news_backward(ncache, dtable[real]))

    # -- shared pieces ----------------------------------------------------

    def _embed(self, tokens, rng):
        x, c_emb = self.word.forward(tokens)
        x, c_drop = self.drop.forward(x, rng)
        return x, (c_emb, c_drop)

    def _embed_backward(self, cache, g, grads):
        c_emb, c_drop = cache
        g = self.drop.backward(c_drop, g).input_grads[0]
        _merge(grads, self.word.backward(c_emb, g).param_grads)


def _merge(into, grads):
    for k, v in grads.items():
        if k in into:
            into[k] = into[k] + v
        else:
            into[k] = v


class NRMS(NewsRecModel):
    """Title self-attention + additive pooling; same two stages over history."""

    def __init__(self, spec, store, features):
        super().__init__(spec, store, features)
        self.news_sa = SelfAttention(store, "news.self_att", spec.heads)
        self.news_att = AdditiveAttention(store, "news.att")
        self.user_sa = SelfAttention(store, "user.self_att", spec.heads, allow_empty=True)
        self.user_att = AdditiveAttention(store, "user.att", allow_empty=True)

    def _news_forward(self, rows, rng):
        tokens = self.features.title[rows]
        mask = tokens != 0
        x, c_emb = self._embed(tokens, rng)
        y, c_sa = self.news_sa.forward(x, mask)
        y, c_drop = self.drop.forward(y, rng)
        (vec, _), c_att = self.news_att.forward(y, mask)
        return vec, (c_emb, c_sa, c_drop, c_att)

    def _news_backward(self, cache, g):
        c_emb, c_sa, c_drop, c_att = cache
        grads = {}
        lg = self.news_att.backward(c_att, g)
        _merge(grads, lg.param_grads)
        g = self.drop.backward(c_drop, lg.input_grads[0]).input_grads[0]
        lg = self.news_sa.backward(c_sa, g)
        _merge(grads, lg.param_grads)
        self._embed_backward(c_emb, lg.input_grads[0], grads)
        return grads

    def _user_forward(self, hist, mask, user_idx, rng):
        y, c_sa = self.user_sa.forward(hist, mask)
        y, c_drop = self.drop.forward(y, rng)
        (u, _), c_att = self.user_att.forward(y, mask)
        return u, (c_sa, c_drop, c_att)

    def _user_backward(self, cache, g):
        c_sa, c_drop, c_att = cache
        grads = {}
        lg = self.user_att.backward(c_att, g)
        _merge(grads, lg.param_grads)
        g = self.drop.backward(c_drop, lg.input_grads[0]).input_grads[0]
        lg = self.user_sa.backward(c_sa, g)
        _merge(grads, lg.param_grads)
        return lg.input_grads[0], grads


class NAML(NewsRecModel):
    """Per-view towers combined by view-level additive attention; additive user pooling."""

    def __init__(self, spec, store, features):
        super().__init__(spec, store, features)
        self.towers = {}
        for view in spec.views:
            if view in ("title", "abstract"):
                self.towers[view] = (
                    Conv1D(store, f"news.{view}.conv", spec.window),
                    AdditiveAttention(store, f"news.{view}.att", allow_empty=view == "abstract"),
                )
            else:
                self.towers[view] = (
                    Embedding(store, f"news.{view}", frozen_row=None),
                    TanhAffine(store, f"news.{view}.dense"),
                )
        self.view_att = AdditiveAttention(store, "news.view_att")
        self.user_att = AdditiveAttention(store, "user.att", allow_empty=True)

    def _tower_forward(self, view, rows, rng):
        first, second = self.towers[view]
        if view in ("title", "abstract"):
            tokens = getattr(self.features, view)[rows]
            mask = tokens != 0
            x, c_emb = self._embed(tokens, rng)
            y, c_conv = first.forward(x)
            y, c_drop = self.drop.forward(y, rng)
            (vec, _), c_att = second.forward(y, mask)
            return vec, (c_emb, c_conv, c_drop, c_att)
        ids = getattr(self.features, view)[rows]
        e, c_emb = first.forward(ids)
        vec, c_dense = second.forward(e)
        return vec, (c_emb, c_dense)

    def _tower_backward(self, view, cache, g, grads):
        first, second = self.towers[view]
        if view in ("title", "abstract"):
            c_emb, c_conv, c_drop, c_att = cache
            lg = second.backward(c_att, g)
            _merge(grads, lg.param_grads)
            g = self.drop.backward(c_drop, lg.input_grads[0]).input_grads[0]
            lg = first.backward(c_conv, g)
            _merge(grads, lg.param_grads)
            self._embed_backward(c_emb, lg.input_grads[0], grads)
        else:
            c_emb, c_dense = cache
            lg = second.backward(c_dense, g)
            _merge(grads, lg.param_grads)
            _merge(grads, first.backward(c_emb, lg.input_grads[0]).param_grads)

    def _news_forward(self, rows, rng):
        if len(rows) and not (self.features.title[rows] != 0).any(axis=1).all():
            raise DegenerateInputError("article with an all-padding title")
        outs, caches = [], []
        for view in self.spec.views:
            v, c = self._tower_forward(view, rows, rng)
            outs.append(v)
            caches.append(c)
        stacked = np.stack(outs, axis=-2)
        (vec, _), c_view = self.view_att.forward(stacked)
        return vec, (caches, c_view)

    def _news_backward(self, cache, g):
        caches, c_view = cache
        grads = {}
        lg = self.view_att.backward(c_view, g)
        _merge(grads, lg.param_grads)
        dstack = lg.input_grads[0]
        for i, view in enumerate(self.spec.views):
            self._tower_backward(view, caches[i], dstack[..., i, :], grads)
        return grads

    def _user_forward(self, hist, mask, user_idx, rng):
        (u, _), c = self.user_att.forward(hist, mask)
        return u, c

    def _user_backward(self, cache, g):
        lg = self.user_att.backward(cache, g)
        return lg.input_grads[0], lg.param_grads


class LSTUR(NewsRecModel):
    """CNN title encoder; GRU over history combined with a user-id embedding.

    ``lstur_mode="init"`` seeds the GRU state with the user embedding;
    ``"concat"`` projects [h_T; user_embedding] back to d_news.
    """

    def __init__(self, spec, store, features):
        super().__init__(spec, store, features)
        self.conv = Conv1D(store, "news.conv", spec.window)
        self.news_att = AdditiveAttention(store, "news.att")
        self.gru = GRU(store, "user.gru")
        self.user_table = Embedding(store, "user.id", frozen_row=0) if spec.user_embedding else None
        self.proj = Linear(store, "user.proj") if spec.lstur_mode == "concat" else None

    def _news_forward(self, rows, rng):
        tokens = self.features.title[rows]
        mask = tokens != 0
        x, c_emb = self._embed(tokens, rng)
        y, c_conv = self.conv.forward(x)
        y, c_drop = self.drop.forward(y, rng)
        (vec, _), c_att = self.news_att.forward(y, mask)
        return vec, (c_emb, c_conv, c_drop, c_att)

    def _news_backward(self, cache, g):
        c_emb, c_conv, c_drop, c_att = cache
        grads = {}
        lg = self.news_att.backward(c_att, g)
        _merge(grads, lg.param_grads)
        g = self.drop.backward(c_drop, lg.input_grads[0]).input_grads[0]
        lg = self.conv.backward(c_conv, g)
        _merge(grads, lg.param_grads)
        self._embed_backward(c_emb, lg.input_grads[0], grads)
        return grads

    def _long_term(self, user_idx, B, dtype):
        if self.user_table is None:
            return np.zeros((B, self.spec.gru_dim), dtype=dtype), None
        user_idx = np.asarray(user_idx)
        # users unseen at training time fall back to row 0
        user_idx = np.where((user_idx >= 0) & (user_idx < self.spec.n_users), user_idx, 0)
        return self.user_table.forward(user_idx)

    def _user_forward(self, hist, mask, user_idx, rng):
        B = hist.shape[0]
        long_term, c_lt = self._long_term(user_idx, B, hist.dtype)
        if self.spec.lstur_mode == "init":
            h, c_gru = self.gru.forward(hist, long_term, mask)
            return h, (c_lt, c_gru, None)
        h, c_gru = self.gru.forward(hist, np.zeros_like(long_term), mask)
        u, c_proj = self.proj.forward(np.concatenate([h, long_term], axis=-1))
        return u, (c_lt, c_gru, c_proj)

    def _user_backward(self, cache, g):
        c_lt, c_gru, c_proj = cache
        grads = {}
        G = self.spec.gru_dim
        if c_proj is not None:
            lg = self.proj.backward(c_proj, g)
            _merge(grads, lg.param_grads)
            dcat = lg.input_grads[0]
            dh, dlong = dcat[:, :G], dcat[:, G:]
            lg = self.gru.backward(c_gru, dh)
            _merge(grads, lg.param_grads)
            dhist = lg.input_grads[0]
        else:
            lg = self.gru.backward(c_gru, g)
            _merge(grads, lg.param_grads)
            dhist, dlong = lg.input_grads
        if c_lt is not None:
            _merge(grads, self.user_table.backward(c_lt, dlong).param_grads)
        return dhist, grads


MODEL_CLASSES = {"nrms": NRMS, "naml": NAML, "lstur": LSTUR}


def create_model(spec, store, features):
    return MODEL_CLASSES[spec.family](spec, store, features)
