"""Additive (learned-query) attention pooling and multi-head self-attention."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import DegenerateInputError, DimensionError
from ..numeric import Layer, LayerGrad, _flat2, _require_cache, softmax


@dataclass
class AdditiveAttentionParams:
    W1: np.ndarray  # (d_in, d_att)
    b1: np.ndarray  # (d_att,)
    v: np.ndarray  # (d_att,)

    def __post_init__(self):
        d_att = self.W1.shape[1]
        if self.b1.shape != (d_att,) or self.v.shape != (d_att,):
            raise DimensionError(f"additive attention params disagree on d_att={d_att}")


@dataclass
class SelfAttentionParams:
    Wq: np.ndarray  # (d_in, heads*d_k)
    Wk: np.ndarray
    Wv: np.ndarray
    heads: int

    def __post_init__(self):
        d_model = self.Wq.shape[1]
        if self.heads < 1 or d_model % self.heads:
            raise DimensionError(f"d_model={d_model} is not divisible by heads={self.heads}")
        if self.Wk.shape != self.Wq.shape or self.Wv.shape != self.Wq.shape:
            raise DimensionError("Q/K/V projections must share a shape")

    @property
    def d_k(self):
        return self.Wq.shape[1] // self.heads


def _patch_empty(mask, allow_empty):
    """Return (usable_mask, empty_rows). Empty rows get a dummy unmasked slot."""
    mask = np.asarray(mask, dtype=bool)
    empty = ~mask.any(axis=-1)
    if empty.any():
        if not allow_empty:
            raise DegenerateInputError("attention over a fully masked sequence")
        mask = mask.copy()
        mask[empty, ..., 0] = True
    return mask, empty


def additive_attention(seq, mask, params):
    """Pool ``seq`` (L, d) into one vector. Returns (pooled, weights)."""
    seq = np.asarray(seq)
    if mask is None:
        mask = np.ones(seq.shape[:-1], dtype=bool)
    scores = np.tanh(seq @ params.W1 + params.b1) @ params.v
    weights = softmax(scores, mask)
    pooled = (weights[..., None] * seq).sum(axis=-2)
    return pooled, weights


def self_attention(seq, mask, params):
    """Scaled dot-product attention per head; heads are concatenated."""
    seq = np.asarray(seq)
    if mask is None:
        mask = np.ones(seq.shape[:-1], dtype=bool)
    h, dk = params.heads, params.d_k
    lead = seq.shape[:-2]
    n = seq.shape[-2]

    def split(x):
        return np.swapaxes(x.reshape(lead + (n, h, dk)), -2, -3)

    q, k, v = split(seq @ params.Wq), split(seq @ params.Wk), split(seq @ params.Wv)
    logits = q @ np.swapaxes(k, -1, -2) / np.sqrt(dk).astype(seq.dtype)
    a = softmax(logits, np.asarray(mask, dtype=bool)[..., None, None, :])
    out = a @ v
    return np.swapaxes(out, -2, -3).reshape(lead + (n, h * dk))


class AdditiveAttention(Layer):
    """Layer form of :func:`additive_attention` over (..., L, d) inputs.

    With ``allow_empty`` a fully masked sequence pools to the zero vector
    (and receives no gradient) instead of raising.
    """

    param_names = ("W1", "b1", "v")

    def __init__(self, store, prefix, allow_empty=False):
        super().__init__(store, prefix)
        self.allow_empty = allow_empty

    def params(self):
        return AdditiveAttentionParams(self.p("W1"), self.p("b1"), self.p("v"))

    def forward(self, seq, mask=None):
        if mask is None:
            mask = np.ones(seq.shape[:-1], dtype=bool)
        mask, empty = _patch_empty(mask, self.allow_empty)
        P = self.params()
        hid = np.tanh(seq @ P.W1 + P.b1)
        scores = hid @ P.v
        weights = softmax(scores, mask)
        if empty.any():
            weights = weights * ~empty[..., None]
        pooled = (weights[..., None] * seq).sum(axis=-2)
        return (pooled, weights), (seq, hid, weights)

    def backward(self, cache, g):
        _require_cache(cache, self)
        seq, hid, a = cache
        P = self.params()
        d_seq = a[..., None] * g[..., None, :]
        da = (seq * g[..., None, :]).sum(axis=-1)
        ds = a * (da - (a * da).sum(axis=-1, keepdims=True))
        dv = _flat2(hid).T @ ds.reshape(-1)
        dpre = ds[..., None] * P.v * (1 - hid * hid)
        dW1 = _flat2(seq).T @ _flat2(dpre)
        db1 = _flat2(dpre).sum(0)
        d_seq = d_seq + dpre @ P.W1.T
        return LayerGrad(
            [d_seq],
            {self.pname("W1"): dW1, self.pname("b1"): db1, self.pname("v"): dv},
        )


class SelfAttention(Layer):
    """Multi-head scaled dot-product self-attention over (..., n, d_in).

    Masked keys are excluded. Output rows of fully masked sequences are zero
    when ``allow_empty`` is set.
    """

    param_names = ("Wq", "Wk", "Wv")

    def __init__(self, store, prefix, heads, allow_empty=False):
        super().__init__(store, prefix)
        self.heads = heads
        self.allow_empty = allow_empty

    def params(self):
        return SelfAttentionParams(self.p("Wq"), self.p("Wk"), self.p("Wv"), self.heads)

    def forward(self, seq, mask=None):
        if mask is None:
            mask = np.ones(seq.shape[:-1], dtype=bool)
        mask, empty = _patch_empty(mask, self.allow_empty)
        P = self.params()
        h, dk = P.heads, P.d_k
        lead, n = seq.shape[:-2], seq.shape[-2]

        def split(x):
            return np.swapaxes(x.reshape(lead + (n, h, dk)), -2, -3)

        q, k, v = split(seq @ P.Wq), split(seq @ P.Wk), split(seq @ P.Wv)
        scale = seq.dtype.type(1 / np.sqrt(dk))
        a = softmax(q @ np.swapaxes(k, -1, -2) * scale, mask[..., None, None, :])
        out = np.swapaxes(a @ v, -2, -3).reshape(lead + (n, h * dk))
        keep = None
        if empty.any():
            keep = (~empty).astype(seq.dtype)[..., None, None]
            out = out * keep
        return out, (seq, q, k, v, a, scale, keep)

    def backward(self, cache, g):
        _require_cache(cache, self)
        seq, q, k, v, a, scale, keep = cache
        P = self.params()
        h, dk = P.heads, P.d_k
        lead, n = seq.shape[:-2], seq.shape[-2]
        if keep is not None:
            g = g * keep
        g_heads = np.swapaxes(g.reshape(lead + (n, h, dk)), -2, -3)
        da = g_heads @ np.swapaxes(v, -1, -2)
        dv = np.swapaxes(a, -1, -2) @ g_heads
        dlogits = a * (da - (da * a).sum(axis=-1, keepdims=True)) * scale
        dq = dlogits @ k
        dk_ = np.swapaxes(dlogits, -1, -2) @ q

        def merge(x):
            return np.swapaxes(x, -2, -3).reshape(lead + (n, h * dk))

        dQ, dK, dV = merge(dq), merge(dk_), merge(dv)
        flat_seq = _flat2(seq)
        grads = {
            self.pname("Wq"): flat_seq.T @ _flat2(dQ),
            self.pname("Wk"): flat_seq.T @ _flat2(dK),
            self.pname("Wv"): flat_seq.T @ _flat2(dV),
        }
        d_seq = dQ @ P.Wq.T + dK @ P.Wk.T + dV @ P.Wv.T
        return LayerGrad([d_seq], grads)
