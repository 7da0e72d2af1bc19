"""Dense tensor primitives with hand-written backward passes.

Tensors are plain ``numpy.ndarray`` objects. Every layer follows the same
protocol::

    out, cache = layer.forward(*inputs)
    grads = layer.backward(cache, upstream)   # -> LayerGrad

``forward`` never mutates the layer, so one layer object can serve many
threads. Parameters are looked up by name in a :class:`ParamStore` at call
time; ``LayerGrad.param_grads`` uses the same full names.

All layers accept arbitrary leading batch dimensions and operate on the
trailing axes. Float32 is the training precision; the gradient-check suites
run in float64.
"""

from __future__ import annotations

import hashlib
from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DegenerateInputError, DimensionError, NumericError, UsageError

Tensor = np.ndarray

DTYPES = {"f32": np.float32, "f64": np.float64}


def resolve_dtype(precision):
    if isinstance(precision, str):
        try:
            return np.dtype(DTYPES[precision])
        except KeyError:
            raise ConfigError(f"unknown precision {precision!r}; expected one of {sorted(DTYPES)}")
    return np.dtype(precision)


def check_finite(name, value):
    if not np.all(np.isfinite(value)):
        raise NumericError(f"non-finite values in {name}")


@dataclass
class LayerGrad:
    input_grads: list = field(default_factory=list)
    param_grads: dict = field(default_factory=dict)


class ParamStore:
    """Named parameter tensors with same-shape gradient accumulators."""

    def __init__(self, dtype=np.float32):
        self.dtype = np.dtype(dtype)
        self.params = OrderedDict()
        self.grads = OrderedDict()

    def add(self, name, value):
        if name in self.params:
            raise UsageError(f"duplicate parameter name {name!r}")
        value = np.ascontiguousarray(value, dtype=self.dtype)
        self.params[name] = value
        self.grads[name] = np.zeros_like(value)
        return value

    def __getitem__(self, name):
        return self.params[name]

    def __contains__(self, name):
        return name in self.params

    def __iter__(self):
        return iter(self.params)

    def __len__(self):
        return len(self.params)

    def items(self):
        return self.params.items()

    def zero_grad(self):
        for g in self.grads.values():
            g.fill(0)

    def accumulate(self, param_grads):
        for name, g in param_grads.items():
            self.grads[name] += g

    def copy(self):
        other = ParamStore(self.dtype)
        for name, value in self.params.items():
            other.add(name, value.copy())
        return other

    def load_from(self, other):
        """Overwrite parameter values in place (layers keep their references)."""
        if list(self.params) != list(other.params):
            raise UsageError("parameter stores have different layouts")
        for name, value in other.params.items():
            if value.shape != self.params[name].shape:
                raise DimensionError(f"{name}: shape {value.shape} != {self.params[name].shape}")
            self.params[name][...] = value

    def astype(self, dtype):
        other = ParamStore(dtype)
        for name, value in self.params.items():
            other.add(name, value)
        return other

    def fingerprint(self):
        """64-bit hex digest over names, shapes, dtypes and raw bytes."""
        h = hashlib.blake2b(digest_size=8)
        for name, value in self.params.items():
            h.update(name.encode())
            h.update(str(value.shape).encode())
            h.update(value.dtype.str.encode())
            h.update(value.tobytes())
        return h.hexdigest()

    def equal(self, other):
        if list(self.params) != list(other.params):
            return False
        return all(np.array_equal(self.params[n], other.params[n]) for n in self.params)


# ---------------------------------------------------------------------------
# functional forms


def matmul(a, b):
    a = np.asarray(a)
    b = np.asarray(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    return a @ b


def _mm(x, W):
    """``x @ W`` whose rows do not depend on how many rows are batched.

    numpy routes a 2-D product to gemm but a single row to gemv; the two
    can differ in the last bit. Stacking rows as (N, 1, d) keeps every row
    on the same kernel.
    """
    if x.ndim == 2:
        return (x[:, None, :] @ W)[:, 0, :]
    return x @ W


def _broadcast_mask(mask, shape):
    mask = np.asarray(mask, dtype=bool)
    try:
        return np.broadcast_to(mask, shape)
    except ValueError:
        raise DimensionError(f"mask shape {mask.shape} does not broadcast to {shape}")


def softmax(x, mask=None):
    """Softmax over the last axis; masked positions get exactly zero weight."""
    x = np.asarray(x)
    if mask is None:
        z = x - x.max(axis=-1, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=-1, keepdims=True)
    mask = _broadcast_mask(mask, x.shape)
    if not np.all(mask.any(axis=-1)):
        raise DegenerateInputError("softmax row has every position masked")
    neg = np.array(-np.inf, dtype=x.dtype)
    z = np.where(mask, x, neg)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.where(mask, np.exp(z), 0)
    return e / e.sum(axis=-1, keepdims=True)


def tanh_affine(x, W, b):
    x = np.asarray(x)
    if x.shape[-1] != W.shape[0] or b.shape != (W.shape[1],):
        raise DimensionError(f"tanh_affine shapes do not compose: x{x.shape} W{W.shape} b{b.shape}")
    return np.tanh(_mm(x, W) + b)


def _check_window(window):
    if window < 1 or window % 2 == 0:
        raise ConfigError(f"conv window must be a positive odd integer, got {window}")


def _unfold(x, window):
    """(..., L, d) -> (..., L, window*d) zero-padded sliding windows."""
    half = window // 2
    pad = [(0, 0)] * (x.ndim - 2) + [(half, half), (0, 0)]
    xp = np.pad(x, pad)
    # sliding_window_view appends the window axis last: (..., L, d, w)
    cols = np.lib.stride_tricks.sliding_window_view(xp, window, axis=-2)
    cols = np.swapaxes(cols, -1, -2)
    return np.ascontiguousarray(cols).reshape(x.shape[:-1] + (window * x.shape[-1],))


def conv1d_same(x, filters, bias, window):
    """Same-length 1-D convolution. ``filters`` has shape (window, d_in, d_out)."""
    _check_window(window)
    x = np.asarray(x)
    if x.ndim < 2 or x.shape[-2] < 1:
        raise DimensionError(f"conv1d input must be (..., L, d) with L >= 1, got {x.shape}")
    if filters.shape[0] != window or filters.shape[1] != x.shape[-1] or bias.shape != (filters.shape[2],):
        raise DimensionError(f"conv1d shapes do not compose: x{x.shape} filters{filters.shape} bias{bias.shape}")
    cols = _unfold(x, window)
    return cols @ filters.reshape(-1, filters.shape[2]) + bias


def sigmoid(x):
    return 0.5 * (np.tanh(0.5 * x) + 1)


GRU_PARAMS = ("W_z", "U_z", "b_z", "W_r", "U_r", "b_r", "W_h", "U_h", "b_h")


def gru_step(h_prev, x, params):
    """One GRU update.

    z = sigmoid(x W_z + h U_z + b_z)
    r = sigmoid(x W_r + h U_r + b_r)
    h~ = tanh(x W_h + (r * h) U_h + b_h)
    h = (1 - z) * h_prev + z * h~

    ``params`` maps the names in ``GRU_PARAMS`` to arrays; W_* are (d_in, d),
    U_* are (d, d), b_* are (d,).
    """
    h, _ = _gru_step_forward(np.asarray(h_prev), np.asarray(x), params)
    return h


def _gru_step_forward(h_prev, x, p):
    d = h_prev.shape[-1]
    if p["U_z"].shape != (d, d) or p["W_z"].shape != (x.shape[-1], d):
        raise DimensionError(f"gru shapes do not compose: h{h_prev.shape} x{x.shape} W_z{p['W_z'].shape}")
    z = sigmoid(_mm(x, p["W_z"]) + _mm(h_prev, p["U_z"]) + p["b_z"])
    r = sigmoid(_mm(x, p["W_r"]) + _mm(h_prev, p["U_r"]) + p["b_r"])
    rh = r * h_prev
    c = np.tanh(_mm(x, p["W_h"]) + _mm(rh, p["U_h"]) + p["b_h"])
    h = (1 - z) * h_prev + z * c
    return h, (h_prev, x, z, r, rh, c)


def _gru_step_backward(p, cache, gh):
    h_prev, x, z, r, rh, c = cache
    dz = gh * (c - h_prev)
    dc = gh * z
    dh_prev = gh * (1 - z)
    dc_pre = dc * (1 - c * c)
    drh = dc_pre @ p["U_h"].T
    dr = drh * h_prev
    dh_prev = dh_prev + drh * r
    dz_pre = dz * z * (1 - z)
    dr_pre = dr * r * (1 - r)
    dh_prev = dh_prev + dz_pre @ p["U_z"].T + dr_pre @ p["U_r"].T
    dx = dz_pre @ p["W_z"].T + dr_pre @ p["W_r"].T + dc_pre @ p["W_h"].T
    x2 = x.reshape(-1, x.shape[-1])
    h2 = h_prev.reshape(-1, h_prev.shape[-1])
    rh2 = rh.reshape(-1, rh.shape[-1])

    def flat(a):
        return a.reshape(-1, a.shape[-1])

    grads = {
        "W_z": x2.T @ flat(dz_pre), "U_z": h2.T @ flat(dz_pre), "b_z": flat(dz_pre).sum(0),
        "W_r": x2.T @ flat(dr_pre), "U_r": h2.T @ flat(dr_pre), "b_r": flat(dr_pre).sum(0),
        "W_h": x2.T @ flat(dc_pre), "U_h": rh2.T @ flat(dc_pre), "b_h": flat(dc_pre).sum(0),
    }
    return dh_prev, dx, grads


# ---------------------------------------------------------------------------
# layers


def _require_cache(cache, layer):
    if cache is None:
        raise UsageError(f"{type(layer).__name__}.backward called without a forward cache")


def _flat2(a):
    return a.reshape(-1, a.shape[-1])


class Layer:
    """Base class; subclasses list their parameter suffixes in ``param_names``."""

    param_names = ()

    def __init__(self, store=None, prefix=""):
        self.store = store
        self.prefix = prefix

    def pname(self, short):
        return f"{self.prefix}.{short}" if self.prefix else short

    def p(self, short):
        return self.store[self.pname(short)]

    @property
    def full_param_names(self):
        return [self.pname(s) for s in self.param_names]


class MatMul(Layer):
    """Parameter-free product of two 2-D inputs."""

    def forward(self, a, b):
        return matmul(a, b), (a, b)

    def backward(self, cache, g):
        _require_cache(cache, self)
        a, b = cache
        return LayerGrad([g @ b.T, a.T @ g])


class Linear(Layer):
    """x @ W (+ b). Parameters ``W`` (d_in, d_out) and optional ``b``."""

    def __init__(self, store, prefix, bias=True):
        super().__init__(store, prefix)
        self.bias = bias
        self.param_names = ("W", "b") if bias else ("W",)

    def forward(self, x):
        W = self.p("W")
        if x.shape[-1] != W.shape[0]:
            raise DimensionError(f"{self.prefix}: input {x.shape} vs W {W.shape}")
        y = _mm(x, W)
        if self.bias:
            y = y + self.p("b")
        return y, x

    def backward(self, cache, g):
        _require_cache(cache, self)
        x = cache
        grads = {self.pname("W"): _flat2(x).T @ _flat2(g)}
        if self.bias:
            grads[self.pname("b")] = _flat2(g).sum(0)
        return LayerGrad([g @ self.p("W").T], grads)


class TanhAffine(Layer):
    param_names = ("W", "b")

    def forward(self, x):
        y = tanh_affine(x, self.p("W"), self.p("b"))
        return y, (x, y)

    def backward(self, cache, g):
        _require_cache(cache, self)
        x, y = cache
        pre = g * (1 - y * y)
        return LayerGrad(
            [pre @ self.p("W").T],
            {self.pname("W"): _flat2(x).T @ _flat2(pre), self.pname("b"): _flat2(pre).sum(0)},
        )


class Softmax(Layer):
    def forward(self, x, mask=None):
        p = softmax(x, mask)
        return p, p

    def backward(self, cache, g):
        _require_cache(cache, self)
        p = cache
        return LayerGrad([p * (g - (g * p).sum(axis=-1, keepdims=True))])


class Conv1D(Layer):
    """Same-padded convolution over axis -2; ``filters`` is (window, d_in, d_out)."""

    param_names = ("filters", "bias")

    def __init__(self, store, prefix, window):
        _check_window(window)
        super().__init__(store, prefix)
        self.window = window

    def forward(self, x):
        F = self.p("filters")
        y = conv1d_same(x, F, self.p("bias"), self.window)
        return y, x

    def backward(self, cache, g):
        _require_cache(cache, self)
        x = cache
        F = self.p("filters")
        w, d_in, d_out = F.shape
        cols = _unfold(x, w)
        dF = (_flat2(cols).T @ _flat2(g)).reshape(F.shape)
        db = _flat2(g).sum(0)
        dcols = (g @ F.reshape(-1, d_out).T).reshape(g.shape[:-1] + (w, d_in))
        L = x.shape[-2]
        half = w // 2
        dxp = np.zeros(x.shape[:-2] + (L + 2 * half, d_in), dtype=g.dtype)
        for j in range(w):
            dxp[..., j:j + L, :] += dcols[..., j, :]
        dx = dxp[..., half:half + L, :]
        return LayerGrad([dx], {self.pname("filters"): dF, self.pname("bias"): db})


class Embedding(Layer):
    """Row lookup. Row ``frozen_row`` (padding) never receives gradient."""

    param_names = ("table",)

    def __init__(self, store, prefix, frozen_row=0):
        super().__init__(store, prefix)
        self.frozen_row = frozen_row

    def forward(self, ids):
        table = self.p("table")
        ids = np.asarray(ids)
        if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
            raise DimensionError(f"{self.prefix}: id out of range [0, {table.shape[0]})")
        return table[ids], ids

    def backward(self, cache, g):
        _require_cache(cache, self)
        ids = cache
        table = self.p("table")
        dtable = np.zeros_like(table)
        np.add.at(dtable, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        if self.frozen_row is not None:
            dtable[self.frozen_row] = 0
        return LayerGrad([], {self.pname("table"): dtable})


class Dropout(Layer):
    """Inverted dropout; identity when ``rng`` is None or rate is 0."""

    def __init__(self, rate):
        super().__init__()
        if not 0 <= rate < 1:
            raise ConfigError(f"dropout rate must be in [0, 1), got {rate}")
        self.rate = rate

    def forward(self, x, rng=None):
        if rng is None or self.rate == 0:
            return x, None
        keep = (rng.random(x.shape) >= self.rate).astype(x.dtype) / x.dtype.type(1 - self.rate)
        return x * keep, keep

    def backward(self, cache, g):
        # cache is None for the identity case, which is legitimate here
        return LayerGrad([g if cache is None else g * cache])


class GRUCell(Layer):
    param_names = GRU_PARAMS

    def params(self):
        return {s: self.p(s) for s in GRU_PARAMS}

    def forward(self, h_prev, x):
        return _gru_step_forward(h_prev, x, self.params())

    def backward(self, cache, gh):
        _require_cache(cache, self)
        dh, dx, grads = _gru_step_backward(self.params(), cache, gh)
        return LayerGrad([dh, dx], {self.pname(k): v for k, v in grads.items()})


class GRU(Layer):
    """Runs a GRUCell over axis 1 of (B, T, d_in).

    Masked steps carry the previous state through unchanged, so left-padded
    sequences end on the last real item.
    """

    param_names = GRU_PARAMS

    def __init__(self, store, prefix):
        super().__init__(store, prefix)
        self.cell = GRUCell(store, prefix)

    def forward(self, x, h0, mask=None):
        B, T, _ = x.shape
        if mask is None:
            mask = np.ones((B, T), dtype=bool)
        m = mask.astype(x.dtype)[..., None]
        h = h0
        caches = []
        for t in range(T):
            h_new, c = self.cell.forward(h, x[:, t])
            h = m[:, t] * h_new + (1 - m[:, t]) * h
            caches.append(c)
        return h, (caches, m, x.shape)

    def backward(self, cache, gh):
        _require_cache(cache, self)
        caches, m, xshape = cache
        dx = np.zeros(xshape, dtype=gh.dtype)
        grads = {self.pname(s): np.zeros_like(self.p(s)) for s in GRU_PARAMS}
        for t in reversed(range(xshape[1])):
            g_new = m[:, t] * gh
            lg = self.cell.backward(caches[t], g_new)
            dh_prev, dx_t = lg.input_grads
            dx[:, t] = dx_t
            for k, v in lg.param_grads.items():
                grads[k] += v
            gh = dh_prev + (1 - m[:, t]) * gh
        return LayerGrad([dx, gh], grads)


# ---------------------------------------------------------------------------
# verification helpers


def numerical_grad(f, x, h=1e-5, order=2):
    """Central finite differences of scalar ``f()`` w.r.t. array ``x`` (mutated in place).

    ``order=4`` uses the five-point stencil, whose O(h^4) truncation allows a
    larger ``h`` and so less cancellation when gradients are tiny.
    """
    if order not in (2, 4):
        raise ConfigError(f"finite-difference order must be 2 or 4, got {order}")
    grad = np.zeros_like(x, dtype=np.float64)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)

    def at(i, v):
        flat[i] = v
        return f()

    for i in range(flat.size):
        orig = flat[i]
        if order == 2:
            gflat[i] = (at(i, orig + h) - at(i, orig - h)) / (2 * h)
        else:
            gflat[i] = (8 * (at(i, orig + h) - at(i, orig - h)) - (at(i, orig + 2 * h) - at(i, orig - 2 * h))) / (12 * h)
        flat[i] = orig
    return grad


def max_relative_error(analytic, numeric, floor=1e-8):
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / denom)) if analytic.size else 0.0
