"""Shifted 1D-window cross-view attention along the image x-axis.

Each iteration adds a shared positional embedding to every view, splits each
row into cyclic windows of width ``w`` (shift alternates ``0, w/2, 0, ...``),
and lets the queries of view ``i`` attend to the keys/values of the aligned
windows of every other view. The result is added back residually.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import FewerThanTwoViews, InvalidParams, ShapeMismatch, WindowWiderThanImage

WINDOW_SIZES = (16, 32, 64)


@dataclass
class FeatureGrid:
    view_id: int
    data: np.ndarray  # (height, width, channels)

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.ndim != 3:
            raise ShapeMismatch(f"feature grid must be (H, W, C), got {self.data.shape}")
        if not np.all(np.isfinite(self.data)):
            raise ShapeMismatch("feature grid contains non-finite values")

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]


@dataclass
class EvaParams:
    gamma: np.ndarray  # (H, W, C) positional embedding, shared by all views
    wq: np.ndarray  # (C, C); head h owns columns h*d:(h+1)*d
    wk: np.ndarray
    wv: np.ndarray
    wo: np.ndarray  # (C, C); head h owns rows h*d:(h+1)*d
    heads: int = 4
    window: int = 32
    num_iterations: int = 2
    check_window: bool = field(default=True, repr=False)

    def __post_init__(self):
        C = self.gamma.shape[-1]
        if C % self.heads:
            raise InvalidParams(f"channels {C} not divisible by heads {self.heads}")
        if self.check_window and self.window not in WINDOW_SIZES:
            raise InvalidParams(f"window must be one of {WINDOW_SIZES}, got {self.window}")
        if self.window % 2:
            raise InvalidParams("window must be even so that it can shift by half")
        if self.num_iterations < 1:
            raise InvalidParams("num_iterations must be >= 1")
        for name in ("wq", "wk", "wv", "wo"):
            if getattr(self, name).shape != (C, C):
                raise InvalidParams(f"{name} must be ({C}, {C})")

    @classmethod
    def init(cls, height, width, channels, *, heads=4, window=32, num_iterations=2, seed=0,
             dtype=np.float64, check_window=True) -> "EvaParams":
        """Seeded init: gamma ~ U(-0.02, 0.02), projections ~ N(0, 1/C)."""
        rng = np.random.default_rng(seed)
        gamma = rng.uniform(-0.02, 0.02, (height, width, channels))
        std = 1.0 / np.sqrt(channels)
        ws = [rng.normal(0.0, std, (channels, channels)) for _ in range(4)]
        return cls(gamma.astype(dtype), *(w.astype(dtype) for w in ws), heads=heads, window=window,
                   num_iterations=num_iterations, check_window=check_window)

    @property
    def head_dim(self) -> int:
        return self.gamma.shape[-1] // self.heads

    def arrays(self) -> dict:
        return {"gamma": self.gamma, "wq": self.wq, "wk": self.wk, "wv": self.wv, "wo": self.wo}

    def replace(self, **arrays) -> "EvaParams":
        data = self.arrays()
        data.update(arrays)
        return EvaParams(**data, heads=self.heads, window=self.window,
                         num_iterations=self.num_iterations, check_window=self.check_window)


@dataclass(frozen=True)
class WindowLayout:
    width: int
    window: int
    shift: int
    spans: tuple  # ((start, end), ...) with end possibly < start for a wrapped span

    def pixels(self, span_index: int) -> list[int]:
        start, end = self.spans[span_index]
        length = (end - start) % self.width or self.width
        return [(start + k) % self.width for k in range(length)]


def window_partition(grid: FeatureGrid | int, w: int, shift: int) -> WindowLayout:
    """Split a row of ``width`` pixels into ``ceil(width / w)`` cyclic spans offset by ``shift``.

    The same layout applies to every row. Spans are ``[start, end)`` modulo
    the width; the last one is shorter when ``w`` does not divide the width.
    """
    width = grid if isinstance(grid, int) else grid.width
    if w > width:
        raise WindowWiderThanImage(f"window {w} wider than image {width}")
    if not 0 <= shift < w:
        raise InvalidParams(f"shift must satisfy 0 <= shift < {w}")
    n = -(-width // w)
    spans = []
    for k in range(n):
        start = shift + k * w
        end = min(start + w, shift + width)
        if start >= width:
            start, end = start - width, end - width
        spans.append((start, end - width if end > width else end))
    return WindowLayout(width, w, shift, tuple(spans))


def _stack(grids) -> np.ndarray:
    grids = list(grids)
    if len(grids) < 2:
        raise FewerThanTwoViews("cross-view attention needs at least two views")
    shapes = {g.data.shape for g in grids}
    if len(shapes) != 1:
        raise ShapeMismatch(f"views disagree on shape: {sorted(shapes)}")
    return np.stack([g.data for g in grids])


def _window_groups(width: int, w: int):
    """Contiguous groups of equal-length windows in rolled coordinates."""
    nfull = width // w
    groups = []
    if nfull:
        groups.append((0, nfull * w, w))
    if width % w:
        groups.append((nfull * w, width, width % w))
    return groups


def _softmax(s):
    """In-place softmax over the last axis."""
    s -= s.max(axis=-1, keepdims=True)
    np.exp(s, out=s)
    s /= s.sum(axis=-1, keepdims=True)
    return s


def _iteration_forward(X, params: EvaParams, shift: int, hook=None, keep=False):
    """One residual attention round. ``X`` is (V, H, W, C)."""
    V, H, W, C = X.shape
    nh, d = params.heads, params.head_dim
    scale = X.dtype.type(1.0 / np.sqrt(d))
    Y = np.roll(X + params.gamma, -shift, axis=2)
    Q = (Y @ params.wq).reshape(V, H, W, nh, d)
    Kt = (Y @ params.wk).reshape(V, H, W, nh, d)
    Vt = (Y @ params.wv).reshape(V, H, W, nh, d)
    A = np.zeros((V, H, W, nh, d), dtype=X.dtype)
    probs = []
    for a, b, w in _window_groups(W, params.window):
        nw = (b - a) // w
        q = Q[:, :, a:b].reshape(V, H, nw, w, nh, d).transpose(0, 1, 2, 4, 3, 5)
        k = Kt[:, :, a:b].reshape(V, H, nw, w, nh, d).transpose(0, 1, 2, 4, 3, 5)
        v = Vt[:, :, a:b].reshape(V, H, nw, w, nh, d).transpose(0, 1, 2, 4, 3, 5)
        group = []
        for i in range(V):
            others = [j for j in range(V) if j != i]
            kk = np.concatenate([k[j] for j in others], axis=-2)  # (H, nw, nh, (V-1)w, d)
            vv = np.concatenate([v[j] for j in others], axis=-2)
            P = q[i] @ np.swapaxes(kk, -1, -2)
            P *= scale
            _softmax(P)
            if hook is not None:
                hook(P)
            out = P @ vv  # (H, nw, nh, w, d)
            A[i, :, a:b] = out.transpose(0, 1, 3, 2, 4).reshape(H, b - a, nh, d)
            if keep:
                group.append(P)
            del P, out
        if keep:
            probs.append((a, b, w, q, k, v, group))
    Acat = A.reshape(V, H, W, C)
    out = np.roll(Acat @ params.wo, shift, axis=2)
    cache = (Y, Acat, probs)
    return X + out, cache


def _unwindow(t, span):
    V, H, _, nh, _, d = t.shape
    return t.transpose(0, 1, 2, 4, 3, 5).reshape(V, H, span, nh, d)


def _iteration_backward(dX_next, params: EvaParams, shift: int, cache, grads: dict):
    Y, Acat, probs = cache
    V, H, W, C = Y.shape
    nh, d = params.heads, params.head_dim
    scale = 1.0 / np.sqrt(d)
    dOut = np.roll(dX_next, -shift, axis=2)
    grads["wo"] += np.einsum("vhwc,vhwk->ck", Acat, dOut)
    dA = (dOut @ params.wo.T).reshape(V, H, W, nh, d)
    dQ = np.zeros((V, H, W, nh, d), dtype=Y.dtype)
    dK = np.zeros_like(dQ)
    dV = np.zeros_like(dQ)
    for a, b, w, q, k, v, group in probs:
        nw = (b - a) // w
        dA_g = dA[:, :, a:b].reshape(V, H, nw, w, nh, d).transpose(0, 1, 2, 4, 3, 5)
        dq = np.zeros_like(q)
        dk = np.zeros_like(k)
        dv = np.zeros_like(v)
        for i in range(V):
            others = [j for j in range(V) if j != i]
            kk = np.concatenate([k[j] for j in others], axis=-2)
            vv = np.concatenate([v[j] for j in others], axis=-2)
            P = group[i]
            dP = dA_g[i] @ np.swapaxes(vv, -1, -2)
            dvv = np.swapaxes(P, -1, -2) @ dA_g[i]
            dS = P * (dP - np.sum(dP * P, axis=-1, keepdims=True)) * scale
            dq[i] += dS @ kk
            dkk = np.swapaxes(dS, -1, -2) @ q[i]
            for slot, j in enumerate(others):
                sl = slice(slot * w, (slot + 1) * w)
                dk[j] += dkk[..., sl, :]
                dv[j] += dvv[..., sl, :]
        dQ[:, :, a:b] = _unwindow(dq, b - a)
        dK[:, :, a:b] = _unwindow(dk, b - a)
        dV[:, :, a:b] = _unwindow(dv, b - a)
    dQ, dK, dV = (t.reshape(V, H, W, C) for t in (dQ, dK, dV))
    grads["wq"] += np.einsum("vhwc,vhwk->ck", Y, dQ)
    grads["wk"] += np.einsum("vhwc,vhwk->ck", Y, dK)
    grads["wv"] += np.einsum("vhwc,vhwk->ck", Y, dV)
    dY = np.roll(dQ @ params.wq.T + dK @ params.wk.T + dV @ params.wv.T, shift, axis=2)
    grads["gamma"] += dY.sum(axis=0)
    return dX_next + dY


def _shifts(params: EvaParams):
    return [(r % 2) * (params.window // 2) for r in range(params.num_iterations)]


def _check_params(X, params: EvaParams):
    _, H, W, C = X.shape
    if params.gamma.shape != (H, W, C):
        raise ShapeMismatch(f"gamma is {params.gamma.shape}, grids are {(H, W, C)}")
    if params.window > W:
        raise WindowWiderThanImage(f"window {params.window} wider than image {W}")


def eva_forward(grids, params: EvaParams, hook=None) -> list[FeatureGrid]:
    """Apply ``num_iterations`` shifted-window rounds. ``hook`` receives each softmax block."""
    grids = list(grids)
    X = _stack(grids)
    _check_params(X, params)
    for shift in _shifts(params):
        X, _ = _iteration_forward(X, params, shift, hook)
    return [FeatureGrid(g.view_id, X[i]) for i, g in enumerate(grids)]


def eva_backward(grids, params: EvaParams, d_out):
    """Adjoint of :func:`eva_forward`.

    ``d_out`` is a list of (H, W, C) arrays (or FeatureGrids). Returns
    ``(d_grids, d_params)`` where ``d_params`` maps gamma/wq/wk/wv/wo to arrays.
    """
    grids = list(grids)
    X = _stack(grids)
    _check_params(X, params)
    dX = np.stack([np.asarray(getattr(g, "data", g)) for g in d_out])
    if dX.shape != X.shape:
        raise ShapeMismatch(f"d_out is {dX.shape}, grids are {X.shape}")
    caches = []
    for shift in _shifts(params):
        X, cache = _iteration_forward(X, params, shift, keep=True)
        caches.append((shift, cache))
    grads = {name: np.zeros_like(a) for name, a in params.arrays().items()}
    dX = dX.astype(X.dtype, copy=True)
    for shift, cache in reversed(caches):
        dX = _iteration_backward(dX, params, shift, cache, grads)
    return [dX[i] for i in range(len(grids))], grads


def full_cross_view_attention(grids, params: EvaParams, hook=None) -> list[FeatureGrid]:
    """Unwindowed comparator: every pixel of view i attends to every pixel of the other views."""
    grids = list(grids)
    X = _stack(grids)
    V, H, W, C = X.shape
    nh, d = params.heads, params.head_dim
    scale = np.asarray(1.0 / np.sqrt(d), dtype=X.dtype)
    Y = (X + params.gamma).reshape(V, H * W, C)
    Q = Y @ params.wq
    Kt = Y @ params.wk
    Vt = Y @ params.wv
    A = np.empty_like(Q)
    for i in range(V):
        others = [j for j in range(V) if j != i]
        kk = np.concatenate([Kt[j] for j in others], axis=0)
        vv = np.concatenate([Vt[j] for j in others], axis=0)
        for h in range(nh):
            cols = slice(h * d, (h + 1) * d)
            S = Q[i, :, cols] @ kk[:, cols].T
            S *= scale
            _softmax(S)
            if hook is not None:
                hook(S)
            A[i, :, cols] = S @ vv[:, cols]
            del S
    out = X + (A @ params.wo).reshape(V, H, W, C)
    return [FeatureGrid(g.view_id, out[i]) for i, g in enumerate(grids)]
