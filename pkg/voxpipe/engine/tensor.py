"""numpy の上に載せた逆伝播（reverse-mode）自動微分エンジン。

Tensor は data / grad と、勾配を親へ返すクロージャを持つ。
5次元のレイアウトは NCDHW（D=z, H=y, W=x, x が最速）で Volume.data と一致する。
カーネル・窓・ストライドのタプルもすべて (d, h, w) の順。
"""

import contextlib
import math
from typing import Callable, Optional, Sequence, Tuple

import numpy as np
from scipy.special import expit

from voxpipe.domain.errors import NonScalarLoss, ShapeMismatch

DEFAULT_DTYPE = np.float32

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """推論用: この中で作った Tensor はグラフを記録しない"""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def _as_array(data, dtype=None) -> np.ndarray:
    arr = np.asarray(data)
    if dtype is not None:
        return arr.astype(dtype, copy=False)
    if not np.issubdtype(arr.dtype, np.floating):
        return arr.astype(DEFAULT_DTYPE)
    return arr


def _unbroadcast(g: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """ブロードキャストで広がった軸を足し戻して shape にそろえる"""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


class Tensor:
    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = _as_array(data, dtype)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)
        self.op = "leaf"
        self._parents: Tuple["Tensor", ...] = ()
        self._backward: Optional[Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]] = None
        self._retain = False

    # ------------------------------------------------------------------
    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self.op}, requires_grad={self.requires_grad})"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item はスカラーのみ: shape={self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def retain_grad(self) -> "Tensor":
        """中間ノードでも backward 後に .grad を残す（Grad-CAM 用）"""
        self._retain = True
        return self

    def zero_grad(self) -> None:
        self.grad = None

    def _const(self, other) -> "Tensor":
        if isinstance(other, Tensor):
            return other
        return Tensor(np.asarray(other, dtype=self.dtype))

    # ------------------------------------------------------------------
    # 要素演算
    def __add__(self, other):
        o = self._const(other)
        return _result(self.data + o.data, (self, o), lambda g: (_unbroadcast(g, self.shape), _unbroadcast(g, o.shape)), "add")

    __radd__ = __add__

    def __sub__(self, other):
        o = self._const(other)
        return _result(self.data - o.data, (self, o), lambda g: (_unbroadcast(g, self.shape), _unbroadcast(-g, o.shape)), "sub")

    def __rsub__(self, other):
        return self._const(other) - self

    def __mul__(self, other):
        o = self._const(other)
        return _result(
            self.data * o.data,
            (self, o),
            lambda g: (_unbroadcast(g * o.data, self.shape), _unbroadcast(g * self.data, o.shape)),
            "mul",
        )

    __rmul__ = __mul__

    def __truediv__(self, other):
        o = self._const(other)
        return _result(
            self.data / o.data,
            (self, o),
            lambda g: (_unbroadcast(g / o.data, self.shape), _unbroadcast(-g * self.data / (o.data * o.data), o.shape)),
            "div",
        )

    def __rtruediv__(self, other):
        return self._const(other) / self

    def __neg__(self):
        return _result(-self.data, (self,), lambda g: (-g,), "neg")

    def __pow__(self, p: float):
        p = float(p)

        def back(g):
            if p == 0.0:
                return (np.zeros_like(self.data),)
            return (g * p * self.data ** (p - 1.0),)

        return _result(self.data**p, (self,), back, "pow")

    def log(self):
        return _result(np.log(self.data), (self,), lambda g: (g / self.data,), "log")

    def exp(self):
        out = np.exp(self.data)
        return _result(out, (self,), lambda g: (g * out,), "exp")

    def clip(self, lo: Optional[float] = None, hi: Optional[float] = None):
        """範囲外では勾配 0"""
        out = np.clip(self.data, lo, hi)
        inside = np.ones(self.shape, dtype=bool)
        if lo is not None:
            inside &= self.data >= lo
        if hi is not None:
            inside &= self.data <= hi
        return _result(out, (self,), lambda g: (np.where(inside, g, 0).astype(g.dtype),), "clip")

    # ------------------------------------------------------------------
    # 集約・形状
    def sum(self, axis=None, keepdims: bool = False):
        def back(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, self.shape).copy(),)

        return _result(np.sum(self.data, axis=axis, keepdims=keepdims), (self,), back, "sum")

    def mean(self, axis=None, keepdims: bool = False):
        n = self.size if axis is None else int(np.prod([self.shape[a] for a in np.atleast_1d(axis)]))
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return _result(self.data.reshape(shape), (self,), lambda g: (g.reshape(self.shape),), "reshape")

    def __getitem__(self, idx):
        def back(g):
            out = np.zeros_like(self.data)
            np.add.at(out, idx, g)
            return (out,)

        return _result(self.data[idx], (self,), back, "getitem")

    def matmul(self, other: "Tensor"):
        o = self._const(other)
        if self.ndim != 2 or o.ndim != 2 or self.shape[1] != o.shape[0]:
            raise ShapeMismatch(f"matmul: {self.shape} @ {o.shape}")
        return _result(self.data @ o.data, (self, o), lambda g: (g @ o.data.T, self.data.T @ g), "matmul")

    __matmul__ = matmul

    # ------------------------------------------------------------------
    def backward(self, grad: Optional[np.ndarray] = None) -> None:
        """逆伝播。葉の .grad には加算で積む（呼び出し側で zero_grad する）"""
        if grad is None:
            if self.size != 1:
                raise NonScalarLoss(f"backward はスカラー損失のみ: shape={self.shape}")
            grad = np.ones_like(self.data)
        order = _topo_order(self)
        pending = {id(self): np.asarray(grad, dtype=self.dtype)}
        for node in reversed(order):
            g = pending.pop(id(node), None)
            if g is None:
                continue
            if node.is_leaf or node._retain:
                if node.requires_grad:
                    node.grad = g.copy() if node.grad is None else node.grad + g
            if node.is_leaf:
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                pg = np.asarray(pg, dtype=parent.dtype)
                key = id(parent)
                pending[key] = pg if key not in pending else pending[key] + pg


def _result(data, parents: Tuple[Tensor, ...], backward_fn, op: str) -> Tensor:
    rg = _GRAD_ENABLED and any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=rg)
    if rg:
        out._parents = parents
        out._backward = backward_fn
        out.op = op
    return out


def _topo_order(root: Tensor):
    """再帰なしの DFS でトポロジカル順（親が先）"""
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def tensor(data, requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


# =============================================================================
# 3D 畳み込み
# =============================================================================
def _triple(v) -> Tuple[int, int, int]:
    if isinstance(v, int):
        return (v, v, v)
    t = tuple(int(a) for a in v)
    if len(t) != 3:
        raise ShapeMismatch(f"3要素のタプルが必要: {v}")
    return t


def _pads(n: int, k: int, s: int, mode: str) -> Tuple[int, int, int]:
    """(out, pad_lo, pad_hi)。same は out = ceil(n/s) で余りは高い側"""
    if mode == "same":
        out = -(-n // s)
        total = max((out - 1) * s + k - n, 0)
        return out, total // 2, total - total // 2
    if mode == "valid":
        if n < k:
            raise ShapeMismatch(f"valid 畳み込みでカーネル {k} が入力 {n} に収まりません")
        return (n - k) // s + 1, 0, 0
    raise ShapeMismatch(f"pad は same / valid: {mode}")


def _window(arr_cl: np.ndarray, off, stride, out):
    """channels-last 配列からオフセット off の strided スライス (N, od, oh, ow, C)"""
    (a, b, c), (sd, sh, sw), (od, oh, ow) = off, stride, out
    return arr_cl[:, a : a + sd * (od - 1) + 1 : sd, b : b + sh * (oh - 1) + 1 : sh, c : c + sw * (ow - 1) + 1 : sw, :]


def _offsets(k):
    return [(a, b, c) for a in range(k[0]) for b in range(k[1]) for c in range(k[2])]


def _conv_forward(xp_cl: np.ndarray, w: np.ndarray, stride, out) -> np.ndarray:
    """xp_cl: パディング済み (N, Dp, Hp, Wp, Cin) → (N, od, oh, ow, Cout)"""
    n = xp_cl.shape[0]
    acc = np.zeros((n,) + tuple(out) + (w.shape[0],), dtype=xp_cl.dtype)
    for off in _offsets(w.shape[2:]):
        acc += _window(xp_cl, off, stride, out) @ w[:, :, off[0], off[1], off[2]].T
    return acc


def _conv_backward_input(g_cl: np.ndarray, w: np.ndarray, stride, padded_shape) -> np.ndarray:
    """g_cl: (N, od, oh, ow, Cout) → パディング済み入力の勾配 (N, Dp, Hp, Wp, Cin)"""
    out = g_cl.shape[1:4]
    gx = np.zeros(padded_shape, dtype=g_cl.dtype)
    for off in _offsets(w.shape[2:]):
        _window(gx, off, stride, out)[...] += g_cl @ w[:, :, off[0], off[1], off[2]]
    return gx


def _conv_backward_weight(g_cl: np.ndarray, xp_cl: np.ndarray, stride, kshape) -> np.ndarray:
    out = g_cl.shape[1:4]
    cout, cin = g_cl.shape[-1], xp_cl.shape[-1]
    gw = np.zeros((cout, cin) + tuple(kshape), dtype=g_cl.dtype)
    g2 = g_cl.reshape(-1, cout)
    for off in _offsets(kshape):
        patch = _window(xp_cl, off, stride, out).reshape(-1, cin)
        gw[:, :, off[0], off[1], off[2]] = g2.T @ patch
    return gw


def _to_cl(a: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(np.moveaxis(a, 1, -1))


def _from_cl(a: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(np.moveaxis(a, -1, 1))


def conv3d(x: Tensor, w: Tensor, b: Optional[Tensor] = None, stride=(1, 1, 1), pad: str = "same") -> Tensor:
    """相互相関（0 パディング）。w は (Cout, Cin, kd, kh, kw)"""
    if x.ndim != 5 or w.ndim != 5:
        raise ShapeMismatch(f"conv3d: x={x.shape} w={w.shape}")
    if x.shape[1] != w.shape[1]:
        raise ShapeMismatch(f"conv3d: 入力チャネル {x.shape[1]} とカーネル {w.shape[1]} が不一致")
    if b is not None and b.shape != (w.shape[0],):
        raise ShapeMismatch(f"conv3d: bias {b.shape} と Cout {w.shape[0]} が不一致")
    stride = _triple(stride)
    geo = [_pads(n, k, s, pad) for n, k, s in zip(x.shape[2:], w.shape[2:], stride)]
    out = tuple(o for o, _, _ in geo)
    padw = [(0, 0), (0, 0)] + [(lo, hi) for _, lo, hi in geo]
    xp_cl = _to_cl(np.pad(x.data, padw))
    y_cl = _conv_forward(xp_cl, w.data, stride, out)
    if b is not None:
        y_cl += b.data

    def back(g):
        g_cl = _to_cl(g)
        gx = None
        if x.requires_grad:
            gxp = _from_cl(_conv_backward_input(g_cl, w.data, stride, xp_cl.shape[:4] + (w.shape[1],)))
            gx = gxp[tuple(slice(lo, lo + n) if i >= 2 else slice(None) for i, (n, (lo, _)) in enumerate(zip(x.shape, padw)))]
        gw = _conv_backward_weight(g_cl, xp_cl, stride, w.shape[2:]) if w.requires_grad else None
        gb = g.sum(axis=(0, 2, 3, 4)) if b is not None and b.requires_grad else None
        return (gx, gw, gb) if b is not None else (gx, gw)

    parents = (x, w, b) if b is not None else (x, w)
    return _result(_from_cl(y_cl), parents, back, "conv3d")


def conv3d_transpose(x: Tensor, w: Tensor, b: Optional[Tensor] = None, stride=(1, 2, 2), pad: str = "same") -> Tensor:
    """conv3d の随伴。w は (Cin, Cout, kd, kh, kw)、出力の空間サイズ = 入力 × stride。

    conv3d(y, w) の入力 y に関する勾配（上流 = x）と一致する。
    """
    if x.ndim != 5 or w.ndim != 5:
        raise ShapeMismatch(f"conv3d_transpose: x={x.shape} w={w.shape}")
    if x.shape[1] != w.shape[0]:
        raise ShapeMismatch(f"conv3d_transpose: 入力チャネル {x.shape[1]} とカーネル {w.shape[0]} が不一致")
    if pad != "same":
        raise ShapeMismatch("conv3d_transpose は same パディングのみ")
    if b is not None and b.shape != (w.shape[1],):
        raise ShapeMismatch(f"conv3d_transpose: bias {b.shape} と Cout {w.shape[1]} が不一致")
    stride = _triple(stride)
    full = tuple(n * s for n, s in zip(x.shape[2:], stride))
    geo = [_pads(n, k, s, "same") for n, k, s in zip(full, w.shape[2:], stride)]
    padded = (x.shape[0],) + tuple(n + lo + hi for n, (_, lo, hi) in zip(full, geo)) + (w.shape[1],)
    crop = (slice(None),) + tuple(slice(lo, lo + n) for n, (_, lo, _) in zip(full, geo)) + (slice(None),)
    x_cl = _to_cl(x.data)
    y_cl = _conv_backward_input(x_cl, w.data, stride, padded)[crop]
    if b is not None:
        y_cl = y_cl + b.data
    padw = [(0, 0)] + [(lo, hi) for _, lo, hi in geo] + [(0, 0)]

    def back(g):
        gp_cl = np.pad(_to_cl(g), padw)
        gx = _from_cl(_conv_forward(gp_cl, w.data, stride, x.shape[2:])) if x.requires_grad else None
        gw = _conv_backward_weight(x_cl, gp_cl, stride, w.shape[2:]) if w.requires_grad else None
        gb = g.sum(axis=(0, 2, 3, 4)) if b is not None and b.requires_grad else None
        return (gx, gw, gb) if b is not None else (gx, gw)

    parents = (x, w, b) if b is not None else (x, w)
    return _result(_from_cl(y_cl), parents, back, "conv3d_transpose")


def maxpool3d(x: Tensor, window=(1, 3, 3), stride=(1, 2, 2)) -> Tensor:
    """-inf パディング（same 方式）の最大値プーリング。同値は最初の index が勝つ"""
    window, stride = _triple(window), _triple(stride)
    geo = [_pads(n, k, s, "same") for n, k, s in zip(x.shape[2:], window, stride)]
    out = tuple(o for o, _, _ in geo)
    padw = [(0, 0), (0, 0)] + [(lo, hi) for _, lo, hi in geo]
    xp_cl = _to_cl(np.pad(x.data, padw, constant_values=-np.inf))
    offsets = _offsets(window)
    best = np.full((x.shape[0],) + out + (x.shape[1],), -np.inf, dtype=x.dtype)
    arg = np.zeros(best.shape, dtype=np.int32)
    for t, off in enumerate(offsets):
        v = _window(xp_cl, off, stride, out)
        upd = v > best
        best = np.where(upd, v, best)
        arg[upd] = t

    def back(g):
        g_cl = _to_cl(g)
        gxp = np.zeros(xp_cl.shape, dtype=g.dtype)
        for t, off in enumerate(offsets):
            _window(gxp, off, stride, out)[...] += np.where(arg == t, g_cl, 0)
        gx = _from_cl(gxp)
        return (gx[tuple(slice(lo, lo + n) if i >= 2 else slice(None) for i, (n, (lo, _)) in enumerate(zip(x.shape, padw)))],)

    return _result(_from_cl(best), (x,), back, "maxpool3d")


# =============================================================================
# 正規化・活性化・その他
# =============================================================================
def instance_norm(x: Tensor, gamma: Optional[Tensor] = None, beta: Optional[Tensor] = None, eps: float = 1e-5) -> Tensor:
    """(サンプル, チャネル) ごとに空間ボクセルで標準化（分散は 1/n）してからアフィン"""
    axes = tuple(range(2, x.ndim))
    m = int(np.prod([x.shape[a] for a in axes]))
    mu = x.data.mean(axis=axes, keepdims=True)
    var = x.data.var(axis=axes, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    bshape = (1, -1) + (1,) * len(axes)
    y = xhat
    if gamma is not None:
        y = y * gamma.data.reshape(bshape)
    if beta is not None:
        y = y + beta.data.reshape(bshape)

    def back(g):
        dxhat = g * gamma.data.reshape(bshape) if gamma is not None else g
        gx = None
        if x.requires_grad:
            s1 = dxhat.sum(axis=axes, keepdims=True)
            s2 = (dxhat * xhat).sum(axis=axes, keepdims=True)
            gx = inv / m * (m * dxhat - s1 - xhat * s2)
        grads = [gx]
        if gamma is not None:
            grads.append((g * xhat).sum(axis=(0,) + axes) if gamma.requires_grad else None)
        if beta is not None:
            grads.append(g.sum(axis=(0,) + axes) if beta.requires_grad else None)
        return tuple(grads)

    parents = tuple(t for t in (x, gamma, beta) if t is not None)
    return _result(y.astype(x.dtype, copy=False), parents, back, "instance_norm")


def relu(x: Tensor) -> Tensor:
    pos = x.data > 0
    return _result(np.where(pos, x.data, 0).astype(x.dtype), (x,), lambda g: (np.where(pos, g, 0).astype(g.dtype),), "relu")


def leaky_relu(x: Tensor, slope: float = 0.2) -> Tensor:
    pos = x.data > 0
    out = np.where(pos, x.data, x.data * slope).astype(x.dtype)
    return _result(out, (x,), lambda g: (np.where(pos, g, g * slope).astype(g.dtype),), "leaky_relu")


def sigmoid(x: Tensor) -> Tensor:
    out = expit(x.data).astype(x.dtype, copy=False)
    return _result(out, (x,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def activation(x: Tensor, kind: str, slope: float = 0.2) -> Tensor:
    if kind == "relu":
        return relu(x)
    if kind == "leaky_relu":
        return leaky_relu(x, slope)
    if kind == "sigmoid":
        return sigmoid(x)
    if kind == "linear":
        return x
    raise ValueError(f"未知の活性化: {kind}")


def concat_channels(*ts: Tensor) -> Tensor:
    if len(ts) < 2:
        raise ShapeMismatch("concat_channels には2つ以上の Tensor が必要")
    ref = ts[0].shape
    for t in ts[1:]:
        if t.ndim != len(ref) or t.shape[0] != ref[0] or t.shape[2:] != ref[2:]:
            raise ShapeMismatch(f"concat_channels: チャネル以外の形状が不一致 {ref} vs {t.shape}")
    bounds = np.cumsum([0] + [t.shape[1] for t in ts])

    def back(g):
        return tuple(g[:, bounds[i] : bounds[i + 1]] for i in range(len(ts)))

    return _result(np.concatenate([t.data for t in ts], axis=1), tuple(ts), back, "concat")


def global_avg_pool3d(x: Tensor) -> Tensor:
    """(N, C, D, H, W) → (N, C)"""
    if x.ndim != 5:
        raise ShapeMismatch(f"global_avg_pool3d は5次元入力: {x.shape}")
    return x.mean(axis=(2, 3, 4))


def dense(x: Tensor, w: Tensor, b: Optional[Tensor] = None) -> Tensor:
    """(N, F) @ (F, O) + b"""
    y = x.matmul(w)
    return y + b if b is not None else y


def crop_like(x: Tensor, spatial: Tuple[int, int, int]) -> Tensor:
    """空間サイズを spatial に中央クロップ（大きい場合のみ）"""
    if tuple(x.shape[2:]) == tuple(spatial):
        return x
    sl = [slice(None), slice(None)]
    for n, m in zip(x.shape[2:], spatial):
        if n < m:
            raise ShapeMismatch(f"crop_like: {x.shape[2:]} は {spatial} より小さい")
        lo = (n - m) // 2
        sl.append(slice(lo, lo + m))
    return x[tuple(sl)]


def he_normal_init(shape, fan_in: int, seed: int, dtype=DEFAULT_DTYPE) -> Tensor:
    """N(0, 2/fan_in) のサンプル。同じ seed なら同じ値"""
    if fan_in < 1:
        raise ValueError(f"fan_in は 1 以上: {fan_in}")
    rng = np.random.default_rng(seed)
    data = rng.normal(0.0, math.sqrt(2.0 / fan_in), size=tuple(shape)).astype(dtype)
    return Tensor(data, requires_grad=True)
