"""Reverse-mode automatic differentiation over float64 numpy arrays.

A ``Tensor`` wraps an ndarray and records how it was produced; ``backward()``
replays the recording once in reverse topological order. Graph construction
and traversal are single-threaded and allocation-order deterministic, so a
fixed seed gives bitwise-identical results across runs on one platform.
"""

from __future__ import annotations

from contextlib import contextmanager

import numpy as np
from numpy.lib.stride_tricks import as_strided
from scipy.special import expit


class NumericError(RuntimeError):
    """A computation produced non-finite values."""


_GRAD_ENABLED = True
_DTYPE = np.float64


@contextmanager
def no_grad():
    """Disable graph recording inside the block (inference mode)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def default_dtype():
    return _DTYPE


def set_default_dtype(dtype) -> None:
    """float64 (default) or float32; applies to tensors created afterwards.

    float32 roughly halves memory traffic, which is what training time is
    bound by; results stay bitwise deterministic for a fixed dtype.
    """
    global _DTYPE
    dtype = np.dtype(dtype).type
    if dtype not in (np.float32, np.float64):
        raise ValueError("dtype must be float32 or float64")
    _DTYPE = dtype


@contextmanager
def using_dtype(dtype):
    global _DTYPE
    prev = _DTYPE
    set_default_dtype(dtype)
    try:
        yield
    finally:
        _DTYPE = prev


class Tensor:
    """Dense float64 array with an optional same-shape gradient accumulator."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = np.asarray(data, dtype=dtype or _DTYPE)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        """A view of the same values, cut off from the graph."""
        return Tensor(self.data)

    def backward(self) -> None:
        """Accumulate d(self)/d(leaf) into ``grad`` of every reachable tensor.

        Only defined for scalar outputs.
        """
        if self.data.size != 1:
            raise ValueError("backward() requires a scalar tensor")
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward is None:
                continue
            for p, g in zip(node._parents, node._backward(node.grad)):
                if g is None or not p.requires_grad:
                    continue
                p.grad = g if p.grad is None else p.grad + g

    # arithmetic sugar; python scalars are promoted to constant tensors
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __neg__(self):
        return neg(self)

    def reshape(self, shape):
        return reshape(self, shape)

    def transpose(self, axes):
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents, backward) -> Tensor:
    """Result tensor, recorded onto the graph when grads are live."""
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    return out


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce a broadcast gradient back to the original operand shape."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    return _make(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    return _make(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)),
    )


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    return _make(
        a.data * b.data,
        (a, b),
        lambda g: (
            _unbroadcast(g * b.data, a.shape),
            _unbroadcast(g * a.data, b.shape),
        ),
    )


def neg(a) -> Tensor:
    a = _as_tensor(a)
    return _make(-a.data, (a,), lambda g: (-g,))


def absolute(a) -> Tensor:
    a = _as_tensor(a)
    return _make(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),))


def relu(a) -> Tensor:
    a = _as_tensor(a)
    mask = a.data > 0.0
    return _make(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def sigmoid(a) -> Tensor:
    a = _as_tensor(a)
    s = expit(a.data)  # numerically stable for large |x|
    return _make(s, (a,), lambda g: (g * s * (1.0 - s),))


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)

    def back(g):
        if axis is not None and not keepdims:
            ax = (axis,) if isinstance(axis, int) else tuple(axis)
            g = np.expand_dims(g, ax)
        return (np.broadcast_to(g, a.shape),)

    return _make(a.data.sum(axis=axis, keepdims=keepdims), (a,), back)


def tmean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    out = a.data.mean(axis=axis, keepdims=keepdims)
    scale = out.size / a.data.size

    def back(g):
        if axis is not None and not keepdims:
            ax = (axis,) if isinstance(axis, int) else tuple(axis)
            g = np.expand_dims(g, ax)
        return (np.broadcast_to(g * scale, a.shape),)

    return _make(out, (a,), back)


def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    return _make(
        a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),)
    )


def transpose(a, axes) -> Tensor:
    a = _as_tensor(a)
    inv = tuple(np.argsort(axes))
    return _make(
        np.ascontiguousarray(a.data.transpose(axes)),
        (a,),
        lambda g: (g.transpose(inv),),
    )


def index_select(a, axis: int, indices) -> Tensor:
    """Gather along one axis; repeated indices accumulate in the gradient."""
    a = _as_tensor(a)
    idx = np.asarray(indices, dtype=np.intp)

    def back(g):
        out = np.zeros_like(a.data)
        sl = [slice(None)] * a.ndim
        sl[axis] = idx
        np.add.at(out, tuple(sl), g)
        return (out,)

    return _make(np.take(a.data, idx, axis=axis), (a,), back)


def _pad_amounts(kernel: int, stride: int, padding) -> tuple[int, int]:
    if padding == "same":
        total = kernel - 1
        return total // 2, total - total // 2
    if isinstance(padding, int):
        return padding, padding
    lo, hi = padding
    return int(lo), int(hi)


def _zpad1(x: np.ndarray, lo: int, hi: int) -> np.ndarray:
    """Zero-pad the last axis of (C, T); cheaper than np.pad for hot paths."""
    if not (lo or hi):
        return x
    c, t = x.shape
    out = np.zeros((c, t + lo + hi), dtype=x.dtype)
    out[:, lo : lo + t] = x
    return out


def _zpad2(x: np.ndarray, qlo: int, qhi: int, tlo: int, thi: int) -> np.ndarray:
    """Zero-pad the last two axes of (C, Q, T)."""
    if not (qlo or qhi or tlo or thi):
        return x
    c, q, t = x.shape
    out = np.zeros((c, q + qlo + qhi, t + tlo + thi), dtype=x.dtype)
    out[:, qlo : qlo + q, tlo : tlo + t] = x
    return out


def _corr1d(xp: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Valid stride-1 correlation of (C_in, T) with (C_out, C_in, K)."""
    c_out, c_in, k = w.shape
    t_out = xp.shape[1] - k + 1
    s0, s1 = xp.strides
    win = as_strided(xp, (c_in, k, t_out), (s0, s1, s1))
    return (w.reshape(c_out, -1) @ win.reshape(c_in * k, t_out)).reshape(c_out, t_out)


def _corr2d(xp: np.ndarray, w: np.ndarray) -> np.ndarray:
    """Valid stride-1 correlation of (C_in, Q, T) with (C_out, C_in, Kq, Kt)."""
    c_out, c_in, kq, kt = w.shape
    q_out = xp.shape[1] - kq + 1
    t_out = xp.shape[2] - kt + 1
    s0, s1, s2 = xp.strides
    win = as_strided(xp, (c_in, kq, kt, q_out, t_out), (s0, s1, s2, s1, s2))
    col = win.reshape(c_in * kq * kt, q_out * t_out)
    return (w.reshape(c_out, -1) @ col).reshape(c_out, q_out, t_out)


def conv1d(x, w, b=None, stride: int = 1, padding="same") -> Tensor:
    """Cross-correlation of (C_in, T) with (C_out, C_in, K) plus bias.

    T_out = floor((T + pad_lo + pad_hi - K) / stride) + 1.
    """
    x, w = _as_tensor(x), _as_tensor(w)
    bias = _as_tensor(b) if b is not None else None
    c_out, c_in, k = w.shape
    if x.ndim != 2 or x.shape[0] != c_in:
        raise ValueError(f"conv1d: input {x.shape} incompatible with weight {w.shape}")
    lo, hi = _pad_amounts(k, stride, padding)
    xp = _zpad1(x.data, lo, hi)
    t_out = (xp.shape[1] - k) // stride + 1
    if t_out < 1:
        raise ValueError("conv1d: input shorter than kernel")
    s0, s1 = xp.strides
    win = as_strided(xp, (c_in, k, t_out), (s0, s1, s1 * stride))
    col = win.reshape(c_in * k, t_out)  # im2col copy, reused by backward
    wdata = w.data  # captured now: params may be updated in place later
    out = (wdata.reshape(c_out, -1) @ col).reshape(c_out, t_out)
    if bias is not None:
        out = out + bias.data[:, None]

    def back(g):
        gw = (
            (g @ col.T).reshape(w.shape) if w.requires_grad else None
        )
        gb = g.sum(axis=1) if bias is not None and bias.requires_grad else None
        gx = None
        if x.requires_grad:
            if stride == 1:
                # full correlation with the flipped, channel-transposed kernel
                gp = _zpad1(g, k - 1, k - 1)
                wt = np.ascontiguousarray(wdata[:, :, ::-1].transpose(1, 0, 2))
                gx = _corr1d(gp, wt)[:, lo : lo + x.shape[1]]
            else:
                gcol = (wdata.reshape(c_out, -1).T @ g).reshape(c_in, k, t_out)
                gxp = np.zeros((c_in, xp.shape[1]), dtype=xp.dtype)
                for kk in range(k):
                    gxp[:, kk : kk + stride * t_out : stride] += gcol[:, kk]
                gx = gxp[:, lo : lo + x.shape[1]] if lo or hi else gxp
        return (gx, gw) if bias is None else (gx, gw, gb)

    parents = (x, w) if bias is None else (x, w, bias)
    return _make(out, parents, back)


def conv2d(x, w, b=None, stride=(1, 1), padding="same") -> Tensor:
    """Cross-correlation of (C_in, Q, T) with (C_out, C_in, Kq, Kt) plus bias."""
    x, w = _as_tensor(x), _as_tensor(w)
    bias = _as_tensor(b) if b is not None else None
    c_out, c_in, kq, kt = w.shape
    if x.ndim != 3 or x.shape[0] != c_in:
        raise ValueError(f"conv2d: input {x.shape} incompatible with weight {w.shape}")
    sq, st = (stride, stride) if isinstance(stride, int) else stride
    if padding == "same" or isinstance(padding, int):
        qlo, qhi = _pad_amounts(kq, sq, padding)
        tlo, thi = _pad_amounts(kt, st, padding)
    else:
        (qlo, qhi), (tlo, thi) = padding
    pad = qlo or qhi or tlo or thi
    xp = _zpad2(x.data, qlo, qhi, tlo, thi)
    q_out = (xp.shape[1] - kq) // sq + 1
    t_out = (xp.shape[2] - kt) // st + 1
    if q_out < 1 or t_out < 1:
        raise ValueError("conv2d: input smaller than kernel")
    s0, s1, s2 = xp.strides
    win = as_strided(
        xp, (c_in, kq, kt, q_out, t_out), (s0, s1, s2, s1 * sq, s2 * st)
    )
    col = win.reshape(c_in * kq * kt, q_out * t_out)  # im2col copy, reused by backward
    wdata = w.data  # captured now: params may be updated in place later
    out = (wdata.reshape(c_out, -1) @ col).reshape(c_out, q_out, t_out)
    if bias is not None:
        out = out + bias.data[:, None, None]

    def back(g):
        g2 = g.reshape(c_out, -1)
        gw = (g2 @ col.T).reshape(w.shape) if w.requires_grad else None
        gb = (
            g.sum(axis=(1, 2))
            if bias is not None and bias.requires_grad
            else None
        )
        gx = None
        if x.requires_grad:
            if sq == st == 1:
                gp = _zpad2(g, kq - 1, kq - 1, kt - 1, kt - 1)
                wt = np.ascontiguousarray(wdata[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
                gx = _corr2d(gp, wt)[
                    :, qlo : qlo + x.shape[1], tlo : tlo + x.shape[2]
                ]
            else:
                gcol = (wdata.reshape(c_out, -1).T @ g2).reshape(
                    c_in, kq, kt, q_out, t_out
                )
                gxp = np.zeros((c_in,) + xp.shape[1:], dtype=xp.dtype)
                for a in range(kq):
                    for c in range(kt):
                        gxp[
                            :, a : a + sq * q_out : sq, c : c + st * t_out : st
                        ] += gcol[:, a, c]
                gx = (
                    gxp[:, qlo : qlo + x.shape[1], tlo : tlo + x.shape[2]]
                    if pad
                    else gxp
                )
        return (gx, gw) if bias is None else (gx, gw, gb)

    parents = (x, w) if bias is None else (x, w, bias)
    return _make(out, parents, back)


def glu(x, axis: int = 0) -> Tensor:
    """Gated linear unit: split channels in half, out = a * sigmoid(b)."""
    x = _as_tensor(x)
    if x.shape[axis] % 2 != 0:
        raise ValueError(f"glu: channel dim {x.shape[axis]} is odd")
    a, gate = np.split(x.data, 2, axis=axis)
    s = expit(gate)
    out = a * s

    def back(g):
        ga = g * s
        gb = g * a * s * (1.0 - s)
        return (np.concatenate([ga, gb], axis=axis),)

    return _make(out, (x,), back)


def instance_norm(x, epsilon: float = 1e-6):
    """Per-channel standardization over all non-channel dims of one instance.

    Returns (normalized tensor, mu, sigma) where mu/sigma are plain (C,)
    arrays (not differentiated). Biased variance; epsilon inside the sqrt.
    """
    x = _as_tensor(x)
    axes = tuple(range(1, x.ndim))
    n = int(np.prod([x.shape[i] for i in axes])) if axes else 1
    if n < 2:
        raise ValueError("instance_norm: needs at least 2 elements per channel")
    mu = x.data.mean(axis=axes, keepdims=True)
    centered = x.data - mu
    var = (centered * centered).mean(axis=axes, keepdims=True)
    sigma = np.sqrt(var + epsilon)
    y = centered / sigma

    def back(g):
        gm = g.mean(axis=axes, keepdims=True)
        gym = (g * y).mean(axis=axes, keepdims=True)
        return ((g - gm - y * gym) / sigma,)

    return _make(y, (x,), back), mu.reshape(-1), sigma.reshape(-1)


def pixel_shuffle_2d(x, r: int = 2) -> Tensor:
    """Rearrange (C*r*r, Q, T) into (C, r*Q, r*T); exact and invertible."""
    x = _as_tensor(x)
    c2, q, t = x.shape
    if c2 % (r * r) != 0:
        raise ValueError(f"pixel_shuffle_2d: {c2} channels not divisible by {r * r}")
    c = c2 // (r * r)
    out = reshape(x, (c, r, r, q, t))
    out = transpose(out, (0, 3, 1, 4, 2))
    return reshape(out, (c, q * r, t * r))


def pixel_unshuffle_2d(x, r: int = 2) -> Tensor:
    """Inverse of pixel_shuffle_2d."""
    x = _as_tensor(x)
    c, qr, tr = x.shape
    if qr % r or tr % r:
        raise ValueError("pixel_unshuffle_2d: spatial dims not divisible by r")
    out = reshape(x, (c, qr // r, r, tr // r, r))
    out = transpose(out, (0, 2, 4, 1, 3))
    return reshape(out, (c * r * r, qr // r, tr // r))


def grad_check(fn, inputs, eps: float = 1e-5) -> float:
    """Max relative error between reverse-mode and central-difference grads.

    ``fn`` must map the given tensors to a scalar Tensor. Relative error per
    coordinate is |g_ad - g_fd| / max(1e-8, |g_ad| + |g_fd|).
    """
    inputs = list(inputs)
    for t in inputs:
        t.grad = None
    out = fn(*inputs)
    if out.data.size != 1:
        raise ValueError("grad_check: closure must return a scalar")
    if not np.isfinite(out.data):
        raise NumericError("grad_check: closure produced a non-finite value")
    out.backward()
    analytic = []
    for t in inputs:
        if t.grad is not None and not np.all(np.isfinite(t.grad)):
            raise NumericError("grad_check: non-finite analytic gradient")
        analytic.append(np.zeros_like(t.data) if t.grad is None else t.grad.copy())
    worst = 0.0
    for t, g_ad in zip(inputs, analytic):
        flat = t.data.reshape(-1)
        ga = g_ad.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            with no_grad():
                f_hi = float(fn(*inputs).data)
            flat[i] = orig - eps
            with no_grad():
                f_lo = float(fn(*inputs).data)
            flat[i] = orig
            if not (np.isfinite(f_hi) and np.isfinite(f_lo)):
                raise NumericError("grad_check: non-finite perturbed output")
            g_fd = (f_hi - f_lo) / (2.0 * eps)
            err = abs(ga[i] - g_fd) / max(1e-8, abs(ga[i]) + abs(g_fd))
            if err > worst:
                worst = err
    return worst
