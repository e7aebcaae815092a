"""Differentiable ops. Each has a backward (vjp) and a forward-mode (jvp) rule."""
from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .core import ConfigurationError, ShapeError, Tensor, apply, as_tensor

# Every op name passed to ``apply``; tests check gradient and tangent rules for each.
REGISTERED_OPS = (
    "add", "sub", "mul", "div", "neg", "pow", "exp", "log", "sin", "cos", "sqrt", "abs",
    "tanh", "sigmoid", "silu", "leaky_relu", "sum", "mean", "reshape", "transpose",
    "getitem", "concat", "pad", "matmul", "softmax", "conv1d", "conv_transpose1d",
    "snake", "dropout", "rope", "stft",
)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    nd = g.ndim - len(shape)
    if nd > 0:
        g = g.sum(axis=tuple(range(nd)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _bt(t, shape):
    """Tangent broadcast to ``shape`` (None stays None)."""
    if t is None or t.shape == shape:
        return t
    return np.broadcast_to(t, shape)


# ----------------------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data + b.data

    def jvp(ta, tb):
        if ta is None:
            return np.array(_bt(tb, out.shape))
        if tb is None:
            return np.array(_bt(ta, out.shape))
        return np.asarray(ta + tb)

    return apply("add", out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), jvp)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data - b.data

    def jvp(ta, tb):
        if tb is None:
            return np.array(_bt(ta, out.shape))
        if ta is None:
            return -np.array(_bt(tb, out.shape))
        return np.asarray(ta - tb)

    return apply("sub", out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)), jvp)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data * b.data

    def vjp(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    def jvp(ta, tb):
        r = 0.0
        if ta is not None:
            r = ta * b.data
        if tb is not None:
            r = r + a.data * tb
        return np.array(_bt(np.asarray(r), out.shape))

    return apply("mul", out, (a, b), vjp, jvp)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data

    def vjp(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None
        return ga, gb

    def jvp(ta, tb):
        r = 0.0
        if ta is not None:
            r = ta / b.data
        if tb is not None:
            r = r - out * tb / b.data
        return np.array(_bt(np.asarray(r), out.shape))

    return apply("div", out, (a, b), vjp, jvp)


def neg(a) -> Tensor:
    a = as_tensor(a)
    return apply("neg", -a.data, (a,), lambda g: (-g,), lambda t: -t)


def pow(a, p: float) -> Tensor:
    a = as_tensor(a)
    p = float(p)
    out = a.data ** p
    deriv = lambda: p * a.data ** (p - 1.0)
    return apply("pow", out, (a,), lambda g: (g * deriv(),), lambda t: t * deriv())


def _unary(name, a, fwd, deriv_from):
    a = as_tensor(a)
    out = fwd(a.data)
    return apply(name, out, (a,), lambda g: (g * deriv_from(a.data, out),), lambda t: t * deriv_from(a.data, out))


def exp(a) -> Tensor:
    return _unary("exp", a, np.exp, lambda x, y: y)


def log(a) -> Tensor:
    return _unary("log", a, np.log, lambda x, y: 1.0 / x)


def sin(a) -> Tensor:
    return _unary("sin", a, np.sin, lambda x, y: np.cos(x))


def cos(a) -> Tensor:
    return _unary("cos", a, np.cos, lambda x, y: -np.sin(x))


def sqrt(a) -> Tensor:
    return _unary("sqrt", a, np.sqrt, lambda x, y: 0.5 / y)


def abs(a) -> Tensor:
    return _unary("abs", a, np.abs, lambda x, y: np.sign(x))


def tanh(a) -> Tensor:
    return _unary("tanh", a, np.tanh, lambda x, y: 1.0 - y * y)


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def sigmoid(a) -> Tensor:
    return _unary("sigmoid", a, _sigmoid, lambda x, y: y * (1.0 - y))


def silu(a) -> Tensor:
    a = as_tensor(a)
    s = _sigmoid(a.data)
    out = a.data * s
    d = s * (1.0 + a.data * (1.0 - s))
    return apply("silu", out, (a,), lambda g: (g * d,), lambda t: t * d)


def leaky_relu(a, slope: float = 0.2) -> Tensor:
    a = as_tensor(a)
    d = np.where(a.data > 0, 1.0, slope)
    return apply("leaky_relu", a.data * d, (a,), lambda g: (g * d,), lambda t: t * d)


def square(a) -> Tensor:
    return mul(a, a)


# ----------------------------------------------------------------------------- reductions


def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def sum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    out = np.asarray(a.data.sum(axis=axes, keepdims=keepdims))

    def expand(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return np.broadcast_to(g, a.shape)

    return apply("sum", out, (a,), lambda g: (np.array(expand(g)),), lambda t: np.asarray(t.sum(axis=axes, keepdims=keepdims)))


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    n = int(np.prod([a.shape[i] for i in axes])) if axes else 1
    out = np.asarray(a.data.mean(axis=axes, keepdims=keepdims))

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / n, a.shape).copy(),)

    return apply("mean", out, (a,), vjp, lambda t: np.asarray(t.mean(axis=axes, keepdims=keepdims)))


# ----------------------------------------------------------------------------- shape


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    out = a.data.reshape(shape)
    return apply("reshape", out, (a,), lambda g: (g.reshape(a.shape),), lambda t: t.reshape(out.shape))


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    axes = tuple(reversed(range(a.ndim))) if axes is None else tuple(axes)
    inv = tuple(np.argsort(axes))
    out = a.data.transpose(axes)
    return apply("transpose", out, (a,), lambda g: (g.transpose(inv),), lambda t: t.transpose(axes))


def _is_advanced(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return any(isinstance(i, (list, np.ndarray)) for i in items)


def getitem(a, idx) -> Tensor:
    a = as_tensor(a)
    if isinstance(idx, Tensor):
        raise TypeError("index with an int array, not a Tensor")
    out = np.array(a.data[idx])
    advanced = _is_advanced(idx)

    def vjp(g):
        full = np.zeros_like(a.data)
        if advanced:
            np.add.at(full, idx, g)
        else:
            full[idx] = g
        return (full,)

    return apply("getitem", out, (a,), vjp, lambda t: np.array(t[idx]))


def concat(tensors, axis: int = -1) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in ts], axis=axis)
    ax = axis % out.ndim
    bounds = np.cumsum([t.shape[ax] for t in ts])[:-1]

    def vjp(g):
        return tuple(np.split(g, bounds, axis=ax))

    def jvp(*tans):
        return np.concatenate([np.zeros_like(t.data) if tt is None else tt for t, tt in zip(ts, tans)], axis=ax)

    return apply("concat", out, ts, vjp, jvp)


def pad(a, left: int, right: int, axis: int = -1) -> Tensor:
    """Zero padding along one axis."""
    a = as_tensor(a)
    ax = axis % a.ndim
    widths = [(0, 0)] * a.ndim
    widths[ax] = (left, right)
    out = np.pad(a.data, widths)
    sl = [slice(None)] * a.ndim
    sl[ax] = slice(left, left + a.shape[ax])
    sl = tuple(sl)
    return apply("pad", out, (a,), lambda g: (np.array(g[sl]),), lambda t: np.pad(t, widths))


# ----------------------------------------------------------------------------- linear algebra


def _swap(x):
    return np.swapaxes(x, -1, -2)


def _flat_mm(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    return (x.reshape(-1, x.shape[-1]) @ w).reshape(x.shape[:-1] + (w.shape[-1],))


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError("matmul needs operands with ndim >= 2")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul shape mismatch {a.shape} @ {b.shape}")
    # activations [..., k] times a 2-D weight: fold leading axes into one GEMM
    flat = b.ndim == 2 and a.ndim > 2
    out = _flat_mm(a.data, b.data) if flat else a.data @ b.data

    def vjp(g):
        if flat:
            ga = _flat_mm(g, b.data.T) if a.requires_grad else None
            gb = a.data.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1]) if b.requires_grad else None
            return ga, gb
        ga = _unbroadcast(g @ _swap(b.data), a.shape) if a.requires_grad else None
        gb = _unbroadcast(_swap(a.data) @ g, b.shape) if b.requires_grad else None
        return ga, gb

    def jvp(ta, tb):
        r = None
        if ta is not None:
            r = _flat_mm(ta, b.data) if flat and ta.ndim > 2 else ta @ b.data
        if tb is not None:
            rb = _flat_mm(a.data, tb) if flat and tb.ndim == 2 else a.data @ tb
            r = rb if r is None else r + rb
        return np.array(_bt(r, out.shape))

    return apply("matmul", out, (a, b), vjp, jvp)


def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def rule(g):
        return y * (g - (g * y).sum(axis=axis, keepdims=True))

    return apply("softmax", y, (a,), lambda g: (rule(g),), rule)


# ----------------------------------------------------------------------------- convolution


def conv_output_length(length: int, kernel: int, stride: int, padding: int) -> int:
    return (length + 2 * padding - kernel) // stride + 1


def _im2col(xp: np.ndarray, k: int, stride: int, lout: int) -> np.ndarray:
    b, c, _ = xp.shape
    win = sliding_window_view(xp, k, axis=2)[:, :, : stride * (lout - 1) + 1 : stride]
    return win.transpose(0, 2, 1, 3).reshape(b * lout, c * k)


def _col2im(gcols: np.ndarray, b: int, c: int, k: int, stride: int, lout: int, lp: int) -> np.ndarray:
    gc = gcols.reshape(b, lout, c, k)
    gxp = np.zeros((b, c, lp))
    span = stride * (lout - 1) + 1
    for j in range(k):
        gxp[:, :, j : j + span : stride] += gc[:, :, :, j].transpose(0, 2, 1)
    return gxp


def conv1d(x, w, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of ``x`` [B, C_in, L] with ``w`` [C_out, C_in, K]."""
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 3 or w.ndim != 3:
        raise ShapeError("conv1d expects input [B,C,L] and kernel [C_out,C_in,K]")
    if stride < 1 or padding < 0:
        raise ConfigurationError("stride must be >= 1 and padding >= 0")
    b, c, length = x.shape
    cout, cin, k = w.shape
    if cin != c:
        raise ShapeError(f"conv1d channel mismatch: input has {c}, kernel expects {cin}")
    if k > length + 2 * padding:
        raise ShapeError("kernel longer than padded input")
    lout = conv_output_length(length, k, stride, padding)
    lp = length + 2 * padding
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding))) if padding else x.data
    cols = _im2col(xp, k, stride, lout)
    wm = w.data.reshape(cout, c * k)

    def finish(m):
        return np.ascontiguousarray(m.reshape(b, lout, cout).transpose(0, 2, 1))

    out = finish(cols @ wm.T)

    def vjp(g):
        gm = g.transpose(0, 2, 1).reshape(b * lout, cout)
        gw = (gm.T @ cols).reshape(w.shape) if w.requires_grad else None
        gx = None
        if x.requires_grad:
            gxp = _col2im(gm @ wm, b, c, k, stride, lout, lp)
            gx = gxp[:, :, padding : padding + length] if padding else gxp
        return gx, gw

    def jvp(tx, tw):
        r = 0.0
        if tx is not None:
            txp = np.pad(tx, ((0, 0), (0, 0), (padding, padding))) if padding else tx
            r = _im2col(txp, k, stride, lout) @ wm.T
        if tw is not None:
            r = r + cols @ tw.reshape(cout, c * k).T
        return finish(r)

    return apply("conv1d", out, (x, w), vjp, jvp)


def conv_transpose1d(x, w, stride: int = 1) -> Tensor:
    """Transposed convolution of ``x`` [B, C_in, L] with ``w`` [C_in, C_out, K].

    Output length is ``(L - 1) * stride + K``; callers crop as needed.
    """
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 3 or w.ndim != 3:
        raise ShapeError("conv_transpose1d expects input [B,C,L] and kernel [C_in,C_out,K]")
    b, cin, length = x.shape
    if w.shape[0] != cin:
        raise ShapeError(f"conv_transpose1d channel mismatch: input has {cin}, kernel expects {w.shape[0]}")
    _, cout, k = w.shape
    lfull = (length - 1) * stride + k
    xm = x.data.transpose(0, 2, 1).reshape(b * length, cin)
    wm = w.data.reshape(cin, cout * k)

    def scatter(cols):
        return _col2im(cols, b, cout, k, stride, length, lfull)

    out = scatter(xm @ wm)

    def gather(g):
        return _im2col(g, k, stride, length)

    def vjp(g):
        gcols = gather(g)
        gx = (gcols @ wm.T).reshape(b, length, cin).transpose(0, 2, 1) if x.requires_grad else None
        gw = (xm.T @ gcols).reshape(w.shape) if w.requires_grad else None
        return gx, gw

    def jvp(tx, tw):
        r = 0.0
        if tx is not None:
            r = tx.transpose(0, 2, 1).reshape(b * length, cin) @ wm
        if tw is not None:
            r = r + xm @ tw.reshape(cin, cout * k)
        return scatter(r)

    return apply("conv_transpose1d", out, (x, w), vjp, jvp)


# ----------------------------------------------------------------------------- activations / layers


def snake(x, alpha) -> Tensor:
    """``x + sin^2(alpha x) / alpha`` with per-channel ``alpha`` on axis 1."""
    x, alpha = as_tensor(x), as_tensor(alpha)
    if np.any(alpha.data <= 0):
        raise ConfigurationError("snake alpha must be positive")
    shape = [1] * x.ndim
    shape[1] = x.shape[1]
    a = alpha.data.reshape(shape)
    ax = a * x.data
    s = np.sin(ax)
    s2 = s * s
    sin2 = np.sin(2.0 * ax)
    out = x.data + s2 / a
    dx = 1.0 + sin2

    def dalpha():
        return x.data * sin2 / a - s2 / (a * a)

    def vjp(g):
        gx = g * dx if x.requires_grad else None
        ga = None
        if alpha.requires_grad:
            red = tuple(i for i in range(x.ndim) if i != 1)
            ga = (g * dalpha()).sum(axis=red).reshape(alpha.shape)
        return gx, ga

    def jvp(tx, ta):
        r = 0.0 if tx is None else tx * dx
        if ta is not None:
            r = r + ta.reshape(shape) * dalpha()
        return np.array(_bt(np.asarray(r), out.shape))

    return apply("snake", out, (x, alpha), vjp, jvp)


def dropout(x, p: float, rng: np.random.Generator | None, training: bool = True) -> Tensor:
    x = as_tensor(x)
    if not training or p <= 0.0:
        return x
    if rng is None:
        raise ConfigurationError("dropout in training mode needs an rng")
    mask = (rng.random(x.shape) >= p) / (1.0 - p)
    return apply("dropout", x.data * mask, (x,), lambda g: (g * mask,), lambda t: t * mask)


def rope_tables(length: int, dim: int, base: float = 10000.0) -> tuple[np.ndarray, np.ndarray]:
    if dim % 2:
        raise ShapeError("rotary embedding needs an even head dimension")
    inv = base ** (-np.arange(0, dim, 2) / dim)
    ang = np.arange(length)[:, None] * inv[None, :]
    return np.cos(ang), np.sin(ang)


def rope(x, cos_t: np.ndarray, sin_t: np.ndarray) -> Tensor:
    """Rotate interleaved pairs of the last axis of ``x`` [..., L, d] by per-position angles."""
    x = as_tensor(x)
    if x.shape[-1] % 2:
        raise ShapeError("rotary embedding needs an even head dimension")

    def rot(v, sign):
        v0, v1 = v[..., 0::2], v[..., 1::2]
        r = np.empty_like(v)
        r[..., 0::2] = v0 * cos_t - sign * v1 * sin_t
        r[..., 1::2] = sign * v0 * sin_t + v1 * cos_t
        return r

    return apply("rope", rot(x.data, 1.0), (x,), lambda g: (rot(g, -1.0),), lambda t: rot(t, 1.0))


def stft(x, frame_size: int, hop: int, window: np.ndarray) -> Tensor:
    """Framed real DFT of ``x`` [B, T] -> [B, frames, frame_size // 2 + 1, 2] (real, imag)."""
    x = as_tensor(x)
    b, length = x.shape
    n = frame_size
    if length < n:
        raise ShapeError(f"signal of length {length} shorter than one frame ({n})")
    nf = 1 + (length - n) // hop
    frames = sliding_window_view(x.data, n, axis=1)[:, : hop * (nf - 1) + 1 : hop] * window
    spec = np.fft.rfft(frames, axis=-1)
    out = np.stack([spec.real, spec.imag], axis=-1)
    nbins = n // 2 + 1
    interior = slice(1, nbins - 1) if n % 2 == 0 else slice(1, nbins)

    def vjp(g):
        G = g[..., 0] + 1j * g[..., 1]
        G[..., interior] *= 0.5
        gf = n * np.fft.irfft(G, n=n, axis=-1) * window
        gx = np.zeros((b, length))
        if n % hop == 0:
            r = n // hop
            blocks = np.zeros((b, nf + r - 1, hop))
            gfb = gf.reshape(b, nf, r, hop)
            for j in range(r):
                blocks[:, j : j + nf] += gfb[:, :, j]
            used = (nf + r - 1) * hop
            gx[:, :used] = blocks.reshape(b, used)
        else:
            idx = np.arange(nf)[:, None] * hop + np.arange(n)[None, :]
            for bi in range(b):
                np.add.at(gx[bi], idx, gf[bi])
        return (gx,)

    def jvp(t):
        tf = sliding_window_view(t, n, axis=1)[:, : hop * (nf - 1) + 1 : hop] * window
        ts = np.fft.rfft(tf, axis=-1)
        return np.stack([ts.real, ts.imag], axis=-1)

    return apply("stft", out, (x,), vjp, jvp)


# ----------------------------------------------------------------------------- composites


def rms_norm(x, weight=None, eps: float = 1e-6) -> Tensor:
    x = as_tensor(x)
    inv = pow(add(mean(mul(x, x), axis=-1, keepdims=True), eps), -0.5)
    y = mul(x, inv)
    return y if weight is None else mul(y, weight)


def linear(x, w, b=None) -> Tensor:
    """``x @ w + b`` with ``w`` stored as [in, out]."""
    y = matmul(x, w)
    return y if b is None else add(y, b)


def multi_head_attention(q, k, v, heads: int, rope_qk: tuple | None = None) -> Tensor:
    """Scaled dot-product attention over ``heads`` heads.

    ``q`` is [B, L, D]; ``k`` and ``v`` are [B, M, D]. When ``rope_qk`` is given
    as (cos, sin) tables, queries and keys are rotated per position first.
    """
    q, k, v = as_tensor(q), as_tensor(k), as_tensor(v)
    b, lq, d = q.shape
    m = k.shape[1]
    if d % heads:
        raise ConfigurationError(f"model dim {d} not divisible by {heads} heads")
    if k.shape != (b, m, d) or v.shape != (b, m, d):
        raise ShapeError("key/value shapes must be [B, M, D] matching the query batch and width")
    hd = d // heads

    def split(t, length):
        return transpose(reshape(t, (b, length, heads, hd)), (0, 2, 1, 3))

    qh, kh, vh = split(q, lq), split(k, m), split(v, m)
    if rope_qk is not None:
        cos_t, sin_t = rope_qk
        qh = rope(qh, cos_t[:lq], sin_t[:lq])
        kh = rope(kh, cos_t[:m], sin_t[:m])
    scores = mul(matmul(qh, transpose(kh, (0, 1, 3, 2))), 1.0 / np.sqrt(hd))
    attn = softmax(scores, axis=-1)
    out = matmul(attn, vh)
    return reshape(transpose(out, (0, 2, 1, 3)), (b, lq, d))


# ----------------------------------------------------------------------------- Tensor operators


def _install_operators():
    T = Tensor
    T.__add__ = lambda s, o: add(s, o)
    T.__radd__ = lambda s, o: add(o, s)
    T.__sub__ = lambda s, o: sub(s, o)
    T.__rsub__ = lambda s, o: sub(o, s)
    T.__mul__ = lambda s, o: mul(s, o)
    T.__rmul__ = lambda s, o: mul(o, s)
    T.__truediv__ = lambda s, o: div(s, o)
    T.__rtruediv__ = lambda s, o: div(o, s)
    T.__neg__ = lambda s: neg(s)
    T.__pow__ = lambda s, p: pow(s, p)
    T.__matmul__ = lambda s, o: matmul(s, o)
    T.__getitem__ = lambda s, idx: getitem(s, idx)
    T.sum = lambda s, axis=None, keepdims=False: sum(s, axis, keepdims)
    T.mean = lambda s, axis=None, keepdims=False: mean(s, axis, keepdims)
    T.reshape = lambda s, *shape: reshape(s, shape[0] if len(shape) == 1 and isinstance(shape[0], tuple) else shape)
    T.transpose = lambda s, *axes: transpose(s, axes[0] if len(axes) == 1 and isinstance(axes[0], tuple) else (axes or None))
    T.exp = lambda s: exp(s)
    T.log = lambda s: log(s)


_install_operators()
