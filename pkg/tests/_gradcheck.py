"""Finite-difference oracles shared by the test modules."""
import numpy as np

from latentspeech.tensor import Tensor, backward, jvp


def rel_err(a, b) -> float:
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-300)
    return float(np.linalg.norm(a - b) / denom)


def numeric_grad(scalar_fn, arrays, index, h=1e-5, positions=None):
    """Central differences of ``scalar_fn(*arrays)`` w.r.t. ``arrays[index]``.

    ``positions`` restricts the flat entries probed (others are left at 0).
    """
    base = [np.array(a, dtype=float) for a in arrays]
    x = base[index]
    g = np.zeros(x.size)
    flat = x.reshape(-1)
    for i in range(x.size) if positions is None else positions:
        old = flat[i]
        flat[i] = old + h
        fp = scalar_fn(*base)
        flat[i] = old - h
        fm = scalar_fn(*base)
        flat[i] = old
        g[i] = (fp - fm) / (2 * h)
    return g.reshape(x.shape)


def check_op(fn, arrays, rng, h=1e-5):
    """Return (max reverse-mode rel err vs FD, max forward-mode rel err vs <grad, v>)."""
    out0 = fn(*[Tensor(a) for a in arrays])
    proj = rng.standard_normal(out0.shape)

    def scalar(*arrs):
        return float((fn(*[Tensor(a) for a in arrs]).data * proj).sum())

    leaves = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    loss = (fn(*leaves) * Tensor(proj)).sum()
    grads = backward(loss, wrt=leaves)
    worst_rev = 0.0
    for i in range(len(arrays)):
        worst_rev = max(worst_rev, rel_err(grads[i], numeric_grad(scalar, arrays, i, h)))
    dirs = [rng.standard_normal(a.shape) for a in arrays]
    dual = jvp(lambda *xs: (fn(*xs) * Tensor(proj)).sum(), tuple(Tensor(a) for a in arrays), tuple(dirs))
    inner = sum(float((g * d).sum()) for g, d in zip(grads, dirs))
    fwd = abs(dual.tangent.item() - inner) / max(abs(inner), 1e-300)
    return worst_rev, fwd
