"""Small module system: parameter containers and the layers the models use."""
from __future__ import annotations

from contextlib import contextmanager

import numpy as np

from . import ops
from .core import Tensor


class Module:
    training: bool = True

    def named_parameters(self, prefix: str = "") -> list[tuple[str, Tensor]]:
        out = []
        for key, val in self.__dict__.items():
            name = f"{prefix}{key}"
            if isinstance(val, Tensor):
                if key in self.__dict__.get("_param_names", ()):
                    out.append((name, val))
            elif isinstance(val, Module):
                out.extend(val.named_parameters(name + "."))
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        out.extend(item.named_parameters(f"{name}.{i}."))
            elif isinstance(val, dict):
                for k in val:
                    if isinstance(val[k], Module):
                        out.extend(val[k].named_parameters(f"{name}.{k}."))
        return out

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def param(self, name: str, value: np.ndarray) -> Tensor:
        t = Tensor(np.asarray(value, dtype=np.float64), requires_grad=True, name=name)
        self.__dict__.setdefault("_param_names", set()).add(name)
        setattr(self, name, t)
        return t

    def modules(self):
        yield self
        for val in self.__dict__.values():
            if isinstance(val, Module):
                yield from val.modules()
            elif isinstance(val, (list, tuple)):
                for item in val:
                    if isinstance(item, Module):
                        yield from item.modules()
            elif isinstance(val, dict):
                for item in val.values():
                    if isinstance(item, Module):
                        yield from item.modules()

    def train(self, mode: bool = True):
        for m in self.modules():
            m.training = mode
        return self

    def eval(self):
        return self.train(False)

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = dict(self.named_parameters())
        missing = set(params) - set(state)
        if missing:
            raise KeyError(f"missing parameters: {sorted(missing)[:5]}")
        for name, p in params.items():
            arr = np.asarray(state[name], dtype=np.float64)
            if arr.shape != p.shape:
                raise ValueError(f"shape mismatch for {name}: {arr.shape} vs {p.shape}")
            p.data = arr.copy()

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.parameters()))


@contextmanager
def frozen(*modules: Module):
    """Temporarily stop gradients into the given modules' parameters."""
    params = [p for m in modules for p in m.parameters()]
    flags = [p.requires_grad for p in params]
    for p in params:
        p.requires_grad = False
    try:
        yield
    finally:
        for p, f in zip(params, flags):
            p.requires_grad = f


def _uniform(rng, shape, bound):
    return rng.uniform(-bound, bound, size=shape)


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, bias: bool = True, scale: float = 1.0):
        bound = scale / np.sqrt(d_in)
        self.param("w", _uniform(rng, (d_in, d_out), bound))
        self.has_bias = bias
        if bias:
            self.param("b", _uniform(rng, (d_out,), bound))

    def __call__(self, x):
        return ops.linear(x, self.w, self.b if self.has_bias else None)


class Conv1d(Module):
    def __init__(self, c_in: int, c_out: int, kernel: int, rng: np.random.Generator, stride: int = 1, padding: int = 0):
        bound = 1.0 / np.sqrt(c_in * kernel)
        self.stride, self.padding = stride, padding
        self.param("w", _uniform(rng, (c_out, c_in, kernel), bound))
        self.param("b", _uniform(rng, (c_out, 1), bound))

    def __call__(self, x):
        return ops.add(ops.conv1d(x, self.w, self.stride, self.padding), self.b)


class ConvTranspose1d(Module):
    """Upsampling by ``stride`` with kernel ``2 * stride``; output length is exactly ``L * stride``."""

    def __init__(self, c_in: int, c_out: int, stride: int, rng: np.random.Generator):
        k = 2 * stride
        bound = 1.0 / np.sqrt(c_in * k / stride)
        self.stride, self.kernel = stride, k
        self.param("w", _uniform(rng, (c_in, c_out, k), bound))
        self.param("b", _uniform(rng, (c_out, 1), bound))

    def __call__(self, x):
        y = ops.conv_transpose1d(x, self.w, self.stride)
        left = self.stride // 2
        y = ops.getitem(y, (slice(None), slice(None), slice(left, left + x.shape[2] * self.stride)))
        return ops.add(y, self.b)


class Snake(Module):
    def __init__(self, channels: int):
        self.param("alpha", np.ones(channels))

    def __call__(self, x):
        return ops.snake(x, self.alpha)


class RMSNorm(Module):
    def __init__(self, dim: int, eps: float = 1e-6):
        self.eps = eps
        self.param("weight", np.ones(dim))

    def __call__(self, x):
        return ops.rms_norm(x, self.weight, self.eps)


class Embedding(Module):
    def __init__(self, n: int, dim: int, rng: np.random.Generator, scale: float = 1.0):
        self.param("table", rng.normal(0.0, scale, size=(n, dim)))

    def __call__(self, idx):
        return ops.getitem(self.table, np.asarray(idx, dtype=np.int64))
