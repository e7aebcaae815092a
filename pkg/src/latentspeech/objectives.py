"""Training objectives over a shared prediction field.

A *field* is any callable ``f(z, t, r)`` mapping latents ``z`` [B, F, D], a
batch of times ``t`` [B] (a Tensor, so tangents can be seeded on it) and an
optional second time ``r`` to a prediction of the same shape as ``z``.
"""
from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import Callable

import numpy as np

from .tensor import Tensor, as_tensor, jvp, ops, stop_gradient
from .tensor.core import ConfigurationError, ShapeError

Field = Callable[..., Tensor]


class ObjectiveError(ValueError):
    pass


class ObjectiveKind(str, Enum):
    DDPM_EPS = "DDPM_eps"
    DDPM_V = "DDPM_v"
    FM = "FM"
    MF = "MF"

    @property
    def is_ddpm(self) -> bool:
        return self in (ObjectiveKind.DDPM_EPS, ObjectiveKind.DDPM_V)

    @classmethod
    def parse(cls, name) -> "ObjectiveKind":
        if isinstance(name, cls):
            return name
        aliases = {"ddpm": "DDPM_eps", "ddpm_eps": "DDPM_eps", "ddpm_v": "DDPM_v", "fm": "FM", "mf": "MF"}
        try:
            return cls(aliases.get(str(name).lower(), name))
        except ValueError:
            raise ObjectiveError(f"unknown objective {name!r}") from None


# ----------------------------------------------------------------------------- DDPM


@dataclass
class NoiseSchedule:
    T: int = 200
    # None: the 1000-step linear range 1e-4..0.02 scaled by 1000 / T, so the chain still ends near pure noise
    beta_start: float | None = None
    beta_end: float | None = None

    def __post_init__(self):
        if self.beta_start is None:
            self.beta_start = 1e-4 * 1000 / self.T
        if self.beta_end is None:
            self.beta_end = 0.02 * 1000 / self.T
        if self.T < 1 or not 0 < self.beta_start < self.beta_end < 1:
            raise ConfigurationError("need T >= 1 and 0 < beta_start < beta_end < 1")
        self.beta = np.linspace(self.beta_start, self.beta_end, self.T)
        self.alpha_bar = np.cumprod(1.0 - self.beta)

    def timesteps(self, steps: int) -> np.ndarray:
        """Evenly spread subset of step indices used by a shortened chain (ascending)."""
        if not 1 <= steps <= self.T:
            raise ObjectiveError(f"steps must be in [1, {self.T}], got {steps}")
        if steps == 1:
            return np.array([self.T - 1])
        return np.unique(np.round(np.linspace(0, self.T - 1, steps)).astype(np.int64))

    def time_feature(self, t_idx) -> np.ndarray:
        return np.asarray(t_idx, dtype=np.float64) / self.T

    def meta(self) -> dict:
        return {"T": self.T, "beta_start": self.beta_start, "beta_end": self.beta_end}


def _per_example(x: np.ndarray, ndim: int) -> np.ndarray:
    return x.reshape((-1,) + (1,) * (ndim - 1))


def ddpm_forward(z0, t_idx, eps, schedule: NoiseSchedule) -> Tensor:
    z0 = as_tensor(z0)
    eps = np.asarray(eps.data if isinstance(eps, Tensor) else eps, dtype=np.float64)
    if eps.shape != z0.shape:
        raise ShapeError(f"noise shape {eps.shape} != latent shape {z0.shape}")
    t_idx = np.asarray(t_idx, dtype=np.int64)
    if np.any(t_idx < 0) or np.any(t_idx >= schedule.T):
        raise ObjectiveError(f"step index out of range [0, {schedule.T})")
    ab = schedule.alpha_bar[t_idx]
    if ab.ndim:
        ab = _per_example(ab, z0.ndim)
    return ops.add(ops.mul(z0, np.sqrt(ab)), np.sqrt(1.0 - ab) * eps)


def v_target(z0, eps, t_idx, schedule: NoiseSchedule) -> np.ndarray:
    z0 = np.asarray(z0.data if isinstance(z0, Tensor) else z0)
    ab = _per_example(schedule.alpha_bar[np.asarray(t_idx)], z0.ndim)
    return np.sqrt(ab) * eps - np.sqrt(1.0 - ab) * z0


def ddpm_loss_at(field: Field, z0, t_idx, eps, schedule: NoiseSchedule, kind=ObjectiveKind.DDPM_EPS) -> Tensor:
    kind = ObjectiveKind.parse(kind)
    t_idx = np.asarray(t_idx, dtype=np.int64).reshape(-1)
    z_t = ddpm_forward(z0, t_idx, eps, schedule)
    pred = field(z_t, Tensor(schedule.time_feature(t_idx)), None)
    target = eps if kind is ObjectiveKind.DDPM_EPS else v_target(z0, eps, t_idx, schedule)
    d = ops.sub(pred, target)
    return ops.mean(ops.mul(d, d))


def ddpm_loss(field: Field, z0, rng: np.random.Generator, schedule: NoiseSchedule,
              kind=ObjectiveKind.DDPM_EPS) -> Tensor:
    z0 = as_tensor(z0)
    t_idx = rng.integers(0, schedule.T, size=z0.shape[0])
    eps = rng.standard_normal(z0.shape)
    return ddpm_loss_at(field, z0, t_idx, eps, schedule, kind)


# ----------------------------------------------------------------------------- interpolants


@dataclass(frozen=True)
class Interpolant:
    """``z_t = a(t) z_data + b(t) eps`` with linear coefficients ``a = a0 + a1 t``, ``b = b0 + b1 t``."""

    name: str
    a0: float
    a1: float
    b0: float
    b1: float

    def a(self, t):
        return self.a0 + self.a1 * np.asarray(t, dtype=np.float64)

    def b(self, t):
        return self.b0 + self.b1 * np.asarray(t, dtype=np.float64)

    @property
    def noise_time(self) -> float:
        return 0.0 if self.b0 == 1.0 else 1.0

    def mix(self, z_data, eps, t) -> Tensor:
        z_data = as_tensor(z_data)
        t = np.asarray(t, dtype=np.float64)
        a, b = _per_example(self.a(t), z_data.ndim), _per_example(self.b(t), z_data.ndim)
        return ops.add(ops.mul(z_data, a), b * np.asarray(eps))

    def velocity(self, z_data, eps) -> np.ndarray:
        """Conditional velocity ``a'(t) z_data + b'(t) eps`` (constant in t for linear coefficients)."""
        z_data = np.asarray(z_data.data if isinstance(z_data, Tensor) else z_data)
        return self.a1 * z_data + self.b1 * np.asarray(eps)


# noise at t=0, data at t=1; used by FM
LINEAR = Interpolant("linear", 0.0, 1.0, 1.0, -1.0)
# noise at t=1, data at t=0; used by MF so that one step from the noise end needs u at the known point
LINEAR_REVERSED = Interpolant("linear_reversed", 1.0, -1.0, 0.0, 1.0)


# ----------------------------------------------------------------------------- flow matching


def fm_interpolate(z_data, eps, t) -> tuple[Tensor, np.ndarray]:
    """Linear interpolant and the regression target ``(z_data - z_t) / (1 - t)``."""
    z_data = as_tensor(z_data)
    t = np.asarray(t, dtype=np.float64)
    if np.any(t >= 1.0) or np.any(t < 0.0):
        raise ObjectiveError("flow-matching time must lie in [0, 1)")
    z_t = LINEAR.mix(z_data, eps, t)
    lam = _per_example(1.0 - t.reshape(-1), z_data.ndim) if t.ndim else 1.0 - t
    return z_t, (z_data.data - z_t.data) / lam


def fm_loss_at(field: Field, z_data, eps, t, interp: Interpolant = LINEAR) -> Tensor:
    t = np.asarray(t, dtype=np.float64).reshape(-1)
    if interp is LINEAR:
        z_t, target = fm_interpolate(z_data, eps, t)
    else:
        z_t, target = interp.mix(z_data, eps, t), interp.velocity(z_data, eps)
    d = ops.sub(field(z_t, Tensor(t), None), target)
    return ops.mean(ops.mul(d, d))


def fm_loss(field: Field, z_data, rng: np.random.Generator, delta: float = 1e-3) -> Tensor:
    z_data = as_tensor(z_data)
    t = rng.uniform(0.0, 1.0 - delta, size=z_data.shape[0])
    eps = rng.standard_normal(z_data.shape)
    return fm_loss_at(field, z_data, eps, t)


# ----------------------------------------------------------------------------- mean flow


def _check_rt(r, t):
    r, t = np.asarray(r, dtype=np.float64).reshape(-1), np.asarray(t, dtype=np.float64).reshape(-1)
    if np.any(r > t):
        raise ObjectiveError("mean-flow interval needs r <= t")
    if np.any(r < 0) or np.any(t > 1):
        raise ObjectiveError("mean-flow times must lie in [0, 1]")
    return r, t


def _mf_pass(field: Field, z_t, r, t, v) -> tuple[Tensor, Tensor]:
    """One forward pass giving u(z_t, r, t) (with its graph) and the detached target."""
    r, t = _check_rt(r, t)
    z_t = as_tensor(z_t)
    v = np.asarray(v.data if isinstance(v, Tensor) else v, dtype=np.float64)
    dual = jvp(lambda z, tt: field(z, tt, Tensor(r)), (z_t, Tensor(t)), (v, np.ones_like(t)))
    gap = _per_example(t - r, z_t.ndim)
    u_tgt = stop_gradient(Tensor(v - gap * dual.tangent.data))
    return dual.primal, u_tgt


def mf_target(field: Field, z_t, r, t, v) -> Tensor:
    """``v - (t - r) (v . d/dz u + d/dt u)``, detached."""
    return _mf_pass(field, z_t, r, t, v)[1]


def sample_mf_times(rng: np.random.Generator, n: int, p_eq: float = 0.25) -> tuple[np.ndarray, np.ndarray]:
    pair = np.sort(rng.uniform(0.0, 1.0, size=(n, 2)), axis=1)
    r, t = pair[:, 0], pair[:, 1]
    same = rng.uniform(size=n) < p_eq
    r = np.where(same, t, r)
    return r, t


def mf_loss_at(field: Field, z_data, eps, r, t, interp: Interpolant = LINEAR_REVERSED) -> Tensor:
    z_data = as_tensor(z_data)
    z_t = interp.mix(z_data, eps, t)
    v = interp.velocity(z_data, eps)
    u, u_tgt = _mf_pass(field, stop_gradient(z_t), r, t, v)
    d = ops.sub(u, u_tgt)
    return ops.mean(ops.mul(d, d))


def mf_loss(field: Field, z_data, rng: np.random.Generator, p_eq: float = 0.25,
            interp: Interpolant = LINEAR_REVERSED) -> Tensor:
    z_data = as_tensor(z_data)
    r, t = sample_mf_times(rng, z_data.shape[0], p_eq)
    eps = rng.standard_normal(z_data.shape)
    return mf_loss_at(field, z_data, eps, r, t, interp)


def objective_loss(kind, field: Field, z_data, rng: np.random.Generator, schedule: NoiseSchedule | None = None,
                   p_eq: float = 0.25) -> Tensor:
    kind = ObjectiveKind.parse(kind)
    if kind.is_ddpm:
        return ddpm_loss(field, z_data, rng, schedule or NoiseSchedule(), kind)
    if kind is ObjectiveKind.FM:
        return fm_loss(field, z_data, rng)
    return mf_loss(field, z_data, rng, p_eq)
