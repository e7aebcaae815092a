"""Generation from trained fields: ancestral DDPM, Euler flow integration, one-step mean flow."""
from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .objectives import LINEAR_REVERSED, Field, NoiseSchedule, ObjectiveError, ObjectiveKind
from .tensor import Tensor, no_grad

DEFAULT_STEPS = {ObjectiveKind.DDPM_EPS: 200, ObjectiveKind.DDPM_V: 200, ObjectiveKind.FM: 32, ObjectiveKind.MF: 1}


@dataclass
class SamplerConfig:
    kind: ObjectiveKind = ObjectiveKind.FM
    steps: int | None = None
    seed: int = 0

    def __post_init__(self):
        self.kind = ObjectiveKind.parse(self.kind)
        if self.steps is None:
            self.steps = DEFAULT_STEPS[self.kind]
        if self.steps < 1:
            raise ObjectiveError("steps must be >= 1")
        if self.kind is ObjectiveKind.MF and self.steps != 1:
            raise ObjectiveError("mean-flow sampling is single-step")


def _batch_time(value: float, n: int) -> Tensor:
    return Tensor(np.full(n, float(value)))


def ddpm_sample(field: Field, eps: np.ndarray, schedule: NoiseSchedule, steps: int, rng: np.random.Generator,
                kind=ObjectiveKind.DDPM_EPS) -> np.ndarray:
    """Ancestral chain over an evenly respaced subset of the training steps (posterior variance = beta)."""
    kind = ObjectiveKind.parse(kind)
    taus = schedule.timesteps(steps)
    z = np.array(eps, dtype=np.float64)
    n = z.shape[0]
    ab = schedule.alpha_bar
    with no_grad():
        for i in range(len(taus) - 1, -1, -1):
            tau = taus[i]
            ab_t = ab[tau]
            ab_prev = ab[taus[i - 1]] if i > 0 else 1.0
            beta = 1.0 - ab_t / ab_prev
            pred = field(Tensor(z), Tensor(np.full(n, schedule.time_feature(tau))), None).data
            if kind is ObjectiveKind.DDPM_V:
                pred = np.sqrt(ab_t) * pred + np.sqrt(1.0 - ab_t) * z
            z = (z - beta / np.sqrt(1.0 - ab_t) * pred) / np.sqrt(1.0 - beta)
            if i > 0:
                z = z + np.sqrt(beta) * rng.standard_normal(z.shape)
    return z


def fm_sample(field: Field, eps: np.ndarray, steps: int) -> np.ndarray:
    """Explicit Euler from t=0 (noise) to t=1 in ``steps`` uniform steps."""
    if steps < 1:
        raise ObjectiveError("steps must be >= 1")
    z = np.array(eps, dtype=np.float64)
    n, dt = z.shape[0], 1.0 / steps
    with no_grad():
        for k in range(steps):
            z = z + dt * field(Tensor(z), _batch_time(k * dt, n), None).data
    return z


def mf_sample(field: Field, eps: np.ndarray) -> np.ndarray:
    """One evaluation of the average velocity over the whole noise-to-data interval."""
    z = np.array(eps, dtype=np.float64)
    n = z.shape[0]
    t_noise = LINEAR_REVERSED.noise_time
    with no_grad():
        u = field(Tensor(z), _batch_time(t_noise, n), _batch_time(0.0, n)).data
    # average velocity u over [0, 1] in the noise-at-one convention: z_0 = z_1 - (1 - 0) u
    return z - u


def sample_latents(field: Field, shape: tuple, cfg: SamplerConfig, schedule: NoiseSchedule | None = None,
                   rng: np.random.Generator | None = None) -> np.ndarray:
    rng = np.random.default_rng(cfg.seed) if rng is None else rng
    eps = rng.standard_normal(shape)
    if cfg.kind.is_ddpm:
        return ddpm_sample(field, eps, schedule or NoiseSchedule(), cfg.steps, rng, cfg.kind)
    if cfg.kind is ObjectiveKind.FM:
        return fm_sample(field, eps, cfg.steps)
    return mf_sample(field, eps)


@dataclass
class Generation:
    latents: np.ndarray
    waveform: np.ndarray
    sample_seconds: float
    total_seconds: float
    audio_seconds: float

    @property
    def rtf(self) -> float:
        return self.sample_seconds / self.audio_seconds

    @property
    def rtf_e2e(self) -> float:
        return self.total_seconds / self.audio_seconds


def generate_waveform(field: Field, vae, shape: tuple, cfg: SamplerConfig, schedule: NoiseSchedule | None = None,
                      latent_scale: float = 1.0, prepare=None) -> Generation:
    """Sample latents with ``field`` and decode them.

    ``prepare`` (optional) is a zero-argument callable run inside the timed
    region before sampling, e.g. condition encoding.
    """
    t0 = time.perf_counter()
    if prepare is not None:
        prepare()
    t1 = time.perf_counter()
    z = sample_latents(field, shape, cfg, schedule)
    t2 = time.perf_counter()
    with no_grad():
        wav = vae.decode(Tensor(z * latent_scale)).data
    t3 = time.perf_counter()
    audio_seconds = wav.shape[-1] / vae.cfg.sample_rate
    return Generation(z, wav, t2 - t1, t3 - t0, audio_seconds)
