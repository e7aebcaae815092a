"""Waveform VAE: strided snake/conv encoder and decoder, Gaussian bottleneck,
spectral + adversarial training losses and a multi-resolution STFT discriminator."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import audio
from .tensor import Tensor, as_tensor, ops, stop_gradient
from .tensor.core import ConfigurationError, ShapeError
from .tensor.nn import Conv1d, ConvTranspose1d, Module, Snake, frozen


@dataclass
class VaeConfig:
    strides: tuple = (2, 4, 4, 5)
    channel_multipliers: tuple = (1, 2, 4, 8)
    base_channels: int = 16
    latent_dim: int = 16
    sample_rate: int = 8000
    beta: float = 1e-4
    lambda_kl: float = 1.0
    lambda_adv: float = 0.1
    lambda_spec: float = 1.0
    # when False, lambda_kl multiplies only the KL part and the reconstruction term stays at weight 1
    kl_scales_reconstruction: bool = True
    spec_weights: tuple | None = None
    disc_channels: int = 16
    # starting bias of the log-sigma head; a narrow initial posterior lets the decoder see the latents early
    log_sigma_init: float = -3.0

    def __post_init__(self):
        self.strides = tuple(int(s) for s in self.strides)
        self.channel_multipliers = tuple(int(m) for m in self.channel_multipliers)
        if len(self.strides) != len(self.channel_multipliers):
            raise ConfigurationError("strides and channel_multipliers must have equal length")
        if any(s < 1 for s in self.strides) or self.latent_dim < 1 or self.base_channels < 1:
            raise ConfigurationError("strides, latent_dim and base_channels must be positive")

    @property
    def factor(self) -> int:
        return int(np.prod(self.strides))

    @property
    def frame_rate(self) -> float:
        return self.sample_rate / self.factor

    def frames_for(self, length: int) -> int:
        return math.ceil(length / self.factor)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["strides"], d["channel_multipliers"] = list(self.strides), list(self.channel_multipliers)
        if self.spec_weights is not None:
            d["spec_weights"] = list(self.spec_weights)
        return d

    @classmethod
    def toy(cls, **kw) -> "VaeConfig":
        return cls(**kw)

    @classmethod
    def full(cls, **kw) -> "VaeConfig":
        base = dict(strides=(2, 4, 4, 5, 6), channel_multipliers=(1, 2, 4, 8, 16), base_channels=128,
                    latent_dim=256, sample_rate=48000)
        base.update(kw)
        return cls(**base)


@dataclass
class EncoderOutput:
    mu: Tensor
    log_sigma: Tensor

    @property
    def sigma(self) -> Tensor:
        return ops.exp(self.log_sigma)


class ResUnit(Module):
    def __init__(self, ch: int, rng: np.random.Generator):
        self.act1 = Snake(ch)
        self.conv1 = Conv1d(ch, ch, 7, rng, padding=3)
        self.act2 = Snake(ch)
        self.conv2 = Conv1d(ch, ch, 1, rng)

    def __call__(self, x):
        return ops.add(x, self.conv2(self.act2(self.conv1(self.act1(x)))))


class EncoderBlock(Module):
    def __init__(self, c_in: int, c_out: int, stride: int, rng):
        self.res = ResUnit(c_in, rng)
        self.act = Snake(c_in)
        self.down = Conv1d(c_in, c_out, 2 * stride, rng, stride=stride, padding=math.ceil(stride / 2))

    def __call__(self, x):
        return self.down(self.act(self.res(x)))


class DecoderBlock(Module):
    def __init__(self, c_in: int, c_out: int, stride: int, rng):
        self.act = Snake(c_in)
        self.up = ConvTranspose1d(c_in, c_out, stride, rng)
        self.res = ResUnit(c_out, rng)

    def __call__(self, x):
        return self.res(self.up(self.act(x)))


def _channels(cfg: VaeConfig) -> list[int]:
    return [cfg.base_channels * m for m in (1,) + cfg.channel_multipliers]


class Encoder(Module):
    def __init__(self, cfg: VaeConfig, rng):
        ch = _channels(cfg)
        self.conv_in = Conv1d(1, ch[0], 7, rng, padding=3)
        self.blocks = [EncoderBlock(ch[i], ch[i + 1], s, rng) for i, s in enumerate(cfg.strides)]
        self.act = Snake(ch[-1])
        self.conv_out = Conv1d(ch[-1], 2 * cfg.latent_dim, 3, rng, padding=1)
        self.conv_out.b.data[cfg.latent_dim :] = cfg.log_sigma_init

    def __call__(self, x):
        h = self.conv_in(x)
        for blk in self.blocks:
            h = blk(h)
        return self.conv_out(self.act(h))


class Decoder(Module):
    def __init__(self, cfg: VaeConfig, rng):
        ch = _channels(cfg)
        self.conv_in = Conv1d(cfg.latent_dim, ch[-1], 7, rng, padding=3)
        n = len(cfg.strides)
        self.blocks = [DecoderBlock(ch[i + 1], ch[i], cfg.strides[i], rng) for i in reversed(range(n))]
        self.act = Snake(ch[0])
        self.conv_out = Conv1d(ch[0], 1, 7, rng, padding=3)

    def __call__(self, z):
        h = self.conv_in(z)
        for blk in self.blocks:
            h = blk(h)
        return self.conv_out(self.act(h))


class Vae(Module):
    def __init__(self, cfg: VaeConfig, seed: int = 0):
        self.cfg = cfg
        rng = np.random.default_rng([seed, 101])
        self.encoder = Encoder(cfg, rng)
        self.decoder = Decoder(cfg, rng)

    def encode(self, x) -> EncoderOutput:
        x = as_tensor(x)
        if x.ndim == 1:
            x = ops.reshape(x, (1, x.shape[0]))
        if x.ndim != 2:
            raise ShapeError(f"expected a waveform batch [B, T], got {x.shape}")
        length = x.shape[1]
        f = self.cfg.factor
        if length < f:
            raise ShapeError(f"input of {length} samples shorter than the downsampling factor {f}")
        extra = -length % f
        if extra:
            x = ops.pad(x, 0, extra, axis=1)
        h = self.encoder(ops.reshape(x, (x.shape[0], 1, x.shape[1])))
        h = ops.transpose(h, (0, 2, 1))
        d = self.cfg.latent_dim
        return EncoderOutput(h[:, :, :d], h[:, :, d:])

    def decode(self, z) -> Tensor:
        z = as_tensor(z)
        if z.ndim != 3 or z.shape[2] != self.cfg.latent_dim:
            raise ShapeError(f"expected latents [B, frames, {self.cfg.latent_dim}], got {z.shape}")
        y = self.decoder(ops.transpose(z, (0, 2, 1)))
        return ops.reshape(y, (y.shape[0], y.shape[2]))


def reparameterize(eo: EncoderOutput, eps) -> Tensor:
    eps = np.asarray(eps.data if isinstance(eps, Tensor) else eps, dtype=np.float64)
    if eps.shape != eo.mu.shape:
        raise ShapeError(f"noise shape {eps.shape} does not match posterior {eo.mu.shape}")
    return ops.add(eo.mu, ops.mul(eo.sigma, eps))


def kl_loss(eo: EncoderOutput) -> Tensor:
    """KL(q || N(0, I)) summed over frames and dims, averaged over the batch."""
    mu, ls = eo.mu, eo.log_sigma
    per = ops.sub(ops.add(ops.mul(mu, mu), ops.exp(ops.mul(ls, 2.0))), ops.add(ops.mul(ls, 2.0), 1.0))
    return ops.mul(ops.sum(per), 0.5 / mu.shape[0])


# ----------------------------------------------------------------------------- discriminator


class _ScoreStack(Module):
    def __init__(self, bins: int, channels: int, rng):
        self.c1 = Conv1d(bins, channels, 3, rng, padding=1)
        self.c2 = Conv1d(channels, channels, 3, rng, padding=1)
        self.c3 = Conv1d(channels, 1, 3, rng, padding=1)

    def __call__(self, h):
        return self.c3(ops.leaky_relu(self.c2(ops.leaky_relu(self.c1(h)))))


class StftDiscriminator(Module):
    """One small conv stack per STFT resolution over log-magnitude frames."""

    def __init__(self, plans=None, channels: int = 16, seed: int = 0):
        self.plans = audio.default_plans() if plans is None else list(plans)
        rng = np.random.default_rng([seed, 202])
        self.stacks = [_ScoreStack(p.bins, channels, rng) for p in self.plans]

    def __call__(self, x) -> list[Tensor]:
        x = as_tensor(x)
        scores = []
        for plan, stack in zip(self.plans, self.stacks):
            if plan.frame_size > x.shape[1]:
                continue
            s = ops.stft(x, plan.frame_size, plan.hop, plan.window)
            re, im = s[..., 0], s[..., 1]
            mag = ops.sqrt(ops.add(ops.add(ops.mul(re, re), ops.mul(im, im)), 1e-10))
            scores.append(stack(ops.transpose(ops.log(ops.add(mag, 1e-5)), (0, 2, 1))))
        if not scores:
            raise ShapeError("signal shorter than every discriminator resolution")
        return scores


def _mean_over_scales(maps, fn) -> Tensor:
    total = Tensor(0.0)
    for m in maps:
        total = ops.add(total, ops.mean(fn(m)))
    return ops.mul(total, 1.0 / len(maps))


def adversarial_losses(real, fake, disc) -> tuple[Tensor, Tensor]:
    """Least-squares (L_adv, L_D); each only carries gradient to its own side."""
    real, fake = as_tensor(real), as_tensor(fake)
    params = disc.parameters() if isinstance(disc, Module) else []
    with frozen(*([disc] if params else [])):
        l_adv = _mean_over_scales(disc(fake), lambda m: ops.square(ops.sub(m, 1.0)))
    d_real = _mean_over_scales(disc(stop_gradient(real)), lambda m: ops.square(ops.sub(m, 1.0)))
    d_fake = _mean_over_scales(disc(stop_gradient(fake)), ops.square)
    return l_adv, ops.add(d_real, d_fake)


def reconstruction_loss(x, x_hat) -> Tensor:
    """Squared L2 error per example, averaged over the batch."""
    d = ops.sub(as_tensor(x), as_tensor(x_hat))
    return ops.mul(ops.sum(ops.mul(d, d)), 1.0 / d.shape[0])


@dataclass
class VaeLoss:
    total: Tensor
    recon: Tensor
    kl: Tensor
    spec: Tensor
    adv: Tensor
    disc: Tensor
    parts: dict = field(default_factory=dict)


def vae_total_loss(x, x_hat, eo: EncoderOutput, disc, cfg: VaeConfig, plans=None) -> VaeLoss:
    x, x_hat = as_tensor(x), as_tensor(x_hat)
    if x.shape != x_hat.shape:
        raise ShapeError(f"reconstruction shape {x_hat.shape} does not match input {x.shape}")
    plans = audio.default_plans() if plans is None else plans
    plans = [p for p in plans if p.frame_size <= x.shape[1]]
    weights = None
    if cfg.spec_weights is not None:
        weights = list(cfg.spec_weights)[: len(plans)]
    recon = reconstruction_loss(x, x_hat)
    kl = kl_loss(eo)
    if cfg.kl_scales_reconstruction:
        l_kl = ops.mul(ops.add(recon, ops.mul(kl, cfg.beta)), cfg.lambda_kl)
    else:
        l_kl = ops.add(recon, ops.mul(kl, cfg.beta * cfg.lambda_kl))
    spec = audio.spectral_distance(x, x_hat, plans, weights) if cfg.lambda_spec else Tensor(0.0)
    if cfg.lambda_adv and disc is not None:
        adv, d_loss = adversarial_losses(x, x_hat, disc)
    else:
        adv, d_loss = Tensor(0.0), Tensor(0.0)
    total = ops.add(ops.add(l_kl, ops.mul(spec, cfg.lambda_spec)), ops.mul(adv, cfg.lambda_adv))
    return VaeLoss(total, recon, kl, spec, adv, d_loss)


def padded_length(length: int, cfg: VaeConfig) -> int:
    return cfg.frames_for(length) * cfg.factor
