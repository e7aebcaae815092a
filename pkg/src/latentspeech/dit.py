"""Conditional diffusion transformer over VAE latent sequences."""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .tensor import Tensor, as_tensor, ops
from .tensor.core import ConfigurationError, ShapeError
from .tensor.nn import Embedding, Linear, Module, RMSNorm

TASK_CODES = {"SE": 0, "TSE": 1, "AEC": 2, "LQSS": 3}


@dataclass
class DiTConfig:
    layers: int = 4
    heads: int = 4
    hidden: int = 128
    latent_dim: int = 16
    concat_extra_dim: int = 32
    cross_dim: int = 128
    dropout: float = 0.1
    mlp_ratio: int = 4
    time_dim: int = 64
    n_tasks: int = 4
    use_task_id: bool = True
    # MF feeds a second time scalar r alongside t
    two_times: bool = False
    has_cross: bool = True
    out_init_scale: float = 0.1
    # multiplier on t before the sinusoidal features. The two-time model differentiates through
    # the features, so it uses a small scale to keep d/dt of the embedding bounded.
    time_scale: float = 1000.0
    two_time_scale: float = 10.0

    def __post_init__(self):
        if self.hidden % self.heads:
            raise ConfigurationError(f"hidden {self.hidden} not divisible by heads {self.heads}")
        if (self.hidden // self.heads) % 2:
            raise ConfigurationError("head dimension must be even for rotary embeddings")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigurationError("dropout must lie in [0, 1)")
        if self.time_dim % 2:
            raise ConfigurationError("time_dim must be even")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def full(cls, **kw) -> "DiTConfig":
        base = dict(layers=32, heads=24, hidden=1536, latent_dim=256, concat_extra_dim=512, cross_dim=1536,
                    time_dim=256)
        base.update(kw)
        return cls(**base)

    def param_count(self) -> int:
        """Exact parameter count of ``DiT(self)`` without allocating it."""
        h, f = self.hidden, self.mlp_ratio * self.hidden
        lin = lambda i, o: i * o + o  # noqa: E731
        block = h  # norm before self-attention
        block += lin(h, h)  # global-condition bias
        block += 4 * lin(h, h)  # q, k, v, out
        if self.has_cross:
            block += h + 2 * lin(h, h) + 2 * lin(self.cross_dim, h)
        block += h + 2 * lin(h, f) + lin(f, h)
        t_in = self.time_dim * (2 if self.two_times else 1)
        total = self.layers * block
        total += lin(self.latent_dim + self.concat_extra_dim, h)
        total += lin(t_in, h) + lin(h, h)
        if self.use_task_id:
            total += self.n_tasks * h
        total += h + lin(h, self.latent_dim)
        return total


@dataclass
class ConditionBundle:
    global_vec: Tensor
    concat: Tensor | None = None
    cross: Tensor | None = None


def sinusoidal(t, dim: int, scale: float = 1000.0) -> Tensor:
    """Sinusoidal features of a batch of scalars ``t`` [B] -> [B, dim]; differentiable in ``t``."""
    t = as_tensor(t)
    if t.ndim != 1:
        raise ShapeError("timesteps must be a 1-D batch")
    half = dim // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / half)
    ang = ops.mul(ops.reshape(t, (t.shape[0], 1)), scale * freqs[None, :])
    return ops.concat([ops.sin(ang), ops.cos(ang)], axis=-1)


def rotary_apply(q, k) -> tuple[Tensor, Tensor]:
    """Rotate queries and keys [B, H, L, d] by their positions."""
    q, k = as_tensor(q), as_tensor(k)
    d = q.shape[-1]
    if d % 2 or k.shape[-1] != d:
        raise ShapeError("rotary embedding needs matching even head dimensions")
    cos_t, sin_t = ops.rope_tables(max(q.shape[-2], k.shape[-2]), d)
    return ops.rope(q, cos_t[: q.shape[-2]], sin_t[: q.shape[-2]]), ops.rope(k, cos_t[: k.shape[-2]], sin_t[: k.shape[-2]])


class GatedMLP(Module):
    def __init__(self, h: int, f: int, rng):
        self.w_in = Linear(h, f, rng)
        self.w_gate = Linear(h, f, rng)
        self.w_out = Linear(f, h, rng)

    def __call__(self, x):
        return self.w_out(ops.mul(ops.silu(self.w_gate(x)), self.w_in(x)))


class SelfAttention(Module):
    def __init__(self, h: int, heads: int, rng):
        self.heads = heads
        self.q, self.k, self.v, self.o = (Linear(h, h, rng) for _ in range(4))

    def __call__(self, x, rope_tab):
        return self.o(ops.multi_head_attention(self.q(x), self.k(x), self.v(x), self.heads, rope_tab))


class CrossAttention(Module):
    def __init__(self, h: int, cross_dim: int, heads: int, rng):
        self.heads = heads
        self.q, self.o = Linear(h, h, rng), Linear(h, h, rng)
        self.k, self.v = Linear(cross_dim, h, rng), Linear(cross_dim, h, rng)

    def __call__(self, x, c):
        return self.o(ops.multi_head_attention(self.q(x), self.k(c), self.v(c), self.heads))


class Block(Module):
    def __init__(self, cfg: DiTConfig, rng):
        h = cfg.hidden
        self.norm1 = RMSNorm(h)
        self.gbias = Linear(h, h, rng)
        self.attn = SelfAttention(h, cfg.heads, rng)
        self.has_cross = cfg.has_cross
        if cfg.has_cross:
            self.norm2 = RMSNorm(h)
            self.cross = CrossAttention(h, cfg.cross_dim, cfg.heads, rng)
        self.norm3 = RMSNorm(h)
        self.mlp = GatedMLP(h, cfg.mlp_ratio * h, rng)
        self.p = cfg.dropout

    def __call__(self, x, g, cross, rope_tab, rng):
        def drop(y):
            return ops.dropout(y, self.p, rng, self.training)

        b, _, h = x.shape
        n = ops.add(self.norm1(x), ops.reshape(self.gbias(g), (b, 1, h)))
        x = ops.add(x, drop(self.attn(n, rope_tab)))
        if cross is not None:
            if not self.has_cross:
                raise ConfigurationError("this model was built without cross-attention layers")
            x = ops.add(x, drop(self.cross(self.norm2(x), cross)))
        return ops.add(x, drop(self.mlp(self.norm3(x))))


class DiT(Module):
    def __init__(self, cfg: DiTConfig, seed: int = 0):
        self.cfg = cfg
        rng = np.random.default_rng([seed, 303])
        h = cfg.hidden
        self.inp = Linear(cfg.latent_dim + cfg.concat_extra_dim, h, rng)
        t_in = cfg.time_dim * (2 if cfg.two_times else 1)
        self.t1, self.t2 = Linear(t_in, h, rng), Linear(h, h, rng)
        if cfg.use_task_id:
            self.task_emb = Embedding(cfg.n_tasks, h, rng, scale=1.0)
        self.blocks = [Block(cfg, rng) for _ in range(cfg.layers)]
        self.norm_out = RMSNorm(h)
        self.out = Linear(h, cfg.latent_dim, rng, scale=cfg.out_init_scale)
        self.evals = 0

    def global_vec(self, task_ids, t, r=None) -> Tensor:
        t = as_tensor(t)
        scale = self.cfg.two_time_scale if self.cfg.two_times else self.cfg.time_scale
        feats = sinusoidal(t, self.cfg.time_dim, scale)
        if self.cfg.two_times:
            if r is None:
                raise ConfigurationError("this model expects a second time input r")
            feats = ops.concat([feats, sinusoidal(r, self.cfg.time_dim, scale)], axis=-1)
        elif r is not None:
            raise ConfigurationError("r given to a single-time model")
        g = self.t2(ops.silu(self.t1(feats)))
        if self.cfg.use_task_id:
            ids = np.asarray(task_ids, dtype=np.int64).reshape(-1)
            if ids.size == 1 and t.shape[0] > 1:
                ids = np.full(t.shape[0], ids[0])
            if np.any(ids < 0) or np.any(ids >= self.cfg.n_tasks):
                raise ConfigurationError(f"unknown task id in {ids}")
            g = ops.add(g, self.task_emb(ids))
        return g

    def __call__(self, z_t, cond: ConditionBundle, rng: np.random.Generator | None = None) -> Tensor:
        self.evals += 1
        z_t = as_tensor(z_t)
        if z_t.ndim != 3 or z_t.shape[2] != self.cfg.latent_dim:
            raise ShapeError(f"expected latents [B, frames, {self.cfg.latent_dim}], got {z_t.shape}")
        b, frames, _ = z_t.shape
        extra = self.cfg.concat_extra_dim
        if cond.concat is not None:
            c = as_tensor(cond.concat)
            if c.shape[:2] != (b, frames):
                raise ShapeError(f"concat condition {c.shape} does not match latents {z_t.shape}")
            if c.shape[2] > extra:
                raise ShapeError(f"concat width {c.shape[2]} exceeds configured {extra}")
            if c.shape[2] < extra:
                c = ops.pad(c, 0, extra - c.shape[2], axis=2)
            x = ops.concat([z_t, c], axis=-1)
        elif extra:
            x = ops.pad(z_t, 0, extra, axis=2)
        else:
            x = z_t
        x = self.inp(x)
        rope_tab = ops.rope_tables(frames, self.cfg.hidden // self.cfg.heads)
        for blk in self.blocks:
            x = blk(x, cond.global_vec, cond.cross, rope_tab, rng)
        return self.out(self.norm_out(x))
