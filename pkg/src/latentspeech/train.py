"""Optimizer, schedule, checkpoint container and the two training phases (VAE, then DiT on frozen latents)."""
from __future__ import annotations

import hashlib
import json
import os
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import tasks as T
from .audio import Corpus, StftPlan, default_plans
from .dit import ConditionBundle, DiT, DiTConfig
from .objectives import NoiseSchedule, ObjectiveKind, objective_loss
from .tensor import Tensor, backward, no_grad, ops
from .vae import StftDiscriminator, Vae, VaeConfig, reparameterize, vae_total_loss

MAGIC = b"LSPCKPT1"


class TrainingError(RuntimeError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass
class TrainConfig:
    lr_vae: float = 1.5e-4
    lr_dit: float = 7.5e-5
    weight_decay_vae: float = 1e-3
    weight_decay_dit: float = 0.0
    batch_size: int = 8
    gamma: float = 10_000.0
    max_steps: int = 1000
    seed: int = 0
    crop: int = 3200  # VAE training crop, samples
    clip: int = 4000  # DiT example length, samples
    pool_size: int = 512  # cached examples per task for DiT training
    p_eq: float = 0.25
    grad_clip: float = 0.0  # global gradient-norm limit for DiT updates; 0 disables
    log_every: int = 50
    ckpt_every: int = 1000

    def __post_init__(self):
        if self.lr_vae <= 0 or self.lr_dit <= 0:
            raise TrainingError("learning rates must be positive")
        if self.batch_size < 1:
            raise TrainingError("batch_size must be >= 1")
        if self.gamma <= 0:
            raise TrainingError("gamma must be positive")
        if self.grad_clip < 0:
            raise TrainingError("grad_clip must be >= 0")


# ----------------------------------------------------------------------------- optimizer


def inverse_lr(step: int, lr0: float, gamma: float) -> float:
    if step < 0:
        raise ValueError("step must be >= 0")
    return lr0 / (1.0 + step / gamma)


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0


def adamw_step(params: dict, grads: dict, state: AdamState, lr: float, wd: float,
               betas=(0.9, 0.999), eps: float = 1e-8) -> AdamState:
    """In-place AdamW update of ``params`` (name -> Tensor) from ``grads`` (name -> array)."""
    bad = [n for n, g in grads.items() if not np.all(np.isfinite(g))]
    if bad:
        raise TrainingError(f"non-finite gradient at step {state.t + 1} in {len(bad)} tensors, e.g. {bad[:3]}")
    b1, b2 = betas
    state.t += 1
    c1, c2 = 1.0 - b1**state.t, 1.0 - b2**state.t
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise TrainingError(f"gradient shape {g.shape} does not match parameter {name} {p.shape}")
        m = state.m.setdefault(name, np.zeros_like(p.data))
        v = state.v.setdefault(name, np.zeros_like(p.data))
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.data = p.data * (1.0 - lr * wd) - lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return state


def clip_grad_norm(grads: dict, limit: float) -> float:
    """Scale ``grads`` in place so their global L2 norm is at most ``limit``; returns the norm before."""
    norm = float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))
    if limit > 0 and norm > limit:
        for g in grads.values():
            g *= limit / norm
    return norm


def grads_for(loss: Tensor, params: dict) -> dict:
    names = list(params)
    gs = backward(loss, wrt=[params[n] for n in names], accumulate=False)
    return {n: (np.zeros(params[n].shape) if g is None else g) for n, g in zip(names, gs)}


# ----------------------------------------------------------------------------- checkpoints


def save_arrays(path, meta: dict, arrays: dict) -> None:
    """Write ``MAGIC | u64 header length | JSON header | raw little-endian f64 blobs`` atomically."""
    path = Path(path)
    entries, blobs, offset = [], [], 0
    for name in sorted(arrays):
        a = np.asarray(arrays[name], dtype="<f8")
        entries.append({"name": name, "shape": list(a.shape), "offset": offset})
        blobs.append(a.tobytes())
        offset += a.nbytes
    header = json.dumps({"meta": meta, "arrays": entries}, sort_keys=True).encode()
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<Q", len(header)))
        f.write(header)
        for b in blobs:
            f.write(b)
    os.replace(tmp, path)


def load_arrays(path) -> tuple[dict, dict]:
    raw = Path(path).read_bytes()
    if raw[: len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    (hlen,) = struct.unpack("<Q", raw[len(MAGIC) : len(MAGIC) + 8])
    start = len(MAGIC) + 8
    try:
        header = json.loads(raw[start : start + hlen])
    except json.JSONDecodeError as e:
        raise CheckpointError(f"{path}: corrupt header ({e})") from None
    base = start + hlen
    arrays = {}
    for e in header["arrays"]:
        n = int(np.prod(e["shape"], dtype=np.int64))
        lo = base + e["offset"]
        if lo + 8 * n > len(raw):
            raise CheckpointError(f"{path}: truncated data for {e['name']}")
        arrays[e["name"]] = np.frombuffer(raw, dtype="<f8", count=n, offset=lo).reshape(e["shape"]).copy()
    return header["meta"], arrays


def params_hash(module) -> str:
    h = hashlib.sha256()
    for name, p in sorted(module.named_parameters()):
        h.update(name.encode())
        h.update(np.asarray(p.data, dtype="<f8").tobytes())
    return h.hexdigest()


def _pack(prefix: str, d: dict) -> dict:
    return {f"{prefix}{k}": v for k, v in d.items()}


def _unpack(prefix: str, arrays: dict) -> dict:
    return {k[len(prefix) :]: v for k, v in arrays.items() if k.startswith(prefix)}


def _append_log(path, record: dict) -> None:
    if path is not None:
        with open(path, "a") as f:
            f.write(json.dumps(record) + "\n")


# ----------------------------------------------------------------------------- VAE phase


class VaeTrainer:
    """Alternating generator / discriminator updates on random crops of the training split."""

    def __init__(self, vcfg: VaeConfig, tcfg: TrainConfig, corpus: Corpus, plans: list[StftPlan] | None = None):
        self.vcfg, self.tcfg = vcfg, tcfg
        self.vae = Vae(vcfg, seed=tcfg.seed)
        self.plans = plans or default_plans()
        self.disc = StftDiscriminator(self.plans, vcfg.disc_channels, seed=tcfg.seed + 1) if vcfg.lambda_adv else None
        self.gen_state, self.disc_state = AdamState(), AdamState()
        self.step_count = 0
        items = T.split_corpus(corpus, "train").items
        self.pool = np.stack([i.waveform.samples for i in items])
        if self.pool.shape[1] < tcfg.crop:
            raise TrainingError("corpus clips are shorter than the training crop")

    def batch(self, rng) -> np.ndarray:
        idx = rng.integers(0, self.pool.shape[0], self.tcfg.batch_size)
        off = rng.integers(0, self.pool.shape[1] - self.tcfg.crop + 1, self.tcfg.batch_size)
        return np.stack([self.pool[i, o : o + self.tcfg.crop] for i, o in zip(idx, off)])

    def step(self) -> dict:
        tc = self.tcfg
        rng = np.random.default_rng([tc.seed, 1, self.step_count])
        x = self.batch(rng)
        eo = self.vae.encode(Tensor(x))
        z = reparameterize(eo, rng.standard_normal(eo.mu.shape))
        x_hat = self.vae.decode(z)
        loss = vae_total_loss(x, x_hat, eo, self.disc, self.vcfg, self.plans)
        lr = inverse_lr(self.step_count, tc.lr_vae, tc.gamma)
        gp = dict(self.vae.named_parameters())
        adamw_step(gp, grads_for(loss.total, gp), self.gen_state, lr, tc.weight_decay_vae)
        if self.disc is not None:
            # the discriminator loss only sees stop-gradient copies, so it cannot reach the generator
            dp = dict(self.disc.named_parameters())
            adamw_step(dp, grads_for(loss.disc, dp), self.disc_state, lr, tc.weight_decay_vae)
        self.step_count += 1
        rec = {"step": self.step_count, "task": "VAE", "objective": "vae", "loss": loss.total.item(), "lr": lr}
        rec.update({k: getattr(loss, k).item() for k in ("recon", "kl", "spec", "adv", "disc")})
        return rec

    def run(self, steps: int, log_path=None, ckpt_path=None, callback=None) -> list[dict]:
        out = []
        for _ in range(steps):
            rec = self.step()
            out.append(rec)
            if self.step_count % self.tcfg.log_every == 0:
                _append_log(log_path, rec)
            if ckpt_path is not None and self.step_count % self.tcfg.ckpt_every == 0:
                self.save(ckpt_path)
            if callback is not None and callback(self, rec):
                break
        if ckpt_path is not None:
            self.save(ckpt_path)
        return out

    def save(self, path, extra: dict | None = None) -> None:
        arrays = _pack("vae.", self.vae.state_dict())
        arrays.update(_pack("opt.g.m.", self.gen_state.m))
        arrays.update(_pack("opt.g.v.", self.gen_state.v))
        if self.disc is not None:
            arrays.update(_pack("disc.", self.disc.state_dict()))
            arrays.update(_pack("opt.d.m.", self.disc_state.m))
            arrays.update(_pack("opt.d.v.", self.disc_state.v))
        meta = {
            "kind": "vae",
            "vae_config": self.vcfg.to_dict(),
            "train_config": asdict(self.tcfg),
            "step": self.step_count,
            "adam_t": [self.gen_state.t, self.disc_state.t],
            "plans": [p.frame_size for p in self.plans],
            "latent_scale": self.latent_scale(),
        }
        meta.update(extra or {})
        save_arrays(path, meta, arrays)

    def latent_scale(self) -> float:
        """Std of posterior means over a fixed set of training crops; divides latents for the DiT."""
        rng = np.random.default_rng([self.tcfg.seed, 2])
        n = min(32, self.pool.shape[0])
        x = self.pool[rng.permutation(self.pool.shape[0])[:n], : self.tcfg.crop]
        with no_grad():
            mu = self.vae.encode(Tensor(x)).mu.data
        return float(np.std(mu)) or 1.0

    @classmethod
    def resume(cls, path, corpus: Corpus) -> "VaeTrainer":
        meta, arrays = load_arrays(path)
        if meta.get("kind") != "vae":
            raise CheckpointError(f"{path} is not a VAE checkpoint")
        plans = [StftPlan(n) for n in meta["plans"]]
        tr = cls(VaeConfig(**meta["vae_config"]), TrainConfig(**meta["train_config"]), corpus, plans)
        tr.vae.load_state_dict(_unpack("vae.", arrays))
        tr.gen_state = AdamState(_unpack("opt.g.m.", arrays), _unpack("opt.g.v.", arrays), meta["adam_t"][0])
        if tr.disc is not None:
            tr.disc.load_state_dict(_unpack("disc.", arrays))
            tr.disc_state = AdamState(_unpack("opt.d.m.", arrays), _unpack("opt.d.v.", arrays), meta["adam_t"][1])
        tr.step_count = meta["step"]
        return tr


def load_vae(path) -> tuple[Vae, dict]:
    meta, arrays = load_arrays(path)
    if meta.get("kind") != "vae":
        raise CheckpointError(f"{path} is not a VAE checkpoint")
    vae = Vae(VaeConfig(**meta["vae_config"]))
    vae.load_state_dict(_unpack("vae.", arrays))
    vae.eval()
    return vae, meta


def train_vae(corpus: Corpus, vcfg: VaeConfig, tcfg: TrainConfig, ckpt_path=None, log_path=None) -> VaeTrainer:
    tr = VaeTrainer(vcfg, tcfg, corpus)
    tr.run(tcfg.max_steps, log_path, ckpt_path)
    return tr


# ----------------------------------------------------------------------------- DiT phase


class TaskModel:
    """DiT plus its condition encoders; the trainable half of the system."""

    def __init__(self, dcfg: DiTConfig, tasks, dims: T.EncoderDims, seed: int = 0):
        self.dcfg, self.tasks, self.dims = dcfg, T.check_tasks(tasks), dims
        self.dit = DiT(dcfg, seed=seed)
        self.encoders = T.ConditionEncoders(dims, dcfg.cross_dim, self.tasks, seed=seed)

    def named_parameters(self) -> list:
        return self.dit.named_parameters("dit.") + self.encoders.named_parameters("enc.")

    def state_dict(self) -> dict:
        return {n: p.data.copy() for n, p in self.named_parameters()}

    def load_state_dict(self, state: dict) -> None:
        self.dit.load_state_dict(_unpack("dit.", state))
        self.encoders.load_state_dict(_unpack("enc.", state))

    def train(self, mode: bool = True):
        self.dit.train(mode)
        self.encoders.train(mode)
        return self

    def field(self, task: str, concat, cross, rng=None):
        """Velocity/noise predictor closure with the conditions bound, in the ``f(z, t, r)`` form."""
        code = T.task_code(task)

        def f(z, t, r):
            t = t if isinstance(t, Tensor) else Tensor(np.asarray(t, dtype=np.float64))
            g = self.dit.global_vec(np.full(t.shape[0], code), t, r)
            return self.dit(z, ConditionBundle(g, concat, cross), rng=rng)

        return f

    def cross_for(self, task: str, payload) -> Tensor | None:
        if T.get_spec(task).cross_source is None:
            return None
        return self.encoders.cross(task, payload)


class DiTTrainer:
    def __init__(self, vae: Vae, latent_scale: float, dcfg: DiTConfig, tcfg: TrainConfig, kind, tasks,
                 corpus: Corpus, dims: T.EncoderDims | None = None, schedule: NoiseSchedule | None = None,
                 vae_hash: str | None = None):
        self.kind = ObjectiveKind.parse(kind)
        if (self.kind is ObjectiveKind.MF) != dcfg.two_times:
            raise TrainingError("mean flow needs a two-time model (two_times=True); other objectives need one time input")
        self.vae, self.latent_scale, self.tcfg = vae, latent_scale, tcfg
        self.vae.eval()
        self.schedule = schedule or NoiseSchedule()
        self.tasks = T.check_tasks(tasks)
        dims = dims or T.EncoderDims(n_speakers=corpus.config.n_speakers, n_classes=corpus.config.n_event_classes)
        if len(corpus.speakers()) > dims.n_speakers or len(corpus.classes()) > dims.n_classes:
            raise TrainingError("encoder tables are smaller than the corpus speaker / class inventory")
        self.model = TaskModel(dcfg, self.tasks, dims, seed=tcfg.seed)
        self.state = AdamState()
        self.step_count = 0
        self.vae_hash = vae_hash or params_hash(vae)
        train = T.split_corpus(corpus, "train")
        self.pools = {
            t: T.build_pool(t, train, vae, tcfg.pool_size, tcfg.seed, tcfg.clip, latent_scale, dims.n_mels)
            for t in self.tasks
        }

    def group_loss(self, task: str, idx: np.ndarray, rng) -> Tensor:
        pool = self.pools[task]
        cross = self.model.cross_for(task, pool.payload[idx])
        f = self.model.field(task, pool.concat[idx], cross, rng=rng)
        return objective_loss(self.kind, f, pool.target[idx], rng, self.schedule, self.tcfg.p_eq)

    def step(self) -> dict:
        tc = self.tcfg
        if params_hash(self.vae) != self.vae_hash:
            raise TrainingError("VAE parameters changed during DiT training")
        rng = np.random.default_rng([tc.seed, 3, self.step_count])
        self.model.train(True)
        labels = T.balanced_task_batch(self.tasks, tc.batch_size, rng, self.step_count)
        total, per_task = None, {}
        for task in self.tasks:
            n = labels.count(task)
            if n == 0:
                continue
            idx = rng.integers(0, len(self.pools[task]), n)
            loss = self.group_loss(task, idx, rng)
            per_task[task] = loss.item()
            term = ops.mul(loss, n / tc.batch_size)
            total = term if total is None else ops.add(total, term)
        lr = inverse_lr(self.step_count, tc.lr_dit, tc.gamma)
        params = dict(self.model.named_parameters())
        grads = grads_for(total, params)
        gnorm = clip_grad_norm(grads, tc.grad_clip)
        adamw_step(params, grads, self.state, lr, tc.weight_decay_dit)
        self.step_count += 1
        return {"step": self.step_count, "task": "+".join(self.tasks), "objective": self.kind.value,
                "loss": total.item(), "lr": lr, "per_task": per_task, "grad_norm": gnorm}

    def run(self, steps: int, log_path=None, ckpt_path=None) -> list[dict]:
        out = []
        for _ in range(steps):
            rec = self.step()
            out.append(rec)
            if self.step_count % self.tcfg.log_every == 0:
                for task, v in rec["per_task"].items():
                    _append_log(log_path, {"step": rec["step"], "task": task, "objective": rec["objective"],
                                           "loss": v, "lr": rec["lr"]})
            if ckpt_path is not None and self.step_count % self.tcfg.ckpt_every == 0:
                self.save(ckpt_path)
        if ckpt_path is not None:
            self.save(ckpt_path)
        return out

    def meta(self) -> dict:
        return {
            "kind": "dit",
            "objective": self.kind.value,
            "tasks": self.tasks,
            "task_codes": {t: T.TASK_CODES[t] for t in self.tasks},
            "dit_config": self.model.dcfg.to_dict(),
            "encoder_dims": asdict(self.model.dims),
            "train_config": asdict(self.tcfg),
            "schedule": self.schedule.meta(),
            "latent_scale": self.latent_scale,
            "vae_hash": self.vae_hash,
            "step": self.step_count,
            "adam_t": self.state.t,
        }

    def save(self, path) -> None:
        arrays = _pack("model.", self.model.state_dict())
        arrays.update(_pack("opt.m.", self.state.m))
        arrays.update(_pack("opt.v.", self.state.v))
        save_arrays(path, self.meta(), arrays)

    @classmethod
    def resume(cls, path, vae: Vae, corpus: Corpus, kind=None, schedule: NoiseSchedule | None = None) -> "DiTTrainer":
        meta, arrays = load_arrays(path)
        check_dit_meta(meta, kind, schedule)
        if params_hash(vae) != meta["vae_hash"]:
            raise CheckpointError("the VAE does not match the one this checkpoint was trained on")
        tr = cls(vae, meta["latent_scale"], DiTConfig(**meta["dit_config"]), TrainConfig(**meta["train_config"]),
                 meta["objective"], meta["tasks"], corpus, T.EncoderDims(**meta["encoder_dims"]),
                 NoiseSchedule(**meta["schedule"]), meta["vae_hash"])
        tr.model.load_state_dict(_unpack("model.", arrays))
        tr.state = AdamState(_unpack("opt.m.", arrays), _unpack("opt.v.", arrays), meta["adam_t"])
        tr.step_count = meta["step"]
        return tr


def check_dit_meta(meta: dict, kind=None, schedule: NoiseSchedule | None = None) -> None:
    if meta.get("kind") != "dit":
        raise CheckpointError("not a DiT checkpoint")
    if kind is not None and ObjectiveKind.parse(kind).value != meta["objective"]:
        raise CheckpointError(f"checkpoint was trained with {meta['objective']}, not {ObjectiveKind.parse(kind).value}")
    if schedule is not None and schedule.meta() != meta["schedule"]:
        raise CheckpointError(f"noise schedule {schedule.meta()} does not match checkpoint {meta['schedule']}")


def load_task_model(path) -> tuple[TaskModel, dict]:
    meta, arrays = load_arrays(path)
    check_dit_meta(meta)
    model = TaskModel(DiTConfig(**meta["dit_config"]), meta["tasks"], T.EncoderDims(**meta["encoder_dims"]))
    model.load_state_dict(_unpack("model.", arrays))
    model.train(False)
    return model, meta


def train_dit(corpus: Corpus, vae_ckpt, kind, tasks, dcfg: DiTConfig, tcfg: TrainConfig,
              ckpt_path=None, log_path=None) -> DiTTrainer:
    vae, vmeta = load_vae(vae_ckpt)
    tr = DiTTrainer(vae, vmeta["latent_scale"], dcfg, tcfg, kind, tasks, corpus)
    tr.run(tcfg.max_steps, log_path, ckpt_path)
    return tr
