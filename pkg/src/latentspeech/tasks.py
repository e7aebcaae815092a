"""Task registry, paired-example synthesis, condition encoders and balanced batching."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .dit import TASK_CODES
from .audio import Corpus, CorpusItem, Waveform, convolve_rir, mix_at_snr, snr_db, synth_rir
from .tensor import Tensor, no_grad, ops
from .tensor.core import ConfigurationError
from .tensor.nn import Embedding, Linear, Module

TASK_NAMES = {v: k for k, v in TASK_CODES.items()}


class TaskError(ValueError):
    pass


@dataclass(frozen=True)
class TaskSpec:
    task: str
    concat_sources: tuple
    cross_source: str | None
    snr_range: tuple = (-5.0, 20.0)
    noise_snr_range: tuple = (-5.0, 20.0)
    p_reverb: float = 0.0
    p_noise: float = 0.0
    p_no_distractor: float = 0.0
    n_sources: tuple = (2, 3)

    @property
    def code(self) -> int:
        return TASK_CODES[self.task]


SPECS = {
    "SE": TaskSpec("SE", ("noisy",), "noisy_features", snr_range=(-5.0, 20.0), p_reverb=0.5),
    # noise SNR range for TSE and AEC is not given; the SE range is reused
    "TSE": TaskSpec("TSE", ("mixture",), "speaker", snr_range=(-15.0, 15.0), p_noise=0.1, p_no_distractor=0.05),
    "AEC": TaskSpec("AEC", ("mic", "far"), None, snr_range=(-15.0, 15.0), p_noise=0.2),
    "LQSS": TaskSpec("LQSS", ("mixture",), "query", snr_range=(-15.0, 15.0)),
}


def get_spec(task: str) -> TaskSpec:
    try:
        return SPECS[task]
    except KeyError:
        raise TaskError(f"unknown task {task!r}; expected one of {sorted(SPECS)}") from None


@dataclass
class TrainingExample:
    task: str
    target: Waveform
    inputs: dict
    payload: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)
    # pre-clipping additive parts of the primary input, in mixing order
    components: list = field(default_factory=list)

    @property
    def primary(self) -> Waveform:
        return self.inputs[get_spec(self.task).concat_sources[0]]


def remix(ex: TrainingExample) -> np.ndarray:
    total = np.zeros_like(ex.target.samples)
    for c in ex.components:
        total = total + c
    return np.clip(total, -1.0, 1.0)


# ----------------------------------------------------------------------------- corpus views


def split_corpus(corpus: Corpus, part: str) -> Corpus:
    """Hold out the last utterance per speaker and the last two events per class."""
    if part not in ("train", "test"):
        raise TaskError("part must be 'train' or 'test'")
    nu = corpus.config.utterances_per_speaker
    ne = corpus.config.events_per_class
    keep = []
    for item in corpus.items:
        last = nu - 1 if item.kind == "speech" else ne - 2
        held = item.index >= last
        if held == (part == "test"):
            keep.append(item)
    return Corpus(corpus.config, corpus.seed, keep)


def _crop(rng, item: CorpusItem, n: int) -> np.ndarray:
    x = item.waveform.samples
    if x.size < n:
        raise TaskError(f"corpus item shorter than requested clip ({x.size} < {n})")
    off = int(rng.integers(0, x.size - n + 1))
    return x[off : off + n].copy()


def _pick(rng, items: list, exclude=None):
    pool = [i for i in items if exclude is None or not exclude(i)]
    if not pool:
        raise TaskError("no corpus item satisfies the request")
    return pool[int(rng.integers(0, len(pool)))]


def _require(corpus: Corpus, speech: int = 1, events: int = 1):
    if len(corpus.speech) < speech or len(corpus.events) < events:
        raise TaskError("corpus lacks the speech or event items this task needs")


def _noise_source(rng, corpus: Corpus, n: int) -> np.ndarray:
    return _crop(rng, _pick(rng, corpus.events), n)


def _uniform(rng, rng_range) -> float:
    return float(rng.uniform(rng_range[0], rng_range[1]))


# ----------------------------------------------------------------------------- example builders


def make_se_example(corpus: Corpus, rng: np.random.Generator, n: int = 4000) -> TrainingExample:
    spec = SPECS["SE"]
    _require(corpus)
    sr = corpus.config.sample_rate
    item = _pick(rng, corpus.speech)
    clean = _crop(rng, item, n)
    reverb = bool(rng.uniform() < spec.p_reverb)
    speech = clean
    if reverb:
        rir = synth_rir(rng, float(rng.uniform(0.1, 0.5)), sr)
        speech = convolve_rir(Waveform(clean, sr), rir).samples
    snr = _uniform(rng, spec.snr_range)
    mix, noise = mix_at_snr(Waveform(speech, sr), Waveform(_noise_source(rng, corpus, n), sr), snr)
    return TrainingExample(
        "SE", Waveform(clean, sr), {"noisy": mix}, {},
        {"snr": snr, "reverb": reverb, "speaker": item.speaker_id}, [speech, noise.samples],
    )


def softclip(x: np.ndarray, limit: float = 0.5) -> np.ndarray:
    return limit * np.tanh(x / limit)


def make_aec_example(corpus: Corpus, rng: np.random.Generator, n: int = 4000,
                     scenario: str = "double_talk") -> TrainingExample:
    spec = SPECS["AEC"]
    _require(corpus, speech=2)
    sr = corpus.config.sample_rate
    near_item = _pick(rng, corpus.speech)
    far_item = _pick(rng, corpus.speech, exclude=lambda i: i.speaker_id == near_item.speaker_id)
    far = _crop(rng, far_item, n)
    rir = synth_rir(rng, float(rng.uniform(0.1, 0.4)), sr)
    echo = convolve_rir(Waveform(softclip(far), sr), rir).samples
    meta = {"scenario": scenario, "far_speaker": far_item.speaker_id}
    if scenario == "far_end_only":
        near = np.zeros(n)
        mic = Waveform(np.clip(echo, -1.0, 1.0), sr)
        return TrainingExample("AEC", Waveform(near, sr), {"mic": mic, "far": Waveform(far, sr)}, {},
                               dict(meta, ser=None, noise=False), [echo])
    if scenario != "double_talk":
        raise TaskError(f"unknown AEC scenario {scenario!r}")
    near = _crop(rng, near_item, n)
    ser = _uniform(rng, spec.snr_range)
    _, echo_s = mix_at_snr(Waveform(near, sr), Waveform(echo, sr), ser)
    parts = [near, echo_s.samples]
    noisy = bool(rng.uniform() < spec.p_noise)
    noise_snr = None
    if noisy:
        noise_snr = _uniform(rng, spec.noise_snr_range)
        _, nz = mix_at_snr(Waveform(near, sr), Waveform(_noise_source(rng, corpus, n), sr), noise_snr)
        parts.append(nz.samples)
    total = parts[0] + parts[1] + (parts[2] if noisy else 0.0)
    mic = Waveform(np.clip(total, -1.0, 1.0), sr, int(np.sum(np.abs(total) > 1.0)))
    meta.update(ser=ser, noise=noisy, noise_snr=noise_snr, near_speaker=near_item.speaker_id)
    return TrainingExample("AEC", Waveform(near, sr), {"mic": mic, "far": Waveform(far, sr)}, {}, meta, parts)


def make_tse_example(corpus: Corpus, rng: np.random.Generator, n: int = 4000,
                     enroll_corpus: Corpus | None = None) -> TrainingExample:
    """``enroll_corpus`` (default: ``corpus``) supplies the enrollment utterance, e.g. training data at test time."""
    spec = SPECS["TSE"]
    if len(corpus.speakers()) < 2:
        raise TaskError("target speaker extraction needs at least two speakers")
    sr = corpus.config.sample_rate
    spk = int(rng.choice(corpus.speakers()))
    tgt_item = _pick(rng, corpus.by_speaker(spk))
    others = [i for i in (enroll_corpus or corpus).by_speaker(spk) if i.index != tgt_item.index]
    if not others:
        raise TaskError("target speaker needs a second utterance for enrollment")
    enroll = _pick(rng, others)
    target = _crop(rng, tgt_item, n)
    parts = [target]
    meta = {"speaker": spk, "target_utt": tgt_item.index, "enroll_utt": enroll.index}
    distractor = bool(rng.uniform() >= spec.p_no_distractor)
    meta["distractor"] = distractor
    if distractor:
        other = _pick(rng, corpus.speech, exclude=lambda i: i.speaker_id == spk)
        snr = _uniform(rng, spec.snr_range)
        _, interf = mix_at_snr(Waveform(target, sr), Waveform(_crop(rng, other, n), sr), snr)
        parts.append(interf.samples)
        meta.update(snr=snr, interferer=other.speaker_id)
    noisy = bool(rng.uniform() < spec.p_noise)
    meta["noise"] = noisy
    if noisy:
        nsnr = _uniform(rng, spec.noise_snr_range)
        _, nz = mix_at_snr(Waveform(target, sr), Waveform(_noise_source(rng, corpus, n), sr), nsnr)
        parts.append(nz.samples)
        meta["noise_snr"] = nsnr
    total = sum(parts[1:], parts[0])
    mix = Waveform(np.clip(total, -1.0, 1.0), sr, int(np.sum(np.abs(total) > 1.0)))
    return TrainingExample("TSE", Waveform(target, sr), {"mixture": mix}, {"speaker": enroll.speaker_id}, meta, parts)


def make_lqss_example(corpus: Corpus, rng: np.random.Generator, n: int = 4000,
                      single_source: bool = False) -> TrainingExample:
    spec = SPECS["LQSS"]
    classes = corpus.classes()
    if len(classes) < 2:
        raise TaskError("label-queried separation needs at least two event classes")
    sr = corpus.config.sample_rate
    k = 1 if single_source else int(rng.integers(spec.n_sources[0], spec.n_sources[1] + 1))
    k = min(k, len(classes))
    chosen = [int(c) for c in rng.choice(classes, size=k, replace=False)]
    target = _crop(rng, _pick(rng, corpus.by_class(chosen[0])), n)
    meta = {"target_class": chosen[0], "interferer_classes": chosen[1:]}
    parts = [target]
    if k > 1:
        interf = sum(_crop(rng, _pick(rng, corpus.by_class(c)), n) for c in chosen[1:])
        snr = _uniform(rng, spec.snr_range)
        _, scaled = mix_at_snr(Waveform(target, sr), Waveform(interf, sr), snr)
        parts.append(scaled.samples)
        meta["snr"] = snr
    total = sum(parts[1:], parts[0])
    mix = Waveform(np.clip(total, -1.0, 1.0), sr, int(np.sum(np.abs(total) > 1.0)))
    return TrainingExample("LQSS", Waveform(target, sr), {"mixture": mix}, {"query": chosen[0]}, meta, parts)


BUILDERS = {"SE": make_se_example, "TSE": make_tse_example, "AEC": make_aec_example, "LQSS": make_lqss_example}


def make_example(task: str, corpus: Corpus, rng: np.random.Generator, n: int = 4000, **kw) -> TrainingExample:
    get_spec(task)
    return BUILDERS[task](corpus, rng, n, **kw)


def measured_snr(ex: TrainingExample) -> float:
    """SNR (or SER) of the first interfering component against the reference component."""
    return snr_db(ex.components[0], ex.components[1])


# ----------------------------------------------------------------------------- batching


def balanced_counts(n_tasks: int, batch_size: int, batch_index: int = 0) -> list[int]:
    if batch_size < n_tasks:
        raise TaskError("batch must hold at least one example per task")
    base, extra = divmod(batch_size, n_tasks)
    counts = [base] * n_tasks
    for j in range(extra):
        counts[(batch_index * extra + j) % n_tasks] += 1
    return counts


def balanced_task_batch(tasks, batch_size: int, rng: np.random.Generator, batch_index: int = 0) -> list[str]:
    """Task label per batch slot; per-task counts differ by at most one and the surplus rotates."""
    tasks = list(tasks)
    for t in tasks:
        get_spec(t)
    counts = balanced_counts(len(tasks), batch_size, batch_index)
    slots = [t for t, c in zip(tasks, counts) for _ in range(c)]
    return [slots[i] for i in rng.permutation(len(slots))]


# ----------------------------------------------------------------------------- condition encoders


def mel_filterbank(n_mels: int, n_fft: int, sr: int) -> np.ndarray:
    def hz_to_mel(f):
        return 2595.0 * np.log10(1.0 + f / 700.0)

    pts = 700.0 * (10 ** (np.linspace(0, hz_to_mel(sr / 2), n_mels + 2) / 2595.0) - 1.0)
    bins = np.fft.rfftfreq(n_fft, 1.0 / sr)
    fb = np.zeros((n_mels, bins.size))
    for m in range(n_mels):
        lo, c, hi = pts[m], pts[m + 1], pts[m + 2]
        up = (bins - lo) / (c - lo)
        down = (hi - bins) / (hi - c)
        fb[m] = np.maximum(0.0, np.minimum(up, down))
    return fb


def log_mel_frames(x: np.ndarray, sr: int, hop: int, n_mels: int = 32) -> np.ndarray:
    """Log-mel features with one frame per ``hop`` samples (aligned with latent frames)."""
    n_fft = 2 * hop
    frames = -(-x.size // hop)
    xp = np.pad(x, (hop // 2, n_fft + frames * hop - x.size))
    idx = np.arange(frames)[:, None] * hop + np.arange(n_fft)[None, :]
    win = np.hanning(n_fft)
    mag2 = np.abs(np.fft.rfft(xp[idx] * win, axis=-1)) ** 2
    return np.log(mag2 @ mel_filterbank(n_mels, n_fft, sr).T + 1e-6)


@dataclass
class EncoderDims:
    speaker_dim: int = 192
    query_dim: int = 512
    feature_dim: int = 768
    n_mels: int = 32
    n_speakers: int = 8
    n_classes: int = 4


class ConditionEncoders(Module):
    """Learned stand-ins for the pretrained condition extractors, each followed by an adapter to cross_dim."""

    def __init__(self, dims: EncoderDims, cross_dim: int, tasks, seed: int = 0):
        rng = np.random.default_rng([seed, 404])
        self.dims = dims
        self.tasks = list(tasks)
        if "SE" in self.tasks:
            self.feat1 = Linear(dims.n_mels, dims.feature_dim, rng)
            self.feat2 = Linear(dims.feature_dim, dims.feature_dim, rng)
            self.feat_adapt = Linear(dims.feature_dim, cross_dim, rng)
        if "TSE" in self.tasks:
            self.speaker_table = Embedding(dims.n_speakers, dims.speaker_dim, rng)
            self.speaker_adapt = Linear(dims.speaker_dim, cross_dim, rng)
        if "LQSS" in self.tasks:
            self.query_table = Embedding(dims.n_classes, dims.query_dim, rng)
            self.query_adapt = Linear(dims.query_dim, cross_dim, rng)

    def native(self, task: str, payload) -> Tensor | None:
        """Condition features at their native width (768 / 192 / 512 by default)."""
        route = get_spec(task).cross_source
        if route is None:
            return None
        if task not in self.tasks:
            raise TaskError(f"no condition encoder registered for {task}")
        if route == "noisy_features":
            mel = Tensor(np.asarray(payload, dtype=np.float64))
            return self.feat2(ops.silu(self.feat1(mel)))
        ids = np.asarray(payload, dtype=np.int64).reshape(-1)
        table = self.speaker_table if route == "speaker" else self.query_table
        emb = table(ids)
        return ops.reshape(emb, (ids.size, 1, emb.shape[-1]))

    def cross(self, task: str, payload) -> Tensor | None:
        nat = self.native(task, payload)
        if nat is None:
            return None
        adapt = {"SE": "feat_adapt", "TSE": "speaker_adapt", "LQSS": "query_adapt"}[task]
        return getattr(self, adapt)(nat)


# ----------------------------------------------------------------------------- latent cache


@dataclass
class TaskPool:
    """Precomputed latents for a finite set of examples of one task."""

    task: str
    target: np.ndarray  # [N, F, D]
    concat: np.ndarray  # [N, F, k * D]
    payload: np.ndarray  # mel frames [N, F, n_mels] for SE, integer ids [N] for TSE/LQSS, zeros otherwise
    examples: list

    def __len__(self) -> int:
        return self.target.shape[0]


def encode_latents(vae, waves: np.ndarray, latent_scale: float, chunk: int = 16) -> np.ndarray:
    out = []
    with no_grad():
        for i in range(0, waves.shape[0], chunk):
            out.append(vae.encode(Tensor(waves[i : i + chunk])).mu.data / latent_scale)
    return np.concatenate(out, axis=0)


def build_pool(task: str, corpus: Corpus, vae, count: int, seed: int, n: int, latent_scale: float,
               n_mels: int = 32, keep_examples: bool = False) -> TaskPool:
    spec = get_spec(task)
    exs = [make_example(task, corpus, np.random.default_rng([seed, spec.code, i]), n) for i in range(count)]
    target = encode_latents(vae, np.stack([e.target.samples for e in exs]), latent_scale)
    concat = np.concatenate(
        [encode_latents(vae, np.stack([e.inputs[r].samples for e in exs]), latent_scale) for r in spec.concat_sources],
        axis=-1,
    )
    if spec.cross_source == "noisy_features":
        hop = vae.cfg.factor
        payload = np.stack([log_mel_frames(e.primary.samples, corpus.config.sample_rate, hop, n_mels) for e in exs])
        payload = payload[:, : target.shape[1]]
    elif spec.cross_source == "speaker":
        payload = np.array([e.payload["speaker"] for e in exs])
    elif spec.cross_source == "query":
        payload = np.array([e.payload["query"] for e in exs])
    else:
        payload = np.zeros(count)
    return TaskPool(task, target, concat, payload, exs if keep_examples else [])


@dataclass
class RoutedConditions:
    task: str
    target: np.ndarray  # [B, F, D]
    concat: np.ndarray  # [B, F, k * D]
    cross: Tensor | None
    task_ids: np.ndarray


def assemble_conditions(examples, vae, encoders: ConditionEncoders, latent_scale: float = 1.0,
                        n_mels: int = 32) -> RoutedConditions:
    """Route one task's examples into target latents, stacked concat latents and the cross sequence."""
    if isinstance(examples, TrainingExample):
        examples = [examples]
    tasks = {e.task for e in examples}
    if len(tasks) != 1:
        raise TaskError("assemble one task at a time")
    task = tasks.pop()
    spec = get_spec(task)
    if spec.cross_source is not None and task not in encoders.tasks:
        raise TaskError(f"no condition encoder registered for {task}")
    target = encode_latents(vae, np.stack([e.target.samples for e in examples]), latent_scale)
    concat = np.concatenate(
        [encode_latents(vae, np.stack([e.inputs[r].samples for e in examples]), latent_scale)
         for r in spec.concat_sources],
        axis=-1,
    )
    payload = None
    if spec.cross_source == "noisy_features":
        sr = examples[0].target.sample_rate
        payload = np.stack([log_mel_frames(e.primary.samples, sr, vae.cfg.factor, n_mels) for e in examples])
        payload = payload[:, : target.shape[1]]
    elif spec.cross_source == "speaker":
        payload = np.array([e.payload["speaker"] for e in examples])
    elif spec.cross_source == "query":
        payload = np.array([e.payload["query"] for e in examples])
    cross = encoders.cross(task, payload) if spec.cross_source else None
    return RoutedConditions(task, target, concat, cross, np.full(len(examples), spec.code))


def task_code(task: str) -> int:
    get_spec(task)
    return TASK_CODES[task]


def check_tasks(tasks) -> list[str]:
    tasks = list(tasks)
    if not tasks:
        raise ConfigurationError("at least one task is required")
    for t in tasks:
        get_spec(t)
    return tasks
