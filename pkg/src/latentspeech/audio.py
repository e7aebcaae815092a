"""Waveform I/O, STFT, mixing primitives and the synthetic corpus."""
from __future__ import annotations

import json
import wave
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.signal import fftconvolve

from .tensor import Tensor, no_grad, ops

FRAME_SIZES = (32, 64, 128, 256, 512, 1024, 2048)


class AudioError(ValueError):
    pass


class WavFormatError(AudioError):
    pass


@dataclass
class Waveform:
    samples: np.ndarray
    sample_rate: int = 8000
    clip_count: int = 0

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64).reshape(-1)
        if self.sample_rate <= 0:
            raise AudioError("sample_rate must be positive")

    def __len__(self) -> int:
        return self.samples.size

    @property
    def duration(self) -> float:
        return self.samples.size / self.sample_rate

    def energy(self) -> float:
        return float(np.dot(self.samples, self.samples))


def clip(samples: np.ndarray, sample_rate: int) -> Waveform:
    n = int(np.count_nonzero(np.abs(samples) > 1.0))
    return Waveform(np.clip(samples, -1.0, 1.0), sample_rate, n)


# ----------------------------------------------------------------------------- WAV I/O

_PCM_SCALE = 32767.0


def quantize16(x: np.ndarray) -> np.ndarray:
    """The values a 16-bit write followed by a read reproduces."""
    return np.round(np.clip(x, -1.0, 1.0) * _PCM_SCALE) / _PCM_SCALE


def write_wav(path, w: Waveform) -> None:
    ints = np.round(np.clip(w.samples, -1.0, 1.0) * _PCM_SCALE).astype("<i2")
    with wave.open(str(path), "wb") as f:
        f.setnchannels(1)
        f.setsampwidth(2)
        f.setframerate(int(w.sample_rate))
        f.writeframes(ints.tobytes())


def read_wav(path) -> Waveform:
    try:
        with wave.open(str(path), "rb") as f:
            channels, width, rate, n = f.getnchannels(), f.getsampwidth(), f.getframerate(), f.getnframes()
            raw = f.readframes(n)
    except (wave.Error, EOFError) as exc:
        raise WavFormatError(f"{path}: malformed WAV ({exc})") from exc
    if width != 2:
        raise WavFormatError(f"{path}: unsupported bit depth {8 * width}; need 16-bit PCM")
    if channels != 1:
        raise WavFormatError(f"{path}: {channels} channels; need mono")
    ints = np.frombuffer(raw, dtype="<i2").astype(np.float64)
    return Waveform(np.clip(ints / _PCM_SCALE, -1.0, 1.0), rate)


# ----------------------------------------------------------------------------- STFT


@dataclass(frozen=True)
class StftPlan:
    frame_size: int

    def __post_init__(self):
        if self.frame_size not in FRAME_SIZES:
            raise AudioError(f"frame size {self.frame_size} not in {FRAME_SIZES}")

    @property
    def hop(self) -> int:
        return self.frame_size // 4

    @property
    def window(self) -> np.ndarray:
        n = np.arange(self.frame_size)
        return 0.5 - 0.5 * np.cos(2 * np.pi * n / self.frame_size)

    @property
    def bins(self) -> int:
        return self.frame_size // 2 + 1


def default_plans() -> list[StftPlan]:
    return [StftPlan(n) for n in FRAME_SIZES]


def stft(w: Waveform | np.ndarray, plan: StftPlan) -> np.ndarray:
    """Complex spectrogram [frames, frame_size // 2 + 1] (no centering)."""
    x = w.samples if isinstance(w, Waveform) else np.asarray(w, dtype=np.float64)
    n = plan.frame_size
    if x.size < n:
        raise AudioError(f"signal of {x.size} samples shorter than one frame ({n})")
    nf = 1 + (x.size - n) // plan.hop
    idx = np.arange(nf)[:, None] * plan.hop + np.arange(n)[None, :]
    return np.fft.rfft(x[idx] * plan.window, axis=-1)


def spectral_distance(x: Tensor, x_hat: Tensor, plans, weights=None, mode: str = "complex") -> Tensor:
    """Differentiable multi-resolution spectral L1 between batches [B, T].

    ``mode="complex"`` averages |Re| + |Im| differences of the complex
    spectrograms; ``mode="magnitude"`` uses linear plus log magnitude L1.
    """
    if x.shape != x_hat.shape:
        raise AudioError(f"length mismatch {x.shape} vs {x_hat.shape}")
    weights = [1.0] * len(plans) if weights is None else list(weights)
    if len(weights) != len(plans):
        raise AudioError("need one weight per resolution")
    total = Tensor(0.0)
    for plan, lam in zip(plans, weights):
        if lam == 0.0:
            continue
        sx = ops.stft(x, plan.frame_size, plan.hop, plan.window)
        sy = ops.stft(x_hat, plan.frame_size, plan.hop, plan.window)
        if mode == "complex":
            term = ops.mean(ops.abs(ops.sub(sx, sy)))
        elif mode == "magnitude":
            mx, my = _magnitude(sx), _magnitude(sy)
            term = ops.add(
                ops.mean(ops.abs(ops.sub(mx, my))),
                ops.mean(ops.abs(ops.sub(ops.log(ops.add(mx, 1e-5)), ops.log(ops.add(my, 1e-5))))),
            )
        else:
            raise AudioError(f"unknown spectral distance mode {mode!r}")
        total = ops.add(total, ops.mul(term, lam))
    return total


def _magnitude(s: Tensor) -> Tensor:
    re, im = ops.getitem(s, (..., 0)), ops.getitem(s, (..., 1))
    return ops.sqrt(ops.add(ops.add(ops.mul(re, re), ops.mul(im, im)), 1e-12))


def multires_spec_distance(x: Waveform, x_hat: Waveform, weights=None, mode: str = "complex", plans=None) -> float:
    if len(x) != len(x_hat):
        raise AudioError(f"length mismatch: {len(x)} vs {len(x_hat)}")
    if x.sample_rate != x_hat.sample_rate:
        raise AudioError("sample rate mismatch")
    plans = default_plans() if plans is None else plans
    plans = [p for p in plans if p.frame_size <= len(x)]
    with no_grad():
        d = spectral_distance(Tensor(x.samples[None]), Tensor(x_hat.samples[None]), plans, weights, mode)
    return d.item()


# ----------------------------------------------------------------------------- mixing


def snr_db(signal: np.ndarray, noise: np.ndarray) -> float:
    return 10.0 * np.log10(np.dot(signal, signal) / np.dot(noise, noise))


def mix_at_snr(clean: Waveform, noise: Waveform, snr: float) -> tuple[Waveform, Waveform]:
    """Scale ``noise`` so that clean/noise energy ratio is ``snr`` dB and add it."""
    if len(clean) != len(noise):
        raise AudioError(f"length mismatch: {len(clean)} vs {len(noise)}")
    if not np.isfinite(snr):
        raise AudioError("snr must be finite")
    ec, en = clean.energy(), noise.energy()
    if ec <= 0.0 or en <= 0.0:
        raise AudioError("mix_at_snr needs non-zero clean and noise energy")
    scale = np.sqrt(ec / (en * 10.0 ** (snr / 10.0)))
    scaled = noise.samples * scale
    return clip(clean.samples + scaled, clean.sample_rate), Waveform(scaled, clean.sample_rate)


@dataclass
class RirKernel:
    taps: np.ndarray
    decay_time: float


def synth_rir(rng: np.random.Generator, t60: float, sample_rate: int, drr_db: float = 6.0) -> RirKernel:
    """Exponentially decaying noise tail behind a unit direct path.

    The tail is scaled so the direct-to-reverberant energy ratio is ``drr_db``.
    """
    n = max(2, int(np.ceil(t60 * sample_rate)))
    t = np.arange(n) / sample_rate
    env = np.exp(-6.9078 * t / t60)  # 60 dB amplitude decay at t60
    taps = rng.standard_normal(n) * env
    taps[0] = 0.0
    taps *= np.sqrt(10 ** (-drr_db / 10) / max(np.sum(taps**2), 1e-300))
    taps[0] = 1.0
    # a few early samples stay below the direct path
    taps[1:] = np.clip(taps[1:], -0.95, 0.95)
    return RirKernel(taps, t60)


def convolve_rir(w: Waveform, rir: RirKernel) -> Waveform:
    taps = np.asarray(rir.taps, dtype=np.float64)
    if taps.size <= 64:
        y = np.convolve(w.samples, taps)[: len(w)]
    else:
        y = fftconvolve(w.samples, taps)[: len(w)]
    return Waveform(y, w.sample_rate)


# ----------------------------------------------------------------------------- synthetic corpus


@dataclass
class CorpusConfig:
    n_speakers: int = 8
    utterances_per_speaker: int = 6
    n_event_classes: int = 4
    events_per_class: int = 8
    duration: float = 2.0
    sample_rate: int = 8000
    level_rms: float = 0.1


@dataclass
class CorpusItem:
    waveform: Waveform
    kind: str  # "speech" | "event"
    speaker_id: int | None = None
    event_class: int | None = None
    index: int = 0
    meta: dict = field(default_factory=dict)

    def record(self, path: str = "") -> dict:
        return {
            "path": path,
            "kind": self.kind,
            "speaker_id": self.speaker_id,
            "event_class": self.event_class,
            "duration": self.waveform.duration,
        }


@dataclass
class Corpus:
    config: CorpusConfig
    seed: int
    items: list[CorpusItem]

    @property
    def speech(self) -> list[CorpusItem]:
        return [i for i in self.items if i.kind == "speech"]

    @property
    def events(self) -> list[CorpusItem]:
        return [i for i in self.items if i.kind == "event"]

    def speakers(self) -> list[int]:
        return sorted({i.speaker_id for i in self.speech})

    def classes(self) -> list[int]:
        return sorted({i.event_class for i in self.events})

    def by_speaker(self, spk: int) -> list[CorpusItem]:
        return [i for i in self.speech if i.speaker_id == spk]

    def by_class(self, cls: int) -> list[CorpusItem]:
        return [i for i in self.events if i.event_class == cls]


def speaker_params(spk: int, n_speakers: int, seed: int) -> dict:
    rng = np.random.default_rng([seed, 1, spk])
    # fundamentals on a jittered grid keep speakers distinct
    f0 = 100.0 + 160.0 * (spk + 0.2 + 0.6 * rng.random()) / max(n_speakers, 1)
    return {
        "f0": f0,
        "vibrato_rate": rng.uniform(4.0, 7.0),
        "vibrato_depth": rng.uniform(0.01, 0.03),
        "rolloff": rng.uniform(1.0, 2.0),
        "formant": rng.uniform(400.0, 1400.0),
        "phases": rng.uniform(0, 2 * np.pi, size=64),
    }


def _smooth_curve(rng, n, sr, rate_hz, depth):
    knots = max(2, int(np.ceil(n / sr * rate_hz)) + 2)
    vals = rng.uniform(-depth, depth, size=knots)
    return np.interp(np.linspace(0, knots - 1, n), np.arange(knots), vals)


def synth_speech(rng: np.random.Generator, params: dict, n: int, sr: int, level: float) -> np.ndarray:
    t = np.arange(n) / sr
    drift = _smooth_curve(rng, n, sr, 3.0, 0.08)
    vib = params["vibrato_depth"] * np.sin(2 * np.pi * params["vibrato_rate"] * t + rng.uniform(0, 2 * np.pi))
    f0 = params["f0"] * (1.0 + drift + vib)
    phase = 2 * np.pi * np.cumsum(f0) / sr + rng.uniform(0, 2 * np.pi)
    x = np.zeros(n)
    for k in range(1, 64):
        fk = k * params["f0"]
        if fk > 0.4 * sr:
            break
        amp = k ** (-params["rolloff"]) * (1.0 + 1.5 * np.exp(-0.5 * ((fk - params["formant"]) / 250.0) ** 2))
        x += amp * np.sin(k * phase + params["phases"][k])
    # syllable-like envelope; gaps stay short so any crop carries energy
    env = np.zeros(n)
    pos = 0
    while pos < n:
        syl = int(rng.uniform(0.15, 0.35) * sr)
        gap = int(rng.uniform(0.02, 0.08) * sr)
        seg = np.sin(np.pi * np.linspace(0, 1, syl)) ** 0.5 * rng.uniform(0.6, 1.0)
        end = min(n, pos + syl)
        env[pos:end] = seg[: end - pos]
        pos = end + gap
    env = 0.15 + 0.85 * env
    x *= env
    return x * level / np.sqrt(np.mean(x * x))


def class_envelope(cls: int, n_classes: int, sr: int, nbins: int) -> np.ndarray:
    f = np.linspace(0, sr / 2, nbins)
    lo, hi = np.log(200.0), np.log(0.42 * sr)
    center = np.exp(lo + (hi - lo) * (cls + 0.5) / n_classes)
    width = 0.35 * center
    return np.exp(-0.5 * ((f - center) / width) ** 2)


def synth_event(rng: np.random.Generator, cls: int, n_classes: int, n: int, sr: int, level: float) -> np.ndarray:
    spec = np.fft.rfft(rng.standard_normal(n))
    x = np.fft.irfft(spec * class_envelope(cls, n_classes, sr, spec.size), n=n)
    env = np.full(n, 0.3)
    pos = int(rng.uniform(0, 0.1) * sr)
    while pos < n:
        dur = int(rng.uniform(0.05, 0.4) * sr)
        end = min(n, pos + dur)
        env[pos:end] += rng.uniform(0.5, 1.0) * np.hanning(dur)[: end - pos]
        pos = end + int(rng.uniform(0.02, 0.2) * sr)
    x *= env
    return x * level / np.sqrt(np.mean(x * x))


def synth_corpus(config: CorpusConfig, seed: int) -> Corpus:
    """Deterministic toy corpus: harmonic 'speech' per speaker and filtered-noise events per class."""
    sr = config.sample_rate
    n = int(round(config.duration * sr))
    items: list[CorpusItem] = []
    for spk in range(config.n_speakers):
        params = speaker_params(spk, config.n_speakers, seed)
        for u in range(config.utterances_per_speaker):
            rng = np.random.default_rng([seed, 2, spk, u])
            x = synth_speech(rng, params, n, sr, config.level_rms)
            items.append(CorpusItem(Waveform(x, sr), "speech", speaker_id=spk, index=u, meta={"f0": params["f0"]}))
    for cls in range(config.n_event_classes):
        for e in range(config.events_per_class):
            rng = np.random.default_rng([seed, 3, cls, e])
            x = synth_event(rng, cls, config.n_event_classes, n, sr, config.level_rms)
            items.append(CorpusItem(Waveform(x, sr), "event", event_class=cls, index=e))
    return Corpus(config, seed, items)


def spectral_centroid(x: np.ndarray, sr: int) -> float:
    mag = np.abs(np.fft.rfft(x))
    f = np.fft.rfftfreq(x.size, 1.0 / sr)
    return float((f * mag).sum() / mag.sum())


def write_corpus(corpus: Corpus, out_dir) -> Path:
    """Write every item as a WAV plus a line-delimited manifest; returns the manifest path."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    lines = []
    for item in corpus.items:
        tag = f"spk{item.speaker_id}" if item.kind == "speech" else f"cls{item.event_class}"
        rel = f"{item.kind}/{tag}_{item.index:03d}.wav"
        (out / item.kind).mkdir(exist_ok=True)
        write_wav(out / rel, item.waveform)
        lines.append(json.dumps(item.record(rel), sort_keys=True))
    manifest = out / "manifest.jsonl"
    manifest.write_text("\n".join(lines) + "\n")
    return manifest


def read_manifest(path) -> list[dict]:
    return [json.loads(line) for line in Path(path).read_text().splitlines() if line.strip()]
