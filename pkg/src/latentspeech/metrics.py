"""Reference-based signal metrics."""
from __future__ import annotations

import numpy as np

from .audio import StftPlan, stft

SI_SDR_CAP = 100.0


class MetricError(ValueError):
    pass


def _pair(ref, est) -> tuple[np.ndarray, np.ndarray]:
    ref = np.asarray(getattr(ref, "samples", ref), dtype=np.float64).reshape(-1)
    est = np.asarray(getattr(est, "samples", est), dtype=np.float64).reshape(-1)
    if ref.shape != est.shape:
        raise MetricError(f"length mismatch: {ref.size} vs {est.size}")
    return ref, est


def si_sdr(ref, est) -> float:
    """Scale-invariant SDR in dB, capped at 100 dB for an exact match."""
    ref, est = _pair(ref, est)
    rr = float(np.dot(ref, ref))
    if rr == 0.0:
        raise MetricError("SI-SDR is undefined for a silent reference")
    target = (np.dot(est, ref) / rr) * ref
    resid = est - target
    num, den = float(np.dot(target, target)), float(np.dot(resid, resid))
    if den == 0.0:
        return SI_SDR_CAP
    if num == 0.0:
        return -SI_SDR_CAP
    return float(np.clip(10.0 * np.log10(num / den), -SI_SDR_CAP, SI_SDR_CAP))


def lsd(ref, est, n_fft: int = 1024, floor: float = 1e-10) -> float:
    """RMS over frames and bins of the log-power spectral difference (dB), 1024-point STFT."""
    ref, est = _pair(ref, est)
    plan = StftPlan(n_fft)
    if ref.size < n_fft:
        pad = n_fft - ref.size
        ref, est = np.pad(ref, (0, pad)), np.pad(est, (0, pad))
    a = 10.0 * np.log10(np.abs(stft(ref, plan)) ** 2 + floor)
    b = 10.0 * np.log10(np.abs(stft(est, plan)) ** 2 + floor)
    return float(np.sqrt(np.mean((a - b) ** 2)))
