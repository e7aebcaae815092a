"""Acceptance suite: one test per criterion, each recording a PASS/FAIL verdict.

Criteria 6-8 train the toy preset into runs/<config hash>/ (shared with the CLI).
Finished checkpoints are reused; partial ones are resumed, which gives the same
weights as an uninterrupted run.
"""
import time
from pathlib import Path

import numpy as np
import pytest

from latentspeech import cli
from latentspeech import evaluation as E
from latentspeech import tasks as T
from latentspeech.audio import CorpusConfig, StftPlan, Waveform, quantize16, read_wav, synth_corpus, write_wav
from latentspeech.dit import ConditionBundle, DiT, DiTConfig
from latentspeech.objectives import (
    LINEAR,
    NoiseSchedule,
    ObjectiveKind,
    ddpm_forward,
    fm_interpolate,
    mf_target,
    v_target,
)
from latentspeech.samplers import fm_sample, mf_sample
from latentspeech.tensor import Tensor, backward, jvp, no_grad, ops
from latentspeech.train import load_arrays, load_vae
from latentspeech.vae import StftDiscriminator, Vae, VaeConfig, reparameterize, vae_total_loss

from _gradcheck import check_op, rel_err
from acceptance_log import record
from test_tensor import COMPOSITES, OP_CASES

ROOT = Path(__file__).resolve().parents[1]
SEED = 0


# ----------------------------------------------------------------------------- 1. autodiff


def _param_fd(loss_fn, named, rng, n_tensors, per_tensor, h=1e-6):
    """Reverse-mode grads of ``loss_fn()`` vs central differences at sampled parameter entries."""
    grads = backward(loss_fn(), wrt=[p for _, p in named], accumulate=False)
    analytic, numeric = [], []
    for i in rng.choice(len(named), size=min(n_tensors, len(named)), replace=False):
        p = named[i][1]
        for j in rng.choice(p.size, size=min(per_tensor, p.size), replace=False):
            flat = p.data.reshape(-1)
            old = flat[j]
            vals = []
            for s in (h, -h):
                flat[j] = old + s
                with no_grad():
                    vals.append(loss_fn().item())
            flat[j] = old
            numeric.append((vals[0] - vals[1]) / (2 * h))
            analytic.append(grads[i].reshape(-1)[j])
    return rel_err(analytic, numeric)


def _input_jvp(fn, inputs, rng):
    """|jvp tangent - <grad, v>| / |<grad, v>| for a scalar ``fn`` of several input arrays."""
    leaves = [Tensor(a.copy(), requires_grad=True) for a in inputs]
    grads = backward(fn(*leaves), wrt=leaves, accumulate=False)
    dirs = [rng.standard_normal(a.shape) for a in inputs]
    dual = jvp(fn, tuple(Tensor(a) for a in inputs), tuple(dirs))
    inner = sum(float((g * d).sum()) for g, d in zip(grads, dirs))
    return abs(dual.tangent.item() - inner) / max(abs(inner), 1e-300)


def test_criterion_1_autodiff_soundness():
    t0 = time.perf_counter()
    worst_rev = worst_fwd = 0.0
    for table, base in ((OP_CASES, 0), (COMPOSITES, 100)):
        for name, (fn, gen) in table.items():
            for seed in range(5):
                rng = np.random.default_rng(base + seed)
                rev, fwd = check_op(fn, gen(rng), rng)
                worst_rev, worst_fwd = max(worst_rev, rev), max(worst_fwd, fwd)

    rng = np.random.default_rng(14)
    vcfg = VaeConfig(strides=(2, 3), channel_multipliers=(1, 2), base_channels=2, latent_dim=3, lambda_adv=0.5)
    vae, disc = Vae(vcfg, seed=6), StftDiscriminator([StftPlan(32), StftPlan(64)], channels=2, seed=3)
    for name, p in vae.named_parameters():
        if name.endswith("alpha"):
            p.data = rng.uniform(0.5, 2.0, p.shape)
    x = rng.standard_normal((2, 66)) * 0.5
    eps = rng.standard_normal((2, 11, 3))
    plans = [StftPlan(32), StftPlan(64)]

    def vae_loss(xx=None):
        eo = vae.encode(Tensor(x) if xx is None else xx)
        return vae_total_loss(Tensor(x) if xx is None else xx, vae.decode(reparameterize(eo, eps)), eo, disc,
                              vcfg, plans=plans).total

    vae_rev = _param_fd(vae_loss, vae.named_parameters(), rng, 12, 4)
    vae_fwd = _input_jvp(lambda xx: vae_loss(xx), [x], rng)

    dit = DiT(DiTConfig(layers=2, hidden=32, heads=2, cross_dim=8, time_dim=16, dropout=0.1, two_times=True), seed=5)
    dit.eval()
    z = rng.standard_normal((2, 3, 16))
    concat, cross = rng.standard_normal((2, 3, 32)), rng.standard_normal((2, 2, 8))
    t, r = np.array([0.3, 0.8]), np.array([0.1, 0.4])
    proj = rng.standard_normal(z.shape)

    def dit_loss(zz=None, tt=None):
        zz = Tensor(z) if zz is None else zz
        tt = Tensor(t) if tt is None else tt
        out = dit(zz, ConditionBundle(dit.global_vec([0, 3], tt, Tensor(r)), Tensor(concat), Tensor(cross)))
        return ops.sum(ops.mul(out, Tensor(proj)))

    dit_rev = _param_fd(dit_loss, dit.named_parameters(), rng, 24, 3)
    dit_fwd = _input_jvp(dit_loss, [z, t], rng)
    elapsed = time.perf_counter() - t0

    ok = (max(worst_rev, vae_rev, dit_rev) <= 1e-4 and max(worst_fwd, vae_fwd, dit_fwd) <= 1e-10 and elapsed < 300)
    record(1, ok, f"ops rev {worst_rev:.1e} fwd {worst_fwd:.1e}; VAE rev {vae_rev:.1e} fwd {vae_fwd:.1e}; "
                  f"DiT rev {dit_rev:.1e} fwd {dit_fwd:.1e}; {elapsed:.0f} s")
    assert ok


# ----------------------------------------------------------------------------- 2. architecture


def test_criterion_2_architecture_arithmetic():
    full = VaeConfig.full()
    small = Vae(VaeConfig.full(base_channels=1, latent_dim=4))
    with no_grad():
        frames = small.encode(np.zeros((1, 48000))).mu.shape[1]
    n = DiTConfig.full().param_count()
    ok = full.factor == 960 and full.frames_for(48000) == 50 and frames == 50 and abs(n - 1.7e9) / 1.7e9 <= 0.10
    record(2, ok, f"factor {full.factor}, 48000 samples -> {frames} frames, DiT {n / 1e9:.3f}B params")
    assert ok


# ----------------------------------------------------------------------------- 3. objective algebra


def _analytic_field(A, B):
    # u(z, t, r) = sin(t) z A + r B, so d/dt u along (v, 1) = sin(t) v A + cos(t) z A
    def field(z, t, r):
        tt = ops.reshape(t, (-1, 1, 1))
        rr = ops.reshape(r, (-1, 1, 1))
        return ops.add(ops.mul(ops.sin(tt), ops.matmul(z, Tensor(A))), ops.mul(rr, Tensor(B)))

    return field


def test_criterion_3_objective_algebra():
    t0 = time.perf_counter()
    rng = np.random.default_rng(3)
    s = NoiseSchedule()
    z0, eps = rng.standard_normal((4, 2, 3)), rng.standard_normal((4, 2, 3))
    t_idx = np.array([0, 7, 100, 199])
    got = v_target(z0, eps, t_idx, s)
    v_err = 0.0
    for i, ti in enumerate(t_idx):
        a = 1.0
        for b in np.linspace(5e-4, 0.1, 200)[: ti + 1]:
            a *= 1 - b
        v_err = max(v_err, np.max(np.abs(got[i] - (np.sqrt(a) * eps[i] - np.sqrt(1 - a) * z0[i]))))

    t = rng.uniform(0, 0.99, 4)
    zt, fm_tgt = fm_interpolate(z0, eps, t)
    tb = t[:, None, None]
    zt_ref = tb * z0 + (1 - tb) * eps
    fm_err = max(np.max(np.abs(zt.data - zt_ref)), np.max(np.abs(fm_tgt - (z0 - zt_ref) / (1 - tb))))

    A, B = rng.standard_normal((3, 3)), rng.standard_normal((2, 3))
    field = _analytic_field(A, B)
    r = t * rng.uniform(0, 1, 4)
    v = rng.standard_normal(z0.shape)
    zz = rng.standard_normal(z0.shape)
    mf = mf_target(field, zz, r, t, v).data
    dudt = np.sin(tb) * (v @ A) + np.cos(tb) * (zz @ A)
    mf_err = np.max(np.abs(mf - (v - (tb - r[:, None, None]) * dudt)))

    same = np.array_equal(mf_target(field, zz, t, t, v).data, v)
    zt_lin, fm_lin = fm_interpolate(z0, eps, t)
    coincide = np.max(np.abs(mf_target(field, zt_lin, t, t, LINEAR.velocity(z0, eps)).data - fm_lin))
    elapsed = time.perf_counter() - t0
    ok = max(v_err, fm_err, mf_err, coincide) <= 1e-12 and same and elapsed < 60
    record(3, ok, f"v {v_err:.1e}, FM {fm_err:.1e}, MF {mf_err:.1e}, r=t exact {same}, FM/MF {coincide:.1e}")
    assert ok


# ----------------------------------------------------------------------------- 4. forward kernel


def test_criterion_4_forward_kernel_statistics():
    s = NoiseSchedule()
    rng = np.random.default_rng(1)
    z0 = np.array([[[0.7, -1.3]]])
    n = 10_000
    worst = 0.0
    for t in (0, 20, 80, 150, 199):
        eps = rng.standard_normal((n, 1, 2))
        zt = ddpm_forward(np.broadcast_to(z0, (n, 1, 2)).copy(), np.full(n, t), eps, s).data[:, 0]
        var = 1 - s.alpha_bar[t]
        m_se = np.abs(zt.mean(0) - np.sqrt(s.alpha_bar[t]) * z0[0, 0]) / np.sqrt(var / n)
        v_se = np.abs(zt.var(0, ddof=1) - var) / (var * np.sqrt(2 / (n - 1)))
        worst = max(worst, m_se.max(), v_se.max())
    ok = worst <= 3.0
    record(4, ok, f"largest deviation {worst:.2f} standard errors over 5 timesteps")
    assert ok


# ----------------------------------------------------------------------------- 5. samplers


class Counting:
    def __init__(self, fn):
        self.fn, self.calls = fn, 0

    def __call__(self, z, t, r):
        self.calls += 1
        return Tensor(self.fn(z.data, t.data, None if r is None else r.data))


def test_criterion_5_sampler_correctness():
    rng = np.random.default_rng(5)
    eps = rng.standard_normal((2, 3, 4))
    c = rng.standard_normal((2, 3, 4))
    A = 0.3 * rng.standard_normal((4, 4))
    err = 0.0
    for n in (1, 4, 32):
        err = max(err, np.max(np.abs(fm_sample(Counting(lambda z, t, r: c), eps, n) - (eps + c))))
        M = np.linalg.matrix_power(np.eye(4) + A / n, n)
        err = max(err, np.max(np.abs(fm_sample(Counting(lambda z, t, r: z @ A.T), eps, n) - eps @ M.T)))

    once = Counting(lambda z, t, r: c)
    mf_ok = np.array_equal(mf_sample(once, eps), eps - c) and once.calls == 1

    W = rng.standard_normal((4, 4))
    smooth = lambda z, t, r: np.tanh(z @ W.T) + np.cos(3 * t)[:, None, None]  # noqa: E731
    e0 = eps[:1, :2]
    ref = fm_sample(Counting(smooth), e0, 4096)
    ratio = np.linalg.norm(fm_sample(Counting(smooth), e0, 16) - ref) / np.linalg.norm(
        fm_sample(Counting(smooth), e0, 32) - ref)
    ok = err <= 1e-12 and mf_ok and abs(ratio - 2) <= 0.5
    record(5, ok, f"closed-form error {err:.1e}, MF one evaluation {mf_ok}, Euler error ratio {ratio:.3f}")
    assert ok


# ----------------------------------------------------------------------------- 9. data pipeline


def test_criterion_9_data_pipeline_distributions():
    corpus = synth_corpus(CorpusConfig(n_speakers=4, utterances_per_speaker=3, n_event_classes=4,
                                       events_per_class=3, duration=0.25), 0)
    n = 10_000

    def draw(task, seed):
        rng = np.random.default_rng(seed)
        return [T.make_example(task, corpus, rng, 800) for _ in range(n)]

    def in_range(exs, key, lo, hi):
        vals = np.array([e.meta[key] for e in exs])
        measured = np.array([T.measured_snr(e) for e in exs])
        return bool(vals.min() >= lo and vals.max() <= hi and np.max(np.abs(measured - vals)) <= 1e-6)

    se, aec, tse, lq = draw("SE", 0), draw("AEC", 1), draw("TSE", 2), draw("LQSS", 3)
    reverb = np.mean([e.meta["reverb"] for e in se])
    aec_noise = np.mean([e.meta["noise"] for e in aec])
    no_dist = np.mean([not e.meta["distractor"] for e in tse])
    ranges = (in_range(se, "snr", -5, 20) and in_range(aec, "ser", -15, 15)
              and in_range([e for e in tse if e.meta["distractor"]], "snr", -15, 15) and in_range(lq, "snr", -15, 15))
    disjoint = all(e.meta["target_class"] not in e.meta["interferer_classes"] for e in lq)
    ok = (ranges and abs(reverb - 0.5) <= 0.02 and abs(aec_noise - 0.2) <= 0.02 and abs(no_dist - 0.05) <= 0.01
          and disjoint)
    record(9, ok, f"ranges exact {ranges}, reverb {reverb:.4f}, AEC noise {aec_noise:.4f}, "
                  f"no distractor {no_dist:.4f}, LQSS disjoint {disjoint}")
    assert ok


# ----------------------------------------------------------------------------- 6-8. toy training


@pytest.fixture(scope="module")
def toy():
    cfg = cli.load_config("toy")
    cfg["run_root"] = str(ROOT / "runs")
    return cfg, cli.run_dir(cfg)


def _steps_in(path: Path) -> int:
    return load_arrays(path)[0]["step"] if path.exists() else -1


def _ensure_vae(cfg, d) -> Path:
    path = d / f"vae_s{SEED}.ckpt"
    if _steps_in(path) < cfg["train_vae"]["max_steps"]:
        cli.do_train_vae(cfg, SEED, resume=True)
    return path


def _ensure_dit(cfg, d, kind, tasks, use_task_id=True, steps=None) -> Path:
    _ensure_vae(cfg, d)
    steps = steps or cfg["train_dit"]["max_steps"]
    path = d / cli.dit_name(ObjectiveKind.parse(kind), tasks, SEED, use_task_id)
    if _steps_in(path) < steps:
        cli.do_train_dit(cfg, SEED, kind, tasks, use_task_id, steps=steps, resume=True)
    return path


@pytest.mark.slow
def test_criterion_6_end_to_end_training(toy):
    cfg, d = toy
    vae_path = _ensure_vae(cfg, d)
    vae, _ = load_vae(vae_path)
    corpus = cli.corpus_for(cfg, SEED)
    rows = E.vae_reconstruction(vae, corpus, "test")
    speech = [r["si_sdr_db"] for r in rows if r["kind"] == "speech"]
    events = [r["si_sdr_db"] for r in rows if r["kind"] == "event"]
    vae_ok = np.mean(speech) >= 15.0
    record(6, vae_ok, f"VAE held-out speech {np.mean(speech):.2f} dB over {len(speech)} utterances "
                      f"(events, reported only: {np.mean(events):.2f} dB)")
    gains = {}
    for kind in ("DDPM_eps", "FM", "MF"):
        res = cli.do_eval(cfg, SEED, _ensure_dit(cfg, d, kind, ["SE"]), vae_path)
        gains[kind] = res["per_task"]["SE"]["si_sdr_improvement"]
    dit_ok = all(g >= 3.0 for g in gains.values())
    record(6, dit_ok, "SE improvement " + ", ".join(f"{k} {v:+.2f} dB" for k, v in gains.items()))
    assert vae_ok and dit_ok


ABLATION_STEPS = 4000


@pytest.mark.slow
def test_criterion_7_task_id_ablation(toy):
    cfg, d = toy
    vae_path = _ensure_vae(cfg, d)
    rates = {}
    for with_id in (True, False):
        ckpt = _ensure_dit(cfg, d, "FM", ["SE", "AEC"], with_id, ABLATION_STEPS)
        rates[with_id] = cli.do_eval(cfg, SEED, ckpt, vae_path)["confusion"]["off_diagonal"]
    ok = rates[False] > rates[True] and rates[True] < 0.10
    record(7, ok, f"off-diagonal rate with task ID {rates[True]:.3f}, without {rates[False]:.3f}")
    assert ok


@pytest.mark.slow
def test_criterion_8_efficiency_ordering(toy):
    cfg, d = toy
    for kind in ("DDPM_eps", "FM", "MF"):
        _ensure_dit(cfg, d, kind, ["SE"])
    rows = cli.do_bench(cfg, SEED)
    cell = {(r["objective"], r["steps"]): r for r in rows}
    rtf = {k: v["rtf"] for k, v in cell.items()}
    order = rtf[("MF", 1)] < rtf[("FM", 32)] < rtf[("DDPM_eps", 200)]
    scale = rtf[("DDPM_eps", 200)] / rtf[("DDPM_eps", 1)] / 200
    quality = cell[("DDPM_eps", 200)]["si_sdr_db"] >= cell[("DDPM_eps", 1)]["si_sdr_db"]
    ok = order and abs(scale - 1) <= 0.30 and quality
    record(8, ok, f"RTF MF-1 {rtf[('MF', 1)]:.4f} < FM-32 {rtf[('FM', 32)]:.4f} < DDPM-200 "
                  f"{rtf[('DDPM_eps', 200)]:.4f}: {order}; DDPM 200/1 ratio / 200 = {scale:.3f}; "
                  f"SI-SDR DDPM-200 {cell[('DDPM_eps', 200)]['si_sdr_db']:.2f} vs DDPM-1 "
                  f"{cell[('DDPM_eps', 1)]['si_sdr_db']:.2f} dB")
    assert ok


# ----------------------------------------------------------------------------- 10. reproducibility

TINY = {
    "tasks": ["SE"],
    "corpus": {"n_speakers": 3, "utterances_per_speaker": 3, "n_event_classes": 3, "events_per_class": 3,
               "duration": 0.1},
    "vae": {"strides": [2, 3], "channel_multipliers": [1, 2], "base_channels": 2, "latent_dim": 3,
            "disc_channels": 2},
    "dit": {"layers": 1, "heads": 2, "hidden": 8, "latent_dim": 3, "concat_extra_dim": 6, "cross_dim": 8,
            "time_dim": 8},
    "encoders": {"speaker_dim": 4, "query_dim": 4, "feature_dim": 6, "n_mels": 4, "n_speakers": 3, "n_classes": 3},
    "train_vae": {"batch_size": 2, "crop": 240, "max_steps": 5, "lr_vae": 1e-3},
    "train_dit": {"batch_size": 2, "clip": 120, "pool_size": 4, "max_steps": 5},
    "eval": {"n_test": 2, "bench_examples": 2, "repeats": 1},
}


def _complete_run(base: Path) -> dict:
    import yaml

    base.mkdir()
    conf = base / "tiny.yaml"
    conf.write_text(yaml.safe_dump(dict(TINY, run_root=str(base / "runs"))))
    c = ["--config", str(conf), "--seed", "3"]
    noisy = base / "noisy.wav"
    write_wav(noisy, Waveform(0.2 * np.sin(np.arange(240) * 0.21), 8000))
    assert cli.main(["train-vae", *c]) == 0
    for kind in ("DDPM_eps", "FM", "MF"):
        assert cli.main(["train-dit", *c, "--objective", kind]) == 0
        assert cli.main(["sample", "--config", str(conf), "--train-seed", "3", "--task", "SE", "--objective", kind,
                         "--in", str(noisy), "--out", str(base / f"out_{kind}.wav")]) == 0
    assert cli.main(["bench", *c]) == 0
    run = base / "runs" / cli.config_hash(cli.load_config(str(conf)))
    files = {p.name: p.read_bytes() for p in sorted(run.glob("*.ckpt"))}
    files.update({p.name: p.read_bytes() for p in sorted(base.glob("out_*.wav"))})
    return {"files": files, "report": E.numeric_cells(E.read_report(run / "bench_s3.jsonl"))}


def test_criterion_10_reproducibility(tmp_path):
    a, b = _complete_run(tmp_path / "a"), _complete_run(tmp_path / "b")
    same_files = a["files"].keys() == b["files"].keys() and all(a["files"][k] == b["files"][k] for k in a["files"])
    same_report = a["report"] == b["report"] and len(a["report"]) == 6
    rng = np.random.default_rng(10)
    x = np.concatenate([rng.uniform(-1.2, 1.2, 4000), [1.0, -1.0, 0.0, 1 / 32768, -1 / 32768]])
    write_wav(tmp_path / "rt.wav", Waveform(x, 8000))
    back = read_wav(tmp_path / "rt.wav").samples
    wav_ok = np.array_equal(back, quantize16(x))
    write_wav(tmp_path / "rt2.wav", Waveform(back, 8000))
    wav_ok = wav_ok and (tmp_path / "rt2.wav").read_bytes() == (tmp_path / "rt.wav").read_bytes()
    ok = same_files and same_report and wav_ok
    record(10, ok, f"{len(a['files'])} checkpoints/samples bitwise equal {same_files}, "
                   f"report numerics equal {same_report}, WAV round-trip exact {wav_ok}")
    assert ok
