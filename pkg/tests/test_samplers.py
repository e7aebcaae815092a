import numpy as np
import pytest

from latentspeech.objectives import NoiseSchedule, ObjectiveError, ObjectiveKind
from latentspeech.samplers import SamplerConfig, ddpm_sample, fm_sample, generate_waveform, mf_sample, sample_latents
from latentspeech.tensor import Tensor
from latentspeech.vae import Vae, VaeConfig


class Counting:
    def __init__(self, fn):
        self.fn, self.calls = fn, 0

    def __call__(self, z, t, r):
        self.calls += 1
        return Tensor(self.fn(z.data, t.data, None if r is None else r.data))


def test_ddpm_zero_predictor_closed_form():
    s = NoiseSchedule()
    shape = (2, 3, 4)
    eps = np.random.default_rng(0).standard_normal(shape)
    for steps in (200, 32, 1):
        field = Counting(lambda z, t, r: np.zeros_like(z))
        got = ddpm_sample(field, eps, s, steps, np.random.default_rng(1))
        assert field.calls == steps
        # with eps_hat = 0 every step divides by sqrt(1 - beta_i); noise enters after each step but the last
        rng = np.random.default_rng(1)
        taus = s.timesteps(steps)
        ab = np.concatenate([[1.0], s.alpha_bar[taus]])
        z = eps.copy()
        for i in range(len(taus), 0, -1):
            z = z * np.sqrt(ab[i - 1] / ab[i])
            if i > 1:
                z = z + np.sqrt(1 - ab[i] / ab[i - 1]) * rng.standard_normal(shape)
        assert np.max(np.abs(got - z)) <= 1e-12 * np.max(np.abs(z))


def test_ddpm_recovers_point_mass_with_exact_predictors():
    s = NoiseSchedule()
    rng = np.random.default_rng(2)
    z0 = rng.standard_normal((1, 4, 3))
    ab_of = lambda t: s.alpha_bar[int(round(t[0] * s.T))]  # noqa: E731

    def eps_oracle(z, t, r):
        a = ab_of(t)
        return (z - np.sqrt(a) * z0) / np.sqrt(1 - a)

    def v_oracle(z, t, r):
        a = ab_of(t)
        return np.sqrt(a) * eps_oracle(z, t, r) - np.sqrt(1 - a) * z0

    eps = rng.standard_normal(z0.shape)
    for kind, fn in ((ObjectiveKind.DDPM_EPS, eps_oracle), (ObjectiveKind.DDPM_V, v_oracle)):
        for steps in (200, 7, 1):
            out = ddpm_sample(Counting(fn), eps, s, steps, np.random.default_rng(3), kind)
            assert np.max(np.abs(out - z0)) <= 1e-9


def test_ddpm_determinism_and_one_step():
    s = NoiseSchedule()
    field = Counting(lambda z, t, r: 0.1 * z)
    eps = np.random.default_rng(4).standard_normal((1, 2, 2))
    a = ddpm_sample(field, eps, s, 200, np.random.default_rng(9))
    b = ddpm_sample(field, eps, s, 200, np.random.default_rng(9))
    assert np.array_equal(a, b)
    assert np.all(np.isfinite(ddpm_sample(field, eps, s, 1, np.random.default_rng(9))))
    with pytest.raises(ObjectiveError):
        ddpm_sample(field, eps, s, 201, np.random.default_rng(9))


def test_fm_constant_field_exact():
    eps = np.random.default_rng(5).standard_normal((2, 3, 4))
    c = np.random.default_rng(6).standard_normal((2, 3, 4))
    for n in (1, 3, 32):
        field = Counting(lambda z, t, r: c)
        assert np.max(np.abs(fm_sample(field, eps, n) - (eps + c))) <= 1e-12
        assert field.calls == n


def test_fm_linear_field_matrix_power():
    rng = np.random.default_rng(7)
    A = 0.3 * rng.standard_normal((4, 4))
    eps = rng.standard_normal((2, 3, 4))
    for n in (1, 5, 16):
        got = fm_sample(Counting(lambda z, t, r: z @ A.T), eps, n)
        M = np.linalg.matrix_power(np.eye(4) + A / n, n)
        assert np.max(np.abs(got - eps @ M.T)) <= 1e-12


def test_fm_first_order_convergence_on_smooth_field():
    rng = np.random.default_rng(8)
    W = rng.standard_normal((4, 4))
    eps = rng.standard_normal((1, 2, 4))
    field = lambda z, t, r: np.tanh(z @ W.T) + np.cos(3 * t)[:, None, None]  # noqa: E731
    ref = fm_sample(Counting(field), eps, 4096)
    e16 = np.linalg.norm(fm_sample(Counting(field), eps, 16) - ref)
    e32 = np.linalg.norm(fm_sample(Counting(field), eps, 32) - ref)
    assert 1.5 <= e16 / e32 <= 2.5


def test_fm_noise_free_after_initial_draw():
    field = Counting(lambda z, t, r: np.sin(z) * (1 + t[:, None, None]))
    eps = np.random.default_rng(9).standard_normal((2, 2, 2))
    outs = [fm_sample(field, eps, 8) for _ in range(3)]
    assert all(np.array_equal(outs[0], o) for o in outs[1:])


def test_mf_single_evaluation_and_oracles():
    eps = np.random.default_rng(10).standard_normal((2, 3, 2))
    field = Counting(lambda z, t, r: np.zeros_like(z))
    assert np.array_equal(mf_sample(field, eps), eps) and field.calls == 1
    c = np.random.default_rng(11).standard_normal((2, 3, 2))
    seen = {}

    def const(z, t, r):
        seen["t"], seen["r"] = t.copy(), r.copy()
        return c

    field = Counting(const)
    # average velocity of the constant field from the noise end (t=1) to the data end (r=0)
    assert np.array_equal(mf_sample(field, eps), eps - c) and field.calls == 1
    assert np.all(seen["t"] == 1.0) and np.all(seen["r"] == 0.0)


def test_sampler_config_validation():
    assert SamplerConfig("DDPM_eps").steps == 200 and SamplerConfig("FM").steps == 32 and SamplerConfig("MF").steps == 1
    with pytest.raises(ObjectiveError):
        SamplerConfig("MF", steps=2)
    with pytest.raises(ObjectiveError):
        SamplerConfig("FM", steps=0)


def test_sample_latents_determinism():
    field = Counting(lambda z, t, r: -0.5 * z)
    for kind in ("DDPM_eps", "FM", "MF"):
        a = sample_latents(field, (1, 3, 2), SamplerConfig(kind, seed=3))
        b = sample_latents(field, (1, 3, 2), SamplerConfig(kind, seed=3))
        assert np.array_equal(a, b)


def test_generate_waveform_duration_and_determinism():
    vae = Vae(VaeConfig(strides=(2, 3), channel_multipliers=(1, 2), base_channels=2, latent_dim=3, sample_rate=600))
    field = Counting(lambda z, t, r: -z)
    g1 = generate_waveform(field, vae, (1, 10, 3), SamplerConfig("FM", steps=4, seed=1))
    g2 = generate_waveform(field, vae, (1, 10, 3), SamplerConfig("FM", steps=4, seed=1))
    assert g1.waveform.shape == (1, 60) and g1.audio_seconds == 60 / 600
    assert np.array_equal(g1.waveform, g2.waveform)
    assert g1.rtf > 0 and g1.rtf_e2e >= g1.rtf
