import json

import numpy as np
import pytest

from latentspeech import tasks as T
from latentspeech.audio import CorpusConfig, synth_corpus
from latentspeech.dit import DiTConfig
from latentspeech.objectives import NoiseSchedule
from latentspeech.tensor import Tensor
from latentspeech.train import (
    AdamState,
    CheckpointError,
    DiTTrainer,
    TrainConfig,
    TrainingError,
    VaeTrainer,
    adamw_step,
    inverse_lr,
    load_arrays,
    load_task_model,
    load_vae,
    params_hash,
    save_arrays,
)
from latentspeech.vae import VaeConfig

TINY_VAE = VaeConfig(strides=(2, 3), channel_multipliers=(1, 2), base_channels=2, latent_dim=3, lambda_adv=0.1,
                     disc_channels=2)
TINY_DIMS = T.EncoderDims(speaker_dim=4, query_dim=4, feature_dim=6, n_mels=4, n_speakers=3, n_classes=3)


def tiny_dit(two_times=False):
    return DiTConfig(layers=1, heads=2, hidden=8, latent_dim=3, concat_extra_dim=6, cross_dim=8, time_dim=8,
                     two_times=two_times)


@pytest.fixture(scope="module")
def corpus():
    return synth_corpus(CorpusConfig(n_speakers=3, utterances_per_speaker=3, n_event_classes=3, events_per_class=3,
                                     duration=0.1), 0)


def tcfg(**kw):
    base = dict(batch_size=2, crop=240, clip=120, pool_size=4, lr_vae=1e-3, lr_dit=1e-3, log_every=1)
    base.update(kw)
    return TrainConfig(**base)


def test_inverse_lr():
    assert inverse_lr(0, 0.1, 50.0) == 0.1
    assert inverse_lr(50, 0.1, 50.0) == 0.05
    seq = np.array([inverse_lr(s, 1e-3, 10_000) for s in range(100_000)])
    assert np.all(np.diff(seq) < 0)
    with pytest.raises(ValueError):
        inverse_lr(-1, 0.1, 1.0)


def test_adamw_zero_grad_and_first_step():
    p = {"w": Tensor(np.array([1.0, -2.0, 3.0]), requires_grad=True)}
    adamw_step(p, {"w": np.zeros(3)}, AdamState(), 0.1, 0.0)
    assert np.array_equal(p["w"].data, [1.0, -2.0, 3.0])
    g = np.array([0.5, -4.0, 1e-3])
    lr, wd = 0.01, 0.1
    p = {"w": Tensor(np.array([1.0, -2.0, 3.0]), requires_grad=True)}
    adamw_step(p, {"w": g}, AdamState(), lr, wd)
    want = np.array([1.0, -2.0, 3.0]) * (1 - lr * wd) - lr * g / (np.abs(g) + 1e-8)
    assert np.max(np.abs(p["w"].data - want)) <= 1e-15


def test_adamw_decreases_quadratic_and_aborts_on_nan():
    A = np.diag([1.0, 10.0, 0.1])
    p = {"x": Tensor(np.array([1.0, 1.0, 1.0]), requires_grad=True)}
    st, losses = AdamState(), []
    for _ in range(10):
        x = p["x"].data
        losses.append(0.5 * x @ A @ x)
        adamw_step(p, {"x": A @ x}, st, 0.05, 0.0)
    assert np.all(np.diff(losses) < 0)
    with pytest.raises(TrainingError, match="non-finite"):
        adamw_step(p, {"x": np.array([np.nan, 0.0, 0.0])}, st, 0.05, 0.0)


def test_train_config_validation():
    with pytest.raises(TrainingError):
        TrainConfig(lr_vae=0.0)
    with pytest.raises(TrainingError):
        TrainConfig(batch_size=0)


def test_checkpoint_container(tmp_path):
    arrays = {"a": np.arange(6.0).reshape(2, 3), "b": np.array(3.5), "c": np.random.default_rng(0).standard_normal(7)}
    path = tmp_path / "x.ckpt"
    save_arrays(path, {"kind": "test", "n": 1}, arrays)
    meta, back = load_arrays(path)
    assert meta == {"kind": "test", "n": 1}
    assert all(np.array_equal(arrays[k], back[k]) and arrays[k].shape == back[k].shape for k in arrays)
    assert not list(tmp_path.glob("*.tmp"))
    raw = path.read_bytes()
    (tmp_path / "bad").write_bytes(b"XXXXXXXX" + raw[8:])
    with pytest.raises(CheckpointError):
        load_arrays(tmp_path / "bad")
    (tmp_path / "short").write_bytes(raw[:-8])
    with pytest.raises(CheckpointError):
        load_arrays(tmp_path / "short")


def test_vae_trainer_resume_and_determinism(corpus, tmp_path):
    cfg = tcfg()
    a = VaeTrainer(TINY_VAE, cfg, corpus)
    a.run(3)
    a.save(tmp_path / "v.ckpt")
    tail_a = [r["loss"] for r in a.run(3)]
    b = VaeTrainer.resume(tmp_path / "v.ckpt", corpus)
    assert b.step_count == 3
    tail_b = [r["loss"] for r in b.run(3)]
    assert tail_a == tail_b
    assert params_hash(a.vae) == params_hash(b.vae) and params_hash(a.disc) == params_hash(b.disc)
    c = VaeTrainer(TINY_VAE, cfg, corpus)
    c.run(6)
    c.save(tmp_path / "c.ckpt")
    a.save(tmp_path / "a.ckpt")
    assert (tmp_path / "c.ckpt").read_bytes() == (tmp_path / "a.ckpt").read_bytes()
    vae, meta = load_vae(tmp_path / "c.ckpt")
    assert params_hash(vae) == params_hash(c.vae) and meta["latent_scale"] > 0


def test_vae_generator_and_discriminator_updates_are_isolated(corpus):
    tr = VaeTrainer(TINY_VAE, tcfg(), corpus)
    g0, d0 = params_hash(tr.vae), params_hash(tr.disc)
    rng = np.random.default_rng(0)
    from latentspeech.train import grads_for
    from latentspeech.vae import reparameterize, vae_total_loss

    x = tr.batch(rng)
    eo = tr.vae.encode(Tensor(x))
    loss = vae_total_loss(x, tr.vae.decode(reparameterize(eo, rng.standard_normal(eo.mu.shape))), eo, tr.disc,
                          tr.vcfg, tr.plans)
    dp = dict(tr.disc.named_parameters())
    adamw_step(dp, grads_for(loss.disc, dp), AdamState(), 1e-2, 0.0)
    assert params_hash(tr.vae) == g0 and params_hash(tr.disc) != d0
    gp = dict(tr.vae.named_parameters())
    d1 = params_hash(tr.disc)
    adamw_step(gp, grads_for(loss.total, gp), AdamState(), 1e-2, 0.0)
    assert params_hash(tr.disc) == d1 and params_hash(tr.vae) != g0


def test_vae_log_records(corpus, tmp_path):
    tr = VaeTrainer(TINY_VAE, tcfg(), corpus)
    tr.run(2, log_path=tmp_path / "log.jsonl")
    recs = [json.loads(x) for x in (tmp_path / "log.jsonl").read_text().splitlines()]
    assert [r["step"] for r in recs] == [1, 2]
    assert all({"step", "task", "objective", "loss", "lr"} <= set(r) for r in recs)


@pytest.fixture(scope="module")
def tiny_vae(corpus, tmp_path_factory):
    tr = VaeTrainer(TINY_VAE, tcfg(), corpus)
    tr.run(2)
    path = tmp_path_factory.mktemp("vae") / "vae.ckpt"
    tr.save(path)
    return load_vae(path)


def make_dit(tiny_vae, corpus, kind="FM", tasks=("SE", "AEC"), **kw):
    vae, meta = tiny_vae
    return DiTTrainer(vae, meta["latent_scale"], tiny_dit(kind == "MF"), tcfg(**kw), kind, list(tasks), corpus,
                      TINY_DIMS)


def test_dit_keeps_vae_frozen(tiny_vae, corpus):
    vae = tiny_vae[0]
    before = params_hash(vae)
    tr = make_dit(tiny_vae, corpus)
    h0 = params_hash(tr.model.dit)
    tr.run(100)
    assert params_hash(vae) == before
    assert params_hash(tr.model.dit) != h0
    orig = vae.decoder.conv_out.b.data.copy()
    vae.decoder.conv_out.b.data = orig + 1.0
    try:
        with pytest.raises(TrainingError, match="VAE"):
            tr.step()
    finally:
        vae.decoder.conv_out.b.data = orig


@pytest.mark.parametrize("kind", ["DDPM_eps", "FM", "MF"])
def test_dit_resume_matches_uninterrupted(tiny_vae, corpus, tmp_path, kind):
    a = make_dit(tiny_vae, corpus, kind)
    a.run(3)
    a.save(tmp_path / "d.ckpt")
    tail_a = [r["loss"] for r in a.run(10)]
    b = DiTTrainer.resume(tmp_path / "d.ckpt", tiny_vae[0], corpus)
    tail_b = [r["loss"] for r in b.run(10)]
    assert tail_a == tail_b
    model, meta = load_task_model(tmp_path / "d.ckpt")
    assert meta["objective"] == kind and meta["tasks"] == ["SE", "AEC"]


def test_dit_resume_mismatch_errors(tiny_vae, corpus, tmp_path):
    tr = make_dit(tiny_vae, corpus, "DDPM_eps")
    tr.save(tmp_path / "d.ckpt")
    with pytest.raises(CheckpointError, match="trained with"):
        DiTTrainer.resume(tmp_path / "d.ckpt", tiny_vae[0], corpus, kind="FM")
    with pytest.raises(CheckpointError, match="schedule"):
        DiTTrainer.resume(tmp_path / "d.ckpt", tiny_vae[0], corpus, schedule=NoiseSchedule(T=100))
    with pytest.raises(TrainingError, match="two-time"):
        DiTTrainer(tiny_vae[0], 1.0, tiny_dit(False), tcfg(), "MF", ["SE"], corpus, TINY_DIMS)


def test_dit_loss_log_and_balanced_groups(tiny_vae, corpus, tmp_path):
    tr = make_dit(tiny_vae, corpus, "FM", batch_size=3)
    recs = tr.run(2, log_path=tmp_path / "l.jsonl")
    assert all(set(r["per_task"]) == {"SE", "AEC"} for r in recs)
    lines = [json.loads(x) for x in (tmp_path / "l.jsonl").read_text().splitlines()]
    assert {(x["step"], x["task"]) for x in lines} == {(1, "SE"), (1, "AEC"), (2, "SE"), (2, "AEC")}
    assert all(x["objective"] == "FM" for x in lines)


def test_clip_grad_norm():
    from latentspeech.train import clip_grad_norm

    g = {"a": np.array([3.0, 0.0]), "b": np.array([[4.0]])}
    assert clip_grad_norm(g, 10.0) == 5.0 and g["a"][0] == 3.0
    assert clip_grad_norm(g, 1.0) == 5.0
    assert abs(np.sqrt(np.sum(g["a"] ** 2) + np.sum(g["b"] ** 2)) - 1.0) <= 1e-15
    assert abs(clip_grad_norm(g, 0.0) - 1.0) <= 1e-15  # 0 disables clipping
