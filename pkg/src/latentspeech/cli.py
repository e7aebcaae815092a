"""Command-line entry point: corpus synthesis, training, sampling, evaluation and benchmarking."""
from __future__ import annotations

import argparse
import copy
import dataclasses
import hashlib
import json
import os
import sys
from importlib import resources
from pathlib import Path

# single-threaded BLAS keeps timings stable; only effective if numpy is not loaded yet
os.environ.setdefault("OMP_NUM_THREADS", "1")
os.environ.setdefault("OPENBLAS_NUM_THREADS", "1")

import numpy as np  # noqa: E402
import yaml  # noqa: E402

from . import evaluation as E  # noqa: E402
from . import tasks as T  # noqa: E402
from .audio import AudioError, CorpusConfig, Waveform, read_wav, synth_corpus, write_corpus, write_wav  # noqa: E402
from .dit import DiTConfig  # noqa: E402
from .objectives import NoiseSchedule, ObjectiveError, ObjectiveKind  # noqa: E402
from .tensor import TensorError  # noqa: E402
from .train import (  # noqa: E402
    CheckpointError,
    DiTTrainer,
    TrainConfig,
    TrainingError,
    VaeTrainer,
    load_task_model,
    load_vae,
)
from .vae import VaeConfig  # noqa: E402

SECTIONS = {
    "corpus": CorpusConfig,
    "vae": VaeConfig,
    "dit": DiTConfig,
    "train_vae": TrainConfig,
    "train_dit": TrainConfig,
    "encoders": T.EncoderDims,
}
EXTRA = {"run_root": "runs", "tasks": ["SE"], "eval": {"n_test": 32, "bench_examples": 16, "repeats": 5}}


class ConfigError(ValueError):
    pass


# ----------------------------------------------------------------------------- configuration


def load_config(name_or_path: str) -> dict:
    p = Path(name_or_path)
    if p.exists():
        text = p.read_text()
    else:
        try:
            text = resources.files("latentspeech.presets").joinpath(f"{name_or_path}.yaml").read_text()
        except FileNotFoundError:
            raise ConfigError(f"no config file or preset named {name_or_path!r}") from None
    try:
        raw = yaml.safe_load(text) or {}
    except yaml.YAMLError as e:
        raise ConfigError(f"malformed config: {e}") from None
    if not isinstance(raw, dict):
        raise ConfigError("config must be a mapping of sections")
    return resolve_config(raw)


def resolve_config(raw: dict) -> dict:
    unknown = set(raw) - set(SECTIONS) - set(EXTRA)
    if unknown:
        raise ConfigError(f"unknown config sections {sorted(unknown)}")
    cfg = copy.deepcopy(EXTRA)
    for key in EXTRA:
        if key in raw:
            cfg[key] = raw[key] if key != "eval" else {**EXTRA["eval"], **raw[key]}
    for name, cls in SECTIONS.items():
        body = raw.get(name) or {}
        if not isinstance(body, dict):
            raise ConfigError(f"section {name} must be a mapping")
        fields = {f.name for f in dataclasses.fields(cls)}
        bad = set(body) - fields
        if bad:
            raise ConfigError(f"unknown keys in {name}: {sorted(bad)}")
        try:
            obj = cls(**body)
        except (TypeError, ValueError, TrainingError) as e:
            raise ConfigError(f"invalid {name} section: {e}") from None
        cfg[name] = json.loads(json.dumps(dataclasses.asdict(obj)))
    T.check_tasks(cfg["tasks"])
    return cfg


def apply_overrides(raw_cfg: dict, sets: list[str]) -> dict:
    cfg = copy.deepcopy(raw_cfg)
    for item in sets or []:
        if "=" not in item or "." not in item.split("=", 1)[0]:
            raise ConfigError(f"override must look like section.key=value, got {item!r}")
        key, value = item.split("=", 1)
        section, field = key.split(".", 1)
        if section not in cfg or not isinstance(cfg[section], dict):
            raise ConfigError(f"unknown config section {section!r}")
        cfg[section][field] = yaml.safe_load(value)
    raw = {k: v for k, v in cfg.items()}
    return resolve_config(raw)


def config_hash(cfg: dict) -> str:
    body = {k: v for k, v in cfg.items() if k != "run_root"}
    return hashlib.sha256(json.dumps(body, sort_keys=True).encode()).hexdigest()[:12]


def build(cls, body: dict):
    body = dict(body)
    for k, v in body.items():
        if isinstance(v, list):
            body[k] = tuple(v)
    return cls(**body)


def run_dir(cfg: dict) -> Path:
    d = Path(cfg["run_root"]) / config_hash(cfg)
    d.mkdir(parents=True, exist_ok=True)
    (d / "config.json").write_text(json.dumps(cfg, indent=2, sort_keys=True) + "\n")
    return d


def objective_config(cfg: dict, kind: ObjectiveKind, use_task_id: bool = True) -> DiTConfig:
    return build(DiTConfig, {**cfg["dit"], "two_times": kind is ObjectiveKind.MF, "use_task_id": use_task_id})


def dit_name(kind: ObjectiveKind, tasks, seed: int, use_task_id: bool = True) -> str:
    tag = "" if use_task_id else "_noid"
    return f"dit_{kind.value}_{'+'.join(tasks)}{tag}_s{seed}.ckpt"


# ----------------------------------------------------------------------------- pipeline steps


def corpus_for(cfg: dict, seed: int):
    return synth_corpus(build(CorpusConfig, cfg["corpus"]), seed)


def do_train_vae(cfg: dict, seed: int, steps: int | None = None, out: Path | None = None, resume: bool = False) -> Path:
    out = out or run_dir(cfg)
    ckpt, log = out / f"vae_s{seed}.ckpt", out / f"vae_s{seed}_log.jsonl"
    corpus = corpus_for(cfg, seed)
    tcfg = build(TrainConfig, {**cfg["train_vae"], "seed": seed})
    if resume and ckpt.exists():
        tr = VaeTrainer.resume(ckpt, corpus)
    else:
        tr = VaeTrainer(build(VaeConfig, cfg["vae"]), tcfg, corpus)
        log.unlink(missing_ok=True)
    remaining = (steps if steps is not None else tcfg.max_steps) - tr.step_count
    tr.run(max(0, remaining), log, ckpt)
    return ckpt


def do_train_dit(cfg: dict, seed: int, kind, tasks=None, use_task_id: bool = True, steps: int | None = None,
                 vae_path: Path | None = None, out: Path | None = None, resume: bool = False) -> Path:
    kind = ObjectiveKind.parse(kind)
    tasks = T.check_tasks(tasks or cfg["tasks"])
    out = out or run_dir(cfg)
    vae_path = vae_path or out / f"vae_s{seed}.ckpt"
    if not Path(vae_path).exists():
        raise ConfigError(f"VAE checkpoint {vae_path} not found; run train-vae first")
    vae, vmeta = load_vae(vae_path)
    corpus = corpus_for(cfg, seed)
    name = dit_name(kind, tasks, seed, use_task_id)
    ckpt, log = out / name, out / name.replace(".ckpt", "_log.jsonl")
    tcfg = build(TrainConfig, {**cfg["train_dit"], "seed": seed})
    if resume and ckpt.exists():
        tr = DiTTrainer.resume(ckpt, vae, corpus, kind=kind, schedule=NoiseSchedule())
    else:
        dims = build(T.EncoderDims, cfg["encoders"])
        tr = DiTTrainer(vae, vmeta["latent_scale"], objective_config(cfg, kind, use_task_id), tcfg, kind, tasks,
                        corpus, dims)
        log.unlink(missing_ok=True)
    remaining = (steps if steps is not None else tcfg.max_steps) - tr.step_count
    tr.run(max(0, remaining), log, ckpt)
    return ckpt


def do_eval(cfg: dict, seed: int, ckpt: Path, vae_path: Path, n_test: int | None = None) -> dict:
    vae, _ = load_vae(vae_path)
    model, meta = load_task_model(ckpt)
    corpus = corpus_for(cfg, seed)
    n = cfg["train_dit"]["clip"]
    n_test = n_test or cfg["eval"]["n_test"]
    out = {"objective": meta["objective"], "tasks": meta["tasks"], "seed": seed, "config_hash": config_hash(cfg)}
    sets = {t: E.held_out_examples(t, corpus, n_test, n, seed) for t in meta["tasks"]}
    out["per_task"] = {t: E.improvement_table(model, meta, vae, sets[t], seed=seed) for t in meta["tasks"]}
    conf = E.task_confusion_eval(model, meta, vae, sets, seed=seed)
    out["confusion"] = {"matrix": conf.matrix.tolist(), "rates": conf.rates, "off_diagonal": conf.off_diagonal_rate}
    return out


def do_bench(cfg: dict, seed: int, out: Path | None = None, repeats: int | None = None,
             n_examples: int | None = None, measure_memory: bool = True) -> list[dict]:
    out = out or run_dir(cfg)
    vae_path = out / f"vae_s{seed}.ckpt"
    models = {}
    for kind in E.BENCH_GRID:
        path = out / dit_name(kind, ["SE"], seed)
        if not path.exists():
            raise ConfigError(f"missing {path.name}; train-dit --objective {kind.value} --tasks SE first")
        models[kind.value] = load_task_model(path)
    vae, _ = load_vae(vae_path)
    corpus = corpus_for(cfg, seed)
    exs = E.held_out_examples("SE", corpus, n_examples or cfg["eval"]["bench_examples"], cfg["train_dit"]["clip"], seed)
    rows = E.bench_steps(models, vae, exs, seed, repeats or cfg["eval"]["repeats"], config_hash=config_hash(cfg),
                         measure_memory=measure_memory)
    E.validate_report(rows, E.BENCH_GRID)
    E.write_report(rows, out / f"bench_s{seed}.jsonl", out / f"bench_s{seed}.txt")
    return rows


def do_sample(ckpt: Path, vae_path: Path, task: str, inputs: dict, payload: dict, steps, seed: int) -> np.ndarray:
    vae, _ = load_vae(vae_path)
    model, meta = load_task_model(ckpt)
    if task not in meta["tasks"]:
        raise ConfigError(f"checkpoint was trained on {meta['tasks']}, not {task}")
    spec = T.get_spec(task)
    missing = [r for r in spec.concat_sources if r not in inputs]
    if missing:
        raise ConfigError(f"{task} needs input roles {list(spec.concat_sources)}; missing {missing}")
    first = inputs[spec.concat_sources[0]]
    lengths = {len(w) for w in inputs.values()}
    if len(lengths) != 1:
        raise ConfigError("all input files must have the same length")
    sr = {w.sample_rate for w in inputs.values()}
    if sr != {vae.cfg.sample_rate}:
        raise ConfigError(f"inputs must be sampled at {vae.cfg.sample_rate} Hz, got {sorted(sr)}")
    n = len(first)
    padded = vae.cfg.frames_for(n) * vae.cfg.factor
    padded_inputs = {r: Waveform(np.pad(w.samples, (0, padded - n)), w.sample_rate) for r, w in inputs.items()}
    ex = T.TrainingExample(task, padded_inputs[spec.concat_sources[0]], padded_inputs, payload)
    return E.enhance(model, meta, vae, [ex], steps, seed).waveforms[0]


# ----------------------------------------------------------------------------- argument parsing


def parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="latentspeech", description="Latent generative speech front-end toolkit")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, seed_required: bool):
        sp.add_argument("--config", default="toy", help="preset name or YAML file")
        sp.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE", help="config override")
        sp.add_argument("--seed", type=int, required=seed_required, default=None if seed_required else 0)

    sp = sub.add_parser("make-corpus", help="synthesize the toy corpus and write WAVs plus a manifest")
    common(sp, False)
    sp.add_argument("--out", type=Path)

    sp = sub.add_parser("train-vae", help="pretrain the waveform VAE")
    common(sp, True)
    sp.add_argument("--steps", type=int)
    sp.add_argument("--resume", action="store_true")

    sp = sub.add_parser("train-dit", help="train the latent DiT with one objective on a frozen VAE")
    common(sp, True)
    sp.add_argument("--objective", required=True)
    sp.add_argument("--tasks", help="comma-separated task list (default from config)")
    sp.add_argument("--no-task-id", action="store_true", help="train without the task embedding")
    sp.add_argument("--steps", type=int)
    sp.add_argument("--vae", type=Path)
    sp.add_argument("--resume", action="store_true")

    sp = sub.add_parser("sample", help="process one input with a trained checkpoint")
    common(sp, False)
    sp.add_argument("--task", required=True)
    sp.add_argument("--objective", required=True)
    sp.add_argument("--in", dest="inp", type=Path, required=True, help="noisy / mixture / mic WAV")
    sp.add_argument("--far", type=Path, help="far-end reference WAV (AEC)")
    sp.add_argument("--speaker", type=int, help="enrolled speaker id (TSE)")
    sp.add_argument("--query", type=int, help="event class id (LQSS)")
    sp.add_argument("--steps", type=int)
    sp.add_argument("--ckpt", type=Path)
    sp.add_argument("--vae", type=Path)
    sp.add_argument("--train-seed", type=int, default=0, help="seed of the training run to load")
    sp.add_argument("--out", type=Path)

    sp = sub.add_parser("eval", help="held-out metrics and task confusion for one checkpoint")
    common(sp, True)
    sp.add_argument("--objective", required=True)
    sp.add_argument("--tasks")
    sp.add_argument("--no-task-id", action="store_true")
    sp.add_argument("--n-test", type=int)

    sp = sub.add_parser("bench", help="quality / RTF / memory over the step grid")
    common(sp, True)
    sp.add_argument("--repeats", type=int)
    sp.add_argument("--examples", type=int)
    return p


def run(args) -> int:
    cfg = apply_overrides(load_config(args.config), args.set)
    if args.command == "make-corpus":
        out = args.out or run_dir(cfg) / f"corpus_s{args.seed}"
        manifest = write_corpus(corpus_for(cfg, args.seed), out)
        print(manifest)
    elif args.command == "train-vae":
        print(do_train_vae(cfg, args.seed, args.steps, resume=args.resume))
    elif args.command == "train-dit":
        tasks = args.tasks.split(",") if args.tasks else None
        print(do_train_dit(cfg, args.seed, args.objective, tasks, not args.no_task_id, args.steps, args.vae,
                           resume=args.resume))
    elif args.command == "sample":
        kind = ObjectiveKind.parse(args.objective)
        d = run_dir(cfg)
        ckpt = args.ckpt or d / dit_name(kind, cfg["tasks"], args.train_seed)
        vae_path = args.vae or d / f"vae_s{args.train_seed}.ckpt"
        spec = T.get_spec(args.task)
        inputs = {spec.concat_sources[0]: read_wav(args.inp)}
        if "far" in spec.concat_sources:
            if args.far is None:
                raise ConfigError("AEC needs --far")
            inputs["far"] = read_wav(args.far)
        payload = {}
        if spec.cross_source == "speaker":
            if args.speaker is None:
                raise ConfigError("TSE needs --speaker")
            payload["speaker"] = args.speaker
        if spec.cross_source == "query":
            if args.query is None:
                raise ConfigError("LQSS needs --query")
            payload["query"] = args.query
        wav = do_sample(ckpt, vae_path, args.task, inputs, payload, args.steps, args.seed)
        out = args.out or d / f"sample_{args.task}_{kind.value}_s{args.seed}.wav"
        write_wav(out, Waveform(np.clip(wav, -1.0, 1.0), inputs[spec.concat_sources[0]].sample_rate))
        print(out)
    elif args.command == "eval":
        kind = ObjectiveKind.parse(args.objective)
        tasks = args.tasks.split(",") if args.tasks else cfg["tasks"]
        d = run_dir(cfg)
        res = do_eval(cfg, args.seed, d / dit_name(kind, tasks, args.seed, not args.no_task_id),
                      d / f"vae_s{args.seed}.ckpt", args.n_test)
        path = d / dit_name(kind, tasks, args.seed, not args.no_task_id).replace(".ckpt", "_eval.json")
        path.write_text(json.dumps(res, indent=2, sort_keys=True) + "\n")
        print(json.dumps(res, sort_keys=True))
    elif args.command == "bench":
        rows = do_bench(cfg, args.seed, repeats=args.repeats, n_examples=args.examples)
        print(E.format_table(rows))
    return 0


def main(argv=None) -> int:
    args = parser().parse_args(argv)
    try:
        return run(args)
    except (ConfigError, CheckpointError, TrainingError, ObjectiveError, T.TaskError, AudioError,
            TensorError, E.ReportError) as e:
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 2
    except FileNotFoundError as e:
        print(f"error: file not found: {e.filename}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
