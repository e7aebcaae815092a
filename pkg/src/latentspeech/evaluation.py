"""Enhancement with trained checkpoints, the task-confusion protocol, and the steps/RTF benchmark."""
from __future__ import annotations

import json
import statistics
import time
import tracemalloc
from dataclasses import dataclass, field

import numpy as np

from . import tasks as T
from .metrics import lsd, si_sdr
from .objectives import NoiseSchedule, ObjectiveKind
from .samplers import SamplerConfig, sample_latents
from .tensor import Tensor, no_grad

BENCH_GRID = {ObjectiveKind.DDPM_EPS: (200, 32, 1), ObjectiveKind.FM: (32, 1), ObjectiveKind.MF: (1,)}
REPORT_FIELDS = {
    "task": str, "objective": str, "steps": int, "si_sdr_db": float, "lsd_db": float,
    "rtf": float, "rtf_e2e": float, "peak_mem": int, "seed": int, "config_hash": str,
}
WALL_CLOCK_FIELDS = ("rtf", "rtf_e2e", "peak_mem")


class ReportError(ValueError):
    pass


@dataclass
class Enhanced:
    waveforms: np.ndarray  # [B, n]
    latents: np.ndarray
    sample_seconds: float
    total_seconds: float
    audio_seconds: float

    @property
    def rtf(self) -> float:
        return self.sample_seconds / self.audio_seconds

    @property
    def rtf_e2e(self) -> float:
        return self.total_seconds / self.audio_seconds


def enhance(model, meta: dict, vae, examples: list, steps: int | None = None, seed: int = 0) -> Enhanced:
    """Run one task's conditional generation for a list of examples and decode to waveforms."""
    kind = ObjectiveKind.parse(meta["objective"])
    schedule = NoiseSchedule(**meta["schedule"])
    scale = meta["latent_scale"]
    model.train(False)
    n = len(examples[0].target)
    t0 = time.perf_counter()
    with no_grad():
        rc = T.assemble_conditions(examples, vae, model.encoders, scale, model.dims.n_mels)
        f = model.field(rc.task, rc.concat, rc.cross)
        t1 = time.perf_counter()
        z = sample_latents(f, rc.target.shape, SamplerConfig(kind, steps, seed), schedule)
        t2 = time.perf_counter()
        wav = vae.decode(Tensor(z * scale)).data[:, :n]
    t3 = time.perf_counter()
    audio = len(examples) * n / examples[0].target.sample_rate
    return Enhanced(wav, z, t2 - t1, t3 - t0, audio)


def vae_reconstruction(vae, corpus, part: str = "test", chunk: int = 8) -> list[dict]:
    """SI-SDR of posterior-mean reconstructions for every item of one corpus split."""
    items = T.split_corpus(corpus, part).items
    rows = []
    for i in range(0, len(items), chunk):
        batch = items[i : i + chunk]
        n = min(len(it.waveform) for it in batch)
        x = np.stack([it.waveform.samples[:n] for it in batch])
        with no_grad():
            xh = vae.decode(vae.encode(Tensor(x)).mu).data[:, :n]
        for it, a, b in zip(batch, x, xh):
            label = it.speaker_id if it.kind == "speech" else it.event_class
            rows.append({"kind": it.kind, "label": label, "index": it.index, "si_sdr_db": si_sdr(a, b)})
    return rows


def held_out_examples(task: str, corpus, count: int, n: int, seed: int) -> list:
    """Examples built only from the held-out utterances and events."""
    test = T.split_corpus(corpus, "test")
    code = T.TASK_CODES[task]
    kw = {"enroll_corpus": corpus} if task == "TSE" else {}
    return [T.make_example(task, test, np.random.default_rng([seed, 100 + code, i]), n, **kw) for i in range(count)]


def improvement_table(model, meta, vae, examples: list, steps=None, seed: int = 0, chunk: int = 8) -> dict:
    outs = [enhance(model, meta, vae, examples[i : i + chunk], steps, seed + i) for i in range(0, len(examples), chunk)]
    wav = np.concatenate([o.waveforms for o in outs])
    enh = [si_sdr(e.target, w) for e, w in zip(examples, wav)]
    noisy = [si_sdr(e.target, e.primary) for e in examples]
    return {
        "si_sdr_enhanced": float(np.mean(enh)),
        "si_sdr_input": float(np.mean(noisy)),
        "si_sdr_improvement": float(np.mean(enh) - np.mean(noisy)),
        "lsd_enhanced": float(np.mean([lsd(e.target.samples, w) for e, w in zip(examples, wav)])),
    }


# ----------------------------------------------------------------------------- task confusion


def candidate_references(ex, tasks) -> dict:
    """What each task's definition would extract from this example's primary input.

    SE keeps every speech component and drops noise; AEC keeps only near-end speech;
    TSE keeps the enrolled speaker; LQSS keeps the queried source. Where the
    example does not carry the needed component the own-task target stands in.
    """
    refs = {}
    for t in tasks:
        if t == ex.task:
            refs[t] = ex.target.samples
        elif t == "SE" and ex.task == "AEC" and ex.meta.get("scenario") == "double_talk":
            refs[t] = ex.components[0] + ex.components[1]  # near end plus echo
        elif t == "SE" and ex.task == "TSE" and ex.meta.get("distractor"):
            refs[t] = ex.components[0] + ex.components[1]  # both talkers
        else:
            refs[t] = ex.target.samples
    return refs


def classify_output(out: np.ndarray, refs: dict, own: str) -> str:
    """Nearest reference by SI-SDR; ties go to the example's own task."""
    best, best_v = own, si_sdr(refs[own], out) if np.any(refs[own]) else -np.inf
    for t, r in refs.items():
        if t == own or not np.any(r) or np.array_equal(r, refs[own]):
            continue
        v = si_sdr(r, out)
        if v > best_v:
            best, best_v = t, v
    return best


@dataclass
class Confusion:
    tasks: list
    matrix: np.ndarray  # rows: true task, columns: classified task (counts)
    rates: dict = field(default_factory=dict)

    @property
    def off_diagonal_rate(self) -> float:
        total = self.matrix.sum()
        return float((total - np.trace(self.matrix)) / total) if total else 0.0


def task_confusion_eval(model, meta, vae, test_sets: dict, seed: int = 0, chunk: int = 8) -> Confusion:
    tasks = list(meta["tasks"])
    mat = np.zeros((len(tasks), len(tasks)), dtype=np.int64)
    for i, task in enumerate(tasks):
        exs = test_sets[task]
        for j in range(0, len(exs), chunk):
            part = exs[j : j + chunk]
            wav = enhance(model, meta, vae, part, seed=seed + j).waveforms
            for ex, w in zip(part, wav):
                mat[i, tasks.index(classify_output(w, candidate_references(ex, tasks), task))] += 1
    rates = {t: float(1.0 - mat[i, i] / max(1, mat[i].sum())) for i, t in enumerate(tasks)}
    return Confusion(tasks, mat, rates)


# ----------------------------------------------------------------------------- benchmark


def peak_memory(model, meta, vae, examples, steps, seed) -> int:
    tracemalloc.start()
    try:
        enhance(model, meta, vae, examples, steps, seed)
        _, peak = tracemalloc.get_traced_memory()
    finally:
        tracemalloc.stop()
    return int(peak)


def bench_steps(models: dict, vae, examples: list, seed: int = 0, repeats: int = 5, grid: dict | None = None,
                config_hash: str = "", timing_examples: int = 1, measure_memory: bool = True) -> list[dict]:
    """One report row per (objective, steps) grid cell.

    ``models`` maps an objective name to ``(model, meta)``. Quality is averaged over
    ``examples``; RTF is the median over ``repeats`` timed runs on the first
    ``timing_examples`` examples, and peak memory comes from a separate traced run.
    """
    grid = grid or BENCH_GRID
    rows = []
    for kind, steps_list in grid.items():
        kind = ObjectiveKind.parse(kind)
        if kind.value not in models:
            continue
        model, meta = models[kind.value]
        for steps in steps_list:
            q = improvement_table(model, meta, vae, examples, steps, seed)
            probe = examples[:timing_examples]
            runs = [enhance(model, meta, vae, probe, steps, seed) for _ in range(repeats)]
            rows.append({
                "task": "+".join(meta["tasks"]),
                "objective": kind.value,
                "steps": int(steps),
                "si_sdr_db": q["si_sdr_enhanced"],
                "lsd_db": q["lsd_enhanced"],
                "rtf": statistics.median(r.rtf for r in runs),
                "rtf_e2e": statistics.median(r.rtf_e2e for r in runs),
                "peak_mem": peak_memory(model, meta, vae, probe, steps, seed) if measure_memory else 0,
                "seed": int(seed),
                "config_hash": config_hash,
            })
    return rows


def validate_report(rows: list[dict], grid: dict | None = None) -> None:
    for r in rows:
        missing = set(REPORT_FIELDS) - set(r)
        if missing:
            raise ReportError(f"report row missing {sorted(missing)}")
        for k, typ in REPORT_FIELDS.items():
            ok = isinstance(r[k], (int, float)) if typ is float else isinstance(r[k], typ)
            if not ok or isinstance(r[k], bool):
                raise ReportError(f"field {k} has type {type(r[k]).__name__}, expected {typ.__name__}")
    if grid is not None:
        have = {(r["objective"], r["steps"]) for r in rows}
        want = {(ObjectiveKind.parse(k).value, s) for k, ss in grid.items() for s in ss}
        if want - have:
            raise ReportError(f"report lacks grid cells {sorted(want - have)}")


def write_report(rows: list[dict], jsonl_path, table_path=None) -> None:
    with open(jsonl_path, "w") as f:
        for r in rows:
            f.write(json.dumps(r, sort_keys=True) + "\n")
    if table_path is not None:
        with open(table_path, "w") as f:
            f.write(format_table(rows) + "\n")


def read_report(path) -> list[dict]:
    with open(path) as f:
        return [json.loads(line) for line in f if line.strip()]


def format_table(rows: list[dict]) -> str:
    head = f"{'task':<8} {'objective':<9} {'steps':>5} {'SI-SDR':>8} {'LSD':>7} {'RTF':>9} {'RTF e2e':>9} {'peak MB':>8}"
    lines = [head, "-" * len(head)]
    for r in rows:
        lines.append(
            f"{r['task']:<8} {r['objective']:<9} {r['steps']:>5} {r['si_sdr_db']:>8.2f} {r['lsd_db']:>7.2f} "
            f"{r['rtf']:>9.4f} {r['rtf_e2e']:>9.4f} {r['peak_mem'] / 2**20:>8.1f}"
        )
    return "\n".join(lines)


def numeric_cells(rows: list[dict]) -> list[dict]:
    """Rows with wall-clock fields removed, for reproducibility comparison."""
    return [{k: v for k, v in r.items() if k not in WALL_CLOCK_FIELDS} for r in rows]
