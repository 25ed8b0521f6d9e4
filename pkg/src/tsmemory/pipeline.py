"""End-to-end driver: data, backbone, teacher, student, fusion, evaluation, latency.

Every stage reads what it needs from the run directory when it is not
already in memory, so the CLI subcommands can be run one at a time.
"""

from __future__ import annotations

import hashlib
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import config as cfgmod
from . import io
from .backbone import (ForecastCache, fit_persistence, fit_seasonal_naive, load_backbone, precompute_cache,
                       save_backbone)
from .bench import bench_latency, write_latency_csv
from .fusion import evaluate, fuse, tune_alpha
from .online import OnlineRetrievalForecaster
from .series import SeriesFrame, make_split_windows, read_csv, write_csv
from .student import ParameterStore, StudentModel, init_params, train_student
from .synthetic import gen_synthetic
from .teacher import PatchMeanEmbedder, TeacherDataset, build_knowledge_base, build_teacher_dataset

log = logging.getLogger(__name__)

STAGES = ("data", "teacher", "train", "tune-alpha", "evaluate", "bench")

FILES = {
    "config": "config.toml",
    "data": "data.csv",
    "backbone": "backbone.json",
    "cache": "cache.tsmc",
    "teacher": "teacher.tsmt",
    "params": "student.tsmp",
    "train_log": "train_log.csv",
    "risk": "risk_curve.csv",
    "fusion": "fusion.json",
    "latency": "latency.csv",
    "summary": "summary.txt",
    "manifest": "MANIFEST",
}


class PipelineError(RuntimeError):
    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage = stage
        self.cause = cause


@dataclass
class Run:
    cfg: cfgmod.PipelineConfig
    out: Path
    frame: Optional[SeriesFrame] = None
    splits: object = None
    backbone: object = None
    cache: Optional[ForecastCache] = None
    kb: object = None
    teacher: Optional[TeacherDataset] = None
    params: Optional[ParameterStore] = None
    alpha: Optional[float] = None
    written: list[str] = field(default_factory=list)
    notes: list[str] = field(default_factory=list)

    def path(self, key: str) -> Path:
        return self.out / FILES.get(key, key)

    def wrote(self, key: str) -> Path:
        name = FILES.get(key, key)
        if name not in self.written:
            self.written.append(name)
        return self.out / name

    @property
    def levels(self):
        return self.cfg.quantile_levels

    @property
    def embedder(self):
        return PatchMeanEmbedder(self.cfg.embed_patches)

    def student_model(self) -> StudentModel:
        return StudentModel(self.cfg.student_config(), self.ensure_params())

    # lazy loaders -------------------------------------------------------

    def ensure_frame(self) -> SeriesFrame:
        if self.frame is None:
            p = self.path("data")
            if p.exists():
                self.frame = read_csv(p, self.cfg.period)
            elif self.cfg.data.csv:
                self.frame = read_csv(self.cfg.data.csv, self.cfg.period)
            else:
                self.frame = gen_synthetic(self.cfg.data.recipe)
        if self.splits is None:
            self.splits = make_split_windows(self.frame, self.cfg.window, self.cfg.split)
        return self.frame

    def ensure_backbone(self):
        if self.backbone is None:
            p = self.path("backbone")
            if p.exists():
                self.backbone = load_backbone(p)
            else:
                self.backbone = fit_backbone(self)
        return self.backbone

    def ensure_cache(self) -> ForecastCache:
        if self.cache is None:
            self.cache = io.read_cache(self.path("cache"))
            self.cache.check(self.ensure_backbone())
        return self.cache

    def ensure_kb(self):
        if self.kb is None:
            self.ensure_frame()
            self.kb = build_knowledge_base(self.splits.train, self.embedder, self.splits.bounds["train"])
        return self.kb

    def ensure_teacher(self) -> TeacherDataset:
        if self.teacher is None:
            recs, levels, conf = io.read_teacher(self.path("teacher"))
            self.teacher = TeacherDataset(recs, levels, 0, conf)
        return self.teacher

    def ensure_params(self) -> ParameterStore:
        if self.params is None:
            flat, _ = io.read_params(self.path("params"))
            store = init_params(self.cfg.student_config())
            store.set_flat(flat)
            self.params = store
        return self.params

    def ensure_alpha(self) -> float:
        if self.alpha is None:
            with open(self.path("fusion")) as fh:
                self.alpha = float(json.load(fh)["alpha"])
        return self.alpha


def fit_backbone(run: Run):
    run.ensure_frame()
    lo, hi = run.splits.bounds["train"]
    train = run.frame.values[lo:hi]
    H = run.cfg.window.horizon
    if run.cfg.backbone == "seasonal_naive":
        return fit_seasonal_naive(train, run.cfg.period, run.levels, H)
    return fit_persistence(train, run.levels, H)


# stages ------------------------------------------------------------------

def stage_data(run: Run) -> None:
    run.ensure_frame()
    write_csv(run.frame, run.wrote("data"))


def stage_teacher(run: Run) -> None:
    run.ensure_frame()
    run.backbone = fit_backbone(run)
    save_backbone(run.backbone, run.wrote("backbone"))
    s = run.splits
    run.cache = precompute_cache(run.backbone, s.train + s.val + s.test, run.cfg.threads)
    io.write_cache(run.cache, run.wrote("cache"))
    kb = run.ensure_kb()
    run.teacher = build_teacher_dataset(s.train, kb, run.embedder, run.cfg.retrieval, run.levels,
                                        run.cfg.threads)
    if run.teacher.skipped:
        run.notes.append(f"teacher skipped {run.teacher.skipped} windows without neighbors")
    io.write_teacher(run.teacher.records, run.levels, run.wrote("teacher"), run.cfg.retrieval.to_dict())


def stage_train(run: Run) -> None:
    run.ensure_frame()
    teacher = run.ensure_teacher()
    cache = run.ensure_cache()
    params, report = train_student(teacher, cache, run.cfg.student_config(), run.cfg.trainer, run.cfg.loss,
                                   run.splits.val)
    run.params = params
    io.write_params(params.flat, run.cfg.student_config().to_dict(), run.wrote("params"))
    report.write_csv(run.wrote("train_log"))
    secs = sum(e.seconds for e in report.epochs)
    run.notes.append(f"training: {len(report.epochs)} epochs in {secs:.1f}s, best epoch {report.best_epoch}, "
                     f"val pinball {report.init_val_pinball:.5f} -> "
                     f"{min([report.init_val_pinball] + [e.val_pinball for e in report.epochs]):.5f}")


def _student_batch(run: Run):
    model = run.student_model()
    periodic = bool(model.config.period)
    return lambda X, anchors: model.predict(X, anchors if periodic else None)


def stage_tune_alpha(run: Run) -> None:
    run.ensure_frame()
    alpha, curve = tune_alpha(run.splits.val, run.ensure_cache(), _student_batch(run), run.levels,
                              run.cfg.eval.grid_step)
    run.alpha = alpha
    curve.write_csv(run.wrote("risk"))
    with open(run.wrote("fusion"), "w") as fh:
        json.dump({"alpha": alpha, "grid_step": run.cfg.eval.grid_step}, fh)


def make_online(run: Run) -> OnlineRetrievalForecaster:
    online = OnlineRetrievalForecaster(run.ensure_kb(), run.cfg.retrieval, run.ensure_backbone(), run.levels,
                                       embedder=run.embedder)
    online.tune_beta(run.splits.val, np.round(np.arange(0, 1 + 1e-9, run.cfg.eval.beta_step), 12))
    return online


def stage_evaluate(run: Run) -> dict:
    run.ensure_frame()
    test = run.splits.test
    cache = run.ensure_cache()
    alpha = run.ensure_alpha()
    stud = _student_batch(run)
    X = np.stack([w.context for w in test])
    Qb = np.stack([cache.entries[w.anchor] for w in test])
    Qm = stud(X, [w.anchor for w in test])
    online = make_online(run)
    Qo = np.stack([online.online_forecast(w.context, w.anchor).values for w in test])
    methods = {"backbone": Qb, "student": Qm, "fused": fuse(Qb, Qm, alpha), "online": Qo}
    reports = {}
    for name, Q in methods.items():
        rep = evaluate(test, None, run.cfg.eval.horizons, batch_forecaster=lambda _w, Q=Q: Q, levels=run.levels)
        rep.config = {"method": name}
        rep.write_csv(run.wrote(f"eval_{name}.csv"))
        reports[name] = rep
    run.notes.append(f"alpha* = {alpha}, beta* = {online.beta}")
    run.notes.extend(rep.summary(name) for name, rep in reports.items())
    return reports


def stage_bench(run: Run):
    run.ensure_frame()
    online = make_online(run)
    rows = bench_latency(run.ensure_backbone(), run.student_model(), run.ensure_alpha(), online,
                         run.splits.test, run.cfg.bench.multipliers, run.cfg.bench.warmup, run.cfg.bench.queries)
    write_latency_csv(rows, run.wrote("latency"))
    for r in rows:
        run.notes.append(f"latency {r.method:9s} x{r.kb_multiplier}: retr {r.retrieval_ms:.4f} ms  "
                         f"fwd {r.forward_ms:.4f} ms  total {r.total_ms:.4f} ms  frac {r.retrieval_frac:.1f}%")
    return rows


STAGE_FUNCS = {"data": stage_data, "teacher": stage_teacher, "train": stage_train,
               "tune-alpha": stage_tune_alpha, "evaluate": stage_evaluate, "bench": stage_bench}


def sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(run: Run, completed: str, error: Optional[str] = None) -> None:
    lines = [f"# completed_stage {completed}"]
    if error:
        lines.append(f"# error {error}")
    for name in run.written:
        p = run.out / name
        if p.exists():
            lines.append(f"{name}\t{p.stat().st_size}\t{sha256(p)}")
    (run.out / FILES["manifest"]).write_text("\n".join(lines) + "\n")


def write_summary(run: Run) -> None:
    run.wrote("summary").write_text("\n".join(run.notes) + "\n")


def open_run(cfg: cfgmod.PipelineConfig, out=None) -> Run:
    out = Path(out or cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    run = Run(cfg, out)
    cfgmod.save(cfg, run.wrote("config"))
    return run


def run_stages(run: Run, stages) -> Run:
    done = "none"
    t0 = time.perf_counter()
    for stage in stages:
        try:
            STAGE_FUNCS[stage](run)
        except Exception as exc:
            write_summary(run)
            write_manifest(run, done, f"{stage}: {exc}")
            raise PipelineError(stage, exc) from exc
        done = stage
        log.info("stage %s done (%.1fs)", stage, time.perf_counter() - t0)
    write_summary(run)
    write_manifest(run, done)
    return run


def run_pipeline(cfg: cfgmod.PipelineConfig, out=None, bench: Optional[bool] = None) -> Run:
    stages = list(STAGES)
    if not (cfg.bench.in_run_all if bench is None else bench):
        stages.remove("bench")
    return run_stages(open_run(cfg, out), stages)
