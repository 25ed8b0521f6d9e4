"""Adam training of the memory module on the teacher dataset."""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np

from ..losses import LossBatch, LossConfig, batch_gate, total_loss
from ..series import QuantileLevels, WindowPair, pinball_values
from .model import ParameterStore, StudentConfig, StudentModel

log = logging.getLogger(__name__)


class TrainingDivergedError(RuntimeError):
    def __init__(self, anchors):
        super().__init__(f"non-finite loss in batch with anchors {list(anchors)}")
        self.anchors = list(anchors)


@dataclass(frozen=True)
class TrainerConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 64
    epochs: int = 30
    clip_norm: float = 1.0
    keep_best: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("learning rate must be positive")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ValueError("Adam betas must lie in (0, 1)")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("batch_size >= 1 and epochs >= 0 required")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class EpochLog:
    epoch: int
    task: float
    align: float
    anchor: float
    cross: float
    total: float
    val_pinball: float
    gate_open: float
    seconds: float = 0.0


@dataclass
class TrainReport:
    epochs: list[EpochLog] = field(default_factory=list)
    init_val_pinball: float = float("nan")
    best_epoch: int = 0

    def write_csv(self, path) -> None:
        # wall-clock is left out so the log is reproducible bit for bit
        cols = ["epoch", "task", "align", "anchor", "cross", "total", "val_pinball", "gate_open"]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(cols)
            w.writerow([0, "", "", "", "", "", repr(self.init_val_pinball), ""])
            for e in self.epochs:
                w.writerow([e.epoch] + [repr(float(getattr(e, c))) for c in cols[1:]])


class Adam:
    def __init__(self, size: int, cfg: TrainerConfig):
        self.cfg = cfg
        self.m = np.zeros(size)
        self.v = np.zeros(size)
        self.t = 0

    def step(self, params: ParameterStore, grad: np.ndarray) -> None:
        c = self.cfg
        self.t += 1
        self.m = c.beta1 * self.m + (1 - c.beta1) * grad
        self.v = c.beta2 * self.v + (1 - c.beta2) * grad * grad
        mhat = self.m / (1 - c.beta1 ** self.t)
        vhat = self.v / (1 - c.beta2 ** self.t)
        params.flat -= c.lr * mhat / (np.sqrt(vhat) + c.eps)
        params.touch()


def clip_by_norm(grad: np.ndarray, max_norm: float) -> np.ndarray:
    if max_norm is None or max_norm <= 0:
        return grad
    n = float(np.sqrt(grad @ grad))
    return grad * (max_norm / n) if n > max_norm else grad


def validation_pinball(model: StudentModel, windows: Sequence[WindowPair], levels: QuantileLevels) -> float:
    if not windows:
        return float("nan")
    X = np.stack([w.context for w in windows])
    Y = np.stack([w.future for w in windows])
    anchors = [w.anchor for w in windows] if model.config.period else None
    Q = model.predict(X, anchors)
    return float(np.mean(pinball_values(Q, Y, levels.as_array())))


def train_student(teacher, cache, student_cfg: StudentConfig, trainer_cfg: TrainerConfig,
                  loss_cfg: LossConfig, val_windows: Sequence[WindowPair] = (),
                  params: Optional[ParameterStore] = None) -> tuple[ParameterStore, TrainReport]:
    """Fit the student to ``teacher`` records; ``cache`` maps anchors to backbone quantiles.

    ``cache`` may be a ForecastCache or any mapping anchor -> Q x H x C array.
    """
    records = list(teacher)
    levels = teacher.levels
    if not records:
        raise ValueError("empty teacher dataset")
    lookup = cache.entries if hasattr(cache, "entries") else cache
    missing = [r.anchor for r in records if r.anchor not in lookup]
    if missing:
        raise KeyError(f"forecast cache lacks anchors {missing[:10]}")
    model = StudentModel(student_cfg, params)
    X = np.stack([r.context for r in records])
    anchors = np.array([r.anchor for r in records])
    full = LossBatch(None, np.stack([r.future for r in records]), np.stack([r.quantiles for r in records]),
                     np.stack([lookup[a] for a in anchors]), np.array([r.conf for r in records]),
                     levels, anchors)
    gates = batch_gate(full, loss_cfg)  # fixed per record: depends only on teacher, backbone and truth

    opt = Adam(model.params.size, trainer_cfg)
    rng = np.random.default_rng(trainer_cfg.seed)
    report = TrainReport(init_val_pinball=validation_pinball(model, val_windows, levels))
    best = (report.init_val_pinball, model.params.flat.copy(), 0)
    periodic = bool(student_cfg.period)
    n = len(records)
    bs = trainer_cfg.batch_size
    for epoch in range(1, trainer_cfg.epochs + 1):
        t0 = time.perf_counter()
        perm = rng.permutation(n)
        sums = np.zeros(6)
        for s in range(0, n, bs):
            idx = np.sort(perm[s:s + bs])  # fixed reduction order inside a batch
            out, fc = model.forward(X[idx], anchors[idx] if periodic else None)
            batch = LossBatch(out, full.Y[idx], full.Qt[idx], full.Qbase[idx], full.conf[idx], levels,
                              anchors[idx])
            bd = total_loss(batch, loss_cfg, type(gates)(gates.chi[idx], gates.omega[idx],
                                                         gates.err_teacher[idx], gates.err_base[idx]))
            if not np.isfinite(bd.total):
                raise TrainingDivergedError(anchors[idx])
            grad = clip_by_norm(model.backward(fc, bd.gradient), trainer_cfg.clip_norm)
            opt.step(model.params, grad)
            sums += len(idx) * np.array([bd.task, bd.align, bd.anchor, bd.cross, bd.total, bd.gate_open])
        means = sums / n
        vp = validation_pinball(model, val_windows, levels)
        report.epochs.append(EpochLog(epoch, *means[:5], vp, means[5], time.perf_counter() - t0))
        log.info("epoch %d total %.5f val pinball %.5f", epoch, means[4], vp)
        if trainer_cfg.keep_best and val_windows and vp < best[0]:
            best = (vp, model.params.flat.copy(), epoch)
    if trainer_cfg.keep_best and val_windows:
        model.params.set_flat(best[1])
        report.best_epoch = best[2]
    else:
        report.best_epoch = trainer_cfg.epochs
    return model.params, report
