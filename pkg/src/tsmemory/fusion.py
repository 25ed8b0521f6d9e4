"""Convex quantile fusion, validation search for the fusion weight, and evaluation."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .series import (QuantileForecast, QuantileLevels, WindowPair, crps_approx, mae, mean_pinball, mse,
                     pinball_values, point_from_quantiles)

# relative slack under which two grid risks count as tied
TIE_RTOL = 1e-12


@dataclass(frozen=True)
class FusionConfig:
    alpha: float = 0.0
    grid_step: float = 0.05

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must lie in [0, 1]")
        if not 0.0 < self.grid_step <= 1.0:
            raise ValueError("grid_step must lie in (0, 1]")


def fuse(Qbase, Qmem, alpha: float):
    """(1 - alpha) * base + alpha * mem, elementwise; endpoints return inputs verbatim."""
    if not 0.0 <= alpha <= 1.0:
        raise ValueError("alpha must lie in [0, 1]")
    if isinstance(Qbase, QuantileForecast) or isinstance(Qmem, QuantileForecast):
        if not (isinstance(Qbase, QuantileForecast) and isinstance(Qmem, QuantileForecast)):
            raise TypeError("fuse both QuantileForecasts or both arrays")
        if Qbase.levels != Qmem.levels:
            raise ValueError("cannot fuse forecasts on different quantile grids")
        return QuantileForecast(fuse(Qbase.values, Qmem.values, alpha), Qbase.levels)
    if np.shape(Qbase) != np.shape(Qmem):
        raise ValueError(f"shape mismatch: {np.shape(Qbase)} vs {np.shape(Qmem)}")
    if alpha == 0.0:
        return np.array(Qbase, dtype=np.float64, copy=True)
    if alpha == 1.0:
        return np.array(Qmem, dtype=np.float64, copy=True)
    return (1.0 - alpha) * np.asarray(Qbase) + alpha * np.asarray(Qmem)


def fuse_points(p_base, p_mem, alpha: float) -> np.ndarray:
    return fuse(np.asarray(p_base, dtype=np.float64), np.asarray(p_mem, dtype=np.float64), alpha)


def alpha_grid(step: float) -> np.ndarray:
    n = int(round(1.0 / step))
    if abs(n * step - 1.0) > 1e-9:
        raise ValueError(f"grid step {step} does not divide [0, 1]")
    return np.round(np.arange(n + 1) / n, 12)


def argmin_conservative(risks: np.ndarray) -> int:
    """Index of the smallest risk, preferring the earliest entry among near-ties."""
    risks = np.asarray(risks)
    best = risks.min()
    tol = TIE_RTOL * max(abs(best), 1e-300)
    return int(np.flatnonzero(risks <= best + tol)[0])


@dataclass
class RiskCurve:
    grid: np.ndarray
    risk: np.ndarray
    best: float

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["alpha", "risk"])
            for a, r in zip(self.grid, self.risk):
                w.writerow([repr(float(a)), repr(float(r))])


def risk_curve(Qbase: np.ndarray, Qmem: np.ndarray, Y: np.ndarray, levels: QuantileLevels,
               grid: np.ndarray) -> np.ndarray:
    lv = levels.as_array()
    return np.array([np.mean(pinball_values(fuse(Qbase, Qmem, float(a)), Y, lv)) for a in grid])


def tune_alpha(val_windows: Sequence[WindowPair], base_forecasts, student, levels: QuantileLevels,
               grid_step: float = 0.05) -> tuple[float, RiskCurve]:
    """Grid-search the fusion weight on validation mean pinball; ties go to the smaller alpha.

    ``base_forecasts`` is an array (N, Q, H, C) or a mapping anchor -> Q x H x C;
    ``student`` is an array of member forecasts of the same shape or a callable
    ``(contexts, anchors) -> (N, Q, H, C)``.
    """
    if not val_windows:
        raise ValueError("empty validation set")
    Y = np.stack([w.future for w in val_windows])
    Qb = _stack(base_forecasts, val_windows)
    Qm = student(np.stack([w.context for w in val_windows]), [w.anchor for w in val_windows]) \
        if callable(student) else np.asarray(student)
    grid = alpha_grid(grid_step)
    risks = risk_curve(Qb, Qm, Y, levels, grid)
    k = argmin_conservative(risks)
    return float(grid[k]), RiskCurve(grid, risks, float(grid[k]))


def _stack(forecasts, windows) -> np.ndarray:
    if isinstance(forecasts, np.ndarray):
        return forecasts
    if hasattr(forecasts, "entries"):
        forecasts = forecasts.entries
    return np.stack([forecasts[w.anchor] for w in windows])


@dataclass
class AuditReport:
    alphas: list[float]
    violations: list[tuple[int, float, float]]  # (anchor, alpha, excess)
    max_excess: float
    aggregate_ok: bool

    @property
    def passed(self) -> bool:
        return not self.violations and self.aggregate_ok


def convexity_audit(Qbase: np.ndarray, Qmem: np.ndarray, Y: np.ndarray, levels: QuantileLevels,
                    alphas: Sequence[float], anchors: Optional[Sequence[int]] = None,
                    atol: float = 1e-12) -> AuditReport:
    """Check pinball(fused) <= (1-a) pinball(base) + a pinball(mem) per window and overall."""
    lv = levels.as_array()
    anchors = list(range(len(Y))) if anchors is None else list(anchors)
    rb = pinball_values(Qbase, Y, lv).mean(axis=(1, 2, 3))
    rm = pinball_values(Qmem, Y, lv).mean(axis=(1, 2, 3))
    bad, worst, agg = [], -np.inf, True
    for a in alphas:
        rf = pinball_values(fuse(Qbase, Qmem, float(a)), Y, lv).mean(axis=(1, 2, 3))
        excess = rf - ((1 - a) * rb + a * rm)
        worst = max(worst, float(excess.max()))
        for i in np.flatnonzero(excess > atol):
            bad.append((anchors[i], float(a), float(excess[i])))
        if rf.mean() - ((1 - a) * rb.mean() + a * rm.mean()) > atol:
            agg = False
    return AuditReport(list(map(float, alphas)), bad, worst, agg)


METRICS = ("mse", "mae", "crps", "pinball")


@dataclass
class EvalReport:
    horizons: list[int]
    by_horizon: dict[int, dict[str, float]]
    avg: dict[str, float]
    n_windows: int
    per_window: np.ndarray = field(repr=False, default=None)  # n_windows x len(horizons) x 4
    config: dict = field(default_factory=dict)

    def rows(self) -> list[dict]:
        out = [{"horizon": h, **self.by_horizon[h]} for h in self.horizons]
        out.append({"horizon": "avg", **self.avg})
        return out

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["horizon", *METRICS, "windows"])
            for r in self.rows():
                w.writerow([r["horizon"], *(repr(float(r[m])) for m in METRICS), self.n_windows])

    def summary(self, name: str = "") -> str:
        a = self.avg
        head = f"{name}: " if name else ""
        return (f"{head}MSE {a['mse']:.5f}  MAE {a['mae']:.5f}  CRPS {a['crps']:.5f}  "
                f"pinball {a['pinball']:.5f}  ({self.n_windows} windows)")


def window_metrics(qf: QuantileForecast, Y: np.ndarray) -> dict[str, float]:
    p = point_from_quantiles(qf)
    pin = mean_pinball(qf, Y)
    return {"mse": mse(Y, p), "mae": mae(Y, p), "crps": crps_approx(qf, Y), "pinball": pin}


def evaluate(windows: Sequence[WindowPair], forecaster: Callable[[WindowPair], QuantileForecast],
             horizons: Optional[Sequence[int]] = None, batch_forecaster=None,
             levels: Optional[QuantileLevels] = None) -> EvalReport:
    """Metrics per window for each horizon prefix, then averaged.

    ``forecaster`` maps a window to its QuantileForecast. Alternatively pass
    ``batch_forecaster(windows) -> (N, Q, H, C)`` together with ``levels``.
    The avg row is the mean over the horizon rows.
    """
    if not windows:
        raise ValueError("no windows to evaluate")
    H = windows[0].future.shape[0]
    horizons = sorted(set(horizons or [H]))
    if horizons[0] < 1 or horizons[-1] > H:
        raise ValueError(f"horizons must lie in [1, {H}]")
    if batch_forecaster is not None:
        allq = batch_forecaster(windows)
        fcs = [QuantileForecast(q, levels) for q in allq]
    else:
        fcs = [forecaster(w) for w in windows]
    per = np.zeros((len(windows), len(horizons), len(METRICS)))
    for i, (w, qf) in enumerate(zip(windows, fcs)):
        for k, h in enumerate(horizons):
            m = window_metrics(QuantileForecast(qf.values[:, :h], qf.levels), w.future[:h])
            per[i, k] = [m[x] for x in METRICS]
    means = per.mean(axis=0)
    by_h = {h: dict(zip(METRICS, map(float, means[k]))) for k, h in enumerate(horizons)}
    avg = dict(zip(METRICS, map(float, means.mean(axis=0))))
    return EvalReport(horizons, by_h, avg, len(windows), per)
