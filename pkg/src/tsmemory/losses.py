"""Distillation objective and its analytic gradient w.r.t. the student quantiles.

Arrays follow the layout ``(B, Q, H, C)`` for quantile tensors and
``(B, H, C)`` for targets; single-sample inputs without the batch axis are
accepted by the elementwise losses. All reductions are plain means, so a
batch mean is the same as the mean of per-sample means.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Optional, Sequence

import numpy as np

from .series import QuantileLevels


@dataclass(frozen=True)
class LossConfig:
    kappa: float = 1.0
    eta: float = 0.5
    lam_align: float = 1.0
    lam_reg: float = 0.1
    lam_cross: float = 1.0
    eps_gate: float = 0.0
    gamma: float = 1.0

    def __post_init__(self):
        if self.kappa <= 0:
            raise ValueError("kappa must be positive")
        for name in ("eta", "lam_align", "lam_reg", "lam_cross"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class GateResult:
    chi: np.ndarray
    omega: np.ndarray
    err_teacher: np.ndarray
    err_base: np.ndarray


@dataclass
class LossBreakdown:
    task: float
    align: float
    anchor: float
    cross: float
    total: float
    gradient: np.ndarray
    gate_open: float = 0.0

    def row(self) -> dict:
        return {"task": self.task, "align": self.align, "anchor": self.anchor,
                "cross": self.cross, "total": self.total}


def pinball(z, y, q):
    """rho_q(z, y) = (y - z)(q - 1[y < z]) and its derivative in z (-q at z == y)."""
    z = np.asarray(z, dtype=np.float64)
    below = np.asarray(y) < z
    w = q - below
    return (y - z) * w, -w * np.ones_like(z)


def huber(r, kappa: float):
    r = np.asarray(r, dtype=np.float64)
    a = np.abs(r)
    quad = a <= kappa
    val = np.where(quad, 0.5 * r * r, kappa * (a - 0.5 * kappa))
    grad = np.where(quad, r, kappa * np.sign(r))
    return val, grad


def _levels_arr(levels) -> np.ndarray:
    lv = levels.as_array() if isinstance(levels, QuantileLevels) else np.asarray(levels, dtype=np.float64)
    return lv[:, None, None]


def task_loss(Qmem: np.ndarray, Y: np.ndarray, levels) -> tuple[float, np.ndarray]:
    Qmem = np.asarray(Qmem, dtype=np.float64)
    Y = np.asarray(Y, dtype=np.float64)
    if Qmem.shape[:-3] + Qmem.shape[-2:] != Y.shape:
        raise ValueError(f"shape mismatch: quantiles {Qmem.shape} vs truth {Y.shape}")
    val, g = pinball(Qmem, Y[..., None, :, :], _levels_arr(levels))
    return float(val.mean()), g / val.size


def median_abs_err(Qf: np.ndarray, Y: np.ndarray, j_star: int):
    """Mean |Y - median slice| per sample (scalar for unbatched input)."""
    Qf = np.asarray(Qf)
    err = np.abs(np.asarray(Y) - Qf[..., j_star, :, :]).mean(axis=(-2, -1))
    return float(err) if np.ndim(err) == 0 else err


def gate(err_T, err_base, conf, cfg: LossConfig) -> GateResult:
    err_T = np.asarray(err_T, dtype=np.float64)
    err_base = np.asarray(err_base, dtype=np.float64)
    chi = (err_T + cfg.eps_gate < err_base).astype(np.float64)
    omega = chi * np.asarray(conf, dtype=np.float64) ** cfg.gamma
    return GateResult(chi, omega, err_T, err_base)


def dq_loss(Qmem, Qt, kappa: float) -> tuple[float, np.ndarray]:
    Qmem = np.asarray(Qmem, dtype=np.float64)
    if Qmem.shape != np.shape(Qt):
        raise ValueError(f"shape mismatch: {Qmem.shape} vs {np.shape(Qt)}")
    val, g = huber(Qmem - Qt, kappa)
    return float(val.mean()), g / val.size


def delta_align_loss(Qmem, Qt, Qbase, j_star: int, kappa: float) -> tuple[float, np.ndarray]:
    Qmem = np.asarray(Qmem, dtype=np.float64)
    d_mem = Qmem[..., j_star, :, :] - Qbase[..., j_star, :, :]
    d_t = Qt[..., j_star, :, :] - Qbase[..., j_star, :, :]
    val, g = huber(d_mem - d_t, kappa)
    grad = np.zeros_like(Qmem)
    grad[..., j_star, :, :] = g / val.size
    return float(val.mean()), grad


def anchor_loss(Qmem, Qbase, j_star: int, omega, kappa: float) -> tuple[float, np.ndarray]:
    """(1 - omega) times the median Huber gap to the backbone, batch-averaged."""
    Qmem = np.asarray(Qmem, dtype=np.float64)
    val, g = huber(Qmem[..., j_star, :, :] - Qbase[..., j_star, :, :], kappa)
    per = val.mean(axis=(-2, -1))
    wt = 1.0 - np.asarray(omega, dtype=np.float64)
    n = per.size
    grad = np.zeros_like(Qmem)
    hc = val.shape[-2] * val.shape[-1]
    grad[..., j_star, :, :] = (wt / n / hc)[..., None, None] * g
    return float(np.sum(wt * per) / n), grad


def crossing_penalty(Qmem) -> tuple[float, np.ndarray]:
    Qmem = np.asarray(Qmem, dtype=np.float64)
    if Qmem.shape[-3] < 2:
        return 0.0, np.zeros_like(Qmem)
    gap = Qmem[..., :-1, :, :] - Qmem[..., 1:, :, :]
    viol = gap > 0
    n = gap.size
    g = viol / n
    grad = np.zeros_like(Qmem)
    grad[..., :-1, :, :] += g
    grad[..., 1:, :, :] -= g
    return float(np.where(viol, gap, 0.0).sum() / n), grad


def align_loss(Qmem, Qt, Qbase, omega, j_star: int, cfg: LossConfig) -> tuple[float, np.ndarray]:
    """Batch mean of omega_t * (D_Q + eta * D_Delta); closed gates contribute nothing."""
    Qmem = np.asarray(Qmem, dtype=np.float64)
    if Qmem.ndim == 3:
        Qmem, Qt, Qbase = Qmem[None], np.asarray(Qt)[None], np.asarray(Qbase)[None]
        squeeze = True
    else:
        squeeze = False
    omega = np.broadcast_to(np.asarray(omega, dtype=np.float64), Qmem.shape[:1])
    B, Q, H, C = Qmem.shape
    grad = np.zeros_like(Qmem)
    open_ = np.flatnonzero(omega > 0)
    total = 0.0
    if open_.size:
        qm, qt, qb, w = Qmem[open_], Qt[open_], Qbase[open_], omega[open_]
        hq, gq = huber(qm - qt, cfg.kappa)
        dq = hq.mean(axis=(1, 2, 3))
        r = (qm[:, j_star] - qb[:, j_star]) - (qt[:, j_star] - qb[:, j_star])
        hd, gd = huber(r, cfg.kappa)
        dd = hd.mean(axis=(1, 2))
        total = float(np.sum(w * (dq + cfg.eta * dd)) / B)
        g = (w / B / (Q * H * C))[:, None, None, None] * gq
        g[:, j_star] += (w * cfg.eta / B / (H * C))[:, None, None] * gd
        grad[open_] = g
    return total, (grad[0] if squeeze else grad)


@dataclass
class LossBatch:
    Qmem: np.ndarray   # B x Q x H x C
    Y: np.ndarray      # B x H x C
    Qt: np.ndarray     # teacher quantiles
    Qbase: np.ndarray  # frozen backbone quantiles
    conf: np.ndarray   # B
    levels: QuantileLevels
    anchors: Optional[Sequence[int]] = None

    @classmethod
    def from_records(cls, records, Qmem: np.ndarray, base_lookup, levels: QuantileLevels) -> "LossBatch":
        """Pair teacher records with backbone forecasts; ``base_lookup`` maps anchor -> Q x H x C."""
        bases = []
        for r in records:
            try:
                bases.append(base_lookup[r.anchor])
            except KeyError:
                raise KeyError(f"missing base forecast for anchor {r.anchor}") from None
        return cls(Qmem, np.stack([r.future for r in records]), np.stack([r.quantiles for r in records]),
                   np.stack(bases), np.array([r.conf for r in records]), levels,
                   [r.anchor for r in records])


def batch_gate(batch: LossBatch, cfg: LossConfig) -> GateResult:
    j = batch.levels.median_index
    return gate(median_abs_err(batch.Qt, batch.Y, j), median_abs_err(batch.Qbase, batch.Y, j),
                batch.conf, cfg)


def total_loss(batch: LossBatch, cfg: LossConfig, gates: Optional[GateResult] = None) -> LossBreakdown:
    if batch.Qbase is None:
        raise ValueError("missing base forecasts for batch")
    j = batch.levels.median_index
    g = gates if gates is not None else batch_gate(batch, cfg)
    t, gt = task_loss(batch.Qmem, batch.Y, batch.levels)
    a, ga = align_loss(batch.Qmem, batch.Qt, batch.Qbase, g.omega, j, cfg)
    an, gan = anchor_loss(batch.Qmem, batch.Qbase, j, g.omega, cfg.kappa)
    cr, gcr = crossing_penalty(batch.Qmem)
    total = t + cfg.lam_align * a + cfg.lam_reg * (an + cfg.lam_cross * cr)
    grad = gt + cfg.lam_align * ga + cfg.lam_reg * (gan + cfg.lam_cross * gcr)
    return LossBreakdown(t, a, an, cr, total, grad, float(np.mean(g.chi)))
