"""Series data model, leakage-safe windowing, instance normalization and metrics."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Iterator, Optional, Sequence

import numpy as np


class InsufficientLengthError(ValueError):
    pass


@dataclass(frozen=True)
class SeriesFrame:
    values: np.ndarray
    channel_names: tuple[str, ...]
    period_hint: Optional[int] = None
    timestamps: Optional[tuple[str, ...]] = None

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim == 1:
            values = values[:, None]
        if values.ndim != 2 or values.shape[0] < 1 or values.shape[1] < 1:
            raise ValueError(f"values must be a T x C matrix with T, C >= 1, got shape {values.shape}")
        if not np.all(np.isfinite(values)):
            raise ValueError("series values must be finite")
        names = tuple(self.channel_names)
        if len(names) != values.shape[1]:
            raise ValueError(f"{len(names)} channel names for {values.shape[1]} channels")
        if self.period_hint is not None and int(self.period_hint) < 1:
            raise ValueError("period_hint must be a positive integer")
        if self.timestamps is not None and len(self.timestamps) != values.shape[0]:
            raise ValueError("timestamps length must equal T")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "channel_names", names)

    @property
    def T(self) -> int:
        return self.values.shape[0]

    @property
    def C(self) -> int:
        return self.values.shape[1]


def read_csv(path, period_hint: Optional[int] = None) -> SeriesFrame:
    """Load a frame from CSV: header of channel names, one row per step.

    A leading column named ``timestamp`` is kept aside and not used numerically.
    """
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ValueError(f"{path}: empty CSV")
    header, body = rows[0], [r for r in rows[1:] if r]
    stamps = None
    if header and header[0].strip().lower() == "timestamp":
        stamps = tuple(r[0] for r in body)
        header = header[1:]
        body = [r[1:] for r in body]
    values = np.array([[float(x) for x in r] for r in body], dtype=np.float64)
    return SeriesFrame(values.reshape(len(body), len(header)), tuple(h.strip() for h in header),
                       period_hint, stamps)


def write_csv(frame: SeriesFrame, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        head = list(frame.channel_names)
        if frame.timestamps is not None:
            head = ["timestamp"] + head
        w.writerow(head)
        for i, row in enumerate(frame.values):
            cells = [repr(float(v)) for v in row]
            if frame.timestamps is not None:
                cells = [frame.timestamps[i]] + cells
            w.writerow(cells)


@dataclass(frozen=True)
class WindowSpec:
    lookback: int
    horizon: int
    stride: int = 1

    def __post_init__(self):
        for name in ("lookback", "horizon", "stride"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be >= 1")


@dataclass(frozen=True)
class WindowPair:
    anchor: int
    context: np.ndarray
    future: np.ndarray

    @property
    def span(self) -> tuple[int, int]:
        """Inclusive row range covered by context and future."""
        return self.anchor - self.context.shape[0] + 1, self.anchor + self.future.shape[0]


@dataclass
class Splits:
    train: list[WindowPair]
    val: list[WindowPair]
    test: list[WindowPair]
    # half-open row ranges [lo, hi) of each contiguous segment
    bounds: dict[str, tuple[int, int]] = field(default_factory=dict)

    def __iter__(self) -> Iterator[list[WindowPair]]:
        return iter((self.train, self.val, self.test))


def windows_in_segment(values: np.ndarray, lo: int, hi: int, spec: WindowSpec) -> list[WindowPair]:
    L, H = spec.lookback, spec.horizon
    out = []
    for t in range(lo + L - 1, hi - H, spec.stride):
        ctx = values[t - L + 1:t + 1]
        fut = values[t + 1:t + H + 1]
        out.append(WindowPair(t, ctx, fut))
    return out


def make_split_windows(frame: SeriesFrame, spec: WindowSpec,
                       split_fractions: Sequence[float] = (0.7, 0.1, 0.2)) -> Splits:
    fr = np.asarray(split_fractions, dtype=np.float64)
    if fr.shape != (3,) or np.any(fr < 0) or abs(fr.sum() - 1.0) > 1e-9:
        raise ValueError(f"split fractions must be three nonnegative reals summing to 1, got {split_fractions}")
    T = frame.T
    need = spec.lookback + spec.horizon
    cut1 = int(round(fr[0] * T))
    cut2 = int(round((fr[0] + fr[1]) * T))
    bounds = {"train": (0, cut1), "val": (cut1, cut2), "test": (cut2, T)}
    for name, f in zip(("train", "val", "test"), fr):
        if f <= 0:
            continue
        lo, hi = bounds[name]
        if hi - lo < need:
            required = int(np.ceil(need / f))
            raise InsufficientLengthError(
                f"insufficient length: {name} segment has {hi - lo} rows, needs L+H={need}; "
                f"requires T >= {required} (got T={T})")
    parts = {name: windows_in_segment(frame.values, lo, hi, spec) for name, (lo, hi) in bounds.items()}
    return Splits(parts["train"], parts["val"], parts["test"], bounds)


@dataclass(frozen=True)
class QuantileLevels:
    levels: tuple[float, ...]

    def __post_init__(self):
        lv = tuple(float(q) for q in self.levels)
        if not lv:
            raise ValueError("need at least one quantile level")
        if any(not (0.0 < q < 1.0) for q in lv):
            raise ValueError("quantile levels must lie in (0, 1)")
        if any(b <= a for a, b in zip(lv, lv[1:])):
            raise ValueError("quantile levels must be strictly ascending")
        object.__setattr__(self, "levels", lv)

    @classmethod
    def default(cls) -> "QuantileLevels":
        return cls(tuple(round(0.1 * k, 10) for k in range(1, 10)))

    @property
    def Q(self) -> int:
        return len(self.levels)

    @property
    def median_index(self) -> int:
        # argmin returns the first minimum, so ties go to the lower level
        return int(np.argmin(np.abs(np.asarray(self.levels) - 0.5)))

    def as_array(self) -> np.ndarray:
        return np.asarray(self.levels, dtype=np.float64)

    def __len__(self) -> int:
        return len(self.levels)


@dataclass(frozen=True)
class QuantileForecast:
    values: np.ndarray  # Q x H x C
    levels: QuantileLevels

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 3 or v.shape[0] != self.levels.Q:
            raise ValueError(f"expected Q x H x C with Q={self.levels.Q}, got shape {v.shape}")
        if not np.all(np.isfinite(v)):
            raise ValueError("quantile forecast contains non-finite values")
        object.__setattr__(self, "values", v)

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.values.shape


@dataclass(frozen=True)
class NormStats:
    mean: np.ndarray
    std: np.ndarray
    eps: float = 1e-8

    def __post_init__(self):
        if self.eps <= 0:
            raise ValueError("eps must be positive")
        if np.any(np.asarray(self.std) < 0):
            raise ValueError("std must be nonnegative")

    @property
    def scale(self) -> np.ndarray:
        return self.std + self.eps


def instance_normalize(X: np.ndarray, eps: float = 1e-8) -> tuple[np.ndarray, NormStats]:
    X = np.asarray(X, dtype=np.float64)
    mu = X.mean(axis=0)
    sd = X.std(axis=0)  # population std
    return (X - mu) / (sd + eps), NormStats(mu, sd, eps)


def denormalize(qf: QuantileForecast | np.ndarray, stats: NormStats):
    """Invert the per-channel affine map on every level and horizon step."""
    raw = qf.values if isinstance(qf, QuantileForecast) else np.asarray(qf, dtype=np.float64)
    C = np.shape(stats.mean)[0] if np.ndim(stats.mean) else 1
    if raw.shape[-1] != C:
        raise ValueError(f"forecast has {raw.shape[-1]} channels, stats have {C}")
    out = raw * stats.scale + stats.mean
    if isinstance(qf, QuantileForecast):
        return QuantileForecast(out, qf.levels)
    return out


def periodicity_features(anchors, P: int) -> np.ndarray:
    """``[sin(2 pi t / P), cos(2 pi t / P)]`` per anchor, shape (n, 2)."""
    if int(P) < 1:
        raise ValueError("period P must be >= 1")
    t = np.asarray(anchors, dtype=np.int64)
    # reduce mod P first so that t and t+P map to bitwise-identical features
    phase = 2.0 * np.pi * (t % P).astype(np.float64) / P
    return np.stack([np.sin(phase), np.cos(phase)], axis=-1)


def _check_same(Y, Yhat):
    Y = np.asarray(Y, dtype=np.float64)
    Yhat = np.asarray(Yhat, dtype=np.float64)
    if Y.shape != Yhat.shape:
        raise ValueError(f"shape mismatch: {Y.shape} vs {Yhat.shape}")
    return Y, Yhat


def mse(Y, Yhat) -> float:
    Y, Yhat = _check_same(Y, Yhat)
    return float(np.mean((Y - Yhat) ** 2))


def mae(Y, Yhat) -> float:
    Y, Yhat = _check_same(Y, Yhat)
    return float(np.mean(np.abs(Y - Yhat)))


def pinball_values(Qhat: np.ndarray, Y: np.ndarray, levels: np.ndarray) -> np.ndarray:
    """Elementwise rho_q(z, y) = (y - z)(q - 1[y < z]) for Qhat (..., Q, H, C)."""
    q = np.asarray(levels, dtype=np.float64)[:, None, None]
    Y = np.asarray(Y)[..., None, :, :]
    diff = Y - Qhat
    return diff * (q - (diff < 0))


def mean_pinball(qf: QuantileForecast, Y) -> float:
    Y = np.asarray(Y, dtype=np.float64)
    if Y.shape != qf.values.shape[1:]:
        raise ValueError(f"shape mismatch: truth {Y.shape} vs forecast {qf.values.shape[1:]}")
    return float(np.mean(pinball_values(qf.values, Y, qf.levels.as_array())))


def crps_approx(qf: QuantileForecast, Y) -> float:
    """CRPS approximated by twice the mean pinball loss over the level grid."""
    return 2.0 * mean_pinball(qf, Y)


def point_from_quantiles(qf: QuantileForecast) -> np.ndarray:
    lv = qf.levels.as_array()
    hit = np.flatnonzero(lv == 0.5)
    if hit.size:
        return qf.values[hit[0]].copy()
    below = np.flatnonzero(lv < 0.5)
    above = np.flatnonzero(lv > 0.5)
    if not below.size or not above.size:
        raise ValueError("cannot extract a median: all levels lie on one side of 0.5")
    a, b = below[-1], above[0]
    w = (0.5 - lv[a]) / (lv[b] - lv[a])
    return qf.values[a] + w * (qf.values[b] - qf.values[a])
