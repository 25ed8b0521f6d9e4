"""Frozen reference forecasters and a cache of their outputs.

Both reference backbones are deliberately simple: a point rule plus a fixed
residual quantile band learned on the train segment. They never see data
after the fit, which is what makes them usable as stand-ins for a frozen
pretrained model.
"""

from __future__ import annotations

import hashlib
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional, Protocol, Sequence

import numpy as np

from .series import QuantileForecast, QuantileLevels, SeriesFrame, WindowPair


class NotFittedError(RuntimeError):
    pass


class FrozenForecaster(Protocol):
    levels: QuantileLevels
    horizon: int

    def forecast(self, context: np.ndarray) -> QuantileForecast: ...

    def fingerprint(self) -> bytes: ...


def _fingerprint(kind: str, params: dict, levels: QuantileLevels) -> bytes:
    h = hashlib.sha256()
    h.update(kind.encode())
    h.update(np.asarray(levels.levels, dtype="<f8").tobytes())
    for key in sorted(params):
        h.update(key.encode())
        h.update(np.ascontiguousarray(params[key], dtype="<f8").tobytes())
    return h.digest()


def _as_array(train) -> np.ndarray:
    if isinstance(train, SeriesFrame):
        return train.values
    if isinstance(train, (list, tuple)):
        return np.concatenate([_as_array(x) for x in train], axis=0) if len(train) > 1 else _as_array(train[0])
    return np.asarray(train, dtype=np.float64)


def _seasonal_index(L: int, P: int, H: int) -> np.ndarray:
    # context row feeding forecast step h (1-based): the last full cycle, repeated
    h = np.arange(1, H + 1)
    return L - P + (h - 1) % P


@dataclass
class SeasonalNaiveBackbone:
    period: int
    horizon: int
    levels: QuantileLevels
    offsets: Optional[np.ndarray] = None  # Q x H x C

    kind = "seasonal_naive"

    def point(self, context: np.ndarray) -> np.ndarray:
        L = context.shape[0]
        if L < self.period:
            raise ValueError(f"context length {L} shorter than period {self.period}")
        return context[_seasonal_index(L, self.period, self.horizon)]

    def forecast(self, context: np.ndarray) -> QuantileForecast:
        if self.offsets is None:
            raise NotFittedError("seasonal-naive backbone used before fit")
        context = np.asarray(context, dtype=np.float64)
        if context.ndim != 2 or context.shape[1] != self.offsets.shape[2]:
            raise ValueError(f"context must be L x {self.offsets.shape[2]}, got {context.shape}")
        return QuantileForecast(self.point(context)[None] + self.offsets, self.levels)

    def fingerprint(self) -> bytes:
        return _fingerprint(self.kind, {"period": [self.period], "horizon": [self.horizon],
                                        "offsets": self.offsets}, self.levels)

    def to_dict(self) -> dict:
        return {"kind": self.kind, "period": self.period, "horizon": self.horizon,
                "levels": list(self.levels.levels), "offsets": self.offsets.tolist()}


@dataclass
class PersistenceBackbone:
    horizon: int
    levels: QuantileLevels
    offsets: Optional[np.ndarray] = None  # Q x H x C

    kind = "persistence"

    def forecast(self, context: np.ndarray) -> QuantileForecast:
        if self.offsets is None:
            raise NotFittedError("persistence backbone used before fit")
        context = np.asarray(context, dtype=np.float64)
        if context.ndim != 2 or context.shape[1] != self.offsets.shape[2]:
            raise ValueError(f"context must be L x {self.offsets.shape[2]}, got {context.shape}")
        point = np.broadcast_to(context[-1], (self.horizon, context.shape[1]))
        return QuantileForecast(point[None] + self.offsets, self.levels)

    def fingerprint(self) -> bytes:
        return _fingerprint(self.kind, {"horizon": [self.horizon], "offsets": self.offsets}, self.levels)

    def to_dict(self) -> dict:
        return {"kind": self.kind, "horizon": self.horizon,
                "levels": list(self.levels.levels), "offsets": self.offsets.tolist()}


def _empirical_offsets(resid: np.ndarray, levels: QuantileLevels) -> np.ndarray:
    """Residual quantiles per (h, c), shifted so the median level sits at 0."""
    q = np.quantile(resid, levels.as_array(), axis=0)  # Q x H x C, ascending in Q
    q = q - q[levels.median_index]
    # np.quantile is monotone in the level up to rounding; make it exact
    return np.maximum.accumulate(q, axis=0)


def fit_seasonal_naive(train, P: int, levels: QuantileLevels, horizon: int) -> SeasonalNaiveBackbone:
    X = _as_array(train)
    n = X.shape[0]
    if P < 1:
        raise ValueError("period must be >= 1")
    if n < P + horizon:
        raise ValueError(f"insufficient data to fit seasonal-naive: need >= P+H={P + horizon} rows, got {n}")
    anchors = np.arange(P - 1, n - horizon)
    h = np.arange(1, horizon + 1)
    src = anchors[:, None] - P + 1 + (h[None, :] - 1) % P
    resid = X[anchors[:, None] + h[None, :]] - X[src]  # N x H x C
    return SeasonalNaiveBackbone(P, horizon, levels, _empirical_offsets(resid, levels))


def fit_persistence(train, levels: QuantileLevels, horizon: int) -> PersistenceBackbone:
    X = _as_array(train)
    n = X.shape[0]
    if n < horizon + 1:
        raise ValueError(f"insufficient data to fit persistence: need >= H+1={horizon + 1} rows, got {n}")
    anchors = np.arange(0, n - horizon)
    h = np.arange(1, horizon + 1)
    resid = X[anchors[:, None] + h[None, :]] - X[anchors][:, None, :]
    lv = levels.as_array()
    up = np.quantile(resid, lv, axis=0)
    down = np.quantile(resid, 1.0 - lv, axis=0)
    band = 0.5 * (up - down)  # antisymmetric in q, exactly 0 at q = 0.5
    band = np.maximum.accumulate(band, axis=0)
    if 0.5 in levels.levels:
        band[levels.median_index] = 0.0
    return PersistenceBackbone(horizon, levels, band)


def backbone_from_dict(d: dict):
    levels = QuantileLevels(tuple(d["levels"]))
    off = np.asarray(d["offsets"], dtype=np.float64)
    if d["kind"] == "seasonal_naive":
        return SeasonalNaiveBackbone(int(d["period"]), int(d["horizon"]), levels, off)
    if d["kind"] == "persistence":
        return PersistenceBackbone(int(d["horizon"]), levels, off)
    raise ValueError(f"unknown backbone kind {d['kind']!r}")


def save_backbone(backbone, path) -> None:
    # repr-based floats in JSON round-trip exactly
    with open(path, "w") as fh:
        json.dump(backbone.to_dict(), fh)


def load_backbone(path):
    with open(path) as fh:
        return backbone_from_dict(json.load(fh))


def forecast(backbone: FrozenForecaster, context: np.ndarray) -> QuantileForecast:
    return backbone.forecast(context)


@dataclass
class ForecastCache:
    fingerprint: bytes
    entries: dict[int, np.ndarray] = field(default_factory=dict)
    levels: Optional[QuantileLevels] = None

    def __len__(self) -> int:
        return len(self.entries)

    def __contains__(self, anchor: int) -> bool:
        return anchor in self.entries

    def get(self, anchor: int) -> QuantileForecast:
        return QuantileForecast(self.entries[anchor], self.levels)

    def array(self, anchors: Sequence[int]) -> np.ndarray:
        return np.stack([self.entries[a] for a in anchors])

    def check(self, backbone: FrozenForecaster) -> None:
        if backbone.fingerprint() != self.fingerprint:
            raise ValueError("forecast cache fingerprint does not match backbone; cache is stale")


def precompute_cache(backbone: FrozenForecaster, windows: Sequence[WindowPair],
                     threads: int = 1) -> ForecastCache:
    uniq = {}
    for w in windows:
        uniq.setdefault(w.anchor, w)
    anchors = sorted(uniq)

    def run(a):
        return backbone.forecast(uniq[a].context).values

    if threads > 1 and len(anchors) > 1:
        with ThreadPoolExecutor(threads) as ex:
            outs = list(ex.map(run, anchors))
    else:
        outs = [run(a) for a in anchors]
    return ForecastCache(backbone.fingerprint(), dict(zip(anchors, outs)), backbone.levels)
