"""Test-time retrieval surrogate: run the teacher pipeline per query and blend with the backbone."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .fusion import alpha_grid, argmin_conservative, fuse
from .series import QuantileForecast, QuantileLevels, WindowPair, pinball_values
from .teacher import Embedder, KnowledgeBase, NoNeighborsError, PatchMeanEmbedder, RetrievalConfig, query_teacher

log = logging.getLogger(__name__)


@dataclass
class OnlineRetrievalForecaster:
    kb: KnowledgeBase
    cfg: RetrievalConfig
    backbone: object
    levels: QuantileLevels
    beta: float = 0.5
    embedder: Embedder = field(default_factory=PatchMeanEmbedder)
    fallbacks: int = 0

    def query_span(self, anchor: int, L: int) -> tuple[int, int]:
        # the future is unknown at test time, so exclude the whole span it would occupy
        return anchor - L + 1, anchor + self.kb.horizon

    def retrieve(self, context: np.ndarray, anchor: int) -> Optional[np.ndarray]:
        """Retrieved quantiles Q x H x C, or None when no neighbor is admissible."""
        emb = self.embedder.embed(context)
        try:
            qt, _, _ = query_teacher(context, anchor, self.query_span(anchor, context.shape[0]), emb,
                                     self.kb, self.cfg, self.levels)
        except NoNeighborsError:
            return None
        return qt

    def combine(self, base: np.ndarray, ret: Optional[np.ndarray], beta: Optional[float] = None) -> np.ndarray:
        if ret is None:
            self.fallbacks += 1
            log.warning("online retrieval found no neighbors; falling back to the backbone")
            return base
        return fuse(base, ret, self.beta if beta is None else beta)

    def online_forecast(self, context: np.ndarray, anchor: int) -> QuantileForecast:
        base = self.backbone.forecast(context).values
        return QuantileForecast(self.combine(base, self.retrieve(context, anchor)), self.levels)

    def tune_beta(self, val_windows: Sequence[WindowPair], grid: Optional[Sequence[float]] = None) -> float:
        if not val_windows:
            raise ValueError("empty validation set")
        grid = alpha_grid(0.05) if grid is None else np.asarray(sorted(grid), dtype=np.float64)
        lv = self.levels.as_array()
        Y = np.stack([w.future for w in val_windows])
        base = np.stack([self.backbone.forecast(w.context).values for w in val_windows])
        rets = [self.retrieve(w.context, w.anchor) for w in val_windows]
        ret = np.stack([b if r is None else r for b, r in zip(base, rets)])
        risks = np.array([np.mean(pinball_values(fuse(base, ret, float(b)), Y, lv)) for b in grid])
        self.beta = float(grid[argmin_conservative(risks)])
        return self.beta


def online_forecast(model: OnlineRetrievalForecaster, context: np.ndarray, anchor: int) -> QuantileForecast:
    return model.online_forecast(context, anchor)


def tune_beta(model: OnlineRetrievalForecaster, val_windows, grid=None) -> float:
    return model.tune_beta(val_windows, grid)
