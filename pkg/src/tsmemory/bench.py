"""Per-query latency of the three inference paths against knowledge-base size.

Protocol: one query at a time, BLAS limited to one thread, time.perf_counter_ns
as the clock. For each KB size we run ``warmup`` untimed queries, then
``queries`` timed ones. Sizes are interleaved query by query so that slow
drift of the machine affects all sizes equally. Each row reports the median
retrieval time and the median forward time; total is their sum, so
retrieval + forward == total holds exactly.
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from threadpoolctl import threadpool_limits

from .fusion import fuse
from .online import OnlineRetrievalForecaster


@dataclass
class LatencyRow:
    method: str
    kb_multiplier: int
    kb_size: int
    retrieval_ms: float
    forward_ms: float

    @property
    def total_ms(self) -> float:
        return self.retrieval_ms + self.forward_ms

    @property
    def retrieval_frac(self) -> float:
        return 100.0 * self.retrieval_ms / self.total_ms if self.total_ms > 0 else 0.0


def write_latency_csv(rows: Sequence[LatencyRow], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["method", "kb_multiplier", "kb_size", "retr_ms", "fwd_ms", "total_ms", "frac_pct"])
        for r in rows:
            w.writerow([r.method, r.kb_multiplier, r.kb_size, f"{r.retrieval_ms:.6f}", f"{r.forward_ms:.6f}",
                        f"{r.total_ms:.6f}", f"{r.retrieval_frac:.2f}"])


def bench_latency(backbone, student, alpha: float, online: OnlineRetrievalForecaster, queries,
                  multipliers: Sequence[int] = (1, 2, 4, 8), warmup: int = 20, n_timed: int = 200,
                  max_kb: int | None = None) -> list[LatencyRow]:
    """``student`` is a StudentModel; ``queries`` a list of WindowPairs cycled through."""
    if not queries:
        raise ValueError("need at least one query window")
    base_kb = online.kb
    sizes = []
    for m in multipliers:
        if max_kb is not None and m * len(base_kb) > max_kb:
            print(f"bench: skipping KB multiplier {m} ({m * len(base_kb)} entries > {max_kb})")
            continue
        sizes.append(m)
    kbs = {m: base_kb.tiled(m) for m in sizes}
    models = {m: OnlineRetrievalForecaster(kbs[m], online.cfg, backbone, online.levels, online.beta,
                                           online.embedder) for m in sizes}
    clock = time.perf_counter_ns

    def memory_path(w):
        t0 = clock()
        qb = backbone.forecast(w.context).values
        qm = student.forward(w.context)[0][0]
        fuse(qb, qm, alpha)
        return 0, clock() - t0

    def backbone_path(w):
        t0 = clock()
        backbone.forecast(w.context)
        return 0, clock() - t0

    def online_path(model):
        def run(w):
            t0 = clock()
            ret = model.retrieve(w.context, w.anchor)
            t1 = clock()
            model.combine(backbone.forecast(w.context).values, ret)
            return t1 - t0, clock() - t1
        return run

    rows = []
    with threadpool_limits(limits=1):
        for name, paths in (("backbone", {m: backbone_path for m in sizes}),
                            ("ts-memory", {m: memory_path for m in sizes}),
                            ("online", {m: online_path(models[m]) for m in sizes})):
            samples = {m: [] for m in sizes}
            for i in range(warmup + n_timed):
                w = queries[i % len(queries)]
                for m in sizes:
                    r, f = paths[m](w)
                    if i >= warmup:
                        samples[m].append((r, f))
            for m in sizes:
                arr = np.asarray(samples[m], dtype=np.float64) / 1e6
                rows.append(LatencyRow(name, m, len(kbs[m]), float(np.median(arr[:, 0])),
                                       float(np.median(arr[:, 1]))))
    return rows
