"""Offline kNN teacher.

For every training window the teacher looks up similar contexts in a
knowledge base built from the training segment only, shifts each neighbour
onto the query's level, keeps the K best by aligned L1 distance and turns
their aligned futures into weighted empirical quantiles. The largest
retrieval weight doubles as a confidence score.
"""

from __future__ import annotations

import logging
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Optional, Protocol, Sequence

import numpy as np

from .series import QuantileLevels, WindowPair

log = logging.getLogger(__name__)


class LeakageError(ValueError):
    pass


class NoNeighborsError(LookupError):
    def __init__(self, anchor: int):
        super().__init__(f"no admissible neighbors for query anchor {anchor}")
        self.anchor = anchor


class Embedder(Protocol):
    def embed(self, context: np.ndarray) -> np.ndarray: ...

    def embed_batch(self, contexts: np.ndarray) -> np.ndarray: ...


@dataclass(frozen=True)
class PatchMeanEmbedder:
    """Patch means of the instance-normalized context, channels concatenated."""

    n_patches: int = 8
    eps: float = 1e-8

    def _edges(self, L: int) -> np.ndarray:
        F = self.n_patches
        if L < F:
            warnings.warn(f"lookback {L} < {F} patches; using {L} patches", RuntimeWarning, stacklevel=3)
            F = L
        size = L // F
        edges = np.arange(F + 1) * size
        edges[-1] = L  # last patch absorbs the remainder
        return edges

    def embed_batch(self, contexts: np.ndarray) -> np.ndarray:
        X = np.asarray(contexts, dtype=np.float64)  # N x L x C
        mu = X.mean(axis=1, keepdims=True)
        sd = X.std(axis=1, keepdims=True)
        Z = (X - mu) / (sd + self.eps)
        edges = self._edges(X.shape[1])
        sums = np.add.reduceat(Z, edges[:-1], axis=1)  # N x F x C
        means = sums / np.diff(edges)[None, :, None]
        # channel-major: all patches of channel 0, then channel 1, ...
        return np.ascontiguousarray(means.transpose(0, 2, 1)).reshape(X.shape[0], -1)

    def embed(self, context: np.ndarray) -> np.ndarray:
        return self.embed_batch(np.asarray(context)[None])[0]


def default_embed(context: np.ndarray, n_patches: int = 8) -> np.ndarray:
    return PatchMeanEmbedder(n_patches).embed(context)


@dataclass(frozen=True)
class RetrievalConfig:
    K: int = 16
    K_cand: int = 64
    m: Optional[int] = None  # None -> min(L, 24)
    tau: float = 1.0
    psi: str = "identity"
    standardize: bool = True

    def __post_init__(self):
        if self.K < 1:
            raise ValueError("K must be >= 1")
        if self.K_cand < self.K:
            raise ValueError("K_cand must be >= K")
        if self.tau <= 0:
            raise ValueError("tau must be positive")
        if self.psi not in ("identity", "squared"):
            raise ValueError(f"unknown distance transform {self.psi!r}")
        if self.m is not None and self.m < 1:
            raise ValueError("m must be >= 1")

    def trailing(self, L: int) -> int:
        m = min(L, 24) if self.m is None else self.m
        if m > L:
            raise ValueError(f"trailing length m={m} exceeds lookback L={L}")
        return m

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class KnowledgeBase:
    anchors: np.ndarray    # N
    contexts: np.ndarray   # N x L x C
    futures: np.ndarray    # N x H x C
    embeddings: np.ndarray  # N x D
    segment: tuple[int, int]
    split: str = "train"

    def __len__(self) -> int:
        return int(self.anchors.shape[0])

    @property
    def lookback(self) -> int:
        return self.contexts.shape[1]

    @property
    def horizon(self) -> int:
        return self.futures.shape[1]

    def tiled(self, factor: int) -> "KnowledgeBase":
        """Replicate entries ``factor`` times; for latency scaling only."""
        rep = lambda a: np.concatenate([a] * factor, axis=0)  # noqa: E731
        return KnowledgeBase(rep(self.anchors), rep(self.contexts), rep(self.futures),
                             rep(self.embeddings), self.segment, self.split)


def build_knowledge_base(train_windows: Sequence[WindowPair], embedder: Embedder,
                         segment: tuple[int, int], split: str = "train") -> KnowledgeBase:
    lo, hi = segment
    for w in train_windows:
        a, b = w.span
        if a < lo or b >= hi:
            raise LeakageError(f"window at anchor {w.anchor} spans rows [{a}, {b}] outside "
                               f"the {split} segment [{lo}, {hi})")
    if not train_windows:
        log.warning("knowledge base is empty")
        return KnowledgeBase(np.zeros(0, dtype=np.int64), np.zeros((0, 0, 0)), np.zeros((0, 0, 0)),
                             np.zeros((0, 0)), segment, split)
    ctx = np.stack([w.context for w in train_windows])
    fut = np.stack([w.future for w in train_windows])
    anchors = np.array([w.anchor for w in train_windows], dtype=np.int64)
    return KnowledgeBase(anchors, ctx, fut, embedder.embed_batch(ctx), segment, split)


@dataclass
class Candidates:
    indices: np.ndarray  # positions into the KB
    distances: np.ndarray


def _admissible(kb: KnowledgeBase, span: tuple[int, int]) -> np.ndarray:
    lo_q, hi_q = span
    lo_i = kb.anchors - kb.lookback + 1
    hi_i = kb.anchors + kb.horizon
    return (hi_i < lo_q) | (lo_i > hi_q)


def _smallest(d: np.ndarray, k: int) -> np.ndarray:
    """Positions of the k smallest finite entries, ties to the smaller position."""
    finite = int(np.isfinite(d).sum())
    k = min(k, finite)
    if k == 0:
        return np.zeros(0, dtype=np.int64)
    if d.size > 4 * k:
        kth = np.partition(d, k - 1)[k - 1]
        sel = np.flatnonzero(d <= kth)
    else:
        sel = np.flatnonzero(np.isfinite(d))
    return sel[np.lexsort((sel, d[sel]))][:k]


def retrieve_candidates(query: WindowPair, kb: KnowledgeBase, cfg: RetrievalConfig,
                        embedding: Optional[np.ndarray] = None,
                        embedder: Optional[Embedder] = None,
                        span: Optional[tuple[int, int]] = None) -> Candidates:
    """Euclidean search over the KB excluding entries that overlap the query span."""
    if embedding is None:
        embedding = (embedder or PatchMeanEmbedder()).embed(query.context)
    if len(kb) == 0:
        raise NoNeighborsError(query.anchor)
    diff = kb.embeddings - embedding
    d = np.sqrt(np.einsum("nd,nd->n", diff, diff))
    d = np.where(_admissible(kb, span or query.span), d, np.inf)
    idx = _smallest(d, cfg.K_cand)
    if idx.size == 0:
        raise NoNeighborsError(query.anchor)
    return Candidates(idx, d[idx])


def compute_shift(X_t: np.ndarray, X_i: np.ndarray, m: int) -> np.ndarray:
    """Trailing-mean level difference over the last m rows, per channel."""
    return X_t[..., -m:, :].mean(axis=-2) - X_i[..., -m:, :].mean(axis=-2)


def align_candidate(context: np.ndarray, future: np.ndarray, s: np.ndarray):
    s = np.asarray(s)[..., None, :]
    return context + s, future + s


@dataclass
class NeighborSet:
    indices: np.ndarray
    distances: np.ndarray
    shifts: np.ndarray           # K x C
    aligned_context: np.ndarray  # K x L x C
    aligned_future: np.ndarray   # K x H x C
    scores: np.ndarray
    requested_k: int = 0

    @property
    def effective_k(self) -> int:
        return int(self.indices.shape[0])


def rerank_truncate(query_context: np.ndarray, candidates: Candidates, K: int,
                    kb: Optional[KnowledgeBase] = None, m: Optional[int] = None,
                    aligned: Optional[tuple[np.ndarray, np.ndarray, np.ndarray]] = None) -> NeighborSet:
    """Keep the K candidates with the smallest aligned-context L1 distance.

    Either pass ``kb`` and ``m`` (alignment is done here) or precomputed
    ``aligned = (shifts, aligned_contexts, aligned_futures)``.
    """
    if aligned is None:
        ctx = kb.contexts[candidates.indices]
        fut = kb.futures[candidates.indices]
        s = compute_shift(query_context, ctx, m)
        xa, ya = align_candidate(ctx, fut, s)
    else:
        s, xa, ya = aligned
    scores = np.abs(query_context[None] - xa).sum(axis=(1, 2))
    order = np.lexsort((candidates.indices, candidates.distances, scores))[:K]
    return NeighborSet(candidates.indices[order], candidates.distances[order], s[order],
                       xa[order], ya[order], scores[order], K)


def transformed_distances(d: np.ndarray, psi: str = "identity", standardize: bool = True) -> np.ndarray:
    d = np.asarray(d, dtype=np.float64)
    if standardize:
        pos = d[d > 0]
        if pos.size:
            d = d / np.median(pos)
    if psi == "identity":
        return d
    if psi == "squared":
        return d * d
    raise ValueError(f"unknown distance transform {psi!r}")


def retrieval_weights(d: np.ndarray, psi: str = "identity", tau: float = 1.0,
                      standardize: bool = True) -> np.ndarray:
    if tau <= 0:
        raise ValueError("tau must be positive")
    z = -transformed_distances(d, psi, standardize) / tau
    z = z - z.max()
    e = np.exp(z)
    return e / e.sum()


def weighted_empirical_quantile(values, weights, q: float) -> float:
    """Left weighted quantile: the sorted value where cumulative weight first reaches q."""
    v = np.asarray(values, dtype=np.float64)
    w = np.asarray(weights, dtype=np.float64)
    if v.size == 0:
        raise ValueError("weighted quantile of an empty sample")
    order = np.argsort(v, kind="stable")
    cum = np.cumsum(w[order])
    m = min(int(np.count_nonzero(cum < q)), v.size - 1)
    return float(v[order[m]])


def aggregate_teacher(neighbors: NeighborSet | np.ndarray, weights: np.ndarray,
                      levels: QuantileLevels) -> np.ndarray:
    """Weighted empirical quantiles of aligned futures at every (level, h, c)."""
    V = neighbors.aligned_future if isinstance(neighbors, NeighborSet) else np.asarray(neighbors)
    K = V.shape[0]
    if K == 0:
        raise ValueError("cannot aggregate an empty neighbor set")
    order = np.argsort(V, axis=0, kind="stable")
    sv = np.take_along_axis(V, order, axis=0)
    cum = np.cumsum(np.asarray(weights)[order], axis=0)
    q = levels.as_array()[:, None, None, None]
    m = np.minimum(np.count_nonzero(cum[None] < q, axis=1), K - 1)  # Q x H x C
    return np.take_along_axis(sv, m, axis=0)


def confidence(weights: np.ndarray) -> float:
    return float(np.max(weights))


@dataclass
class TeacherRecord:
    anchor: int
    context: np.ndarray
    future: np.ndarray
    quantiles: np.ndarray  # Q x H x C
    conf: float
    neighbor_anchors: tuple[int, ...] = field(default=(), repr=False, compare=False)


def query_teacher(context: np.ndarray, anchor: int, span: tuple[int, int], embedding: np.ndarray,
                  kb: KnowledgeBase, cfg: RetrievalConfig, levels: QuantileLevels):
    """Full retrieval pipeline for one query: (quantiles, confidence, neighbors)."""
    cands = retrieve_candidates(WindowPair(anchor, context, np.zeros((0, 0))), kb, cfg,
                                embedding=embedding, span=span)
    nbrs = rerank_truncate(context, cands, cfg.K, kb=kb, m=cfg.trailing(context.shape[0]))
    w = retrieval_weights(nbrs.distances, cfg.psi, cfg.tau, cfg.standardize)
    return aggregate_teacher(nbrs, w, levels), confidence(w), nbrs


@dataclass
class TeacherDataset:
    records: list[TeacherRecord]
    levels: QuantileLevels
    skipped: int = 0
    config: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def __getitem__(self, i):
        return self.records[i]

    @property
    def anchors(self) -> list[int]:
        return [r.anchor for r in self.records]


def build_teacher_dataset(train_windows: Sequence[WindowPair], kb: KnowledgeBase, embedder: Embedder,
                          cfg: RetrievalConfig, levels: QuantileLevels, threads: int = 1) -> TeacherDataset:
    if not train_windows:
        raise ValueError("teacher dataset empty: no training windows")
    embs = embedder.embed_batch(np.stack([w.context for w in train_windows]))

    def one(i):
        w = train_windows[i]
        try:
            qt, conf, nbrs = query_teacher(w.context, w.anchor, w.span, embs[i], kb, cfg, levels)
        except NoNeighborsError:
            return None
        return TeacherRecord(w.anchor, w.context, w.future, qt, conf,
                             tuple(int(a) for a in kb.anchors[nbrs.indices]))

    idx = range(len(train_windows))
    if threads > 1:
        with ThreadPoolExecutor(threads) as ex:
            outs = list(ex.map(one, idx))
    else:
        outs = [one(i) for i in idx]
    records = [r for r in outs if r is not None]
    skipped = len(outs) - len(records)
    if not records:
        raise ValueError("teacher dataset empty: no window had an admissible neighbor")
    if skipped:
        log.info("teacher: skipped %d windows without neighbors", skipped)
    records.sort(key=lambda r: r.anchor)
    return TeacherDataset(records, levels, skipped, cfg.to_dict())
