import logging

import numpy as np

from tsmemory.backbone import fit_seasonal_naive
from tsmemory.online import OnlineRetrievalForecaster, online_forecast, tune_beta
from tsmemory.series import QuantileLevels, SeriesFrame, WindowSpec, make_split_windows
from tsmemory.teacher import KnowledgeBase, PatchMeanEmbedder, RetrievalConfig, build_knowledge_base

LV = QuantileLevels.default()
EMB = PatchMeanEmbedder()
L, H = 24, 6


def sine_setup(noise=0.0, T=500):
    t = np.arange(T)[:, None]
    X = np.sin(2 * np.pi * t / 12 + np.arange(2)) + noise * np.random.default_rng(0).normal(size=(T, 2))
    s = make_split_windows(SeriesFrame(X, ("a", "b")), WindowSpec(L, H), (0.6, 0.2, 0.2))
    lo, hi = s.bounds["train"]
    return s, fit_seasonal_naive(X[lo:hi], 12, LV, H)


def manual_kb(contexts, futures, anchor0=10**6):
    ctx, fut = np.asarray(contexts), np.asarray(futures)
    anchors = anchor0 + np.arange(len(ctx)) * (L + H + 1)
    return KnowledgeBase(anchors, ctx, fut, EMB.embed_batch(ctx), (0, 10**9))


def test_beta_zero_returns_backbone_verbatim():
    s, bb = sine_setup(noise=0.3)
    kb = build_knowledge_base(s.train, EMB, s.bounds["train"])
    m = OnlineRetrievalForecaster(kb, RetrievalConfig(K=4, K_cand=16), bb, LV, beta=0.0)
    for w in s.test[:10]:
        np.testing.assert_array_equal(m.online_forecast(w.context, w.anchor).values,
                                      bb.forecast(w.context).values)


def test_dominant_analog_collapses_to_its_future():
    s, bb = sine_setup(noise=0.3)
    q = s.test[5]
    rng = np.random.default_rng(1)
    c = np.array([3.0, -7.0])
    ctx = [q.context + c] + [rng.normal(size=(L, 2)) * 3 for _ in range(10)]
    fut = [q.future + c] + [rng.normal(size=(H, 2)) * 3 for _ in range(10)]
    m = OnlineRetrievalForecaster(manual_kb(ctx, fut), RetrievalConfig(K=4, K_cand=8, tau=0.01), bb, LV, 1.0)
    out = online_forecast(m, q.context, q.anchor).values
    np.testing.assert_allclose(out, np.broadcast_to(q.future, out.shape), atol=1e-9)


def test_no_neighbors_falls_back(caplog):
    s, bb = sine_setup()
    q = s.test[0]
    kb = manual_kb([q.context], [q.future], anchor0=q.anchor)  # only entry overlaps the query span
    m = OnlineRetrievalForecaster(kb, RetrievalConfig(K=1, K_cand=1), bb, LV, beta=0.7)
    with caplog.at_level(logging.WARNING):
        out = m.online_forecast(q.context, q.anchor).values
    np.testing.assert_array_equal(out, bb.forecast(q.context).values)
    assert m.fallbacks == 1 and "falling back" in caplog.text


def test_useless_retrieval_gets_beta_zero():
    s, bb = sine_setup()  # noiseless: the backbone is exact
    rng = np.random.default_rng(2)
    kb = manual_kb(rng.normal(size=(50, L, 2)), 5 * rng.normal(size=(50, H, 2)))
    m = OnlineRetrievalForecaster(kb, RetrievalConfig(K=8, K_cand=16), bb, LV, beta=0.5)
    assert tune_beta(m, s.val) == 0.0


def test_helpful_retrieval_gets_positive_beta():
    s, bb = sine_setup(noise=0.0)
    # a backbone with a deliberately biased band; retrieval from clean train windows fixes it
    bb.offsets = bb.offsets + 1.0
    kb = build_knowledge_base(s.train, EMB, s.bounds["train"])
    m = OnlineRetrievalForecaster(kb, RetrievalConfig(K=4, K_cand=16), bb, LV)
    assert m.tune_beta(s.val) > 0.5


def test_query_span_covers_assumed_future():
    s, bb = sine_setup()
    kb = build_knowledge_base(s.train, EMB, s.bounds["train"])
    m = OnlineRetrievalForecaster(kb, RetrievalConfig(), bb, LV)
    assert m.query_span(100, L) == (100 - L + 1, 100 + H)
