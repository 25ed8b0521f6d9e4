import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import crps_loop, mae_loop, mse_loop
from tsmemory.backbone import fit_seasonal_naive, precompute_cache
from tsmemory.fusion import (alpha_grid, argmin_conservative, convexity_audit, evaluate, fuse, fuse_points,
                             risk_curve, tune_alpha)
from tsmemory.series import (QuantileForecast, QuantileLevels, SeriesFrame, WindowPair, WindowSpec,
                             make_split_windows, pinball_values)

LV = QuantileLevels.default()


def triples(n, seed, H=4, C=2):
    rng = np.random.default_rng(seed)
    Y = rng.normal(size=(n, H, C))
    Qb = np.sort(rng.normal(size=(n, 9, H, C)), axis=1)
    Qm = np.sort(Y[:, None] + rng.normal(0, 0.5, size=(n, 9, H, C)), axis=1)
    return Qb, Qm, Y


def test_fuse_endpoints_and_midpoint():
    Qb, Qm, _ = triples(3, 0)
    a0, a1 = fuse(Qb, Qm, 0.0), fuse(Qb, Qm, 1.0)
    np.testing.assert_array_equal(a0, Qb)
    np.testing.assert_array_equal(a1, Qm)
    assert a0 is not Qb
    assert fuse(np.full(2, 2.0), np.full(2, 4.0), 0.5)[0] == 3.0
    assert fuse_points(np.zeros(1), np.full(1, 4.0), 0.25)[0] == 1.0
    np.testing.assert_array_equal(fuse_points([1.0, 2.0], [5.0, 6.0], 0.0), [1.0, 2.0])


def test_fuse_errors():
    with pytest.raises(ValueError):
        fuse(np.zeros(2), np.zeros(2), 1.5)
    with pytest.raises(ValueError):
        fuse(np.zeros(2), np.zeros(3), 0.5)
    a = QuantileForecast(np.zeros((9, 1, 1)), LV)
    b = QuantileForecast(np.zeros((3, 1, 1)), QuantileLevels((0.1, 0.5, 0.9)))
    with pytest.raises(ValueError, match="quantile grid"):
        fuse(a, b, 0.5)
    assert isinstance(fuse(a, a, 0.3), QuantileForecast)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10**6), st.floats(0, 1))
def test_fuse_preserves_monotonicity(seed, alpha):
    Qb, Qm, _ = triples(5, seed)
    assert np.all(np.diff(fuse(Qb, Qm, alpha), axis=1) >= 0)


def test_convexity_audit_random():
    Qb, Qm, Y = triples(1000, 1)
    rep = convexity_audit(Qb, Qm, Y, LV, np.linspace(0, 1, 11))
    assert rep.passed and rep.max_excess <= 1e-12


def test_convexity_audit_endpoints_equal():
    Qb, Qm, Y = triples(50, 2)
    rep = convexity_audit(Qb, Qm, Y, LV, [0.0, 1.0], atol=0.0)
    assert rep.passed


def test_convexity_audit_reports_offending_anchor():
    # a negative tolerance flags every window, which exercises the failure report
    Qb, Qm, Y = triples(4, 3)
    rep = convexity_audit(Qb, Qm, Y, LV, [0.5], anchors=[10, 11, 12, 13], atol=-1.0)
    assert not rep.passed and {v[0] for v in rep.violations} == {10, 11, 12, 13}


def test_alpha_grid_and_ties():
    g = alpha_grid(0.05)
    assert len(g) == 21 and g[0] == 0.0 and g[-1] == 1.0 and g[10] == 0.5
    with pytest.raises(ValueError):
        alpha_grid(0.3)
    assert argmin_conservative(np.array([2.0, 1.0, 1.0, 3.0])) == 1
    assert argmin_conservative(np.array([1.0 + 1e-15, 1.0])) == 0


def _val_windows(n=30, H=4, C=2, seed=4):
    rng = np.random.default_rng(seed)
    return [WindowPair(i, rng.normal(size=(8, C)), rng.normal(size=(H, C))) for i in range(n)]


def test_tune_alpha_identical_student_is_flat_and_picks_zero():
    ws = _val_windows()
    Qb = np.sort(np.random.default_rng(5).normal(size=(len(ws), 9, 4, 2)), axis=1)
    alpha, curve = tune_alpha(ws, Qb, Qb.copy(), LV)
    assert alpha == 0.0 and np.all(curve.risk == curve.risk[0])


def test_tune_alpha_truth_student_picks_one_and_never_beats_endpoint():
    ws = _val_windows()
    Y = np.stack([w.future for w in ws])
    Qb = np.sort(np.random.default_rng(6).normal(size=(len(ws), 9, 4, 2)), axis=1)
    Qm = np.broadcast_to(Y[:, None], Qb.shape).copy()
    alpha, curve = tune_alpha(ws, {w.anchor: Qb[i] for i, w in enumerate(ws)},
                              lambda X, anchors: Qm, LV, grid_step=0.1)
    assert alpha == 1.0 and curve.risk[-1] == 0.0
    assert curve.risk.min() <= curve.risk[0]
    with pytest.raises(ValueError):
        tune_alpha([], Qb, Qm, LV)


def test_risk_curve_matches_direct_computation(tmp_path):
    Qb, Qm, Y = triples(20, 7)
    grid = alpha_grid(0.25)
    r = risk_curve(Qb, Qm, Y, LV, grid)
    for a, v in zip(grid, r):
        direct = np.mean(pinball_values((1 - a) * Qb + a * Qm, Y, LV.as_array()))
        assert abs(v - direct) < 1e-14


# evaluation -------------------------------------------------------------

def test_metric_oracles_random():
    rng = np.random.default_rng(8)
    from tsmemory.series import crps_approx, mae, mse
    for _ in range(100):
        H, C = rng.integers(1, 6, size=2)
        Y = rng.normal(size=(H, C))
        P = rng.normal(size=(H, C))
        Q = np.sort(rng.normal(size=(9, H, C)), axis=0)
        assert abs(mse(Y, P) - mse_loop(Y, P)) < 1e-9
        assert abs(mae(Y, P) - mae_loop(Y, P)) < 1e-9
        assert abs(crps_approx(QuantileForecast(Q, LV), Y) - crps_loop(Q, Y, LV.levels)) < 1e-9


def _eval_setup():
    t = np.arange(400)[:, None]
    X = np.sin(2 * np.pi * t / 12) + 0.2 * np.random.default_rng(9).normal(size=(400, 2))
    f = SeriesFrame(X, ("a", "b"))
    s = make_split_windows(f, WindowSpec(24, 12), (0.6, 0.2, 0.2))
    bb = fit_seasonal_naive(X[:240], 12, LV, 12)
    return s, bb


def test_oracle_forecaster_scores_zero():
    s, _ = _eval_setup()
    rep = evaluate(s.test, lambda w: QuantileForecast(np.broadcast_to(w.future, (9, 12, 2)), LV), [3, 12])
    for row in rep.rows():
        assert all(row[m] == 0 for m in ("mse", "mae", "crps", "pinball"))


def test_report_averages_and_repeatability(tmp_path):
    s, bb = _eval_setup()
    rep = evaluate(s.test, lambda w: bb.forecast(w.context), [6, 3, 12])
    assert rep.horizons == [3, 6, 12] and rep.n_windows == len(s.test)
    np.testing.assert_allclose([rep.by_horizon[6][m] for m in ("mse", "mae", "crps", "pinball")],
                               rep.per_window[:, 1].mean(axis=0), rtol=1e-14)
    for m in ("mse", "mae", "crps", "pinball"):
        assert rep.avg[m] == pytest.approx(np.mean([rep.by_horizon[h][m] for h in rep.horizons]), rel=1e-14)
    rep.write_csv(tmp_path / "a.csv")
    evaluate(s.test, lambda w: bb.forecast(w.context), [6, 3, 12]).write_csv(tmp_path / "b.csv")
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
    cache = precompute_cache(bb, s.test)
    rep2 = evaluate(s.test, None, [3, 6, 12], batch_forecaster=lambda ws: cache.array([w.anchor for w in ws]),
                    levels=LV)
    np.testing.assert_array_equal(rep2.per_window, rep.per_window)


def test_horizon_prefix_metric_by_hand():
    w = WindowPair(0, np.zeros((4, 1)), np.array([[1.0], [3.0]]))
    q = np.zeros((9, 2, 1))
    rep = evaluate([w], lambda _: QuantileForecast(q, LV), [1, 2])
    assert rep.by_horizon[1]["mse"] == 1.0 and rep.by_horizon[2]["mse"] == 5.0
    assert rep.avg["mse"] == 3.0


def test_evaluate_errors():
    with pytest.raises(ValueError):
        evaluate([], lambda w: None)
    s, bb = _eval_setup()
    with pytest.raises(ValueError):
        evaluate(s.test, lambda w: bb.forecast(w.context), [13])
