"""Independent brute-force references used by the tests (plain loops, no shared code)."""

import math

import numpy as np


def rho(z, y, q):
    return (y - z) * (q - (1.0 if y < z else 0.0))


def mse_loop(Y, P):
    Y, P = np.asarray(Y), np.asarray(P)
    tot, n = 0.0, 0
    for h in range(Y.shape[0]):
        for c in range(Y.shape[1]):
            tot += (Y[h, c] - P[h, c]) ** 2
            n += 1
    return tot / n


def mae_loop(Y, P):
    Y, P = np.asarray(Y), np.asarray(P)
    tot, n = 0.0, 0
    for h in range(Y.shape[0]):
        for c in range(Y.shape[1]):
            tot += abs(Y[h, c] - P[h, c])
            n += 1
    return tot / n


def crps_loop(Q, Y, levels):
    tot, n = 0.0, 0
    for j, q in enumerate(levels):
        for h in range(Y.shape[0]):
            for c in range(Y.shape[1]):
                tot += 2.0 * rho(Q[j, h, c], Y[h, c], q)
                n += 1
    return tot / n


def weighted_pinball_risk(z, values, weights, q):
    return sum(w * rho(z, v, q) for v, w in zip(values, weights))


def smallest_pinball_minimizer(values, weights, q, rtol=1e-12):
    """Smallest candidate z in {v_k} minimizing the weighted pinball risk."""
    cands = sorted(set(float(v) for v in values))
    risks = [weighted_pinball_risk(z, values, weights, q) for z in cands]
    best = min(risks)
    for z, r in zip(cands, risks):
        if r <= best + rtol * max(abs(best), 1e-300):
            return z


def central_diff(f, x, h=1e-6):
    """Full finite-difference gradient of scalar f at array x."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + h
        fp = f(x)
        x[i] = old - h
        fm = f(x)
        x[i] = old
        g[i] = (fp - fm) / (2 * h)
    return g


def rel_err(a, b):
    a, b = np.asarray(a).ravel(), np.asarray(b).ravel()
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(a)), np.max(np.abs(b)), 1e-300))


def softmax_conf_lower_bound(tdist, tau):
    s = np.sort(tdist)
    K = len(s)
    gap = s[1] - s[0] if K > 1 else math.inf
    return 1.0 / (1.0 + (K - 1) * math.exp(-gap / tau)) if K > 1 else 1.0
