"""Independent reference implementations used by the tests.

Each oracle recomputes a quantity the slow, obvious way, sharing no code
with the package beyond plain data containers.
"""

import itertools
import math

import numpy as np
from scipy.optimize import minimize


# --- distances -------------------------------------------------------------------


def quadratic_form(a, b, cov):
    d = np.asarray(a, float) - np.asarray(b, float)
    return math.sqrt(max(d @ np.linalg.solve(cov, d), 0.0))


def orig_orig_distance(a, b, cov, lower, upper):
    """Largest distance over in-range completions: enumerate box corners of
    the missing cells of both rows."""
    a, b = np.asarray(a, float), np.asarray(b, float)
    slots = [("a", c) for c in np.flatnonzero(np.isnan(a))] + [("b", c) for c in np.flatnonzero(np.isnan(b))]
    best = -1.0
    for corner in itertools.product((0, 1), repeat=len(slots)):
        x, y = a.copy(), b.copy()
        for (side, c), k in zip(slots, corner):
            (x if side == "a" else y)[c] = upper[c] if k else lower[c]
        best = max(best, quadratic_form(x, y, cov))
    return best


def synth_orig_distance(a, b, cov, lower, upper):
    """Smallest distance over in-range completions, by bounded numerical
    minimization over the missing cells."""
    a, b = np.asarray(a, float), np.asarray(b, float)
    slots = [("a", c) for c in np.flatnonzero(np.isnan(a))] + [("b", c) for c in np.flatnonzero(np.isnan(b))]
    if not slots:
        return quadratic_form(a, b, cov)
    P = np.linalg.inv(cov)

    def f(z):
        x, y = a.copy(), b.copy()
        for (side, c), v in zip(slots, z):
            (x if side == "a" else y)[c] = v
        d = x - y
        return d @ P @ d

    bounds = [(lower[c], upper[c]) for _, c in slots]
    best = np.inf
    for start in ([(lo + hi) / 2 for lo, hi in bounds], [lo for lo, _ in bounds], [hi for _, hi in bounds]):
        res = minimize(f, start, bounds=bounds, method="L-BFGS-B", options={"ftol": 1e-14, "gtol": 1e-12})
        best = min(best, res.fun)
    return math.sqrt(max(best, 0.0))


def retention_violations(orig_X, synth_X, retained, cov, rel_tol=1e-9):
    """Rows marked retained that break the rule under an all-pairs loop.

    Complete data only. ``o*`` is the nearest original (lowest index among
    ties within ``rel_tol``); ``d_o`` its nearest other original.
    """
    n_o = len(orig_X)
    D_oo = np.array([[quadratic_form(orig_X[i], orig_X[j], cov) for j in range(n_o)] for i in range(n_o)])
    np.fill_diagonal(D_oo, np.inf)
    d_o = D_oo.min(axis=1)
    bad = []
    for s, row in enumerate(synth_X):
        d = np.array([quadratic_form(row, orig_X[j], cov) for j in range(n_o)])
        star = int(np.flatnonzero(d <= d.min() * (1 + rel_tol) + 1e-300)[0])
        should_keep = not d[star] < d_o[star] * (1 - rel_tol)
        clearly_drop = d[star] < d_o[star] * (1 - rel_tol)
        if retained[s] and clearly_drop:
            bad.append(s)
        if not retained[s] and should_keep and d[star] > d_o[star] * (1 + rel_tol):
            bad.append(s)
    return bad


# --- ECAP ------------------------------------------------------------------------


def simulate_attack(x_a, x_minus, x_plus, N, n, sigma, dist, trials, rng):
    """Direct simulation of the membership event behind the ECAP.

    Each trial draws ``n`` population units (``x_a`` with probability 1/N,
    otherwise a draw from ``dist`` outside ``[x_minus, x_plus]``), adds
    N(0, sigma^2) noise, and keeps trials where some released value falls in
    ``I1``. Returns (P(x_a sampled | kept), standard error, kept trials).
    """
    a, b = (x_a + x_minus) / 2, (x_a + x_plus) / 2
    is_a = rng.random((trials, n)) < 1.0 / N
    values = np.empty((trials, n))
    need = ~is_a
    values[is_a] = x_a
    k = int(need.sum())
    draws = np.empty(0)
    while draws.size < k:
        d = dist.rvs(size=2 * (k - draws.size) + 100, random_state=rng)
        draws = np.concatenate([draws, d[(d < x_minus) | (d > x_plus)]])
    values[need] = draws[:k]
    released = values + rng.normal(0.0, sigma, (trials, n))
    hit = ((released >= a) & (released <= b)).any(axis=1)
    member = is_a.any(axis=1)
    kept = int(hit.sum())
    p = member[hit].mean()
    return float(p), float(math.sqrt(p * (1 - p) / kept)), kept


def ecap_formula(N, n, p_out_i1, p_noise_out_i2):
    """ECAP written out literally, with no guards against cancellation."""
    return 1 - (((N - 1) / N) ** n - (p_out_i1 - p_noise_out_i2 / N) ** n) / (1 - p_out_i1**n)


# --- TCAP ------------------------------------------------------------------------


def tcap_by_counting(orig_rows, synth_rows, keys, targets):
    """Mean normalized TCAP over key-unique original rows, all-categorical.

    Rows are dicts; missing is ``None`` and compares as its own value. Rows
    whose normalization is degenerate are skipped. Returns (mean, n_uniques,
    values) with exact fractions.
    """
    from fractions import Fraction

    def k(r):
        return tuple(r[v] for v in keys)

    def t(r):
        return tuple(r[v] for v in targets)

    counts = {}
    for r in orig_rows:
        counts[k(r)] = counts.get(k(r), 0) + 1
    uniques = [r for r in orig_rows if counts[k(r)] == 1]
    values = []
    for r in uniques:
        base = Fraction(sum(t(o) == t(r) for o in orig_rows), len(orig_rows))
        o_match = [o for o in orig_rows if k(o) == k(r)]
        orig_val = Fraction(sum(t(o) == t(r) for o in o_match), len(o_match))
        s_match = [s for s in synth_rows if k(s) == k(r)]
        synth_val = Fraction(sum(t(s) == t(r) for s in s_match), len(s_match)) if s_match else Fraction(0)
        if orig_val == base:
            continue
        values.append((synth_val - base) / (orig_val - base))
    mean = sum(values) / len(values) if values else None
    return mean, len(uniques), values
