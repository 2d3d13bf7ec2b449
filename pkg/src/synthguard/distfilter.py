"""Distance-based filtering of synthetic rows against their nearest original.

A synthetic row is dropped when it lies strictly closer to its nearest
original row ``o*`` than ``o*`` lies to its own nearest original neighbour.
Missing cells are filled pessimistically: original/original distances take
the largest value any in-range completion allows, synthetic/original
distances the smallest.
"""

from __future__ import annotations

import enum
import itertools
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import pandas as pd
from scipy.optimize import lsq_linear
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .cart import CartParams, CartSynthesizer
from .tabular import Dataset, Kind

__all__ = [
    "Metric",
    "PairKind",
    "DistanceSpec",
    "CovarianceModel",
    "JaccardModel",
    "NearSingularError",
    "TargetNotReachedError",
    "fit_covariance",
    "fit_distance_model",
    "distance",
    "worst_case_fill",
    "pair_distances",
    "filter_rows",
    "retention",
    "filtered_synthesize",
    "FilterReport",
    "DistanceFilter",
]

RCOND_THRESHOLD = 1e-8
_MAX_ENUMERATED = 12


class Metric(str, enum.Enum):
    MAHALANOBIS = "mahalanobis"
    JACCARD = "jaccard"


class PairKind(str, enum.Enum):
    ORIG_ORIG = "orig_orig"
    SYNTH_ORIG = "synth_orig"


class NearSingularError(ValueError):
    def __init__(self, message, diagnostics):
        super().__init__(message)
        self.diagnostics = diagnostics


class TargetNotReachedError(RuntimeError):
    def __init__(self, message, report):
        super().__init__(message)
        self.report = report


@dataclass(frozen=True)
class DistanceSpec:
    variables: tuple
    metric: Metric = Metric.MAHALANOBIS
    missing_policy: str = "worst_case"

    def __post_init__(self):
        object.__setattr__(self, "variables", tuple(self.variables))
        object.__setattr__(self, "metric", Metric(self.metric))
        if not self.variables:
            raise ValueError("distance spec needs at least one variable")
        if len(set(self.variables)) != len(self.variables):
            raise ValueError("distance variables must be unique")
        if self.missing_policy != "worst_case":
            raise ValueError("only the worst_case missing policy is supported")

    def validate(self, schema):
        schema.check_names(self.variables)
        for name in self.variables:
            kind = schema[name].kind
            if kind is Kind.NOMINAL:
                raise ValueError(f"{name}: nominal variables must be dichotomized before use in distances")
            if self.metric is Metric.JACCARD and kind is not Kind.BINARY:
                raise ValueError(f"{name}: the Jaccard metric needs binary variables")


@dataclass(frozen=True)
class _Ranges:
    variables: tuple
    lower: np.ndarray
    upper: np.ndarray
    mean: np.ndarray


@dataclass(frozen=True)
class CovarianceModel(_Ranges):
    covariance: np.ndarray = None
    inverse: np.ndarray = None
    determinant: float = math.nan
    rcond: float = math.nan
    correlation: np.ndarray = None
    top_pairs: tuple = ()

    metric = Metric.MAHALANOBIS

    def diagnostics(self) -> dict:
        return {
            "determinant": self.determinant,
            "correlation_determinant": float(np.linalg.det(self.correlation)),
            "rcond": self.rcond,
            "top_correlated_pairs": [list(p) for p in self.top_pairs],
        }


@dataclass(frozen=True)
class JaccardModel(_Ranges):
    metric = Metric.JACCARD

    def diagnostics(self) -> dict:
        return {}


def _ranges(orig: Dataset, variables) -> tuple:
    X = orig.matrix(variables, ranked=True)
    with np.errstate(all="ignore"):
        lower = np.nanmin(X, axis=0)
        upper = np.nanmax(X, axis=0)
        mean = np.nanmean(X, axis=0)
    if np.isnan(lower).any():
        bad = [v for v, lo in zip(variables, lower) if np.isnan(lo)]
        raise ValueError(f"no observed values for {bad}")
    return X, lower, upper, mean


def _top_pairs(corr, variables, k=5):
    iu = np.triu_indices(len(variables), 1)
    vals = corr[iu]
    order = np.argsort(-np.abs(vals), kind="stable")[:k]
    return tuple((variables[iu[0][i]], variables[iu[1][i]], float(vals[i])) for i in order)


def fit_covariance(orig: Dataset, spec: DistanceSpec, rcond_threshold: float = RCOND_THRESHOLD) -> CovarianceModel:
    """Unbiased covariance of the original rows (pairwise-complete cells).

    Raises :class:`NearSingularError` when the reciprocal condition number
    of the correlation matrix is below ``rcond_threshold``; the diagnostics
    list the most correlated variable pairs.
    """
    spec.validate(orig.schema)
    variables = spec.variables
    if orig.n_rows < 2:
        raise ValueError("need at least 2 original rows to estimate a covariance")
    X, lower, upper, mean = _ranges(orig, variables)
    cov = pd.DataFrame(X).cov(min_periods=2).to_numpy()
    if np.isnan(cov).any():
        raise ValueError("insufficient complete rows for some variable pairs")
    sd = np.sqrt(np.clip(np.diag(cov), 0, None))
    with np.errstate(divide="ignore", invalid="ignore"):
        corr = cov / np.outer(sd, sd)
    corr = np.where(np.isfinite(corr), corr, 0.0)
    np.fill_diagonal(corr, 1.0)
    det = float(np.linalg.det(cov))
    top = _top_pairs(corr, variables)
    if (sd == 0).any():
        const = [v for v, s in zip(variables, sd) if s == 0]
        raise NearSingularError(
            f"constant variables {const} make the covariance singular",
            {"determinant": det, "rcond": 0.0, "constant_variables": const, "top_correlated_pairs": [list(p) for p in top]},
        )
    eig = np.linalg.eigvalsh(corr)
    rcond = float(eig[0] / eig[-1]) if eig[-1] > 0 else 0.0
    if rcond <= 0:
        # pairwise-complete estimates with many gaps can be indefinite
        diag = {"determinant": det, "rcond": rcond, "top_correlated_pairs": [list(p) for p in top]}
        raise NearSingularError(
            f"covariance is not positive definite (smallest correlation eigenvalue {eig[0]:.3g}); "
            "too many missing cells for a pairwise estimate",
            diag,
        )
    if rcond < rcond_threshold:
        diag = {"determinant": det, "rcond": rcond, "top_correlated_pairs": [list(p) for p in top]}
        pairs = ", ".join(f"{a}~{b} (r={r:+.3f})" for a, b, r in top)
        raise NearSingularError(
            f"covariance near-singular (rcond={rcond:.3g}, det={det:.3g}); most correlated pairs: {pairs}", diag
        )
    inv = np.linalg.inv(cov)
    inv = (inv + inv.T) / 2
    resid = np.abs(cov @ inv - np.eye(len(variables))).max()
    if resid > 1e-8 * max(1.0, np.abs(cov).max() * np.abs(inv).max()):
        raise NearSingularError(
            f"covariance inverse inaccurate (residual {resid:.3g})",
            {"determinant": det, "rcond": rcond, "top_correlated_pairs": [list(p) for p in top]},
        )
    return CovarianceModel(
        variables=variables,
        lower=lower,
        upper=upper,
        mean=mean,
        covariance=cov,
        inverse=inv,
        determinant=det,
        rcond=rcond,
        correlation=corr,
        top_pairs=top,
    )


def fit_distance_model(orig: Dataset, spec: DistanceSpec, rcond_threshold: float = RCOND_THRESHOLD):
    spec.validate(orig.schema)
    if spec.metric is Metric.MAHALANOBIS:
        return fit_covariance(orig, spec, rcond_threshold)
    _, lower, upper, mean = _ranges(orig, spec.variables)
    return JaccardModel(spec.variables, lower, upper, mean)


# --- single pairs ----------------------------------------------------------------


def _jaccard(a, b):
    a1 = a == 1
    b1 = b == 1
    union = np.count_nonzero(a1 | b1)
    if union == 0:
        return 0.0
    return 1.0 - np.count_nonzero(a1 & b1) / union


def distance(a, b, model) -> float:
    """Distance between two complete rows (ranked encoding, spec order)."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if model.metric is Metric.JACCARD:
        return _jaccard(a, b)
    d = a - b
    return math.sqrt(max(float(d @ model.inverse @ d), 0.0))


def _box(a, b, ma, mb, model):
    """Per missing coordinate, the interval the difference a - b may take."""
    lo, hi = model.lower, model.upper
    both = ma & mb
    dlo = np.where(both, lo - hi, np.where(ma, lo - b, a - hi))
    dhi = np.where(both, hi - lo, np.where(ma, hi - b, a - lo))
    return dlo, dhi


def _diff_to_values(a, b, ma, mb, delta, model, pair_kind):
    a = a.copy()
    b = b.copy()
    lo = model.lower
    for c in np.flatnonzero(ma | mb):
        if ma[c] and mb[c]:
            if delta[c] == 0 and pair_kind is PairKind.SYNTH_ORIG:
                a[c] = b[c] = model.mean[c]
            else:
                a[c] = lo[c] + max(delta[c], 0.0)
                b[c] = lo[c] + max(-delta[c], 0.0)
        elif ma[c]:
            a[c] = b[c] + delta[c]
        else:
            b[c] = a[c] - delta[c]
    return a, b


def worst_case_fill(pair_kind, a, b, model):
    """Fill missing cells of a pair so the distance is pessimistic.

    ``ORIG_ORIG`` maximizes the distance over in-range completions and
    ``SYNTH_ORIG`` minimizes it. With uncorrelated variables this is the
    per-variable rule: both missing gives ``(max, min)`` resp. ``(mean, mean)``,
    one missing gives the farther range endpoint resp. a copy of the observed
    value. Correlated Mahalanobis models solve the joint problem.
    """
    pair_kind = PairKind(pair_kind)
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    ma, mb = np.isnan(a), np.isnan(b)
    if not (ma | mb).any():
        return a.copy(), b.copy()

    if model.metric is Metric.JACCARD:
        a, b = a.copy(), b.copy()
        for c in np.flatnonzero(ma | mb):
            if ma[c] and mb[c]:
                a[c], b[c] = (1.0, 0.0) if pair_kind is PairKind.ORIG_ORIG else (1.0, 1.0)
            elif ma[c]:
                a[c] = 1.0 - b[c] if pair_kind is PairKind.ORIG_ORIG else b[c]
            else:
                b[c] = 1.0 - a[c] if pair_kind is PairKind.ORIG_ORIG else a[c]
        return a, b

    P = model.inverse
    miss = np.flatnonzero(ma | mb)
    dlo, dhi = _box(a, b, ma, mb, model)
    delta = np.where(ma | mb, 0.0, a - b)

    if pair_kind is PairKind.ORIG_ORIG:
        # convex maximum sits on a vertex; first option = per-variable rule
        first = np.where(ma & mb, dhi, np.where(np.abs(dhi) >= np.abs(dlo), dhi, dlo))
        second = np.where(ma & mb, dlo, np.where(np.abs(dhi) >= np.abs(dlo), dlo, dhi))
        if len(miss) <= _MAX_ENUMERATED:
            best, best_q = None, 0.0
            for bits in itertools.product((0, 1), repeat=len(miss)):
                trial = delta.copy()
                trial[miss] = np.where(np.array(bits) == 0, first[miss], second[miss])
                q = trial @ P @ trial
                if best is None or q > best_q + 1e-12 * abs(best_q):
                    best, best_q = trial, q
            delta = best
        else:
            delta[miss] = first[miss]
            improved = True
            while improved:
                improved = False
                for c in miss:
                    trial = delta.copy()
                    trial[c] = second[c] if delta[c] == first[c] else first[c]
                    if trial @ P @ trial > delta @ P @ delta * (1 + 1e-12):
                        delta, improved = trial, True
    else:
        obs = np.flatnonzero(~(ma | mb))
        if len(obs):
            sol = -np.linalg.solve(P[np.ix_(miss, miss)], P[np.ix_(miss, obs)] @ delta[obs])
        else:
            sol = np.zeros(len(miss))
        if np.all(sol >= dlo[miss] - 1e-12) and np.all(sol <= dhi[miss] + 1e-12):
            delta[miss] = np.clip(sol, dlo[miss], dhi[miss])
        else:
            U = np.linalg.cholesky(P).T
            res = lsq_linear(U[:, miss], -U[:, obs] @ delta[obs], bounds=(dlo[miss], dhi[miss]), method="bvls")
            delta[miss] = res.x
    return _diff_to_values(a, b, ma, mb, delta, model, pair_kind)


# --- pair matrices ---------------------------------------------------------------


def _quad(delta, P):
    return np.einsum("ijk,ijk->ij", delta @ P, delta)


def _mahalanobis_block(A, B, ma, mb, model, pair_kind):
    P = model.inverse
    p = A.shape[1]
    miss = np.flatnonzero(ma | mb)
    obs = np.flatnonzero(~(ma | mb))
    na, nb = len(A), len(B)
    delta = np.zeros((na, nb, p))
    delta[:, :, obs] = A[:, None, obs] - B[None, :, obs]
    if len(miss) == 0:
        return np.sqrt(np.clip(_quad(delta, P), 0, None))

    lo, hi = model.lower, model.upper
    Aa = np.where(np.isnan(A), 0.0, A)
    Bb = np.where(np.isnan(B), 0.0, B)
    both = ma & mb
    # per-pair box [dlo, dhi] of each missing difference
    dlo = np.where(both, lo - hi, np.where(ma, lo - Bb[None, :, :], Aa[:, None, :] - hi))
    dhi = np.where(both, hi - lo, np.where(ma, hi - Bb[None, :, :], Aa[:, None, :] - lo))
    dlo = np.broadcast_to(dlo, (na, nb, p))[:, :, miss]
    dhi = np.broadcast_to(dhi, (na, nb, p))[:, :, miss]

    if pair_kind is PairKind.ORIG_ORIG:
        if len(miss) > _MAX_ENUMERATED:
            return None
        best = np.full((na, nb), -np.inf)
        for bits in itertools.product((0, 1), repeat=len(miss)):
            delta[:, :, miss] = np.where(np.array(bits, dtype=bool), dlo, dhi)
            best = np.maximum(best, _quad(delta, P))
        return np.sqrt(np.clip(best, 0, None))

    if len(obs):
        K = -np.linalg.solve(P[np.ix_(miss, miss)], P[np.ix_(miss, obs)])
        sol = np.einsum("mo,ijo->ijm", K, delta[:, :, obs])
    else:
        sol = np.zeros((na, nb, len(miss)))
    feasible = np.all((sol >= dlo - 1e-12) & (sol <= dhi + 1e-12), axis=2)
    delta[:, :, miss] = np.clip(sol, dlo, dhi)
    q = _quad(delta, P)
    if not feasible.all():
        U = np.linalg.cholesky(P).T
        for i, j in zip(*np.nonzero(~feasible)):
            res = lsq_linear(
                U[:, miss], -U[:, obs] @ delta[i, j, obs], bounds=(dlo[i, j], dhi[i, j]), method="bvls"
            )
            d = delta[i, j].copy()
            d[miss] = res.x
            q[i, j] = d @ P @ d
    return np.sqrt(np.clip(q, 0, None))


def _jaccard_block(A, B, ma, mb, pair_kind):
    A1 = np.where(ma, 0.0, A) == 1
    B1 = np.where(mb, 0.0, B) == 1
    obs = ~(ma | mb)
    inter = np.einsum("ik,jk->ij", (A1 & obs).astype(float), (B1 & obs).astype(float))
    union = (
        (A1 & obs).sum(1)[:, None] + (B1 & obs).sum(1)[None, :] - inter
    ).astype(float)
    both = ma & mb
    if pair_kind is PairKind.ORIG_ORIG:
        union = union + (ma | mb).sum()
    else:
        # copies of observed ones plus (1, 1) fills for double gaps
        extra_a = (A1 & (mb & ~ma)).sum(1)[:, None]
        extra_b = (B1 & (ma & ~mb)).sum(1)[None, :]
        extra = both.sum() + extra_a + extra_b
        inter = inter + extra
        union = union + extra
    with np.errstate(invalid="ignore", divide="ignore"):
        d = np.where(union > 0, 1.0 - inter / union, 0.0)
    return d


def _pattern_groups(X):
    mask = np.isnan(X)
    keys, inv = np.unique(mask, axis=0, return_inverse=True)
    return [(keys[g], np.flatnonzero(inv.ravel() == g)) for g in range(len(keys))]


def pair_distances(A, B, model, pair_kind, threads: int = 1) -> np.ndarray:
    """All-pairs distance matrix between rows of ``A`` and ``B`` with
    worst-case treatment of missing cells (``NaN``)."""
    pair_kind = PairKind(pair_kind)
    A = np.asarray(A, dtype=float)
    B = np.asarray(B, dtype=float)
    out = np.empty((len(A), len(B)))
    groups_b = _pattern_groups(B) if len(B) else []

    def work(group_a):
        ma, ia = group_a
        for mb, ib in groups_b:
            for start in range(0, len(ia), 64):
                rows = ia[start : start + 64]
                Ablk, Bblk = A[rows], B[ib]
                if model.metric is Metric.JACCARD:
                    block = _jaccard_block(Ablk, Bblk, ma, mb, pair_kind)
                else:
                    block = _mahalanobis_block(Ablk, Bblk, ma, mb, model, pair_kind)
                if block is None:
                    block = np.array(
                        [[distance(*worst_case_fill(pair_kind, a, b, model), model) for b in Bblk] for a in Ablk]
                    )
                out[np.ix_(rows, ib)] = block

    groups_a = _pattern_groups(A) if len(A) else []
    if threads > 1 and len(groups_a) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            list(pool.map(work, groups_a))
    else:
        for g in groups_a:
            work(g)
    return out


# --- filtering -------------------------------------------------------------------


@dataclass
class Retention:
    retained: np.ndarray  # boolean mask over synthetic rows
    nearest: np.ndarray  # index of nearest original per synthetic row
    distance: np.ndarray  # distance to that original
    threshold: np.ndarray  # that original's nearest-original distance


def _orig_nn_distance(orig_X, model, threads=1):
    D = pair_distances(orig_X, orig_X, model, PairKind.ORIG_ORIG, threads)
    np.fill_diagonal(D, np.inf)
    return D.min(axis=1)


def retention(orig_X, synth_X, model, orig_nn=None, threads: int = 1) -> Retention:
    """Apply the retention rule to ranked matrices (rows x spec variables)."""
    if len(orig_X) < 2:
        raise ValueError("need at least 2 original rows")
    if orig_nn is None:
        orig_nn = _orig_nn_distance(orig_X, model, threads)
    D = pair_distances(synth_X, orig_X, model, PairKind.SYNTH_ORIG, threads)
    nearest = np.argmin(D, axis=1)  # first minimum = lowest row index
    dist = D[np.arange(len(D)), nearest]
    threshold = orig_nn[nearest]
    return Retention(~(dist < threshold), nearest, dist, threshold)


def filter_rows(orig: Dataset, synth: Dataset, spec: DistanceSpec, model=None, threads: int = 1):
    """Split ``synth`` into ``(retained, removed)``."""
    spec.validate(orig.schema)
    if model is None:
        model = fit_distance_model(orig, spec)
    res = retention(
        orig.matrix(spec.variables, ranked=True), synth.matrix(spec.variables, ranked=True), model, threads=threads
    )
    return synth.take(np.flatnonzero(res.retained)), synth.take(np.flatnonzero(~res.retained))


@dataclass
class FilterReport:
    target: int
    rounds: list = field(default_factory=list)
    diagnostics: dict = field(default_factory=dict)

    @property
    def n_retained(self) -> int:
        return sum(r["retained"] for r in self.rounds)

    def to_dict(self) -> dict:
        return {
            "target": self.target,
            "rounds": self.rounds,
            "n_rounds": len(self.rounds),
            "n_retained_total": self.n_retained,
            "covariance": self.diagnostics,
        }


class DistanceFilter(BaseEstimator):
    """Estimator wrapper: ``fit`` on original data, ``transform`` keeps the
    synthetic rows that pass the retention rule."""

    def __init__(self, variables=(), metric="mahalanobis", rcond_threshold=RCOND_THRESHOLD, threads=1):
        self.variables = variables
        self.metric = metric
        self.rcond_threshold = rcond_threshold
        self.threads = threads

    def fit(self, orig: Dataset, y=None):
        self.spec_ = DistanceSpec(tuple(self.variables), Metric(self.metric))
        self.model_ = fit_distance_model(orig, self.spec_, self.rcond_threshold)
        self.orig_X_ = orig.matrix(self.spec_.variables, ranked=True)
        if len(self.orig_X_) < 2:
            raise ValueError("need at least 2 original rows")
        self.orig_nn_ = _orig_nn_distance(self.orig_X_, self.model_, self.threads)
        return self

    def retention(self, synth: Dataset) -> Retention:
        check_is_fitted(self, "model_")
        return retention(
            self.orig_X_, synth.matrix(self.spec_.variables, ranked=True), self.model_, self.orig_nn_, self.threads
        )

    def split(self, synth: Dataset):
        res = self.retention(synth)
        return synth.take(np.flatnonzero(res.retained)), synth.take(np.flatnonzero(~res.retained))

    def transform(self, synth: Dataset) -> Dataset:
        return self.split(synth)[0]


def filtered_synthesize(
    orig: Dataset,
    order: Sequence[str] | None,
    cart_params: CartParams,
    spec: DistanceSpec,
    target: int,
    max_rounds: int = 50,
    *,
    batch_size: int | None = None,
    first_batch: Dataset | None = None,
    threads: int = 1,
    synthesizer: CartSynthesizer | None = None,
):
    """Synthesize, filter and resynthesize until ``target`` rows are retained.

    Round ``r`` samples with seed ``(cart_params.seed, r)`` unless
    ``first_batch`` supplies round 0. Returns ``(data, FilterReport)``; raises
    :class:`TargetNotReachedError` after ``max_rounds``.
    """
    if target < 1 or max_rounds < 1:
        raise ValueError("target and max_rounds must be >= 1")
    batch_size = target if batch_size is None else batch_size
    filt = DistanceFilter(spec.variables, spec.metric, threads=threads).fit(orig)
    if synthesizer is None:
        synthesizer = CartSynthesizer(
            cart_params.min_leaf, cart_params.min_split, cart_params.max_depth, order, cart_params.seed
        ).fit(orig)
    report = FilterReport(target, diagnostics=filt.model_.diagnostics())
    kept = []
    n_kept = 0
    for r in range(max_rounds):
        if r == 0 and first_batch is not None:
            batch = first_batch
        else:
            seed = int(np.random.SeedSequence([int(cart_params.seed), r]).generate_state(1)[0])
            batch = synthesizer.sample(batch_size, random_state=seed)
        res = filt.retention(batch)
        n_ret = int(res.retained.sum())
        report.rounds.append(
            {
                "round": r,
                "synthesized": batch.n_rows,
                "retained": n_ret,
                "removed": batch.n_rows - n_ret,
                "acceptance_rate": n_ret / batch.n_rows if batch.n_rows else 0.0,
            }
        )
        if n_ret:
            kept.append(batch.take(np.flatnonzero(res.retained)))
            n_kept += n_ret
        if n_kept >= target:
            out = kept[0]
            for extra in kept[1:]:
                out = out.concat(extra)
            return out.take(np.arange(target)), report
    raise TargetNotReachedError(
        f"retained {n_kept}/{target} rows after {max_rounds} rounds "
        f"(mean acceptance {np.mean([r['acceptance_rate'] for r in report.rounds]):.3f})",
        report,
    )
