"""Membership-disclosure protection for quantitative variables.

Given a population of size ``N`` with a known continuous law ``D``, a
released sample of size ``n`` and zero-mean normal noise, the elemental
correct attribution probability (ECAP) of a value ``x_a`` is the chance that
a released value falling in the half-gap interval around ``x_a`` was in fact
produced by ``x_a`` rather than by a neighbouring population value::

    ECAP = 1 - [((N-1)/N)^n - (P(S'+B not in I1) - P(B not in I2)/N)^n]
               / [1 - P(S'+B not in I1)^n]

with ``I1 = [(x_a + x_-)/2, (x_a + x_+)/2]``, ``I2 = I1 - x_a`` and ``S'``
equal to ``x_a`` with probability ``1/N`` and drawn from ``D`` restricted
outside ``[x_-, x_+]`` otherwise. The neighbours ``x_-``, ``x_+`` are the
expected nearest population values below and above ``x_a``.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy import stats
from scipy.special import ndtr
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .tabular import Dataset, Kind

__all__ = [
    "PopulationModel",
    "NoiseSpec",
    "EcapQuery",
    "Neighbors",
    "EcapResult",
    "EcapCurve",
    "Calibration",
    "EcapIndeterminateError",
    "CalibrationError",
    "msd",
    "estimate_neighbors",
    "ecap",
    "ecap_result",
    "ecap_curve",
    "default_grid",
    "calibrate_noise",
    "apply_noise",
    "NoiseCalibrator",
]

DEFAULT_REPLICATES = 200
DEFAULT_MC_SAMPLES = 100_000
_WINDOW_SD = 8.5  # normal tail mass beyond this is below 1e-16


class EcapIndeterminateError(ArithmeticError):
    def __init__(self, message, p_out_i1, p_noise_out_i2):
        super().__init__(message)
        self.p_out_i1 = p_out_i1
        self.p_noise_out_i2 = p_noise_out_i2


class CalibrationError(RuntimeError):
    def __init__(self, message, best_sigma, best_ecap):
        super().__init__(message)
        self.best_sigma = best_sigma
        self.best_ecap = best_ecap


@dataclass(frozen=True)
class PopulationModel:
    """Population size ``N`` and a continuous law for the variable.

    ``distribution`` is any frozen ``scipy.stats`` continuous distribution;
    :meth:`normal` builds the usual one.
    """

    N: int
    distribution: object

    def __post_init__(self):
        if self.N < 2:
            raise ValueError("population size N must be >= 2")

    @classmethod
    def normal(cls, N: int, mean: float, sd: float) -> "PopulationModel":
        if not sd > 0:
            raise ValueError("sd must be > 0")
        return cls(int(N), stats.norm(loc=mean, scale=sd))

    def to_dict(self) -> dict:
        dist = self.distribution
        name = getattr(getattr(dist, "dist", None), "name", type(dist).__name__)
        out = {"N": self.N, "law": name}
        if name == "norm":
            out.update(law="normal", mean=float(dist.mean()), sd=float(dist.std()))
        return out


@dataclass(frozen=True)
class NoiseSpec:
    sigma: float = 0.0
    law: str = "normal"

    def __post_init__(self):
        if self.sigma < 0 or not math.isfinite(self.sigma):
            raise ValueError("sigma must be finite and >= 0")
        if self.law != "normal":
            raise ValueError("only zero-mean normal noise is supported")

    def to_dict(self) -> dict:
        return {"law": self.law, "mean": 0.0, "sigma": self.sigma}


@dataclass(frozen=True)
class Neighbors:
    x_minus: float
    x_plus: float
    se_minus: float = 0.0
    se_plus: float = 0.0
    extrapolated: int = 0  # replicates where one side had no draw

    @property
    def gap(self) -> float:
        return self.x_plus - self.x_minus


@dataclass(frozen=True)
class EcapQuery:
    x_a: float
    n: int
    model: PopulationModel
    noise: NoiseSpec
    neighbors: Neighbors
    mc_samples: int = DEFAULT_MC_SAMPLES
    seed: int = 0

    def __post_init__(self):
        nb = self.neighbors
        if not nb.x_minus < self.x_a < nb.x_plus:
            raise ValueError("neighbors must satisfy x_minus < x_a < x_plus")
        if not 1 <= self.n <= self.model.N:
            raise ValueError("sample size n must satisfy 1 <= n <= N")


def msd(x_min: float, x_max: float, N: int) -> float:
    """Mean successive difference of ``N`` sorted values spanning the range."""
    if N < 2:
        raise ValueError("N must be >= 2")
    if x_max < x_min:
        raise ValueError("x_max must be >= x_min")
    return (x_max - x_min) / (N - 1)


# --- neighbours ------------------------------------------------------------------


def estimate_neighbors(
    x_a: float,
    model: PopulationModel,
    replicates: int = DEFAULT_REPLICATES,
    seed: int = 0,
    method: str = "order_statistics",
) -> Neighbors:
    """Monte-Carlo estimate of the nearest population values around ``x_a``.

    Each replicate stands for ``N - 1`` draws from the population law; the
    largest draw below ``x_a`` and the smallest above are averaged over
    replicates. ``method="draw"`` literally draws the ``N - 1`` values;
    ``"order_statistics"`` samples the two relevant order statistics directly
    (same distribution, O(1) per replicate, needs ``ppf``/``isf``). A side
    with no draw falls back to the mean successive difference of the
    replicate's range.
    """
    if replicates < 1:
        raise ValueError("replicates must be >= 1")
    rng = np.random.default_rng(seed)
    dist = model.distribution
    N = model.N
    lo = np.empty(replicates)
    hi = np.empty(replicates)
    extrapolated = 0

    if method == "draw":
        for r in range(replicates):
            draws = dist.rvs(size=N - 1, random_state=rng)
            below = draws[draws < x_a]
            above = draws[draws > x_a]
            x_min = min(draws.min(), x_a)
            x_max = max(draws.max(), x_a)
            if below.size == 0 or above.size == 0:
                extrapolated += 1
            step = msd(x_min, x_max, N)
            lo[r] = below.max() if below.size else x_a - step
            hi[r] = above.min() if above.size else x_a + step
    elif method == "order_statistics":
        F = float(dist.cdf(x_a))
        S = float(dist.sf(x_a))
        K = rng.binomial(N - 1, F, size=replicates)
        M = (N - 1) - K
        u = rng.random((replicates, 2))
        with np.errstate(divide="ignore"):
            # largest of K uniforms on (0, F) is F * U**(1/K); likewise above
            log_lo = math.log(F) + np.log(u[:, 0]) / np.maximum(K, 1) if F > 0 else np.full(replicates, -np.inf)
            log_hi = math.log(S) + np.log(u[:, 1]) / np.maximum(M, 1) if S > 0 else np.full(replicates, -np.inf)
        lo[:] = dist.ppf(np.exp(log_lo))
        hi[:] = dist.isf(np.exp(log_hi))
        for r in np.flatnonzero((K == 0) | (M == 0)):
            extrapolated += 1
            v = rng.random()
            if K[r] == 0:
                x_max = float(dist.isf(S * (1.0 - v ** (1.0 / M[r])))) if M[r] else x_a
                lo[r] = x_a - msd(x_a, max(x_max, x_a), N)
            if M[r] == 0:
                x_min = float(dist.ppf(F * (1.0 - v ** (1.0 / K[r])))) if K[r] else x_a
                hi[r] = x_a + msd(min(x_min, x_a), x_a, N)
    else:
        raise ValueError(f"unknown method {method!r}")

    se = (lambda a: float(a.std(ddof=1) / math.sqrt(len(a))) if len(a) > 1 else 0.0)
    x_minus, x_plus = float(lo.mean()), float(hi.mean())
    if not x_minus < x_a < x_plus:
        # degenerate ranges (e.g. N = 2 far in a tail) still need a bracket
        step = max(x_plus - x_minus, abs(x_a) * 1e-12, 1e-12)
        x_minus = min(x_minus, x_a - step / 2)
        x_plus = max(x_plus, x_a + step / 2)
    return Neighbors(x_minus, x_plus, se(lo), se(hi), extrapolated)


# --- ECAP evaluation -------------------------------------------------------------


@dataclass(frozen=True)
class EcapResult:
    value: float
    stderr: float
    p_out_i1: float  # P(S' + B not in I1)
    p_noise_out_i2: float  # P(B not in I2)


def _combine(N, n, p_noise_in, p_in_dprime):
    """ECAP from P(B in I2) and P(D' + B in I1), evaluated without cancellation."""
    u = p_noise_in / N + (1.0 - 1.0 / N) * p_in_dprime  # 1 - P(S'+B not in I1)
    denom = -math.expm1(n * math.log1p(-u)) if u < 1 else 1.0
    if denom < 1e-15:
        raise EcapIndeterminateError(
            f"ECAP denominator {denom:.3g} below 1e-15", 1.0 - u, 1.0 - p_noise_in
        )
    lead = math.exp(n * math.log1p(-1.0 / N))
    num = lead * (-math.expm1(n * math.log1p(-p_in_dprime)) if p_in_dprime < 1 else 1.0)
    return min(1.0, max(0.0, 1.0 - num / denom)), 1.0 - u


class _Evaluator:
    """Shares one set of draws from ``D'`` across noise levels.

    ``P(D' + B in I1)`` is estimated by conditioning on each draw ``y`` and
    integrating the noise exactly, so only draws within a few noise standard
    deviations of ``I1`` contribute.
    """

    def __init__(self, x_a, n, model, neighbors, mc_samples=DEFAULT_MC_SAMPLES, seed=0, pool=None):
        self.x_a = float(x_a)
        self.n = int(n)
        self.N = model.N
        self.nb = neighbors
        self.a = (x_a + neighbors.x_minus) / 2.0
        self.b = (x_a + neighbors.x_plus) / 2.0
        if pool is None:
            pool = np.sort(model.distribution.rvs(size=int(mc_samples), random_state=np.random.default_rng(seed)))
        # rejection: drop draws inside [x_minus, x_plus]
        i0, i1 = np.searchsorted(pool, [neighbors.x_minus, neighbors.x_plus], side="left")
        i1 = np.searchsorted(pool, neighbors.x_plus, side="right")
        self.y = np.concatenate([pool[:i0], pool[i1:]])
        if self.y.size == 0:
            raise ValueError("no Monte-Carlo draws left outside the neighbour interval")

    def _p_in(self, sigma):
        y = self.y
        lo, hi = np.searchsorted(y, [self.a - _WINDOW_SD * sigma, self.b + _WINDOW_SD * sigma])
        w = y[lo:hi]
        left = w < self.a
        g = np.where(
            left,
            ndtr((w - self.a) / sigma) - ndtr((w - self.b) / sigma),
            ndtr((self.b - w) / sigma) - ndtr((self.a - w) / sigma),
        )
        g = np.clip(g, 0.0, 1.0)
        m = y.size
        mean = g.sum() / m
        var = max((g @ g) / m - mean * mean, 0.0)
        return mean, math.sqrt(var / m) if m > 1 else 0.0

    def evaluate(self, sigma: float) -> EcapResult:
        if sigma == 0:
            return EcapResult(1.0, 0.0, 1.0 - 1.0 / self.N, 0.0)
        half_lo = (self.nb.x_minus - self.x_a) / 2.0
        half_hi = (self.nb.x_plus - self.x_a) / 2.0
        p_noise_in = float(ndtr(half_hi / sigma) - ndtr(half_lo / sigma))
        p_in, se = self._p_in(sigma)
        value, p_out = _combine(self.N, self.n, p_noise_in, p_in)
        if se > 0:
            up, _ = _combine(self.N, self.n, p_noise_in, min(p_in + se, 1.0))
            down, _ = _combine(self.N, self.n, p_noise_in, max(p_in - se, 0.0))
            stderr = abs(down - up) / 2.0
        else:
            stderr = 0.0
        return EcapResult(value, stderr, p_out, 1.0 - p_noise_in)


def ecap_result(query: EcapQuery) -> EcapResult:
    ev = _Evaluator(query.x_a, query.n, query.model, query.neighbors, query.mc_samples, query.seed)
    return ev.evaluate(query.noise.sigma)


def ecap(query: EcapQuery) -> float:
    if query.noise.sigma == 0:
        return 1.0
    return ecap_result(query).value


@dataclass
class EcapCurve:
    sigma: np.ndarray
    ecap: np.ndarray
    stderr: np.ndarray
    neighbors: Neighbors

    @property
    def difference_quotients(self) -> np.ndarray:
        return np.diff(self.ecap) / np.diff(self.sigma)

    def first_below(self, level: float) -> float | None:
        hit = np.flatnonzero(self.ecap <= level)
        return float(self.sigma[hit[0]]) if hit.size else None

    def to_dict(self) -> dict:
        return {
            "sigma": self.sigma.tolist(),
            "ecap": self.ecap.tolist(),
            "stderr": self.stderr.tolist(),
            "difference_quotients": self.difference_quotients.tolist(),
            "x_minus": self.neighbors.x_minus,
            "x_plus": self.neighbors.x_plus,
        }


def _check_grid(grid):
    grid = np.asarray(grid, dtype=float)
    if grid.ndim != 1 or grid.size == 0:
        raise ValueError("noise grid must be a non-empty list")
    if (grid < 0).any() or (np.diff(grid) <= 0).any():
        raise ValueError("noise grid must be ascending and non-negative")
    return grid


def ecap_curve(
    x_a: float,
    model: PopulationModel,
    n: int,
    noise_grid: Sequence[float],
    replicates: int = DEFAULT_REPLICATES,
    mc_samples: int = DEFAULT_MC_SAMPLES,
    seed: int = 0,
    neighbors: Neighbors | None = None,
) -> EcapCurve:
    """ECAP at every grid standard deviation, with shared neighbours and draws."""
    grid = _check_grid(noise_grid)
    ss = np.random.SeedSequence(seed)
    s_nb, s_mc = (int(s.generate_state(1)[0]) for s in ss.spawn(2))
    if neighbors is None:
        neighbors = estimate_neighbors(x_a, model, replicates, s_nb)
    ev = _Evaluator(x_a, n, model, neighbors, mc_samples, s_mc)
    res = [ev.evaluate(s) for s in grid]
    return EcapCurve(grid, np.array([r.value for r in res]), np.array([r.stderr for r in res]), neighbors)


# --- calibration -----------------------------------------------------------------


def default_grid(model: PopulationModel, neighbors: Sequence[Neighbors], points: int = 50) -> np.ndarray:
    """Geometric grid from MSD/100 to ten times the widest neighbour gap."""
    N = model.N
    dist = model.distribution
    x_min = float(dist.ppf(1.0 / (N + 1)))
    x_max = float(dist.isf(1.0 / (N + 1)))
    lo = msd(x_min, x_max, N) / 100.0
    hi = 10.0 * max(nb.gap for nb in neighbors)
    if hi <= lo:
        hi = lo * 1000.0
    return np.geomspace(lo, hi, points)


@dataclass
class Calibration:
    noise: NoiseSpec
    target: float
    values: np.ndarray  # distinct values evaluated
    grid: np.ndarray
    table: np.ndarray  # ECAP, values x grid
    stderr: np.ndarray
    neighbors: list
    recommended_sigma: float

    @property
    def worst_curve(self) -> np.ndarray:
        return self.table.max(axis=0)

    @property
    def chosen_index(self) -> int:
        return int(np.flatnonzero(self.grid == self.noise.sigma)[0])

    @property
    def worst_ecap(self) -> np.ndarray:
        """Per value ECAP at the chosen noise level."""
        return self.table[:, self.chosen_index]

    @property
    def binding_value(self) -> float:
        return float(self.values[int(np.argmax(self.worst_ecap))])

    def to_private_dict(self) -> dict:
        """Full report; holds ECAP values, never publish it."""
        worst = self.worst_curve
        return {
            "publishable": False,
            "target_ecap": self.target,
            "chosen": self.noise.to_dict(),
            "recommended_sigma": self.recommended_sigma,
            "binding_value": self.binding_value,
            "per_value": [
                {
                    "value": float(v),
                    "x_minus": nb.x_minus,
                    "x_plus": nb.x_plus,
                    "ecap_at_chosen": float(e),
                }
                for v, nb, e in zip(self.values, self.neighbors, self.worst_ecap)
            ],
            "curve": {
                "sigma": self.grid.tolist(),
                "max_ecap": worst.tolist(),
                "difference_quotients": (np.diff(worst) / np.diff(self.grid)).tolist(),
            },
        }


def _recommend(grid, worst, start):
    """Walk up from ``start`` while ECAP still falls proportionally faster
    than the noise grows (elasticity of the worst curve >= 1)."""
    i = start
    while i + 1 < len(grid) and worst[i] > 0:
        elasticity = -((worst[i + 1] - worst[i]) / worst[i]) / ((grid[i + 1] - grid[i]) / grid[i])
        if elasticity < 1.0:
            break
        i += 1
    return float(grid[i])


def calibrate_noise(
    values: Sequence[float],
    model: PopulationModel,
    n: int,
    target_ecap: float = 0.2,
    grid: Sequence[float] | None = None,
    replicates: int = DEFAULT_REPLICATES,
    mc_samples: int = DEFAULT_MC_SAMPLES,
    seed: int = 0,
    threads: int = 1,
) -> Calibration:
    """Smallest grid noise level keeping every value's ECAP at or below target."""
    vals = np.asarray(values, dtype=float)
    vals = np.unique(vals[~np.isnan(vals)])
    if vals.size == 0:
        raise ValueError("no values to calibrate on")
    if not 0 < target_ecap <= 1:
        raise ValueError("target ECAP must lie in (0, 1]")
    ss = np.random.SeedSequence(seed)
    nb_seeds = [int(s.generate_state(1)[0]) for s in ss.spawn(len(vals) + 1)]
    pool_seed = nb_seeds.pop()

    def neighbours(i):
        return estimate_neighbors(float(vals[i]), model, replicates, nb_seeds[i])

    pool = np.sort(model.distribution.rvs(size=int(mc_samples), random_state=np.random.default_rng(pool_seed)))
    if threads > 1:
        with ThreadPoolExecutor(threads) as ex:
            nbs = list(ex.map(neighbours, range(len(vals))))
    else:
        nbs = [neighbours(i) for i in range(len(vals))]
    grid = default_grid(model, nbs) if grid is None else _check_grid(grid)

    def row(i):
        ev = _Evaluator(vals[i], n, model, nbs[i], pool=pool)
        res = [ev.evaluate(s) for s in grid]
        return [r.value for r in res], [r.stderr for r in res]

    if threads > 1:
        with ThreadPoolExecutor(threads) as ex:
            rows = list(ex.map(row, range(len(vals))))
    else:
        rows = [row(i) for i in range(len(vals))]
    table = np.array([r[0] for r in rows])
    stderr = np.array([r[1] for r in rows])
    worst = table.max(axis=0)
    ok = np.flatnonzero(worst <= target_ecap)
    if ok.size == 0:
        best = int(np.argmin(worst))
        raise CalibrationError(
            f"no grid noise reaches max ECAP <= {target_ecap}; best {worst[best]:.4f} at sigma={grid[best]:.4g}",
            float(grid[best]),
            float(worst[best]),
        )
    i = int(ok[0])
    return Calibration(
        noise=NoiseSpec(float(grid[i])),
        target=target_ecap,
        values=vals,
        grid=grid,
        table=table,
        stderr=stderr,
        neighbors=nbs,
        recommended_sigma=_recommend(grid, worst, i),
    )


# --- noise -----------------------------------------------------------------------


def apply_noise(data: Dataset, variable: str, spec: NoiseSpec, seed: int = 0) -> Dataset:
    """Add independent ``Normal(0, sigma^2)`` noise to the observed cells of a
    quantitative column; no rounding or truncation."""
    var = data.schema[variable]
    if var.kind is not Kind.QUANTITATIVE:
        raise ValueError(f"{variable} is {var.kind.value}; only quantitative variables take noise")
    if spec.sigma == 0:
        return data
    col = data[variable]
    noise = np.random.default_rng(seed).normal(0.0, spec.sigma, size=col.shape)
    return data.with_column(variable, np.where(np.isnan(col), np.nan, col + noise))


class NoiseCalibrator(BaseEstimator):
    """Estimator form of :func:`calibrate_noise` + :func:`apply_noise` for one
    variable. ``fit`` reads the variable's values, ``transform`` noises it."""

    def __init__(
        self,
        variable,
        population_size,
        population_mean,
        population_sd,
        n=None,
        target_ecap=0.2,
        grid=None,
        replicates=DEFAULT_REPLICATES,
        mc_samples=DEFAULT_MC_SAMPLES,
        use_recommended=False,
        random_state=0,
        threads=1,
    ):
        self.variable = variable
        self.population_size = population_size
        self.population_mean = population_mean
        self.population_sd = population_sd
        self.n = n
        self.target_ecap = target_ecap
        self.grid = grid
        self.replicates = replicates
        self.mc_samples = mc_samples
        self.use_recommended = use_recommended
        self.random_state = random_state
        self.threads = threads

    def fit(self, data: Dataset, y=None):
        model = PopulationModel.normal(self.population_size, self.population_mean, self.population_sd)
        values = data[self.variable]
        n = data.n_rows if self.n is None else self.n
        ss = np.random.SeedSequence([int(self.random_state), 0])
        self.calibration_ = calibrate_noise(
            values,
            model,
            n,
            self.target_ecap,
            self.grid,
            self.replicates,
            self.mc_samples,
            int(ss.generate_state(1)[0]),
            self.threads,
        )
        sigma = self.calibration_.recommended_sigma if self.use_recommended else self.calibration_.noise.sigma
        self.noise_ = NoiseSpec(sigma)
        return self

    def transform(self, data: Dataset) -> Dataset:
        check_is_fitted(self, "noise_")
        seed = int(np.random.SeedSequence([int(self.random_state), 1]).generate_state(1)[0])
        return apply_noise(data, self.variable, self.noise_, seed)

    def fit_transform(self, data: Dataset, y=None) -> Dataset:
        return self.fit(data).transform(data)
