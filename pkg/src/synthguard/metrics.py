"""Privacy and utility scores for a synthetic release.

Privacy: mean generalized targeted correct attribution probability (GTCAP)
over the statistical uniques of the original data. Quantitative keys and
targets are compared through a radius: two values are "equal" with weight
``max(0, 1 - |diff| / radius)``.

Utility: propensity-score mean squared error with a CART propensity model,
its permutation-standardized ratio, subgroup prevalence replication, and
univariate comparison tables.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
import pandas as pd
from scipy import stats

from .cart import CartParams, _build
from .tabular import Dataset, Kind, Schema, Variable

__all__ = [
    "GtcapConfig",
    "GtcapReport",
    "PmseReport",
    "EstimateQuery",
    "prox_coef",
    "gtcap_row",
    "univariate_prediction",
    "statistical_uniques",
    "mean_gtcap",
    "pmse",
    "standardized_pmse_ratio",
    "pmse_ratio_matrix",
    "replicate_estimates",
    "compare_marginals",
    "marginals_to_frame",
    "PROPENSITY_PARAMS",
]

PROPENSITY_PARAMS = CartParams(min_leaf=10, min_split=20, max_depth=30)
_DEGENERATE = 1e-9


# --- GTCAP -----------------------------------------------------------------------


@dataclass(frozen=True)
class GtcapConfig:
    keys: tuple
    targets: tuple
    radii: Mapping = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "keys", tuple(self.keys))
        object.__setattr__(self, "targets", tuple(self.targets))
        object.__setattr__(self, "radii", dict(self.radii))
        if not self.keys or not self.targets:
            raise ValueError("GTCAP needs at least one key and one target")
        overlap = set(self.keys) & set(self.targets)
        if overlap:
            raise ValueError(f"variables cannot be both key and target: {sorted(overlap)}")
        for name, r in self.radii.items():
            if not r > 0:
                raise ValueError(f"radius for {name} must be > 0")

    def validate(self, schema: Schema):
        schema.check_names([*self.keys, *self.targets])
        for name in (*self.keys, *self.targets):
            if schema[name].kind is Kind.QUANTITATIVE and name not in self.radii:
                raise ValueError(f"quantitative variable {name} needs a radius")


def _is_num(var: Variable) -> bool:
    return var.kind is Kind.QUANTITATIVE


def _prox_against(cols: Mapping[str, np.ndarray], row: Mapping[str, float], variables, schema, radii) -> np.ndarray:
    """Proximity coefficient of ``row`` against every row of ``cols``.

    0 if any categorical value differs (missing is its own category), 1 if the
    categoricals match and there is no quantitative variable, otherwise the
    mean of ``max(0, 1 - |diff| / radius)`` over quantitative variables; a
    missing quantitative cell matches only another missing cell.
    """
    n = len(next(iter(cols.values())))
    match = np.ones(n, dtype=bool)
    num = []
    for name in variables:
        var = schema[name]
        col = cols[name]
        v = row[name]
        v_missing = v is None or (isinstance(v, float) and math.isnan(v))
        if _is_num(var):
            if name not in radii:
                raise ValueError(f"no radius for quantitative variable {name}")
            if v_missing:
                num.append(np.isnan(col).astype(float))
            else:
                with np.errstate(invalid="ignore"):
                    c = np.maximum(0.0, 1.0 - np.abs(col - v) / radii[name])
                num.append(np.where(np.isnan(col), 0.0, c))
        else:
            match &= np.isnan(col) if v_missing else (col == v)
    if not num:
        return match.astype(float)
    return np.where(match, np.mean(num, axis=0), 0.0)


def _as_row(data_or_row, index=None):
    if isinstance(data_or_row, Dataset):
        return {n: float(data_or_row[n][index]) for n in data_or_row.names}
    return dict(data_or_row)


def prox_coef(row1: Mapping, row2: Mapping, variables: Sequence[str], radii: Mapping, schema: Schema) -> float:
    cols = {n: np.array([np.nan if row2[n] is None else row2[n]], dtype=float) for n in variables}
    return float(_prox_against(cols, row1, variables, schema, radii)[0])


def _cols(data: Dataset, names):
    return {n: data[n] for n in names}


def gtcap_row(data: Dataset, row: Mapping, cfg: GtcapConfig) -> float:
    """Proximity-weighted probability that ``data`` attributes ``row``'s
    targets given its keys; 0 when no row of ``data`` is key-close."""
    k = _prox_against(_cols(data, cfg.keys), row, cfg.keys, data.schema, cfg.radii)
    total = k.sum()
    if total == 0:
        return 0.0
    t = _prox_against(_cols(data, cfg.targets), row, cfg.targets, data.schema, cfg.radii)
    return float((k * t).sum() / total)


def univariate_prediction(data: Dataset, row: Mapping, cfg: GtcapConfig) -> float:
    return float(_prox_against(_cols(data, cfg.targets), row, cfg.targets, data.schema, cfg.radii).mean())


def statistical_uniques(orig: Dataset, cfg: GtcapConfig) -> np.ndarray:
    """Indices of rows whose summed key proximity to all other rows is < 1."""
    cfg.validate(orig.schema)
    cols = _cols(orig, cfg.keys)
    out = []
    for i in range(orig.n_rows):
        k = _prox_against(cols, _as_row(orig, i), cfg.keys, orig.schema, cfg.radii)
        if k.sum() - k[i] < 1.0:
            out.append(i)
    return np.array(out, dtype=int)


@dataclass
class GtcapReport:
    rows: pd.DataFrame  # one line per statistical unique
    mean: float
    n_uniques: int
    n_skipped: int
    n_zero_denominator: int
    note: str = ""

    def to_dict(self) -> dict:
        return {
            "mean_gtcap": None if math.isnan(self.mean) else self.mean,
            "n_uniques": self.n_uniques,
            "n_skipped_degenerate": self.n_skipped,
            "n_zero_denominator": self.n_zero_denominator,
            "note": self.note,
        }


def mean_gtcap(orig: Dataset, synth: Dataset, cfg: GtcapConfig) -> GtcapReport:
    """Normalized GTCAP averaged over the statistical uniques of ``orig``.

    Each unique contributes ``(synth - base) / (orig - base)`` where ``base``
    is the unconditional target proximity in ``orig``; uniques with
    ``|orig - base| < 1e-9`` are skipped. Values are not clamped.
    """
    cfg.validate(orig.schema)
    cfg.validate(synth.schema)
    uniques = statistical_uniques(orig, cfg)
    columns = ["row", "synth", "baseline", "orig", "normalized"]
    if uniques.size == 0:
        return GtcapReport(pd.DataFrame(columns=columns), math.nan, 0, 0, 0, "no statistical uniques")
    records = []
    skipped = zero = 0
    for i in uniques:
        row = _as_row(orig, i)
        k = _prox_against(_cols(synth, cfg.keys), row, cfg.keys, synth.schema, cfg.radii)
        if k.sum() == 0:
            zero += 1
        s = gtcap_row(synth, row, cfg)
        b = univariate_prediction(orig, row, cfg)
        o = gtcap_row(orig, row, cfg)
        if abs(o - b) < _DEGENERATE:
            skipped += 1
            norm = math.nan
        else:
            norm = (s - b) / (o - b)
        records.append((int(i), s, b, o, norm))
    frame = pd.DataFrame(records, columns=columns)
    valid = frame["normalized"].dropna()
    mean = float(valid.mean()) if len(valid) else math.nan
    note = "" if len(valid) else "every statistical unique had a degenerate normalization"
    return GtcapReport(frame, mean, len(uniques), skipped, zero, note)


# --- pMSE ------------------------------------------------------------------------


@dataclass
class PmseReport:
    pmse: float
    c: float
    n_orig: int
    n_synth: int
    ratio: float | None = None
    null_mean: float | None = None
    null: list | None = None
    pair_ratios: pd.DataFrame | None = None

    def to_dict(self) -> dict:
        pairs = None
        if self.pair_ratios is not None:
            m = self.pair_ratios
            pairs = {
                "variables": list(m.index),
                "ratios": [[None if np.isnan(x) else float(x) for x in row] for row in m.to_numpy()],
            }
        return {
            "pmse": self.pmse,
            "c": self.c,
            "n_orig": self.n_orig,
            "n_synth": self.n_synth,
            "standardized_ratio": self.ratio,
            "null_mean": self.null_mean,
            "pair_ratios": pairs,
        }


def _stack(orig: Dataset, synth: Dataset, variables):
    if orig.schema.select(variables) != synth.schema.select(variables):
        raise ValueError("original and synthetic schemas differ")
    cols = {n: np.concatenate([orig[n], synth[n]]) for n in variables}
    labels = np.concatenate([np.zeros(orig.n_rows), np.ones(synth.n_rows)])
    return [orig.schema[n] for n in variables], cols, labels


_LABEL = Variable("__synthetic__", Kind.BINARY)


def _pmse_from(predictors, cols, labels, params):
    c = labels.mean()
    tree = _build(_LABEL, labels, predictors, cols, params)
    p = np.empty(len(labels))
    for leaf in tree.leaves:
        p[leaf.donors] = labels[leaf.donors].mean()
    return float(np.mean((p - c) ** 2)), float(c)


def pmse(orig: Dataset, synth: Dataset, model_params: CartParams = PROPENSITY_PARAMS, variables=None) -> PmseReport:
    """pMSE of a CART propensity model separating original (0) from synthetic (1) rows."""
    variables = list(orig.names if variables is None else variables)
    preds, cols, labels = _stack(orig, synth, variables)
    value, c = _pmse_from(preds, cols, labels, model_params)
    return PmseReport(value, c, orig.n_rows, synth.n_rows)


def standardized_pmse_ratio(
    orig: Dataset,
    synth: Dataset,
    variables=None,
    model_params: CartParams = PROPENSITY_PARAMS,
    permutations: int = 20,
    seed: int = 0,
) -> PmseReport:
    """Observed pMSE divided by its mean under random relabelling of the stacked rows."""
    if permutations < 1:
        raise ValueError("permutations must be >= 1")
    variables = list(orig.names if variables is None else variables)
    preds, cols, labels = _stack(orig, synth, variables)
    observed, c = _pmse_from(preds, cols, labels, model_params)
    rng = np.random.default_rng(seed)
    null = [_pmse_from(preds, cols, rng.permutation(labels), model_params)[0] for _ in range(permutations)]
    null_mean = float(np.mean(null))
    ratio = observed / null_mean if null_mean > 0 else math.nan
    return PmseReport(observed, c, orig.n_rows, synth.n_rows, ratio, null_mean, null)


def pmse_ratio_matrix(
    orig: Dataset,
    synth: Dataset,
    variables=None,
    model_params: CartParams = PROPENSITY_PARAMS,
    permutations: int = 20,
    seed: int = 0,
) -> pd.DataFrame:
    """Standardized pMSE ratio for every pair of variables (symmetric, NaN diagonal)."""
    variables = list(orig.names if variables is None else variables)
    out = pd.DataFrame(np.nan, index=variables, columns=variables)
    for k, (a, b) in enumerate(itertools.combinations(variables, 2)):
        rep = standardized_pmse_ratio(orig, synth, [a, b], model_params, permutations, seed + k)
        out.loc[a, b] = out.loc[b, a] = rep.ratio
    return out


# --- narrow utility --------------------------------------------------------------

_OPS = {
    ">=": np.greater_equal,
    ">": np.greater,
    "<=": np.less_equal,
    "<": np.less,
    "==": np.equal,
    "!=": np.not_equal,
}


@dataclass(frozen=True)
class EstimateQuery:
    variable: str
    op: str
    value: float
    targets: tuple

    def __post_init__(self):
        if self.op not in _OPS:
            raise ValueError(f"unknown operator {self.op!r}")
        object.__setattr__(self, "targets", tuple(self.targets))

    def validate(self, schema):
        schema.check_names([self.variable, *self.targets])
        if schema[self.variable].kind not in (Kind.ORDINAL, Kind.BINARY):
            raise ValueError("the filter variable must be ordinal or binary")
        for t in self.targets:
            if schema[t].kind is not Kind.BINARY:
                raise ValueError(f"target {t} must be binary")


def replicate_estimates(orig: Dataset, synth_list: Mapping[str, Dataset], query: EstimateQuery, orig_label="original") -> pd.DataFrame:
    """Prevalence of each binary target among rows passing the filter.

    Rows are targets, columns datasets (original first). An empty subgroup
    yields NaN (undefined), not 0. Missing target cells are ignored.
    """
    datasets = {orig_label: orig, **dict(synth_list)}
    table = pd.DataFrame(index=list(query.targets), columns=list(datasets), dtype=float)
    for label, data in datasets.items():
        query.validate(data.schema)
        col = data[query.variable]
        with np.errstate(invalid="ignore"):
            keep = _OPS[query.op](col, query.value) & ~np.isnan(col)
        for t in query.targets:
            vals = data[t][keep]
            vals = vals[~np.isnan(vals)]
            table.loc[t, label] = vals.mean() if vals.size else np.nan
    return table


def compare_marginals(orig: Dataset, synth: Dataset, bins: int = 20) -> dict:
    """Per variable, a comparison table.

    Categorical variables get level frequencies (missing as ``NA``);
    quantitative ones get counts on bins shared by both datasets and the
    two-sample Kolmogorov-Smirnov statistic (``table.attrs["ks"]``).
    """
    out = {}
    for var in orig.schema:
        a, b = orig[var.name], synth[var.name]
        if var.kind is Kind.QUANTITATIVE:
            ao, bo = a[~np.isnan(a)], b[~np.isnan(b)]
            both = np.concatenate([ao, bo])
            edges = np.histogram_bin_edges(both, bins=bins) if both.size else np.array([0.0, 1.0])
            ca, _ = np.histogram(ao, edges)
            cb, _ = np.histogram(bo, edges)
            table = pd.DataFrame(
                {
                    "bin_low": edges[:-1],
                    "bin_high": edges[1:],
                    "orig_count": ca,
                    "synth_count": cb,
                    "orig_prop": ca / max(len(a), 1),
                    "synth_prop": cb / max(len(b), 1),
                }
            )
            table.loc[len(table)] = [np.nan, np.nan, np.isnan(a).sum(), np.isnan(b).sum(),
                                     np.isnan(a).mean() if len(a) else 0, np.isnan(b).mean() if len(b) else 0]
            ks = float(stats.ks_2samp(ao, bo).statistic) if ao.size and bo.size else math.nan
            table.attrs["ks"] = ks
        else:
            if var.kind is Kind.NOMINAL:
                levels = [str(lv) for lv in var.levels]
                codes = list(range(var.n_categories))
            else:
                levels = [str(lv) for lv in var.levels]
                codes = list(var.levels)
            rows = []
            for code, label in zip(codes, levels):
                rows.append((label, int((a == code).sum()), int((b == code).sum())))
            rows.append(("NA", int(np.isnan(a).sum()), int(np.isnan(b).sum())))
            table = pd.DataFrame(rows, columns=["level", "orig_count", "synth_count"])
            table["orig_prop"] = table["orig_count"] / max(len(a), 1)
            table["synth_prop"] = table["synth_count"] / max(len(b), 1)
        out[var.name] = table
    return out


def marginals_to_frame(tables: Mapping[str, pd.DataFrame]) -> pd.DataFrame:
    """Long plot-data frame: one line per (variable, level or bin)."""
    parts = []
    for name, t in tables.items():
        t = t.copy()
        if "level" not in t:
            t["level"] = [
                "NA" if np.isnan(lo) else f"[{lo!r},{hi!r})" for lo, hi in zip(t["bin_low"], t["bin_high"])
            ]
            t["ks"] = t.attrs.get("ks")
        t.insert(0, "variable", name)
        parts.append(t)
    cols = ["variable", "level", "bin_low", "bin_high", "orig_count", "synth_count", "orig_prop", "synth_prop", "ks"]
    return pd.concat(parts, ignore_index=True).reindex(columns=cols)
