"""Classification and regression trees with donor leaves, and sequential synthesis.

Trees here estimate conditional distributions rather than predict: each leaf
keeps the training row indices that fell into it, and synthesis samples donor
values from the leaf a partially synthesized row is routed to.

Predictor encoding
    quantitative and ordinal predictors are split by threshold (``x <= t`` goes
    left) on values / level ranks, with missing cells encoded as ``-inf``;
    binary and nominal predictors are split by category subset, with missing
    cells forming one extra category.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .tabular import Dataset, Kind, Variable

__all__ = [
    "CartParams",
    "SplitRule",
    "Node",
    "Tree",
    "build_tree",
    "leaf_of",
    "synthesize",
    "CartSynthesizer",
    "missing_indicator_name",
]

_EXHAUSTIVE_MAX_CATEGORIES = 10


@dataclass(frozen=True)
class CartParams:
    min_leaf: int = 33
    min_split: int = 100
    max_depth: int = 30
    seed: int = 0

    def __post_init__(self):
        if self.min_leaf < 1:
            raise ValueError("min_leaf must be >= 1")
        if self.min_split < 2 * self.min_leaf:
            raise ValueError("min_split must be >= 2 * min_leaf")
        if self.max_depth < 1:
            raise ValueError("max_depth must be >= 1")


@dataclass(frozen=True)
class SplitRule:
    """``threshold`` rules send ``x <= threshold`` left; category rules send
    members of ``left_categories`` left. ``right_categories`` records the other
    categories seen when the rule was fitted."""

    variable: str
    threshold: float | None = None
    left_categories: frozenset | None = None
    right_categories: frozenset | None = None

    @property
    def is_categorical(self) -> bool:
        return self.left_categories is not None


@dataclass
class Node:
    n: int
    depth: int
    rule: SplitRule | None = None
    left: "Node | None" = None
    right: "Node | None" = None
    donors: np.ndarray | None = None
    leaf_id: int = -1

    @property
    def is_leaf(self) -> bool:
        return self.rule is None


@dataclass(frozen=True)
class _Feature:
    name: str
    categorical: bool
    n_categories: int = 0  # extra missing category included


def _feature_for(var: Variable) -> _Feature:
    if var.kind in (Kind.BINARY, Kind.NOMINAL):
        return _Feature(var.name, True, var.n_categories + 1)
    return _Feature(var.name, False)


def _encode(var: Variable, values: np.ndarray) -> np.ndarray:
    values = np.asarray(values, dtype=float)
    miss = np.isnan(values)
    if var.kind in (Kind.BINARY, Kind.NOMINAL):
        out = values.copy()
        out[miss] = var.n_categories
        return out
    out = var.rank(values).astype(float)
    out[miss] = -np.inf
    return out


class Tree:
    """A fitted donor tree.

    ``leaves`` is in depth-first (left before right) order and
    ``leaves[i].leaf_id == i``; donor indices refer to rows of the training
    data passed to :func:`build_tree`.
    """

    def __init__(self, outcome: str, predictors: Sequence[Variable], root: Node, params: CartParams):
        self.outcome = outcome
        self.predictors = list(predictors)
        self.root = root
        self.params = params
        self.leaves = []
        self._index(root)
        self._features = {v.name: (v, _feature_for(v)) for v in self.predictors}

    def _index(self, node):
        if node.is_leaf:
            node.leaf_id = len(self.leaves)
            self.leaves.append(node)
        else:
            self._index(node.left)
            self._index(node.right)

    @property
    def n_leaves(self) -> int:
        return len(self.leaves)

    def nodes(self):
        stack = [self.root]
        while stack:
            node = stack.pop()
            yield node
            if not node.is_leaf:
                stack.extend((node.right, node.left))

    def apply(self, columns: Mapping[str, np.ndarray]) -> np.ndarray:
        """Leaf id of every row; ``columns`` maps predictor names to raw cells."""
        encoded = {}
        n = None
        for name, (var, _) in self._features.items():
            if name in columns:
                encoded[name] = _encode(var, columns[name])
                n = len(encoded[name])
        if n is None:
            n = len(next(iter(columns.values()))) if columns else 1
        out = np.empty(n, dtype=int)
        self._route(self.root, np.arange(n), encoded, out)
        return out

    def _route(self, node, rows, encoded, out):
        if node.is_leaf:
            out[rows] = node.leaf_id
            return
        rule = node.rule
        try:
            x = encoded[rule.variable][rows]
        except KeyError:
            raise KeyError(f"row does not supply predictor {rule.variable!r} tested by the tree") from None
        if rule.is_categorical:
            go_left = np.isin(x, list(rule.left_categories))
            seen = np.isin(x, list(rule.left_categories | rule.right_categories))
            if not seen.all():
                go_left[~seen] = node.left.n >= node.right.n
        else:
            go_left = x <= rule.threshold
        if go_left.any():
            self._route(node.left, rows[go_left], encoded, out)
        if not go_left.all():
            self._route(node.right, rows[~go_left], encoded, out)

    def to_dict(self) -> dict:
        def conv(node):
            if node.is_leaf:
                return {"leaf": node.leaf_id, "n": node.n}
            r = node.rule
            d = {"variable": r.variable, "n": node.n}
            if r.is_categorical:
                d["left_categories"] = sorted(r.left_categories)
                d["right_categories"] = sorted(r.right_categories)
            else:
                d["threshold"] = r.threshold
            d["left"] = conv(node.left)
            d["right"] = conv(node.right)
            return d

        return {"outcome": self.outcome, "root": conv(self.root)}


# --- growing -------------------------------------------------------------------


def _impurity_total(y, classification, n_classes):
    """Node impurity times node size (Gini or sum of squares)."""
    n = len(y)
    if n == 0:
        return 0.0
    if classification:
        counts = np.bincount(y.astype(int), minlength=n_classes)
        return n - (counts @ counts) / n
    return float(((y - y.mean()) ** 2).sum())


def _numeric_candidates(x, y, classification, n_classes, min_leaf):
    """Best threshold on one ordered predictor: (gain, threshold) or None."""
    n = len(x)
    order = np.argsort(x, kind="stable")
    xs = x[order]
    ys = y[order]
    nl = np.arange(1, n)
    valid = (xs[:-1] < xs[1:]) & (nl >= min_leaf) & (n - nl >= min_leaf)
    if not valid.any():
        return None
    if classification:
        onehot = np.zeros((n, n_classes))
        onehot[np.arange(n), ys.astype(int)] = 1.0
        cl = np.cumsum(onehot, axis=0)[:-1]
        total = cl[-1] + onehot[-1]
        cr = total - cl
        nr = n - nl
        child = (nl - (cl * cl).sum(1) / nl) + (nr - (cr * cr).sum(1) / nr)
    else:
        s = np.cumsum(ys)[:-1]
        s2 = np.cumsum(ys * ys)[:-1]
        tot, tot2 = s[-1] + ys[-1], s2[-1] + ys[-1] ** 2
        nr = n - nl
        child = (s2 - s * s / nl) + ((tot2 - s2) - (tot - s) ** 2 / nr)
    child = np.where(valid, child, np.inf)
    i = int(np.argmin(child))  # first minimum -> lowest threshold
    lo, hi = xs[i], xs[i + 1]
    threshold = hi - 1.0 if np.isinf(lo) else (lo + hi) / 2.0
    if not lo < threshold < hi:
        threshold = lo
    return child[i], threshold


def _categorical_candidates(x, y, classification, n_classes, min_leaf):
    """Best category subset: (child impurity, left set, right set) or None."""
    cats, inv = np.unique(x.astype(int), return_inverse=True)
    k = len(cats)
    if k < 2:
        return None
    counts = np.bincount(inv, minlength=k).astype(float)
    if classification:
        stats = np.zeros((k, n_classes))
        np.add.at(stats, (inv, y.astype(int)), 1.0)
    else:
        stats = np.column_stack(
            [np.bincount(inv, weights=y, minlength=k), np.bincount(inv, weights=y * y, minlength=k)]
        )

    if k <= _EXHAUSTIVE_MAX_CATEGORIES:
        # left subsets never contain the last category: each partition once
        masks = np.array(list(itertools.product((0.0, 1.0), repeat=k - 1)))[1:]
        masks = np.column_stack([masks, np.zeros(len(masks))])
    else:
        if classification:
            major = int(np.argmax(stats.sum(0)))
            score = stats[:, major] / counts
        else:
            score = stats[:, 0] / counts
        rank = np.argsort(score, kind="stable")
        masks = np.zeros((k - 1, k))
        for j in range(1, k):
            masks[j - 1, rank[:j]] = 1.0

    nl = masks @ counts
    nr = counts.sum() - nl
    if classification:
        cl = masks @ stats
        cr = stats.sum(0) - cl
        with np.errstate(divide="ignore", invalid="ignore"):
            child = (nl - (cl * cl).sum(1) / nl) + (nr - (cr * cr).sum(1) / nr)
    else:
        sl = masks @ stats
        sr = stats.sum(0) - sl
        with np.errstate(divide="ignore", invalid="ignore"):
            child = (sl[:, 1] - sl[:, 0] ** 2 / nl) + (sr[:, 1] - sr[:, 0] ** 2 / nr)
    valid = (nl >= min_leaf) & (nr >= min_leaf)
    if not valid.any():
        return None
    child = np.where(valid, child, np.inf)
    i = int(np.argmin(child))
    left = frozenset(int(c) for c in cats[masks[i] == 1.0])
    right = frozenset(int(c) for c in cats[masks[i] == 0.0])
    return child[i], left, right


def _grow(X, features, y, classification, n_classes, params, rows, depth):
    node = Node(n=len(rows), depth=depth)
    yn = y[rows]
    parent = _impurity_total(yn, classification, n_classes)
    if len(rows) < params.min_split or depth >= params.max_depth or parent <= 1e-12 * max(1.0, len(rows)):
        node.donors = rows
        return node
    tol = 1e-10 * max(1.0, parent)
    best = None  # (child impurity, feature index, payload)
    for j, feat in enumerate(features):
        x = X[rows, j]
        if feat.categorical:
            res = _categorical_candidates(x, yn, classification, n_classes, params.min_leaf)
        else:
            res = _numeric_candidates(x, yn, classification, n_classes, params.min_leaf)
        if res is None:
            continue
        if best is None or res[0] < best[0] - tol:
            best = (res[0], j, res[1:])
    if best is None or parent - best[0] <= tol:
        node.donors = rows
        return node
    _, j, payload = best
    feat = features[j]
    x = X[rows, j]
    if feat.categorical:
        left_set, right_set = payload
        rule = SplitRule(feat.name, left_categories=left_set, right_categories=right_set)
        go_left = np.isin(x, list(left_set))
    else:
        (threshold,) = payload
        rule = SplitRule(feat.name, threshold=float(threshold))
        go_left = x <= threshold
    node.rule = rule
    node.left = _grow(X, features, y, classification, n_classes, params, rows[go_left], depth + 1)
    node.right = _grow(X, features, y, classification, n_classes, params, rows[~go_left], depth + 1)
    return node


def _outcome_task(var: Variable, values: np.ndarray):
    """Return (classification, n_classes, encoded y, usable-row mask)."""
    miss = np.isnan(values)
    if var.kind is Kind.QUANTITATIVE:
        return False, 0, np.where(miss, 0.0, values), ~miss
    if var.kind is Kind.ORDINAL and not miss.any():
        return False, 0, var.rank(values), ~miss
    if var.kind is Kind.ORDINAL:
        # missing is a modality of its own: Gini over levels + missing
        lookup = {code: i for i, code in enumerate(var.levels)}
        y = np.array([var.n_categories if np.isnan(v) else lookup[int(v)] for v in values], dtype=float)
        return True, var.n_categories + 1, y, np.ones(len(values), dtype=bool)
    y = np.where(miss, var.n_categories, values)
    return True, var.n_categories + 1, y, np.ones(len(values), dtype=bool)


def _build(outcome_var, y_values, predictors, columns, params):
    classification, n_classes, y, usable = _outcome_task(outcome_var, y_values)
    if not usable.any():
        raise ValueError(f"outcome {outcome_var.name!r} has no usable (non-missing) values")
    rows = np.flatnonzero(usable)
    features = [_feature_for(v) for v in predictors]
    if predictors:
        X = np.column_stack([_encode(v, columns[v.name]) for v in predictors])
    else:
        X = np.empty((len(y), 0))
    root = _grow(X, features, y, classification, n_classes, params, rows, 0)
    return Tree(outcome_var.name, predictors, root, params)


def build_tree(data: Dataset, outcome: str, predictors: Sequence[str], params: CartParams = CartParams()) -> Tree:
    """Greedy recursive partitioning of ``data`` on ``outcome``.

    Gini decrease is used for binary / nominal outcomes (and ordinal outcomes
    with missing cells); variance reduction on values or level ranks otherwise.
    Rows with a missing quantitative outcome are left out of the tree.
    """
    if data.n_rows == 0:
        raise ValueError("cannot build a tree on empty data")
    data.schema.check_names([outcome, *predictors])
    if outcome in predictors:
        raise ValueError("outcome cannot also be a predictor")
    preds = [data.schema[p] for p in predictors]
    return _build(data.schema[outcome], data[outcome], preds, {p: data[p] for p in predictors}, params)


def leaf_of(tree: Tree, row: Mapping[str, float]) -> int:
    """Leaf id for one (partial) row given as ``{name: value}``."""
    cols = {k: np.array([np.nan if v is None else v], dtype=float) for k, v in row.items()}
    return int(tree.apply(cols)[0])


# --- sequential synthesis --------------------------------------------------------


def missing_indicator_name(name: str) -> str:
    return f"{name}.__missing__"


@dataclass(frozen=True)
class _Step:
    target: str  # variable name the step writes
    variable: Variable  # schema variable, or the synthetic 0/1 indicator
    indicator_of: str | None = None  # set for auxiliary missingness steps
    gated_by: str | None = None  # indicator that blanks this value


class CartSynthesizer(BaseEstimator):
    """Sequential CART synthesizer.

    The first variable in ``order`` is bootstrapped from its training marginal;
    each later variable gets a tree fitted on the real data with all
    earlier variables as predictors, and synthetic values are drawn uniformly
    with replacement from the donor values in the leaf each synthetic row
    lands in. Quantitative variables with missing cells are preceded by an
    auxiliary missingness indicator, and their value tree uses complete cases.

    Parameters
    ----------
    min_leaf, min_split, max_depth : int
        Tree stopping controls.
    order : list of str, optional
        Synthesis order; defaults to schema order.
    random_state : int
        Seed for sampling. Fitting is deterministic.
    """

    def __init__(self, min_leaf=33, min_split=100, max_depth=30, order=None, random_state=0):
        self.min_leaf = min_leaf
        self.min_split = min_split
        self.max_depth = max_depth
        self.order = order
        self.random_state = random_state

    @property
    def params(self) -> CartParams:
        return CartParams(self.min_leaf, self.min_split, self.max_depth, self.random_state)

    def fit(self, data: Dataset, y=None):
        params = self.params
        if data.n_rows == 0:
            raise ValueError("cannot synthesize from empty data")
        order = list(data.names if self.order is None else self.order)
        if sorted(order) != sorted(data.names) or len(set(order)) != len(order):
            raise ValueError("order must be a permutation of the schema names")

        steps = []
        columns = {}
        for name in order:
            var = data.schema[name]
            values = data[name]
            if var.kind is Kind.QUANTITATIVE and np.isnan(values).any():
                ind = missing_indicator_name(name)
                steps.append(_Step(ind, Variable(ind, Kind.BINARY), indicator_of=name))
                columns[ind] = np.isnan(values).astype(float)
                steps.append(_Step(name, var, gated_by=ind))
            else:
                steps.append(_Step(name, var))
            columns[name] = values

        trees = []
        for i, step in enumerate(steps):
            if i == 0:
                trees.append(None)
                continue
            preds = [s.variable for s in steps[:i]]
            trees.append(_build(step.variable, columns[step.target], preds, columns, params))

        self.schema_ = data.schema
        self.order_ = order
        self.steps_ = steps
        self.trees_ = trees
        self.train_columns_ = columns
        self.n_train_ = data.n_rows
        return self

    def sample(self, m: int, random_state=None) -> Dataset:
        """Draw ``m`` synthetic rows; deterministic given the seed."""
        check_is_fitted(self, "trees_")
        if m < 1:
            raise ValueError("m must be >= 1")
        seed = self.random_state if random_state is None else random_state
        out = {}
        for i, (step, tree) in enumerate(zip(self.steps_, self.trees_)):
            rng = np.random.default_rng(np.random.SeedSequence([int(seed), i]))
            train = self.train_columns_[step.target]
            if tree is None:
                values = train[rng.integers(0, self.n_train_, size=m)]
            else:
                leaves = tree.apply(out)
                values = np.empty(m)
                u = rng.random(m)
                for leaf_id in np.unique(leaves):
                    sel = leaves == leaf_id
                    donors = tree.leaves[leaf_id].donors
                    pick = np.minimum((u[sel] * len(donors)).astype(int), len(donors) - 1)
                    values[sel] = train[donors[pick]]
            if step.gated_by is not None:
                values = np.where(out[step.gated_by] == 1.0, np.nan, values)
            out[step.target] = values
        return Dataset(self.schema_, {n: out[n] for n in self.schema_.names}, validate=False)

    def fit_sample(self, data: Dataset, m: int | None = None) -> Dataset:
        return self.fit(data).sample(data.n_rows if m is None else m)


def synthesize(data: Dataset, order: Sequence[str] | None, params: CartParams, m: int) -> Dataset:
    synth = CartSynthesizer(params.min_leaf, params.min_split, params.max_depth, order, params.seed)
    return synth.fit(data).sample(m)
