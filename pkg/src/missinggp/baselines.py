"""Non-GP imputation baselines: mean, median, KNN, chained linear regression.

All baselines fit exclusively on the training split and preserve observed
cells bit-exactly. Matrices use NaN for missing entries or an explicit mask.
"""

import logging
from dataclasses import dataclass

import numpy as np

from .errors import ContractError

log = logging.getLogger(__name__)


def _combine_mask(values, mask):
    values = np.asarray(values, dtype=np.float64)
    mask = np.zeros(values.shape, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    return values, mask | np.isnan(values)


def _column_stat(values, mask, stat):
    out = np.empty(values.shape[1])
    for col in range(values.shape[1]):
        observed = values[~mask[:, col], col]
        if observed.size == 0:
            raise ContractError(f"column {col} has no observed training values")
        out[col] = stat(observed)
    return out


def _fill(values, mask, column_values):
    completed = values.copy()
    rows, cols = np.nonzero(mask)
    completed[rows, cols] = column_values[cols]
    return completed


@dataclass
class FittedImputer:
    """Fitted state of a baseline; ``transform`` completes new matrices."""

    kind: str
    statistics: dict

    def transform(self, values, mask=None):
        values, mask = _combine_mask(values, mask)
        if self.kind in ("mean", "median"):
            return _fill(values, mask, self.statistics["columns"])
        if self.kind == "knn":
            return _knn_complete(
                self.statistics["train"],
                self.statistics["train_mask"],
                values,
                mask,
                self.statistics["k"],
            )
        if self.kind == "mice":
            return _mice_apply(self.statistics, values, mask)
        raise ContractError(f"unknown imputer kind {self.kind!r}")


def fit_transform_mean(train, test, train_mask=None, test_mask=None):
    """Column means of observed training cells fill both splits."""
    train, train_mask = _combine_mask(train, train_mask)
    test, test_mask = _combine_mask(test, test_mask)
    means = _column_stat(train, train_mask, np.mean)
    imputer = FittedImputer(kind="mean", statistics={"columns": means})
    return _fill(train, train_mask, means), _fill(test, test_mask, means), imputer


def fit_transform_median(train, test, train_mask=None, test_mask=None):
    """Column medians of observed training cells fill both splits."""
    train, train_mask = _combine_mask(train, train_mask)
    test, test_mask = _combine_mask(test, test_mask)
    medians = _column_stat(train, train_mask, np.median)
    imputer = FittedImputer(kind="median", statistics={"columns": medians})
    return _fill(train, train_mask, medians), _fill(test, test_mask, medians), imputer


def _pairwise_distances(query, query_mask, train, train_mask):
    """Mean squared difference over mutually observed coordinates.

    Pairs with no shared observed coordinate get infinite distance.
    """
    q_obs = ~query_mask
    t_obs = ~train_mask
    q_filled = np.where(q_obs, query, 0.0)
    t_filled = np.where(t_obs, train, 0.0)
    shared = q_obs.astype(np.float64) @ t_obs.T.astype(np.float64)
    sq = (
        (q_filled**2 * q_obs) @ t_obs.T.astype(np.float64)
        + q_obs.astype(np.float64) @ (t_filled**2 * t_obs).T
        - 2.0 * q_filled @ t_filled.T
    )
    with np.errstate(invalid="ignore", divide="ignore"):
        d2 = np.where(shared > 0, sq / shared, np.inf)
    return np.maximum(d2, 0.0)


def _knn_complete(train, train_mask, query, query_mask, k):
    completed = query.copy()
    if not query_mask.any():
        return completed
    d2 = _pairwise_distances(query, query_mask, train, train_mask)
    t_obs = ~train_mask
    for row, col in zip(*np.nonzero(query_mask)):
        candidates = np.nonzero(t_obs[:, col])[0]
        if candidates.size == 0:
            log.warning("knn: no training row observes column %d; falling back to column mean", col)
            fallback = query[~query_mask[:, col], col]
            completed[row, col] = fallback.mean() if fallback.size else 0.0
            continue
        dists = d2[row, candidates]
        order = np.argsort(dists, kind="stable")  # ties keep lowest row index
        chosen = candidates[order[: min(k, candidates.size)]]
        completed[row, col] = train[chosen, col].mean()
    return completed


def knn_impute(train, query, train_mask=None, query_mask=None, k=2):
    """Average of the attribute over the k nearest training rows observing it.

    Distances are mean squared differences over mutually observed
    coordinates; ties at the k-th neighbor keep the lowest row index; fewer
    than k candidates average over all of them.
    """
    if k < 1:
        raise ContractError(f"k must be >= 1, got {k}")
    train, train_mask = _combine_mask(train, train_mask)
    query, query_mask = _combine_mask(query, query_mask)
    imputer = FittedImputer(kind="knn", statistics={"train": train, "train_mask": train_mask, "k": k})
    return _knn_complete(train, train_mask, query, query_mask, k), imputer


def _regress(design, target):
    """Least squares with an intercept; ridge fallback when rank-deficient."""
    a = np.column_stack([np.ones(design.shape[0]), design])
    coef, _, rank, _ = np.linalg.lstsq(a, target, rcond=None)
    if rank < a.shape[1]:
        log.warning("mice: rank-deficient design (%d < %d), using ridge fallback", rank, a.shape[1])
        gram = a.T @ a + 1e-6 * np.eye(a.shape[1])
        coef = np.linalg.solve(gram, a.T @ target)
    return coef


def mice_impute(train, test, train_mask=None, test_mask=None, rounds=10):
    """Chained-equation imputation with deterministic linear regressions.

    Missing cells start at training column means; each round refits one
    regression per missing-bearing attribute on the currently-completed
    training matrix and re-predicts that attribute's missing cells in both
    splits. No posterior draws: a single completed dataset per split.
    """
    if rounds < 1:
        raise ContractError(f"rounds must be >= 1, got {rounds}")
    train, train_mask = _combine_mask(train, train_mask)
    test, test_mask = _combine_mask(test, test_mask)
    means = _column_stat(train, train_mask, np.mean)
    tr = _fill(train, train_mask, means)
    te = _fill(test, test_mask, means)
    d = train.shape[1]
    bearing = [c for c in range(d) if train_mask[:, c].any() or test_mask[:, c].any()]
    coefs = {}
    for _ in range(rounds):
        for col in bearing:
            others = [c for c in range(d) if c != col]
            observed = ~train_mask[:, col]
            if not observed.any():
                continue
            coef = _regress(tr[np.ix_(observed, others)], tr[observed, col])
            coefs[col] = (others, coef)
            if train_mask[:, col].any():
                rows = train_mask[:, col]
                tr[rows, col] = np.column_stack([np.ones(rows.sum()), tr[np.ix_(rows, others)]]) @ coef
            if test_mask[:, col].any():
                rows = test_mask[:, col]
                te[rows, col] = np.column_stack([np.ones(rows.sum()), te[np.ix_(rows, others)]]) @ coef
    imputer = FittedImputer(kind="mice", statistics={"means": means, "coefficients": coefs, "rounds": rounds})
    return tr, te, imputer


def _mice_apply(statistics, values, mask):
    completed = _fill(values, mask, statistics["means"])
    for _ in range(statistics["rounds"]):
        for col, (others, coef) in statistics["coefficients"].items():
            rows = mask[:, col]
            if rows.any():
                completed[rows, col] = np.column_stack([np.ones(rows.sum()), completed[np.ix_(rows, others)]]) @ coef
    return completed
