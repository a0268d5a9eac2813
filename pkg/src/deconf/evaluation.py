"""Cross-validation, feature-selection metrics, and replication aggregation.

Lambda is always selected at the minimum cross-validation error.  PLMM
folds are predicted with the BLUP correction (the test fold is correlated
with the training fold through the similarity matrix); LASSO and PC-LASSO
use the plain mean prediction, with PC loadings computed inside each
training fold by default so no test information leaks into the scores.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .confound import Dataset
from .solvers import (
    LassoPath,
    _pc_basis,
    blup_predict,
    decomposition_from_K,
    estimate_K,
    fitted_values,
    lasso_path,
    pc_lasso_path,
    plmm_decomposition,
    plmm_path,
    rotate,
)

METHODS = ("lasso", "pc_lasso", "plmm")
PAUC_LIMIT = 50


@dataclass
class CvResult:
    """Per-lambda cross-validation error and the selected index."""

    lambdas: np.ndarray
    cve: np.ndarray
    lambda_min_index: int
    fold_assignment: np.ndarray

    @property
    def lambda_min(self) -> float:
        return float(self.lambdas[self.lambda_min_index])


@dataclass
class MetricsSummary:
    """Replication-averaged metrics for one method.

    ``relative_mse``/``relative_mae`` are ratios of replication means
    against LASSO (exactly 1 for LASSO itself).  ``model_size_quantiles``
    holds the 0.1/0.25/0.5/0.75/0.9 quantiles used for box plots;
    ``precision_curve`` is the pointwise mean of the filled per-replication
    curves on sizes 1..50.
    """

    method: str
    n_replications: int
    mse: float
    mae: float
    relative_mse: float
    relative_mae: float
    model_size: float
    model_size_quantiles: dict[float, float] = field(default_factory=dict)
    pauc_50: float = float("nan")
    precision_at_cv_size: float = float("nan")
    pe: float = float("nan")
    precision_curve: np.ndarray | None = None


def fit_method_path(
    method: str,
    X: np.ndarray,
    y: np.ndarray,
    k: int = 10,
    lambdas: np.ndarray | None = None,
) -> LassoPath:
    """Fit the full-data path for one of the three methods."""
    if method == "lasso":
        return lasso_path(X, y, lambdas=lambdas)
    if method == "pc_lasso":
        return pc_lasso_path(X, y, k, lambdas=lambdas)
    if method == "plmm":
        return plmm_path(X, y, lambdas=lambdas)
    raise ValueError(f"unknown method {method!r}; expected one of {METHODS}")


def _fold_assignment(n: int, n_folds: int, seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    perm = rng.permutation(n)
    assignment = np.empty(n, dtype=np.int64)
    assignment[perm] = np.arange(n) % n_folds
    return assignment


def cross_validate(
    method: str,
    X: np.ndarray,
    y: np.ndarray,
    n_folds: int = 10,
    seed: int = 0,
    *,
    k: int = 10,
    lambdas: np.ndarray | None = None,
    pc_within_fold: bool = True,
) -> CvResult:
    """K-fold cross-validation error along a shared lambda grid.

    Folds come from a seeded permutation with sizes differing by at most
    one.  The grid is taken from the full-data fit when ``lambdas`` is not
    supplied.  Fold predictions: intercept + X beta for LASSO, plus the
    projection of test rows onto the training fold's PC basis for PC-LASSO
    (set ``pc_within_fold=False`` to use full-data loadings), and the BLUP
    correction for PLMM.  Ties in the CVE go to the largest lambda.
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    n = X.shape[0]
    if n_folds < 2:
        raise ValueError("n_folds must be at least 2")
    if n / n_folds < 3:
        raise ValueError(
            f"folds too small: n={n} with {n_folds} folds leaves < 3 rows per fold"
        )
    if lambdas is None:
        lambdas = fit_method_path(method, X, y, k=k).lambdas
    assignment = _fold_assignment(n, n_folds, seed)

    if method == "pc_lasso" and not pc_within_fold:
        V_full, sd_full = _pc_basis(X, k)

    sse = np.zeros(len(lambdas))
    for fold in range(n_folds):
        te = assignment == fold
        tr = ~te
        X_tr, y_tr, X_te, y_te = X[tr], y[tr], X[te], y[te]
        if method == "lasso":
            path = lasso_path(X_tr, y_tr, lambdas=lambdas)
            pred = fitted_values(path, X_te)
        elif method == "pc_lasso":
            if pc_within_fold:
                V, sd = _pc_basis(X_tr, k)
            else:
                V, sd = V_full, sd_full
            path = lasso_path(
                X_tr, y_tr, lambdas=lambdas, unpenalized=(X_tr @ V) / sd,
                method="pc_lasso",
            )
            pred = fitted_values(path, X_te, unpenalized=(X_te @ V) / sd)
        elif method == "plmm":
            decomp = plmm_decomposition(X_tr, y_tr)
            rot = rotate(X_tr, y_tr, decomp)
            path = lasso_path(
                rot.X, rot.y, lambdas=lambdas,
                intercept_column=rot.intercept, method="plmm",
            )
            K_joint = estimate_K(np.vstack([X_tr, X_te]))
            joint = decomposition_from_K(K_joint, decomp.sigma_s2, decomp.sigma_e2)
            y_adj = y_tr[:, None] - path.intercepts[None, :]
            pred = path.intercepts[None, :] + blup_predict(
                path.coefs, X_te, X_tr, y_adj, joint
            )
        else:
            raise ValueError(f"unknown method {method!r}; expected one of {METHODS}")
        sse += ((y_te[:, None] - pred) ** 2).sum(axis=0)
    cve = sse / n
    return CvResult(
        lambdas=np.asarray(lambdas, dtype=float),
        cve=cve,
        lambda_min_index=int(np.argmin(cve)),
        fold_assignment=assignment,
    )


def precision_curve(path: LassoPath, support: np.ndarray) -> dict[int, float]:
    """Precision TP/(TP+FP) of the selected set, indexed by model size.

    Walks the path from the largest lambda down; the first occurrence of
    each model size wins.  The returned map is filled to be total on
    1..max(visited): unvisited sizes carry the previous visited value
    forward, and sizes below the first visited size take its value.
    """
    support = np.asarray(support)
    if support.size == 0:
        raise ValueError("support is empty: precision is undefined")
    true_set = set(int(j) for j in support)
    pen_idx = path.penalty_factor > 0
    visited: dict[int, float] = {}
    for l in range(len(path.lambdas)):
        size = int(path.model_sizes[l])
        if size == 0 or size in visited:
            continue
        selected = np.flatnonzero((path.coefs[:, l] != 0) & pen_idx)
        tp = sum(1 for j in selected if int(j) in true_set)
        visited[size] = tp / size
    if not visited:
        return {}
    out: dict[int, float] = {}
    first = min(visited)
    last = visited[first]
    for size in range(1, max(visited) + 1):
        if size in visited:
            last = visited[size]
        out[size] = last
    return out


def pauc(curve: dict[int, float], limit: int = PAUC_LIMIT) -> float:
    """Unit-width step area under the precision curve on sizes 1..limit.

    Sizes beyond the largest entry carry the last value forward; sizes
    below the smallest entry take its value.  Maximum is ``limit``; an
    empty curve scores 0.
    """
    if not curve:
        return 0.0
    first = min(curve)
    last = curve[first]
    total = 0.0
    for size in range(1, limit + 1):
        if size in curve:
            last = curve[size]
        total += last
    return total


def fill_curve(curve: dict[int, float], limit: int = PAUC_LIMIT) -> np.ndarray:
    """Curve as a dense array on sizes 1..limit (same fill rule as pauc)."""
    out = np.zeros(limit)
    if not curve:
        return out
    first = min(curve)
    last = curve[first]
    for size in range(1, limit + 1):
        if size in curve:
            last = curve[size]
        out[size - 1] = last
    return out


def estimation_errors(beta_hat: np.ndarray, beta: np.ndarray) -> tuple[float, float]:
    """Squared-l2 and l1 estimation errors of one replication."""
    diff = np.asarray(beta_hat, dtype=float) - np.asarray(beta, dtype=float)
    return float(diff @ diff), float(np.abs(diff).sum())


MODEL_SIZE_QUANTILES = (0.1, 0.25, 0.5, 0.75, 0.9)


def aggregate_replications(records: list[dict]) -> dict[str, MetricsSummary]:
    """Aggregate per-replication records into per-method summaries.

    Each record is a dict with at least ``method``, ``se2``, ``ae`` and
    ``model_size``; ``pauc50``, ``precision_cv``, ``pe`` and ``curve`` (a
    length-50 array) are averaged when present.  Relative errors are
    ratios of replication means against LASSO's means, so LASSO's own
    relative metrics are exactly 1.
    """
    if not records:
        raise ValueError("no replication records to aggregate")
    by_method: dict[str, list[dict]] = {}
    for rec in records:
        by_method.setdefault(rec["method"], []).append(rec)

    means: dict[str, dict[str, float]] = {}
    for method, recs in by_method.items():
        means[method] = {
            "mse": float(np.mean([r["se2"] for r in recs])),
            "mae": float(np.mean([r["ae"] for r in recs])),
        }
    base = means.get("lasso")

    out: dict[str, MetricsSummary] = {}
    for method, recs in by_method.items():
        sizes = np.array([r["model_size"] for r in recs], dtype=float)
        quants = {
            q: float(np.quantile(sizes, q)) for q in MODEL_SIZE_QUANTILES
        }
        if method == "lasso":
            rel_mse = rel_mae = 1.0
        elif base is not None:
            rel_mse = means[method]["mse"] / base["mse"]
            rel_mae = means[method]["mae"] / base["mae"]
        else:
            rel_mse = rel_mae = float("nan")

        def _mean_of(key):
            vals = [r[key] for r in recs if key in r and r[key] is not None]
            return float(np.mean(vals)) if vals else float("nan")

        curves = [r["curve"] for r in recs if r.get("curve") is not None]
        out[method] = MetricsSummary(
            method=method,
            n_replications=len(recs),
            mse=means[method]["mse"],
            mae=means[method]["mae"],
            relative_mse=rel_mse,
            relative_mae=rel_mae,
            model_size=float(sizes.mean()),
            model_size_quantiles=quants,
            pauc_50=_mean_of("pauc50"),
            precision_at_cv_size=_mean_of("precision_cv"),
            pe=_mean_of("pe"),
            precision_curve=np.mean(curves, axis=0) if curves else None,
        )
    return out


def evaluate_replication(
    method: str,
    data: Dataset,
    seed: int,
    n_folds: int = 10,
    k: int = 10,
) -> dict:
    """Fit + cross-validate one method on one dataset; returns a record.

    The record feeds :func:`aggregate_replications`: method, lambda_min,
    model_size, se2, ae, pauc50, precision_cv, pe, and the filled
    precision curve (None when the data carries no ground truth).
    """
    path = fit_method_path(method, data.X, data.y, k=k)
    cv = cross_validate(
        method, data.X, data.y, n_folds=n_folds, seed=seed,
        k=k, lambdas=path.lambdas,
    )
    l_min = cv.lambda_min_index
    beta_hat = path.coefs[:, l_min]
    rec = {
        "method": method,
        "lambda_min": cv.lambda_min,
        "model_size": int(path.model_sizes[l_min]),
        "pe": float(cv.cve[l_min]),
    }
    if data.beta is not None:
        se2, ae = estimation_errors(beta_hat, data.beta)
        rec["se2"] = se2
        rec["ae"] = ae
        curve = precision_curve(path, data.support)
        rec["pauc50"] = pauc(curve)
        rec["curve"] = fill_curve(curve)
        size = rec["model_size"]
        if size > 0:
            selected = np.flatnonzero(beta_hat != 0)
            tp = np.intersect1d(selected, data.support).size
            rec["precision_cv"] = tp / size
        else:
            rec["precision_cv"] = float("nan")
    return rec
