"""Penalized regression solvers: LASSO path, PC-LASSO, and PLMM.

All three minimize (1/2n) ||y - X beta - U alpha||^2 + lambda ||beta||_1
along a decreasing lambda path with warm starts, where U is an unpenalized
block (always containing an intercept column).  PC-LASSO puts the leading
principal-component scores of X into U; PLMM whitens (X, y) by the inverse
square root of Sigma = sigma_s^2 K + sigma_e^2 I before fitting, with
K = XX'/p and the variance components estimated from the null model.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from functools import cached_property
from typing import NamedTuple

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from . import _cd

MAX_SWEEPS = 100_000
# Gram ("cov") updates pay off only when the Gram fits comfortably and each
# column dot (cost n) is much dearer than a gradient-row update (cost p).
COV_FORMULATION_MAX_P = 500
COV_FORMULATION_MIN_ASPECT = 2.0


class ConvergenceError(RuntimeError):
    """Coordinate descent failed to converge within the sweep budget."""


class FlatLikelihoodWarning(UserWarning):
    """Variance-component profile likelihood is flat; eta not identified."""


class EtaBoundaryWarning(UserWarning):
    """Estimated eta sits on the boundary of its search interval."""


@dataclass
class LassoPath:
    """Solution path of one penalized fit.

    ``coefs`` is p x L (one column per lambda), ``unpenalized_coefs`` is
    k x L for the extra unpenalized block (empty for plain LASSO and PLMM).
    ``model_sizes`` counts nonzero penalized coefficients per lambda.
    ``max_objective_increase`` is the largest per-sweep objective increase
    observed while fitting (rounding-level for exact coordinate descent).
    """

    lambdas: np.ndarray
    coefs: np.ndarray
    intercepts: np.ndarray
    unpenalized_coefs: np.ndarray
    method: str
    n_iters: np.ndarray
    model_sizes: np.ndarray
    penalty_factor: np.ndarray
    max_objective_increase: float

    def __post_init__(self):
        if len(self.lambdas) > 1 and not np.all(np.diff(self.lambdas) < 0):
            raise ValueError("lambdas must be strictly decreasing")


def backend() -> str:
    """Active coordinate-descent backend, 'numba' or 'numpy'."""
    return _cd.BACKEND


def _as_finite_2d(X, name):
    X = np.ascontiguousarray(X, dtype=float)
    if X.ndim != 2:
        raise ValueError(f"{name} must be 2-D")
    if not np.all(np.isfinite(X)):
        raise ValueError(f"{name} contains non-finite values")
    return X


def _as_finite_1d(y, n, name):
    y = np.ascontiguousarray(y, dtype=float)
    if y.shape != (n,):
        raise ValueError(f"{name} must have shape ({n},)")
    if not np.all(np.isfinite(y)):
        raise ValueError(f"{name} contains non-finite values")
    return y


def lasso_path(
    X: np.ndarray,
    y: np.ndarray,
    lambdas: np.ndarray | None = None,
    penalty_factor: np.ndarray | None = None,
    unpenalized: np.ndarray | None = None,
    *,
    intercept_column: np.ndarray | None = None,
    n_lambdas: int = 100,
    lambda_min_ratio: float = 1e-3,
    tol: float | None = None,
    max_sweeps: int = MAX_SWEEPS,
    formulation: str | None = None,
    method: str = "lasso",
) -> LassoPath:
    """Coordinate-descent LASSO path with warm starts.

    The default grid has 100 log-spaced values from lambda_max (the
    smallest lambda with all penalized coefficients zero, computed from the
    residual after fitting the unpenalized block) down to 0.001 lambda_max.
    ``unpenalized`` columns carry no penalty; an intercept is always
    included (pass ``intercept_column`` to replace the constant column, as
    PLMM does with the rotated ones vector).  ``penalty_factor`` rescales
    the penalty per feature; entries of 0 leave a feature unpenalized.

    Convergence requires both a max coefficient change below ``tol``
    (default 1e-7 * sd(y)) and a confirmed KKT pass at the same tolerance.
    """
    X = _as_finite_2d(X, "X")
    n, p = X.shape
    y = _as_finite_1d(y, n, "y")

    if penalty_factor is None:
        pen = np.ones(p)
    else:
        pen = np.ascontiguousarray(penalty_factor, dtype=float)
        if pen.shape != (p,) or not np.all(np.isfinite(pen)) or np.any(pen < 0):
            raise ValueError("penalty_factor must be length-p, finite, nonnegative")

    if intercept_column is None:
        ic = np.ones(n)
    else:
        ic = _as_finite_1d(intercept_column, n, "intercept_column")
    blocks = [ic[:, None]]
    k_extra = 0
    if unpenalized is not None:
        Uex = _as_finite_2d(unpenalized, "unpenalized")
        if Uex.shape[0] != n:
            raise ValueError("unpenalized block must have n rows")
        k_extra = Uex.shape[1]
        if k_extra > 0:
            blocks.append(Uex)
    U = np.ascontiguousarray(np.column_stack(blocks))
    Uplus = np.ascontiguousarray(np.linalg.pinv(U))

    sd_y = float(y.std())
    if tol is None:
        tol = 1e-7 * sd_y
    tol = max(tol, 1e-14)
    kkt_tol = max(tol, 1e-12)

    if lambdas is None:
        r0 = y - U @ (Uplus @ y)
        g0 = np.abs(X.T @ r0) / n
        mask = pen > 0
        lam_max = float((g0[mask] / pen[mask]).max()) if mask.any() else 0.0
        if lam_max <= 0:
            lambdas = np.zeros(1)
        else:
            # tiny headroom so rounding cannot activate a coefficient at the top
            lam_max *= 1.0 + 1e-10
            lambdas = np.geomspace(lam_max, lam_max * lambda_min_ratio, n_lambdas)
    else:
        lambdas = np.ascontiguousarray(lambdas, dtype=float)
        if lambdas.ndim != 1 or len(lambdas) == 0:
            raise ValueError("lambdas must be a nonempty 1-D array")
        if not np.all(np.isfinite(lambdas)) or np.any(lambdas < 0):
            raise ValueError("lambdas must be finite and nonnegative")
        if len(lambdas) > 1 and not np.all(np.diff(lambdas) < 0):
            raise ValueError("lambdas must be strictly decreasing")

    if formulation is None:
        formulation = (
            "cov"
            if p <= COV_FORMULATION_MAX_P and n >= COV_FORMULATION_MIN_ASPECT * p
            else "naive"
        )
    if formulation == "naive":
        Xf = np.asfortranarray(X)
        coefs, alphas, n_iters, converged, obj_inc = _cd.path_naive(
            Xf, y, U, Uplus, lambdas, pen, tol, kkt_tol, max_sweeps
        )
    elif formulation == "cov":
        G = np.ascontiguousarray(X.T @ X / n)
        c = X.T @ y / n
        PX = np.ascontiguousarray(Uplus @ X)
        Py = Uplus @ y
        B = np.ascontiguousarray(X.T @ U / n)
        Guu = np.ascontiguousarray(U.T @ U / n)
        uy = U.T @ y / n
        ms_y = float(y @ y) / n
        coefs, alphas, n_iters, converged, obj_inc = _cd.path_cov(
            G, c, PX, Py, B, Guu, uy, ms_y, lambdas, pen, tol, kkt_tol, max_sweeps
        )
    else:
        raise ValueError(f"unknown formulation {formulation!r}")

    if not converged.all():
        bad = int(np.flatnonzero(~converged)[0])
        raise ConvergenceError(
            f"coordinate descent did not converge at lambda index {bad} "
            f"(lambda={lambdas[bad]:.6g}) within {max_sweeps} sweeps"
        )
    model_sizes = np.count_nonzero(coefs[:, pen > 0], axis=1)
    return LassoPath(
        lambdas=lambdas,
        coefs=coefs.T.copy(),
        intercepts=alphas[:, 0].copy(),
        unpenalized_coefs=alphas[:, 1:].T.copy(),
        method=method,
        n_iters=n_iters,
        model_sizes=model_sizes,
        penalty_factor=pen,
        max_objective_increase=float(obj_inc),
    )


def fitted_values(
    path: LassoPath,
    X: np.ndarray,
    unpenalized: np.ndarray | None = None,
    intercept_column: np.ndarray | None = None,
) -> np.ndarray:
    """n x L matrix of fitted means for every lambda of a path.

    Pass the same ``unpenalized``/``intercept_column`` blocks used at fit
    time (projections of new rows onto them work too, e.g. test-fold PC
    scores).
    """
    n = X.shape[0]
    ic = np.ones(n) if intercept_column is None else np.asarray(intercept_column)
    out = X @ path.coefs + ic[:, None] * path.intercepts[None, :]
    if path.unpenalized_coefs.shape[0] > 0:
        if unpenalized is None:
            raise ValueError("path has an unpenalized block; pass its columns")
        out += unpenalized @ path.unpenalized_coefs
    return out


def max_kkt_violation(
    path: LassoPath,
    X: np.ndarray,
    y: np.ndarray,
    unpenalized: np.ndarray | None = None,
    intercept_column: np.ndarray | None = None,
) -> np.ndarray:
    """Per-lambda maximum KKT residual of the penalized coordinates.

    Active coordinates are scored by |x_j'r/n - lambda w_j sign(beta_j)|,
    inactive ones by max(0, |x_j'r/n| - lambda w_j).
    """
    R = y[:, None] - fitted_values(path, X, unpenalized, intercept_column)
    G = X.T @ R / X.shape[0]
    t = path.lambdas[None, :] * path.penalty_factor[:, None]
    active = path.coefs != 0
    viol = np.where(
        active,
        np.abs(G - t * np.sign(path.coefs)),
        np.maximum(np.abs(G) - t, 0.0),
    )
    return viol.max(axis=0)


def _pc_basis(X: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
    """Loadings and score scales of the leading k PCs of a centered X."""
    X = _as_finite_2d(X, "X")
    n, p = X.shape
    if k < 1:
        raise ValueError("k must be positive")
    if k > min(n - 1, p):
        raise ValueError(f"k = {k} exceeds min(n-1, p) = {min(n - 1, p)}")
    _, s, Vt = np.linalg.svd(X, full_matrices=False)
    rank_tol = max(n, p) * np.finfo(float).eps * s[0]
    rank = int((s > rank_tol).sum())
    if k > rank:
        raise ValueError(f"k = {k} exceeds numerical rank {rank}")
    V = Vt[:k].T
    raw = X @ V
    sdev = np.sqrt((raw**2).mean(axis=0))
    return V, sdev


def compute_pcs(X: np.ndarray, k: int) -> np.ndarray:
    """Leading k principal-component scores of X, unit-sd columns.

    Columns are ordered by descending singular value and rescaled to unit
    standard deviation so the unpenalized block is well conditioned.
    """
    V, sdev = _pc_basis(X, k)
    return (X @ V) / sdev


def pc_lasso_path(
    X: np.ndarray,
    y: np.ndarray,
    k: int,
    lambdas: np.ndarray | None = None,
    **kwargs,
) -> LassoPath:
    """LASSO with the leading k PC scores of X as unpenalized covariates."""
    C = compute_pcs(X, k) if k > 0 else None
    return lasso_path(X, y, lambdas=lambdas, unpenalized=C, method="pc_lasso", **kwargs)


def estimate_K(X: np.ndarray) -> np.ndarray:
    """Instance-similarity matrix XX'/p from standardized features."""
    X = _as_finite_2d(X, "X")
    return X @ X.T / X.shape[1]


def _profile_sigma2(yt2: np.ndarray, d: np.ndarray, eta: float) -> tuple[float, float]:
    """Profiled sigma^2 and log-likelihood (up to constants) at eta."""
    w = eta * d + (1.0 - eta)
    n = len(yt2)
    sig2 = float((yt2 / w).mean())
    ll = -0.5 * (n * np.log(sig2) + np.log(w).sum() + n)
    return sig2, ll


def _golden_max(f, lo: float, hi: float, tol: float) -> float:
    invphi = (np.sqrt(5.0) - 1.0) / 2.0
    a, b = lo, hi
    c = b - invphi * (b - a)
    d = a + invphi * (b - a)
    fc, fd = f(c), f(d)
    while b - a > tol:
        if fc >= fd:
            b, d, fd = d, c, fc
            c = b - invphi * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + invphi * (b - a)
            fd = f(d)
    return 0.5 * (a + b)


ETA_MIN = 0.01
ETA_MAX = 0.99


def _fit_eta(yt2: np.ndarray, d: np.ndarray) -> float:
    """Maximize the profiled null log-likelihood over eta in [0.01, 0.99].

    Grid of 100 points, then golden-section refinement to 1e-6 between the
    neighbors of the best grid point.  Ties within 1e-9 go to the smallest
    eta; a flat profile (e.g. K close to a multiple of I) is warned about.
    """
    grid = np.linspace(ETA_MIN, ETA_MAX, 100)
    lls = np.array([_profile_sigma2(yt2, d, e)[1] for e in grid])
    if lls.max() - lls.min() < 1e-8:
        warnings.warn(
            "profile likelihood is flat: eta is not identified "
            "(only sigma_s^2 + sigma_e^2 is)",
            FlatLikelihoodWarning,
        )
        return ETA_MIN
    best = int(np.flatnonzero(lls >= lls.max() - 1e-9)[0])
    lo = grid[max(best - 1, 0)]
    hi = grid[min(best + 1, len(grid) - 1)]
    eta = _golden_max(lambda e: _profile_sigma2(yt2, d, e)[1], lo, hi, 1e-6)
    # keep the smaller of (refined, best grid point) on a near-tie
    if _profile_sigma2(yt2, d, eta)[1] < _profile_sigma2(yt2, d, grid[best])[1] + 1e-9:
        if grid[best] < eta:
            eta = grid[best]
    if eta <= ETA_MIN + 1e-9 or eta >= ETA_MAX - 1e-9:
        warnings.warn(
            f"eta estimate {eta:.4f} is at the search boundary "
            f"[{ETA_MIN}, {ETA_MAX}]",
            EtaBoundaryWarning,
        )
    return float(eta)


def _clamped_eigh(K: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Descending eigendecomposition of a PSD K with tiny eigenvalues zeroed."""
    K = np.asarray(K, dtype=float)
    if K.shape[0] != K.shape[1]:
        raise ValueError("K must be square")
    if np.abs(K - K.T).max() > 1e-10:
        raise ValueError("K must be symmetric within 1e-10")
    d, Umat = np.linalg.eigh(K)
    if d.min() < -1e-8:
        raise ValueError(f"K is not PSD (min eigenvalue {d.min():.3g})")
    d = np.where(d < 1e-10, 0.0, d)
    return d[::-1].copy(), Umat[:, ::-1].copy()


def fit_null_variance_components(
    y: np.ndarray, K: np.ndarray
) -> tuple[float, float, float]:
    """ML variance components of the null model y ~ N(mu 1, sigma^2 (eta K + (1-eta) I)).

    The response is de-meaned, rotated to the eigenbasis of K, and the
    one-dimensional profile likelihood in eta is maximized with sigma^2
    profiled out in closed form.  Returns (eta, sigma_s^2, sigma_e^2) with
    sigma_s^2 = sigma^2 eta and sigma_e^2 = sigma^2 (1 - eta).
    """
    d, Umat = _clamped_eigh(K)
    y = _as_finite_1d(y, K.shape[0], "y")
    yt = Umat.T @ (y - y.mean())
    yt2 = yt**2
    eta = _fit_eta(yt2, d)
    sig2, _ = _profile_sigma2(yt2, d, eta)
    return eta, sig2 * eta, sig2 * (1.0 - eta)


@dataclass
class PlmmDecomposition:
    """Kinship eigendecomposition plus fitted variance components.

    ``eigvals`` are descending and clamped to be nonnegative;
    ``eta = sigma_s^2 / (sigma_s^2 + sigma_e^2)``.  ``rot`` is the
    whitening map U diag(eta d + (1-eta))^{-1/2} U', the inverse square
    root of Sigma up to a positive scale.
    """

    K: np.ndarray
    eigvals: np.ndarray
    eigvecs: np.ndarray
    eta: float
    sigma_s2: float
    sigma_e2: float

    @property
    def whitening_weights(self) -> np.ndarray:
        return self.eta * self.eigvals + (1.0 - self.eta)

    @cached_property
    def rot(self) -> np.ndarray:
        w = self.whitening_weights
        if w.min() <= 1e-12:
            raise FloatingPointError(
                f"whitening weight {w.min():.3g} too small to invert"
            )
        return (self.eigvecs * (1.0 / np.sqrt(w))) @ self.eigvecs.T

    def sigma(self) -> np.ndarray:
        """Sigma = sigma_s^2 K + sigma_e^2 I reconstructed from the fit."""
        return self.sigma_s2 * self.K + self.sigma_e2 * np.eye(self.K.shape[0])


def plmm_decomposition(X: np.ndarray, y: np.ndarray) -> PlmmDecomposition:
    """Estimate K from X and fit the null variance components on y."""
    K = estimate_K(X)
    d, Umat = _clamped_eigh(K)
    y = _as_finite_1d(y, K.shape[0], "y")
    yt2 = (Umat.T @ (y - y.mean())) ** 2
    eta = _fit_eta(yt2, d)
    sig2, _ = _profile_sigma2(yt2, d, eta)
    return PlmmDecomposition(
        K=K, eigvals=d, eigvecs=Umat, eta=eta,
        sigma_s2=sig2 * eta, sigma_e2=sig2 * (1.0 - eta),
    )


def decomposition_from_K(
    K: np.ndarray, sigma_s2: float, sigma_e2: float
) -> PlmmDecomposition:
    """Wrap a kinship matrix with externally supplied variance components."""
    if sigma_s2 < 0 or sigma_e2 < 0 or sigma_s2 + sigma_e2 <= 0:
        raise ValueError("variance components must be nonnegative, not both zero")
    d, Umat = _clamped_eigh(K)
    eta = sigma_s2 / (sigma_s2 + sigma_e2)
    return PlmmDecomposition(
        K=np.asarray(K, dtype=float), eigvals=d, eigvecs=Umat,
        eta=eta, sigma_s2=sigma_s2, sigma_e2=sigma_e2,
    )


class RotatedData(NamedTuple):
    """Whitened design, response, and the rotated intercept column W 1."""

    X: np.ndarray
    y: np.ndarray
    intercept: np.ndarray


def rotate(X: np.ndarray, y: np.ndarray, decomp: PlmmDecomposition) -> RotatedData:
    """Whiten (X, y) by W = Sigma^{-1/2} up to scale; carries W 1 along.

    After rotation the null-model residual covariance is proportional to
    the identity, so the LASSO machinery applies unchanged.  Columns of the
    rotated design are deliberately not re-standardized.
    """
    W = decomp.rot
    if W.shape[0] != X.shape[0]:
        raise ValueError("decomposition was fitted on a different number of rows")
    return RotatedData(W @ X, W @ y, W @ np.ones(X.shape[0]))


def plmm_path(
    X: np.ndarray,
    y: np.ndarray,
    lambdas: np.ndarray | None = None,
    decomp: PlmmDecomposition | None = None,
    **kwargs,
) -> LassoPath:
    """Penalized linear mixed model: whiten, then run the LASSO path.

    The lambda grid is computed on the rotated data; coefficients apply to
    the original X.  Pass ``decomp`` to reuse or override the fitted
    variance components (e.g. eta = 0 reduces exactly to the LASSO).
    """
    if decomp is None:
        decomp = plmm_decomposition(X, y)
    rot = rotate(X, y, decomp)
    return lasso_path(
        rot.X, rot.y, lambdas=lambdas,
        intercept_column=rot.intercept, method="plmm", **kwargs,
    )


def blup_predict(
    beta_hat: np.ndarray,
    X_new: np.ndarray,
    X_old: np.ndarray,
    y_old: np.ndarray,
    decomp_joint: PlmmDecomposition,
) -> np.ndarray:
    """Best linear unbiased prediction for correlated new instances.

    ``decomp_joint`` holds the similarity matrix of the row-stacked
    [X_old; X_new] (old rows first) with variance components fitted on the
    training rows.  Returns X_new beta + Sigma_21 Sigma_11^{-1}
    (y_old - X_old beta).  ``beta_hat`` may be a (p,) vector or a (p, L)
    matrix of per-lambda coefficients (``y_old`` then (n_old,) or
    (n_old, L)).
    """
    X_new = np.asarray(X_new, dtype=float)
    X_old = np.asarray(X_old, dtype=float)
    n_old, n_new = X_old.shape[0], X_new.shape[0]
    K = decomp_joint.K
    if K.shape[0] != n_old + n_new:
        raise ValueError(
            f"joint K is {K.shape[0]}x{K.shape[0]}, expected {n_old + n_new}"
        )
    s2s, s2e = decomp_joint.sigma_s2, decomp_joint.sigma_e2
    S11 = s2s * K[:n_old, :n_old] + s2e * np.eye(n_old)
    S21 = s2s * K[n_old:, :n_old]
    B = np.asarray(beta_hat, dtype=float)
    yo = np.asarray(y_old, dtype=float)
    if B.ndim == 2 and yo.ndim == 1:
        yo = yo[:, None]
    resid = yo - X_old @ B
    try:
        cf = cho_factor(S11)
    except np.linalg.LinAlgError as exc:
        raise np.linalg.LinAlgError(f"Sigma_11 is singular: {exc}")
    return X_new @ B + S21 @ cho_solve(cf, resid)
