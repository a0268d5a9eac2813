"""Coordinate-descent kernels for the l1-penalized path solvers.

Two formulations of the same iteration:

* ``naive`` keeps the residual vector updated (dot products against columns
  of X each update);
* ``cov`` works on precomputed Gram blocks and keeps the full gradient
  vector updated (cheap sweeps once the Gram matrix is paid for; worthwhile
  when n is much larger than p).

Within a sweep the unpenalized block (intercept and any extra unpenalized
columns) is refit exactly by least squares, then penalized coordinates are
updated in fixed ascending order by soft-thresholding.  Each lambda
alternates full sweeps with polishing sweeps restricted to the current
active set; convergence requires a full sweep whose largest coefficient
change is below ``tol`` followed by a passing KKT check at ``kkt_tol``.
Both kernels track the largest objective increase observed across sweeps,
which exact coordinate descent keeps at rounding level.

The hot kernels are numba-compiled.  Set ``DECONF_BACKEND=numpy`` to force
the pure-numpy fallback (also used automatically when numba is missing);
``DECONF_BACKEND=numba`` makes a missing numba an error.
"""

from __future__ import annotations

import os

import numpy as np

_env_backend = os.environ.get("DECONF_BACKEND", "").strip().lower()
if _env_backend not in ("", "numba", "numpy"):
    raise ValueError(
        f"DECONF_BACKEND must be 'numba' or 'numpy', got {_env_backend!r}"
    )

if _env_backend == "numpy":
    HAS_NUMBA = False
else:
    try:
        from numba import njit

        HAS_NUMBA = True
    except ImportError:
        if _env_backend == "numba":
            raise
        HAS_NUMBA = False

BACKEND = "numba" if HAS_NUMBA else "numpy"


def _path_naive(X, y, U, Uplus, lambdas, pen, tol, kkt_tol, max_sweeps):
    """Residual-update coordinate descent along a decreasing lambda path.

    X (n, p) Fortran-ordered penalized block, U (n, k) unpenalized block
    with pseudo-inverse Uplus (k, n).  Returns per-lambda coefficients,
    unpenalized coefficients, sweep counts, convergence flags, and the
    largest objective increase seen across sweeps.
    """
    n, p = X.shape
    k = U.shape[1]
    L = lambdas.shape[0]
    coefs = np.zeros((L, p))
    alphas = np.zeros((L, k))
    n_iters = np.zeros(L, np.int64)
    converged = np.zeros(L, np.bool_)
    beta = np.zeros(p)
    alpha = np.zeros(k)
    vx = np.empty(p)
    for j in range(p):
        col = X[:, j]
        vx[j] = np.dot(col, col) / n
    r = y.copy()
    full_order = np.arange(p)
    act = np.empty(p, np.int64)
    max_obj_inc = 0.0
    for l in range(L):
        lam = lambdas[l]
        prev_obj = np.inf
        it = 0
        full_pass = True
        na = 0
        while it < max_sweeps:
            it += 1
            if full_pass:
                idx = full_order
                cnt = p
            else:
                idx = act
                cnt = na
            delta = 0.0
            if k > 0:
                r += U @ alpha
                anew = Uplus @ r
                r -= U @ anew
                for jj in range(k):
                    d = abs(anew[jj] - alpha[jj])
                    if d > delta:
                        delta = d
                alpha = anew
            for t in range(cnt):
                j = idx[t]
                vj = vx[j]
                if vj <= 0.0:
                    continue
                col = X[:, j]
                bj = beta[j]
                rho = np.dot(col, r) / n + vj * bj
                thr = lam * pen[j]
                if rho > thr:
                    new = (rho - thr) / vj
                elif rho < -thr:
                    new = (rho + thr) / vj
                else:
                    new = 0.0
                d = new - bj
                if d != 0.0:
                    for i in range(n):
                        r[i] -= d * col[i]
                    beta[j] = new
                    ad = abs(d)
                    if ad > delta:
                        delta = ad
            obj = 0.5 * np.dot(r, r) / n + lam * np.dot(pen, np.abs(beta))
            inc = obj - prev_obj
            if inc > max_obj_inc and np.isfinite(inc):
                max_obj_inc = inc
            prev_obj = obj
            if full_pass:
                if delta < tol:
                    # confirm stationarity: active g_j = lam pen_j sign(b_j),
                    # inactive |g_j| <= lam pen_j, where g = X'r/n
                    g = (X.T @ r) / n
                    thr_all = lam * pen
                    viol = np.where(
                        beta != 0.0,
                        np.abs(g - thr_all * np.sign(beta)),
                        np.maximum(np.abs(g) - thr_all, 0.0),
                    ).max()
                    if viol <= kkt_tol:
                        converged[l] = True
                        break
                else:
                    na = 0
                    for j in range(p):
                        if beta[j] != 0.0:
                            act[na] = j
                            na += 1
                    full_pass = False
            else:
                if delta < tol:
                    full_pass = True
        n_iters[l] = it
        coefs[l, :] = beta
        alphas[l, :] = alpha
    return coefs, alphas, n_iters, converged, max_obj_inc


def _path_cov(G, c, PX, Py, B, Guu, uy, ms_y, lambdas, pen, tol, kkt_tol, max_sweeps):
    """Gram-update coordinate descent; same iteration as :func:`_path_naive`.

    G = X'X/n (p, p, symmetric), c = X'y/n, PX = Uplus X, Py = Uplus y,
    B = X'U/n, Guu = U'U/n, uy = U'y/n, ms_y = y'y/n.  The gradient vector
    rho = X'r/n is maintained incrementally, so the KKT check is free.
    """
    p = G.shape[0]
    k = B.shape[1]
    L = lambdas.shape[0]
    coefs = np.zeros((L, p))
    alphas = np.zeros((L, k))
    n_iters = np.zeros(L, np.int64)
    converged = np.zeros(L, np.bool_)
    beta = np.zeros(p)
    alpha = np.zeros(k)
    vx = np.empty(p)
    for j in range(p):
        vx[j] = G[j, j]
    rho = c.copy()
    full_order = np.arange(p)
    act = np.empty(p, np.int64)
    max_obj_inc = 0.0
    for l in range(L):
        lam = lambdas[l]
        prev_obj = np.inf
        it = 0
        full_pass = True
        na = 0
        while it < max_sweeps:
            it += 1
            if full_pass:
                idx = full_order
                cnt = p
            else:
                idx = act
                cnt = na
            delta = 0.0
            if k > 0:
                anew = Py - PX @ beta
                for jj in range(k):
                    d = abs(anew[jj] - alpha[jj])
                    if d > delta:
                        delta = d
                rho -= B @ (anew - alpha)
                alpha = anew
            for t in range(cnt):
                j = idx[t]
                vj = vx[j]
                if vj <= 0.0:
                    continue
                bj = beta[j]
                rval = rho[j] + vj * bj
                thr = lam * pen[j]
                if rval > thr:
                    new = (rval - thr) / vj
                elif rval < -thr:
                    new = (rval + thr) / vj
                else:
                    new = 0.0
                d = new - bj
                if d != 0.0:
                    row = G[j, :]
                    for jj in range(p):
                        rho[jj] -= d * row[jj]
                    beta[j] = new
                    ad = abs(d)
                    if ad > delta:
                        delta = ad
            # ||r||^2/n via the maintained gradient: G beta = c - B alpha - rho
            rss = (
                ms_y
                - np.dot(c, beta)
                - 2.0 * np.dot(uy, alpha)
                + np.dot(beta, B @ alpha)
                - np.dot(beta, rho)
                + np.dot(alpha, Guu @ alpha)
            )
            obj = 0.5 * rss + lam * np.dot(pen, np.abs(beta))
            inc = obj - prev_obj
            if inc > max_obj_inc and np.isfinite(inc):
                max_obj_inc = inc
            prev_obj = obj
            if full_pass:
                if delta < tol:
                    thr_all = lam * pen
                    viol = np.where(
                        beta != 0.0,
                        np.abs(rho - thr_all * np.sign(beta)),
                        np.maximum(np.abs(rho) - thr_all, 0.0),
                    ).max()
                    if viol <= kkt_tol:
                        converged[l] = True
                        break
                else:
                    na = 0
                    for j in range(p):
                        if beta[j] != 0.0:
                            act[na] = j
                            na += 1
                    full_pass = False
            else:
                if delta < tol:
                    full_pass = True
        n_iters[l] = it
        coefs[l, :] = beta
        alphas[l, :] = alpha
    return coefs, alphas, n_iters, converged, max_obj_inc


path_naive_numpy = _path_naive
path_cov_numpy = _path_cov

if HAS_NUMBA:
    path_naive = njit(cache=True)(_path_naive)
    path_cov = njit(cache=True)(_path_cov)
else:
    path_naive = _path_naive
    path_cov = _path_cov
