"""Linear confounding model: design construction, bias/noise decomposition,
scenario solving, and data generation.

The generative mechanism is

    y = x'beta + z'gamma + eps,    x = d + A z,

with d ~ N(0, I_p), z ~ N(0, I_q), eps ~ N(0, sigma_e^2) mutually
independent.  Regressing y on x alone leaves an asymptotic bias
tau = (I + AA')^{-1} A gamma on the coefficients and an exogenous noise
component psi = z'gamma - x'tau that is uncorrelated with x.  Everything in
this module is phrased in terms of these population quantities.

Features can be used on their raw scale (Var(x) = I + AA') or pre-scaled to
unit variance by the diagonal matrix S with S_jj = Var(x_j)^{-1/2}; the
``standardize`` flag on :class:`ConfoundingDesign` selects the convention.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_factor, cho_solve


class UnsolvableScenarioError(ValueError):
    """Requested scenario cannot be realized by the block design."""


@dataclass
class ConfoundingDesign:
    """Block loading matrix tying features to latent confounders.

    ``A`` is p x q with disjoint blocks of ``block_size`` rows per column;
    within a block the loadings are +a on the first half of the rows and -a
    on the rest, so the induced coefficient bias is balanced between
    positive and negative values.  ``scale`` is the diagonal of S.
    """

    p: int
    q: int
    a: float
    A: np.ndarray
    block_size: int
    standardize: bool
    scale: np.ndarray


@dataclass
class ScenarioSpec:
    """Target ratios and dimensions for a simulation scenario.

    ``bnr`` (bias-to-noise) and ``snr`` (signal-to-noise) jointly fix the
    bias-to-signal ratio bsr = bnr / snr.  ``n_factors`` allows more latent
    factors to load on x than enter the outcome: the first ``q`` of the
    ``n_factors`` factors get outcome effect g, the rest get 0 (the hybrid
    factor/confounder setting).  By default every factor is a confounder.
    """

    p: int
    q: int
    n: int
    s: int
    snr: float
    bnr: float
    var_psi_target: float = 1.0
    sigma_e: float = 1.0
    n_factors: int | None = None
    allow_odd_block: bool = False

    def __post_init__(self):
        if min(self.p, self.q, self.n) <= 0:
            raise ValueError("p, q, n must be positive")
        if self.s < 0:
            raise ValueError("s must be nonnegative")
        if self.snr <= 0:
            raise ValueError("snr must be positive")
        if self.bnr < 0:
            raise ValueError("bnr must be nonnegative")
        if self.var_psi_target <= 0:
            raise ValueError("var_psi_target must be positive")
        if self.n_factors is not None and self.n_factors < self.q:
            raise ValueError("n_factors must be >= q")

    @property
    def bsr(self) -> float:
        return self.bnr / self.snr


@dataclass
class ScenarioParams:
    """Solved generator parameters for a :class:`ScenarioSpec`.

    ``g = r * a`` and ``rho = a^2 / (1 + a^2)`` (the within-block feature
    correlation).  ``gamma`` is the full outcome-effect vector over all
    latent factors; ``tau`` is the induced bias in the convention of
    ``design.standardize``.
    """

    a: float
    r: float
    g: float
    b: float
    rho: float
    tau: np.ndarray
    var_psi: float
    gamma: np.ndarray
    design: ConfoundingDesign
    spec: ScenarioSpec


@dataclass
class Dataset:
    """Generated or ingested data with optional ground truth."""

    X: np.ndarray
    y: np.ndarray
    beta: np.ndarray | None = None
    gamma: np.ndarray | None = None
    support: np.ndarray | None = None
    tau: np.ndarray | None = None
    Z: np.ndarray | None = None


def build_design(
    p: int,
    q: int,
    a: float,
    standardize: bool = True,
    allow_odd_block: bool = False,
) -> ConfoundingDesign:
    """Construct the balanced-sign block loading matrix.

    Each of the q confounders loads on its own block of m = p/q features,
    +a on the first half and -a on the second half.  m must be even so the
    signs balance exactly; ``allow_odd_block`` permits odd m with a
    ceil(m/2)/floor(m/2) split instead (needed for grids where p/q is odd).

    Raises ``ValueError`` if q does not divide p, if m is odd without the
    override (and a > 0), or if a < 0.
    """
    if p <= 0 or q <= 0:
        raise ValueError("p and q must be positive")
    if a < 0:
        raise ValueError(f"loading magnitude a must be nonnegative, got {a}")
    if p % q != 0:
        raise ValueError(f"q must divide p (got p={p}, q={q})")
    m = p // q
    if a > 0 and m % 2 != 0 and not allow_odd_block:
        raise ValueError(
            f"block size m = p/q = {m} is odd; signs cannot balance "
            "(pass allow_odd_block=True for a near-balanced split)"
        )
    A = np.zeros((p, q))
    n_pos = (m + 1) // 2
    for c in range(q):
        lo = c * m
        A[lo : lo + n_pos, c] = a
        A[lo + n_pos : lo + m, c] = -a
    if standardize:
        scale = 1.0 / np.sqrt(1.0 + (A**2).sum(axis=1))
    else:
        scale = np.ones(p)
    return ConfoundingDesign(
        p=p, q=q, a=float(a), A=A, block_size=m, standardize=standardize, scale=scale
    )


def compute_tau(
    A: np.ndarray, gamma: np.ndarray, scale: np.ndarray | None = None
) -> np.ndarray:
    """Population bias of the misspecified linear fit.

    Solves (I + AA') tau = A gamma; with ``scale`` given (diag of S) the
    scaled system [S (I + AA') S] tau = S A gamma is solved instead, which
    is the bias when regressing on the unit-variance features S x.  Accepts
    any dense A, not only block designs.
    """
    A = np.asarray(A, dtype=float)
    gamma = np.asarray(gamma, dtype=float)
    if not np.all(np.isfinite(A)) or not np.all(np.isfinite(gamma)):
        raise ValueError("A and gamma must be finite")
    p, q = A.shape
    if gamma.shape != (q,):
        raise ValueError(f"gamma must have length {q}, got {gamma.shape}")
    rhs = A @ gamma
    try:
        if q < p:
            # (I + AA')^{-1} A = A (I + A'A)^{-1}: solve the smaller system.
            cf = cho_factor(np.eye(q) + A.T @ A)
            tau = A @ cho_solve(cf, gamma)
        else:
            cf = cho_factor(np.eye(p) + A @ A.T)
            tau = cho_solve(cf, rhs)
    except np.linalg.LinAlgError as exc:  # pragma: no cover - I + AA' >= I
        raise np.linalg.LinAlgError(f"gram matrix not positive definite: {exc}")
    if scale is not None:
        scale = np.asarray(scale, dtype=float)
        if scale.shape != (p,):
            raise ValueError(f"scale must have length {p}")
        if np.any(scale <= 0):
            raise ValueError("scale entries must be positive")
        # S (I + AA') S (tau_scaled) = S A gamma  =>  tau_scaled = S^{-1} tau.
        tau = tau / scale
    return tau


def absorb_z_covariance(
    A: np.ndarray, gamma: np.ndarray, cov_z: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Fold a non-identity confounder second moment into (A, gamma).

    Returns (A_tilde, gamma_tilde) = (A R, R gamma) with R the symmetric PSD
    square root of ``cov_z``, so that the bias computed from the rotated
    pair under E(zz') = I equals the bias of the original model under
    E(zz') = cov_z.
    """
    A = np.asarray(A, dtype=float)
    gamma = np.asarray(gamma, dtype=float)
    cov_z = np.asarray(cov_z, dtype=float)
    q = A.shape[1]
    if cov_z.shape != (q, q):
        raise ValueError(f"cov_z must be {q}x{q}")
    if not np.allclose(cov_z, cov_z.T, atol=1e-8):
        raise ValueError("cov_z must be symmetric")
    w, V = np.linalg.eigh(0.5 * (cov_z + cov_z.T))
    if w.min() < -1e-8:
        raise ValueError(f"cov_z must be PSD (min eigenvalue {w.min():.3g})")
    root = (V * np.sqrt(np.clip(w, 0.0, None))) @ V.T
    return A @ root, root @ gamma


def compute_var_psi(
    A: np.ndarray,
    gamma: np.ndarray,
    tau: np.ndarray,
    scale: np.ndarray | None = None,
) -> float:
    """Variance of the exogenous confounding noise psi = z'gamma - x'tau.

    Evaluates gamma'gamma + tau' Var(x) tau - 2 gamma' A' S' tau with
    Var(x) = S (I + AA') S (S = I when ``scale`` is None).  ``tau`` must be
    the bias returned by :func:`compute_tau` for the same (A, gamma, scale);
    an inconsistent triple can drive the expression negative, which raises.
    """
    A = np.asarray(A, dtype=float)
    gamma = np.asarray(gamma, dtype=float)
    tau = np.asarray(tau, dtype=float)
    u = tau if scale is None else np.asarray(scale, dtype=float) * tau
    At_u = A.T @ u
    val = float(gamma @ gamma + u @ u + At_u @ At_u - 2.0 * (gamma @ At_u))
    if val < -1e-10:
        raise ValueError(
            f"Var(psi) evaluated to {val:.3g} < 0; (A, gamma, tau) inconsistent"
        )
    return max(val, 0.0)


def _varx_quadratic(design: ConfoundingDesign, v: np.ndarray) -> float:
    """v' Var(x) v under the design's convention."""
    u = design.scale * v if design.standardize else v
    Au = design.A.T @ u
    return float(u @ u + Au @ Au)


def compute_ratios(
    design: ConfoundingDesign, beta: np.ndarray, gamma: np.ndarray
) -> dict[str, float]:
    """Population signal/bias/noise ratios for a design and effect vectors.

    Returns ``{"snr", "bsr", "bnr", "var_psi"}`` where
    snr = beta' Var(x) beta / (Var(psi) + 1),
    bsr = tau' Var(x) tau / beta' Var(x) beta and bnr = snr * bsr.
    """
    beta = np.asarray(beta, dtype=float)
    gamma = np.asarray(gamma, dtype=float)
    scale = design.scale if design.standardize else None
    tau = compute_tau(design.A, gamma, scale)
    var_psi = compute_var_psi(design.A, gamma, tau, scale)
    signal = _varx_quadratic(design, beta)
    bias = _varx_quadratic(design, tau)
    noise = var_psi + 1.0
    if signal == 0.0:
        raise ZeroDivisionError("beta' Var(x) beta = 0: BSR undefined")
    return {
        "snr": signal / noise,
        "bsr": bias / signal,
        "bnr": bias / noise,
        "var_psi": var_psi,
    }


def tau_norm_closed_form(p: int, q: int, a: float, g: float) -> float:
    """Closed-form tau'tau for the block design with gamma = g * ones.

    Returns p a^2 g^2 (a^2 + 1) / (m a^2 + 1)^2 with m = p/q.  This equals
    the squared norm of the bias under the standardized (unit-variance)
    feature convention; the raw-scale norm omits the (a^2 + 1) factor.
    Intended as a cross-check against :func:`compute_tau`, which is the
    ground truth.
    """
    if p % q != 0:
        raise ValueError(f"q must divide p (got p={p}, q={q})")
    if a < 0:
        raise ValueError("a must be nonnegative")
    m = p // q
    return p * a**2 * g**2 * (a**2 + 1.0) / (m * a**2 + 1.0) ** 2


def _bisect(f, lo, hi, flo, fhi, tol, max_iter=200):
    """Bisection for a monotone f with a sign change on [lo, hi].

    Stops when |f(mid)| <= tol on the target quantity; returns (x, f(x)).
    """
    if flo == 0.0:
        return lo, flo
    if fhi == 0.0:
        return hi, fhi
    if flo * fhi > 0:
        raise UnsolvableScenarioError(
            f"no sign change on bracket [{lo:.6g}, {hi:.6g}] "
            f"(f = {flo:.6g}, {fhi:.6g})"
        )
    x, fx = lo, flo
    for _ in range(max_iter):
        x = 0.5 * (lo + hi)
        fx = f(x)
        if abs(fx) <= tol:
            return x, fx
        if (fx > 0) == (fhi > 0):
            hi, fhi = x, fx
        else:
            lo, flo = x, fx
    return x, fx


def _expand_bracket(f, lo=0.0, hi=1.0, max_expand=60):
    """Grow hi geometrically until f changes sign; f(lo) must be <= 0."""
    flo = f(lo)
    fhi = f(hi)
    start_hi = hi
    for _ in range(max_expand):
        if fhi >= 0:
            return lo, hi, flo, fhi
        lo, flo = hi, fhi
        hi *= 2.0
        fhi = f(hi)
    raise UnsolvableScenarioError(
        f"target not reachable on searched interval [{0.0:.6g}, {hi:.6g}] "
        f"(started at hi={start_hi:.6g})"
    )


def solve_scenario(spec: ScenarioSpec, standardize: bool = True) -> ScenarioParams:
    """Solve for the generator parameters hitting the requested ratios.

    With bnr = 0 the confounding is switched off entirely (a = r = 0,
    Var(psi) = 0).  Otherwise a nested bracketed bisection finds (a, r)
    under the reparameterization g = r a: the inner loop matches
    Var(psi) = var_psi_target at fixed a (Var(psi) grows like r^2, so one
    design evaluation per a suffices to evaluate any r exactly), the outer
    loop matches bnr (monotone in a once g = r a).  Both loops stop at
    absolute tolerance 1e-8 on their target quantity.

    The signal effect b is then set by the diagonal approximation
    b = sqrt(snr * (Var(psi) + 1) / (s * v)) with v the per-feature
    variance (1 when standardized); see :func:`signal_effect_exact` for the
    placement-exact variant.
    """
    tol = 1e-8
    n_factors = spec.n_factors if spec.n_factors is not None else spec.q
    gamma_mask = np.zeros(n_factors)
    gamma_mask[: spec.q] = 1.0

    def _design(a):
        try:
            return build_design(
                spec.p,
                n_factors,
                a,
                standardize=standardize,
                allow_odd_block=spec.allow_odd_block,
            )
        except ValueError as exc:
            raise UnsolvableScenarioError(str(exc)) from exc

    if spec.p % n_factors != 0:
        raise UnsolvableScenarioError(
            f"factor count {n_factors} must divide p = {spec.p}"
        )

    if spec.bnr == 0.0:
        a = r = g = 0.0
        var_psi = 0.0
        design = _design(0.0)
        tau = np.zeros(spec.p)
        gamma = np.zeros(n_factors)
    else:
        pattern = _design(1.0)
        A1 = pattern.A
        G1 = A1.T @ A1

        def unit_quantities(a):
            """(var_psi, tau' Var(x) tau) at loading a and g = 1."""
            A = a * A1
            cf = cho_factor(np.eye(n_factors) + (a * a) * G1)
            tau_u = A @ cho_solve(cf, gamma_mask)
            At_tau = A.T @ tau_u
            bias_quad = float(tau_u @ tau_u + At_tau @ At_tau)
            var1 = float(
                gamma_mask @ gamma_mask + bias_quad - 2.0 * (gamma_mask @ At_tau)
            )
            return var1, bias_quad

        def solve_r(a):
            """Inner loop: r with Var(psi) = target at this a."""
            var1, bias1 = unit_quantities(a)
            target = spec.var_psi_target

            def f(r):
                return (r * a) ** 2 * var1 - target

            lo, hi, flo, fhi = _expand_bracket(f, 0.0, 1.0)
            r, _ = _bisect(f, lo, hi, flo, fhi, tol)
            return r, bias1

        def bnr_gap(a):
            if a == 0.0:
                return -spec.bnr
            r, bias1 = solve_r(a)
            bias_quad = (r * a) ** 2 * bias1
            return bias_quad / (spec.var_psi_target + 1.0) - spec.bnr

        lo, hi, flo, fhi = _expand_bracket(bnr_gap, 0.0, 1.0)
        a, _ = _bisect(bnr_gap, lo, hi, flo, fhi, tol)
        r, _ = solve_r(a)
        g = r * a
        gamma = g * gamma_mask
        design = _design(a)
        scale = design.scale if standardize else None
        tau = compute_tau(design.A, gamma, scale)
        var_psi = compute_var_psi(design.A, gamma, tau, scale)

    if spec.s == 0:
        b = 0.0
    else:
        diag_var = 1.0 if standardize else 1.0 + a * a
        b = math.sqrt(spec.snr * (var_psi + 1.0) / (spec.s * diag_var))
    rho = a * a / (1.0 + a * a)
    return ScenarioParams(
        a=a, r=r, g=g, b=b, rho=rho, tau=tau, var_psi=var_psi,
        gamma=gamma, design=design, spec=spec,
    )


def signal_effect_exact(
    design: ConfoundingDesign,
    support: np.ndarray,
    snr: float,
    var_psi: float,
) -> float:
    """Placement-exact signal effect: b with beta' Var(x) beta = snr (V+1).

    Unlike the diagonal approximation in :func:`solve_scenario`, this
    accounts for within-block correlation among the realized signal
    positions.
    """
    ind = np.zeros(design.p)
    ind[np.asarray(support, dtype=int)] = 1.0
    quad = _varx_quadratic(design, ind)
    if quad <= 0:
        raise ValueError("empty support")
    return math.sqrt(snr * (var_psi + 1.0) / quad)


def generate_dataset(
    params: ScenarioParams,
    n: int,
    s: int,
    sigma_e: float,
    seed: int,
) -> Dataset:
    """Draw one synthetic dataset from the solved scenario.

    Sampling uses ``numpy.random.default_rng(seed)`` (PCG64) and consumes
    draws in a fixed order -- d, z, eps, then the signal support -- so the
    output is bit-reproducible for a given seed.  After forming
    y = X beta + Z gamma + eps, the columns of X are re-centered and
    re-scaled to mean 0 and mean square exactly 1; population ratios remain
    finite-sample approximations on the returned matrix.
    """
    if seed is None:
        raise ValueError("seed is required")
    design = params.design
    p, qf = design.p, design.q
    if s > p:
        raise ValueError(f"s = {s} exceeds p = {p}")
    rng = np.random.default_rng(seed)
    D = rng.standard_normal((n, p))
    Z = rng.standard_normal((n, qf))
    eps = rng.normal(0.0, sigma_e, n)
    X = (D + Z @ design.A.T) * design.scale
    support = np.sort(rng.choice(p, size=s, replace=False))
    beta = np.zeros(p)
    beta[support] = params.b
    y = X @ beta + Z @ params.gamma + eps
    X -= X.mean(axis=0)
    X /= np.sqrt((X**2).mean(axis=0))
    return Dataset(
        X=X, y=y, beta=beta, gamma=params.gamma.copy(),
        support=support, tau=params.tau.copy(), Z=Z,
    )


def generate_semisynthetic(
    X: np.ndarray,
    z_labels: np.ndarray,
    g: float,
    s: int,
    sigma_e: float,
    seed: int,
) -> Dataset:
    """Simulate an outcome on a real feature matrix with a categorical confounder.

    ``X`` (already standardized) is left untouched.  The label vector is
    expanded to an n x L indicator matrix Z; gamma puts -g on the first
    ceil(L/2) levels (sorted order) and +g on the rest.  beta has s entries
    equal to 1 at random positions.  Draw order: support, then eps.
    """
    if seed is None:
        raise ValueError("seed is required")
    X = np.asarray(X, dtype=float)
    n, p = X.shape
    labels = np.asarray(z_labels)
    if labels.shape != (n,):
        raise ValueError(f"z_labels must have length {n}")
    if labels.dtype.kind == "f" and np.isnan(labels.astype(float)).any():
        raise ValueError("z_labels contains missing values")
    if labels.dtype == object and any(
        v is None or (isinstance(v, float) and math.isnan(v)) for v in labels
    ):
        raise ValueError("z_labels contains missing values")
    levels, codes = np.unique(labels, return_inverse=True)
    L = len(levels)
    if L < 2:
        raise ValueError(f"need at least 2 confounder levels, got {L}")
    Z = np.zeros((n, L))
    Z[np.arange(n), codes] = 1.0
    gamma = np.full(L, g)
    gamma[: (L + 1) // 2] = -g
    rng = np.random.default_rng(seed)
    support = np.sort(rng.choice(p, size=s, replace=False))
    beta = np.zeros(p)
    beta[support] = 1.0
    eps = rng.normal(0.0, sigma_e, n)
    y = X @ beta + Z @ gamma + eps
    return Dataset(X=X, y=y, beta=beta, gamma=gamma, support=support, tau=None, Z=Z)
