"""Effect estimators for staggered panels: two-way OLS, feasible GLS and LRME.

All three share one regression core. Effects enter through lagged design
regressors over the fitted periods ``ell+1..T``; lag 1 is the
contemporaneous assignment. Two codings are supported:

``binary``
    regressor ``(1 + z) / 2``; the coefficient is the effect of being
    treated, matching how synthetic effects are injected.
``signed``
    regressor ``z`` in {-1, +1}; coefficients are half the binary ones.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from rollout import _backend
from rollout.errors import IdentificationError, RolloutError
from rollout.objective import CovariateSpec

logger = logging.getLogger(__name__)

RANK_TOL = 1e-10
CODINGS = ("binary", "signed")


@dataclass
class EstimateResult:
    """Fitted effects and nuisance parameters.

    ``beta`` has one entry per period of the input panel; periods that only
    supply lagged assignments (the first ``ell``) are NaN. ``alpha`` is
    normalized so that the pinned units (the last ones, by default only the
    last unit) have zero effect.
    """

    taus: np.ndarray
    alpha: np.ndarray
    beta: np.ndarray
    method: str
    theta: Optional[np.ndarray] = None
    Lhat: Optional[np.ndarray] = None
    iterations: int = 0
    converged: bool = True
    coding: str = "binary"
    diagnostics: dict = field(default_factory=dict)

    @property
    def tau(self) -> float:
        return float(self.taus[0])

    @property
    def ell(self) -> int:
        return len(self.taus) - 1

    def to_dict(self) -> dict:
        def arr(a):
            return None if a is None else np.where(np.isnan(a), None, a).tolist()

        return {
            "method": self.method,
            "coding": self.coding,
            "taus": [float(x) for x in self.taus],
            "alpha": arr(np.asarray(self.alpha, dtype=float)),
            "beta": arr(np.asarray(self.beta, dtype=float)),
            "theta": arr(self.theta),
            "Lhat": arr(self.Lhat),
            "iterations": int(self.iterations),
            "converged": bool(self.converged),
            "diagnostics": {k: _jsonable(v) for k, v in self.diagnostics.items()},
        }


def _jsonable(v):
    if isinstance(v, np.ndarray):
        return v.tolist()
    if isinstance(v, (np.floating, np.integer)):
        return v.item()
    if isinstance(v, (list, tuple)):
        return [_jsonable(x) for x in v]
    return v


@dataclass
class LrmeConfig:
    """Settings for iterative singular value thresholding with fixed effects.

    Parameters
    ----------
    k0 : int
        Largest rank kept for the low-rank component.
    mu : float
        Threshold subtracted from each singular value (``mu_NT``).
    tol_tau : float
        Stop once no effect moves by more than this between iterations.
    max_iter : int
        Iteration cap.
    """

    k0: int = 1
    mu: float = 0.0
    tol_tau: float = 1e-8
    max_iter: int = 500

    def __post_init__(self):
        if self.k0 < 1:
            raise RolloutError("k0 must be at least 1")
        if self.mu < 0:
            raise RolloutError("mu must be nonnegative")
        if not self.tol_tau > 0:
            raise RolloutError("tol_tau must be positive")
        if self.max_iter < 1:
            raise RolloutError("max_iter must be at least 1")


# ------------------------------------------------------------ regression core


def _values(panel) -> np.ndarray:
    return np.asarray(getattr(panel, "values", panel), dtype=np.float64)


def _design(design) -> np.ndarray:
    return np.asarray(getattr(design, "entries", design), dtype=np.float64)


def lagged_regressors(z, ell: int, coding: str = "binary") -> np.ndarray:
    """Lag regressors over the fitted periods, lag 1 first.

    Returns an array of shape (ell + 1, N, T - ell).
    """
    if coding not in CODINGS:
        raise RolloutError(f"coding must be one of {CODINGS}")
    z = np.asarray(z, dtype=np.float64)
    N, T = z.shape
    if ell < 0 or T - ell < 2:
        raise RolloutError(f"need at least two fitted periods (T={T}, ell={ell})")
    x = (1.0 + z) / 2.0 if coding == "binary" else z
    return np.stack([x[:, ell - l + 1 : T - l + 1] for l in range(1, ell + 2)])


def _check_inputs(Y, z, ell):
    if Y.shape != z.shape:
        raise RolloutError(f"panel shape {Y.shape} does not match design shape {z.shape}")
    if not np.all(np.isfinite(Y)):
        raise RolloutError("panel contains non-finite values")


def _pinned_units(N: int, B: np.ndarray) -> list:
    """Pick units, scanning from the last, whose rows of ``B`` are independent."""
    chosen, rows = [], []
    for i in range(N - 1, -1, -1):
        trial = np.array(rows + [B[i]])
        if np.linalg.matrix_rank(trial, tol=1e-10) == len(trial):
            rows.append(B[i])
            chosen.append(i)
            if len(chosen) == B.shape[1]:
                break
    if len(chosen) < B.shape[1]:
        raise IdentificationError("covariates are collinear with the unit effects")
    return sorted(chosen)


def _collinear_directions(R: np.ndarray, scale: float) -> list:
    """Right singular vectors of residualized regressors with negligible singular value."""
    _, s, Vt = np.linalg.svd(R, full_matrices=False)
    return [Vt[k] for k in range(len(s)) if s[k] <= RANK_TOL * scale]


def _fit_twoway(Yf: np.ndarray, S: np.ndarray):
    """Unweighted two-way regression by within transformation.

    Returns taus, alpha, beta (fitted periods) and the residual matrix.
    """
    p, N, Tp = S.shape
    R = np.stack([_backend.twoway_residual(S[k]) for k in range(p)]).reshape(p, -1).T
    scale = max(1.0, float(np.max(np.linalg.norm(S.reshape(p, -1), axis=1))))
    dirs = _collinear_directions(R, scale)
    if dirs:
        raise IdentificationError(
            "effect not identified: lag regressors are collinear with the fixed effects", dirs
        )
    yr = _backend.twoway_residual(Yf).ravel()
    taus = np.linalg.lstsq(R, yr, rcond=None)[0]
    rest = Yf - np.tensordot(taus, S, axes=1)
    rm, cm, gm = rest.mean(axis=1), rest.mean(axis=0), rest.mean()
    alpha = rm - rm[-1]
    beta = cm - gm + rm[-1]
    resid = rest - rm[:, None] - cm[None, :] + gm
    return taus, alpha, beta, None, resid


def _fit_general(Yf: np.ndarray, S: np.ndarray, X: Optional[np.ndarray], W: Optional[np.ndarray]):
    """Least squares on the stacked system with optional covariates and whitening.

    ``W`` whitens each period's cross-section. Rows are period-major.
    """
    p, N, Tp = S.shape
    r = 0 if X is None else X.shape[1]
    B = np.ones((N, 1)) if X is None else np.hstack([np.ones((N, 1)), X])
    pinned = _pinned_units(N, B) if r else [N - 1]
    free = [i for i in range(N) if i not in pinned]

    # nuisance columns laid out as arrays of shape (Tp, N, K)
    K = len(free) + Tp + r * Tp
    G = np.zeros((Tp, N, K))
    for k, i in enumerate(free):
        G[:, i, k] = 1.0
    for t in range(Tp):
        G[t, :, len(free) + t] = 1.0
    for q in range(r):
        for t in range(Tp):
            G[t, :, len(free) + Tp + q * Tp + t] = X[:, q]
    C = np.transpose(S, (2, 1, 0))  # (Tp, N, p)
    y = Yf.T  # (Tp, N)
    if W is not None:
        G = np.einsum("ab,tbk->tak", W, G)
        C = np.einsum("ab,tbk->tak", W, C)
        y = y @ W.T
    G2 = G.reshape(Tp * N, K)
    C2 = C.reshape(Tp * N, p)
    y2 = y.ravel()

    # identification: residualize the effect columns on the nuisance columns
    coefG = np.linalg.lstsq(G2, C2, rcond=RANK_TOL)[0]
    Rc = C2 - G2 @ coefG
    scale = max(1.0, float(np.max(np.linalg.norm(C2, axis=0))))
    dirs = _collinear_directions(Rc, scale)
    if dirs:
        raise IdentificationError(
            "effect not identified: lag regressors are collinear with the nuisance terms", dirs
        )
    A = np.hstack([C2, G2])
    coef = np.linalg.lstsq(A, y2, rcond=RANK_TOL)[0]
    taus = coef[:p]
    alpha = np.zeros(N)
    alpha[free] = coef[p : p + len(free)]
    beta = coef[p + len(free) : p + len(free) + Tp]
    theta = coef[p + len(free) + Tp :].reshape(r, Tp).T if r else None
    fitted_nuis = alpha[:, None] + beta[None, :]
    if r:
        fitted_nuis = fitted_nuis + X @ theta.T
    resid = Yf - np.tensordot(taus, S, axes=1) - fitted_nuis
    return taus, alpha, beta, theta, resid


def _fit(Yf, S, covars: Optional[CovariateSpec], W=None):
    X = None if covars is None else covars.X
    if X is None and W is None:
        return _fit_twoway(Yf, S)
    return _fit_general(Yf, S, X, W)


def _full_beta(beta_fit, T, ell):
    beta = np.full(T, np.nan)
    beta[ell:] = beta_fit
    return beta


# ----------------------------------------------------------------- estimators


def estimate_ols(panel, design, ell: int = 0, covars: Optional[CovariateSpec] = None, coding: str = "binary") -> EstimateResult:
    """Two-way fixed-effects least squares.

    Parameters
    ----------
    panel : PanelMatrix or ndarray of shape (N, T)
    design : DesignMatrix or ndarray of +-1 entries
    ell : int
        Number of carryover lags; only periods ``ell+1..T`` are fitted.
    covars : CovariateSpec, optional
        Observed unit covariates with period-specific slopes.
    coding : {"binary", "signed"}

    Raises
    ------
    IdentificationError
        If some combination of effect regressors lies in the span of the
        nuisance terms. The error lists those combinations.
    """
    Y, z = _values(panel), _design(design)
    _check_inputs(Y, z, ell)
    S = lagged_regressors(z, ell, coding)
    Yf = Y[:, ell:]
    taus, alpha, beta, theta, resid = _fit(Yf, S, covars)
    return EstimateResult(
        taus=taus,
        alpha=alpha,
        beta=_full_beta(beta, Y.shape[1], ell),
        theta=theta,
        method="OLS",
        coding=coding,
        diagnostics={"rss": float(np.sum(resid**2))},
    )


def estimate_error_covariance(resid: np.ndarray, k0: int):
    """Diagonal-plus-low-rank cross-sectional covariance from residuals.

    Returns the covariance estimate and whether a ridge had to be added to
    make it positive definite.
    """
    N, Tp = resid.shape
    S = resid @ resid.T / Tp
    vals, vecs = np.linalg.eigh(S)
    order = np.argsort(vals)[::-1]
    vals, vecs = vals[order], vecs[:, order]
    k0 = max(0, min(k0, N))
    low = (vecs[:, :k0] * vals[:k0]) @ vecs[:, :k0].T
    omega = low + np.diag(np.diag(S - low))
    omega = (omega + omega.T) / 2.0
    ev = np.linalg.eigvalsh(omega)
    ridged = False
    if ev[0] <= 1e-12 * max(ev[-1], 0.0) or ev[0] <= 0:
        tr = float(np.trace(omega))
        eps = 1e-8 * tr / N if tr > 0 else 1e-8
        omega = omega + eps * np.eye(N)
        ridged = True
    return omega, ridged


def _inv_sqrt(A):
    vals, vecs = np.linalg.eigh(A)
    return (vecs / np.sqrt(vals)) @ vecs.T


def estimate_feasible_gls(
    panel,
    design,
    ell: int = 0,
    covars: Optional[CovariateSpec] = None,
    k0: int = 1,
    coding: str = "binary",
) -> EstimateResult:
    """Feasible GLS with a diagonal-plus-rank-``k0`` cross-sectional covariance.

    Stage one fits OLS; its residuals give the sample cross-sectional
    covariance, whose top ``k0`` eigenpairs plus the diagonal of the
    remainder form the covariance estimate. Stage two refits with every
    period's cross-section whitened by that estimate.
    """
    Y, z = _values(panel), _design(design)
    _check_inputs(Y, z, ell)
    N = Y.shape[0]
    if k0 < 0 or k0 >= N:
        raise RolloutError(f"k0 must lie in 0..{N - 1}")
    S = lagged_regressors(z, ell, coding)
    Yf = Y[:, ell:]
    _, _, _, _, resid0 = _fit(Yf, S, covars)
    omega, ridged = estimate_error_covariance(resid0, k0)
    W = _inv_sqrt(omega)
    taus, alpha, beta, theta, resid = _fit(Yf, S, covars, W)
    return EstimateResult(
        taus=taus,
        alpha=alpha,
        beta=_full_beta(beta, Y.shape[1], ell),
        theta=theta,
        method="GLS",
        coding=coding,
        diagnostics={"ridge": ridged, "k0": k0, "rss": float(np.sum(resid**2))},
    )


def soft_threshold_svd(M, k0: int, mu: float) -> np.ndarray:
    """Best rank-``k0`` matrix after shrinking singular values by ``mu``.

    Solves ``min 0.5 * ||M - L||_F^2 + mu * ||L||_*`` over matrices of rank
    at most ``k0``.
    """
    if mu < 0:
        raise RolloutError("mu must be nonnegative")
    M = np.asarray(M, dtype=np.float64)
    U, s, Vt = np.linalg.svd(M, full_matrices=False)
    k = min(k0, s.size)
    shrunk = np.maximum(s[:k] - mu, 0.0)
    return (U[:, :k] * shrunk) @ Vt[:k]


def lrme_objective(Yf, S, taus, fe, L, mu) -> float:
    """Half squared residual plus ``mu`` times the nuclear norm of ``L``."""
    R = Yf - fe - L - np.tensordot(taus, S, axes=1)
    nuc = float(np.linalg.svd(L, compute_uv=False).sum()) if np.any(L) else 0.0
    return 0.5 * float(np.sum(R * R)) + mu * nuc


def estimate_lrme(
    panel,
    design,
    cfg: Optional[LrmeConfig] = None,
    ell: int = 0,
    covars: Optional[CovariateSpec] = None,
    coding: str = "binary",
) -> EstimateResult:
    """Low-rank matrix estimation with fixed effects.

    Alternates a thresholded rank-``k0`` SVD of the current residual with a
    least-squares refit of effects and fixed effects on the outcomes minus
    the low-rank part, starting from OLS. The objective is tracked in
    ``diagnostics["objective"]`` (one entry per iteration, starting with the
    OLS fit) and must never increase.

    The low-rank component covers the fitted periods only.
    """
    cfg = cfg or LrmeConfig()
    Y, z = _values(panel), _design(design)
    _check_inputs(Y, z, ell)
    S = lagged_regressors(z, ell, coding)
    Yf = Y[:, ell:]
    taus, alpha, beta, theta, resid = _fit(Yf, S, covars)
    fe = Yf - resid - np.tensordot(taus, S, axes=1)
    L = np.zeros_like(Yf)
    history = [lrme_objective(Yf, S, taus, fe, L, cfg.mu)]
    converged = False
    it = 0
    while it < cfg.max_iter:
        it += 1
        L = soft_threshold_svd(Yf - fe - np.tensordot(taus, S, axes=1), cfg.k0, cfg.mu)
        new_taus, alpha, beta, theta, resid = _fit(Yf - L, S, covars)
        fe = Yf - L - resid - np.tensordot(new_taus, S, axes=1)
        obj = lrme_objective(Yf, S, new_taus, fe, L, cfg.mu)
        if obj > history[-1] + 1e-12 * max(1.0, history[-1]):
            raise AssertionError(f"objective increased at iteration {it}: {history[-1]} -> {obj}")
        history.append(obj)
        step = float(np.max(np.abs(new_taus - taus)))
        taus = new_taus
        if step <= cfg.tol_tau:
            converged = True
            break
    if not converged:
        logger.warning("LRME did not converge in %d iterations", cfg.max_iter)
    return EstimateResult(
        taus=taus,
        alpha=alpha,
        beta=_full_beta(beta, Y.shape[1], ell),
        theta=theta,
        Lhat=L,
        method="LRME",
        iterations=it,
        converged=converged,
        coding=coding,
        diagnostics={"objective": np.array(history), "mu": cfg.mu, "k0": cfg.k0},
    )


METHODS = ("ols", "gls", "lrme")


def estimate(panel, design, method: str = "ols", ell: int = 0, covars=None, k0: int = 1, mu: float = 0.0, coding: str = "binary", lrme_cfg: Optional[LrmeConfig] = None) -> EstimateResult:
    """Dispatch on an estimator tag (``ols``, ``gls`` or ``lrme``)."""
    m = method.lower()
    if m == "ols":
        return estimate_ols(panel, design, ell, covars, coding)
    if m == "gls":
        return estimate_feasible_gls(panel, design, ell, covars, k0, coding)
    if m == "lrme":
        cfg = lrme_cfg or LrmeConfig(k0=max(1, k0), mu=mu)
        return estimate_lrme(panel, design, cfg, ell, covars, coding)
    raise RolloutError(f"unknown method {method!r}; expected one of {METHODS}")


__all__ = [
    "CODINGS",
    "EstimateResult",
    "LrmeConfig",
    "METHODS",
    "estimate",
    "estimate_error_covariance",
    "estimate_feasible_gls",
    "estimate_lrme",
    "estimate_ols",
    "lagged_regressors",
    "lrme_objective",
    "soft_threshold_svd",
]
