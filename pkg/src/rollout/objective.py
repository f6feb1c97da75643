"""Variance, precision and relaxed-objective evaluation for designs.

Precision here means the inverse variance of the effect estimate (up to the
noise scale). All closed forms work on fraction paths; the matrix versions
exploit the balanced two-way structure so nothing of size (NT)^2 is formed.
Carryover quantities are indexed by window: window ``j`` (1-based) covers
periods ``j .. j + T - ell - 1`` and carries the lag-``ell + 2 - j`` regressor.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.optimize import nnls
from scipy.special import comb

from rollout import _backend
from rollout.designgen import DesignMatrix, Stratification, counts_to_entries
from rollout.errors import IdentificationError, RolloutError, SearchSpaceError

MAX_ENUMERATION = 1_000_000
_IDENT_TOL = 1e-9


# --------------------------------------------------------------------- types


@dataclass(frozen=True)
class ErrorCovarianceSpec:
    """Per-period error covariance ``sigma2 * I + U U'``, identical across periods.

    Parameters
    ----------
    sigma2 : float
        Idiosyncratic noise variance.
    loadings_U : ndarray of shape (N, k), optional
        Factor loadings; the factors have identity covariance.
    """

    sigma2: float = 1.0
    loadings_U: Optional[np.ndarray] = None

    def __post_init__(self):
        if not self.sigma2 > 0:
            raise RolloutError("sigma2 must be positive")
        if self.loadings_U is not None:
            U = np.atleast_2d(np.asarray(self.loadings_U, dtype=np.float64))
            if U.shape[0] < U.shape[1] or U.shape[1] >= U.shape[0]:
                raise RolloutError("factor loadings need k < N")
            object.__setattr__(self, "loadings_U", U)

    @property
    def structure(self) -> str:
        return "iid" if self.loadings_U is None else "factor"

    def block(self, N: int) -> np.ndarray:
        S = self.sigma2 * np.eye(N)
        if self.loadings_U is not None:
            if self.loadings_U.shape[0] != N:
                raise RolloutError("loadings do not match the number of units")
            S = S + self.loadings_U @ self.loadings_U.T
        return S

    def whitener(self, N: int) -> np.ndarray:
        """Symmetric inverse square root of the per-period block."""
        if self.loadings_U is None:
            return np.eye(N) / np.sqrt(self.sigma2)
        vals, vecs = np.linalg.eigh(self.block(N))
        return (vecs / np.sqrt(vals)) @ vecs.T


@dataclass(frozen=True)
class CovariateSpec:
    """Observed unit covariates entering with period-specific coefficients.

    Columns are centered on construction so they are orthogonal to the
    all-ones vector.
    """

    X: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.X is not None:
            X = np.asarray(self.X, dtype=np.float64)
            if X.ndim == 1:
                X = X[:, None]
            X = X - X.mean(axis=0, keepdims=True)
            object.__setattr__(self, "X", X)

    @property
    def r(self) -> int:
        return 0 if self.X is None else self.X.shape[1]


@dataclass
class ObjectiveReport:
    """Objective value with first-order diagnostics."""

    value: float
    gradient_norm: float
    kkt_residual: Optional[float] = None
    min_multiplier: Optional[float] = None
    active: list = field(default_factory=list)
    multipliers: Optional[np.ndarray] = None


# -------------------------------------------------------------- relaxations


def _omegas(path) -> np.ndarray:
    return np.asarray(getattr(path, "omegas", path), dtype=np.float64).ravel()


def linear_weights(T: int) -> np.ndarray:
    t = np.arange(1, T + 1)
    return (T + 1 - 2 * t) / T


def quadratic_objective(path) -> float:
    """Relaxed direct-effect objective; ``-N`` times it is the OLS precision."""
    w = _omegas(path)
    T = w.size
    return float(w @ w - w.sum() ** 2 / T + 2 * linear_weights(T) @ w)


def quadratic_gradient(path) -> np.ndarray:
    w = _omegas(path)
    T = w.size
    return 2 * w - 2 * w.sum() / T + 2 * linear_weights(T)


def _windows(T: int, ell: int):
    Tp = T - ell
    for j in range(1, ell + 2):
        t = np.arange(j, j + Tp)  # 1-based periods
        d = (T - ell - 1 + 2 * j - 2 * t) / Tp
        yield j, t - 1, d


def carryover_trace_objective(path, ell: int) -> float:
    """Relaxed trace objective under ``ell`` carryover lags (sum over windows)."""
    w = _omegas(path)
    T = w.size
    if T <= ell:
        raise RolloutError("need T > ell")
    Tp = T - ell
    total = 0.0
    for _, idx, d in _windows(T, ell):
        ww = w[idx]
        total += ww @ ww - ww.sum() ** 2 / Tp + 2 * d @ ww
    return float(total)


def carryover_trace_gradient(path, ell: int) -> np.ndarray:
    w = _omegas(path)
    T = w.size
    Tp = T - ell
    g = np.zeros(T)
    for _, idx, d in _windows(T, ell):
        g[idx] += 2 * w[idx] - 2 * w[idx].sum() / Tp + 2 * d
    return g


def _window_row_mean(s, j, T, ell):
    """Row mean over window ``j`` for a unit adopting at period ``T + 1 - s``."""
    Tp = T - ell
    return np.clip(-1.0 + 2.0 * (s - 1 - ell + j) / Tp, -1.0, 1.0)


def carryover_theta(path, ell: int, N: int) -> np.ndarray:
    """Carryover precision matrix as a function of the fraction path.

    Exact for any irreversible design with this path and iid errors of unit
    variance. Rows and columns follow window order.
    """
    w = _omegas(path)
    T = w.size
    if T <= ell + 1:
        raise RolloutError("need T > ell + 1")
    Tp = T - ell
    p = ell + 1
    s_all = np.arange(0, T + 1)
    t = np.arange(1, T + 1)
    sums = [w[j - 1 : j - 1 + Tp].sum() for j in range(1, p + 1)]
    theta = np.empty((p, p))
    for j in range(1, p + 1):
        for m in range(j, p + 1):
            ups = _window_row_mean(s_all, j, T, ell) * _window_row_mean(s_all, m, T, ell)
            diff = ups[T + 1 - t] - ups[T - t]
            cross = w[j - 1 : j - 1 + Tp] @ w[m - 1 : m - 1 + Tp]
            val = cross - sums[j - 1] * sums[m - 1] / Tp + Tp / 2.0 * (diff @ w)
            if m > j:
                k = np.arange(j, m)
                val -= np.sum(w[k - 1] - w[T - ell + k - 1])
            theta[j - 1, m - 1] = theta[m - 1, j - 1] = -N * val
    return theta


# -------------------------------------------------------- design precision


def _entries(design) -> np.ndarray:
    return np.asarray(getattr(design, "entries", design), dtype=np.float64)


def _is_monotone(z) -> bool:
    return not np.any(np.diff(z, axis=1) < 0)


def ols_precision(design) -> float:
    """Squared norm of the design after removing unit and period effects."""
    r = _backend.twoway_residual(_entries(design))
    return float(np.sum(r * r))


def ols_variance(design, sigma2: float = 1.0) -> float:
    """Variance of the two-way fixed-effects OLS effect estimate under iid noise.

    For irreversible designs the result is cross-checked against the
    fraction-path closed form ``sigma2 / (-N f(omega))``.
    """
    z = _entries(design)
    N, T = z.shape
    prec = ols_precision(z)
    if prec <= _IDENT_TOL * N * T:
        raise IdentificationError("effect not identified: design lies in the span of the fixed effects")
    if _is_monotone(z):
        closed = -N * quadratic_objective(z.mean(axis=0))
        if abs(closed - prec) > 1e-9 * max(1.0, prec):
            raise AssertionError(f"closed-form precision {closed} disagrees with projection {prec}")
    return sigma2 / prec


def _nuisance_operator(N: int, cov: ErrorCovarianceSpec, covars: CovariateSpec) -> np.ndarray:
    """Whitening followed by projection off the per-period intercept and covariates."""
    W = cov.whitener(N)
    B = np.ones((N, 1))
    if covars.X is not None:
        if covars.X.shape[0] != N:
            raise RolloutError("covariates do not match the number of units")
        B = np.hstack([B, covars.X])
    WB = W @ B
    Q, R = np.linalg.qr(WB)
    if np.min(np.abs(np.diag(R))) < 1e-10 * np.max(np.abs(np.diag(R))):
        raise IdentificationError("covariate columns are collinear with the intercept")
    return W - Q @ (Q.T @ W)


def _precision_batch(Zs: np.ndarray, M: np.ndarray) -> np.ndarray:
    """Precision for a stack of designs of shape (k, N, T) given the nuisance operator."""
    D = Zs - Zs.mean(axis=2, keepdims=True)
    MD = np.einsum("ab,kbt->kat", M, D)
    return np.einsum("kat,kat->k", MD, MD)


def gls_precision(design, cov: Optional[ErrorCovarianceSpec] = None, covars: Optional[CovariateSpec] = None) -> float:
    """Generalized least squares precision of the effect estimate.

    Works period by period: after whitening, the unit effects are removed by
    within-unit demeaning and the period intercepts and covariate slopes by
    projection inside each period, which gives the exact projection for the
    full stacked system.
    """
    cov = cov or ErrorCovarianceSpec()
    covars = covars or CovariateSpec()
    z = _entries(design)
    N, T = z.shape
    M = _nuisance_operator(N, cov, covars)
    prec = float(_precision_batch(z[None], M)[0])
    scale = N * T / cov.sigma2
    if prec <= _IDENT_TOL * scale:
        raise IdentificationError("effect not identified under this covariance and covariates")
    return prec


def lag_regressors(z, ell: int) -> np.ndarray:
    """Lagged design slices over the fitted periods, in window order.

    Returns an array of shape (ell + 1, N, T - ell).
    """
    z = np.asarray(z, dtype=np.float64)
    N, T = z.shape
    Tp = T - ell
    return np.stack([z[:, j : j + Tp] for j in range(ell + 1)])


def carryover_precision(design, ell: int, cov: Optional[ErrorCovarianceSpec] = None, covars: Optional[CovariateSpec] = None) -> np.ndarray:
    """Exact carryover precision matrix of a realized design, in window order."""
    cov = cov or ErrorCovarianceSpec()
    covars = covars or CovariateSpec()
    z = _entries(design)
    S = lag_regressors(z, ell)
    M = _nuisance_operator(z.shape[0], cov, covars)
    D = S - S.mean(axis=2, keepdims=True)
    MD = np.einsum("ab,kbt->kat", M, D)
    return np.einsum("jat,kat->jk", MD, MD)


# ---------------------------------------------------------------------- KKT


def kkt_check(path, ell: int = 0, active_tol: float = 1e-9) -> ObjectiveReport:
    """First-order optimality diagnostics for the relaxed trace program.

    Multipliers for the active bound and ordering constraints are recovered
    from the stationarity equations. They are unique when the active
    constraints are independent; otherwise a nonnegative least-squares
    solution is reported. The residual is the largest stationarity violation
    achievable with nonnegative multipliers.
    """
    w = _omegas(path)
    T = w.size
    if ell == 0:
        value, grad = quadratic_objective(w), quadratic_gradient(w)
    else:
        value, grad = carryover_trace_objective(w, ell), carryover_trace_gradient(w, ell)
    cols, active = [], []
    for t in range(T):
        if w[t] <= -1 + active_tol:
            e = np.zeros(T)
            e[t] = -1.0
            cols.append(e)
            active.append(("lower", t + 1))
        if w[t] >= 1 - active_tol:
            e = np.zeros(T)
            e[t] = 1.0
            cols.append(e)
            active.append(("upper", t + 1))
    for t in range(T - 1):
        if w[t + 1] - w[t] <= active_tol:
            e = np.zeros(T)
            e[t], e[t + 1] = 1.0, -1.0
            cols.append(e)
            active.append(("order", t + 1))
    if cols:
        G = np.array(cols).T
        if np.linalg.matrix_rank(G) == G.shape[1]:
            # independent active set: multipliers are unique
            mult = np.linalg.lstsq(G, -grad, rcond=None)[0]
            if mult.min() < 0:
                resid = grad + G @ nnls(G, -grad)[0]
            else:
                resid = grad + G @ mult
        else:
            mult, _ = nnls(G, -grad)
            resid = grad + G @ mult
        min_mult = float(mult.min())
    else:
        mult = np.zeros(0)
        resid = grad
        min_mult = None
    return ObjectiveReport(
        value=float(value),
        gradient_norm=float(np.linalg.norm(grad)),
        kkt_residual=float(np.max(np.abs(resid))),
        min_multiplier=min_mult,
        active=active,
        multipliers=mult,
    )


# --------------------------------------------------------------- enumeration


_TIE_REL = 1e-12


def _asymmetry(idx, seqs, c, N, sizes):
    """Total deviation of treated counts from antisymmetry about the mid-horizon."""
    dev = 0
    for i, s, n in zip(idx, seqs, sizes):
        cnt = s[int(i[c])]
        dev += int(np.abs(cnt + cnt[::-1] - n).sum())
    return dev


def _search_size(sizes, T) -> int:
    total = 1
    for n in sizes:
        total *= int(comb(n + T, T, exact=True))
    return total


def brute_force_optimum(
    N: int,
    T: int,
    cov: Optional[ErrorCovarianceSpec] = None,
    ell: int = 0,
    strat: Optional[Stratification] = None,
    covars: Optional[CovariateSpec] = None,
    chunk: int = 20000,
):
    """Exhaustive search over nondecreasing treated-count sequences.

    Rows are exchangeable within a stratum, so a count sequence per stratum
    determines the design up to relabeling.

    Returns
    -------
    counts : ndarray
        Shape (T,) without strata, or (G, T) with one row per stratum.
    value : float
        Effect variance when ``ell == 0``. For ``ell > 0`` the negated trace
        of the precision matrix divided by N, which is on the scale of the
        relaxed trace objective.

    Values within a relative 1e-12 count as ties. Ties go to the counts
    closest to antisymmetric (treated at period t plus treated at period
    T + 1 - t equal to the stratum size), then to the lexicographically
    smallest counts.
    """
    cov = cov or ErrorCovarianceSpec()
    covars = covars or CovariateSpec()
    if strat is not None and strat.N != N:
        raise RolloutError("stratification size does not match N")
    groups = strat.groups if strat is not None else [np.arange(N)]
    sizes = [len(g) for g in groups]
    total = _search_size(sizes, T)
    if total > MAX_ENUMERATION:
        raise SearchSpaceError(
            f"search space has {total} count sequences for N={N}, T={T}; the limit is {MAX_ENUMERATION}"
        )
    if T <= ell:
        raise RolloutError("need T > ell")
    seqs = [_backend.monotone_sequences(n, T) for n in sizes]
    shape = [len(s) for s in seqs]
    M = _nuisance_operator(N, cov, covars)
    Tp = T - ell

    best_val, best_key = np.inf, None
    for start in range(0, total, chunk):
        flat = np.arange(start, min(start + chunk, total))
        idx = np.unravel_index(flat, shape)
        Z = np.empty((flat.size, N, T))
        for g, i, s in zip(groups, idx, seqs):
            cnt = s[i]
            Z[:, g, :] = np.where(np.arange(len(g))[None, :, None] < cnt[:, None, :], 1.0, -1.0)
        if ell == 0:
            prec = _precision_batch(Z, M)
            ok = prec > _IDENT_TOL * N * T / cov.sigma2
            vals = np.full(flat.size, np.inf)
            vals[ok] = 1.0 / prec[ok]
        else:
            vals = np.zeros(flat.size)
            for j in range(ell + 1):
                vals -= _precision_batch(Z[:, :, j : j + Tp], M)
            vals /= N
        v = float(np.min(vals))
        if not np.isfinite(v):
            continue
        if v < best_val - _TIE_REL * abs(best_val):
            best_key = None
        best_val = min(best_val, v)
        for c in np.nonzero(vals <= best_val + _TIE_REL * abs(best_val))[0]:
            key = (_asymmetry(idx, seqs, c, N, sizes), int(flat[c]))
            if best_key is None or key < best_key:
                best_key = key
    best_flat = None if best_key is None else best_key[1]
    if best_flat is None or not np.isfinite(best_val):
        raise IdentificationError("no identified design in the search space")
    key = np.unravel_index(best_flat, shape)
    counts = np.array([s[int(i)] for s, i in zip(seqs, key)])
    return (counts[0] if strat is None else counts), best_val


def stratified_counts_design(counts, strat: Stratification) -> DesignMatrix:
    """Deterministic design with per-stratum counts (lowest-index units adopt first)."""
    counts = np.atleast_2d(counts)
    z = -np.ones((strat.N, counts.shape[1]), dtype=np.int8)
    for g, c in zip(strat.groups, counts):
        z[g] = counts_to_entries(c, len(g))
    return DesignMatrix(z)


__all__ = [
    "CovariateSpec",
    "ErrorCovarianceSpec",
    "ObjectiveReport",
    "brute_force_optimum",
    "carryover_precision",
    "carryover_theta",
    "carryover_trace_gradient",
    "carryover_trace_objective",
    "gls_precision",
    "kkt_check",
    "lag_regressors",
    "linear_weights",
    "ols_precision",
    "ols_variance",
    "quadratic_gradient",
    "quadratic_objective",
    "stratified_counts_design",
]
