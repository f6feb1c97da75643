"""Independent reference computations used to derive and freeze expected values.

Everything here is deliberately naive: explicit dummy matrices, dense
projections over the stacked NT system, exact rational arithmetic and
itertools enumeration. Nothing is imported from the package under test.
"""

import itertools
from fractions import Fraction

import numpy as np


def realize(counts, N):
    """Units 0..c-1 treated at a period with count c."""
    T = len(counts)
    Z = -np.ones((N, T))
    for t, c in enumerate(counts):
        Z[:c, t] = 1
    return Z


def gamma_matrix(N, T, X=None):
    """Stacked nuisance design, period-major rows (row = t*N + i).

    All unit dummies, all period dummies and covariate-by-period columns.
    The matrix is rank deficient on purpose; projections below use least
    squares so no normalization is needed.
    """
    r = 0 if X is None else X.shape[1]
    cols = []
    for i in range(N):
        c = np.zeros((T, N))
        c[:, i] = 1
        cols.append(c.ravel())
    for k in range(T):
        c = np.zeros((T, N))
        c[k, :] = 1
        cols.append(c.ravel())
    for q in range(r):
        for k in range(T):
            c = np.zeros((T, N))
            c[k, :] = X[:, q]
            cols.append(c.ravel())
    return np.array(cols).T


def stack(Z):
    """Period-major vectorization of an N x T matrix."""
    return np.asarray(Z, dtype=float).T.ravel()


def _residual(A, y):
    return y - A @ np.linalg.lstsq(A, y, rcond=None)[0]


def projection_precision(Z, Sigma=None, X=None):
    """Precision of the effect under covariance Sigma: squared norm of the
    whitened design after projecting out the whitened nuisance columns."""
    N, T = Z.shape
    G = gamma_matrix(N, T, X)
    z = stack(Z)
    if Sigma is None:
        W = np.eye(N * T)
    else:
        vals, vecs = np.linalg.eigh(Sigma)
        W = (vecs / np.sqrt(vals)) @ vecs.T
    r = _residual(W @ G, W @ z)
    return float(r @ r)


def full_sigma(block, T):
    return np.kron(np.eye(T), block)


def lag_columns(Z, ell):
    """Lag-l regressors over periods ell+1..T, stacked period-major, l = 1..ell+1."""
    N, T = Z.shape
    out = []
    for l in range(1, ell + 2):
        out.append(np.asarray(Z[:, ell - l + 1 : T - l + 1], dtype=float).T.ravel())
    return np.array(out).T


def carryover_precision_dense(Z, ell):
    """Precision matrix in lag order (tau_1 first)."""
    N, T = Z.shape
    G = gamma_matrix(N, T - ell)
    C = lag_columns(Z, ell)
    R = np.column_stack([_residual(G, C[:, k]) for k in range(C.shape[1])])
    return R.T @ R


def relaxed_f(w):
    T = len(w)
    d = [(T + 1 - 2 * (t + 1)) / T for t in range(T)]
    w = np.asarray(w, float)
    return float(w @ w - w.sum() ** 2 / T + 2 * np.dot(d, w))


def round_half_rule(N, T):
    """Nearest-integer counts for the linear path using exact fractions.

    Both floor and ceil are scanned; the strictly closer one wins, and an
    exact tie goes down before the horizon midpoint and up otherwise.
    """
    out = []
    for t in range(1, T + 1):
        target = Fraction(N * (2 * t - 1), 2 * T)
        lo = target.numerator // target.denominator
        cands = [lo, lo + 1]
        dist = [abs(target - c) for c in cands]
        if dist[0] < dist[1]:
            out.append(cands[0])
        elif dist[1] < dist[0]:
            out.append(cands[1])
        else:
            out.append(cands[0] if Fraction(2 * t - 1, 2 * T) < Fraction(1, 2) else cands[1])
    return out


def enumerate_best(N, T, value):
    """Argmin of ``value(counts)`` over nondecreasing sequences, first in lexicographic order."""
    best, arg = np.inf, None
    for c in itertools.combinations_with_replacement(range(N + 1), T):
        v = value(list(c))
        if v < best - 1e-15:
            best, arg = v, list(c)
    return arg, best


def ols_variance_dense(counts, N, sigma2=1.0):
    Z = realize(counts, N)
    p = projection_precision(Z)
    return np.inf if p < 1e-9 else sigma2 / p


def twoway_ols_dense(Y, Z, ell=0):
    """Least squares of stacked outcomes on lag columns and dummies; returns taus."""
    N, T = Y.shape
    C = lag_columns(Z, ell)
    G = gamma_matrix(N, T - ell)
    y = np.asarray(Y[:, ell:], dtype=float).T.ravel()
    coef = np.linalg.lstsq(np.hstack([C, G]), y, rcond=None)[0]
    return coef[: ell + 1]
