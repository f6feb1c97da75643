"""Pure numpy implementations of the hot kernels.

These mirror the compiled versions in ``_kernels.pyx`` exactly and are used
whenever the extension is unavailable.
"""

import numpy as np
from scipy.special import comb


def twoway_residual(Y):
    """Remove additive row and column effects from a balanced matrix.

    Parameters
    ----------
    Y : ndarray of shape (N, T)

    Returns
    -------
    ndarray of shape (N, T)
        ``Y - rowmean - colmean + grandmean``.
    """
    Y = np.asarray(Y, dtype=np.float64)
    return Y - Y.mean(axis=1, keepdims=True) - Y.mean(axis=0, keepdims=True) + Y.mean()


def cross_moments(blocks, regs):
    """Inner products between every block and every regressor matrix.

    Parameters
    ----------
    blocks : ndarray of shape (m, N, T)
    regs : ndarray of shape (p, N, T)

    Returns
    -------
    ndarray of shape (m, p)
    """
    blocks = np.asarray(blocks, dtype=np.float64)
    regs = np.asarray(regs, dtype=np.float64)
    m = blocks.shape[0]
    p = regs.shape[0]
    return blocks.reshape(m, -1) @ regs.reshape(p, -1).T


def monotone_sequences(N, T):
    """All nondecreasing integer sequences of length T with values in 0..N.

    Rows come out in lexicographic order.
    """
    N = int(N)
    T = int(T)
    total = int(comb(N + T, T, exact=True))
    out = np.empty((total, T), dtype=np.int64)
    seq = [0] * T
    row = 0
    while True:
        out[row] = seq
        row += 1
        # advance to the next sequence in lexicographic order
        pos = T - 1
        while pos >= 0 and seq[pos] == N:
            pos -= 1
        if pos < 0:
            break
        v = seq[pos] + 1
        for q in range(pos, T):
            seq[q] = v
    return out
