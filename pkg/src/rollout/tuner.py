"""Design and tuning-parameter search on historical control data."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from rollout import _backend
from rollout.designgen import DesignMatrix, Stratification
from rollout.errors import IdentificationError, RolloutError
from rollout.estimators import METHODS, LrmeConfig, estimate, lagged_regressors
from rollout.panel import BlockSplit, PanelMatrix, SyntheticEffect, effect_matrix

logger = logging.getLogger(__name__)


@dataclass
class SaConfig:
    """Annealing schedule for the row-swap design search."""

    t_init: float = 1.0
    t_min: float = 1e-3
    upsilon: float = 0.95
    steps_max: int = 5000
    tau_synth: SyntheticEffect = field(default_factory=lambda: SyntheticEffect.direct(0.0))
    seed: Optional[int] = None

    def __post_init__(self):
        if not (0 < self.t_min < self.t_init):
            raise RolloutError("need 0 < t_min < t_init")
        if not 0 < self.upsilon < 1:
            raise RolloutError("upsilon must lie in (0, 1)")
        if self.steps_max < 1:
            raise RolloutError("steps_max must be positive")


@dataclass
class SearchResult:
    """Best design found, its minimax error and the visited-step trace."""

    design: DesignMatrix
    max_error: float
    start_error: float
    trace: list = field(default_factory=list)


def _stack(blocks) -> np.ndarray:
    if isinstance(blocks, BlockSplit):
        return blocks.stacked()
    if isinstance(blocks, PanelMatrix):
        return blocks.values[None]
    arr = [getattr(b, "values", b) for b in blocks]
    return np.stack([np.asarray(a, dtype=np.float64) for a in arr])


def _ols_batch_errors(Ys: np.ndarray, z: np.ndarray, effect: SyntheticEffect, coding: str) -> np.ndarray:
    """Per-block absolute errors of two-way OLS, computed in one pass.

    Uses the within transformation: with residualized regressors R, every
    block's estimate is ``(R R')^{-1} R y``.
    """
    ell = effect.ell
    S = lagged_regressors(z, ell, coding)
    p = S.shape[0]
    R = np.stack([_backend.twoway_residual(S[k]) for k in range(p)])
    Rm = R.reshape(p, -1)
    scale = max(1.0, float(np.max(np.linalg.norm(S.reshape(p, -1), axis=1))))
    sv = np.linalg.svd(Rm, compute_uv=False)
    if sv.min() <= 1e-10 * scale:
        raise IdentificationError("effect not identified: lag regressors are collinear with the fixed effects")
    gram = Rm @ Rm.T
    shift = effect_matrix(z, effect)[:, ell:]
    num = _backend.cross_moments(Ys[:, :, ell:], R) + (Rm @ shift.ravel())[None, :]
    taus = np.linalg.solve(gram, num.T).T
    scale_tau = 1.0 if coding == "binary" else 0.5
    return np.abs(taus - scale_tau * np.asarray(effect.taus)[None, :])


def block_errors(design, blocks, effect: SyntheticEffect, method: str = "ols", coding: str = "binary", **est_kwargs) -> np.ndarray:
    """Absolute estimation errors, shape (m, ell + 1), after injecting ``effect``."""
    z = np.asarray(getattr(design, "entries", design), dtype=np.float64)
    Ys = _stack(blocks)
    if Ys.shape[1:] != z.shape:
        raise RolloutError(f"block shape {Ys.shape[1:]} does not match design shape {z.shape}")
    scale_tau = 1.0 if coding == "binary" else 0.5
    if method.lower() == "ols" and est_kwargs.get("covars") is None:
        return _ols_batch_errors(Ys, z, effect, coding)
    shift = effect_matrix(z, effect)
    out = np.empty((Ys.shape[0], effect.ell + 1))
    for j in range(Ys.shape[0]):
        try:
            res = estimate(Ys[j] + shift, z, method, ell=effect.ell, coding=coding, **est_kwargs)
        except RolloutError as exc:
            raise type(exc)(f"block {j}: {exc}") from exc
        out[j] = np.abs(res.taus - scale_tau * np.asarray(effect.taus))
    return out


def minimax_error(design, blocks, effect: SyntheticEffect, method: str = "ols", **est_kwargs) -> float:
    """Largest absolute effect error over blocks (and lags) under a synthetic effect."""
    return float(np.max(block_errors(design, blocks, effect, method, **est_kwargs)))


def sa_search(start: DesignMatrix, blocks, cfg: Optional[SaConfig] = None, method: str = "ols", **est_kwargs) -> SearchResult:
    """Simulated-annealing search over row permutations of a design.

    Swapping two rows keeps every period's treated share. A swap is taken
    when it beats the best error so far; otherwise it is taken with
    probability ``exp(-dE / temperature)`` and the temperature cools by
    ``upsilon``. The best design ever visited is returned.
    """
    cfg = cfg or SaConfig()
    rng = np.random.default_rng(cfg.seed)
    effect = cfg.tau_synth
    N = start.N
    if N < 2:
        raise RolloutError("need at least two units to swap")

    def err(d):
        return minimax_error(d, blocks, effect, method, **est_kwargs)

    current = start
    e_cur = err(current)
    e_start = e_cur
    best, e_best = current, e_cur
    temp = cfg.t_init
    step = 1
    trace = []
    while temp > cfg.t_min and step < cfg.steps_max:
        i1, i2 = rng.choice(N, size=2, replace=False)
        cand = current.swap_rows(int(i1), int(i2))
        step += 1
        e_new = err(cand)
        dE = e_new - e_cur
        if e_new < e_best:
            current, e_cur = cand, e_new
            best, e_best = cand, e_new
            accepted = True
        else:
            accepted = math.exp(-max(dE, 0.0) / temp) > rng.random()
            if accepted:
                current, e_cur = cand, e_new
            temp *= cfg.upsilon
        trace.append((step, bool(accepted), float(e_new)))
    return SearchResult(design=best, max_error=float(e_best), start_error=float(e_start), trace=trace)


def kmeans_stratify(history, K: int, seed=None) -> Stratification:
    """Cluster units on leading singular vectors of the double-demeaned history.

    Uses the top ``min(K, 3)`` left singular vectors scaled by their
    singular values and Lloyd k-means with 50 restarts. Labels are numbered
    by first appearance.
    """
    from sklearn.cluster import KMeans

    Y = np.asarray(getattr(history, "values", history), dtype=np.float64)
    N = Y.shape[0]
    if K < 1 or K > N:
        raise RolloutError(f"K must lie in 1..{N}")
    if K == 1:
        return Stratification(np.zeros(N, dtype=np.int64))
    R = _backend.twoway_residual(Y)
    U, s, _ = np.linalg.svd(R, full_matrices=False)
    q = min(K, 3, s.size)
    coords = U[:, :q] * s[:q]
    seed = None if seed is None else int(np.random.SeedSequence(seed).generate_state(1)[0])
    km = KMeans(n_clusters=K, n_init=50, algorithm="lloyd", random_state=seed)
    raw = km.fit_predict(coords)
    relabel = {}
    for lab in raw:
        relabel.setdefault(int(lab), len(relabel))
    return Stratification(np.array([relabel[int(x)] for x in raw]))


def grid_search_mu(
    blocks,
    design,
    effect: SyntheticEffect,
    mu_range=(1e-3, 1e2),
    n_grid: int = 20,
    k0: int = 1,
    return_scores: bool = False,
    **lrme_kwargs,
):
    """Pick the LRME threshold with the smallest minimax error on history blocks.

    ``mu_max`` is the initial incumbent, then ``n_grid`` log-spaced values
    from ``mu_min`` to ``mu_max`` are scanned. A candidate replaces the
    incumbent only when strictly better, or equal and larger.
    """
    mu_min, mu_max = map(float, mu_range)
    if not 0 < mu_min < mu_max:
        raise RolloutError("need 0 < mu_min < mu_max")
    if n_grid < 1:
        raise RolloutError("n_grid must be positive")

    def score(mu):
        cfg = LrmeConfig(k0=k0, mu=mu, **lrme_kwargs)
        return minimax_error(design, blocks, effect, "lrme", lrme_cfg=cfg)

    best_mu, best_err = mu_max, score(mu_max)
    scores = [(mu_max, best_err)]
    for mu in np.geomspace(mu_min, mu_max, n_grid):
        mu = float(mu)
        e = best_err if mu == mu_max else score(mu)
        scores.append((mu, e))
        if e < best_err or (e == best_err and mu > best_mu):
            best_mu, best_err = mu, e
    return (best_mu, scores) if return_scores else best_mu


_CANONICAL = {m: k for k, m in enumerate(METHODS)}


def select_estimator(blocks, design, effect: SyntheticEffect, candidates: Sequence[str] = METHODS, return_scores: bool = False, **est_kwargs):
    """Estimator tag with the smallest minimax error on history blocks.

    Ties go to the earlier tag in the order ols, gls, lrme.
    """
    cands = sorted({c.lower() for c in candidates}, key=lambda c: _CANONICAL.get(c, len(METHODS)))
    if not cands:
        raise RolloutError("no candidate estimators")
    scores = {}
    for c in cands:
        try:
            scores[c] = minimax_error(design, blocks, effect, c, **est_kwargs)
        except RolloutError as exc:
            logger.warning("candidate %s failed: %s", c, exc)
    if not scores:
        raise RolloutError("every candidate estimator failed")
    best = min(scores, key=lambda c: (scores[c], _CANONICAL.get(c, len(METHODS))))
    return (best, scores) if return_scores else best


__all__ = [
    "SaConfig",
    "SearchResult",
    "block_errors",
    "grid_search_mu",
    "kmeans_stratify",
    "minimax_error",
    "sa_search",
    "select_estimator",
]
