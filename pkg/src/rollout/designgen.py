"""Treatment designs: fraction paths, rounding, realization and benchmarks.

A design is represented canonically by its fraction path, the per-period
average of the +-1 assignments. Concrete matrices are realized from integer
treated counts with an explicit seed.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from rollout.errors import DesignError

logger = logging.getLogger(__name__)

UNVERIFIED_REGIME = "unverified regime"
NO_IMPROVEMENT = "no improvement"
RELAXED_BALANCE = "nearest-integer balance"

_TIE_TOL = 1e-9


# --------------------------------------------------------------------- types


@dataclass(frozen=True)
class FractionPath:
    """Per-period cross-sectional mean of a +-1 design.

    Attributes
    ----------
    omegas : ndarray of shape (T,)
        Values in [-1, 1]; the treated share at period t is ``(1 + omegas[t]) / 2``.
    monotone : bool
        Whether the path came from the irreversible regime (nondecreasing).
    flags : tuple of str
        Diagnostic labels such as ``"unverified regime"``.
    """

    omegas: np.ndarray
    monotone: bool = True
    flags: tuple = ()

    def __post_init__(self):
        w = np.array(self.omegas, dtype=np.float64, copy=True).ravel()
        if w.size == 0:
            raise DesignError("a fraction path needs at least one period")
        if np.any(w < -1 - 1e-12) or np.any(w > 1 + 1e-12):
            raise DesignError("fraction path values must lie in [-1, 1]")
        if self.monotone and np.any(np.diff(w) < -1e-12):
            raise DesignError("irreversible fraction path must be nondecreasing")
        w.setflags(write=False)
        object.__setattr__(self, "omegas", w)
        object.__setattr__(self, "flags", tuple(self.flags))

    @property
    def T(self) -> int:
        return self.omegas.size

    def __len__(self):
        return self.omegas.size

    def __array__(self, dtype=None, copy=None):
        return np.asarray(self.omegas, dtype=dtype)

    def treated_share(self) -> np.ndarray:
        return (1.0 + self.omegas) / 2.0


@dataclass(frozen=True)
class DesignMatrix:
    """N x T assignment matrix with entries in {-1, +1}.

    Rows of an irreversible design never switch back from +1 to -1.
    """

    entries: np.ndarray
    regime: str = "irreversible"
    flags: tuple = ()
    unit_ids: tuple = ()
    period_ids: tuple = ()

    def __post_init__(self):
        z = np.array(self.entries, copy=True)
        if z.ndim != 2:
            raise DesignError("design entries must be two-dimensional")
        if not np.all((z == 1) | (z == -1)):
            raise DesignError("design entries must be -1 or +1")
        z = z.astype(np.int8)
        if self.regime not in ("irreversible", "reversible"):
            raise DesignError(f"unknown regime {self.regime!r}")
        if self.regime == "irreversible" and np.any(np.diff(z, axis=1) < 0):
            bad = int(np.nonzero(np.any(np.diff(z, axis=1) < 0, axis=1))[0][0])
            raise DesignError(f"row {bad} switches back to control in an irreversible design")
        z.setflags(write=False)
        n, t = z.shape
        units = tuple(self.unit_ids) if len(self.unit_ids) else tuple(range(n))
        periods = tuple(self.period_ids) if len(self.period_ids) else tuple(range(1, t + 1))
        if len(units) != n or len(periods) != t:
            raise DesignError("design labels do not match its shape")
        object.__setattr__(self, "entries", z)
        object.__setattr__(self, "flags", tuple(self.flags))
        object.__setattr__(self, "unit_ids", units)
        object.__setattr__(self, "period_ids", periods)

    @property
    def N(self) -> int:
        return self.entries.shape[0]

    @property
    def T(self) -> int:
        return self.entries.shape[1]

    @property
    def omegas(self) -> np.ndarray:
        return self.entries.mean(axis=0)

    @property
    def counts(self) -> np.ndarray:
        return (self.entries > 0).sum(axis=0)

    def path(self) -> FractionPath:
        return FractionPath(self.omegas, monotone=self.regime == "irreversible")

    def as_float(self) -> np.ndarray:
        return self.entries.astype(np.float64)

    def swap_rows(self, i: int, k: int) -> "DesignMatrix":
        z = self.entries.copy()
        z[[i, k]] = z[[k, i]]
        return DesignMatrix(z, self.regime, self.flags, self.unit_ids, self.period_ids)


@dataclass(frozen=True)
class Stratification:
    """Partition of units into groups; labels are arbitrary integers."""

    labels: np.ndarray

    def __post_init__(self):
        lab = np.array(self.labels, dtype=np.int64, copy=True).ravel()
        if lab.size == 0:
            raise DesignError("stratification needs at least one unit")
        lab.setflags(write=False)
        object.__setattr__(self, "labels", lab)

    @property
    def groups(self) -> list:
        return [np.nonzero(self.labels == g)[0] for g in np.unique(self.labels)]

    @property
    def group_sizes(self) -> list:
        return [len(g) for g in self.groups]

    @property
    def N(self) -> int:
        return self.labels.size


@dataclass(frozen=True)
class CarryoverDesignSpec:
    """Lag count ``ell`` and horizon ``T`` for carryover designs."""

    ell: int
    T: int

    def __post_init__(self):
        if self.ell < 0 or self.T < 1:
            raise DesignError("need ell >= 0 and T >= 1")

    @property
    def threshold(self) -> float:
        """Smallest horizon (exclusive) for which the closed form is proven."""
        l = self.ell
        if l == 0:
            return 0.0
        return (l**3 + 13 * l**2 + 7 * l + 3) / (8 * l)

    @property
    def verified(self) -> bool:
        return self.T > self.threshold


# ------------------------------------------------------------- linear design


def optimal_linear_path(T: int) -> FractionPath:
    """Linearly increasing fraction path ``(2t - 1 - T) / T``, t = 1..T."""
    if T < 1:
        raise DesignError("T must be at least 1")
    t = np.arange(1, T + 1)
    return FractionPath((2 * t - 1 - T) / T)


def round_counts(path, N: int) -> np.ndarray:
    """Integer treated counts nearest to ``N * (1 + omega_t) / 2``.

    Exact half ties round down for periods before the midpoint of the
    horizon and up from the midpoint on.
    """
    w = np.asarray(path, dtype=np.float64)
    if N < 1:
        raise DesignError("N must be at least 1")
    T = w.size
    target = N * (1.0 + w) / 2.0
    counts = np.empty(T, dtype=np.int64)
    for k in range(T):
        fl = math.floor(target[k] + _TIE_TOL)
        frac = target[k] - fl
        if abs(frac - 0.5) <= _TIE_TOL:
            before_mid = 2 * (k + 1) - 1 < T
            counts[k] = fl if before_mid else fl + 1
        else:
            counts[k] = fl if frac < 0.5 else fl + 1
    counts = np.clip(counts, 0, N)
    if np.any(np.diff(counts) < 0):
        raise DesignError("rounded counts are not monotone; the path must be nondecreasing")
    return counts


def counts_to_entries(counts, N: int, order=None) -> np.ndarray:
    """Build +-1 entries where the unit at adoption rank r is treated once r <= counts[t]."""
    counts = np.asarray(counts, dtype=np.int64)
    if np.any(np.diff(counts) < 0):
        raise DesignError("counts must be nondecreasing")
    if np.any(counts < 0) or np.any(counts > N):
        raise DesignError(f"counts must lie in 0..{N}")
    order = np.arange(N) if order is None else np.asarray(order)
    z = -np.ones((N, counts.size), dtype=np.int8)
    for t, c in enumerate(counts):
        z[order[:c], t] = 1
    return z


def realize_design(counts, N: int, seed=None) -> DesignMatrix:
    """Random irreversible design with the given per-period treated counts."""
    rng = np.random.default_rng(seed)
    return DesignMatrix(counts_to_entries(counts, N, rng.permutation(N)))


def optimal_design(N: int, T: int, seed=None) -> DesignMatrix:
    """Rounded linear staggered design."""
    return realize_design(round_counts(optimal_linear_path(T), N), N, seed)


# -------------------------------------------------------------- benchmarks


def benchmark_design(kind: str, N: int, T: int, seed=None) -> DesignMatrix:
    """Benchmark designs with the single-unit perturbations needed for identification.

    ``ff``
        Half of the units (rounded up) treated throughout. One treated unit
        starts in control for the first period, one control unit is treated
        in the last period.
    ``ba``
        Every unit switches at period ``floor(T/2) + 1``. One unit switches a
        period early and another a period late.
    ``ffba``
        Half of the units (rounded up) switch at period ``floor(T/2) + 1``,
        the rest stay in control.
    """
    kind = kind.lower()
    if T < 2:
        raise DesignError("benchmark designs need T >= 2")
    if N < 2:
        raise DesignError("benchmark designs need N >= 2")
    rng = np.random.default_rng(seed)
    perm = rng.permutation(N)
    half = (N + 1) // 2
    switch = T // 2  # zero-based index of the switching period
    z = -np.ones((N, T), dtype=np.int8)
    if kind == "ff":
        treated, control = perm[:half], perm[half:]
        z[treated] = 1
        z[treated[0], 0] = -1
        z[control[0], T - 1] = 1
    elif kind == "ba":
        z[:, switch:] = 1
        z[perm[0], switch - 1] = 1
        z[perm[1], switch] = -1
    elif kind == "ffba":
        z[perm[:half], switch:] = 1
    else:
        raise DesignError(f"unknown benchmark design {kind!r}")
    return DesignMatrix(z)


def stratified_design(path, strat: Stratification, seed=None) -> DesignMatrix:
    """Apply the same fraction path inside every stratum."""
    groups = strat.groups
    if any(len(g) == 0 for g in groups):
        raise DesignError("empty stratum")
    seeds = np.random.SeedSequence(seed).spawn(len(groups))
    z = -np.ones((strat.N, len(np.asarray(path))), dtype=np.int8)
    for g, ss in zip(groups, seeds):
        counts = round_counts(path, len(g))
        rng = np.random.default_rng(ss)
        z[g] = counts_to_entries(counts, len(g), rng.permutation(len(g)))
    return DesignMatrix(z)


# -------------------------------------------------------------- carryover


def build_carryover_system(spec: CarryoverDesignSpec):
    """Linear system for the boundary block of the carryover trace-optimal path.

    Returns ``(A, b)`` of dimension ``ell - ell // 2``; the unknowns are the
    path values at periods ``ell // 2 + 1 .. ell``.
    """
    l, T = spec.ell, spec.T
    h = l // 2
    n = l - h
    if l == 0:
        return np.zeros((0, 0)), np.zeros(0)
    if T <= l:
        raise DesignError("need T > ell")
    Tp = T - l
    idx = np.arange(h + 1, l + 1, dtype=np.float64)
    p = np.arange(1, n + 1)
    tri = (n - np.maximum.outer(p, p) + 1).astype(np.float64)
    A = np.diag(idx) - tri / Tp
    tail = np.array([sum(h + 1 - q for q in range(1, n - k + 2)) for k in range(1, n + 1)], float)
    b = -idx + idx**2 / Tp - tail / Tp
    return A, b


def optimal_carryover_path(spec: CarryoverDesignSpec) -> FractionPath:
    """Trace-optimal fraction path under ``ell`` carryover lags.

    The path is -1 for the first ``ell // 2`` periods, solves the boundary
    system up to period ``ell``, rises linearly in the middle and mirrors
    itself antisymmetrically at the end.
    """
    l, T = spec.ell, spec.T
    if l == 0:
        return optimal_linear_path(T)
    if T - l < 2 or T < 2 * l + 1:
        raise DesignError(f"T={T} is too short for ell={l}: the linear middle stage is empty")
    h = l // 2
    Tp = T - l
    w = np.empty(T)
    w[:h] = -1.0
    A, b = build_carryover_system(spec)
    w[h:l] = np.linalg.solve(A, b)
    t = np.arange(l + 1, T - l + 1)
    w[l : T - l] = -1.0 + (2 * t - (l + 1)) / Tp
    w[T - l :] = -w[:l][::-1]
    # mirror exactly so that w_t + w_{T+1-t} is zero in floating point
    w = (w - w[::-1]) / 2.0
    flags = () if spec.verified else (UNVERIFIED_REGIME,)
    if flags:
        logger.warning("T=%d does not exceed the proven threshold %.3f for ell=%d", T, spec.threshold, l)
    return FractionPath(np.clip(w, -1.0, 1.0), flags=flags)


@dataclass
class DOptConfig:
    """Settings for the derivative-free D-optimal path search."""

    tol: float = 1e-8
    max_evals: int = 100_000
    initial_step: float = 0.05


def d_optimal_path(spec: CarryoverDesignSpec, solver_cfg: Optional[DOptConfig] = None) -> FractionPath:
    """Locally maximize the determinant of the carryover precision matrix.

    The search runs over antisymmetric nondecreasing paths, parameterized by
    their first half, with coordinate moves projected back onto the
    monotone box. It starts from the trace-optimal path.
    """
    from rollout.objective import carryover_theta

    cfg = solver_cfg or DOptConfig()
    l, T = spec.ell, spec.T
    if T < l + 2:
        raise DesignError("need T >= ell + 2")
    try:
        start = np.asarray(optimal_carryover_path(spec), dtype=np.float64)
    except DesignError:
        start = np.asarray(optimal_linear_path(T), dtype=np.float64)
    half = T // 2

    def expand(x):
        w = np.zeros(T)
        w[:half] = x
        w[T - half :] = -x[::-1]
        return w

    def loss(x):
        return -np.linalg.det(carryover_theta(expand(x), l, 1))

    x = start[:half].copy()
    best = loss(x)
    f0 = best
    evals = 1
    step = cfg.initial_step
    while step > cfg.tol and evals < cfg.max_evals:
        improved = False
        for k in range(half):
            lo = x[k - 1] if k > 0 else -1.0
            hi = x[k + 1] if k + 1 < half else 0.0
            for sgn in (1.0, -1.0):
                cand = x.copy()
                cand[k] = min(max(x[k] + sgn * step, lo), hi)
                if cand[k] == x[k]:
                    continue
                val = loss(cand)
                evals += 1
                if val < best - 1e-15 * max(1.0, abs(best)):
                    x, best, improved = cand, val, True
                    break
        if not improved:
            step /= 2.0
    if best < f0:
        return FractionPath(expand(x))
    return FractionPath(start, flags=(NO_IMPROVEMENT,))


# ------------------------------------------------------------- reversible


def _balanced_pattern(n_rows, n_cols, rng):
    """Checkerboard with random row/column order: rows and columns as balanced as possible."""
    z = np.where((np.add.outer(np.arange(n_rows), np.arange(n_cols)) % 2) == 0, 1, -1)
    return z[rng.permutation(n_rows)][:, rng.permutation(n_cols)].astype(np.int8)


def reversible_design(kind: str, N: int, T: int, strat: Optional[Stratification] = None, seed=None) -> DesignMatrix:
    """Designs with zero-mean columns and/or rows when treatment may switch off.

    ``time`` balances every period, ``unit`` balances every unit over time,
    ``twoway`` does both and ``stratified`` balances periods within each
    stratum as well as every unit. Odd sizes that cannot balance exactly
    get the nearest split and a flag.
    """
    rng = np.random.default_rng(seed)
    kind = kind.lower()
    flags = []
    if kind == "time":
        z = -np.ones((N, T), dtype=np.int8)
        for t in range(T):
            z[rng.permutation(N)[: N // 2], t] = 1
        if N % 2:
            flags.append(RELAXED_BALANCE)
    elif kind == "unit":
        z = -np.ones((N, T), dtype=np.int8)
        for i in range(N):
            z[i, rng.permutation(T)[: T // 2]] = 1
        if T % 2:
            flags.append(RELAXED_BALANCE)
    elif kind == "twoway":
        z = _balanced_pattern(N, T, rng)
        if N % 2 or T % 2:
            flags.append(RELAXED_BALANCE)
    elif kind == "stratified":
        if strat is None:
            raise DesignError("stratified reversible design needs a stratification")
        if strat.N != N:
            raise DesignError("stratification size does not match N")
        z = np.empty((N, T), dtype=np.int8)
        for g in strat.groups:
            z[g] = _balanced_pattern(len(g), T, rng)
            if len(g) % 2:
                flags.append(RELAXED_BALANCE)
        if T % 2:
            flags.append(RELAXED_BALANCE)
    else:
        raise DesignError(f"unknown reversible design kind {kind!r}")
    return DesignMatrix(z, regime="reversible", flags=tuple(sorted(set(flags))))


# --------------------------------------------------------------------- io


def save_design(design: DesignMatrix, path, format: str = "matrix") -> None:
    """Write a design as a +-1 matrix or as adoption periods.

    ``path`` may also be an open text stream.
    """
    if hasattr(path, "write"):
        _write_design(design, path, format)
        return
    with open(path, "w", newline="") as fh:
        _write_design(design, fh, format)


def _write_design(design, fh, format):
    w = csv.writer(fh, lineterminator="\n")
    if format == "matrix":
        w.writerow(["unit", *design.period_ids])
        for u, row in zip(design.unit_ids, design.entries):
            w.writerow([u, *(int(v) for v in row)])
    elif format == "adoption":
        if design.regime != "irreversible":
            raise DesignError("adoption form needs an irreversible design")
        w.writerow(["unit", "adopt_period"])
        for u, row in zip(design.unit_ids, design.entries):
            on = np.nonzero(row > 0)[0]
            w.writerow([u, int(on[0]) + 1 if on.size else "never"])
    else:
        raise DesignError(f"unknown design format {format!r}")


def load_design(path, T: Optional[int] = None) -> DesignMatrix:
    """Read a design CSV in either matrix or adoption form.

    The adoption form needs ``T`` unless it can be inferred from the largest
    adoption period.
    """
    with open(path, newline="") as fh:
        rows = [r for r in csv.reader(fh) if any(c.strip() for c in r)]
    if not rows:
        raise DesignError(f"{path}: empty design file")
    header = [h.strip() for h in rows[0]]
    body = rows[1:]
    if header[:2] == ["unit", "adopt_period"]:
        adopt = []
        for k, r in enumerate(body, start=2):
            v = r[1].strip().lower()
            if v == "never":
                adopt.append(None)
            else:
                try:
                    adopt.append(int(v))
                except ValueError:
                    raise DesignError(f"{path}: line {k}: bad adopt_period {r[1]!r}") from None
        finite = [a for a in adopt if a is not None]
        T = T or (max(finite) if finite else None)
        if T is None:
            raise DesignError(f"{path}: cannot infer T; pass it explicitly")
        z = -np.ones((len(body), T), dtype=np.int8)
        for i, a in enumerate(adopt):
            if a is not None:
                if not 1 <= a <= T:
                    raise DesignError(f"{path}: adopt_period {a} outside 1..{T}")
                z[i, a - 1 :] = 1
        return DesignMatrix(z, unit_ids=tuple(r[0].strip() for r in body))
    if header[0] != "unit":
        raise DesignError(f"{path}: first column must be 'unit'")
    try:
        z = np.array([[int(c) for c in r[1:]] for r in body])
    except ValueError:
        raise DesignError(f"{path}: design entries must be -1 or +1") from None
    regime = "irreversible" if not np.any(np.diff(z, axis=1) < 0) else "reversible"
    periods = []
    for p in header[1:]:
        try:
            periods.append(int(p))
        except ValueError:
            periods.append(p)
    return DesignMatrix(z, regime=regime, unit_ids=tuple(r[0].strip() for r in body), period_ids=tuple(periods))


def load_stratification(path) -> Stratification:
    """Read ``unit,stratum`` rows; strata may be any integer labels."""
    with open(path, newline="") as fh:
        rows = [r for r in csv.reader(fh) if any(c.strip() for c in r)]
    if not rows or [h.strip() for h in rows[0][:2]] != ["unit", "stratum"]:
        raise DesignError(f"{path}: strata file needs header unit,stratum")
    return Stratification([int(r[1]) for r in rows[1:]])


__all__ = [
    "CarryoverDesignSpec",
    "DOptConfig",
    "DesignMatrix",
    "FractionPath",
    "Stratification",
    "benchmark_design",
    "build_carryover_system",
    "counts_to_entries",
    "d_optimal_path",
    "load_design",
    "load_stratification",
    "optimal_carryover_path",
    "optimal_design",
    "optimal_linear_path",
    "realize_design",
    "reversible_design",
    "round_counts",
    "save_design",
    "stratified_design",
]
