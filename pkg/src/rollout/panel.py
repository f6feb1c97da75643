"""Outcome panels, CSV ingestion, window blocks and synthetic effect injection."""

from __future__ import annotations

import csv
import datetime as _dt
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from rollout.errors import DesignError, PanelFormatError, RolloutError


def _readonly(a):
    a = np.array(a, dtype=np.float64, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class PanelMatrix:
    """A complete N x T panel of outcomes.

    Parameters
    ----------
    values : ndarray of shape (N, T)
    unit_ids : tuple
        Unique unit labels, one per row.
    period_ids : tuple
        Unique period labels, one per column, in time order.
    """

    values: np.ndarray
    unit_ids: tuple = ()
    period_ids: tuple = ()

    def __post_init__(self):
        vals = _readonly(self.values)
        if vals.ndim != 2:
            raise PanelFormatError("panel values must be two-dimensional")
        n, t = vals.shape
        if n < 2 or t < 2:
            raise PanelFormatError(f"panel must be at least 2x2, got {n}x{t}")
        if not np.all(np.isfinite(vals)):
            raise PanelFormatError("panel contains non-finite entries")
        units = tuple(self.unit_ids) if len(self.unit_ids) else tuple(range(n))
        periods = tuple(self.period_ids) if len(self.period_ids) else tuple(range(1, t + 1))
        if len(units) != n or len(set(units)) != n:
            raise PanelFormatError("unit_ids must be unique and match the row count")
        if len(periods) != t or len(set(periods)) != t:
            raise PanelFormatError("period_ids must be unique and match the column count")
        object.__setattr__(self, "values", vals)
        object.__setattr__(self, "unit_ids", units)
        object.__setattr__(self, "period_ids", periods)

    @property
    def N(self) -> int:
        return self.values.shape[0]

    @property
    def T(self) -> int:
        return self.values.shape[1]

    def columns(self, start: int, stop: int) -> "PanelMatrix":
        """Sub-panel of zero-based columns ``start:stop``."""
        return PanelMatrix(self.values[:, start:stop], self.unit_ids, self.period_ids[start:stop])

    def rows(self, index: Sequence[int]) -> "PanelMatrix":
        index = list(index)
        return PanelMatrix(self.values[index], [self.unit_ids[i] for i in index], self.period_ids)

    def with_values(self, values) -> "PanelMatrix":
        return PanelMatrix(values, self.unit_ids, self.period_ids)


@dataclass(frozen=True)
class BlockSplit:
    """Equal-shape panels cut from one history panel by a moving window."""

    blocks: tuple
    window_stride: int
    overlap_allowed: bool = True
    starts: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "blocks", tuple(self.blocks))
        if not self.blocks:
            raise RolloutError("a block split needs at least one block")
        first = self.blocks[0]
        for b in self.blocks[1:]:
            if b.values.shape != first.values.shape or b.unit_ids != first.unit_ids:
                raise RolloutError("all blocks must share shape and unit ordering")

    def __len__(self):
        return len(self.blocks)

    def __iter__(self):
        return iter(self.blocks)

    def stacked(self) -> np.ndarray:
        """Values of all blocks as an array of shape (m, N, T)."""
        return np.stack([b.values for b in self.blocks])


@dataclass(frozen=True)
class SyntheticEffect:
    """Additive effect injected into control outcomes.

    ``taus[0]`` applies from the adoption period onwards, ``taus[l]`` is the
    extra increment once a unit has been treated for ``l`` more periods.
    """

    kind: str = "direct"
    taus: tuple = field(default_factory=lambda: (0.0,))

    def __post_init__(self):
        taus = tuple(float(x) for x in np.atleast_1d(self.taus))
        if not taus:
            raise RolloutError("taus must be nonempty")
        if self.kind not in ("direct", "carryover"):
            raise RolloutError(f"unknown effect kind {self.kind!r}")
        if self.kind == "direct" and len(taus) != 1:
            raise RolloutError("a direct effect has exactly one tau")
        object.__setattr__(self, "taus", taus)

    @property
    def ell(self) -> int:
        return len(self.taus) - 1

    @classmethod
    def direct(cls, tau: float) -> "SyntheticEffect":
        return cls("direct", (tau,))

    @classmethod
    def carryover(cls, taus) -> "SyntheticEffect":
        taus = tuple(taus)
        return cls("carryover" if len(taus) > 1 else "direct", taus)


# ---------------------------------------------------------------- ingestion


def _period_key(label: str):
    """Sort key for a period label: integer, then ISO date."""
    s = label.strip()
    try:
        return (0, int(s))
    except ValueError:
        pass
    try:
        return (0, _dt.date.fromisoformat(s).toordinal())
    except ValueError as exc:
        raise PanelFormatError(f"period {label!r} is neither an integer nor an ISO date") from exc


def _period_label(label: str):
    s = label.strip()
    try:
        return int(s)
    except ValueError:
        return s


def _parse_float(text, lineno, path):
    try:
        v = float(text)
    except (TypeError, ValueError):
        raise PanelFormatError(f"{path}: line {lineno}: non-numeric value {text!r}") from None
    if not np.isfinite(v):
        raise PanelFormatError(f"{path}: line {lineno}: non-finite value {text!r}")
    return v


def load_panel(path, format: str = "long") -> PanelMatrix:
    """Read a panel from a long or wide CSV file.

    Long files have the header ``unit,period,value``. Wide files have a
    first column ``unit`` followed by one column per period. Units keep the
    order of first appearance and periods are sorted in time order.
    """
    path = str(path)
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise PanelFormatError(f"{path}: empty file") from None
        rows = [(i + 2, r) for i, r in enumerate(reader) if any(c.strip() for c in r)]

    if format == "long":
        if header[:3] != ["unit", "period", "value"]:
            raise PanelFormatError(f"{path}: long format needs header unit,period,value")
        units, cells, keys = {}, {}, {}
        for lineno, r in rows:
            if len(r) < 3:
                raise PanelFormatError(f"{path}: line {lineno}: expected 3 fields")
            u, p = r[0].strip(), r[1].strip()
            units.setdefault(u, len(units))
            keys.setdefault(p, _period_key(p))
            if (u, p) in cells:
                raise PanelFormatError(f"{path}: line {lineno}: duplicate cell ({u}, {p})")
            cells[(u, p)] = _parse_float(r[2], lineno, path)
        periods = sorted(keys, key=keys.get)
        ulist = list(units)
        vals = np.empty((len(ulist), len(periods)))
        for i, u in enumerate(ulist):
            for j, p in enumerate(periods):
                if (u, p) not in cells:
                    raise PanelFormatError(f"missing cell (unit={u}, period={p})")
                vals[i, j] = cells[(u, p)]
        return PanelMatrix(vals, tuple(ulist), tuple(_period_label(p) for p in periods))

    if format == "wide":
        if not header or header[0] != "unit":
            raise PanelFormatError(f"{path}: wide format needs first column 'unit'")
        plabels = header[1:]
        order = sorted(range(len(plabels)), key=lambda j: _period_key(plabels[j]))
        ulist, vals = [], []
        for lineno, r in rows:
            if len(r) != len(header):
                raise PanelFormatError(f"{path}: line {lineno}: expected {len(header)} fields")
            for j, cell in enumerate(r[1:]):
                if not cell.strip():
                    raise PanelFormatError(
                        f"missing cell (unit={r[0].strip()}, period={plabels[j]})"
                    )
            ulist.append(r[0].strip())
            vals.append([_parse_float(r[1 + j], lineno, path) for j in order])
        return PanelMatrix(
            np.array(vals), tuple(ulist), tuple(_period_label(plabels[j]) for j in order)
        )

    raise PanelFormatError(f"unknown panel format {format!r}")


def save_panel(panel: PanelMatrix, path, format: str = "long") -> None:
    """Write a panel as long or wide CSV (full float precision)."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        if format == "long":
            w.writerow(["unit", "period", "value"])
            for i, u in enumerate(panel.unit_ids):
                for j, p in enumerate(panel.period_ids):
                    w.writerow([u, p, repr(float(panel.values[i, j]))])
        elif format == "wide":
            w.writerow(["unit", *panel.period_ids])
            for i, u in enumerate(panel.unit_ids):
                w.writerow([u, *(repr(float(v)) for v in panel.values[i])])
        else:
            raise PanelFormatError(f"unknown panel format {format!r}")


# ------------------------------------------------------------------ windows


def split_blocks(history: PanelMatrix, block_T: int, count_m: int, stride: int) -> BlockSplit:
    """Cut ``count_m`` windows of ``block_T`` periods, ``stride`` apart.

    Block ``j`` (zero-based) covers columns ``j*stride`` to ``j*stride+block_T-1``.
    """
    if block_T < 1 or block_T > history.T:
        raise RolloutError(f"block_T={block_T} must lie in 1..{history.T}")
    if stride < 1 or count_m < 1:
        raise RolloutError("stride and count_m must be positive")
    if (count_m - 1) * stride + block_T > history.T:
        max_m = (history.T - block_T) // stride + 1
        raise RolloutError(
            f"{count_m} windows of {block_T} periods with stride {stride} do not fit in "
            f"{history.T} periods; at most {max_m} fit"
        )
    starts = tuple(j * stride for j in range(count_m))
    blocks = [history.columns(s, s + block_T) for s in starts]
    return BlockSplit(blocks, stride, stride < block_T, starts)


# ---------------------------------------------------------------- injection


def adoption_periods(entries) -> np.ndarray:
    """Zero-based first treated period per row, ``T`` for never-treated rows."""
    z = np.asarray(entries)
    treated = z > 0
    first = np.argmax(treated, axis=1)
    first[~treated.any(axis=1)] = z.shape[1]
    return first


def effect_matrix(entries, effect: SyntheticEffect) -> np.ndarray:
    """Additive effect matrix implied by a design and a synthetic effect.

    A unit already treated in the first period counts as switching in that
    period.
    """
    z = np.asarray(entries)
    if effect.ell == 0 and effect.kind == "direct":
        return effect.taus[0] * (z > 0)
    if np.any(np.diff(z, axis=1) < 0):
        raise DesignError("carryover effects need monotone (irreversible) design rows")
    n, t = z.shape
    cum = np.cumsum(effect.taus)
    since = np.arange(t)[None, :] - adoption_periods(z)[:, None]
    out = np.zeros((n, t))
    mask = since >= 0
    out[mask] = cum[np.minimum(since[mask], effect.ell)]
    return out


def apply_synthetic_treatment(control: PanelMatrix, design, effect: SyntheticEffect) -> PanelMatrix:
    """Add a synthetic treatment effect to control outcomes.

    Parameters
    ----------
    control : PanelMatrix
    design : DesignMatrix or array of +-1 entries
    effect : SyntheticEffect

    Returns
    -------
    PanelMatrix
        Treated outcomes with the same labels.
    """
    entries = np.asarray(getattr(design, "entries", design))
    if entries.shape != control.values.shape:
        raise DesignError(
            f"design shape {entries.shape} does not match panel shape {control.values.shape}"
        )
    if effect.kind == "carryover" and getattr(design, "regime", "irreversible") == "reversible":
        raise DesignError("carryover effects are undefined for reversible designs")
    return control.with_values(control.values + effect_matrix(entries, effect))


__all__ = [
    "BlockSplit",
    "PanelMatrix",
    "SyntheticEffect",
    "adoption_periods",
    "apply_synthetic_treatment",
    "effect_matrix",
    "load_panel",
    "save_panel",
    "split_blocks",
]
