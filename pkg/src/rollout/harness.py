"""Synthetic-experiment runner: sample blocks, assign, inject, estimate, score."""

from __future__ import annotations

import csv
import io
import json
import logging
import re
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from rollout.designgen import (
    CarryoverDesignSpec,
    DesignMatrix,
    benchmark_design,
    d_optimal_path,
    optimal_carryover_path,
    optimal_design,
    optimal_linear_path,
    realize_design,
    round_counts,
    stratified_design,
)
from rollout.errors import RolloutError
from rollout.estimators import LrmeConfig, estimate
from rollout.panel import PanelMatrix, SyntheticEffect, apply_synthetic_treatment, split_blocks
from rollout.tuner import SaConfig, grid_search_mu, kmeans_stratify, sa_search, select_estimator

logger = logging.getLogger(__name__)

DESIGN_TAGS = ("opt", "opt-co", "d-opt", "ff", "ba", "ffba", "sa", "kmeans<K>")
METHOD_TAGS = ("ols", "gls", "lrme", "hist")


def generate_synthetic_panel(N: int, T: int, model: str = "twoway", k: int = 1, noise_sigma: float = 1.0, seed=None) -> PanelMatrix:
    """Draw a panel from the two-way or factor outcome model.

    Unit and period effects are standard normal. The factor model adds
    ``U v_t`` with column-centered standard normal loadings ``U`` (fixed
    across periods) and standard normal factors ``v_t``. Noise is iid
    normal with standard deviation ``noise_sigma``.
    """
    if k < 0 or noise_sigma < 0:
        raise RolloutError("need k >= 0 and noise_sigma >= 0")
    if model not in ("twoway", "factor"):
        raise RolloutError(f"unknown model {model!r}")
    rng = np.random.default_rng(seed)
    alpha = rng.standard_normal(N)
    beta = rng.standard_normal(T)
    Y = alpha[:, None] + beta[None, :]
    if model == "factor" and k > 0:
        U = rng.standard_normal((N, k))
        U -= U.mean(axis=0, keepdims=True)
        V = rng.standard_normal((T, k))
        Y = Y + U @ V.T
    if noise_sigma > 0:
        Y = Y + noise_sigma * rng.standard_normal((N, T))
    return PanelMatrix(Y)


@dataclass
class SyntheticSource:
    """Fresh synthetic panel per block instead of windows of a fixed panel."""

    model: str = "factor"
    k: int = 1
    noise_sigma: float = 1.0

    @classmethod
    def parse(cls, text: str) -> "SyntheticSource":
        """Parse ``model=factor,k=1,sigma=0.5``."""
        out = cls()
        for part in filter(None, (p.strip() for p in text.split(","))):
            key, _, val = part.partition("=")
            key = key.strip().lower()
            if key == "model":
                out.model = val.strip()
            elif key == "k":
                out.k = int(val)
            elif key in ("sigma", "noise_sigma"):
                out.noise_sigma = float(val)
            else:
                raise RolloutError(f"unknown synthetic option {key!r}")
        return out


@dataclass
class ExperimentConfig:
    """Settings for one synthetic-experiment run.

    ``hist_T`` leading periods of every block are history, visible only to
    tuning (``sa``, ``kmeans<K>``, ``hist`` and the LRME threshold search);
    the next ``T`` periods form the experiment window.
    """

    m_blocks: int
    N: int
    T: int
    effect: SyntheticEffect
    designs: list = field(default_factory=lambda: ["opt"])
    methods: list = field(default_factory=lambda: ["ols"])
    hist_T: int = 0
    seed: int = 0
    synthetic: Optional[SyntheticSource] = None
    k0: int = 1
    lrme_mu: Optional[float] = None
    mu_range: tuple = (1e-3, 1e2)
    mu_grid: int = 10
    sa: SaConfig = field(default_factory=lambda: SaConfig(steps_max=500))
    sa_method: str = "ols"
    coding: str = "binary"
    allow_failures: bool = False

    def __post_init__(self):
        if self.m_blocks < 1:
            raise RolloutError("m_blocks must be at least 1")
        if self.hist_T < 0:
            raise RolloutError("hist_T must be nonnegative")
        for d in self.designs:
            if d not in DESIGN_TAGS[:-1] and not re.fullmatch(r"kmeans\d+", d):
                raise RolloutError(f"unknown design tag {d!r}")
        for m in self.methods:
            if m not in METHOD_TAGS:
                raise RolloutError(f"unknown method tag {m!r}")


@dataclass
class CellResult:
    """Per (design, method) summary over blocks."""

    rmse: float
    mean_tau: list
    var_tau: list
    estimates: list
    failures: list = field(default_factory=list)


@dataclass
class ExperimentReport:
    taus: list
    cells: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    def cell(self, design: str, method: str) -> CellResult:
        return self.cells[(design, method)]

    def to_dict(self) -> dict:
        return {
            "taus": list(self.taus),
            "meta": self.meta,
            "cells": [
                {"design": d, "method": m, **asdict(c)} for (d, m), c in sorted(self.cells.items())
            ],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentReport":
        cells = {}
        for row in data.get("cells", []):
            row = dict(row)
            key = (row.pop("design"), row.pop("method"))
            cells[key] = CellResult(**row)
        return cls(taus=list(data["taus"]), cells=cells, meta=data.get("meta", {}))


def summarize(estimates: np.ndarray, taus) -> CellResult:
    """RMSE over blocks and lags, mean and population variance per lag."""
    est = np.atleast_2d(np.asarray(estimates, dtype=np.float64))
    taus = np.asarray(taus, dtype=np.float64)
    if est.size == 0:
        nan = [float("nan")] * taus.size
        return CellResult(float("nan"), nan, nan, [])
    err = est - taus[None, :]
    return CellResult(
        rmse=float(np.sqrt(np.mean(err**2))),
        mean_tau=est.mean(axis=0).tolist(),
        var_tau=est.var(axis=0).tolist(),
        estimates=est.tolist(),
    )


def block_seed(master_seed: int, index: int) -> np.random.SeedSequence:
    """Independent seed for one block, stable under changes to the block count."""
    return np.random.SeedSequence([int(master_seed), int(index)])


def _carryover_design(N, T, ell, seed, dopt=False):
    spec = CarryoverDesignSpec(ell, T)
    path = d_optimal_path(spec) if dopt else optimal_carryover_path(spec)
    return realize_design(round_counts(path, N), N, seed)


def _history_blocks(hist: Optional[PanelMatrix], T: int):
    if hist is None or hist.T < T:
        return None
    return split_blocks(hist, T, hist.T - T + 1, 1)


def build_design(tag: str, cfg: ExperimentConfig, hist: Optional[PanelMatrix], seed) -> DesignMatrix:
    """Realize one configured design for a block, tuning on history if needed."""
    N, T, ell = cfg.N, cfg.T, cfg.effect.ell
    if tag == "opt":
        return optimal_design(N, T, seed)
    if tag == "opt-co":
        return _carryover_design(N, T, ell, seed)
    if tag == "d-opt":
        return _carryover_design(N, T, ell, seed, dopt=True)
    if tag in ("ff", "ba", "ffba"):
        return benchmark_design(tag, N, T, seed)
    hblocks = _history_blocks(hist, T)
    if tag == "sa":
        if hblocks is None:
            raise RolloutError("design 'sa' needs hist_T >= T")
        sa_cfg = SaConfig(
            cfg.sa.t_init, cfg.sa.t_min, cfg.sa.upsilon, cfg.sa.steps_max, cfg.effect,
            int(np.random.SeedSequence(seed).generate_state(1)[0]),
        )
        start = optimal_design(N, T, seed)
        return sa_search(start, hblocks, sa_cfg, cfg.sa_method, coding=cfg.coding).design
    m = re.fullmatch(r"kmeans(\d+)", tag)
    if m:
        if hist is None or hist.T < 2:
            raise RolloutError(f"design {tag!r} needs at least two history periods")
        strat = kmeans_stratify(hist, int(m.group(1)), seed)
        return stratified_design(optimal_linear_path(T), strat, seed)
    raise RolloutError(f"unknown design tag {tag!r}")


def _lrme_mu(cfg, design, hblocks):
    if cfg.lrme_mu is not None:
        return cfg.lrme_mu
    if hblocks is None:
        return 0.0
    return grid_search_mu(hblocks, design, cfg.effect, cfg.mu_range, cfg.mu_grid, cfg.k0)


def _sample_block(source: Optional[PanelMatrix], cfg: ExperimentConfig, ss: np.random.SeedSequence) -> PanelMatrix:
    width = cfg.hist_T + cfg.T
    rng = np.random.default_rng(ss)
    if source is None:
        syn = cfg.synthetic or SyntheticSource()
        return generate_synthetic_panel(cfg.N, width, syn.model, syn.k, syn.noise_sigma, rng)
    if source.N < cfg.N or source.T < width:
        raise RolloutError(
            f"source panel {source.N}x{source.T} is smaller than a {cfg.N}x{width} block"
        )
    units = np.sort(rng.choice(source.N, size=cfg.N, replace=False))
    start = int(rng.integers(0, source.T - width + 1))
    return source.rows(units).columns(start, start + width)


def run_experiment(source: Optional[PanelMatrix], cfg: ExperimentConfig) -> ExperimentReport:
    """Run the block-sampling protocol and aggregate errors per design and method.

    With ``source=None`` every block is a fresh draw from ``cfg.synthetic``.
    Otherwise each block takes ``N`` units without replacement and a uniform
    window of ``hist_T + T`` consecutive periods from ``source``.
    """
    taus = list(cfg.effect.taus)
    ell = cfg.effect.ell
    estimates = {(d, m): [] for d in cfg.designs for m in cfg.methods}
    failures = {(d, m): [] for d in cfg.designs for m in cfg.methods}
    for j in range(cfg.m_blocks):
        ss = block_seed(cfg.seed, j)
        data_ss, design_ss = ss.spawn(2)
        block = _sample_block(source, cfg, data_ss)
        hist = block.columns(0, cfg.hist_T) if cfg.hist_T >= 2 else None
        exp = block.columns(cfg.hist_T, cfg.hist_T + cfg.T)
        hblocks = _history_blocks(hist, cfg.T)
        dseed = int(design_ss.generate_state(1)[0])
        for tag in cfg.designs:
            try:
                design = build_design(tag, cfg, hist, dseed)
                observed = apply_synthetic_treatment(exp, design, cfg.effect)
            except RolloutError as exc:
                if not cfg.allow_failures:
                    raise RolloutError(f"block {j}, design {tag}: {exc}") from exc
                for m in cfg.methods:
                    failures[(tag, m)].append({"block": j, "error": str(exc)})
                continue
            for m in cfg.methods:
                try:
                    method = m
                    if m == "hist":
                        if hblocks is None:
                            raise RolloutError("method 'hist' needs hist_T >= T")
                        method = select_estimator(hblocks, design, cfg.effect, k0=cfg.k0, coding=cfg.coding)
                    kwargs = {"k0": cfg.k0, "coding": cfg.coding}
                    if method == "lrme":
                        kwargs["lrme_cfg"] = LrmeConfig(k0=cfg.k0, mu=_lrme_mu(cfg, design, hblocks))
                    res = estimate(observed, design, method, ell=ell, **kwargs)
                    estimates[(tag, m)].append(res.taus)
                except RolloutError as exc:
                    if not cfg.allow_failures:
                        raise RolloutError(f"block {j}, design {tag}, method {m}: {exc}") from exc
                    failures[(tag, m)].append({"block": j, "error": str(exc)})
    report = ExperimentReport(taus=taus, meta=_meta(cfg, source))
    for key, est in estimates.items():
        cell = summarize(np.array(est).reshape(len(est), ell + 1), taus)
        cell.failures = failures[key]
        report.cells[key] = cell
    return report


def _meta(cfg: ExperimentConfig, source) -> dict:
    return {
        "m_blocks": cfg.m_blocks,
        "N": cfg.N,
        "T": cfg.T,
        "hist_T": cfg.hist_T,
        "seed": cfg.seed,
        "designs": list(cfg.designs),
        "methods": list(cfg.methods),
        "coding": cfg.coding,
        "source": "synthetic" if source is None else "panel",
        "synthetic": asdict(cfg.synthetic) if source is None and cfg.synthetic else None,
    }


# ----------------------------------------------------------------- emission


_CSV_FIELDS = ["design", "method", "rmse", "mean_tau", "var_tau", "estimates", "failures"]


def emit_report(report: ExperimentReport, format: str = "json") -> str:
    """Serialize a report as JSON, CSV or a markdown table.

    Floats are written with full round-trip precision. The markdown table
    has one row per (method, design) pair.
    """
    if format == "json":
        return json.dumps(report.to_dict(), indent=2, sort_keys=True)
    rows = sorted(report.cells.items(), key=lambda kv: (kv[0][1], kv[0][0]))
    if format == "csv":
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(_CSV_FIELDS + ["taus", "meta"])
        for k, ((d, m), c) in enumerate(rows):
            w.writerow([
                d, m, repr(c.rmse), json.dumps(c.mean_tau), json.dumps(c.var_tau),
                json.dumps(c.estimates), json.dumps(c.failures),
                json.dumps(report.taus) if k == 0 else "",
                json.dumps(report.meta, sort_keys=True) if k == 0 else "",
            ])
        if not rows:
            w.writerow(["", "", "", "", "", "", "", json.dumps(report.taus), json.dumps(report.meta, sort_keys=True)])
        return buf.getvalue()
    if format == "markdown":
        lines = ["| method | design | RMSE | mean tau | var tau |", "|---|---|---|---|---|"]
        for (d, m), c in rows:
            mean = ", ".join(f"{x:.6g}" for x in c.mean_tau)
            var = ", ".join(f"{x:.6g}" for x in c.var_tau)
            lines.append(f"| {m} | {d} | {c.rmse:.6g} | {mean} | {var} |")
        return "\n".join(lines) + "\n"
    raise RolloutError(f"unknown report format {format!r}")


def parse_report(text: str, format: str = "json") -> ExperimentReport:
    """Inverse of :func:`emit_report` for the JSON and CSV forms."""
    if format == "json":
        return ExperimentReport.from_dict(json.loads(text))
    if format == "csv":
        reader = csv.DictReader(io.StringIO(text))
        taus, meta, cells = None, {}, {}
        for row in reader:
            if row["taus"]:
                taus = json.loads(row["taus"])
                meta = json.loads(row["meta"]) if row["meta"] else {}
            if not row["design"]:
                continue
            cells[(row["design"], row["method"])] = CellResult(
                rmse=float(row["rmse"]),
                mean_tau=json.loads(row["mean_tau"]),
                var_tau=json.loads(row["var_tau"]),
                estimates=json.loads(row["estimates"]),
                failures=json.loads(row["failures"]),
            )
        return ExperimentReport(taus=taus or [], cells=cells, meta=meta)
    raise RolloutError(f"cannot parse report format {format!r}")


__all__ = [
    "CellResult",
    "ExperimentConfig",
    "ExperimentReport",
    "SyntheticSource",
    "block_seed",
    "build_design",
    "emit_report",
    "generate_synthetic_panel",
    "parse_report",
    "run_experiment",
    "summarize",
]
