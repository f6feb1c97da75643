"""Command-line interface.

Every command prints JSON (or CSV for designs) on stdout. Failures print a
JSON object ``{"error": ..., "message": ...}`` on stderr and exit with
status 1; unexpected internal errors exit with status 3.
"""

from __future__ import annotations

import csv
import json
import sys

import click
import numpy as np

from rollout import designgen as dg
from rollout import objective as ob
from rollout.errors import RolloutError
from rollout.estimators import LrmeConfig, estimate
from rollout.harness import ExperimentConfig, SyntheticSource, emit_report, run_experiment
from rollout.panel import SyntheticEffect, load_panel, split_blocks
from rollout.tuner import SaConfig, grid_search_mu, kmeans_stratify, sa_search, select_estimator


def _echo_json(obj):
    click.echo(json.dumps(obj, indent=2, sort_keys=True, default=_default))


def _default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.integer, np.floating)):
        return o.item()
    raise TypeError(type(o).__name__)


def _effect(tau, taus, ell=None):
    """Injected effect from ``--tau``/``--taus``; ``--ell`` pads ``--tau`` with zero lags."""
    if taus:
        vals = [float(x) for x in taus.split(",")]
        if ell is not None and ell != len(vals) - 1:
            raise RolloutError(f"--ell {ell} disagrees with {len(vals)} values in --taus")
        return SyntheticEffect.carryover(vals)
    if ell:
        return SyntheticEffect.carryover([float(tau)] + [0.0] * ell)
    return SyntheticEffect.direct(float(tau))


def _read_matrix_csv(path):
    with open(path, newline="") as fh:
        rows = [r for r in csv.reader(fh) if any(c.strip() for c in r)]
    try:
        return np.array([[float(c) for c in r] for r in rows])
    except ValueError:
        return np.array([[float(c) for c in r] for r in rows[1:]])


def _read_path_csv(path):
    """Fraction path: a single column (optional header) or a single row."""
    with open(path, newline="") as fh:
        rows = [r for r in csv.reader(fh) if any(c.strip() for c in r)]
    vals = []
    for r in rows:
        for c in r:
            c = c.strip()
            if not c:
                continue
            try:
                vals.append(float(c))
            except ValueError:
                if vals:
                    raise RolloutError(f"{path}: non-numeric path entry {c!r}") from None
    return np.array(vals)


def _history_blocks(hist, hist_format, blockT, m, stride):
    panel = load_panel(hist, hist_format)
    if m is None:
        m = (panel.T - blockT) // stride + 1
    return panel, split_blocks(panel, blockT, m, stride)


@click.group()
@click.version_option(package_name="artifact")
def main():
    """Staggered-rollout designs, estimators and design search."""


# ------------------------------------------------------------------ design

@main.command("design")
@click.argument("kind", type=click.Choice(["opt", "opt-co", "d-opt", "ff", "ba", "ffba", "reversible"]))
@click.option("--N", "N", type=int, required=True, help="Number of units.")
@click.option("--T", "T", type=int, required=True, help="Number of periods.")
@click.option("--ell", type=int, default=0, show_default=True, help="Carryover lags.")
@click.option("--strata", type=click.Path(exists=True), help="CSV with header unit,stratum.")
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--format", "fmt", type=click.Choice(["matrix", "adoption"]), default="matrix", show_default=True)
@click.option("--reversible-kind", type=click.Choice(["time", "unit", "twoway", "stratified"]), default="twoway", show_default=True)
@click.option("--out", type=click.Path(), help="Write the design here instead of stdout.")
def design_cmd(kind, N, T, ell, strata, seed, fmt, reversible_kind, out):
    """Build a design and write it as CSV."""
    strat = dg.load_stratification(strata) if strata else None
    if kind == "reversible":
        d = dg.reversible_design(reversible_kind, N, T, strat, seed)
    elif kind in ("ff", "ba", "ffba"):
        d = dg.benchmark_design(kind, N, T, seed)
    else:
        if kind == "opt":
            path = dg.optimal_linear_path(T)
        elif kind == "opt-co":
            path = dg.optimal_carryover_path(dg.CarryoverDesignSpec(ell, T))
        else:
            path = dg.d_optimal_path(dg.CarryoverDesignSpec(ell, T))
        if strat is not None:
            if strat.N != N:
                raise RolloutError("strata file does not match --N")
            d = dg.stratified_design(path, strat, seed)
        else:
            d = dg.realize_design(dg.round_counts(path, N), N, seed)
        for f in path.flags:
            click.echo(json.dumps({"warning": f}), err=True)
    dg.save_design(d, out or click.get_text_stream("stdout"), fmt)


# --------------------------------------------------------------- objective

@main.group("objective")
def objective_grp():
    """Evaluate relaxed objectives."""


@objective_grp.command("eval")
@click.option("--path", "path_file", type=click.Path(exists=True), required=True, help="CSV with one fraction per period.")
@click.option("--ell", type=int, default=0, show_default=True)
@click.option("--N", "N", type=int, default=None, help="Also report the precision matrix for N units.")
def objective_eval(path_file, ell, N):
    """Relaxed objective, gradient norm and first-order residual of a path."""
    w = _read_path_csv(path_file)
    rep = ob.kkt_check(w, ell)
    out = {
        "value": rep.value,
        "gradient_norm": rep.gradient_norm,
        "kkt_residual": rep.kkt_residual,
        "min_multiplier": rep.min_multiplier,
    }
    if N is not None and w.size > ell + 1:
        out["theta"] = ob.carryover_theta(w, ell, N)
    _echo_json(out)


@main.group("oracle")
def oracle_grp():
    """Exhaustive reference searches."""


@oracle_grp.command("enumerate")
@click.option("--N", "N", type=int, required=True)
@click.option("--T", "T", type=int, required=True)
@click.option("--ell", type=int, default=0, show_default=True)
@click.option("--factor-loadings", type=click.Path(exists=True), help="CSV of the N x k loading matrix.")
@click.option("--sigma2", type=float, default=1.0, show_default=True)
def oracle_enumerate(N, T, ell, factor_loadings, sigma2):
    """Best treated-count sequence by exhaustive enumeration."""
    U = _read_matrix_csv(factor_loadings) if factor_loadings else None
    counts, value = ob.brute_force_optimum(N, T, ob.ErrorCovarianceSpec(sigma2, U), ell)
    _echo_json({"counts": counts, "value": value})


# ---------------------------------------------------------------- estimate

@main.command("estimate")
@click.option("--panel", type=click.Path(exists=True), required=True)
@click.option("--panel-format", type=click.Choice(["long", "wide"]), default="long", show_default=True)
@click.option("--design", type=click.Path(exists=True), required=True)
@click.option("--method", type=click.Choice(["ols", "gls", "lrme"]), default="ols", show_default=True)
@click.option("--ell", type=int, default=0, show_default=True)
@click.option("--k0", type=int, default=1, show_default=True)
@click.option("--mu", type=float, default=0.0, show_default=True)
@click.option("--coding", type=click.Choice(["binary", "signed"]), default="binary", show_default=True)
def estimate_cmd(panel, panel_format, design, method, ell, k0, mu, coding):
    """Estimate effects from an observed panel and its design."""
    p = load_panel(panel, panel_format)
    d = dg.load_design(design, T=p.T)
    res = estimate(p, d, method, ell=ell, k0=k0, mu=mu, coding=coding)
    _echo_json(res.to_dict())


# ----------------------------------------------------------------- search

_hist_options = [
    click.option("--hist", type=click.Path(exists=True), required=True, help="Historical control panel CSV."),
    click.option("--hist-format", type=click.Choice(["long", "wide"]), default="long", show_default=True),
    click.option("--blockT", "blockT", type=int, required=True, help="Periods per history block."),
    click.option("--m", type=int, default=None, help="Number of blocks (default: as many as fit)."),
    click.option("--stride", type=int, default=1, show_default=True),
    click.option("--tau", type=float, default=0.0, show_default=True),
    click.option("--taus", type=str, default=None, help="Comma-separated carryover effects."),
    click.option("--ell", type=int, default=None, help="Carryover lags of the injected effect."),
    click.option("--seed", type=int, default=0, show_default=True),
]


def _with_hist(f):
    for opt in reversed(_hist_options):
        f = opt(f)
    return f


@main.group("search")
def search_grp():
    """Data-driven design search."""


@search_grp.command("sa")
@_with_hist
@click.option("--method", type=click.Choice(["ols", "gls", "lrme"]), default="ols", show_default=True)
@click.option("--steps", type=int, default=5000, show_default=True)
@click.option("--k0", type=int, default=1, show_default=True)
@click.option("--mu", type=float, default=0.0, show_default=True)
@click.option("--out", type=click.Path(), help="Write the best design CSV here.")
@click.option("--format", "fmt", type=click.Choice(["matrix", "adoption"]), default="adoption", show_default=True)
def search_sa(hist, hist_format, blockT, m, stride, tau, taus, ell, seed, method, steps, k0, mu, out, fmt):
    """Row-swap annealing from the rounded linear design."""
    panel, blocks = _history_blocks(hist, hist_format, blockT, m, stride)
    effect = _effect(tau, taus, ell)
    start = dg.optimal_design(panel.N, blockT, seed)
    kwargs = {}
    if method == "gls":
        kwargs["k0"] = k0
    if method == "lrme":
        kwargs["lrme_cfg"] = LrmeConfig(k0=k0, mu=mu)
    res = sa_search(start, blocks, SaConfig(steps_max=steps, tau_synth=effect, seed=seed), method, **kwargs)
    if out:
        dg.save_design(res.design, out, fmt)
    adoption = [int(np.argmax(r > 0)) + 1 if np.any(r > 0) else None for r in res.design.entries]
    _echo_json({
        "max_error": res.max_error,
        "start_error": res.start_error,
        "steps": len(res.trace) + 1,
        "adoption": adoption,
    })


@search_grp.command("kmeans")
@click.option("--hist", type=click.Path(exists=True), required=True)
@click.option("--hist-format", type=click.Choice(["long", "wide"]), default="long", show_default=True)
@click.option("--K", "K", type=int, required=True)
@click.option("--seed", type=int, default=0, show_default=True)
def search_kmeans(hist, hist_format, K, seed):
    """Cluster units on the leading singular vectors of the history."""
    panel = load_panel(hist, hist_format)
    strat = kmeans_stratify(panel, K, seed)
    _echo_json({"units": list(map(str, panel.unit_ids)), "labels": strat.labels})


@main.group("tune")
def tune_grp():
    """Tuning-parameter search."""


@tune_grp.command("mu")
@_with_hist
@click.option("--grid", type=int, default=20, show_default=True)
@click.option("--mu-min", type=float, default=1e-3, show_default=True)
@click.option("--mu-max", type=float, default=1e2, show_default=True)
@click.option("--k0", type=int, default=1, show_default=True)
def tune_mu(hist, hist_format, blockT, m, stride, tau, taus, ell, seed, grid, mu_min, mu_max, k0):
    """Grid search of the LRME threshold on history blocks."""
    panel, blocks = _history_blocks(hist, hist_format, blockT, m, stride)
    design = dg.optimal_design(panel.N, blockT, seed)
    mu, scores = grid_search_mu(blocks, design, _effect(tau, taus, ell), (mu_min, mu_max), grid, k0, return_scores=True)
    _echo_json({"mu": mu, "scores": [{"mu": a, "max_error": b} for a, b in scores]})


@main.group("select")
def select_grp():
    """Estimator selection."""


@select_grp.command("estimator")
@_with_hist
@click.option("--candidates", type=str, default="ols,gls,lrme", show_default=True)
@click.option("--k0", type=int, default=1, show_default=True)
def select_est(hist, hist_format, blockT, m, stride, tau, taus, ell, seed, candidates, k0):
    """Estimator with the smallest worst-case error on history blocks."""
    panel, blocks = _history_blocks(hist, hist_format, blockT, m, stride)
    design = dg.optimal_design(panel.N, blockT, seed)
    best, scores = select_estimator(blocks, design, _effect(tau, taus, ell), candidates.split(","), return_scores=True, k0=k0)
    _echo_json({"method": best, "scores": scores})


# --------------------------------------------------------------- simulate

@main.command("simulate")
@click.option("--source", type=click.Path(exists=True), help="Source panel CSV (long format).")
@click.option("--source-format", type=click.Choice(["long", "wide"]), default="long", show_default=True)
@click.option("--synthetic", type=str, help="e.g. model=factor,k=1,sigma=1.0")
@click.option("--N", "N", type=int, required=True)
@click.option("--T", "T", type=int, required=True)
@click.option("--histT", "histT", type=int, default=0, show_default=True)
@click.option("--m", type=int, required=True)
@click.option("--tau", type=float, default=-0.01, show_default=True)
@click.option("--taus", type=str, default=None)
@click.option("--designs", type=str, default="opt,ff,ba,ffba", show_default=True)
@click.option("--methods", type=str, default="ols,gls,lrme", show_default=True)
@click.option("--k0", type=int, default=1, show_default=True)
@click.option("--mu", type=float, default=None, help="LRME threshold; tuned on history when omitted.")
@click.option("--sa-steps", type=int, default=500, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--allow-failures", is_flag=True, help="Record failed blocks instead of aborting.")
@click.option("--out", type=click.Path(), help="Write the report here.")
@click.option("--format", "fmt", type=click.Choice(["json", "csv", "markdown"]), default="json", show_default=True)
def simulate(source, source_format, synthetic, N, T, histT, m, tau, taus, designs, methods, k0, mu, sa_steps, seed, allow_failures, out, fmt):
    """Run the synthetic-experiment protocol and report RMSE per design and method."""
    if bool(source) == bool(synthetic):
        raise RolloutError("give exactly one of --source and --synthetic")
    panel = load_panel(source, source_format) if source else None
    cfg = ExperimentConfig(
        m_blocks=m, N=N, T=T, effect=_effect(tau, taus),
        designs=[d.strip() for d in designs.split(",") if d.strip()],
        methods=[x.strip() for x in methods.split(",") if x.strip()],
        hist_T=histT, seed=seed,
        synthetic=SyntheticSource.parse(synthetic) if synthetic else None,
        k0=k0, lrme_mu=mu, sa=SaConfig(steps_max=sa_steps), allow_failures=allow_failures,
    )
    report = run_experiment(panel, cfg)
    text = emit_report(report, fmt)
    if out:
        with open(out, "w") as fh:
            fh.write(text)
        click.echo(emit_report(report, "markdown"))
    else:
        click.echo(text)


def run(argv=None):
    """Entry point that converts errors into JSON on stderr."""
    try:
        main.main(args=argv, standalone_mode=False)
    except click.exceptions.Abort:
        sys.exit(1)
    except click.ClickException as exc:
        click.echo(json.dumps({"error": "usage", "message": exc.format_message()}), err=True)
        sys.exit(2)
    except RolloutError as exc:
        click.echo(json.dumps(exc.to_dict()), err=True)
        sys.exit(1)
    except (OSError, ValueError) as exc:
        click.echo(json.dumps({"error": type(exc).__name__, "message": str(exc)}), err=True)
        sys.exit(1)
    except Exception as exc:  # noqa: BLE001
        click.echo(json.dumps({"error": "internal", "message": f"{type(exc).__name__}: {exc}"}), err=True)
        sys.exit(3)
    sys.exit(0)


if __name__ == "__main__":
    run()
