"""Figure rendering for experiment reports.

One PNG per experiment type, drawn from the aggregates already stored in the
report (no recomputation). The CLI calls render_report next to wherever it
writes the delimited output; the library never renders implicitly.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt

from .errors import SchemaError
from .evaluate import (
    EXPERIMENT_AGE_WINDOW,
    EXPERIMENT_BIAS_GRID,
    EXPERIMENT_NU_SWEEP,
    EXPERIMENT_SAMPLE_SIZE,
    ExperimentReport,
)

_METHOD_STYLE = {
    "clinical": {"color": "tab:blue", "marker": "o"},
    "eb": {"color": "tab:orange", "marker": "s"},
    "none": {"color": "tab:gray", "marker": "x"},
}


def _style(method: str) -> dict:
    return _METHOD_STYLE.get(method, {"color": "tab:green", "marker": "d"})


def _series(report: ExperimentReport, method: str, x_key: str, metric: str):
    """Sorted (x, mean, std) triples for one method, skipping failed cells."""
    pts = []
    for cond in report.conditions:
        if cond.error is not None or cond.condition.get("method") != method:
            continue
        if x_key not in cond.condition or metric not in cond.aggregate:
            continue
        mean, std = cond.aggregate[metric]
        pts.append((cond.condition[x_key], mean, std))
    pts.sort(key=lambda p: p[0])
    return pts


def _methods_in(report: ExperimentReport) -> list[str]:
    seen = []
    for cond in report.conditions:
        m = cond.condition.get("method")
        if m is not None and m not in seen:
            seen.append(m)
    return seen


def _plot_bias_grid(report: ExperimentReport, ax_grid) -> None:
    m_values = report.parameters["M_values"]
    for ax, m_val in zip(ax_grid, m_values):
        for method in _methods_in(report):
            pts = [
                (c.condition["S"], c.aggregate["rmse"][0])
                for c in report.conditions
                if c.error is None
                and c.condition.get("method") == method
                and c.condition.get("M") == m_val
                and "rmse" in c.aggregate
            ]
            pts.sort()
            if pts:
                ax.plot(
                    [p[0] for p in pts],
                    [p[1] for p in pts],
                    label=method,
                    **_style(method),
                )
        ax.set_title(f"M = {m_val:g}")
        ax.set_xlabel("slope multiplier S")
        ax.set_yscale("log")
    ax_grid[0].set_ylabel("RMSE to unbiased values")
    ax_grid[0].legend()


def _plot_curve(report, ax, x_key: str, x_label: str, metric="rmse") -> None:
    for method in _methods_in(report):
        pts = _series(report, method, x_key, metric)
        if not pts:
            continue
        xs = [p[0] for p in pts]
        means = [p[1] for p in pts]
        stds = [p[2] for p in pts]
        ax.errorbar(xs, means, yerr=stds, label=method, capsize=3, **_style(method))
    ax.set_xlabel(x_label)
    ax.set_ylabel(metric)
    ax.set_yscale("log")
    ax.legend()


def _plot_nu_sweep(report: ExperimentReport, ax) -> None:
    pts = _series(report, "clinical", "nu", "std_ratio")
    if pts:
        xs = [p[0] for p in pts]
        ax.errorbar(
            xs,
            [p[1] for p in pts],
            yerr=[p[2] for p in pts],
            capsize=3,
            **_style("clinical"),
        )
        ax.axhspan(0.9, 1.1, color="tab:green", alpha=0.15, label="target band")
        ax.axhline(1.0, color="k", linewidth=0.8)
        ax.set_xscale("symlog", linthresh=1.0)
    ax.set_xlabel("variance blend weight nu")
    ax.set_ylabel("harmonized / reference residual std")
    ax.legend()


def render_report(report: ExperimentReport, out_path: str) -> str:
    """Write the figure matching the report's experiment type to out_path."""
    if report.experiment_id == EXPERIMENT_BIAS_GRID:
        n = len(report.parameters["M_values"])
        fig, axes = plt.subplots(1, n, figsize=(4.5 * n, 4), squeeze=False)
        _plot_bias_grid(report, axes[0])
    elif report.experiment_id == EXPERIMENT_SAMPLE_SIZE:
        fig, ax = plt.subplots(figsize=(6, 4))
        _plot_curve(report, ax, "size", "training subjects")
    elif report.experiment_id == EXPERIMENT_AGE_WINDOW:
        fig, ax = plt.subplots(figsize=(6, 4))
        _plot_curve(report, ax, "center", "window center (years)")
    elif report.experiment_id == EXPERIMENT_NU_SWEEP:
        fig, ax = plt.subplots(figsize=(6, 4))
        _plot_nu_sweep(report, ax)
    else:
        raise SchemaError(f"no figure defined for experiment '{report.experiment_id}'")
    fig.suptitle(report.experiment_id)
    fig.tight_layout()
    # Pin the PNG Software chunk: the default embeds the matplotlib version,
    # which would break byte-for-byte reproducibility across environments.
    fig.savefig(out_path, dpi=120, metadata={"Software": "combatkit"})
    plt.close(fig)
    return out_path
