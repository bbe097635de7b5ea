"""Figure rendering: one plot per experiment type, reproducible bytes."""

from __future__ import annotations

import pytest

from combatkit.errors import SchemaError
from combatkit.evaluate import (
    ExperimentReport,
    run_age_window_curve,
    run_bias_grid,
    run_nu_sweep,
    run_sample_size_curve,
)
from combatkit.plots import render_report
from combatkit.synth import BiasSpec, default_reference_spec
from combatkit.types import Hyperparameters

_SPEC = default_reference_spec(n_subjects=80, n_bundles=1)
_FIXED = Hyperparameters(lam=0.0, nu=0.0)
_BIAS = BiasSpec(A=1.1, S=0.5, M=1.25)


def _reports():
    yield run_bias_grid(
        _SPEC, _FIXED, S_values=(0.5, 1.5), M_values=(1.0,),
        methods=("clinical", "none"), n_moving=20, repetitions=2, base_seed=3,
    )
    yield run_sample_size_curve(
        _SPEC, _BIAS, _FIXED, sizes=(8, 16), methods=("clinical",),
        pool_size=30, repetitions=2, base_seed=3,
    )
    yield run_age_window_curve(
        _SPEC, _BIAS, _FIXED, window_centers=(52.5,), half_width=15.0,
        n_train=10, methods=("clinical",), pool_size=60, repetitions=2,
        base_seed=3,
    )
    yield run_nu_sweep(
        _SPEC, BiasSpec(M=1.5), Hyperparameters(lam=0.0),
        nu_values=(0.0, 10.0), n_moving=8, test_size=100, repetitions=2,
        base_seed=3,
    )


def test_every_experiment_renders_a_reproducible_png(tmp_path):
    for report in _reports():
        first = tmp_path / f"{report.experiment_id}_1.png"
        second = tmp_path / f"{report.experiment_id}_2.png"
        assert render_report(report, str(first)) == str(first)
        render_report(report, str(second))
        data = first.read_bytes()
        assert data[:8] == b"\x89PNG\r\n\x1a\n"
        assert data == second.read_bytes()


def test_unknown_experiment_has_no_figure(tmp_path):
    report = ExperimentReport("mystery", {}, 1, ())
    with pytest.raises(SchemaError, match="mystery"):
        render_report(report, str(tmp_path / "x.png"))
