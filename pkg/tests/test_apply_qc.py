"""Behavior of apply(), rectification, and the QC overlap score."""

import math

import numpy as np
import pytest

from combatkit.basis import build_basis, expand_basis
from combatkit.errors import DegenerateVariance, SchemaError, UnknownRegion
from combatkit.harmonize import (
    SOURCE_MOVING_HARMONIZED,
    SOURCE_REFERENCE,
    apply,
    bhattacharyya_gaussian,
    fit_bundle,
    harmonize_dataset,
    qc_bhattacharyya,
    rectify,
)
from combatkit.types import (
    CovariateVector,
    HarmonizationBundle,
    Hyperparameters,
    RegionModel,
    SubjectRecord,
)

from conftest import make_dataset
from oracles import bhattacharyya_quadrature


def _manual_bundle(var_ref=1.0, var_mov=1.0):
    ref = make_dataset("ref", [20.0, 40.0, 60.0, 80.0], {"r0": np.zeros(4)})
    basis = build_basis(ref, degree=1)
    model = RegionModel(
        region_id="r0",
        beta_ref=(2.0, 0.5),
        var_ref=var_ref,
        beta_mov=(1.0, -0.25),
        var_mov=var_mov,
        basis=basis,
    )
    bundle = HarmonizationBundle(
        reference_site_id="ref",
        moving_site_id="mov",
        metric_name="md",
        hyper=Hyperparameters(degree=1, lam=0.0),
        models={"r0": model},
        qc={"r0": 0.0},
        tuned_lambda={},
    )
    return bundle, basis, model


def _subject(age, value, region="r0"):
    return SubjectRecord("s0", CovariateVector(("age",), (age,)), {region: value})


def test_on_curve_subject_lands_on_reference_curve():
    bundle, basis, model = _manual_bundle()
    phi = expand_basis(CovariateVector(("age",), (37.0,)), basis)
    on_curve = float(phi @ np.array(model.beta_mov))
    out = apply(bundle, [_subject(37.0, on_curve)])
    expected = float(phi @ np.array(model.beta_ref))
    assert out[0].metrics["r0"] == pytest.approx(expected, rel=0, abs=0)


def test_scale_modes_differ_as_documented():
    bundle, basis, model = _manual_bundle(var_ref=4.0, var_mov=1.0)
    phi = expand_basis(CovariateVector(("age",), (50.0,)), basis)
    resid = 0.3
    y = float(phi @ np.array(model.beta_mov)) + resid
    ref_fit = float(phi @ np.array(model.beta_ref))
    out_std = apply(bundle, [_subject(50.0, y)], scale_mode="std")
    out_var = apply(bundle, [_subject(50.0, y)], scale_mode="variance")
    assert out_std[0].metrics["r0"] == pytest.approx(ref_fit + resid * 2.0)
    assert out_var[0].metrics["r0"] == pytest.approx(ref_fit + resid * 4.0)
    with pytest.raises(SchemaError):
        apply(bundle, [_subject(50.0, y)], scale_mode="zscore")


def test_zero_variance_with_zero_residual_returns_curve():
    bundle, basis, model = _manual_bundle(var_mov=0.0)
    phi = expand_basis(CovariateVector(("age",), (44.0,)), basis)
    on_curve = float(phi @ np.array(model.beta_mov))
    out = apply(bundle, [_subject(44.0, on_curve)])
    assert out[0].metrics["r0"] == pytest.approx(float(phi @ np.array(model.beta_ref)))


def test_zero_variance_with_residual_raises():
    bundle, _, model = _manual_bundle(var_mov=0.0)
    with pytest.raises(DegenerateVariance):
        apply(bundle, [_subject(44.0, 123.456)])


def test_unknown_region_rejected():
    bundle, _, _ = _manual_bundle()
    with pytest.raises(UnknownRegion):
        apply(bundle, [_subject(44.0, 1.0, region="r_missing")])


def test_self_harmonization_is_identity(tiny_pair):
    ref, _ = tiny_pair
    clone = make_dataset(
        "mov",
        [r.covariates.values[0] for r in ref.records],
        {"r0": [r.metrics["r0"] for r in ref.records]},
    )
    bundle = fit_bundle(ref, clone, Hyperparameters(degree=2, lam=0.0))
    out = harmonize_dataset(bundle, clone)
    for before, after in zip(clone.records, out.records):
        assert after.metrics["r0"] == pytest.approx(before.metrics["r0"], rel=1e-8)
    assert bundle.qc["r0"] < 1e-6


def test_rectified_residuals_population_moments():
    vals = (1.0, 2.0, 3.0, 6.0)
    ref = make_dataset("ref", [20.0, 30.0, 40.0, 50.0], {"r0": vals})
    basis = build_basis(ref, degree=0)
    res = rectify(list(ref.records), "r0", np.array([0.0]), basis, SOURCE_REFERENCE)
    assert res.source == SOURCE_REFERENCE
    assert res.values == vals
    assert res.mean() == pytest.approx(3.0)
    # population variance, not the (n-1) sample flavor
    assert res.variance() == pytest.approx(np.mean((np.array(vals) - 3.0) ** 2))


def test_rectify_rejects_missing_region():
    ref = make_dataset("ref", [20.0, 30.0], {"r0": [1.0, 2.0]})
    basis = build_basis(ref, degree=0)
    stripped = [
        SubjectRecord("x", ref.records[0].covariates, {"other": 1.0}),
    ]
    with pytest.raises(UnknownRegion):
        rectify(stripped, "r0", np.array([0.0]), basis, SOURCE_MOVING_HARMONIZED)


def test_overlap_closed_forms():
    # unit mean shift at unit variances: quadratic term only
    assert bhattacharyya_gaussian(0.0, 1.0, 1.0, 1.0) == 0.125
    # pure scale mismatch sigma_b = 2 sigma_a: spread term only
    want = 0.5 * math.log(5.0 / 4.0)
    assert want == pytest.approx(0.11157177565710488, abs=1e-16)
    assert bhattacharyya_gaussian(3.0, 1.0, 3.0, 4.0) == pytest.approx(
        want, abs=1e-15
    )


def test_overlap_matches_quadrature_oracle():
    gen = np.random.default_rng(60)
    for _ in range(12):
        ma, mb = gen.normal(0, 2, size=2)
        va, vb = gen.uniform(0.2, 5.0, size=2)
        closed = bhattacharyya_gaussian(ma, va, mb, vb)
        numeric = bhattacharyya_quadrature(ma, va, mb, vb)
        assert closed == pytest.approx(numeric, abs=1e-6)


def test_overlap_identical_populations_is_zero():
    assert bhattacharyya_gaussian(0.7, 1.3, 0.7, 1.3) <= 1e-12
    assert bhattacharyya_gaussian(0.7, 1.3, 0.7, 1.3) >= 0.0


def test_overlap_requires_positive_variances():
    with pytest.raises(DegenerateVariance):
        bhattacharyya_gaussian(0.0, 0.0, 0.0, 1.0)
    with pytest.raises(DegenerateVariance):
        bhattacharyya_gaussian(0.0, 1.0, 0.0, -2.0)


def test_qc_zero_for_identical_populations():
    gen = np.random.default_rng(3)
    ages = gen.uniform(20, 80, 50)
    vals = 1.0 + 0.01 * ages + gen.normal(0, 0.1, 50)
    ref = make_dataset("ref", ages, {"r0": vals})
    basis = build_basis(ref, degree=1)
    beta = np.array([1.3, 0.2])
    d = qc_bhattacharyya(ref, list(ref.records), "r0", beta, basis)
    assert 0.0 <= d <= 1e-12


def test_qc_grows_with_mean_offset():
    gen = np.random.default_rng(4)
    ages = gen.uniform(20, 80, 80)
    vals = 1.0 + 0.01 * ages + gen.normal(0, 0.1, 80)
    ref = make_dataset("ref", ages, {"r0": vals})
    basis = build_basis(ref, degree=1)
    beta = np.array([0.0, 0.0])
    shifted_small = [
        SubjectRecord(r.subject_id, r.covariates, {"r0": r.metrics["r0"] + 0.05})
        for r in ref.records
    ]
    shifted_large = [
        SubjectRecord(r.subject_id, r.covariates, {"r0": r.metrics["r0"] + 0.5})
        for r in ref.records
    ]
    d_small = qc_bhattacharyya(ref, shifted_small, "r0", beta, basis)
    d_large = qc_bhattacharyya(ref, shifted_large, "r0", beta, basis)
    assert 0.0 < d_small < d_large
