"""Pairwise site harmonization with shrinkage toward a reference fit.

The reference site is fit by ordinary least squares on the expanded basis.
The moving site is fit by ridge regression whose penalty pulls coefficients
toward the reference coefficients instead of toward zero, so a tiny moving
sample degrades gracefully into "reuse the reference curve".  Harmonized
values rescale moving residuals to the reference residual spread and re-add
the reference curve.

Everything here is per region and per metric; regions never interact, which
is what makes thread-level parallelism in fit_bundle safe and bit-exact.
"""

from __future__ import annotations

import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .basis import build_basis, design_matrix, expand_basis, expand_raw
from .errors import (
    CombatError,
    CovariateMismatch,
    DegenerateVariance,
    InsufficientData,
    RegionMismatch,
    SchemaError,
    SingularDesign,
    UnknownRegion,
)
from .types import (
    BasisSpec,
    HarmonizationBundle,
    Hyperparameters,
    RegionModel,
    SiteDataset,
    SubjectRecord,
)

# Condition number at or above which a normal-equations matrix is treated as
# numerically singular.
COND_LIMIT = 1e12

# Relative curve separation below which the tuner declares the two sites
# indistinguishable and stops widening the penalty.
_TUNE_DEGENERATE_REL = 1e-12

SOURCE_REFERENCE = "reference"
SOURCE_MOVING_HARMONIZED = "moving_harmonized"


@dataclass(frozen=True)
class RectifiedResiduals:
    """Metric values with the reference covariate trend subtracted off."""

    values: tuple[float, ...]
    source: str

    def __post_init__(self):
        if self.source not in (SOURCE_REFERENCE, SOURCE_MOVING_HARMONIZED):
            raise SchemaError(f"unknown residual source '{self.source}'")
        if len(self.values) == 0:
            raise InsufficientData("rectified residual population is empty")
        arr = np.asarray(self.values, dtype=float)
        if not np.all(np.isfinite(arr)):
            raise SchemaError("rectified residuals must be finite")

    def mean(self) -> float:
        return float(np.mean(np.asarray(self.values, dtype=float)))

    def variance(self) -> float:
        """Population (1/J) variance; small-sample QC stays well defined."""
        arr = np.asarray(self.values, dtype=float)
        return float(np.mean((arr - arr.mean()) ** 2))


@dataclass(frozen=True)
class TuneDiagnostics:
    """Curve-separation measurements from the penalty search.

    d_min / d_max are taken where the moving subjects actually sit; d_1 / d_2
    extend the sweep over a dense grid of the first covariate, so
    d_1 <= d_min <= d_max <= d_2 always holds.  lambda_trace records every
    penalty scale visited together with its acceptance score (0 means both
    separation tests passed).
    """

    d_min: float
    d_max: float
    d_1: float
    d_2: float
    lambda_trace: tuple[tuple[float, int], ...]
    converged: bool

    def __post_init__(self):
        if not (self.d_1 <= self.d_min <= self.d_max <= self.d_2):
            raise SchemaError(
                "curve separation ordering violated: "
                f"d_1={self.d_1} d_min={self.d_min} "
                f"d_max={self.d_max} d_2={self.d_2}"
            )
        if len(self.lambda_trace) == 0:
            raise SchemaError("penalty search trace is empty")


# ---------------------------------------------------------------------------
# array-level fits (the public ops wrap these with dataset plumbing)
# ---------------------------------------------------------------------------


def _solve_normal(A: np.ndarray, rhs: np.ndarray, what: str) -> np.ndarray:
    cond = np.linalg.cond(A)
    if not np.isfinite(cond) or cond >= COND_LIMIT:
        raise SingularDesign(
            f"{what}: normal-equations condition number {cond:.3e} "
            f"exceeds {COND_LIMIT:.0e}"
        )
    return np.linalg.solve(A, rhs)


def _fit_reference_arrays(Phi: np.ndarray, y: np.ndarray) -> tuple[np.ndarray, float]:
    J, p = Phi.shape
    if J <= p:
        raise InsufficientData(
            f"reference fit needs more subjects ({J}) than basis functions ({p})"
        )
    beta = _solve_normal(Phi.T @ Phi, Phi.T @ y, "reference fit")
    resid = y - Phi @ beta
    var = float(np.mean(resid**2))
    return beta, var


def _fit_moving_arrays(
    Phi: np.ndarray,
    y: np.ndarray,
    beta_ref: np.ndarray,
    var_ref: float,
    lam: np.ndarray,
    nu: float,
) -> tuple[np.ndarray, float]:
    J, p = Phi.shape
    if J < 1:
        raise InsufficientData("moving fit needs at least one subject")
    A = Phi.T @ Phi + np.diag(lam)
    rhs = Phi.T @ y + lam * beta_ref
    if np.min(lam) > 0.0:
        # diag(lam) is positive definite, so A is too; skip the cond probe.
        beta = np.linalg.solve(A, rhs)
    else:
        beta = _solve_normal(A, rhs, "moving fit")
    resid = y - Phi @ beta
    d2 = float(np.mean(resid**2))
    if nu == 0.0:
        var = d2
    else:
        var = (J * d2 + nu * var_ref) / (J + nu)
    return beta, float(var)


# ---------------------------------------------------------------------------
# public per-region operations
# ---------------------------------------------------------------------------


def fit_reference(
    reference: SiteDataset, region_id: str, basis: BasisSpec
) -> tuple[np.ndarray, float]:
    """OLS coefficients and mean squared residual for one reference region."""
    Phi = design_matrix(reference, basis)
    y = reference.metric_vector(region_id)
    return _fit_reference_arrays(Phi, y)


def fit_moving(
    moving: SiteDataset,
    region_id: str,
    basis: BasisSpec,
    beta_ref: np.ndarray,
    var_ref: float,
    lam: np.ndarray,
    nu: float,
) -> tuple[np.ndarray, float]:
    """Penalized moving-site fit pulled toward the reference coefficients.

    lam is the per-component penalty vector; nu is the pseudo-count weight
    that blends the moving residual variance with var_ref.  nu = 0 returns
    the moving variance untouched, and the blend approaches var_ref as
    nu grows.
    """
    Phi = design_matrix(moving, basis)
    y = moving.metric_vector(region_id)
    beta_ref = np.asarray(beta_ref, dtype=float)
    lam = np.asarray(lam, dtype=float)
    if lam.shape != beta_ref.shape or beta_ref.shape != (basis.feature_dim,):
        raise CovariateMismatch(
            f"penalty/coefficient length must equal feature_dim={basis.feature_dim}"
        )
    if np.any(lam < 0) or not np.all(np.isfinite(lam)):
        raise SchemaError("penalty vector must be finite and nonnegative")
    if nu < 0:
        raise SchemaError("nu must be nonnegative")
    return _fit_moving_arrays(Phi, y, beta_ref, var_ref, lam, nu)


def _harmonize_values(
    y: np.ndarray,
    Phi: np.ndarray,
    model: RegionModel,
    scale_mode: str,
) -> np.ndarray:
    beta_mov = np.asarray(model.beta_mov, dtype=float)
    beta_ref = np.asarray(model.beta_ref, dtype=float)
    resid = y - Phi @ beta_mov
    if model.var_mov == 0.0:
        if np.any(resid != 0.0):
            raise DegenerateVariance(
                f"region '{model.region_id}': moving variance is zero but "
                "residuals are not"
            )
        scaled = resid
    elif scale_mode == "std":
        scaled = resid * math.sqrt(model.var_ref / model.var_mov)
    elif scale_mode == "variance":
        scaled = resid * (model.var_ref / model.var_mov)
    else:
        raise SchemaError(f"unknown scale_mode '{scale_mode}'")
    return scaled + Phi @ beta_ref


def apply(
    bundle: HarmonizationBundle,
    subjects: list[SubjectRecord],
    scale_mode: str = "std",
) -> list[SubjectRecord]:
    """Map subjects from the moving site onto the reference distribution.

    Every region present in a subject must exist in the bundle.  scale_mode
    "std" matches residual standard deviations; "variance" matches raw
    variance ratios instead and is kept for comparison runs.
    """
    if scale_mode not in ("std", "variance"):
        raise SchemaError(f"unknown scale_mode '{scale_mode}'")
    basis = bundle.basis
    params: dict[str, RegionModel] = dict(bundle.models)
    out = []
    for rec in subjects:
        phi = expand_basis(rec.covariates, basis)
        new_metrics = {}
        for region_id, value in rec.metrics.items():
            model = params.get(region_id)
            if model is None:
                raise UnknownRegion(
                    f"subject '{rec.subject_id}' has region '{region_id}' "
                    "not present in the bundle"
                )
            y = np.array([value], dtype=float)
            new_metrics[region_id] = float(
                _harmonize_values(y, phi.reshape(1, -1), model, scale_mode)[0]
            )
        out.append(SubjectRecord(rec.subject_id, rec.covariates, new_metrics))
    return out


def harmonize_dataset(
    bundle: HarmonizationBundle,
    dataset: SiteDataset,
    scale_mode: str = "std",
) -> SiteDataset:
    """apply(), but in and out as a SiteDataset with the same identity."""
    recs = apply(bundle, list(dataset.records), scale_mode)
    return SiteDataset(dataset.site_id, dataset.metric_name, tuple(recs))


def rectify(
    records: list[SubjectRecord],
    region_id: str,
    beta_ref: np.ndarray,
    basis: BasisSpec,
    source: str,
) -> RectifiedResiduals:
    """Subtract the reference curve from each subject's value in one region."""
    if not records:
        raise InsufficientData(f"no records to rectify for region '{region_id}'")
    beta_ref = np.asarray(beta_ref, dtype=float)
    vals = []
    for rec in records:
        if region_id not in rec.metrics:
            raise UnknownRegion(
                f"subject '{rec.subject_id}' lacks region '{region_id}'"
            )
        phi = expand_basis(rec.covariates, basis)
        vals.append(rec.metrics[region_id] - float(phi @ beta_ref))
    return RectifiedResiduals(tuple(vals), source)


def bhattacharyya_gaussian(
    mean_a: float, var_a: float, mean_b: float, var_b: float
) -> float:
    """Bhattacharyya distance between two univariate normal densities."""
    if var_a <= 0.0 or var_b <= 0.0:
        raise DegenerateVariance(
            "Bhattacharyya distance needs strictly positive variances"
        )
    quad = 0.25 * (mean_a - mean_b) ** 2 / (var_a + var_b)
    spread = 0.5 * math.log((var_a + var_b) / (2.0 * math.sqrt(var_a * var_b)))
    # AM >= GM makes the spread term nonnegative in exact arithmetic; clamp
    # the roundoff residue so near-identical populations report 0, not -1e-17.
    return max(0.0, quad + spread)


def qc_bhattacharyya(
    reference: SiteDataset,
    harmonized_moving: list[SubjectRecord],
    region_id: str,
    beta_ref: np.ndarray,
    basis: BasisSpec,
) -> float:
    """Distribution overlap score between the two rectified populations.

    Both populations are rectified by the reference curve, then compared as
    Gaussians through the Bhattacharyya distance.  0 means the harmonized
    moving sample sits exactly on the reference residual distribution.
    """
    zr = rectify(list(reference.records), region_id, beta_ref, basis, SOURCE_REFERENCE)
    zm = rectify(harmonized_moving, region_id, beta_ref, basis, SOURCE_MOVING_HARMONIZED)
    return bhattacharyya_gaussian(zr.mean(), zr.variance(), zm.mean(), zm.variance())


# ---------------------------------------------------------------------------
# penalty auto-tuning
# ---------------------------------------------------------------------------


def _sign(x: float) -> float:
    return 1.0 if x >= 0.0 else -1.0


def _base_penalty_direction(beta_ref: np.ndarray) -> np.ndarray:
    """Componentwise |beta_ref[0] / beta_ref[k]| with guarded zero handling.

    Components whose reference coefficient is zero would divide to infinity;
    they inherit the largest finite ratio so they are penalized at least as
    hard as any identified component.  If nothing is finite and positive
    (for instance a zero intercept) the direction falls back to all ones.
    """
    with np.errstate(divide="ignore", invalid="ignore"):
        ratios = np.abs(beta_ref[0] / beta_ref)
    finite = ratios[np.isfinite(ratios)]
    fill = float(finite.max()) if finite.size else 0.0
    direction = np.where(np.isfinite(ratios), ratios, fill)
    if not np.any(direction > 0):
        return np.ones_like(beta_ref)
    return direction


def _tune_grid(reference: SiteDataset, basis: BasisSpec, grid_points: int) -> np.ndarray:
    """Feature rows of a dense sweep along the first covariate.

    The first covariate runs uniformly over its observed reference range
    while every other covariate is held at its reference mean.  With no
    covariates at all the curve is a constant, so one point suffices.
    """
    X = reference.covariate_matrix()
    if X.shape[1] == 0:
        return expand_raw(basis, np.zeros((1, 0)))
    sweep = np.linspace(X[:, 0].min(), X[:, 0].max(), grid_points)
    grid = np.tile(X.mean(axis=0), (grid_points, 1))
    grid[:, 0] = sweep
    return expand_raw(basis, grid)


def auto_tune(
    reference: SiteDataset,
    moving: SiteDataset,
    region_id: str,
    hyper: Hyperparameters,
    tau1: float | None = None,
    tau2: float | None = None,
) -> tuple[np.ndarray, TuneDiagnostics]:
    """Search for the smallest penalty that keeps both curves close enough.

    The penalty direction is fixed by the reference coefficients and only its
    scale is searched, doubling from lambda_min upward.  A scale is accepted
    when the curves' pointwise separation over the moving subjects stays
    within factor tau of the separation over the dense grid on both sides
    (d_min / tau >= d_1 would fail, and so on).  On acceptance the scan stops;
    if no scale is accepted the best-scoring smallest scale is returned with
    converged=False and a warning.
    """
    t1 = hyper.tau if tau1 is None else tau1
    t2 = hyper.tau if tau2 is None else tau2
    if t1 < 1.0 or t2 < 1.0:
        raise SchemaError("separation tolerances must be >= 1")
    basis = build_basis(reference, hyper.degree, hyper.basis_mode)
    PhiR = design_matrix(reference, basis)
    PhiM = design_matrix(moving, basis)
    yR = reference.metric_vector(region_id)
    yM = moving.metric_vector(region_id)
    PhiGrid = _tune_grid(reference, basis, hyper.autotune.grid_points)
    beta_ref, var_ref = _fit_reference_arrays(PhiR, yR)
    lam, diag = _auto_tune_arrays(
        PhiM, yM, PhiGrid, beta_ref, var_ref, hyper, t1, t2, region_id
    )
    return lam, diag


def _auto_tune_arrays(
    PhiM: np.ndarray,
    yM: np.ndarray,
    PhiGrid: np.ndarray,
    beta_ref: np.ndarray,
    var_ref: float,
    hyper: Hyperparameters,
    tau1: float,
    tau2: float,
    region_id: str,
) -> tuple[np.ndarray, TuneDiagnostics]:
    cfg = hyper.autotune
    direction = _base_penalty_direction(beta_ref)
    curve_scale = float(np.max(np.abs(PhiGrid @ beta_ref)))
    degenerate_eps = _TUNE_DEGENERATE_REL * max(curve_scale, 1.0)

    trace: list[tuple[float, int]] = []
    best: tuple[int, float, np.ndarray, tuple[float, float, float, float]] | None = None
    for step in range(cfg.max_iters + 1):
        scale = cfg.lambda_min * cfg.k**step
        lam = scale * direction
        beta_mov, _ = _fit_moving_arrays(PhiM, yM, beta_ref, var_ref, lam, hyper.nu)
        delta = beta_ref - beta_mov
        sep_mov = np.abs(PhiM @ delta)
        sep_grid = np.abs(PhiGrid @ delta)
        d_min = float(sep_mov.min())
        d_max = float(sep_mov.max())
        d_1 = min(float(sep_grid.min()), d_min)
        d_2 = max(float(sep_grid.max()), d_max)
        if step == 0 and d_2 <= degenerate_eps:
            # The sites already share a curve before any shrinkage, so the
            # separation tests would run on pure rounding noise; accept the
            # smallest scale.  Only the first step qualifies: large penalties
            # force the curves together, and treating that forced coincidence
            # as agreement would return a harmfully rigid penalty.
            score = 0
        else:
            score = int(
                _sign(d_min / tau1 - d_1) + _sign(d_2 - d_max * tau2) + 2.0
            )
        trace.append((scale, score))
        dists = (d_min, d_max, d_1, d_2)
        if best is None or score < best[0]:
            best = (score, scale, lam, dists)
        if score == 0:
            return lam, TuneDiagnostics(*dists, tuple(trace), True)

    assert best is not None
    warnings.warn(
        f"penalty search for region '{region_id}' did not converge after "
        f"{cfg.max_iters + 1} scales; using best score {best[0]} at "
        f"scale {best[1]:.6g}",
        RuntimeWarning,
        stacklevel=2,
    )
    return best[2], TuneDiagnostics(*best[3], tuple(trace), False)


# ---------------------------------------------------------------------------
# whole-site bundle fitting
# ---------------------------------------------------------------------------


def _check_compatible(reference: SiteDataset, moving: SiteDataset) -> None:
    if reference.metric_name != moving.metric_name:
        raise SchemaError(
            f"metric mismatch: reference measures '{reference.metric_name}', "
            f"moving measures '{moving.metric_name}'"
        )
    if reference.covariate_names != moving.covariate_names:
        raise CovariateMismatch(
            f"covariate mismatch: reference has {reference.covariate_names}, "
            f"moving has {moving.covariate_names}"
        )
    if set(reference.region_ids) != set(moving.region_ids):
        only_ref = sorted(set(reference.region_ids) - set(moving.region_ids))
        only_mov = sorted(set(moving.region_ids) - set(reference.region_ids))
        raise RegionMismatch(
            f"region sets differ (only reference: {only_ref}, "
            f"only moving: {only_mov})"
        )


def fit_bundle(
    reference: SiteDataset,
    moving: SiteDataset,
    hyper: Hyperparameters,
    threads: int = 1,
) -> HarmonizationBundle:
    """Fit every region of the moving site against the reference site.

    Regions are processed independently (sorted by id) and may be fanned out
    over a thread pool; results are bit-identical for any thread count
    because each region's computation touches only its own arrays.
    """
    _check_compatible(reference, moving)
    basis = build_basis(reference, hyper.degree, hyper.basis_mode)
    PhiR = design_matrix(reference, basis)
    PhiM = design_matrix(moving, basis)
    tuning = hyper.autotuned
    PhiGrid = _tune_grid(reference, basis, hyper.autotune.grid_points) if tuning else None

    def fit_one(region_id: str):
        try:
            yR = reference.metric_vector(region_id)
            yM = moving.metric_vector(region_id)
            beta_ref, var_ref = _fit_reference_arrays(PhiR, yR)
            if tuning:
                lam, _diag = _auto_tune_arrays(
                    PhiM, yM, PhiGrid, beta_ref, var_ref,
                    hyper, hyper.tau, hyper.tau, region_id,
                )
            else:
                lam = hyper.lambda_vector(basis.feature_dim)
            beta_mov, var_mov = _fit_moving_arrays(
                PhiM, yM, beta_ref, var_ref, lam, hyper.nu
            )
            model = RegionModel(
                region_id=region_id,
                beta_ref=tuple(float(b) for b in beta_ref),
                var_ref=var_ref,
                beta_mov=tuple(float(b) for b in beta_mov),
                var_mov=var_mov,
                basis=basis,
            )
            harmonized = _harmonize_values(yM, PhiM, model, "std")
            zr = yR - PhiR @ beta_ref
            zm = harmonized - PhiM @ beta_ref
            var_zr = float(np.mean((zr - zr.mean()) ** 2))
            var_zm = float(np.mean((zm - zm.mean()) ** 2))
            qc = bhattacharyya_gaussian(
                float(zr.mean()), var_zr, float(zm.mean()), var_zm
            )
            return model, qc, (tuple(float(v) for v in lam) if tuning else None)
        except CombatError as exc:
            raise type(exc)(f"region '{region_id}': {exc}") from exc

    region_ids = reference.region_ids
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(fit_one, region_ids))
    else:
        results = [fit_one(rid) for rid in region_ids]

    models = {}
    qc = {}
    tuned: dict[str, tuple[float, ...]] = {}
    for region_id, (model, score, lam_used) in zip(region_ids, results):
        models[region_id] = model
        qc[region_id] = score
        if lam_used is not None:
            tuned[region_id] = lam_used
    return HarmonizationBundle(
        reference_site_id=reference.site_id,
        moving_site_id=moving.site_id,
        metric_name=reference.metric_name,
        hyper=hyper,
        models=models,
        qc=qc,
        tuned_lambda=tuned,
    )
