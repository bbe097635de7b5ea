"""Core value types.

Everything here is an immutable value: construction validates, and all
downstream code (fitting, harmonization, experiments) treats instances as
read-only. That is what makes region-parallel execution safe to run and
bit-identical to serial execution.

Conventions:
    * covariates are raw (unstandardized); standardization lives in BasisSpec
    * region ids and site ids are plain strings
    * metric values are 64-bit floats and must be finite
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import CovariateMismatch, RegionMismatch, SchemaError

BASIS_MODE_MONOMIALS = "monomials"
BASIS_MODE_LITERAL_KERNEL = "literal_kernel"
_BASIS_MODES = (BASIS_MODE_MONOMIALS, BASIS_MODE_LITERAL_KERNEL)


def _as_float_tuple(values) -> tuple[float, ...]:
    return tuple(float(v) for v in values)


@dataclass(frozen=True)
class CovariateVector:
    """Ordered raw covariates for one subject.

    May be empty (intercept-only models). Names give the ordering contract:
    two vectors are comparable only when their name tuples match exactly.
    """

    names: tuple[str, ...]
    values: tuple[float, ...]

    def __post_init__(self):
        object.__setattr__(self, "names", tuple(str(n) for n in self.names))
        object.__setattr__(self, "values", _as_float_tuple(self.values))
        if len(self.names) != len(self.values):
            raise CovariateMismatch(
                f"{len(self.names)} covariate names for {len(self.values)} values"
            )
        if len(set(self.names)) != len(self.names):
            raise CovariateMismatch(f"duplicate covariate names: {self.names}")
        if any(not name for name in self.names):
            raise CovariateMismatch("covariate names must be non-empty strings")
        if any(not math.isfinite(v) for v in self.values):
            raise SchemaError(f"non-finite covariate value in {self.values}")


@dataclass(frozen=True)
class SubjectRecord:
    """One subject: an id, covariates, and per-region metric values."""

    subject_id: str
    covariates: CovariateVector
    metrics: dict[str, float]

    def __post_init__(self):
        object.__setattr__(self, "subject_id", str(self.subject_id))
        object.__setattr__(
            self, "metrics", {str(k): float(v) for k, v in self.metrics.items()}
        )
        if not self.subject_id:
            raise SchemaError("subject_id must be a non-empty string")
        if not self.metrics:
            raise SchemaError(f"subject '{self.subject_id}' has no metric values")
        for region, value in self.metrics.items():
            if not region:
                raise SchemaError("region ids must be non-empty strings")
            if not math.isfinite(value):
                raise SchemaError(
                    f"non-finite value {value!r} for region '{region}' "
                    f"on subject '{self.subject_id}'"
                )


@dataclass(frozen=True)
class SiteDataset:
    """All records acquired at one site for one scalar metric.

    Invariants enforced at construction: one shared covariate name tuple,
    one shared region id set, unique subject ids. An empty record tuple is
    allowed (it is the natural "nothing withheld" result of an exhaustive
    subsample); fitting operations reject it with InsufficientData instead.
    """

    site_id: str
    metric_name: str
    records: tuple[SubjectRecord, ...]

    def __post_init__(self):
        object.__setattr__(self, "site_id", str(self.site_id))
        object.__setattr__(self, "metric_name", str(self.metric_name))
        object.__setattr__(self, "records", tuple(self.records))
        if not self.site_id:
            raise SchemaError("site_id must be a non-empty string")
        if not self.records:
            return
        names = self.records[0].covariates.names
        regions = set(self.records[0].metrics)
        seen_ids = set()
        for rec in self.records:
            if rec.covariates.names != names:
                raise CovariateMismatch(
                    f"subject '{rec.subject_id}' has covariates "
                    f"{rec.covariates.names}, expected {names}"
                )
            if set(rec.metrics) != regions:
                raise RegionMismatch(
                    f"subject '{rec.subject_id}' region set differs from "
                    f"the first record of site '{self.site_id}'"
                )
            if rec.subject_id in seen_ids:
                raise SchemaError(
                    f"duplicate subject_id '{rec.subject_id}' in site '{self.site_id}'"
                )
            seen_ids.add(rec.subject_id)

    @property
    def n_subjects(self) -> int:
        return len(self.records)

    @property
    def covariate_names(self) -> tuple[str, ...]:
        if not self.records:
            return ()
        return self.records[0].covariates.names

    @property
    def region_ids(self) -> tuple[str, ...]:
        """Region ids in sorted order (the deterministic iteration order)."""
        if not self.records:
            return ()
        return tuple(sorted(self.records[0].metrics))

    def covariate_matrix(self) -> np.ndarray:
        """Raw covariates as a (n_subjects, n_covariates) array."""
        return np.array([rec.covariates.values for rec in self.records], dtype=float).reshape(
            self.n_subjects, len(self.covariate_names)
        )

    def metric_vector(self, region_id: str) -> np.ndarray:
        if not self.records or region_id not in self.records[0].metrics:
            raise RegionMismatch(
                f"region '{region_id}' not present in site '{self.site_id}'"
            )
        return np.array([rec.metrics[region_id] for rec in self.records], dtype=float)


def _n_monomials(n_covariates: int, degree: int) -> int:
    return math.comb(n_covariates + degree, degree)


@dataclass(frozen=True)
class BasisSpec:
    """Frozen polynomial feature map: standardization plus expansion rule.

    centers/scales are fitted from the reference site once and reused for
    every expansion afterwards, so reference and moving subjects pass through
    the identical map. Feature order is deterministic: constant first, then
    graded lexicographic within each total degree.
    """

    degree: int
    mode: str
    covariate_names: tuple[str, ...]
    centers: tuple[float, ...]
    scales: tuple[float, ...]

    def __post_init__(self):
        object.__setattr__(self, "degree", int(self.degree))
        object.__setattr__(self, "mode", str(self.mode))
        object.__setattr__(
            self, "covariate_names", tuple(str(n) for n in self.covariate_names)
        )
        object.__setattr__(self, "centers", _as_float_tuple(self.centers))
        object.__setattr__(self, "scales", _as_float_tuple(self.scales))
        if self.degree < 0:
            raise SchemaError(f"basis degree must be >= 0, got {self.degree}")
        if self.mode not in _BASIS_MODES:
            raise SchemaError(
                f"unknown basis mode '{self.mode}', expected one of {_BASIS_MODES}"
            )
        if not (len(self.covariate_names) == len(self.centers) == len(self.scales)):
            raise CovariateMismatch(
                "covariate_names, centers and scales must have equal length"
            )
        if any(s <= 0 for s in self.scales):
            raise SchemaError(f"standardization scales must be positive: {self.scales}")

    @property
    def feature_dim(self) -> int:
        """Number of features, a function of (degree, mode, covariate count) only."""
        return _n_monomials(len(self.covariate_names), self.degree)


@dataclass(frozen=True)
class AutoTuneConfig:
    """Knobs of the regularization scan.

    k is the multiplicative step between scanned magnitudes, lambda_min the
    starting magnitude, max_iters the scan length (t = 0..max_iters), and
    grid_points the resolution of the full-range curve-distance grid.
    """

    k: float = 2.0
    lambda_min: float = 1e-3
    max_iters: int = 60
    grid_points: int = 200

    def __post_init__(self):
        object.__setattr__(self, "k", float(self.k))
        object.__setattr__(self, "lambda_min", float(self.lambda_min))
        object.__setattr__(self, "max_iters", int(self.max_iters))
        object.__setattr__(self, "grid_points", int(self.grid_points))
        if self.k <= 1:
            raise SchemaError(f"autotune step k must be > 1, got {self.k}")
        if self.lambda_min <= 0:
            raise SchemaError(f"lambda_min must be positive, got {self.lambda_min}")
        if self.max_iters < 0:
            raise SchemaError(f"max_iters must be >= 0, got {self.max_iters}")
        if self.grid_points < 2:
            raise SchemaError(f"grid_points must be >= 2, got {self.grid_points}")


@dataclass(frozen=True)
class Hyperparameters:
    """Fit hyperparameters.

    lam is either None (auto-tune per region), a scalar broadcast over the
    feature dimension, or an explicit per-feature vector. nu blends the
    empirical moving variance with the reference variance; tau is the
    auto-tune band tolerance.
    """

    degree: int = 2
    nu: float = 5.0
    tau: float = 2.0
    lam: float | tuple[float, ...] | None = None
    basis_mode: str = BASIS_MODE_MONOMIALS
    autotune: AutoTuneConfig = field(default_factory=AutoTuneConfig)

    def __post_init__(self):
        object.__setattr__(self, "degree", int(self.degree))
        object.__setattr__(self, "nu", float(self.nu))
        object.__setattr__(self, "tau", float(self.tau))
        if self.lam is not None:
            if isinstance(self.lam, (int, float)):
                object.__setattr__(self, "lam", float(self.lam))
                lam_entries = (self.lam,)
            else:
                object.__setattr__(self, "lam", _as_float_tuple(self.lam))
                lam_entries = self.lam
            if any(not math.isfinite(v) or v < 0 for v in lam_entries):
                raise SchemaError(f"fixed lambda entries must be >= 0: {lam_entries}")
        if self.degree < 0:
            raise SchemaError(f"degree must be >= 0, got {self.degree}")
        if not math.isfinite(self.nu) or self.nu < 0:
            raise SchemaError(f"nu must be >= 0, got {self.nu}")
        if not math.isfinite(self.tau) or self.tau < 1:
            raise SchemaError(f"tau must be >= 1, got {self.tau}")
        if self.basis_mode not in _BASIS_MODES:
            raise SchemaError(
                f"unknown basis mode '{self.basis_mode}', expected one of {_BASIS_MODES}"
            )

    @property
    def autotuned(self) -> bool:
        return self.lam is None

    def lambda_vector(self, feature_dim: int) -> np.ndarray:
        """Fixed lambda as a vector of length feature_dim.

        Raises if lam is None (auto-tune) or an explicit vector of the wrong
        length.
        """
        if self.lam is None:
            raise SchemaError("lambda is auto-tuned; no fixed vector available")
        if isinstance(self.lam, float):
            return np.full(feature_dim, self.lam)
        if len(self.lam) != feature_dim:
            raise CovariateMismatch(
                f"fixed lambda has {len(self.lam)} entries, basis has {feature_dim}"
            )
        return np.array(self.lam, dtype=float)


@dataclass(frozen=True)
class RegionModel:
    """Fitted harmonization state for one region."""

    region_id: str
    beta_ref: tuple[float, ...]
    var_ref: float
    beta_mov: tuple[float, ...]
    var_mov: float
    basis: BasisSpec

    def __post_init__(self):
        object.__setattr__(self, "region_id", str(self.region_id))
        object.__setattr__(self, "beta_ref", _as_float_tuple(self.beta_ref))
        object.__setattr__(self, "beta_mov", _as_float_tuple(self.beta_mov))
        object.__setattr__(self, "var_ref", float(self.var_ref))
        object.__setattr__(self, "var_mov", float(self.var_mov))
        dim = self.basis.feature_dim
        if len(self.beta_ref) != dim or len(self.beta_mov) != dim:
            raise CovariateMismatch(
                f"region '{self.region_id}': coefficient length "
                f"({len(self.beta_ref)}, {len(self.beta_mov)}) != basis dim {dim}"
            )
        if self.var_ref < 0 or self.var_mov < 0:
            raise SchemaError(
                f"region '{self.region_id}': variances must be >= 0, got "
                f"var_ref={self.var_ref}, var_mov={self.var_mov}"
            )


@dataclass(frozen=True)
class HarmonizationBundle:
    """Per-region models plus QC for one (reference, moving) site pair."""

    reference_site_id: str
    moving_site_id: str
    metric_name: str
    hyper: Hyperparameters
    models: dict[str, RegionModel]
    qc: dict[str, float]
    tuned_lambda: dict[str, tuple[float, ...]]

    def __post_init__(self):
        object.__setattr__(self, "models", dict(self.models))
        object.__setattr__(self, "qc", {k: float(v) for k, v in self.qc.items()})
        object.__setattr__(
            self,
            "tuned_lambda",
            {k: _as_float_tuple(v) for k, v in self.tuned_lambda.items()},
        )
        if set(self.models) != set(self.qc):
            raise RegionMismatch("models and qc must share the same region key set")
        if self.tuned_lambda and set(self.tuned_lambda) != set(self.models):
            raise RegionMismatch(
                "tuned_lambda, when present, must cover the same regions as models"
            )
        for region_id, model in self.models.items():
            if model.region_id != region_id:
                raise RegionMismatch(
                    f"model keyed '{region_id}' carries region_id '{model.region_id}'"
                )

    @property
    def region_ids(self) -> tuple[str, ...]:
        return tuple(sorted(self.models))

    @property
    def basis(self) -> BasisSpec:
        return self.models[self.region_ids[0]].basis
