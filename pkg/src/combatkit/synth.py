"""Synthetic cohort generation with controllable site bias.

A cohort is defined by per-region polynomial age curves plus Gaussian noise.
A moving site is derived from the same curves through three knobs: A scales
the baseline intercept, S scales the age-dependent part, and M scales the
noise.  Because the knobs act on disjoint components, the unbiased value of
every generated subject is recoverable exactly, which is what the evaluation
module scores harmonization against.

Randomness is split into tagged substreams (ages, per-region noise, subject
sampling) so that the same seed reproduces the same ages and noise draws no
matter which bias is applied, and region streams do not interact.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.polynomial import polynomial as npoly

from .errors import InsufficientData, SchemaError
from .types import CovariateVector, SiteDataset, SubjectRecord

AGE_COVARIATE = "age"

DIST_UNIFORM = "uniform"
DIST_TRUNC_GAUSSIAN = "truncated_gaussian"

# Substream tags: the leading entry of the rng seed sequence. Keeping them
# distinct means drawing ages never perturbs noise draws and vice versa.
_AGE_STREAM = 101
_NOISE_STREAM = 211
_SAMPLE_STREAM = 307

# Cap on rejection-sampling batches for the truncated Gaussian.
_MAX_REJECTION_BATCHES = 1000


@dataclass(frozen=True)
class RegionCurve:
    """One region's mean-age curve and noise level.

    coeffs are ascending polynomial coefficients over standardized age;
    coeffs[0] is the baseline intercept (the component the A knob scales),
    everything above it is the age-dependent part (the S knob's component).
    """

    region_id: str
    coeffs: tuple[float, ...]
    noise_std: float

    def __post_init__(self):
        object.__setattr__(self, "region_id", str(self.region_id))
        object.__setattr__(
            self, "coeffs", tuple(float(c) for c in self.coeffs)
        )
        object.__setattr__(self, "noise_std", float(self.noise_std))
        if not self.region_id:
            raise SchemaError("region_id must be a non-empty string")
        if len(self.coeffs) == 0:
            raise SchemaError(f"region '{self.region_id}' has no curve coefficients")
        if not all(np.isfinite(self.coeffs)):
            raise SchemaError(f"region '{self.region_id}' has non-finite coefficients")
        if not (self.noise_std > 0 and np.isfinite(self.noise_std)):
            raise SchemaError(
                f"region '{self.region_id}' noise_std must be positive and finite"
            )

    @property
    def intercept(self) -> float:
        return self.coeffs[0]


@dataclass(frozen=True)
class GeneratorSpec:
    """Complete recipe for one synthetic reference population."""

    n_subjects: int
    age_range: tuple[float, float]
    age_distribution: tuple
    regions: tuple[RegionCurve, ...]
    seed: int

    def __post_init__(self):
        object.__setattr__(self, "n_subjects", int(self.n_subjects))
        object.__setattr__(
            self, "age_range", tuple(float(a) for a in self.age_range)
        )
        object.__setattr__(self, "age_distribution", tuple(self.age_distribution))
        object.__setattr__(self, "regions", tuple(self.regions))
        object.__setattr__(self, "seed", int(self.seed))
        if self.n_subjects < 1:
            raise SchemaError("n_subjects must be at least 1")
        if len(self.age_range) != 2 or not self.age_range[0] < self.age_range[1]:
            raise SchemaError("age_range must be (min, max) with min < max")
        dist = self.age_distribution
        if dist[0] == DIST_UNIFORM:
            if len(dist) != 1:
                raise SchemaError("uniform age distribution takes no parameters")
        elif dist[0] == DIST_TRUNC_GAUSSIAN:
            if len(dist) != 3:
                raise SchemaError(
                    "truncated_gaussian age distribution needs (mean, std)"
                )
            if not float(dist[2]) > 0:
                raise SchemaError("truncated_gaussian std must be positive")
            object.__setattr__(
                self, "age_distribution", (dist[0], float(dist[1]), float(dist[2]))
            )
        else:
            raise SchemaError(f"unknown age distribution '{dist[0]}'")
        if not self.regions:
            raise SchemaError("spec needs at least one region")
        ids = [r.region_id for r in self.regions]
        if len(set(ids)) != len(ids):
            raise SchemaError(f"duplicate region ids in spec: {ids}")

    def as_config(self) -> dict:
        dist = self.age_distribution
        if dist[0] == DIST_UNIFORM:
            dist_cfg = {"kind": DIST_UNIFORM}
        else:
            dist_cfg = {"kind": DIST_TRUNC_GAUSSIAN, "mean": dist[1], "std": dist[2]}
        return {
            "n_subjects": self.n_subjects,
            "age_range": list(self.age_range),
            "age_distribution": dist_cfg,
            "regions": [
                {
                    "region_id": r.region_id,
                    "coeffs": list(r.coeffs),
                    "noise_std": r.noise_std,
                }
                for r in self.regions
            ],
            "seed": self.seed,
        }

    @classmethod
    def from_config(cls, cfg: dict) -> "GeneratorSpec":
        allowed = {"n_subjects", "age_range", "age_distribution", "regions", "seed"}
        _reject_unknown_keys(cfg, allowed, "generator spec")
        for key in allowed:
            if key not in cfg:
                raise SchemaError(f"generator spec is missing '{key}'")
        dist_cfg = cfg["age_distribution"]
        _reject_unknown_keys(dist_cfg, {"kind", "mean", "std"}, "age_distribution")
        kind = dist_cfg.get("kind")
        if kind == DIST_UNIFORM:
            dist = (DIST_UNIFORM,)
        elif kind == DIST_TRUNC_GAUSSIAN:
            if "mean" not in dist_cfg or "std" not in dist_cfg:
                raise SchemaError("truncated_gaussian needs 'mean' and 'std'")
            dist = (DIST_TRUNC_GAUSSIAN, dist_cfg["mean"], dist_cfg["std"])
        else:
            raise SchemaError(f"unknown age distribution kind '{kind}'")
        regions = []
        for rc in cfg["regions"]:
            _reject_unknown_keys(rc, {"region_id", "coeffs", "noise_std"}, "region")
            regions.append(
                RegionCurve(rc["region_id"], tuple(rc["coeffs"]), rc["noise_std"])
            )
        return cls(
            n_subjects=cfg["n_subjects"],
            age_range=tuple(cfg["age_range"]),
            age_distribution=dist,
            regions=tuple(regions),
            seed=cfg["seed"],
        )


@dataclass(frozen=True)
class BiasSpec:
    """Site-bias knobs: A scales intercepts, S scales age curves, M scales
    noise, and b shifts every baseline intercept before A applies."""

    A: float = 1.0
    S: float = 1.0
    M: float = 1.0
    b: float = 0.0

    def __post_init__(self):
        for name in ("A", "S", "M", "b"):
            object.__setattr__(self, name, float(getattr(self, name)))
        if not self.M > 0:
            raise SchemaError(f"noise multiplier M must be positive, got {self.M}")
        if not all(np.isfinite([self.A, self.S, self.M, self.b])):
            raise SchemaError("bias knobs must be finite")

    def as_config(self) -> dict:
        return {"A": self.A, "S": self.S, "M": self.M, "b": self.b}

    @classmethod
    def from_config(cls, cfg: dict) -> "BiasSpec":
        _reject_unknown_keys(cfg, {"A", "S", "M", "b"}, "bias spec")
        return cls(**cfg)


IDENTITY_BIAS = BiasSpec(A=1.0, S=1.0, M=1.0, b=0.0)


@dataclass(frozen=True)
class GroundTruth:
    """What the generated subjects would look like without bias.

    noiseless holds the pure curve values; unbiased holds curve plus the
    identical noise draws the generated site received, so the difference
    between a harmonized site and `unbiased` isolates bias-correction error
    from irreducible noise.
    """

    noiseless: SiteDataset
    unbiased: SiteDataset


def _reject_unknown_keys(cfg: dict, allowed: set[str], what: str) -> None:
    unknown = set(cfg) - allowed
    if unknown:
        raise SchemaError(f"unknown keys in {what}: {sorted(unknown)}")


# ---------------------------------------------------------------------------
# sampling internals
# ---------------------------------------------------------------------------


def standardize_age(ages: np.ndarray, age_range: tuple[float, float]) -> np.ndarray:
    """Map the age range onto [-1, 1]; curves are polynomials in this scale."""
    lo, hi = age_range
    mid = 0.5 * (lo + hi)
    half = 0.5 * (hi - lo)
    return (np.asarray(ages, dtype=float) - mid) / half


def _sample_ages(
    distribution: tuple, n: int, age_range: tuple[float, float], seed: int
) -> np.ndarray:
    rng = np.random.default_rng([_AGE_STREAM, seed])
    lo, hi = age_range
    if distribution[0] == DIST_UNIFORM:
        return rng.uniform(lo, hi, n)
    _, mean, std = distribution
    accepted: list[np.ndarray] = []
    have = 0
    for _ in range(_MAX_REJECTION_BATCHES):
        draw = rng.normal(mean, std, max(n, 64))
        keep = draw[(draw >= lo) & (draw <= hi)]
        accepted.append(keep)
        have += keep.size
        if have >= n:
            return np.concatenate(accepted)[:n]
    raise SchemaError(
        f"truncated_gaussian({mean}, {std}) puts too little mass in "
        f"[{lo}, {hi}] to draw {n} ages"
    )


def _noise_matrix(seed: int, n: int, n_regions: int) -> np.ndarray:
    """Standard normal draws, one independent substream per region index."""
    eps = np.empty((n, n_regions))
    for v in range(n_regions):
        eps[:, v] = np.random.default_rng([_NOISE_STREAM, seed, v]).standard_normal(n)
    return eps


def _curve_components(spec: GeneratorSpec, z: np.ndarray):
    """(intercepts, age-dependent matrix, noise stds) in spec region order."""
    intercepts = np.array([r.intercept for r in spec.regions])
    curves = np.column_stack(
        [npoly.polyval(z, r.coeffs) - r.intercept for r in spec.regions]
    )
    noise = np.array([r.noise_std for r in spec.regions])
    return intercepts, curves, noise


def _build_site(
    site_id: str, metric_name: str, ages: np.ndarray, values: np.ndarray,
    region_ids: list[str],
) -> SiteDataset:
    records = []
    for j in range(len(ages)):
        cov = CovariateVector((AGE_COVARIATE,), (float(ages[j]),))
        metrics = {r: float(values[j, v]) for v, r in enumerate(region_ids)}
        records.append(SubjectRecord(f"{site_id}-{j:05d}", cov, metrics))
    return SiteDataset(site_id, metric_name, tuple(records))


def _assemble(
    spec: GeneratorSpec,
    bias: BiasSpec,
    n_subjects: int,
    age_range: tuple[float, float],
    seed: int,
):
    """Shared generation core returning (biased, unbiased, noiseless) values.

    Ages and noise depend only on (spec, n_subjects, age_range, seed), never
    on the bias, so every bias setting sees the same subjects and the same
    noise realization.
    """
    ages = _sample_ages(spec.age_distribution, n_subjects, age_range, seed)
    z = standardize_age(ages, spec.age_range)
    eps = _noise_matrix(seed, n_subjects, len(spec.regions))
    intercepts, curves, noise = _curve_components(spec, z)
    noiseless = intercepts + curves
    unbiased = noiseless + noise * eps
    biased = (
        bias.A * (intercepts + bias.b)
        + bias.S * curves
        + bias.M * noise * eps
    )
    region_ids = [r.region_id for r in spec.regions]
    return ages, biased, unbiased, noiseless, region_ids


# ---------------------------------------------------------------------------
# public generation API
# ---------------------------------------------------------------------------

DEFAULT_METRIC = "md"


def generate_reference(
    spec: GeneratorSpec,
    site_id: str = "reference",
    metric_name: str = DEFAULT_METRIC,
) -> tuple[SiteDataset, GroundTruth]:
    """Draw the reference population and its ground truth."""
    ages, _, unbiased, noiseless, region_ids = _assemble(
        spec, IDENTITY_BIAS, spec.n_subjects, spec.age_range, spec.seed
    )
    dataset = _build_site(site_id, metric_name, ages, unbiased, region_ids)
    truth = GroundTruth(
        noiseless=_build_site(site_id, metric_name, ages, noiseless, region_ids),
        unbiased=dataset,
    )
    return dataset, truth


def inject_bias(
    reference_spec: GeneratorSpec,
    bias: BiasSpec,
    n_subjects: int,
    age_range: tuple[float, float],
    seed: int,
    site_id: str = "moving",
    metric_name: str = DEFAULT_METRIC,
) -> SiteDataset:
    """Draw a moving site carrying the given bias.

    Age standardization always uses the reference spec's age range, so the
    curves stay the same functions of age even when the moving site samples
    a narrower range.
    """
    if int(n_subjects) < 1:
        raise SchemaError("n_subjects must be at least 1")
    ages, biased, _, _, region_ids = _assemble(
        reference_spec, bias, int(n_subjects), tuple(age_range), int(seed)
    )
    return _build_site(site_id, metric_name, ages, biased, region_ids)


def bias_ground_truth(
    reference_spec: GeneratorSpec,
    n_subjects: int,
    age_range: tuple[float, float],
    seed: int,
    site_id: str = "moving",
    metric_name: str = DEFAULT_METRIC,
) -> GroundTruth:
    """Ground truth matching inject_bias at the same (n, range, seed).

    The returned unbiased dataset reuses the exact noise draws of any
    inject_bias call with these arguments, whatever its bias knobs.
    """
    ages, _, unbiased, noiseless, region_ids = _assemble(
        reference_spec, IDENTITY_BIAS, int(n_subjects), tuple(age_range),
        int(seed),
    )
    return GroundTruth(
        noiseless=_build_site(site_id, metric_name, ages, noiseless, region_ids),
        unbiased=_build_site(site_id, metric_name, ages, unbiased, region_ids),
    )


def apply_bias(
    dataset: SiteDataset,
    reference_spec: GeneratorSpec,
    bias: BiasSpec,
) -> SiteDataset:
    """Re-bias existing records by decomposing them against the generator curves.

    Each value splits into intercept + age curve + noise remainder; the bias
    knobs rescale those parts. Purely per-record arithmetic, so it commutes
    with any subsetting of the dataset.
    """
    spec_regions = {r.region_id: r for r in reference_spec.regions}
    missing = set(dataset.region_ids) - set(spec_regions)
    if missing:
        raise SchemaError(
            f"dataset regions not in the generator spec: {sorted(missing)}"
        )
    if AGE_COVARIATE not in dataset.covariate_names:
        raise SchemaError(f"dataset lacks the '{AGE_COVARIATE}' covariate")
    age_pos = dataset.covariate_names.index(AGE_COVARIATE)
    records = []
    for rec in dataset.records:
        z = standardize_age(
            np.array([rec.covariates.values[age_pos]]), reference_spec.age_range
        )
        metrics = {}
        for region_id, y in rec.metrics.items():
            curve = spec_regions[region_id]
            b = curve.intercept
            c = float(npoly.polyval(z, curve.coeffs)[0]) - b
            noise_part = y - b - c
            metrics[region_id] = (
                bias.A * (b + bias.b) + bias.S * c + bias.M * noise_part
            )
        records.append(SubjectRecord(rec.subject_id, rec.covariates, metrics))
    return SiteDataset(dataset.site_id, dataset.metric_name, tuple(records))


def sample_restricted(
    dataset: SiteDataset,
    n: int,
    age_window: tuple[float, float] | None,
    seed: int,
) -> tuple[SiteDataset, SiteDataset]:
    """Draw n training subjects without replacement; the rest become test.

    age_window is (center, half_width); when given, training subjects come
    only from inside it, while the test remainder keeps the full range.
    Selected indices are sorted, so drawing every eligible subject with no
    window reproduces the dataset order exactly.
    """
    n = int(n)
    if n < 1:
        raise SchemaError("sample size must be at least 1")
    if age_window is None:
        eligible = np.arange(dataset.n_subjects)
    else:
        if AGE_COVARIATE not in dataset.covariate_names:
            raise SchemaError(
                f"age window given but dataset lacks '{AGE_COVARIATE}'"
            )
        center, half_width = float(age_window[0]), float(age_window[1])
        if half_width <= 0:
            raise SchemaError("age window half_width must be positive")
        age_pos = dataset.covariate_names.index(AGE_COVARIATE)
        ages = dataset.covariate_matrix()[:, age_pos]
        eligible = np.nonzero(
            (ages >= center - half_width) & (ages <= center + half_width)
        )[0]
    if n > eligible.size:
        raise InsufficientData(
            f"requested {n} training subjects but only {eligible.size} "
            f"are eligible"
        )
    rng = np.random.default_rng([_SAMPLE_STREAM, int(seed)])
    chosen = np.sort(rng.choice(eligible, size=n, replace=False))
    chosen_set = set(int(i) for i in chosen)
    train = [dataset.records[int(i)] for i in chosen]
    test = [
        rec for j, rec in enumerate(dataset.records) if j not in chosen_set
    ]
    return (
        SiteDataset(dataset.site_id, dataset.metric_name, tuple(train)),
        SiteDataset(dataset.site_id, dataset.metric_name, tuple(test)),
    )


# ---------------------------------------------------------------------------
# default fixtures
# ---------------------------------------------------------------------------

# Calibrated so diffusion-like values sit near 7e-4 with age effects a few
# e-5 wide and noise a few e-6, the scale at which the evaluation thresholds
# are meaningful.
_SKELETON_INTERCEPT = 7.2e-4
_SKELETON_LINEAR = 3.0e-5
_SKELETON_QUAD = 4.0e-5
_SKELETON_NOISE = 3.0e-6


def default_reference_spec(
    n_subjects: int = 441,
    n_bundles: int = 42,
    seed: int = 20260814,
    curve_seed: int = 7,
) -> GeneratorSpec:
    """Reference cohort fixture: one skeleton region plus perturbed bundles.

    The bundle curves are deterministic functions of curve_seed, not of the
    cohort seed, so two cohorts with different seeds share identical region
    definitions.
    """
    regions = [
        RegionCurve(
            "wm_skeleton",
            (_SKELETON_INTERCEPT, _SKELETON_LINEAR, _SKELETON_QUAD),
            _SKELETON_NOISE,
        )
    ]
    rng = np.random.default_rng([607, int(curve_seed)])
    for k in range(int(n_bundles)):
        regions.append(
            RegionCurve(
                f"bundle_{k + 1:02d}",
                (
                    _SKELETON_INTERCEPT * rng.uniform(0.85, 1.15),
                    _SKELETON_LINEAR * rng.uniform(0.70, 1.30),
                    _SKELETON_QUAD * rng.uniform(0.70, 1.30),
                ),
                _SKELETON_NOISE * rng.uniform(0.80, 1.25),
            )
        )
    return GeneratorSpec(
        n_subjects=n_subjects,
        age_range=(18.0, 87.0),
        age_distribution=(DIST_UNIFORM,),
        regions=tuple(regions),
        seed=seed,
    )


def preset_biases() -> dict[str, BiasSpec]:
    """The two bias settings exercised throughout the evaluation suite."""
    return {
        "damped": BiasSpec(A=1.10, S=0.50, M=1.25, b=0.0),
        "amplified": BiasSpec(A=0.90, S=0.75, M=1.50, b=0.0),
    }
