"""Location/scale and empirical-Bayes ComBAT over pooled multi-site data.

Both flavors share a pooled OLS fit of metric on covariates (with intercept)
across every site at once.  The location/scale flavor then removes per-site
residual means and rescales by per-site residual standard deviations.  The
empirical-Bayes flavor shrinks those per-site, per-region biases toward
priors whose hyperparameters are moment-matched across regions, iterating
the two posterior updates until they stop moving.

These exist as comparison baselines for the evaluation harness; the pairwise
reference/moving machinery lives in harmonize.py.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import (
    ConvergenceFailure,
    CovariateMismatch,
    DegenerateVariance,
    InsufficientData,
    InsufficientRegions,
    RegionMismatch,
    SchemaError,
    UnknownSite,
)
from .harmonize import _solve_normal
from .types import SiteDataset, SubjectRecord

FLAVOR_LS = "location_scale"
FLAVOR_EB = "empirical_bayes"

# Stands in for an infinite inverse-gamma shape when the per-site scale
# estimates have zero spread (a totally rigid prior).
_RIGID_LAMBDA = 1e15


@dataclass(frozen=True)
class EBHyperparams:
    """Moment-matched prior parameters for one site.

    mu_bar / tau2_bar parameterize the normal prior on additive site bias;
    lambda_bar / theta_bar the inverse-gamma prior on multiplicative bias.
    """

    mu_bar: float
    tau2_bar: float
    lambda_bar: float
    theta_bar: float

    def __post_init__(self):
        if self.tau2_bar < 0:
            raise SchemaError("tau2_bar must be nonnegative")
        if self.lambda_bar <= 2:
            raise SchemaError("lambda_bar must exceed 2")
        if self.theta_bar < 0:
            raise SchemaError("theta_bar must be nonnegative")


@dataclass(frozen=True)
class PooledModel:
    """Shared covariate fit plus per-site bias terms, one entry per region.

    For the location/scale flavor site_gamma and site_delta2 hold raw-unit
    residual means and variances.  For the empirical-Bayes flavor they hold
    the posterior biases in standardized units, and eb_hyper carries the
    per-site prior parameters.  eb_trace records each site's per-iteration
    convergence metric so the fixed-point behavior can be inspected.
    """

    flavor: str
    metric_name: str
    covariate_names: tuple[str, ...]
    region_ids: tuple[str, ...]
    alpha: dict[str, float]
    beta: dict[str, tuple[float, ...]]
    sigma2: dict[str, float]
    site_gamma: dict[str, dict[str, float]]
    site_delta2: dict[str, dict[str, float]]
    eb_hyper: dict[str, EBHyperparams] = field(default_factory=dict)
    eb_trace: dict[str, tuple[float, ...]] = field(default_factory=dict)

    def __post_init__(self):
        if self.flavor not in (FLAVOR_LS, FLAVOR_EB):
            raise SchemaError(f"unknown flavor '{self.flavor}'")
        keys = set(self.region_ids)
        for name, mapping in (("alpha", self.alpha), ("beta", self.beta),
                              ("sigma2", self.sigma2)):
            if set(mapping) != keys:
                raise SchemaError(f"{name} must cover exactly the model regions")
        if set(self.site_gamma) != set(self.site_delta2):
            raise SchemaError("site_gamma and site_delta2 must list the same sites")
        for site_id in self.site_gamma:
            if set(self.site_gamma[site_id]) != keys or set(self.site_delta2[site_id]) != keys:
                raise SchemaError(
                    f"site '{site_id}' bias maps must cover exactly the model regions"
                )
            for region_id in self.region_ids:
                if self.site_delta2[site_id][region_id] < 0:
                    raise SchemaError("site_delta2 must be nonnegative")
        for region_id in self.region_ids:
            if self.sigma2[region_id] < 0:
                raise SchemaError("sigma2 must be nonnegative")

    @property
    def site_ids(self) -> tuple[str, ...]:
        return tuple(sorted(self.site_gamma))


# ---------------------------------------------------------------------------
# shared pooled fit
# ---------------------------------------------------------------------------


def _check_sites(sites: list[SiteDataset]) -> None:
    if not sites:
        raise InsufficientData("no sites given")
    seen = set()
    for site in sites:
        if site.site_id in seen:
            raise SchemaError(f"duplicate site_id '{site.site_id}'")
        seen.add(site.site_id)
    first = sites[0]
    for site in sites[1:]:
        if site.metric_name != first.metric_name:
            raise SchemaError(
                f"metric mismatch: '{first.metric_name}' vs '{site.metric_name}'"
            )
        if site.covariate_names != first.covariate_names:
            raise CovariateMismatch(
                f"site '{site.site_id}' covariates {site.covariate_names} "
                f"do not match {first.covariate_names}"
            )
        if site.region_ids != first.region_ids:
            raise RegionMismatch(
                f"site '{site.site_id}' region set differs from "
                f"'{first.site_id}'"
            )


def _design_with_intercept(site: SiteDataset) -> np.ndarray:
    X = site.covariate_matrix()
    return np.column_stack([np.ones(X.shape[0]), X])


def _pooled_ols(sites: list[SiteDataset]):
    """Pooled OLS of every region's metric on [1, covariates].

    Returns (region_ids, per-site design blocks, per-site metric blocks,
    coef matrix of shape (1+K, V), per-site residual blocks).
    """
    regions = sites[0].region_ids
    D_blocks = [_design_with_intercept(s) for s in sites]
    Y_blocks = [
        np.column_stack([s.metric_vector(r) for r in regions]) for s in sites
    ]
    D = np.vstack(D_blocks)
    Y = np.vstack(Y_blocks)
    total, q = D.shape
    if total <= q:
        raise InsufficientData(
            f"pooled fit needs more subjects ({total}) than parameters ({q})"
        )
    coef = _solve_normal(D.T @ D, D.T @ Y, "pooled fit")
    resid_blocks = [Yb - Db @ coef for Db, Yb in zip(D_blocks, Y_blocks)]
    return regions, D_blocks, Y_blocks, coef, resid_blocks


def _unpack_coef(regions, covariate_names, coef):
    alpha = {r: float(coef[0, v]) for v, r in enumerate(regions)}
    beta = {
        r: tuple(float(c) for c in coef[1:, v]) for v, r in enumerate(regions)
    }
    return alpha, beta


# ---------------------------------------------------------------------------
# location/scale flavor
# ---------------------------------------------------------------------------


def fit_ls_combat(sites: list[SiteDataset]) -> PooledModel:
    """Classic location/scale fit: per-site residual means and variances.

    Per-site variances use the (J_i - 1) denominator; the pooled residual
    variance removes the per-site means first and divides by (total - n_sites)
    so that duplicated identical sites reproduce themselves exactly under
    apply_combat.
    """
    _check_sites(sites)
    if len(sites) < 2:
        raise InsufficientData("location/scale fit needs at least two sites")
    for site in sites:
        if site.n_subjects < 2:
            raise InsufficientData(
                f"site '{site.site_id}' has fewer than two subjects"
            )
    regions, _D, _Y, coef, resid_blocks = _pooled_ols(sites)
    alpha, beta = _unpack_coef(regions, sites[0].covariate_names, coef)

    site_gamma: dict[str, dict[str, float]] = {}
    site_delta2: dict[str, dict[str, float]] = {}
    pooled_sq = np.zeros(len(regions))
    total = 0
    for site, resid in zip(sites, resid_blocks):
        gamma = resid.mean(axis=0)
        centered = resid - gamma
        delta2 = (centered**2).sum(axis=0) / (site.n_subjects - 1)
        pooled_sq += (centered**2).sum(axis=0)
        total += site.n_subjects
        site_gamma[site.site_id] = {
            r: float(gamma[v]) for v, r in enumerate(regions)
        }
        site_delta2[site.site_id] = {
            r: float(delta2[v]) for v, r in enumerate(regions)
        }
    sigma2_vec = pooled_sq / (total - len(sites))
    sigma2 = {r: float(sigma2_vec[v]) for v, r in enumerate(regions)}
    return PooledModel(
        flavor=FLAVOR_LS,
        metric_name=sites[0].metric_name,
        covariate_names=sites[0].covariate_names,
        region_ids=regions,
        alpha=alpha,
        beta=beta,
        sigma2=sigma2,
        site_gamma=site_gamma,
        site_delta2=site_delta2,
    )


# ---------------------------------------------------------------------------
# empirical-Bayes flavor
# ---------------------------------------------------------------------------


def _moment_priors(gamma_star: np.ndarray, delta2_star: np.ndarray) -> EBHyperparams:
    V = gamma_star.size
    mu = float(gamma_star.mean())
    tau2 = float(((gamma_star - mu) ** 2).sum() / (V - 1))
    G = float(delta2_star.mean())
    S2 = float(((delta2_star - G) ** 2).sum() / (V - 1))
    if S2 == 0.0:
        lam = _RIGID_LAMBDA
        theta = G * (lam - 1.0)
    else:
        lam = (G**2 + 2.0 * S2) / S2
        if lam <= 2.0:
            lam = 2.0 + 1e-6
        theta = (G**3 + G * S2) / S2
    return EBHyperparams(mu_bar=mu, tau2_bar=tau2, lambda_bar=lam, theta_bar=theta)


def _eb_site_posterior(
    z: np.ndarray,
    gamma_star: np.ndarray,
    delta2_star: np.ndarray,
    prior: EBHyperparams,
    init: str,
    tol: float,
    max_iters: int,
):
    """Iterate the two conditional posterior means for one site.

    Returns (gamma_bar, delta2_bar, per-iteration change trace).  The
    additive update shrinks each region's site mean toward mu_bar with a
    weight set by the current multiplicative estimate; the multiplicative
    update then re-scores the residuals around the new additive estimate.
    """
    J = z.shape[0]
    if init == "empirical":
        delta2_bar = delta2_star.copy()
    elif init == "unit":
        delta2_bar = np.ones_like(delta2_star)
    else:
        raise SchemaError(f"unknown EB initialization '{init}'")
    gamma_bar = gamma_star.copy()
    denom = J / 2.0 + prior.lambda_bar - 1.0
    trace = []
    for _ in range(max_iters):
        new_gamma = (
            J * prior.tau2_bar * gamma_star + delta2_bar * prior.mu_bar
        ) / (J * prior.tau2_bar + delta2_bar)
        sq = ((z - new_gamma) ** 2).sum(axis=0)
        new_delta2 = (prior.theta_bar + 0.5 * sq) / denom
        change = max(
            float(np.max(np.abs(new_gamma - gamma_bar) / (np.abs(gamma_bar) + 1e-12))),
            float(np.max(np.abs(new_delta2 - delta2_bar) / (np.abs(delta2_bar) + 1e-12))),
        )
        trace.append(change)
        gamma_bar, delta2_bar = new_gamma, new_delta2
        if change < tol:
            return gamma_bar, delta2_bar, tuple(trace)
    raise ConvergenceFailure(
        f"empirical-Bayes posterior did not converge within {max_iters} iterations "
        f"(last change {trace[-1]:.3e})",
        last_iterate=(gamma_bar.tolist(), delta2_bar.tolist()),
        iterations=max_iters,
    )


def fit_eb_combat(
    sites: list[SiteDataset],
    tol: float = 1e-6,
    max_iters: int = 100,
    init: str = "empirical",
) -> PooledModel:
    """Empirical-Bayes fit: site biases shrunk toward cross-region priors.

    Residuals are standardized by the pooled per-region scale, per-site
    biases are estimated in that standardized space, and prior parameters
    are moment-matched across regions (which is why at least two regions
    are required).  init selects the multiplicative starting point and
    exists to let callers confirm the fixed point does not depend on it.
    """
    _check_sites(sites)
    for site in sites:
        if site.n_subjects < 2:
            raise InsufficientData(
                f"site '{site.site_id}' has fewer than two subjects"
            )
    if len(sites[0].region_ids) < 2:
        raise InsufficientRegions(
            "empirical-Bayes priors pool across regions; need at least two"
        )
    regions, D_blocks, _Y, coef, resid_blocks = _pooled_ols(sites)
    alpha, beta = _unpack_coef(regions, sites[0].covariate_names, coef)

    # Pooled residual scale around the per-site means, 1/J_total denominator.
    gamma_hat = [r.mean(axis=0) for r in resid_blocks]
    total = sum(r.shape[0] for r in resid_blocks)
    sigma2_vec = (
        sum(((r - g) ** 2).sum(axis=0) for r, g in zip(resid_blocks, gamma_hat))
        / total
    )
    if np.any(sigma2_vec <= 0.0):
        raise DegenerateVariance("pooled residual variance is zero in some region")
    sigma_vec = np.sqrt(sigma2_vec)

    site_gamma: dict[str, dict[str, float]] = {}
    site_delta2: dict[str, dict[str, float]] = {}
    eb_hyper: dict[str, EBHyperparams] = {}
    eb_trace: dict[str, tuple[float, ...]] = {}
    for site, resid in zip(sites, resid_blocks):
        z = resid / sigma_vec
        gamma_star = z.mean(axis=0)
        delta2_star = ((z - gamma_star) ** 2).sum(axis=0) / (site.n_subjects - 1)
        prior = _moment_priors(gamma_star, delta2_star)
        try:
            gamma_bar, delta2_bar, trace = _eb_site_posterior(
                z, gamma_star, delta2_star, prior, init, tol, max_iters
            )
        except ConvergenceFailure as exc:
            raise ConvergenceFailure(
                f"site '{site.site_id}': {exc}",
                last_iterate=exc.last_iterate,
                iterations=exc.iterations,
            ) from exc
        site_gamma[site.site_id] = {
            r: float(gamma_bar[v]) for v, r in enumerate(regions)
        }
        site_delta2[site.site_id] = {
            r: float(delta2_bar[v]) for v, r in enumerate(regions)
        }
        eb_hyper[site.site_id] = prior
        eb_trace[site.site_id] = trace

    sigma2 = {r: float(sigma2_vec[v]) for v, r in enumerate(regions)}
    return PooledModel(
        flavor=FLAVOR_EB,
        metric_name=sites[0].metric_name,
        covariate_names=sites[0].covariate_names,
        region_ids=regions,
        alpha=alpha,
        beta=beta,
        sigma2=sigma2,
        site_gamma=site_gamma,
        site_delta2=site_delta2,
        eb_hyper=eb_hyper,
        eb_trace=eb_trace,
    )


# ---------------------------------------------------------------------------
# applying either flavor
# ---------------------------------------------------------------------------


def apply_combat(model: PooledModel, sites: list[SiteDataset]) -> list[SiteDataset]:
    """Remove each site's fitted bias and return the harmonized datasets."""
    out = []
    for site in sites:
        if site.site_id not in model.site_gamma:
            raise UnknownSite(f"site '{site.site_id}' was not in the training set")
        if site.covariate_names != model.covariate_names:
            raise CovariateMismatch(
                f"site '{site.site_id}' covariates {site.covariate_names} "
                f"do not match model {model.covariate_names}"
            )
        missing = set(site.region_ids) - set(model.region_ids)
        if missing:
            raise RegionMismatch(
                f"site '{site.site_id}' has regions unknown to the model: "
                f"{sorted(missing)}"
            )
        regions = site.region_ids
        D = _design_with_intercept(site)
        Y = np.column_stack([site.metric_vector(r) for r in regions])
        coef = np.column_stack(
            [np.concatenate([[model.alpha[r]], model.beta[r]]) for r in regions]
        )
        fit = D @ coef
        gamma = np.array([model.site_gamma[site.site_id][r] for r in regions])
        delta2 = np.array([model.site_delta2[site.site_id][r] for r in regions])
        if np.any(delta2 <= 0.0):
            raise DegenerateVariance(
                f"site '{site.site_id}' has a zero multiplicative bias estimate"
            )
        delta = np.sqrt(delta2)
        sigma = np.sqrt(np.array([model.sigma2[r] for r in regions]))
        if model.flavor == FLAVOR_LS:
            harmonized = sigma * (Y - fit - gamma) / delta + fit
        else:
            if np.any(sigma <= 0.0):
                raise DegenerateVariance("model has a zero pooled scale")
            z = (Y - fit) / sigma
            harmonized = sigma * (z - gamma) / delta + fit
        new_records = []
        for j, rec in enumerate(site.records):
            metrics = {r: float(harmonized[j, v]) for v, r in enumerate(regions)}
            new_records.append(SubjectRecord(rec.subject_id, rec.covariates, metrics))
        out.append(SiteDataset(site.site_id, site.metric_name, tuple(new_records)))
    return out
