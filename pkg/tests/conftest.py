from __future__ import annotations

import numpy as np
import pytest

from combatkit.types import CovariateVector, SiteDataset, SubjectRecord


def make_dataset(
    site_id: str,
    ages,
    values_by_region: dict,
    metric_name: str = "md",
    covariate_names: tuple[str, ...] = ("age",),
    extra_covariates=None,
) -> SiteDataset:
    """Assemble a SiteDataset from plain arrays.

    ``extra_covariates`` is an optional (n, k-1) array appended after age when
    more than one covariate name is given.
    """
    ages = np.asarray(ages, dtype=float)
    records = []
    for j, age in enumerate(ages):
        vals = (float(age),)
        if extra_covariates is not None:
            vals = vals + tuple(float(v) for v in np.atleast_2d(extra_covariates)[j])
        cov = CovariateVector(covariate_names, vals)
        metrics = {r: float(values_by_region[r][j]) for r in values_by_region}
        records.append(SubjectRecord(f"{site_id}-{j:04d}", cov, metrics))
    return SiteDataset(site_id, metric_name, tuple(records))


def random_reference(rng: np.random.Generator, n: int = 60, regions=("r0",)):
    """A generic well-conditioned single-covariate dataset for solver tests."""
    ages = rng.uniform(20.0, 80.0, size=n)
    values = {
        r: 1.0 + 0.02 * ages + rng.normal(0.0, 0.3, size=n) for r in regions
    }
    return make_dataset("ref", ages, values)


@pytest.fixture
def rng():
    return np.random.default_rng(987654321)


@pytest.fixture
def tiny_pair():
    """A deterministic (reference, moving) pair sharing one region."""
    gen = np.random.default_rng(5150)
    ages_r = gen.uniform(20.0, 80.0, size=120)
    ages_m = gen.uniform(25.0, 75.0, size=40)
    curve = lambda a: 0.8 + 0.01 * a + 1e-4 * (a - 50.0) ** 2
    ref = make_dataset(
        "ref", ages_r, {"r0": curve(ages_r) + gen.normal(0, 0.05, 120)}
    )
    mov = make_dataset(
        "mov", ages_m, {"r0": 1.1 * curve(ages_m) + gen.normal(0, 0.08, 40)}
    )
    return ref, mov
