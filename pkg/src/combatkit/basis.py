"""Covariate standardization and polynomial feature expansion.

The feature map is fitted once, from the reference site, and frozen into a
BasisSpec. Two modes share one enumeration scheme:

``monomials``
    all monomials of total degree <= P over the standardized covariates.
``literal_kernel``
    the distinct monomials of the expanded kernel form (z^T z + 1)^P with
    coefficients absorbed, i.e. the same enumeration with every exponent
    doubled (only even powers appear).

Feature order is constant first, then within each total degree the exponent
tuples produced by combinations_with_replacement, which is graded
lexicographic: for two covariates at P = 2 the columns are
1, z1, z2, z1^2, z1*z2, z2^2.
"""

from __future__ import annotations

from itertools import combinations_with_replacement

import numpy as np

from .errors import CovariateMismatch, InsufficientData
from .types import (
    BASIS_MODE_LITERAL_KERNEL,
    BASIS_MODE_MONOMIALS,
    BasisSpec,
    CovariateVector,
    SiteDataset,
)


def monomial_exponents(n_covariates: int, degree: int) -> tuple[tuple[int, ...], ...]:
    """Exponent tuples in canonical order (constant first, graded lex)."""
    out: list[tuple[int, ...]] = [(0,) * n_covariates]
    for total in range(1, degree + 1):
        for combo in combinations_with_replacement(range(n_covariates), total):
            exps = [0] * n_covariates
            for idx in combo:
                exps[idx] += 1
            out.append(tuple(exps))
    return tuple(out)


def _exponents_for(basis: BasisSpec) -> tuple[tuple[int, ...], ...]:
    exps = monomial_exponents(len(basis.covariate_names), basis.degree)
    if basis.mode == BASIS_MODE_LITERAL_KERNEL:
        exps = tuple(tuple(2 * e for e in tup) for tup in exps)
    return exps


def _expand_standardized(Z: np.ndarray, exponents) -> np.ndarray:
    """Feature columns for pre-standardized covariate rows Z (J, K)."""
    n_rows = Z.shape[0]
    features = np.empty((n_rows, len(exponents)), dtype=float)
    for col, exps in enumerate(exponents):
        column = np.ones(n_rows)
        for k, e in enumerate(exps):
            if e:
                column = column * Z[:, k] ** e
        features[:, col] = column
    return features


def fit_standardization(reference: SiteDataset) -> tuple[tuple[float, float], ...]:
    """Per-covariate (center, scale) fitted from the reference site.

    Center is the mean, scale the population standard deviation; a constant
    covariate gets scale 1 so it standardizes to exactly zero rather than
    dividing by zero.
    """
    if reference.n_subjects < 2:
        raise InsufficientData(
            f"standardization needs >= 2 records, site '{reference.site_id}' "
            f"has {reference.n_subjects}"
        )
    X = reference.covariate_matrix()
    centers = X.mean(axis=0) if X.size else np.zeros(X.shape[1])
    scales = X.std(axis=0) if X.size else np.ones(X.shape[1])
    scales = np.where(scales == 0.0, 1.0, scales)
    return tuple(zip(centers.tolist(), scales.tolist()))


def build_basis(
    reference: SiteDataset, degree: int, mode: str = BASIS_MODE_MONOMIALS
) -> BasisSpec:
    """Fit the standardization from the reference and freeze it into a basis."""
    stats = fit_standardization(reference)
    return BasisSpec(
        degree=degree,
        mode=mode,
        covariate_names=reference.covariate_names,
        centers=tuple(c for c, _ in stats),
        scales=tuple(s for _, s in stats),
    )


def standardize(basis: BasisSpec, X: np.ndarray) -> np.ndarray:
    """Apply the frozen standardization to raw covariate rows (J, K)."""
    if X.shape[1] != len(basis.covariate_names):
        raise CovariateMismatch(
            f"{X.shape[1]} covariates passed, basis expects "
            f"{len(basis.covariate_names)}"
        )
    if X.shape[1] == 0:
        return X
    return (X - np.array(basis.centers)) / np.array(basis.scales)


def expand_raw(basis: BasisSpec, X: np.ndarray) -> np.ndarray:
    """Feature rows for raw covariate rows X (J, K), no name checking."""
    Z = standardize(basis, np.asarray(X, dtype=float))
    return _expand_standardized(Z, _exponents_for(basis))


def expand_basis(x: CovariateVector, basis: BasisSpec) -> np.ndarray:
    """Feature vector for one subject. phi[0] is always the constant 1."""
    if x.names != basis.covariate_names:
        raise CovariateMismatch(
            f"covariates {x.names} do not match basis {basis.covariate_names}"
        )
    return expand_raw(basis, np.array(x.values, dtype=float).reshape(1, -1))[0]


def design_matrix(dataset: SiteDataset, basis: BasisSpec) -> np.ndarray:
    """Stacked feature rows for a whole site, shape (n_subjects, feature_dim).

    Row i equals expand_basis(records[i].covariates, basis) bit for bit; both
    paths share the same expansion kernel.
    """
    if dataset.covariate_names != basis.covariate_names:
        raise CovariateMismatch(
            f"site '{dataset.site_id}' covariates {dataset.covariate_names} "
            f"do not match basis {basis.covariate_names}"
        )
    return expand_raw(basis, dataset.covariate_matrix())
