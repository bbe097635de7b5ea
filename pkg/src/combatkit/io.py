"""Tabular input/output, model persistence, and run configuration.

Tables are wide CSV: subject_id, site_id, one column per covariate, one
column per region, plus an optional harmonized_by provenance column. Floats
are printed with 17 significant digits so that parse(print(x)) == x for
every finite 64-bit value.

Model files and configs are JSON. Model files carry a format tag and
version; loading anything newer than this code understands fails with a
clear message instead of misparsing. All writes go through a temp file and
an atomic rename so a crashed run never leaves partial output behind.
"""

from __future__ import annotations

import csv
import json
import math
import os
import tempfile
from dataclasses import dataclass, field

from .errors import SchemaError
from .types import (
    AutoTuneConfig,
    BasisSpec,
    CovariateVector,
    HarmonizationBundle,
    Hyperparameters,
    RegionModel,
    SiteDataset,
    SubjectRecord,
)

SUBJECT_COLUMN = "subject_id"
SITE_COLUMN = "site_id"
PROVENANCE_COLUMN = "harmonized_by"

BUNDLE_FORMAT = "combatkit-bundle"
BUNDLE_VERSION = 1

# 17 significant digits round-trip any finite IEEE double exactly.
FLOAT_FORMAT = "%.17g"


def format_float(value: float) -> str:
    return FLOAT_FORMAT % float(value)


def parse_float(text: str, where: str) -> float:
    try:
        value = float(text)
    except (TypeError, ValueError):
        raise SchemaError(f"{where}: '{text}' is not a number") from None
    if not math.isfinite(value):
        raise SchemaError(f"{where}: value must be finite, got '{text}'")
    return value


def atomic_write_text(path: str, content: str) -> None:
    """Write content to path via a temp file in the same directory."""
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix="~")
    try:
        with os.fdopen(fd, "w", newline="") as handle:
            handle.write(content)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


@dataclass(frozen=True)
class TableSchema:
    """Expected table layout: identifiers, covariates, then region columns.

    region_ids None means "infer regions from the header": every column
    that is not an identifier, declared covariate, or provenance marker is
    a region metric column.
    """

    metric_name: str
    covariate_names: tuple[str, ...]
    region_ids: tuple[str, ...] | None = None


@dataclass(frozen=True)
class LoadedTable:
    """A parsed site table plus enough layout to write it back unchanged."""

    dataset: SiteDataset
    columns: tuple[str, ...]
    provenance: dict[str, str] = field(default_factory=dict)

    @property
    def has_provenance(self) -> bool:
        return any(v for v in self.provenance.values())


def read_site_csv(path: str, schema: TableSchema) -> LoadedTable:
    """Parse one site's wide CSV against the schema.

    The file must contain exactly one site_id (or no rows at all). Missing
    cells and non-numeric metric cells are schema errors, never imputed.
    """
    with open(path, "r", newline="") as handle:
        reader = csv.reader(handle)
        try:
            header = next(reader)
        except StopIteration:
            raise SchemaError(f"{path}: missing header row") from None
        rows = list(reader)

    if len(set(header)) != len(header):
        raise SchemaError(f"{path}: duplicate column names in header")
    for required in (SUBJECT_COLUMN, SITE_COLUMN):
        if required not in header:
            raise SchemaError(f"{path}: missing required column '{required}'")
    for cov in schema.covariate_names:
        if cov not in header:
            raise SchemaError(f"{path}: missing covariate column '{cov}'")

    special = {SUBJECT_COLUMN, SITE_COLUMN, PROVENANCE_COLUMN, *schema.covariate_names}
    region_cols = [c for c in header if c not in special]
    if schema.region_ids is not None:
        missing = set(schema.region_ids) - set(region_cols)
        extra = set(region_cols) - set(schema.region_ids)
        if missing or extra:
            raise SchemaError(
                f"{path}: region columns do not match the model "
                f"(missing {sorted(missing)}, unexpected {sorted(extra)})"
            )
    if not region_cols:
        raise SchemaError(f"{path}: no region metric columns found")

    index = {name: i for i, name in enumerate(header)}
    records = []
    provenance: dict[str, str] = {}
    site_ids = set()
    for lineno, row in enumerate(rows, start=2):
        if len(row) != len(header):
            raise SchemaError(
                f"{path}:{lineno}: expected {len(header)} cells, got {len(row)}"
            )
        subject_id = row[index[SUBJECT_COLUMN]]
        if not subject_id:
            raise SchemaError(f"{path}:{lineno}: empty subject_id")
        site_ids.add(row[index[SITE_COLUMN]])
        cov = CovariateVector(
            schema.covariate_names,
            tuple(
                parse_float(row[index[c]], f"{path}:{lineno}: column '{c}'")
                for c in schema.covariate_names
            ),
        )
        metrics = {
            c: parse_float(row[index[c]], f"{path}:{lineno}: column '{c}'")
            for c in region_cols
        }
        records.append(SubjectRecord(subject_id, cov, metrics))
        if PROVENANCE_COLUMN in index:
            provenance[subject_id] = row[index[PROVENANCE_COLUMN]]

    if len(site_ids) > 1:
        raise SchemaError(
            f"{path}: expected one site per file, found {sorted(site_ids)}"
        )
    site_id = site_ids.pop() if site_ids else "unspecified"
    if not site_id:
        raise SchemaError(f"{path}: empty site_id")
    dataset = SiteDataset(site_id, schema.metric_name, tuple(records))
    return LoadedTable(dataset, tuple(header), provenance)


def _wide_rows(dataset, columns, provenance_value, region_cols):
    for rec in dataset.records:
        row = []
        for col in columns:
            if col == SUBJECT_COLUMN:
                row.append(rec.subject_id)
            elif col == SITE_COLUMN:
                row.append(dataset.site_id)
            elif col == PROVENANCE_COLUMN:
                row.append(provenance_value or "")
            elif col in rec.covariates.names:
                row.append(
                    format_float(
                        rec.covariates.values[rec.covariates.names.index(col)]
                    )
                )
            elif col in region_cols:
                row.append(format_float(rec.metrics[col]))
            else:
                raise SchemaError(f"cannot fill unknown output column '{col}'")
        yield row


def write_site_csv(
    path: str,
    dataset: SiteDataset,
    columns: tuple[str, ...] | None = None,
    provenance_value: str | None = None,
    long: bool = False,
) -> None:
    """Write a site table, preserving a given column order when supplied.

    provenance_value, when set, fills (appending if necessary) the
    harmonized_by column. long=True emits one (subject, region) pair per
    row instead of one column per region.
    """
    covariates = dataset.covariate_names
    regions = dataset.region_ids
    if long:
        header = [SUBJECT_COLUMN, SITE_COLUMN, *covariates, "region", "value"]
        if provenance_value is not None:
            header.append(PROVENANCE_COLUMN)
        lines = [header]
        for rec in dataset.records:
            covs = [format_float(v) for v in rec.covariates.values]
            for region in regions:
                row = [rec.subject_id, dataset.site_id, *covs, region,
                       format_float(rec.metrics[region])]
                if provenance_value is not None:
                    row.append(provenance_value)
                lines.append(row)
    else:
        if columns is None:
            columns = (SUBJECT_COLUMN, SITE_COLUMN, *covariates, *regions)
        columns = tuple(columns)
        if provenance_value is not None and PROVENANCE_COLUMN not in columns:
            columns = (*columns, PROVENANCE_COLUMN)
        lines = [list(columns)]
        lines.extend(_wide_rows(dataset, columns, provenance_value, set(regions)))

    import io as _stringio

    buf = _stringio.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerows(lines)
    atomic_write_text(path, buf.getvalue())


def write_tsv(path: str, rows: list[dict], columns: list[str]) -> None:
    """Plot-ready tab-separated table; floats get the round-trip format."""
    lines = ["\t".join(columns)]
    for row in rows:
        cells = []
        for col in columns:
            value = row[col]
            cells.append(format_float(value) if isinstance(value, float) else str(value))
        lines.append("\t".join(cells))
    atomic_write_text(path, "\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# model persistence
# ---------------------------------------------------------------------------


def bundle_to_dict(bundle: HarmonizationBundle) -> dict:
    hyper = bundle.hyper
    return {
        "format": BUNDLE_FORMAT,
        "version": BUNDLE_VERSION,
        "metric_name": bundle.metric_name,
        "reference_site_id": bundle.reference_site_id,
        "moving_site_id": bundle.moving_site_id,
        "hyper": {
            "degree": hyper.degree,
            "nu": hyper.nu,
            "tau": hyper.tau,
            "lam": list(hyper.lam) if isinstance(hyper.lam, tuple) else hyper.lam,
            "basis_mode": hyper.basis_mode,
            "autotune": {
                "k": hyper.autotune.k,
                "lambda_min": hyper.autotune.lambda_min,
                "max_iters": hyper.autotune.max_iters,
                "grid_points": hyper.autotune.grid_points,
            },
        },
        "basis": {
            "degree": bundle.basis.degree,
            "mode": bundle.basis.mode,
            "covariate_names": list(bundle.basis.covariate_names),
            "centers": list(bundle.basis.centers),
            "scales": list(bundle.basis.scales),
        },
        "models": {
            region_id: {
                "beta_ref": list(m.beta_ref),
                "var_ref": m.var_ref,
                "beta_mov": list(m.beta_mov),
                "var_mov": m.var_mov,
            }
            for region_id, m in sorted(bundle.models.items())
        },
        "qc": {region_id: v for region_id, v in sorted(bundle.qc.items())},
        "tuned_lambda": {
            region_id: list(v) for region_id, v in sorted(bundle.tuned_lambda.items())
        },
    }


def bundle_from_dict(payload: dict) -> HarmonizationBundle:
    if not isinstance(payload, dict) or payload.get("format") != BUNDLE_FORMAT:
        raise SchemaError("not a harmonization model file")
    version = payload.get("version")
    if not isinstance(version, int) or version < 1:
        raise SchemaError(f"bad model file version: {version!r}")
    if version > BUNDLE_VERSION:
        raise SchemaError(
            f"model file version {version} is newer than this tool "
            f"understands ({BUNDLE_VERSION}); upgrade to read it"
        )
    try:
        hp = payload["hyper"]
        at = hp["autotune"]
        lam = hp["lam"]
        if isinstance(lam, list):
            lam = tuple(lam)
        hyper = Hyperparameters(
            degree=hp["degree"],
            nu=hp["nu"],
            tau=hp["tau"],
            lam=lam,
            basis_mode=hp["basis_mode"],
            autotune=AutoTuneConfig(
                k=at["k"],
                lambda_min=at["lambda_min"],
                max_iters=at["max_iters"],
                grid_points=at["grid_points"],
            ),
        )
        b = payload["basis"]
        basis = BasisSpec(
            degree=b["degree"],
            mode=b["mode"],
            covariate_names=tuple(b["covariate_names"]),
            centers=tuple(b["centers"]),
            scales=tuple(b["scales"]),
        )
        models = {
            region_id: RegionModel(
                region_id=region_id,
                beta_ref=tuple(m["beta_ref"]),
                var_ref=m["var_ref"],
                beta_mov=tuple(m["beta_mov"]),
                var_mov=m["var_mov"],
                basis=basis,
            )
            for region_id, m in payload["models"].items()
        }
        return HarmonizationBundle(
            reference_site_id=payload["reference_site_id"],
            moving_site_id=payload["moving_site_id"],
            metric_name=payload["metric_name"],
            hyper=hyper,
            models=models,
            qc={k: float(v) for k, v in payload["qc"].items()},
            tuned_lambda={
                k: tuple(v) for k, v in payload.get("tuned_lambda", {}).items()
            },
        )
    except KeyError as exc:
        raise SchemaError(f"model file is missing field {exc}") from None


def save_bundle(path: str, bundle: HarmonizationBundle) -> None:
    payload = bundle_to_dict(bundle)
    atomic_write_text(path, json.dumps(payload, indent=2, sort_keys=True) + "\n")


def load_bundle(path: str) -> HarmonizationBundle:
    try:
        with open(path, "r") as handle:
            payload = json.load(handle)
    except json.JSONDecodeError as exc:
        raise SchemaError(f"{path}: not valid JSON ({exc})") from None
    return bundle_from_dict(payload)


def load_json(path: str, what: str) -> dict:
    try:
        with open(path, "r") as handle:
            payload = json.load(handle)
    except json.JSONDecodeError as exc:
        raise SchemaError(f"{path}: {what} is not valid JSON ({exc})") from None
    if not isinstance(payload, dict):
        raise SchemaError(f"{path}: {what} must be a JSON object")
    return payload


def save_json(path: str, payload: dict) -> None:
    atomic_write_text(path, json.dumps(payload, indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# run configuration
# ---------------------------------------------------------------------------

_COVARIATE_TYPES = ("numeric", "encoded")

LAMBDA_AUTO = "auto"


def _check_keys(cfg: dict, allowed: set[str], where: str) -> None:
    unknown = set(cfg) - allowed
    if unknown:
        raise SchemaError(f"unknown keys in {where}: {sorted(unknown)}")


@dataclass(frozen=True)
class RunConfig:
    """Validated run settings: schema, basis, hyperparameters, seeds.

    experiment holds the raw (already key-checked) experiment section of the
    config; the evaluate subcommand resolves it per experiment name.
    """

    metric_name: str
    covariate_names: tuple[str, ...]
    covariate_types: tuple[str, ...]
    hyper: Hyperparameters
    seed: int
    threads: int
    experiment: dict = field(default_factory=dict)

    def schema(self, region_ids: tuple[str, ...] | None = None) -> TableSchema:
        return TableSchema(self.metric_name, self.covariate_names, region_ids)


_EXPERIMENT_SECTIONS = {
    "generator": None,  # validated by GeneratorSpec.from_config
    "bias": None,  # validated by BiasSpec.from_config
    "repetitions": None,
    "bias_grid": {"S_values", "M_values", "A", "methods", "n_moving"},
    "sample_size": {"sizes", "methods", "pool_size"},
    "age_window": {"window_centers", "half_width", "n_train", "methods", "pool_size"},
    "nu_sweep": {"nu_values", "n_moving", "test_size"},
}


def parse_run_config(cfg: dict, where: str = "config") -> RunConfig:
    _check_keys(
        cfg,
        {"metric_name", "covariates", "basis", "hyper", "seed", "threads",
         "experiment"},
        where,
    )
    metric_name = cfg.get("metric_name", "md")
    if not isinstance(metric_name, str) or not metric_name:
        raise SchemaError(f"{where}: metric_name must be a non-empty string")

    cov_names = []
    cov_types = []
    for i, cov in enumerate(cfg.get("covariates", [])):
        _check_keys(cov, {"name", "type"}, f"{where}: covariates[{i}]")
        name = cov.get("name")
        if not isinstance(name, str) or not name:
            raise SchemaError(f"{where}: covariates[{i}] needs a non-empty name")
        ctype = cov.get("type", "numeric")
        if ctype not in _COVARIATE_TYPES:
            raise SchemaError(
                f"{where}: covariate '{name}' type must be one of "
                f"{_COVARIATE_TYPES}, got '{ctype}'"
            )
        cov_names.append(name)
        cov_types.append(ctype)

    basis_cfg = cfg.get("basis", {})
    _check_keys(basis_cfg, {"degree", "mode"}, f"{where}: basis")
    hyper_cfg = cfg.get("hyper", {})
    _check_keys(hyper_cfg, {"nu", "tau", "lambda", "autotune"}, f"{where}: hyper")
    at_cfg = hyper_cfg.get("autotune", {})
    _check_keys(
        at_cfg, {"k", "lambda_min", "max_iters", "grid_points"},
        f"{where}: hyper.autotune",
    )

    lam = hyper_cfg.get("lambda", LAMBDA_AUTO)
    if lam == LAMBDA_AUTO:
        lam_value = None
    elif isinstance(lam, (int, float)) and not isinstance(lam, bool):
        lam_value = float(lam)
    elif isinstance(lam, list):
        lam_value = tuple(float(v) for v in lam)
    else:
        raise SchemaError(
            f"{where}: hyper.lambda must be 'auto', a number, or a list"
        )

    hyper = Hyperparameters(
        degree=basis_cfg.get("degree", 2),
        nu=hyper_cfg.get("nu", 5.0),
        tau=hyper_cfg.get("tau", 2.0),
        lam=lam_value,
        basis_mode=basis_cfg.get("mode", "monomials"),
        autotune=AutoTuneConfig(
            k=at_cfg.get("k", 2.0),
            lambda_min=at_cfg.get("lambda_min", 1e-3),
            max_iters=at_cfg.get("max_iters", 60),
            grid_points=at_cfg.get("grid_points", 200),
        ),
    )

    experiment = cfg.get("experiment", {})
    _check_keys(experiment, set(_EXPERIMENT_SECTIONS), f"{where}: experiment")
    for section, allowed in _EXPERIMENT_SECTIONS.items():
        if allowed is not None and section in experiment:
            _check_keys(
                experiment[section], allowed, f"{where}: experiment.{section}"
            )

    seed = cfg.get("seed", 0)
    if not isinstance(seed, int) or isinstance(seed, bool):
        raise SchemaError(f"{where}: seed must be an integer")
    threads = cfg.get("threads", 1)
    if not isinstance(threads, int) or isinstance(threads, bool) or threads < 1:
        raise SchemaError(f"{where}: threads must be a positive integer")

    return RunConfig(
        metric_name=metric_name,
        covariate_names=tuple(cov_names),
        covariate_types=tuple(cov_types),
        hyper=hyper,
        seed=seed,
        threads=threads,
        experiment=dict(experiment),
    )


def load_run_config(path: str) -> RunConfig:
    return parse_run_config(load_json(path, "run config"), where=path)
