"""Table and model persistence: exact float round trips, strict schemas."""

from __future__ import annotations

import csv
import json
import math
import os

import numpy as np
import pytest

from combatkit.errors import SchemaError
from combatkit.harmonize import fit_bundle
from combatkit.io import (
    PROVENANCE_COLUMN,
    TableSchema,
    atomic_write_text,
    bundle_from_dict,
    bundle_to_dict,
    format_float,
    load_bundle,
    load_json,
    load_run_config,
    parse_float,
    parse_run_config,
    read_site_csv,
    save_bundle,
    save_json,
    write_site_csv,
    write_tsv,
)
from combatkit.types import Hyperparameters

from conftest import make_dataset

_SCHEMA = TableSchema("md", ("age",))


def _gnarly_dataset(n=12, seed=2718):
    """Values chosen to break any formatter short of 17 digits."""
    gen = np.random.default_rng(seed)
    ages = gen.uniform(20.0, 80.0, n)
    values = {
        "rA": gen.uniform(1e-4, 1e-3, n),
        "rB": gen.standard_normal(n) / 3.0,
    }
    return make_dataset("siteX", ages, values)


def _assert_equal_records(a, b):
    assert a.site_id == b.site_id
    assert a.metric_name == b.metric_name
    assert len(a.records) == len(b.records)
    for ra, rb in zip(a.records, b.records):
        assert ra.subject_id == rb.subject_id
        assert ra.covariates == rb.covariates
        assert ra.metrics == rb.metrics


# ---------------------------------------------------------------------------
# float formatting
# ---------------------------------------------------------------------------


def test_float_format_round_trips_doubles_exactly(rng):
    specials = [0.0, 1.0, -1.0, 0.1, 1.0 / 3.0, 7.2e-4, math.pi,
                np.nextafter(1.0, 2.0), 1e-300, 1.7976931348623157e308]
    samples = list(rng.standard_normal(500) * 10.0 ** rng.integers(-12, 12, 500))
    for x in specials + samples:
        assert float(format_float(float(x))) == float(x)


def test_parse_float_rejects_junk_and_nonfinite():
    assert parse_float("2.5e-4", "here") == 2.5e-4
    with pytest.raises(SchemaError, match="here"):
        parse_float("abc", "here")
    with pytest.raises(SchemaError, match="finite"):
        parse_float("nan", "x")
    with pytest.raises(SchemaError, match="finite"):
        parse_float("inf", "x")
    with pytest.raises(SchemaError, match="finite"):
        parse_float("1e999", "x")


def test_atomic_write_leaves_no_temp_files(tmp_path):
    target = tmp_path / "out.txt"
    atomic_write_text(str(target), "first")
    atomic_write_text(str(target), "second")
    assert target.read_text() == "second"
    assert os.listdir(tmp_path) == ["out.txt"]


# ---------------------------------------------------------------------------
# site tables
# ---------------------------------------------------------------------------


def test_wide_round_trip_is_bitwise(tmp_path):
    ds = _gnarly_dataset()
    path = tmp_path / "site.csv"
    write_site_csv(str(path), ds)
    table = read_site_csv(str(path), _SCHEMA)
    _assert_equal_records(table.dataset, ds)
    assert table.columns == ("subject_id", "site_id", "age", "rA", "rB")
    assert not table.has_provenance
    # writing the parsed table back with its own column order reproduces
    # the file byte for byte
    echo = tmp_path / "echo.csv"
    write_site_csv(str(echo), table.dataset, columns=table.columns)
    assert echo.read_bytes() == path.read_bytes()


def test_schema_with_region_ids_pins_the_columns(tmp_path):
    ds = _gnarly_dataset()
    path = tmp_path / "site.csv"
    write_site_csv(str(path), ds)
    pinned = TableSchema("md", ("age",), ("rA", "rB"))
    assert read_site_csv(str(path), pinned).dataset.region_ids == ("rA", "rB")
    with pytest.raises(SchemaError, match="region columns"):
        read_site_csv(str(path), TableSchema("md", ("age",), ("rA", "rC")))


def test_long_format_emits_one_row_per_region(tmp_path):
    ds = _gnarly_dataset(n=5)
    path = tmp_path / "long.csv"
    write_site_csv(str(path), ds, long=True, provenance_value="model-1")
    with open(path, newline="") as handle:
        rows = list(csv.reader(handle))
    assert rows[0] == ["subject_id", "site_id", "age", "region", "value",
                       PROVENANCE_COLUMN]
    assert len(rows) == 1 + 5 * 2
    by_subject_region = {(r[0], r[3]): float(r[4]) for r in rows[1:]}
    for rec in ds.records:
        for region, value in rec.metrics.items():
            assert by_subject_region[(rec.subject_id, region)] == value
    assert all(r[5] == "model-1" for r in rows[1:])


def test_provenance_column_round_trips(tmp_path):
    ds = _gnarly_dataset(n=4)
    path = tmp_path / "harmonized.csv"
    write_site_csv(str(path), ds, provenance_value="clinical:refsite")
    table = read_site_csv(str(path), _SCHEMA)
    assert table.has_provenance
    assert set(table.provenance.values()) == {"clinical:refsite"}
    # the marker column must not be mistaken for a region metric
    assert table.dataset.region_ids == ("rA", "rB")


def test_header_only_file_loads_as_empty_site(tmp_path):
    path = tmp_path / "empty.csv"
    path.write_text("subject_id,site_id,age,rA\n")
    table = read_site_csv(str(path), _SCHEMA)
    assert table.dataset.n_subjects == 0
    assert table.dataset.site_id == "unspecified"


@pytest.mark.parametrize(
    "content,message",
    [
        ("", "missing header"),
        ("subject_id,site_id,age,rA,rA\ns1,x,30,1,2\n", "duplicate column"),
        ("subject_id,age,rA\ns1,30,1\n", "missing required column 'site_id'"),
        ("subject_id,site_id,rA\ns1,x,1\n", "missing covariate column 'age'"),
        ("subject_id,site_id,age\ns1,x,30\n", "no region metric columns"),
        ("subject_id,site_id,age,rA\ns1,x,30\n", "expected 4 cells"),
        ("subject_id,site_id,age,rA\n,x,30,1\n", "empty subject_id"),
        ("subject_id,site_id,age,rA\ns1,x,30,1\ns2,y,40,2\n", "one site per file"),
        ("subject_id,site_id,age,rA\ns1,x,30,oops\n", "column 'rA'"),
        ("subject_id,site_id,age,rA\ns1,x,thirty,1\n", "column 'age'"),
        ("subject_id,site_id,age,rA\ns1,,30,1\n", "empty site_id"),
    ],
)
def test_malformed_tables_are_rejected(tmp_path, content, message):
    path = tmp_path / "bad.csv"
    path.write_text(content)
    with pytest.raises(SchemaError, match=message):
        read_site_csv(str(path), _SCHEMA)


def test_tsv_formats_floats_for_round_trip(tmp_path):
    path = tmp_path / "rows.tsv"
    write_tsv(
        str(path),
        [{"name": "a", "value": 1.0 / 3.0, "n": 3}],
        ["name", "value", "n"],
    )
    lines = path.read_text().splitlines()
    assert lines[0] == "name\tvalue\tn"
    name, value, n = lines[1].split("\t")
    assert (name, n) == ("a", "3")
    assert float(value) == 1.0 / 3.0


# ---------------------------------------------------------------------------
# model persistence
# ---------------------------------------------------------------------------


def test_bundle_round_trips_field_for_field(tmp_path, tiny_pair):
    ref, mov = tiny_pair
    bundle = fit_bundle(ref, mov, Hyperparameters())  # auto-tuned lambda
    path = tmp_path / "model.json"
    save_bundle(str(path), bundle)
    loaded = load_bundle(str(path))
    assert loaded.reference_site_id == bundle.reference_site_id
    assert loaded.moving_site_id == bundle.moving_site_id
    assert loaded.metric_name == bundle.metric_name
    assert loaded.hyper == bundle.hyper
    assert loaded.basis == bundle.basis
    assert set(loaded.models) == set(bundle.models)
    for region_id, model in bundle.models.items():
        other = loaded.models[region_id]
        assert other.beta_ref == model.beta_ref
        assert other.var_ref == model.var_ref
        assert other.beta_mov == model.beta_mov
        assert other.var_mov == model.var_mov
    assert loaded.qc == bundle.qc
    assert loaded.tuned_lambda == bundle.tuned_lambda
    assert bundle.tuned_lambda  # the auto-tuned run must have recorded it


def test_bundle_with_fixed_lambda_round_trips(tmp_path, tiny_pair):
    ref, mov = tiny_pair
    bundle = fit_bundle(ref, mov, Hyperparameters(lam=(0.5, 1.0, 2.0)))
    path = tmp_path / "model.json"
    save_bundle(str(path), bundle)
    loaded = load_bundle(str(path))
    assert loaded.hyper.lam == (0.5, 1.0, 2.0)
    assert loaded.tuned_lambda == {}


def test_model_file_validation(tmp_path, tiny_pair):
    ref, mov = tiny_pair
    payload = bundle_to_dict(fit_bundle(ref, mov, Hyperparameters(lam=0.0)))
    with pytest.raises(SchemaError, match="not a harmonization model"):
        bundle_from_dict({"format": "something-else", "version": 1})
    newer = dict(payload, version=2)
    with pytest.raises(SchemaError, match="newer"):
        bundle_from_dict(newer)
    with pytest.raises(SchemaError, match="version"):
        bundle_from_dict(dict(payload, version="one"))
    broken = json.loads(json.dumps(payload))
    del broken["models"]
    with pytest.raises(SchemaError, match="missing field"):
        bundle_from_dict(broken)
    garbage = tmp_path / "model.json"
    garbage.write_text("{not json")
    with pytest.raises(SchemaError, match="not valid JSON"):
        load_bundle(str(garbage))


def test_json_helpers(tmp_path):
    path = tmp_path / "payload.json"
    save_json(str(path), {"b": 2, "a": [1.5, "x"]})
    assert load_json(str(path), "payload") == {"b": 2, "a": [1.5, "x"]}
    listfile = tmp_path / "list.json"
    listfile.write_text("[1, 2]")
    with pytest.raises(SchemaError, match="object"):
        load_json(str(listfile), "payload")


# ---------------------------------------------------------------------------
# run configuration
# ---------------------------------------------------------------------------


def test_run_config_defaults():
    run = parse_run_config({})
    assert run.metric_name == "md"
    assert run.covariate_names == ()
    assert run.hyper == Hyperparameters()
    assert run.hyper.lam is None
    assert (run.seed, run.threads) == (0, 1)
    assert run.experiment == {}


def test_run_config_full_parse(tmp_path):
    cfg = {
        "metric_name": "fa",
        "covariates": [
            {"name": "age", "type": "numeric"},
            {"name": "sex", "type": "encoded"},
        ],
        "basis": {"degree": 3, "mode": "monomials"},
        "hyper": {
            "nu": 2.0,
            "tau": 1.5,
            "lambda": [0.1, 0.2, 0.3, 0.4],
            "autotune": {"k": 3.0, "lambda_min": 1e-2, "max_iters": 30,
                         "grid_points": 101},
        },
        "seed": 99,
        "threads": 4,
        "experiment": {
            "generator": {"n_subjects": 50},
            "bias": {"A": 1.1},
            "repetitions": 3,
            "bias_grid": {"S_values": [0.5, 1.5], "M_values": [1.0]},
        },
    }
    path = tmp_path / "run.json"
    save_json(str(path), cfg)
    run = load_run_config(str(path))
    assert run.metric_name == "fa"
    assert run.covariate_names == ("age", "sex")
    assert run.covariate_types == ("numeric", "encoded")
    assert run.hyper.degree == 3
    assert run.hyper.lam == (0.1, 0.2, 0.3, 0.4)
    assert run.hyper.autotune.k == 3.0
    assert run.threads == 4
    assert run.experiment["bias_grid"]["S_values"] == [0.5, 1.5]
    assert run.schema().metric_name == "fa"
    assert run.schema(("rA",)).region_ids == ("rA",)


@pytest.mark.parametrize(
    "cfg,message",
    [
        ({"metric": "fa"}, "unknown keys"),
        ({"metric_name": ""}, "metric_name"),
        ({"covariates": [{"name": "age", "kind": "numeric"}]}, "covariates"),
        ({"covariates": [{"name": "", "type": "numeric"}]}, "non-empty name"),
        ({"covariates": [{"name": "age", "type": "categorical"}]}, "type"),
        ({"basis": {"order": 2}}, "basis"),
        ({"hyper": {"lamda": 1.0}}, "hyper"),
        ({"hyper": {"lambda": "big"}}, "lambda"),
        ({"hyper": {"autotune": {"steps": 3}}}, "autotune"),
        ({"experiment": {"warp": {}}}, "experiment"),
        ({"experiment": {"bias_grid": {"S": [1.0]}}}, "bias_grid"),
        ({"seed": "zero"}, "seed"),
        ({"seed": True}, "seed"),
        ({"threads": 0}, "threads"),
    ],
)
def test_run_config_rejects_malformed_sections(cfg, message):
    with pytest.raises(SchemaError, match=message):
        parse_run_config(cfg)
