"""Command-line front-end.

Subcommands wrap the library operations one-to-one: fit, apply, qc, tune,
simulate, evaluate. Exit codes: 0 success, 2 schema problems, 3 numerical
failures, 4 references to unknown sites/regions/covariates. Everything
random is driven by config seeds (no system entropy), so rerunning a
command reproduces its outputs byte for byte, whatever --threads says.
"""

from __future__ import annotations

import os
import sys
import warnings

import click

from . import evaluate as ev
from . import io as cio
from .errors import (
    AlignmentError,
    CombatError,
    ConvergenceFailure,
    CovariateMismatch,
    DegenerateVariance,
    InsufficientData,
    InsufficientRegions,
    RegionMismatch,
    SchemaError,
    SingularDesign,
    UnknownRegion,
    UnknownSite,
)
from .harmonize import apply as apply_bundle
from .harmonize import auto_tune, fit_bundle
from .plots import render_report
from .synth import (
    BiasSpec,
    GeneratorSpec,
    default_reference_spec,
    generate_reference,
    inject_bias,
    preset_biases,
)
from .types import SiteDataset

EXIT_SCHEMA = 2
EXIT_NUMERIC = 3
EXIT_REFERENCE = 4

_EXIT_CODES = (
    (
        (
            SingularDesign,
            DegenerateVariance,
            ConvergenceFailure,
            InsufficientData,
            InsufficientRegions,
        ),
        EXIT_NUMERIC,
    ),
    (
        (UnknownRegion, UnknownSite, CovariateMismatch, RegionMismatch, AlignmentError),
        EXIT_REFERENCE,
    ),
    ((SchemaError,), EXIT_SCHEMA),
)


def _exit_code(exc: CombatError) -> int:
    for classes, code in _EXIT_CODES:
        if isinstance(exc, classes):
            return code
    return EXIT_SCHEMA


def _fail(exc: CombatError) -> None:
    click.echo(f"error: {type(exc).__name__}: {exc}", err=True)
    sys.exit(_exit_code(exc))


def _guarded(fn):
    """Run fn, translating library errors into the exit-code policy."""
    try:
        fn()
    except CombatError as exc:
        _fail(exc)


@click.group()
@click.option("--threads", type=int, default=None, help="Worker threads (overrides config).")
@click.option("--seed", type=int, default=None, help="Base seed (overrides config).")
@click.pass_context
def main(ctx, threads, seed):
    """Sitewise harmonization of per-region brain metrics."""
    if threads is not None and threads < 1:
        click.echo("error: SchemaError: --threads must be >= 1", err=True)
        sys.exit(EXIT_SCHEMA)
    ctx.obj = {"threads": threads, "seed": seed}


def _effective(ctx_obj, config: cio.RunConfig):
    threads = ctx_obj["threads"] if ctx_obj["threads"] is not None else config.threads
    seed = ctx_obj["seed"] if ctx_obj["seed"] is not None else config.seed
    return threads, seed


def _load_pair(reference_path, moving_path, config):
    schema = config.schema()
    ref = cio.read_site_csv(reference_path, schema)
    mov = cio.read_site_csv(moving_path, schema)
    return ref, mov


def _qc_rows(bundle) -> list[dict]:
    rows = []
    for region_id in bundle.region_ids:
        lam = bundle.tuned_lambda.get(region_id)
        rows.append(
            {
                "region": region_id,
                "d_b": bundle.qc[region_id],
                "tuned_lambda_max": max(lam) if lam else float("nan"),
            }
        )
    return rows


@main.command()
@click.option("--reference", "reference_path", required=True, type=click.Path(exists=True))
@click.option("--moving", "moving_path", required=True, type=click.Path(exists=True))
@click.option("--config", "config_path", required=True, type=click.Path(exists=True))
@click.option("--out", "out_path", required=True, type=click.Path())
@click.option("--emit-table", "table_path", type=click.Path(), default=None,
              help="Also write the per-region QC table as TSV.")
@click.pass_obj
def fit(obj, reference_path, moving_path, config_path, out_path, table_path):
    """Fit a harmonization model from a reference and a moving site."""

    def run():
        config = cio.load_run_config(config_path)
        threads, _seed = _effective(obj, config)
        ref, mov = _load_pair(reference_path, moving_path, config)
        bundle = fit_bundle(ref.dataset, mov.dataset, config.hyper, threads=threads)
        cio.save_bundle(out_path, bundle)
        click.echo(f"fit {len(bundle.region_ids)} regions "
                   f"({mov.dataset.site_id} -> {ref.dataset.site_id})")
        for row in _qc_rows(bundle):
            lam_txt = (
                f"  lambda_max={cio.format_float(row['tuned_lambda_max'])}"
                if bundle.tuned_lambda
                else ""
            )
            click.echo(
                f"  {row['region']}: d_b={cio.format_float(row['d_b'])}{lam_txt}"
            )
        if table_path:
            cio.write_tsv(
                table_path, _qc_rows(bundle), ["region", "d_b", "tuned_lambda_max"]
            )

    _guarded(run)


@main.command("apply")
@click.option("--model", "model_path", required=True, type=click.Path(exists=True))
@click.option("--in", "in_path", required=True, type=click.Path(exists=True))
@click.option("--out", "out_path", required=True, type=click.Path())
@click.option("--long", "long_format", is_flag=True, default=False,
              help="Write one (subject, region) pair per row.")
@click.option("--scale-mode", type=click.Choice(["std", "variance"]), default="std",
              help="Residual rescaling rule.")
@click.pass_obj
def apply_cmd(obj, model_path, in_path, out_path, long_format, scale_mode):
    """Harmonize a table of moving-site subjects with a fitted model."""

    def run():
        bundle = cio.load_bundle(model_path)
        schema = cio.TableSchema(
            bundle.metric_name,
            bundle.basis.covariate_names,
            bundle.region_ids,
        )
        table = cio.read_site_csv(in_path, schema)
        if table.has_provenance:
            warnings.warn(
                f"{in_path} already carries harmonized values "
                "(harmonized_by column is set); applying a model on top of "
                "them composes two corrections",
                RuntimeWarning,
                stacklevel=1,
            )
        harmonized = apply_bundle(bundle, list(table.dataset.records), scale_mode)
        out_dataset = SiteDataset(
            table.dataset.site_id, bundle.metric_name, tuple(harmonized)
        )
        stamp = (
            f"{bundle.metric_name}:{bundle.moving_site_id}"
            f"->{bundle.reference_site_id}"
        )
        cio.write_site_csv(
            out_path,
            out_dataset,
            columns=None if long_format else table.columns,
            provenance_value=stamp,
            long=long_format,
        )
        click.echo(
            f"harmonized {out_dataset.n_subjects} subjects "
            f"x {len(bundle.region_ids)} regions -> {out_path}"
        )

    _guarded(run)


@main.command()
@click.option("--model", "model_path", required=True, type=click.Path(exists=True))
@click.option("--reference", "reference_path", required=True, type=click.Path(exists=True))
@click.option("--moving", "moving_path", required=True, type=click.Path(exists=True))
@click.option("--emit-table", "table_path", type=click.Path(), default=None)
@click.pass_obj
def qc(obj, model_path, reference_path, moving_path, table_path):
    """Recompute distribution-overlap QC for a model on given tables."""

    def run():
        from .harmonize import qc_bhattacharyya

        bundle = cio.load_bundle(model_path)
        schema = cio.TableSchema(
            bundle.metric_name, bundle.basis.covariate_names, bundle.region_ids
        )
        ref = cio.read_site_csv(reference_path, schema)
        mov = cio.read_site_csv(moving_path, schema)
        harmonized = apply_bundle(bundle, list(mov.dataset.records))
        rows = []
        for region_id in bundle.region_ids:
            model = bundle.models[region_id]
            d_b = qc_bhattacharyya(
                ref.dataset,
                harmonized,
                region_id,
                model.beta_ref,
                bundle.basis,
            )
            rows.append(
                {
                    "region": region_id,
                    "d_b": d_b,
                    "d_b_at_fit": bundle.qc[region_id],
                }
            )
            click.echo(f"  {region_id}: d_b={cio.format_float(d_b)}")
        if table_path:
            cio.write_tsv(table_path, rows, ["region", "d_b", "d_b_at_fit"])

    _guarded(run)


@main.command()
@click.option("--reference", "reference_path", required=True, type=click.Path(exists=True))
@click.option("--moving", "moving_path", required=True, type=click.Path(exists=True))
@click.option("--config", "config_path", required=True, type=click.Path(exists=True))
@click.option("--region", "region_id", default=None,
              help="Tune one region only (default: all).")
@click.option("--tau1", type=float, default=None, help="Lower separation tolerance.")
@click.option("--tau2", type=float, default=None, help="Upper separation tolerance.")
@click.option("--emit-table", "table_path", type=click.Path(), default=None)
@click.pass_obj
def tune(obj, reference_path, moving_path, config_path, region_id, tau1, tau2, table_path):
    """Search the penalty scale per region and print the diagnostics."""

    def run():
        config = cio.load_run_config(config_path)
        ref, mov = _load_pair(reference_path, moving_path, config)
        regions = (
            [region_id] if region_id is not None else list(ref.dataset.region_ids)
        )
        rows = []
        for rid in regions:
            lam, diag = auto_tune(
                ref.dataset, mov.dataset, rid, config.hyper, tau1=tau1, tau2=tau2
            )
            rows.append(
                {
                    "region": rid,
                    "lambda_max": float(max(lam)),
                    "converged": str(diag.converged),
                    "scales_tried": len(diag.lambda_trace),
                    "d_min": diag.d_min,
                    "d_max": diag.d_max,
                    "d_1": diag.d_1,
                    "d_2": diag.d_2,
                }
            )
            click.echo(
                f"  {rid}: lambda_max={cio.format_float(float(max(lam)))} "
                f"converged={diag.converged} scales={len(diag.lambda_trace)}"
            )
        if table_path:
            cio.write_tsv(
                table_path,
                rows,
                ["region", "lambda_max", "converged", "scales_tried",
                 "d_min", "d_max", "d_1", "d_2"],
            )

    _guarded(run)


@main.command()
@click.option("--spec", "spec_path", required=True, type=click.Path(exists=True))
@click.option("--bias", "bias_path", type=click.Path(exists=True), default=None,
              help="Bias knobs to inject; omit for the unbiased reference draw.")
@click.option("--out", "out_path", required=True, type=click.Path())
@click.option("--site-id", default=None, help="Override the output site id.")
@click.option("--long", "long_format", is_flag=True, default=False)
@click.pass_obj
def simulate(obj, spec_path, bias_path, out_path, site_id, long_format):
    """Generate a synthetic cohort table from a generator spec."""

    def run():
        spec = GeneratorSpec.from_config(cio.load_json(spec_path, "generator spec"))
        if obj["seed"] is not None:
            spec = GeneratorSpec.from_config(
                {**spec.as_config(), "seed": obj["seed"]}
            )
        if bias_path is None:
            dataset, _truth = generate_reference(
                spec, site_id=site_id or "reference"
            )
        else:
            bias = BiasSpec.from_config(cio.load_json(bias_path, "bias spec"))
            dataset = inject_bias(
                spec,
                bias,
                spec.n_subjects,
                spec.age_range,
                spec.seed,
                site_id=site_id or "moving",
            )
        cio.write_site_csv(out_path, dataset, long=long_format)
        click.echo(
            f"wrote {dataset.n_subjects} subjects x "
            f"{len(dataset.region_ids)} regions -> {out_path}"
        )

    _guarded(run)


_EXPERIMENT_NAMES = ("bias_grid", "sample_size", "age_window", "nu_sweep")


def _run_experiment(name, config: cio.RunConfig, seed: int, threads: int):
    exp = config.experiment
    if "generator" in exp:
        spec = GeneratorSpec.from_config(exp["generator"])
    else:
        spec = default_reference_spec()
    bias = (
        BiasSpec.from_config(exp["bias"])
        if "bias" in exp
        else preset_biases()["amplified"]
    )
    repetitions = exp.get("repetitions", 30)
    hyper = config.hyper
    common = dict(repetitions=repetitions, base_seed=seed, threads=threads)
    if name == "bias_grid":
        return ev.run_bias_grid(spec, hyper, **exp.get("bias_grid", {}), **common)
    if name == "sample_size":
        return ev.run_sample_size_curve(
            spec, bias, hyper, **exp.get("sample_size", {}), **common
        )
    if name == "age_window":
        return ev.run_age_window_curve(
            spec, bias, hyper, **exp.get("age_window", {}), **common
        )
    if name == "nu_sweep":
        return ev.run_nu_sweep(spec, bias, hyper, **exp.get("nu_sweep", {}), **common)
    raise SchemaError(f"unknown experiment '{name}'")


@main.command()
@click.option("--experiment", "experiment_name", required=True,
              type=click.Choice(_EXPERIMENT_NAMES))
@click.option("--config", "config_path", required=True, type=click.Path(exists=True))
@click.option("--out", "out_dir", required=True, type=click.Path())
@click.option("--emit-table", "table_path", type=click.Path(), default=None,
              help="Also write the flat metric table to this TSV path.")
@click.option("--figures/--no-figures", default=True,
              help="Render the experiment figure next to the report.")
@click.pass_obj
def evaluate(obj, experiment_name, config_path, out_dir, table_path, figures):
    """Run one experiment sweep and write its report (and figure)."""

    def run():
        config = cio.load_run_config(config_path)
        threads, seed = _effective(obj, config)
        report = _run_experiment(experiment_name, config, seed, threads)
        os.makedirs(out_dir, exist_ok=True)
        json_path = os.path.join(out_dir, f"{report.experiment_id}_report.json")
        csv_path = os.path.join(out_dir, f"{report.experiment_id}_report.csv")
        cio.save_json(json_path, report.to_json_dict())
        rows = report.to_rows()
        columns = ["experiment", "condition", "repetition", "metric", "value"]
        lines = [",".join(columns)]
        for row in rows:
            lines.append(
                ",".join(
                    cio.format_float(row[c]) if isinstance(row[c], float) else str(row[c])
                    for c in columns
                )
            )
        cio.atomic_write_text(csv_path, "\n".join(lines) + "\n")
        written = [json_path, csv_path]
        if table_path:
            cio.write_tsv(table_path, rows, columns)
            written.append(table_path)
        if figures:
            fig_path = os.path.join(out_dir, f"{report.experiment_id}.png")
            render_report(report, fig_path)
            written.append(fig_path)
        for cond in report.conditions:
            if cond.error:
                click.echo(
                    f"  condition {cond.condition}: FAILED ({cond.error})", err=True
                )
        click.echo("wrote " + ", ".join(written))

    _guarded(run)


if __name__ == "__main__":
    main()
