"""Command-line front end.

Subcommands: ``validate``, ``fit``, ``transport``, ``indirect``, ``synth``,
``simulate``. Every run writes ``manifest.json`` into the output directory
(resolved options, SHA-256 checksums of all inputs, library versions), so
a run can be reproduced exactly from its manifest; downstream commands
re-check those checksums and refuse stale fit artifacts. Options can also
be set through environment variables prefixed ``AGGCATE_`` (for example
``AGGCATE_FIT_WEIGHTING=identity``).

Exit codes: 0 success, 1 numerical failure, 2 input error.
"""

from __future__ import annotations

import functools
import hashlib
import json
import sys
from pathlib import Path

import click
import numpy as np

from . import __version__, estimands, gmm, inference, simulate, synthpop, \
    tilting
from .aggdata import (dataset_to_text, load_covariate_sample,
                      load_meta_dataset, load_schema, save_covariate_sample)
from .cate import LinearCate
from .errors import DataValidationError, NumericalError
from .tilting import TiltConfig

EXIT_INPUT_ERROR = 2
EXIT_NUMERICAL_ERROR = 1


def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def _versions() -> dict:
    import scipy
    return {"aggcate": __version__, "numpy": np.__version__,
            "scipy": scipy.__version__,
            "python": ".".join(map(str, sys.version_info[:3]))}


def _write_json(path, obj) -> None:
    with open(path, "w") as f:
        json.dump(obj, f, indent=2, sort_keys=True)
        f.write("\n")


def write_manifest(out_dir: Path, command: str, options: dict,
                   inputs: dict[str, str]) -> None:
    manifest = {
        "command": command,
        "options": options,
        "inputs": {label: {"path": str(Path(p).resolve()),
                           "sha256": _sha256(p)}
                   for label, p in inputs.items()},
        "versions": _versions(),
    }
    _write_json(out_dir / "manifest.json", manifest)


def check_manifest_inputs(fit_dir: Path) -> dict:
    """Load a fit manifest and verify its recorded inputs are unchanged."""
    path = fit_dir / "manifest.json"
    if not path.exists():
        raise DataValidationError(f"no manifest found at {path}")
    with open(path) as f:
        manifest = json.load(f)
    for label, entry in manifest["inputs"].items():
        p = entry["path"]
        if not Path(p).exists():
            raise DataValidationError(
                f"stale fit: recorded input {label!r} missing at {p}")
        if _sha256(p) != entry["sha256"]:
            raise DataValidationError(
                f"stale fit: input {label!r} at {p} changed since the fit "
                "was produced (checksum mismatch)")
    return manifest


def handle_errors(fn):
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except FileNotFoundError as exc:
            click.echo(f"input error: file not found: {exc.filename}",
                       err=True)
            sys.exit(EXIT_INPUT_ERROR)
        except DataValidationError as exc:
            click.echo(f"input error [{type(exc).__name__}]: {exc}", err=True)
            sys.exit(EXIT_INPUT_ERROR)
        except NumericalError as exc:
            click.echo(f"numerical failure [{type(exc).__name__}]: {exc}",
                       err=True)
            sys.exit(EXIT_NUMERICAL_ERROR)
    return wrapper


@click.group(context_settings={"auto_envvar_prefix": "AGGCATE"})
@click.option("--seed", type=int, default=None,
              help="Global seed override for commands that sample.")
@click.option("--out", type=click.Path(), default="out", show_default=True,
              help="Output directory.")
@click.option("--config", type=click.Path(exists=True), default=None,
              help="YAML file of option defaults (option name -> value).")
@click.pass_context
def main(ctx, seed, out, config):
    """Estimate target-population treatment effects from aggregate trial
    data."""
    defaults = {}
    if config:
        import yaml
        with open(config) as f:
            defaults = yaml.safe_load(f) or {}
        ctx.default_map = {cmd: defaults for cmd in
                           ("validate", "fit", "transport", "indirect",
                            "synth", "simulate")}
    ctx.obj = {"seed": seed, "out": Path(out), "config": config}


def _outdir(ctx) -> Path:
    out = ctx.obj["out"]
    out.mkdir(parents=True, exist_ok=True)
    return out


@main.command()
@click.option("--effects", required=True, type=click.Path(exists=True))
@click.option("--moments", required=True, type=click.Path(exists=True))
@click.option("--schema", required=True, type=click.Path(exists=True))
@click.option("--target", type=click.Path(exists=True), default=None,
              help="Optional covariate sample to validate against the schema.")
@click.pass_context
@handle_errors
def validate(ctx, effects, moments, schema, target):
    """Validate input files and print the dataset dimensions."""
    dataset = load_meta_dataset(effects, moments, schema)
    click.echo(dataset_to_text(dataset), nl=False)
    if target:
        sample = load_covariate_sample(target, dataset.schema, "target")
        click.echo(f"target sample: n = {sample.n}")
    click.echo("ok")


def _resolve_base(base, base_file, copula_spec, schema, target_sample, seed):
    """Materialize the base (Q) covariate sample per the chosen source."""
    if base == "target-sample":
        if target_sample is None:
            raise DataValidationError(
                "--base target-sample needs --target")
        from .aggdata import CovariateSample
        return CovariateSample(schema, target_sample.columns, "base"), {}
    if base == "file":
        if not base_file:
            raise DataValidationError("--base file needs --base-file")
        return load_covariate_sample(base_file, schema, "base"), \
            {"base_sample": base_file}
    if base == "copula":
        if not copula_spec:
            raise DataValidationError("--base copula needs --copula-spec")
        spec = synthpop.load_copula_spec(copula_spec)
        if seed is not None:
            from dataclasses import replace
            spec = replace(spec, seed=seed)
        return synthpop.sample(spec, role="base", schema=schema), \
            {"copula_spec": copula_spec}
    raise DataValidationError(f"unknown base distribution choice {base!r}")


def _run_fit_pipeline(dataset, base_sample, basis, weighting, tilt_tol,
                      max_iter, n_target, treat_q_exact):
    model = LinearCate.from_formula(basis, dataset.schema)
    config = TiltConfig(tol=tilt_tol, max_iter=max_iter)
    tilts = tilting.solve_all_tilts(base_sample, dataset, config)
    reps = tilting.evaluate_representers(tilts, base_sample, dataset)
    system = gmm.build_system(reps, dataset, model, base_sample, tilts)
    fit_res = gmm.fit(system, weighting=weighting)
    jac = gmm.compute_jacobians(system, fit_res.theta, W=fit_res.W)
    covs = inference.default_trial_covariances(dataset, tilts, base_sample)
    variance = inference.assemble_variance(fit_res, system, jac, covs,
                                           n_target=n_target,
                                           treat_q_exact=treat_q_exact)
    return model, tilts, system, fit_res, variance


def _fit_report_dict(dataset, model, tilts, system, fit_res, variance,
                     basis, weighting, n_target):
    return {
        "basis": model.describe(),
        "basis_formula": basis,
        "weighting": fit_res.weighting,
        "requested_weighting": weighting,
        "theta": dict(zip(model.term_names, fit_res.theta.tolist())),
        "theta_cov": fit_res.theta_cov.tolist(),
        "v_theta": variance.v_theta.tolist(),
        "j_stat": fit_res.j_stat,
        "foc_norm": fit_res.foc_norm,
        "rank_ratio": fit_res.rank_ratio,
        "moment_residuals": {
            f"{k[0]}|{k[1] or 'overall'}|{k[2] or ''}": r
            for k, r in zip(system.representers.keys,
                            fit_res.residuals.tolist())},
        "tilts": {tid: {"eta": t.eta.tolist(),
                        "residual_norm": t.residual_norm,
                        "iterations": t.iterations,
                        "moments": list(t.moment_labels)}
                  for tid, t in tilts.items()},
        "sizes": {"n_q": system.base.n, "n_target": n_target,
                  "n_total": variance.n_total,
                  "trials": {t.trial_id: t.n for t in dataset.trials}},
        "pi": variance.pi,
        "psd_repair": variance.psd_repair,
        "variance_contributions": {
            k: float(np.trace(v)) for k, v in variance.contributions.items()},
        "trial_ids": list(dataset.trial_ids),
        "dimensions": {"J": system.J, "d": system.d},
    }


def _fit_report_text(report) -> str:
    lines = [f"GMM CATE fit ({report['weighting']} weighting)",
             f"J = {report['dimensions']['J']} moments, "
             f"d = {report['dimensions']['d']} parameters", "",
             "theta:"]
    cov = np.asarray(report["theta_cov"])
    for i, (name, val) in enumerate(report["theta"].items()):
        lines.append(f"  {name:>16}  {val: .5f}  (se {np.sqrt(cov[i, i]):.5f})")
    lines += ["", f"J-statistic: {report['j_stat']}",
              f"first-order-condition norm: {report['foc_norm']:.2e}",
              f"rank ratio (sigma_min/sigma_max): {report['rank_ratio']:.2e}",
              "tilt residual norms: "
              + ", ".join(f"{tid}={t['residual_norm']:.1e}"
                          for tid, t in report["tilts"].items())]
    return "\n".join(lines) + "\n"


@main.command()
@click.option("--effects", required=True, type=click.Path(exists=True))
@click.option("--moments", required=True, type=click.Path(exists=True))
@click.option("--schema", required=True, type=click.Path(exists=True))
@click.option("--basis", required=True, help="CATE formula, e.g. '~ 1 + x'.")
@click.option("--base", type=click.Choice(["target-sample", "file", "copula"]),
              default="target-sample", show_default=True,
              help="Source of the base (Q) covariate sample.")
@click.option("--base-file", type=click.Path(exists=True), default=None)
@click.option("--copula-spec", type=click.Path(exists=True), default=None)
@click.option("--target", type=click.Path(exists=True), default=None,
              help="Target covariate sample (required for --base "
                   "target-sample; otherwise sets n_target).")
@click.option("--weighting",
              type=click.Choice(["inverse-se2", "two-step", "identity"]),
              default="inverse-se2", show_default=True)
@click.option("--tilt-tol", type=float, default=1e-11, show_default=True)
@click.option("--max-iter", type=int, default=200, show_default=True)
@click.option("--treat-q-exact", is_flag=True, default=False,
              help="Drop the base-sample Monte Carlo variance contribution.")
@click.option("--dry-run", is_flag=True, default=False,
              help="Validate and print moment-system dimensions, no fit.")
@click.pass_context
@handle_errors
def fit(ctx, effects, moments, schema, basis, base, base_file, copula_spec,
        target, weighting, tilt_tol, max_iter, treat_q_exact, dry_run):
    """Fit the CATE parameters from aggregate trial data."""
    dataset = load_meta_dataset(effects, moments, schema)
    target_sample = None
    if target:
        target_sample = load_covariate_sample(target, dataset.schema, "target")
    model = LinearCate.from_formula(basis, dataset.schema)
    if dry_run:
        click.echo(dataset_to_text(dataset), nl=False)
        click.echo(f"moment system: J = {dataset.J}, d = {model.dim} "
                   f"({', '.join(model.term_names)})")
        return

    base_sample, extra_inputs = _resolve_base(
        base, base_file, copula_spec, dataset.schema, target_sample,
        ctx.obj["seed"])
    n_target = target_sample.n if target_sample is not None else base_sample.n
    model, tilts, system, fit_res, variance = _run_fit_pipeline(
        dataset, base_sample, basis, weighting, tilt_tol, max_iter,
        n_target, treat_q_exact)

    out = _outdir(ctx)
    report = _fit_report_dict(dataset, model, tilts, system, fit_res,
                              variance, basis, weighting, n_target)
    _write_json(out / "fit_report.json", report)
    (out / "fit_report.txt").write_text(_fit_report_text(report))
    inputs = {"effects": effects, "moments": moments, "schema": schema}
    inputs.update(extra_inputs)
    if target:
        inputs["target"] = target
    write_manifest(out, "fit", {
        "basis": basis, "base": base, "weighting": weighting,
        "tilt_tol": tilt_tol, "max_iter": max_iter,
        "treat_q_exact": treat_q_exact, "seed": ctx.obj["seed"],
    }, inputs)
    click.echo(f"fit written to {out}")


def _load_fit(fit_dir: Path):
    manifest = check_manifest_inputs(fit_dir)
    with open(fit_dir / "fit_report.json") as f:
        report = json.load(f)
    schema_path = manifest["inputs"]["schema"]["path"]
    schema = load_schema(schema_path)
    model = LinearCate.from_formula(report["basis_formula"], schema)
    theta = np.array([report["theta"][name] for name in model.term_names])
    fit_res = gmm.CateFit(
        model=model, theta=theta, W=np.empty(0), weighting=report["weighting"],
        residuals=np.asarray(list(report["moment_residuals"].values())),
        foc_norm=report["foc_norm"], rank_ratio=report["rank_ratio"],
        theta_cov=np.asarray(report["theta_cov"]), j_stat=report["j_stat"])
    variance = inference.VarianceReport(
        omega=np.empty(0), v_theta=np.asarray(report["v_theta"]),
        theta_cov=np.asarray(report["theta_cov"]), contributions={},
        pi=report["pi"], n_total=report["sizes"]["n_total"],
        n_target=report["sizes"]["n_target"],
        psd_repair=report["psd_repair"], j_stat=report["j_stat"],
        trial_ids=tuple(report["trial_ids"]))
    return fit_res, variance, schema


@main.command()
@click.option("--fit", "fit_dir", required=True, type=click.Path(exists=True),
              help="Directory written by the fit command.")
@click.option("--target", required=True, type=click.Path(exists=True))
@click.option("--subgroups", multiple=True,
              help="Subgroup filter such as 'lvef<=40,prehhf=yes'; repeatable.")
@click.pass_context
@handle_errors
def transport(ctx, fit_dir, target, subgroups):
    """Marginalize a fitted CATE over a target covariate sample."""
    fit_res, variance, schema = _load_fit(Path(fit_dir))
    target_sample = load_covariate_sample(target, schema, "target")
    results = [estimands.transport_ate(fit_res, target_sample, variance)]
    for expr in subgroups:
        results.append(estimands.subgroup_ate(fit_res, target_sample, expr,
                                              variance))
    out = _outdir(ctx)
    estimands.write_results_csv(results, out / "results.csv")
    write_manifest(out, "transport",
                   {"fit": str(fit_dir), "subgroups": list(subgroups),
                    "seed": ctx.obj["seed"]},
                   {"target": target,
                    "fit_report": str(Path(fit_dir) / "fit_report.json")})
    for r in results:
        click.echo(f"{r.label}: {r.psi_hat:.4f} (se {r.se:.4f}, 95% CI "
                   f"{r.ci95[0]:.4f} to {r.ci95[1]:.4f}, n={r.n_effective})")
    click.echo(f"results written to {out / 'results.csv'}")


@main.command()
@click.option("--fit1", required=True, type=click.Path(exists=True),
              help="Fit directory for the reference comparison (a=1 vs 0).")
@click.option("--fit2", required=True, type=click.Path(exists=True),
              help="Fit directory for the other comparison (a=2 vs 0).")
@click.option("--target", required=True, type=click.Path(exists=True))
@click.pass_context
@handle_errors
def indirect(ctx, fit1, fit2, target, ):
    """Indirect comparison (treatment 2 minus 1) in the target population."""
    fit_a, var_a, schema_a = _load_fit(Path(fit1))
    fit_b, var_b, schema_b = _load_fit(Path(fit2))
    if schema_a != schema_b:
        raise DataValidationError(
            "the two fits use different covariate schemas")
    target_sample = load_covariate_sample(target, schema_a, "target")
    result = estimands.indirect_comparison(fit_a, var_a, fit_b, var_b,
                                           target_sample)
    out = _outdir(ctx)
    estimands.write_results_csv([result], out / "results.csv")
    write_manifest(out, "indirect",
                   {"fit1": str(fit1), "fit2": str(fit2),
                    "seed": ctx.obj["seed"]},
                   {"target": target,
                    "fit1_report": str(Path(fit1) / "fit_report.json"),
                    "fit2_report": str(Path(fit2) / "fit_report.json")})
    click.echo(f"indirect: {result.psi_hat:.4f} (se {result.se:.4f})")


@main.command()
@click.option("--spec", required=True, type=click.Path(exists=True),
              help="Copula spec YAML (marginals, correlation, n, seed).")
@click.pass_context
@handle_errors
def synth(ctx, spec):
    """Generate a covariate sample from a Gaussian-copula spec."""
    cspec = synthpop.load_copula_spec(spec)
    if ctx.obj["seed"] is not None:
        from dataclasses import replace
        cspec = replace(cspec, seed=ctx.obj["seed"])
    sample = synthpop.sample(cspec, role="target")
    out = _outdir(ctx)
    save_covariate_sample(sample, out / "sample.csv")
    write_manifest(out, "synth", {"seed": cspec.seed, "n": cspec.n},
                   {"spec": spec})
    click.echo(f"wrote {sample.n} rows to {out / 'sample.csv'}")


@main.command(name="simulate")
@click.option("--scenario-set", type=click.Choice(["5trial", "single", "both"]),
              default="5trial", show_default=True)
@click.option("--scenarios", default=None,
              help="Comma-separated scenario ids to run (default: all).")
@click.option("--reps", type=int, default=1000, show_default=True)
@click.option("--methods", default=None,
              help="Comma-separated subset of cima,meta,metareg,ipd.")
@click.option("--jobs", type=int, default=1, show_default=True)
@click.pass_context
@handle_errors
def simulate_cmd(ctx, scenario_set, scenarios, reps, methods, jobs):
    """Run the Monte Carlo study and write the metrics table."""
    catalog = {"5trial": simulate.five_trial_scenarios(),
               "single": simulate.single_trial_scenarios(),
               "both": simulate.scenario_catalog()}[scenario_set]
    if scenarios:
        wanted = {s.strip() for s in scenarios.split(",")}
        catalog = [s for s in catalog if s.scenario_id in wanted]
        missing = wanted - {s.scenario_id for s in catalog}
        if missing:
            raise DataValidationError(f"unknown scenario ids {sorted(missing)}")
    if scenario_set == "single":
        method_list = ("cima", "ipd")
    else:
        method_list = simulate.METHODS
    if methods:
        method_list = tuple(m.strip() for m in methods.split(","))
        unknown = set(method_list) - set(simulate.METHODS)
        if unknown:
            raise DataValidationError(f"unknown methods {sorted(unknown)}")
    seed = ctx.obj["seed"] if ctx.obj["seed"] is not None else 42
    table = simulate.run_study(catalog, method_list, replications=reps,
                               seed=seed, jobs=jobs)
    out = _outdir(ctx)
    table.to_csv(out / "metrics.csv", index=False)
    write_manifest(out, "simulate",
                   {"scenario_set": scenario_set, "scenarios": scenarios,
                    "reps": reps, "methods": list(method_list), "jobs": jobs,
                    "seed": seed}, {})
    click.echo(f"metrics written to {out / 'metrics.csv'} "
               f"({len(table)} rows)")


if __name__ == "__main__":
    main()
