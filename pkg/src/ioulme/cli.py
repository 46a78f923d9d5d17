"""Command-line interface: fit, simulate, mcstudy, surface, diagnose.

All configuration is file-based (JSON) with a handful of override flags;
every run writes a manifest with the fully resolved configuration, seeds,
and input digests next to its outputs, sufficient to reproduce the run.
Exit codes: 0 success, 1 hard error, 2 fit returned but did not converge.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .covariance import KernelSpec
from .data import DataError, SchemaConfig, ingest_csv, write_csv
from .diagnostics import (
    information_limit_check,
    lan_expansion_check,
    score_clt_check,
    skeleton_dataset,
    studentized_normality,
    third_derivative_bound_check,
)
from .fitting import FitConfig, fit, profile_surface
from .likelihood import ParamVector
from .simulate import (
    DesignConfig,
    McConfig,
    generate_design,
    reporting_names,
    run_mc_study,
    simulate_responses,
)

__all__ = ["main"]


class CliError(RuntimeError):
    pass


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _load_json(path) -> dict:
    path = Path(path)
    try:
        return json.loads(path.read_text(encoding="utf-8"))
    except OSError as exc:
        raise CliError(f"cannot read {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise CliError(f"{path} is not valid JSON: {exc}") from exc


def _write_json(path: Path, payload: dict) -> None:
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_manifest(out: Path, subcommand: str, config: dict, seeds: dict, inputs: dict, t_start: float, extras: dict | None = None) -> None:
    manifest = {
        "subcommand": subcommand,
        "artifact_version": __version__,
        "config": config,
        "seeds": seeds,
        "input_digests": {name: _sha256(Path(p)) for name, p in inputs.items()},
        "wall_time_ms": (time.perf_counter() - t_start) * 1e3,
    }
    if extras:
        manifest.update(extras)
    _write_json(out / "manifest.json", manifest)


def _kernel_spec(raw: dict) -> KernelSpec:
    try:
        return KernelSpec.from_dict(raw.get("kernel", {}))
    except ValueError as exc:
        raise CliError(f"bad kernel spec: {exc}") from exc


def cmd_fit(args) -> int:
    t0 = time.perf_counter()
    out = _out_dir(args)
    schema = SchemaConfig.from_json(args.schema)
    fit_raw = _load_json(args.fit_config) if args.fit_config else {}
    spec = _kernel_spec(fit_raw)
    config = FitConfig.from_dict(fit_raw, spec)
    dataset, report = ingest_csv(args.data, schema)
    result = fit(dataset, spec, config)
    payload = result.to_json_dict(spec)
    payload["rows_dropped_missing_y"] = report.n_rows_dropped_missing_y
    _write_json(out / "fit_result.json", payload)
    inputs = {"data": args.data, "schema": args.schema}
    if args.fit_config:
        inputs["fit_config"] = args.fit_config
    _write_manifest(
        out,
        "fit",
        {"schema": schema.to_dict(), "fit": config.to_dict(spec), "kernel": spec.to_dict()},
        {},
        inputs,
        t0,
    )
    return 0 if result.converged else 2


def cmd_simulate(args) -> int:
    t0 = time.perf_counter()
    out = _out_dir(args)
    design_raw = _load_json(args.design)
    theta_raw = _load_json(args.theta)
    spec = _kernel_spec(theta_raw)
    design = DesignConfig.from_dict(design_raw)
    if args.seed is not None:
        design = replace(design, design_seed=args.seed)
    if args.design_seed is not None:
        design = replace(design, design_seed=args.design_seed)
    noise_seed = args.noise_seed if args.noise_seed is not None else (args.seed if args.seed is not None else 0)
    theta = ParamVector.from_dict(theta_raw, spec)
    skeleton = generate_design(design)
    dataset = simulate_responses(skeleton, theta, spec, noise_seed, replication=args.replication)
    schema = _simulation_schema()
    write_csv(dataset, out / "data.csv", schema)
    _write_json(out / "schema.json", schema.to_dict())
    _write_manifest(
        out,
        "simulate",
        {
            "design": design.to_dict(),
            "theta": theta.to_dict(spec),
            "kernel": spec.to_dict(),
            "replication": args.replication,
        },
        {"design_seed": design.design_seed, "noise_seed": noise_seed},
        {"design": args.design, "theta": args.theta},
        t0,
        extras={"n_rows": dataset.n_obs_total, "n_subjects": dataset.n_subjects},
    )
    return 0


def _simulation_schema() -> SchemaConfig:
    return SchemaConfig(id_col="id", time_col="t", y_col="y", x_cols=("x1", "x2"), z_cols=("z1", "z2"))


def _fmt(value: float) -> str:
    return repr(float(value))


def cmd_mcstudy(args) -> int:
    t0 = time.perf_counter()
    out = _out_dir(args)
    raw = _load_json(args.config)
    spec = _kernel_spec(raw)
    mc = McConfig.from_dict(raw, spec)
    if args.seed is not None:
        mc = replace(mc, noise_seed=args.seed)
    design = DesignConfig.from_dict(raw.get("design", {}))
    if args.seed is not None:
        design = replace(design, design_seed=args.seed)
    report = run_mc_study(mc, design, spec, threads=args.threads)

    _write_json(out / "report.json", report.to_json_dict())

    with (out / "table.csv").open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["parameter", "bias", "mcse"])
        for i, name in enumerate(report.param_names):
            writer.writerow([name, _fmt(report.bias[i]), _fmt(report.mcse[i])])

    internal_names = mc.true_theta.names(spec)
    with (out / "raw.csv").open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["replication", "converged", *internal_names, "sigma"])
        for m in range(report.n_replications):
            row = [str(m), "1" if report.converged[m] else "0"]
            row += [_fmt(v) for v in report.estimates_internal[m]]
            row += [_fmt(np.sqrt(report.estimates_internal[m][-1]))]
            writer.writerow(row)

    _write_manifest(
        out,
        "mcstudy",
        {
            "true_theta": mc.true_theta.to_dict(spec),
            "n_replications": mc.n_replications,
            "design": design.to_dict(),
            "design_mode": mc.design_mode,
            "fit": mc.fit.to_dict(spec),
            "kernel": spec.to_dict(),
            "threads": args.threads,
        },
        {"noise_seed": mc.noise_seed, "design_seed": design.design_seed},
        {"config": args.config},
        t0,
        extras={"n_failures": report.n_failures},
    )
    return 0


def cmd_surface(args) -> int:
    t0 = time.perf_counter()
    out = _out_dir(args)
    theta_raw = _load_json(args.theta)
    spec = _kernel_spec(theta_raw)
    theta = ParamVector.from_dict(theta_raw, spec)
    inputs = {"theta": args.theta}
    seeds: dict = {}
    if args.data:
        if not args.schema:
            raise CliError("--schema is required with --data")
        schema = SchemaConfig.from_json(args.schema)
        dataset, _ = ingest_csv(args.data, schema)
        inputs.update({"data": args.data, "schema": args.schema})
        design_dict = None
    else:
        if not args.design:
            raise CliError("one of --data or --design is required")
        design = DesignConfig.from_dict(_load_json(args.design))
        if args.seed is not None:
            design = replace(design, design_seed=args.seed)
        noise_seed = args.noise_seed if args.noise_seed is not None else (args.seed if args.seed is not None else 0)
        dataset = simulate_responses(generate_design(design), theta, spec, noise_seed)
        inputs["design"] = args.design
        design_dict = design.to_dict()
        seeds = {"design_seed": design.design_seed, "noise_seed": noise_seed}
    if args.alpha_steps < 1 or args.tau_steps < 1:
        raise CliError("grid is empty: steps must be >= 1")
    grid_alpha = np.linspace(args.alpha_min, args.alpha_max, args.alpha_steps)
    grid_tau = np.linspace(args.tau_min, args.tau_max, args.tau_steps)
    surface = profile_surface(dataset, spec, theta, grid_alpha, grid_tau)
    n_feasible = int(np.isfinite(surface).sum())
    with (out / "surface.csv").open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["alpha", "tau", "loglik"])
        for i, a in enumerate(grid_alpha):
            for j, t in enumerate(grid_tau):
                value = surface[i, j]
                writer.writerow([_fmt(a), _fmt(t), "" if not np.isfinite(value) else _fmt(value)])
    _write_manifest(
        out,
        "surface",
        {
            "theta": theta.to_dict(spec),
            "kernel": spec.to_dict(),
            "design": design_dict,
            "grid": {
                "alpha": [args.alpha_min, args.alpha_max, args.alpha_steps],
                "tau": [args.tau_min, args.tau_max, args.tau_steps],
            },
        },
        seeds,
        inputs,
        t0,
        extras={"n_cells": int(surface.size), "n_feasible_cells": n_feasible},
    )
    return 0


def _diag_design(raw: dict, seed_override) -> DesignConfig:
    design = DesignConfig.from_dict(raw.get("design", {}))
    if seed_override is not None:
        design = replace(design, design_seed=seed_override)
    return design


def cmd_diagnose(args) -> int:
    t0 = time.perf_counter()
    out = _out_dir(args)
    raw = _load_json(args.config)
    check = raw.get("check")
    if check not in ("lan", "clt", "normality", "information", "third_derivative"):
        raise CliError(f"unknown diagnostic check {check!r}")
    spec = _kernel_spec(raw)
    theta = ParamVector.from_dict(raw["true_theta"], spec) if "true_theta" in raw else None
    noise_seed = args.noise_seed if args.noise_seed is not None else int(raw.get("noise_seed", 0))
    design = _diag_design(raw, args.seed)
    inputs = {"config": args.config}
    extras: dict = {}

    if check == "lan":
        report = lan_expansion_check(
            theta,
            spec,
            design,
            raw.get("n_values", [100, 400, 1600]),
            directions=raw.get("directions"),
            replications=int(raw.get("replications", 200)),
            noise_seed=noise_seed,
            extra_random_directions=int(raw.get("extra_random_directions", 3)),
            direction_seed=int(raw.get("direction_seed", 7011)),
        )
        _write_json(out / "lan.json", report.to_json_dict())
    elif check == "clt":
        report = score_clt_check(
            theta,
            spec,
            design,
            int(raw.get("n", 500)),
            int(raw.get("replications", 500)),
            noise_seed=noise_seed,
        )
        _write_json(out / "clt.json", report.to_json_dict())
    elif check == "information":
        report = information_limit_check(spec, design, theta, raw.get("n_values", [100, 200, 400, 800]))
        _write_json(out / "information.json", report.to_json_dict())
    elif check == "third_derivative":
        if "data_csv" in raw:
            schema = SchemaConfig.from_json(raw["schema_json"])
            dataset, _ = ingest_csv(raw["data_csv"], schema)
            inputs.update({"data": raw["data_csv"], "schema": raw["schema_json"]})
        else:
            dataset = simulate_responses(generate_design(design), theta, spec, noise_seed)
        report = third_derivative_bound_check(
            dataset,
            theta,
            spec,
            radius=float(raw.get("radius", 1.0)),
            n_points=int(raw.get("n_points", 10)),
            seed=int(raw.get("sample_seed", 90210)),
        )
        _write_json(out / "third_derivative.json", report)
    else:  # normality
        raw_csv = raw.get("raw_csv")
        if raw_csv is None:
            raise CliError("normality check needs 'raw_csv' with replication estimates")
        inputs["raw_csv"] = raw_csv
        names = theta.names(spec)
        estimates, kept = _read_raw_estimates(raw_csv, names)
        extras["replications_kept"] = kept
        report = studentized_normality(estimates, skeleton_dataset(generate_design(design)), spec, theta)
        _write_json(out / "normality.json", report.to_json_dict())
        with (out / "normality.csv").open("w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["parameter", "replication", "value"])
            for j, name in enumerate(report.param_names):
                for m in range(report.replications_used):
                    writer.writerow([name, str(m), _fmt(report.studentized[m, j])])

    _write_manifest(out, "diagnose", {**raw, "resolved_design": design.to_dict()}, {"noise_seed": noise_seed}, inputs, t0, extras=extras)
    return 0


def _read_raw_estimates(path, names: list[str]) -> tuple[np.ndarray, int]:
    rows = []
    try:
        with Path(path).open(newline="", encoding="utf-8") as fh:
            reader = csv.DictReader(fh)
            for rec in reader:
                if rec.get("converged", "1") not in ("1", "true", "True"):
                    continue
                rows.append([float(rec[name]) for name in names])
    except OSError as exc:
        raise CliError(f"cannot read {path}: {exc}") from exc
    except (KeyError, ValueError) as exc:
        raise CliError(f"{path}: bad raw-estimates row: {exc}") from exc
    if not rows:
        raise CliError(f"{path}: no converged replications found")
    return np.array(rows), len(rows)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ioulme", description=__doc__)
    parser.add_argument("--version", action="version", version=f"ioulme {__version__}")
    sub = parser.add_subparsers(dest="subcommand", required=True)

    p_fit = sub.add_parser("fit", help="fit the model to a CSV dataset")
    p_fit.add_argument("--data", required=True, help="observation CSV")
    p_fit.add_argument("--schema", required=True, help="schema JSON (column mapping)")
    p_fit.add_argument("--fit-config", default=None, help="fit configuration JSON")
    p_fit.add_argument("--out", required=True, help="output directory")
    p_fit.set_defaults(func=cmd_fit)

    p_sim = sub.add_parser("simulate", help="generate a synthetic dataset CSV")
    p_sim.add_argument("--design", required=True, help="design configuration JSON")
    p_sim.add_argument("--theta", required=True, help="true parameter JSON")
    p_sim.add_argument("--out", required=True)
    p_sim.add_argument("--seed", type=int, default=None, help="sets both design and noise seeds")
    p_sim.add_argument("--design-seed", type=int, default=None)
    p_sim.add_argument("--noise-seed", type=int, default=None)
    p_sim.add_argument("--replication", type=int, default=0)
    p_sim.set_defaults(func=cmd_simulate)

    p_mc = sub.add_parser("mcstudy", help="Monte Carlo bias/MCSE study")
    p_mc.add_argument("--config", required=True, help="study configuration JSON")
    p_mc.add_argument("--out", required=True)
    p_mc.add_argument("--threads", type=int, default=None)
    p_mc.add_argument("--seed", type=int, default=None)
    p_mc.set_defaults(func=cmd_mcstudy)

    p_surf = sub.add_parser("surface", help="log-likelihood surface over (alpha, tau)")
    p_surf.add_argument("--data", default=None)
    p_surf.add_argument("--schema", default=None)
    p_surf.add_argument("--design", default=None)
    p_surf.add_argument("--theta", required=True, help="fixed parameters JSON")
    p_surf.add_argument("--alpha-min", type=float, required=True)
    p_surf.add_argument("--alpha-max", type=float, required=True)
    p_surf.add_argument("--alpha-steps", type=int, required=True)
    p_surf.add_argument("--tau-min", type=float, required=True)
    p_surf.add_argument("--tau-max", type=float, required=True)
    p_surf.add_argument("--tau-steps", type=int, required=True)
    p_surf.add_argument("--out", required=True)
    p_surf.add_argument("--seed", type=int, default=None)
    p_surf.add_argument("--noise-seed", type=int, default=None)
    p_surf.set_defaults(func=cmd_surface)

    p_diag = sub.add_parser("diagnose", help="asymptotic diagnostics")
    p_diag.add_argument("--config", required=True, help="diagnostic configuration JSON")
    p_diag.add_argument("--out", required=True)
    p_diag.add_argument("--seed", type=int, default=None)
    p_diag.add_argument("--noise-seed", type=int, default=None)
    p_diag.set_defaults(func=cmd_diagnose)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse exits 0 for --help/--version, 2 for usage errors
        return 0 if exc.code == 0 else 1
    try:
        return args.func(args)
    except (CliError, DataError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
