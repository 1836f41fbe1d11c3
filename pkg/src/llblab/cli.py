"""Declarative experiment runner.

Experiments are described by a flat key = value config file (grammar below)
and produce plain CSV/JSON outputs plus a run manifest with a digest of every
emitted file. Reruns with the same config and seed are byte-identical in the
CSV outputs regardless of the thread count; the manifest additionally carries
the wall clock and so differs between runs by design.

Config grammar: one ``key = value`` pair per line, ``#`` starts a comment,
blank lines are ignored. Keys are dot-namespaced and validated against the
table below; unknown keys and keys belonging to a different experiment kind
are errors, and all validation errors are reported together. Lists are
comma-separated. Paths are resolved relative to the working directory and
must exist at parse time.

Exit codes: 0 success, 1 validation suite failed, 2 config error,
3 numerical blow-up, 4 I/O error.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import math
import os
import sys
import time
from dataclasses import dataclass, field

import numpy as np

from . import __version__
from .analysis import energy_drift, identity_suite
from .clt import CltConfig, run_clt, write_clt_csv, write_clt_summary
from .dynamics import (
    BlowUpError,
    ModelParams,
    SystemKind,
    TimeGrid,
    initial_profile,
    integrate,
    write_fields_csv,
    write_report_csv,
)
from .field import Grid1D, VectorField, make_grid, norms
from .ldp import RateProblem, compactness_probe, estimate_rate, weak_convergence_experiment
from .noise import (
    ControlPath,
    make_covariance,
    read_control_coefficients,
    single_mode_control,
    stream_rng,
    write_control_csv,
    zero_control,
)

__all__ = ["ExperimentConfig", "ConfigError", "parse_config", "run", "main"]

THREADS_ENV_VAR = "LLBLAB_THREADS"

EXIT_OK = 0
EXIT_SUITE_FAILED = 1
EXIT_CONFIG = 2
EXIT_BLOWUP = 3
EXIT_IO = 4


class ConfigError(ValueError):
    """Carries every validation error found in a config document."""

    def __init__(self, errors):
        self.errors = list(errors)
        super().__init__("; ".join(self.errors))


def _parse_int(text):
    return int(text)


def _parse_float(text):
    return float(text)


def _parse_bool(text):
    lowered = text.strip().lower()
    if lowered in ("true", "yes", "1"):
        return True
    if lowered in ("false", "no", "0"):
        return False
    raise ValueError(f"expected a boolean, got {text!r}")


def _parse_floats(text):
    return tuple(float(part) for part in text.split(","))


def _parse_ints(text):
    return tuple(int(part) for part in text.split(","))


def _parse_path(text):
    path = text.strip()
    if not os.path.exists(path):
        raise ValueError(f"file does not exist: {path}")
    return path


def _parse_str(text):
    return text.strip()


KINDS = (
    "validate",
    "deterministic",
    "stochastic-ensemble",
    "clt",
    "weak-convergence",
    "rate",
    "compactness",
)

# key -> (parser, default, kind restriction or None, constraint text, check)
KEY_TABLE = {
    "kind": (_parse_str, None, None, f"one of {', '.join(KINDS)}", lambda v: v in KINDS),
    "output.dir": (_parse_str, "out", None, "non-empty", lambda v: bool(v)),
    "seed": (_parse_int, 20240808, None, "integer >= 0", lambda v: v >= 0),
    "grid.n": (_parse_int, 127, None, "integer >= 3", lambda v: v >= 3),
    "time.horizon": (_parse_float, 0.25, None, "> 0", lambda v: v > 0),
    "time.steps": (_parse_int, 2500, None, "integer >= 1", lambda v: v >= 1),
    "model.nu1": (_parse_float, 1.0, None, "> 0", lambda v: v > 0),
    "model.nu2": (_parse_float, 1.0, None, ">= 0", lambda v: v >= 0),
    "model.gamma": (_parse_float, 1.0, None, "finite", math.isfinite),
    "model.mu": (_parse_float, 1.0, None, ">= 0", lambda v: v >= 0),
    "init.a": (_parse_float, 1.0, None, "finite", math.isfinite),
    "init.b": (_parse_float, 0.5, None, "finite", math.isfinite),
    "noise.modes": (_parse_int, 8, None, "integer >= 1", lambda v: v >= 1),
    "noise.alpha": (_parse_float, 4.0, None, "> 3", lambda v: v > 3),
    "validate.samples": (_parse_int, 1000, "validate", "integer >= 1", lambda v: v >= 1),
    "validate.grids": (
        _parse_ints, (31, 127, 255), "validate", "grid sizes >= 3",
        lambda v: len(v) > 0 and all(n >= 3 for n in v),
    ),
    "deterministic.dump_fields": (_parse_bool, False, "deterministic", "boolean", lambda v: True),
    "ensemble.epsilons": (
        _parse_floats, (0.1, 0.01), "stochastic-ensemble", "values in [0, 1]",
        lambda v: len(v) > 0 and all(0 <= e <= 1 for e in v),
    ),
    "ensemble.samples": (_parse_int, 64, "stochastic-ensemble", "integer >= 1", lambda v: v >= 1),
    "clt.epsilons": (
        _parse_floats, (0.1, 0.01, 0.001), "clt", "strictly decreasing, in (0, 1]",
        lambda v: len(v) > 0
        and all(0 < e <= 1 for e in v)
        and all(b < a for a, b in zip(v, v[1:])),
    ),
    "clt.samples": (_parse_int, 64, "clt", "integer >= 2", lambda v: v >= 2),
    "weak.epsilons": (
        _parse_floats, (0.1, 0.01, 0.001), "weak-convergence", "values in [0, 1]",
        lambda v: len(v) > 0 and all(0 <= e <= 1 for e in v),
    ),
    "weak.samples": (_parse_int, 32, "weak-convergence", "integer >= 1", lambda v: v >= 1),
    "weak.control": (_parse_path, None, "weak-convergence", "existing file", lambda v: True),
    "weak.mode": (_parse_int, 1, "weak-convergence", "integer >= 1", lambda v: v >= 1),
    "weak.component": (_parse_int, 3, "weak-convergence", "1, 2 or 3", lambda v: v in (1, 2, 3)),
    "weak.coefficient": (_parse_float, 0.5, "weak-convergence", "finite", math.isfinite),
    "rate.target": (_parse_path, None, "rate", "existing file", lambda v: True),
    "rate.penalty": (_parse_float, 1.0e3, "rate", "> 0", lambda v: v > 0),
    "rate.modes": (_parse_int, 1, "rate", "integer >= 1", lambda v: v >= 1),
    "rate.slabs": (_parse_int, 5, "rate", "integer >= 1", lambda v: v >= 1),
    "rate.max_iters": (_parse_int, 60, "rate", "integer >= 1", lambda v: v >= 1),
    "rate.step_size": (_parse_float, 1.0, "rate", "> 0", lambda v: v > 0),
    "rate.fd_bump": (_parse_float, 1.0e-3, "rate", "> 0", lambda v: v > 0),
    "rate.tolerance": (_parse_float, 1.0e-4, "rate", "> 0", lambda v: v > 0),
    "rate.continuation": (_parse_int, 1, "rate", "integer >= 0", lambda v: v >= 0),
    "compact.modes": (
        _parse_ints, (2, 4, 8), "compactness", "mode indices >= 1",
        lambda v: len(v) > 0 and all(m >= 1 for m in v),
    ),
    "compact.component": (_parse_int, 3, "compactness", "1, 2 or 3", lambda v: v in (1, 2, 3)),
    "compact.control": (_parse_path, None, "compactness", "existing file", lambda v: True),
}


@dataclass(frozen=True)
class ExperimentConfig:
    """Validated experiment description; ``raw`` echoes the parsed document."""

    kind: str
    settings: dict
    raw: dict = field(default_factory=dict)

    def __getitem__(self, key):
        return self.settings[key]

    def grid(self) -> Grid1D:
        return make_grid(self.settings["grid.n"])

    def time_grid(self) -> TimeGrid:
        return TimeGrid(self.settings["time.horizon"], self.settings["time.steps"])

    def model_params(self) -> ModelParams:
        return ModelParams(
            nu1=self.settings["model.nu1"],
            nu2=self.settings["model.nu2"],
            gamma=self.settings["model.gamma"],
            mu=self.settings["model.mu"],
        )

    def covariance(self):
        return make_covariance(self.settings["noise.modes"], self.settings["noise.alpha"])

    def initial(self) -> VectorField:
        return initial_profile(self.grid(), self.settings["init.a"], self.settings["init.b"])


def parse_config(text: str) -> ExperimentConfig:
    """Parse and validate a config document; raises ConfigError with every problem."""
    errors = []
    raw: dict = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            errors.append(f"line {lineno}: expected 'key = value', got {stripped!r}")
            continue
        key, value = (part.strip() for part in stripped.split("=", 1))
        if not key:
            errors.append(f"line {lineno}: empty key")
            continue
        if key in raw:
            errors.append(f"line {lineno}: duplicate key {key!r}")
            continue
        raw[key] = value

    kind = raw.get("kind")
    if "kind" not in raw:
        errors.append("missing required key 'kind'")
    elif kind not in KINDS:
        errors.append(f"kind: must be one of {', '.join(KINDS)}, got {kind!r}")
        kind = None

    settings: dict = {}
    for key, value in raw.items():
        if key not in KEY_TABLE:
            errors.append(f"unknown key {key!r}")
            continue
        parser, _, key_kind, constraint, check = KEY_TABLE[key]
        if key_kind is not None and kind is not None and key_kind != kind:
            errors.append(f"{key}: only valid for kind={key_kind}, config has kind={kind}")
            continue
        try:
            parsed = parser(value)
        except ValueError as exc:
            errors.append(f"{key}: {exc}")
            continue
        if not check(parsed):
            errors.append(f"{key}: must be {constraint}, got {value!r}")
            continue
        settings[key] = parsed

    if errors:
        raise ConfigError(errors)

    for key, (_, default, key_kind, _, _) in KEY_TABLE.items():
        if key in settings:
            continue
        if key_kind is None or key_kind == kind:
            settings[key] = default

    # cross-field constraints
    cross_errors = []
    if kind == "rate" and settings["time.steps"] % settings["rate.slabs"] != 0:
        cross_errors.append(
            f"rate.slabs: must divide time.steps "
            f"({settings['rate.slabs']} does not divide {settings['time.steps']})"
        )
    if kind == "rate" and settings["rate.modes"] > settings["noise.modes"]:
        cross_errors.append("rate.modes: must not exceed noise.modes")
    if kind == "compactness" and max(settings["compact.modes"]) > settings["noise.modes"]:
        cross_errors.append("compact.modes: entries must not exceed noise.modes")
    if kind == "weak-convergence" and settings["weak.mode"] > settings["noise.modes"]:
        cross_errors.append("weak.mode: must not exceed noise.modes")
    if cross_errors:
        raise ConfigError(cross_errors)

    return ExperimentConfig(kind=kind, settings=settings, raw=dict(raw))


# ---------------------------------------------------------------------------
# output helpers

def _write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in rows:
            writer.writerow([repr(float(v)) if isinstance(v, float) else v for v in row])


def _write_json(path, payload):
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _sha256(path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(65536), b""):
            digest.update(chunk)
    return digest.hexdigest()


def _read_target_field(path, grid: Grid1D) -> VectorField:
    values = np.zeros((grid.n_interior, 3))
    seen = np.zeros(grid.n_interior, dtype=bool)
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [c.strip() for c in header[:4]] != ["node_index", "ux", "uy", "uz"]:
            raise ConfigError([f"{path}: expected header 'node_index,ux,uy,uz'"])
        for row in reader:
            if not row:
                continue
            idx = int(row[0])
            if not 0 <= idx < grid.n_interior:
                raise ConfigError([f"{path}: node index {idx} outside grid of {grid.n_interior}"])
            values[idx] = [float(row[1]), float(row[2]), float(row[3])]
            seen[idx] = True
    if not seen.all():
        raise ConfigError([f"{path}: {int((~seen).sum())} node values missing"])
    return VectorField(grid, values)


def _load_control(path, tgrid: TimeGrid, mode_count: int) -> ControlPath:
    coeffs = read_control_coefficients(path)
    if coeffs.shape[0] != tgrid.steps:
        raise ConfigError(
            [f"{path}: control has {coeffs.shape[0]} steps, time grid has {tgrid.steps}"]
        )
    if coeffs.shape[1] > mode_count:
        raise ConfigError(
            [f"{path}: control uses {coeffs.shape[1]} modes, noise.modes is {mode_count}"]
        )
    full = np.zeros((tgrid.steps, mode_count, 3))
    full[:, : coeffs.shape[1], :] = coeffs
    return ControlPath(full, tgrid.dt)


# ---------------------------------------------------------------------------
# experiment drivers

def _run_validate(config: ExperimentConfig, outdir: str) -> tuple[int, list]:
    reports = identity_suite(
        grid_sizes=config["validate.grids"],
        samples=config["validate.samples"],
        base_seed=config["seed"],
    )
    path = os.path.join(outdir, "identity_report.csv")
    _write_csv(
        path,
        ["name", "residual", "tolerance", "passed"],
        [(r.name, r.residual, r.tolerance, r.passed) for r in reports],
    )
    all_passed = all(r.passed for r in reports)
    return (EXIT_OK if all_passed else EXIT_SUITE_FAILED), [path]


def _run_deterministic(config: ExperimentConfig, outdir: str) -> tuple[int, list]:
    rec = integrate(
        SystemKind.DETERMINISTIC,
        config.initial(),
        config.model_params(),
        config.time_grid(),
        stride=1,
    )
    files = []
    path = os.path.join(outdir, "trajectory_report.csv")
    write_report_csv(rec, path)
    files.append(path)
    if config["deterministic.dump_fields"]:
        dump = os.path.join(outdir, "fields.csv")
        write_fields_csv(rec, dump)
        files.append(dump)
    summary = os.path.join(outdir, "summary.json")
    _write_json(
        summary,
        {
            "final_l2": rec.reports[-1].l2,
            "final_h1_semi": rec.reports[-1].h1_semi,
            "energy_drift": energy_drift(rec, config.model_params()),
            "explicit_cfl": rec.explicit_cfl,
        },
    )
    files.append(summary)
    return EXIT_OK, files


def _run_ensemble(config: ExperimentConfig, outdir: str, threads: int) -> tuple[int, list]:
    params = config.model_params()
    tgrid = config.time_grid()
    spec = config.covariance()
    init = config.initial()
    det = integrate(SystemKind.DETERMINISTIC, init, params, tgrid, stride=1)
    det_sup = max(r.h1_semi for r in det.reports) ** 2

    rows = []
    summary_rows = []
    for i, eps in enumerate(config["ensemble.epsilons"]):
        sups = []
        failed = 0
        for m in range(config["ensemble.samples"]):
            rng = stream_rng(config["seed"], i, m)
            try:
                rec = integrate(
                    SystemKind.STOCHASTIC,
                    init,
                    params.with_epsilon(eps),
                    tgrid,
                    spec=spec,
                    rng=rng,
                    seed_info=(config["seed"], i, m),
                    stride=tgrid.steps,
                )
            except BlowUpError:
                failed += 1
                rows.append((eps, m, math.nan, "blow-up"))
                continue
            sup = max(r.h1_semi for r in rec.reports) ** 2
            sups.append(sup)
            rows.append((eps, m, sup, "ok"))
        mean = float(np.mean(sups)) if sups else math.nan
        summary_rows.append(
            {
                "epsilon": eps,
                "mean_sup_grad_sq": mean,
                "ratio_vs_deterministic": mean / det_sup if sups else math.nan,
                "n_ok": len(sups),
                "n_failed": failed,
            }
        )
    path = os.path.join(outdir, "ensemble_report.csv")
    _write_csv(path, ["epsilon", "sample", "sup_grad_sq", "status"], rows)
    summary = os.path.join(outdir, "summary.json")
    _write_json(summary, {"deterministic_sup_grad_sq": det_sup, "rows": summary_rows})
    return EXIT_OK, [path, summary]


def _run_clt(config: ExperimentConfig, outdir: str, threads: int) -> tuple[int, list]:
    clt_config = CltConfig(
        epsilons=config["clt.epsilons"],
        samples=config["clt.samples"],
        params=config.model_params(),
        tgrid=config.time_grid(),
        spec=config.covariance(),
        initial=config.initial(),
        base_seed=config["seed"],
    )
    report = run_clt(clt_config, threads=threads)
    csv_path = os.path.join(outdir, "clt_report.csv")
    write_clt_csv(report, csv_path)
    summary_path = os.path.join(outdir, "summary.json")
    write_clt_summary(report, summary_path)
    return EXIT_OK, [csv_path, summary_path]


def _run_weak(config: ExperimentConfig, outdir: str, threads: int) -> tuple[int, list]:
    tgrid = config.time_grid()
    spec = config.covariance()
    if config["weak.control"] is not None:
        ctrl = _load_control(config["weak.control"], tgrid, spec.mode_count)
    else:
        ctrl = single_mode_control(
            tgrid.steps,
            spec.mode_count,
            tgrid.dt,
            mode=config["weak.mode"],
            component=config["weak.component"],
            coefficient=config["weak.coefficient"],
        )
    rows = weak_convergence_experiment(
        ctrl,
        config["weak.epsilons"],
        config["weak.samples"],
        config.model_params(),
        tgrid,
        spec,
        config.initial(),
        config["seed"],
        threads=threads,
    )
    path = os.path.join(outdir, "weak_report.csv")
    _write_csv(
        path,
        ["epsilon", "mean_metric", "std_error", "n_ok", "n_failed"],
        [(r.epsilon, r.mean_metric, r.std_error, r.n_ok, r.n_failed) for r in rows],
    )
    summary = os.path.join(outdir, "summary.json")
    _write_json(
        summary,
        {
            "rows": [
                {
                    "epsilon": r.epsilon,
                    "mean_metric": r.mean_metric,
                    "std_error": r.std_error,
                    "n_ok": r.n_ok,
                    "n_failed": r.n_failed,
                }
                for r in rows
            ],
            "control_cost": ctrl.h0_cost(),
        },
    )
    return EXIT_OK, [path, summary]


def _run_rate(config: ExperimentConfig, outdir: str, threads: int) -> tuple[int, list]:
    tgrid = config.time_grid()
    spec = config.covariance()
    params = config.model_params()
    init = config.initial()
    if config["rate.target"] is not None:
        target = _read_target_field(config["rate.target"], config.grid())
    else:
        det = integrate(SystemKind.DETERMINISTIC, init, params, tgrid, stride=tgrid.steps)
        target = det.final_field()
    problem = RateProblem(
        target=target,
        penalty=config["rate.penalty"],
        control_modes=config["rate.modes"],
        control_steps=config["rate.slabs"],
        max_iters=config["rate.max_iters"],
        step_size=config["rate.step_size"],
        fd_bump=config["rate.fd_bump"],
        tolerance=config["rate.tolerance"],
        continuation_rounds=config["rate.continuation"],
    )
    estimate = estimate_rate(problem, params, tgrid, spec, init, threads=threads)
    target_rep = norms(target)
    est_path = os.path.join(outdir, "rate_estimate.json")
    _write_json(
        est_path,
        {
            "cost": estimate.cost,
            "misfit": estimate.misfit,
            "target_h1": math.hypot(target_rep.l2, target_rep.h1_semi),
            "iterations": estimate.iterations,
            "converged": estimate.converged,
        },
    )
    ctrl_path = os.path.join(outdir, "control.csv")
    write_control_csv(estimate.control, ctrl_path)
    return EXIT_OK, [est_path, ctrl_path]


def _run_compactness(config: ExperimentConfig, outdir: str) -> tuple[int, list]:
    tgrid = config.time_grid()
    spec = config.covariance()
    if config["compact.control"] is not None:
        ctrl = _load_control(config["compact.control"], tgrid, spec.mode_count)
    else:
        ctrl = zero_control(tgrid.steps, spec.mode_count, tgrid.dt)
    table = compactness_probe(
        ctrl,
        config["compact.modes"],
        config.model_params(),
        tgrid,
        spec,
        config.initial(),
        component=config["compact.component"],
    )
    path = os.path.join(outdir, "compactness_report.csv")
    _write_csv(path, ["mode", "metric"], [(mode, metric) for mode, metric in table])
    summary = os.path.join(outdir, "summary.json")
    _write_json(
        summary,
        {
            "rows": [{"mode": mode, "metric": metric} for mode, metric in table],
            "monotone_decreasing": all(
                b[1] < a[1] for a, b in zip(table, table[1:])
            ),
        },
    )
    return EXIT_OK, [path, summary]


def run(config: ExperimentConfig, out_dir: str | None = None, threads: int = 1) -> int:
    """Dispatch the experiment, persist outputs and the manifest, return exit code."""
    outdir = out_dir if out_dir is not None else config["output.dir"]
    started = time.perf_counter()
    try:
        os.makedirs(outdir, exist_ok=True)
        if config.kind == "validate":
            code, files = _run_validate(config, outdir)
        elif config.kind == "deterministic":
            code, files = _run_deterministic(config, outdir)
        elif config.kind == "stochastic-ensemble":
            code, files = _run_ensemble(config, outdir, threads)
        elif config.kind == "clt":
            code, files = _run_clt(config, outdir, threads)
        elif config.kind == "weak-convergence":
            code, files = _run_weak(config, outdir, threads)
        elif config.kind == "rate":
            code, files = _run_rate(config, outdir, threads)
        elif config.kind == "compactness":
            code, files = _run_compactness(config, outdir)
        else:  # unreachable after validation
            raise ConfigError([f"unknown kind {config.kind!r}"])
    except ConfigError as exc:
        print(json.dumps({"error": {"code": EXIT_CONFIG, "kind": "config", "messages": exc.errors}}))
        return EXIT_CONFIG
    except BlowUpError as exc:
        print(
            json.dumps(
                {
                    "error": {
                        "code": EXIT_BLOWUP,
                        "kind": "blow-up",
                        "message": str(exc),
                        "step": exc.step,
                    }
                }
            )
        )
        return EXIT_BLOWUP
    except OSError as exc:
        print(json.dumps({"error": {"code": EXIT_IO, "kind": "io", "message": str(exc)}}))
        return EXIT_IO

    manifest = {
        "version": __version__,
        "kind": config.kind,
        "config": config.raw,
        "threads": threads,
        "wall_clock_seconds": time.perf_counter() - started,
        "outputs": {os.path.basename(p): _sha256(p) for p in files},
    }
    _write_json(os.path.join(outdir, "manifest.json"), manifest)
    return code


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="llblab",
        description="Run one experiment described by a config file.",
    )
    parser.add_argument("--config", required=True, help="path to the config document")
    parser.add_argument("--out", default=None, help="output directory (overrides output.dir)")
    parser.add_argument(
        "--threads",
        type=int,
        default=None,
        help=f"worker threads; defaults to ${THREADS_ENV_VAR} or 1",
    )
    args = parser.parse_args(argv)

    if args.threads is not None:
        threads = args.threads
    else:
        env = os.environ.get(THREADS_ENV_VAR, "")
        try:
            threads = int(env) if env else 1
        except ValueError:
            print(
                json.dumps(
                    {
                        "error": {
                            "code": EXIT_CONFIG,
                            "kind": "config",
                            "messages": [f"{THREADS_ENV_VAR} must be an integer, got {env!r}"],
                        }
                    }
                )
            )
            return EXIT_CONFIG
    if threads < 1:
        print(
            json.dumps(
                {
                    "error": {
                        "code": EXIT_CONFIG,
                        "kind": "config",
                        "messages": ["threads must be >= 1"],
                    }
                }
            )
        )
        return EXIT_CONFIG

    try:
        with open(args.config) as fh:
            text = fh.read()
    except OSError as exc:
        print(json.dumps({"error": {"code": EXIT_IO, "kind": "io", "message": str(exc)}}))
        return EXIT_IO

    try:
        config = parse_config(text)
    except ConfigError as exc:
        print(json.dumps({"error": {"code": EXIT_CONFIG, "kind": "config", "messages": exc.errors}}))
        return EXIT_CONFIG

    return run(config, out_dir=args.out, threads=threads)


if __name__ == "__main__":
    sys.exit(main())
