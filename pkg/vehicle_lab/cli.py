"""Command-line entry points: simulate, identify, follow, eval-model, generate-log, replay.

Exit codes: 0 success, 2 configuration or validation problem, 3 insufficient data,
4 runtime failure. Every command writes a ``manifest.json``-style record that
``replay`` can run again.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
from dataclasses import replace
from pathlib import Path
from typing import Callable

from vehicle_lab import __version__, settings
from vehicle_lab.dynamics import IntegrationError, ModelParams
from vehicle_lab.ident import (
    DEFAULT_WINDOW,
    PARAM_NAMES,
    DelayConfig,
    DelayGrid,
    DelayGridSearchError,
    ErrorWeights,
    FitOptions,
    MeasurementLogError,
    delay_grid_search,
    load_measurement_log,
    replay_model,
    residual_statistics,
    save_fit_report,
    save_measurement_log,
    slice_experiments,
)
from vehicle_lab.labsim import (
    LabConfig,
    ScenarioValidationError,
    generate_ident_log,
    load_lab_config,
    load_scenario,
    run_scenario,
    tracking_summary,
)
from vehicle_lab.logging_config import log_stage, logger
from vehicle_lab.trajectory import TrajectoryError

EXIT_OK = 0
EXIT_INVALID = 2
EXIT_INSUFFICIENT_DATA = 3
EXIT_RUNTIME = 4


class InsufficientDataError(ValueError):
    """Raised when a log yields no usable identification window."""


def _digest(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _manifest_path(out: Path) -> Path:
    if out.suffix:
        return out.parent / f"{out.stem}.manifest.json"
    return out / "manifest.json"


def write_manifest(
    command: str,
    arguments: dict,
    config: dict,
    seed: int | None,
    inputs: list[str | Path | None],
    outputs: dict[str, str],
    out: Path,
) -> Path:
    manifest = {
        "command": command,
        "arguments": arguments,
        "config": config,
        "seed": seed,
        "version": __version__,
        "inputs": {str(path): _digest(path) for path in inputs if path is not None},
        "outputs": outputs,
    }
    path = _manifest_path(out)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True), encoding="utf-8")
    return path


def load_model_params(path: str | Path) -> tuple[ModelParams, DelayConfig | None]:
    """Read p1..p10 from a fit report, a {"p1": ..} object or a plain 10-element list."""
    if str(path) == "identified":
        return ModelParams.identified(), None
    try:
        payload = json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError as exc:
        raise ValueError(f"Parameter file '{path}' was not found.") from exc
    except json.JSONDecodeError as exc:
        raise ValueError(f"Parameter file '{path}' is not valid JSON: {exc}") from exc

    delays = None
    if isinstance(payload, dict) and "params" in payload:
        if payload.get("delays"):
            delays = DelayConfig(**payload["delays"])
        payload = payload["params"]
    if isinstance(payload, dict):
        missing = [name for name in PARAM_NAMES if name not in payload]
        if missing:
            raise ValueError(f"Parameter file '{path}' lacks {', '.join(missing)}.")
        return ModelParams.from_sequence([payload[name] for name in PARAM_NAMES]), delays
    return ModelParams.from_sequence(payload), delays


def _load_options(path: str | Path | None) -> dict:
    if path is None:
        return {}
    try:
        payload = json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError as exc:
        raise ValueError(f"Options file '{path}' was not found.") from exc
    except json.JSONDecodeError as exc:
        raise ValueError(f"Options file '{path}' is not valid JSON: {exc}") from exc
    unknown = sorted(set(payload) - {"n_window", "grid", "weights", "p_init", "fit"})
    if unknown:
        raise ValueError(f"Unknown identification option keys: {', '.join(unknown)}.")
    return payload


def _lab_config(path: str | None, seed: int | None) -> LabConfig:
    """Lab config from file, or the environment defaults when no file is given."""
    lab = load_lab_config(path)
    if path is None:
        lab = replace(lab, seed=settings.DEFAULT_SEED, workers=settings.DEFAULT_WORKERS)
    return lab if seed is None else replace(lab, seed=seed)


def cmd_simulate(scenario_path: str, lab_config_path: str | None, out_dir: str, seed: int | None = None) -> int:
    spec = load_scenario(scenario_path)
    lab = _lab_config(lab_config_path, seed)
    trace = run_scenario(spec, lab)
    outputs = trace.export(out_dir)
    write_manifest(
        "simulate",
        {"scenario_path": scenario_path, "lab_config_path": lab_config_path, "out_dir": out_dir, "seed": lab.seed},
        {"scenario": spec.source, "lab": lab.to_dict()},
        lab.seed,
        [scenario_path, lab_config_path],
        outputs,
        Path(out_dir),
    )
    print(f"Simulated {len(spec.vehicles)} vehicle(s) for {spec.duration} s -> {out_dir}")
    return EXIT_OK


def cmd_identify(
    log_path: str,
    options_path: str | None,
    out_path: str,
    window: int | None = None,
    grid: str | None = None,
    init_mode: str | None = None,
    workers: int | None = None,
) -> int:
    options = _load_options(options_path)
    samples = load_measurement_log(log_path)
    n_window = window or options.get("n_window", DEFAULT_WINDOW)
    sliced = slice_experiments(samples, n_window=n_window)
    if not sliced.experiments:
        gaps = "; ".join(f"window {index}: {reason}" for index, reason in sliced.discarded) or "none"
        raise InsufficientDataError(
            f"No usable {n_window}-sample window in {len(samples)} samples (gaps: {gaps})."
        )

    grid_spec = grid or options.get("grid")
    delay_grid = DelayGrid.parse(grid_spec) if isinstance(grid_spec, str) else DelayGrid(**(grid_spec or {}))
    fit_payload = dict(options.get("fit", {}))
    if init_mode:
        fit_payload["init_mode"] = init_mode
    fit_payload["workers"] = workers or fit_payload.get("workers", settings.DEFAULT_WORKERS)
    fit_options = FitOptions.from_dict(fit_payload)
    weights = ErrorWeights(**options.get("weights", {}))
    p_init = ModelParams.from_sequence(options["p_init"]) if "p_init" in options else None

    result = delay_grid_search(sliced.experiments, delay_grid, p_init, weights, fit_options)
    slicing = {
        "n_window": n_window,
        "experiments": len(sliced.experiments),
        "discarded": [{"window": index, "reason": reason} for index, reason in sliced.discarded],
        "dropped_tail": sliced.dropped_tail,
    }
    out = Path(out_path)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_fit_report(result, out, extra={"slicing": slicing, "delay_grid": delay_grid.to_dict()})
    write_manifest(
        "identify",
        {
            "log_path": log_path, "options_path": options_path, "out_path": out_path,
            "window": window, "grid": grid, "init_mode": init_mode, "workers": workers,
        },
        {"options": options, "fit": fit_options.to_dict(), "grid": delay_grid.to_dict()},
        None,
        [log_path, options_path],
        {"report": str(out)},
        out,
    )

    for name, value in zip(PARAM_NAMES, result.params.as_array()):
        print(f"{name} = {value:.6f}")
    print(f"delays (ips, local, act) = {result.delays.as_tuple()}")
    print(f"objective = {result.objective:.6e}")
    return EXIT_OK


def cmd_follow(
    scenario_path: str,
    params_path: str,
    out_dir: str,
    controller: str = "mpc",
    lab_config_path: str | None = None,
    seed: int | None = None,
) -> int:
    spec = load_scenario(scenario_path)
    lab = _lab_config(lab_config_path, seed)
    params, _ = load_model_params(params_path)
    vehicles = tuple(
        replace(vehicle, model_params=params, controller=replace(vehicle.controller, kind=controller))
        for vehicle in spec.vehicles
    )
    spec = replace(spec, vehicles=vehicles)
    trace = run_scenario(spec, lab)
    outputs = trace.export(out_dir)
    summary = tracking_summary(trace, spec)
    summary_path = Path(out_dir) / "tracking_summary.csv"
    summary.to_csv(summary_path, index=False)
    outputs["tracking_summary"] = str(summary_path)
    write_manifest(
        "follow",
        {
            "scenario_path": scenario_path, "params_path": params_path, "out_dir": out_dir,
            "controller": controller, "lab_config_path": lab_config_path, "seed": lab.seed,
        },
        {"scenario": spec.source, "lab": lab.to_dict(), "params": params.as_array().tolist()},
        lab.seed,
        [scenario_path, None if params_path == "identified" else params_path, lab_config_path],
        outputs,
        Path(out_dir),
    )
    for row in summary.itertuples(index=False):
        print(
            f"{row.vehicle} [{row.controller}] mean position error {row.mean_position_error:.4f} m, "
            f"max {row.max_position_error:.4f} m, mean yaw error {row.mean_yaw_error:.4f} rad"
        )
    return EXIT_OK


def cmd_eval_model(
    log_path: str,
    params_path: str,
    out_path: str,
    delays: str | None = None,
    window: int = DEFAULT_WINDOW,
) -> int:
    params, fitted_delays = load_model_params(params_path)
    delay_config = DelayConfig.parse(delays) if delays else (fitted_delays or DelayConfig())
    samples = load_measurement_log(log_path)
    sliced = slice_experiments(samples, n_window=window)
    if not sliced.experiments:
        raise InsufficientDataError(f"No usable {window}-sample window in {len(samples)} samples.")

    replay = replay_model(sliced.experiments, params, delay_config)
    stats = residual_statistics(replay)
    out = Path(out_path)
    out.parent.mkdir(parents=True, exist_ok=True)
    plot_path = out.parent / f"{out.stem}_plot.csv"
    replay.to_csv(plot_path, index=False)
    out.write_text(
        json.dumps({"delays": list(delay_config.as_tuple()), "residuals": stats, "plot_data": str(plot_path)}, indent=2),
        encoding="utf-8",
    )
    write_manifest(
        "eval-model",
        {"log_path": log_path, "params_path": params_path, "out_path": out_path, "delays": delays, "window": window},
        {"params": params.as_array().tolist(), "delays": list(delay_config.as_tuple())},
        None,
        [log_path, None if params_path == "identified" else params_path],
        {"report": str(out), "plot_data": str(plot_path)},
        out,
    )
    for channel, values in stats.items():
        print(f"{channel}: rms {values['rms']:.6e}, max {values['max_abs']:.6e}")
    return EXIT_OK


def cmd_generate_log(
    scenario_path: str,
    out_path: str,
    params_path: str = "identified",
    delays: str = "1,0,5",
    lab_config_path: str | None = None,
    seed: int | None = None,
    noise_free: bool = False,
) -> int:
    spec = load_scenario(scenario_path)
    lab = _lab_config(lab_config_path, seed)
    if spec.excitation is None:
        raise ScenarioValidationError(["scenario has no excitation block"])
    if noise_free:
        spec = replace(spec, excitation=spec.excitation.noise_free())
    params, _ = load_model_params(params_path)
    delay_config = DelayConfig.parse(delays)
    samples = generate_ident_log(spec, lab, params, delay_config)
    out = Path(out_path)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_measurement_log(samples, out)
    write_manifest(
        "generate-log",
        {
            "scenario_path": scenario_path, "out_path": out_path, "params_path": params_path, "delays": delays,
            "lab_config_path": lab_config_path, "seed": lab.seed, "noise_free": noise_free,
        },
        {"scenario": spec.source, "lab": lab.to_dict(), "params": params.as_array().tolist()},
        lab.seed,
        [scenario_path, None if params_path == "identified" else params_path, lab_config_path],
        {"log": str(out)},
        out,
    )
    print(f"Wrote {len(samples)} samples -> {out}")
    return EXIT_OK


COMMANDS: dict[str, Callable[..., int]] = {
    "simulate": cmd_simulate,
    "identify": cmd_identify,
    "follow": cmd_follow,
    "eval-model": cmd_eval_model,
    "generate-log": cmd_generate_log,
}


def cmd_replay(manifest_path: str) -> int:
    try:
        manifest = json.loads(Path(manifest_path).read_text(encoding="utf-8"))
    except FileNotFoundError as exc:
        raise ValueError(f"Manifest '{manifest_path}' was not found.") from exc
    command = manifest.get("command")
    if command not in COMMANDS:
        raise ValueError(f"Manifest names unknown command {command!r}.")
    for path, digest in manifest.get("inputs", {}).items():
        if Path(path).exists() and _digest(path) != digest:
            logger.warning("Input %s changed since the recorded run", path)
    log_stage("Replaying run", command=command, manifest=manifest_path)
    return COMMANDS[command](**manifest["arguments"])


def run_command(func: Callable[..., int], **kwargs) -> int:
    """Map domain exceptions onto the exit-code contract."""
    try:
        return func(**kwargs)
    except InsufficientDataError as exc:
        logger.error("Insufficient data: %s", exc)
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INSUFFICIENT_DATA
    except (ScenarioValidationError, MeasurementLogError, TrajectoryError, ValueError, KeyError, TypeError) as exc:
        logger.error("Invalid input: %s", exc)
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (DelayGridSearchError, IntegrationError, RuntimeError, OSError) as exc:
        logger.error("Run failed: %s", exc)
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="vehicle-lab", description="Vehicle lab simulation and identification.")
    subparsers = parser.add_subparsers(dest="command", required=True)

    simulate = subparsers.add_parser("simulate", help="Run a scenario and write the trace.")
    simulate.add_argument("--scenario", required=True, dest="scenario_path")
    simulate.add_argument("--lab", default=None, dest="lab_config_path")
    simulate.add_argument("--out", default=str(Path(settings.OUTPUT_DIR) / "simulate"), dest="out_dir")
    simulate.add_argument("--seed", type=int, default=None)

    identify = subparsers.add_parser("identify", help="Fit model parameters and delays to a measurement log.")
    identify.add_argument("--log", required=True, dest="log_path")
    identify.add_argument("--options", default=None, dest="options_path")
    identify.add_argument("--out", default=str(Path(settings.OUTPUT_DIR) / "fit.json"), dest="out_path")
    identify.add_argument("--window", type=int, default=None, help="Samples per experiment window.")
    identify.add_argument("--grid", default=None, help="Delay grid, e.g. ips=0..3,local=0..2,act=0..8.")
    identify.add_argument("--init-mode", choices=["measured", "free"], default=None)
    identify.add_argument("--workers", type=int, default=None)

    follow = subparsers.add_parser("follow", help="Closed-loop run with given model parameters.")
    follow.add_argument("--scenario", required=True, dest="scenario_path")
    follow.add_argument("--params", required=True, dest="params_path", help="Fit report, parameter JSON or 'identified'.")
    follow.add_argument("--out", default=str(Path(settings.OUTPUT_DIR) / "follow"), dest="out_dir")
    follow.add_argument("--controller", choices=["mpc", "pid"], default="mpc")
    follow.add_argument("--lab", default=None, dest="lab_config_path")
    follow.add_argument("--seed", type=int, default=None)

    evaluate = subparsers.add_parser("eval-model", help="Open-loop replay of a model against a log.")
    evaluate.add_argument("--log", required=True, dest="log_path")
    evaluate.add_argument("--params", required=True, dest="params_path")
    evaluate.add_argument("--out", default=str(Path(settings.OUTPUT_DIR) / "eval.json"), dest="out_path")
    evaluate.add_argument("--delays", default=None, help="Force delays as ips,local,act.")
    evaluate.add_argument("--window", type=int, default=DEFAULT_WINDOW)

    generate = subparsers.add_parser("generate-log", help="Write a synthetic identification log.")
    generate.add_argument("--scenario", required=True, dest="scenario_path")
    generate.add_argument("--out", default=str(Path(settings.OUTPUT_DIR) / "ident_log.csv"), dest="out_path")
    generate.add_argument("--params", default="identified", dest="params_path")
    generate.add_argument("--delays", default="1,0,5")
    generate.add_argument("--lab", default=None, dest="lab_config_path")
    generate.add_argument("--seed", type=int, default=None)
    generate.add_argument("--noise-free", action="store_true")

    replay_parser = subparsers.add_parser("replay", help="Re-run a command from its manifest.")
    replay_parser.add_argument("manifest_path")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = vars(_build_parser().parse_args(argv))
    command = args.pop("command")
    func = cmd_replay if command == "replay" else COMMANDS[command]
    return run_command(func, **args)


if __name__ == "__main__":
    sys.exit(main())
