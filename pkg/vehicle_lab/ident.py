"""Grey-box identification of the ten-parameter vehicle model.

Measurement logs are sliced into short experiments, re-aligned for sensing and
actuation delays, and fitted by Levenberg-Marquardt on single-shooting residuals.
Delays are integers and are found by an outer grid search.
"""

from __future__ import annotations

import json
import math
import re
from concurrent.futures import ThreadPoolExecutor, as_completed
from dataclasses import asdict, dataclass, field, fields, replace
from itertools import product
from pathlib import Path
from typing import Literal, Sequence

import numpy as np
import pandas as pd

from vehicle_lab.dynamics import DEFAULT_DT, ModelParams, VehicleState, parameterized_rates, wrap_angle
from vehicle_lab.logging_config import log_stage, logger

MEASUREMENT_COLUMNS = ["t", "x_ips", "y_ips", "psi_ips", "v_odo", "m", "d", "u"]
PARAM_NAMES = [f"p{index}" for index in range(1, 11)]
CHANNELS = ["x", "y", "psi", "v"]
DEFAULT_WINDOW = 100
SPACING_TOLERANCE = 1e-6
FAILED_SIMULATION_PENALTY = 1e12
DEFAULT_P_INIT = (1.0, 0.0, 0.5, 3.0, -2.0, 0.0, 1.0, 1.0, 0.0, 0.0)
RANK_TOLERANCE = 1e-8
# delay cells whose objectives agree this closely count as tied
OBJECTIVE_TIE_RTOL = 1e-6
OBJECTIVE_TIE_ATOL = 1e-12

InitMode = Literal["measured", "free"]


class MeasurementLogError(ValueError):
    """Raised when a measurement log cannot be parsed."""

    def __init__(self, message: str, line: int | None = None):
        location = f"line {line}: " if line is not None else ""
        super().__init__(f"{location}{message}")
        self.line = line


class AlignmentError(ValueError):
    """Raised when delays leave no samples in an experiment window."""


class DelayGridSearchError(RuntimeError):
    """Raised when every cell of a delay grid failed."""

    def __init__(self, reasons: dict[tuple[int, int, int], str]):
        listing = "; ".join(f"{cell}: {reason}" for cell, reason in reasons.items())
        super().__init__(f"All delay combinations failed: {listing}")
        self.reasons = reasons


@dataclass(frozen=True)
class MeasurementSample:
    t: float
    x_hat: float
    y_hat: float
    psi_hat: float
    v_hat: float
    m: float
    d: float
    u: float


@dataclass(frozen=True)
class Experiment:
    index: int
    t: np.ndarray
    x: np.ndarray
    y: np.ndarray
    psi: np.ndarray
    v: np.ndarray
    m: np.ndarray
    d: np.ndarray
    u: np.ndarray

    @classmethod
    def from_samples(cls, samples: Sequence[MeasurementSample], index: int = 0) -> Experiment:
        columns = np.array(
            [[s.t, s.x_hat, s.y_hat, s.psi_hat, s.v_hat, s.m, s.d, s.u] for s in samples], dtype=float
        )
        return cls(index, *(columns[:, position] for position in range(8)))

    def __len__(self) -> int:
        return len(self.t)


@dataclass(frozen=True)
class AlignedExperiment(Experiment):
    delays: DelayConfig | None = None

    @property
    def measured(self) -> np.ndarray:
        return np.column_stack([self.x, self.y, self.psi, self.v])


@dataclass(frozen=True)
class SliceResult:
    experiments: list[Experiment]
    discarded: list[tuple[int, str]]
    dropped_tail: int


@dataclass(frozen=True)
class DelayConfig:
    ips_delay: int = 0
    local_delay: int = 0
    actuation_delay: int = 0

    def __post_init__(self):
        for item in fields(self):
            value = getattr(self, item.name)
            if int(value) != value or value < 0:
                raise ValueError(f"{item.name} must be a non-negative integer, got {value}.")
            object.__setattr__(self, item.name, int(value))

    def as_tuple(self) -> tuple[int, int, int]:
        return (self.ips_delay, self.local_delay, self.actuation_delay)

    def tie_key(self) -> tuple[int, int, int]:
        return (self.actuation_delay, self.ips_delay, self.local_delay)

    def shift_class(self) -> tuple[int, int]:
        """Sensor delays measured from the actuation delay.

        Inputs and sensors share one log clock, so cells with the same class differ only by a
        common shift of the time base and explain the data equally well.
        """
        return (self.ips_delay + self.actuation_delay, self.local_delay + self.actuation_delay)

    @classmethod
    def parse(cls, text: str) -> DelayConfig:
        try:
            ips, local, act = (int(part) for part in text.split(","))
        except ValueError as exc:
            raise ValueError(f"Delays must look like 'ips,local,act', got {text!r}.") from exc
        return cls(ips, local, act)


@dataclass(frozen=True)
class ErrorWeights:
    w_x: float = 1.0
    w_y: float = 1.0
    w_psi: float = 1.0
    w_v: float = 1.0

    def __post_init__(self):
        values = self.as_array()
        if np.any(values < 0) or not np.all(np.isfinite(values)):
            raise ValueError("Error weights must be finite and non-negative.")
        if not np.any(values > 0):
            raise ValueError("At least one error weight must be positive.")

    def as_array(self) -> np.ndarray:
        return np.array([self.w_x, self.w_y, self.w_psi, self.w_v], dtype=float)


@dataclass(frozen=True)
class DelayGrid:
    ips: tuple[int, ...] = tuple(range(0, 4))
    local: tuple[int, ...] = tuple(range(0, 3))
    actuation: tuple[int, ...] = tuple(range(0, 9))

    def __post_init__(self):
        for name in ("ips", "local", "actuation"):
            values = tuple(int(value) for value in getattr(self, name))
            if not values:
                raise ValueError(f"Delay range '{name}' is empty.")
            if min(values) < 0:
                raise ValueError(f"Delay range '{name}' has negative steps.")
            object.__setattr__(self, name, values)

    def cells(self) -> list[DelayConfig]:
        return [DelayConfig(*cell) for cell in product(self.ips, self.local, self.actuation)]

    def max_delays(self) -> DelayConfig:
        return DelayConfig(max(self.ips), max(self.local), max(self.actuation))

    @classmethod
    def parse(cls, text: str) -> DelayGrid:
        """Parse 'ips=0..3,local=0..2,act=0..8'; omitted keys keep their defaults."""
        aliases = {"ips": "ips", "local": "local", "act": "actuation", "actuation": "actuation"}
        ranges = {}
        for part in filter(None, (chunk.strip() for chunk in text.split(","))):
            match = re.fullmatch(r"(\w+)=(\d+)(?:\.\.(\d+))?", part)
            if not match or match.group(1) not in aliases:
                raise ValueError(f"Invalid delay range {part!r}; expected e.g. 'act=0..8'.")
            low = int(match.group(2))
            high = int(match.group(3)) if match.group(3) is not None else low
            if high < low:
                raise ValueError(f"Delay range {part!r} is empty.")
            ranges[aliases[match.group(1)]] = tuple(range(low, high + 1))
        return cls(**ranges)

    def to_dict(self) -> dict[str, list[int]]:
        return {"ips": list(self.ips), "local": list(self.local), "actuation": list(self.actuation)}


@dataclass(frozen=True)
class FitOptions:
    init_mode: InitMode = "measured"
    max_iter: int = 200
    initial_damping: float = 1e-3
    damping_factor: float = 10.0
    max_damping: float = 1e16
    grad_tol: float = 1e-8
    step_tol: float = 1e-10
    fd_rel_step: float = 1e-6
    fd_min_step: float = 1e-8
    dt: float = DEFAULT_DT
    workers: int = 1

    def __post_init__(self):
        if self.init_mode not in ("measured", "free"):
            raise ValueError(f"init_mode must be 'measured' or 'free', got {self.init_mode!r}.")
        if self.max_iter < 0 or self.workers < 1 or not self.dt > 0:
            raise ValueError("max_iter must be >= 0, workers >= 1 and dt > 0.")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, payload: dict) -> FitOptions:
        known = {item.name for item in fields(cls)}
        unknown = sorted(set(payload) - known)
        if unknown:
            raise ValueError(f"Unknown fit option keys: {', '.join(unknown)}.")
        return cls(**payload)


@dataclass(frozen=True)
class FitResult:
    params: ModelParams
    delays: DelayConfig
    objective: float
    window_costs: list[float]
    channel_rms: dict[str, float]
    iterations: int
    termination: str
    accepted_steps: int
    rejected_steps: int
    singular_solves: int
    non_finite_evaluations: int
    rank: int
    condition_number: float
    unidentifiable: list[str]
    init_mode: str
    options: FitOptions
    weights: ErrorWeights
    initial_states: list[list[float]] | None = None
    grid: list[dict] = field(default_factory=list)
    ties: list[tuple[int, int, int]] = field(default_factory=list)
    equivalent: list[tuple[int, int, int]] = field(default_factory=list)

    @property
    def rank_deficient(self) -> bool:
        return self.rank < len(PARAM_NAMES)

    def to_dict(self) -> dict:
        return {
            "params": dict(zip(PARAM_NAMES, self.params.as_array().tolist())),
            "delays": asdict(self.delays),
            "objective": self.objective,
            "per_window": [
                {"window": index, "cost": cost} for index, cost in enumerate(self.window_costs)
            ],
            "channel_rms": self.channel_rms,
            "diagnostics": {
                "iterations": self.iterations,
                "termination": self.termination,
                "accepted_steps": self.accepted_steps,
                "rejected_steps": self.rejected_steps,
                "singular_solves": self.singular_solves,
                "non_finite_evaluations": self.non_finite_evaluations,
                "rank": self.rank,
                "rank_deficient": self.rank_deficient,
                "condition_number": self.condition_number if math.isfinite(self.condition_number) else None,
                "unidentifiable": self.unidentifiable,
                "stability_problems": self.params.stability_problems(),
                "ties": [list(cell) for cell in self.ties],
                "equivalent_delays": [list(cell) for cell in self.equivalent],
            },
            "init_mode": self.init_mode,
            "initial_states": self.initial_states,
            "grid": self.grid,
            "options": self.options.to_dict(),
            "weights": asdict(self.weights),
        }


def pose_error(sim: VehicleState, meas: VehicleState, w: ErrorWeights | None = None) -> float:
    w = w or ErrorWeights()
    return (
        w.w_x * (sim.x - meas.x) ** 2
        + w.w_y * (sim.y - meas.y) ** 2
        + w.w_psi * math.sin((sim.psi - meas.psi) / 2.0) ** 2
        + w.w_v * (sim.v - meas.v) ** 2
    )


def slice_experiments(
    log: Sequence[MeasurementSample],
    n_window: int = DEFAULT_WINDOW,
    dt: float = DEFAULT_DT,
) -> SliceResult:
    if n_window < 2:
        raise ValueError(f"n_window must be at least 2, got {n_window}.")
    experiments: list[Experiment] = []
    discarded: list[tuple[int, str]] = []
    window_count = len(log) // n_window

    for window_index in range(window_count):
        window = log[window_index * n_window : (window_index + 1) * n_window]
        spacing = np.diff([sample.t for sample in window])
        gaps = np.flatnonzero(np.abs(spacing - dt) > SPACING_TOLERANCE)
        if gaps.size:
            reason = f"timing gap after t={window[gaps[0]].t:.6f} s"
            discarded.append((window_index, reason))
            logger.warning("Discarding window %s: %s", window_index, reason)
            continue
        experiments.append(Experiment.from_samples(window, index=window_index))

    dropped_tail = len(log) - window_count * n_window
    if dropped_tail:
        logger.info("Dropped %s trailing samples shorter than one window", dropped_tail)
    return SliceResult(experiments=experiments, discarded=discarded, dropped_tail=dropped_tail)


def apply_delays(
    exp: Experiment,
    delays: DelayConfig,
    margin: DelayConfig | None = None,
) -> AlignedExperiment:
    """Shift sensor and input channels onto the true-state time base.

    IPS pose at k reflects the true pose at k - ips_delay, odometer speed at k the true
    speed at k - local_delay, and the input commanded at k acts at k + actuation_delay.
    ``margin`` trims every delay combination of a grid to the same aligned window.
    """
    margin = margin or delays
    if (
        delays.ips_delay > margin.ips_delay
        or delays.local_delay > margin.local_delay
        or delays.actuation_delay > margin.actuation_delay
    ):
        raise AlignmentError(f"Delays {delays.as_tuple()} exceed alignment margin {margin.as_tuple()}.")

    lead = margin.actuation_delay
    tail = max(margin.ips_delay, margin.local_delay)
    n_samples = len(exp)
    if n_samples - lead - tail < 1:
        raise AlignmentError(
            f"Delays {delays.as_tuple()} leave no samples in a window of {n_samples}."
        )

    k = np.arange(lead, n_samples - tail)
    pose_index = k + delays.ips_delay
    speed_index = k + delays.local_delay
    input_index = k - delays.actuation_delay
    return AlignedExperiment(
        index=exp.index,
        t=exp.t[k],
        x=exp.x[pose_index],
        y=exp.y[pose_index],
        psi=exp.psi[pose_index],
        v=exp.v[speed_index],
        m=np.clip(exp.m[input_index], -1.0, 1.0),
        d=np.clip(exp.d[input_index], -1.0, 1.0),
        u=exp.u[input_index],
        delays=delays,
    )


def rollout(
    p_batch: np.ndarray,
    x0: np.ndarray,
    m: np.ndarray,
    d: np.ndarray,
    u: np.ndarray,
    dt: float = DEFAULT_DT,
) -> np.ndarray:
    """Explicit-Euler rollouts of the grey-box model for many parameter sets at once.

    p_batch is (P, 10); x0 is (E, 4) or (P, E, 4); inputs are (E, N).
    Returns states of shape (P, E, N, 4) with states[:, :, 0] = x0.
    """
    p_batch = np.atleast_2d(p_batch)
    batch_size, n_experiments, n_steps = p_batch.shape[0], m.shape[0], m.shape[1]
    x0 = np.broadcast_to(x0, (batch_size, n_experiments, 4))
    p_columns = [p_batch[:, index][:, None] for index in range(10)]

    states = np.empty((batch_size, n_experiments, n_steps, 4))
    x, y, psi, v = (x0[..., channel].copy() for channel in range(4))
    with np.errstate(over="ignore", invalid="ignore"):
        for k in range(n_steps):
            states[:, :, k, 0] = x
            states[:, :, k, 1] = y
            states[:, :, k, 2] = psi
            states[:, :, k, 3] = v
            if k == n_steps - 1:
                break
            dx, dy, dpsi, dv = parameterized_rates(psi, v, m[:, k], d[:, k], u[:, k], p_columns)
            x = x + dt * dx
            y = y + dt * dy
            psi = psi + dt * dpsi
            v = v + dt * dv
    return states


class _ShootingProblem:
    """Single-shooting residuals over a stack of equally long aligned experiments."""

    def __init__(
        self,
        aligned: Sequence[AlignedExperiment],
        weights: ErrorWeights,
        init_mode: InitMode,
        dt: float,
    ):
        lengths = {len(exp) for exp in aligned}
        if len(lengths) != 1:
            raise AlignmentError(f"Aligned experiments differ in length: {sorted(lengths)}.")
        self.measured = np.stack([exp.measured for exp in aligned])
        self.m = np.stack([exp.m for exp in aligned])
        self.d = np.stack([exp.d for exp in aligned])
        self.u = np.stack([exp.u for exp in aligned])
        self.n_experiments = self.measured.shape[0]
        self.sqrt_weights = np.sqrt(weights.as_array())
        self.init_mode = init_mode
        self.dt = dt
        self.non_finite_evaluations = 0

    @property
    def measured_initial(self) -> np.ndarray:
        return self.measured[:, 0, :]

    def pack(self, p: np.ndarray, initial_states: np.ndarray | None = None) -> np.ndarray:
        if self.init_mode == "measured":
            return np.asarray(p, dtype=float).copy()
        x0 = self.measured_initial if initial_states is None else np.asarray(initial_states, dtype=float)
        return np.concatenate([p, x0.ravel()])

    def unpack(self, theta_batch: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        p_batch = theta_batch[:, :10]
        if self.init_mode == "measured":
            return p_batch, self.measured_initial
        return p_batch, theta_batch[:, 10:].reshape(-1, self.n_experiments, 4)

    def residuals(self, theta_batch: np.ndarray) -> np.ndarray:
        """Weighted residuals (P, E, N, 4); the yaw channel is sqrt(w_psi)*sin(dpsi/2)."""
        p_batch, x0 = self.unpack(np.atleast_2d(theta_batch))
        states = rollout(p_batch, x0, self.m, self.d, self.u, self.dt)
        error = states - self.measured[None]
        with np.errstate(invalid="ignore"):
            error[..., 2] = np.sin(error[..., 2] / 2.0)
        return error * self.sqrt_weights

    def cost(self, theta: np.ndarray) -> tuple[float, np.ndarray]:
        residual = self.residuals(theta[None])[0].ravel()
        if not np.all(np.isfinite(residual)):
            self.non_finite_evaluations += 1
            return FAILED_SIMULATION_PENALTY, residual
        return float(residual @ residual), residual

    def jacobian(self, theta: np.ndarray, base: np.ndarray, options: FitOptions) -> np.ndarray:
        steps = np.maximum(options.fd_rel_step * np.abs(theta), options.fd_min_step)
        n_params = 10 if self.init_mode == "free" else theta.size
        batch = np.repeat(theta[None], n_params, axis=0)
        batch[np.arange(n_params), np.arange(n_params)] += steps[:n_params]
        columns = [
            (self.residuals(batch).reshape(n_params, -1) - base) / steps[:n_params, None]
        ]

        if self.init_mode == "free":
            # initial states only move their own experiment, so one batch member per
            # state channel perturbs that channel in every experiment at once
            state_steps = steps[10:].reshape(self.n_experiments, 4)
            state_batch = np.repeat(theta[None], 4, axis=0)
            for channel in range(4):
                state_batch[channel, 10:].reshape(self.n_experiments, 4)[:, channel] += state_steps[:, channel]
            moved = self.residuals(state_batch) - base.reshape(self.measured.shape)[None]
            state_columns = np.zeros((base.size, self.n_experiments * 4))
            rows_per_experiment = self.measured.shape[1] * 4
            for experiment in range(self.n_experiments):
                rows = slice(experiment * rows_per_experiment, (experiment + 1) * rows_per_experiment)
                for channel in range(4):
                    column = experiment * 4 + channel
                    state_columns[rows, column] = (
                        moved[channel, experiment].ravel() / state_steps[experiment, channel]
                    )
            columns.append(state_columns.T)

        jacobian = np.vstack(columns).T
        if not np.all(np.isfinite(jacobian)):
            self.non_finite_evaluations += 1
            jacobian = np.nan_to_num(jacobian, nan=0.0, posinf=0.0, neginf=0.0)
        return jacobian


def _rank_diagnostics(jacobian: np.ndarray, p: np.ndarray) -> tuple[int, float, list[str]]:
    scaled = jacobian[:, :10] * np.maximum(np.abs(p), 1.0)
    _, singular_values, right_vectors = np.linalg.svd(scaled, full_matrices=False)
    largest = singular_values[0] if singular_values.size else 0.0
    if largest == 0.0:
        return 0, math.inf, list(PARAM_NAMES)
    weak = singular_values <= RANK_TOLERANCE * largest
    rank = int(np.count_nonzero(~weak))
    condition = float(largest / singular_values[-1]) if singular_values[-1] > 0 else math.inf
    involved = np.zeros(10, dtype=bool)
    for vector in right_vectors[weak]:
        involved |= np.abs(vector) > 0.3
    return rank, condition, [name for name, flag in zip(PARAM_NAMES, involved) if flag]


def _levenberg_marquardt(problem: _ShootingProblem, theta: np.ndarray, options: FitOptions) -> dict:
    cost, residual = problem.cost(theta)
    damping = options.initial_damping
    accepted = rejected = singular = iterations = 0
    termination = "max_iter"
    jacobian = problem.jacobian(theta, residual, options)

    for _ in range(options.max_iter):
        gradient = jacobian.T @ residual
        if np.max(np.abs(gradient)) < options.grad_tol:
            termination = "gradient_tol"
            break
        normal = jacobian.T @ jacobian
        scale = np.diag(normal).copy()
        scale = np.maximum(scale, 1e-12 * max(float(scale.max()), 1.0))

        step_taken = False
        while True:
            try:
                step = np.linalg.solve(normal + damping * np.diag(scale), -gradient)
            except np.linalg.LinAlgError:
                step = None
            if step is None or not np.all(np.isfinite(step)):
                singular += 1
                damping *= options.damping_factor
                if damping > options.max_damping:
                    termination = "damping_limit"
                    break
                continue

            if np.linalg.norm(step) < options.step_tol * (np.linalg.norm(theta) + options.step_tol):
                termination = "step_tol"
                break

            candidate = theta + step
            candidate_cost, candidate_residual = problem.cost(candidate)
            if candidate_cost < cost:
                theta, cost, residual = candidate, candidate_cost, candidate_residual
                damping = max(damping / options.damping_factor, 1e-15)
                accepted += 1
                step_taken = True
                break

            rejected += 1
            damping *= options.damping_factor
            if damping > options.max_damping:
                termination = "damping_limit"
                break

        if not step_taken:
            break
        iterations += 1
        jacobian = problem.jacobian(theta, residual, options)

    return {
        "theta": theta,
        "cost": cost,
        "jacobian": jacobian,
        "iterations": iterations,
        "termination": termination,
        "accepted": accepted,
        "rejected": rejected,
        "singular": singular,
    }


def _align_all(
    experiments: Sequence[Experiment],
    delays: DelayConfig,
    margin: DelayConfig | None,
) -> list[AlignedExperiment]:
    if not experiments:
        raise ValueError("At least one experiment is required.")
    return [apply_delays(exp, delays, margin) for exp in experiments]


def objective(
    experiments: Sequence[Experiment],
    p: ModelParams,
    delays: DelayConfig,
    w: ErrorWeights | None = None,
    init_mode: InitMode = "measured",
    initial_states: np.ndarray | None = None,
    margin: DelayConfig | None = None,
    dt: float = DEFAULT_DT,
) -> float:
    problem = _ShootingProblem(_align_all(experiments, delays, margin), w or ErrorWeights(), init_mode, dt)
    cost, _ = problem.cost(problem.pack(p.as_array(), initial_states))
    if cost == FAILED_SIMULATION_PENALTY:
        logger.warning("Simulation failed for delays %s; returning penalty", delays.as_tuple())
    return cost


def estimate_parameters(
    experiments: Sequence[Experiment],
    delays: DelayConfig,
    p_init: ModelParams | None = None,
    w: ErrorWeights | None = None,
    options: FitOptions | None = None,
    margin: DelayConfig | None = None,
) -> FitResult:
    p_init = p_init or ModelParams.from_sequence(DEFAULT_P_INIT)
    w = w or ErrorWeights()
    options = options or FitOptions()
    problem = _ShootingProblem(_align_all(experiments, delays, margin), w, options.init_mode, options.dt)

    outcome = _levenberg_marquardt(problem, problem.pack(p_init.as_array()), options)
    theta = outcome["theta"]
    params = ModelParams.from_sequence(theta[:10])
    rank, condition, unidentifiable = _rank_diagnostics(outcome["jacobian"], theta[:10])

    residual = problem.residuals(theta[None])[0]
    window_costs = [float(np.sum(block**2)) for block in residual]
    p_batch, x0 = problem.unpack(theta[None])
    states = rollout(p_batch, x0, problem.m, problem.d, problem.u, problem.dt)[0]
    raw_error = states - problem.measured
    raw_error[..., 2] = wrap_angle(raw_error[..., 2])
    channel_rms = {
        channel: float(np.sqrt(np.mean(raw_error[..., index] ** 2))) for index, channel in enumerate(CHANNELS)
    }

    if outcome["termination"] == "max_iter":
        logger.warning("Fit for delays %s stopped at max_iter=%s", delays.as_tuple(), options.max_iter)
    if rank < len(PARAM_NAMES):
        logger.warning("Fit for delays %s is rank deficient (rank %s): %s", delays.as_tuple(), rank, unidentifiable)

    return FitResult(
        params=params,
        delays=delays,
        objective=outcome["cost"],
        window_costs=window_costs,
        channel_rms=channel_rms,
        iterations=outcome["iterations"],
        termination=outcome["termination"],
        accepted_steps=outcome["accepted"],
        rejected_steps=outcome["rejected"],
        singular_solves=outcome["singular"],
        non_finite_evaluations=problem.non_finite_evaluations,
        rank=rank,
        condition_number=condition,
        unidentifiable=unidentifiable,
        init_mode=options.init_mode,
        options=options,
        weights=w,
        initial_states=theta[10:].reshape(-1, 4).tolist() if options.init_mode == "free" else None,
    )


def _select_delay_cell(
    fits: Sequence[tuple[DelayConfig, FitResult]],
) -> tuple[DelayConfig, FitResult, list[tuple[int, int, int]], list[tuple[int, int, int]]]:
    """Pick the winning cell, anchoring shift-equivalent cells on the smallest local delay.

    Returns the cell, its fit, the cells tied at the best objective and the cells sharing the
    winner's shift class.
    """
    best_objective = min(fit.objective for _, fit in fits)
    tied = [
        cell
        for cell, fit in fits
        if math.isclose(fit.objective, best_objective, rel_tol=OBJECTIVE_TIE_RTOL, abs_tol=OBJECTIVE_TIE_ATOL)
    ]

    by_class: dict[tuple[int, int], list[tuple[DelayConfig, FitResult]]] = {}
    for cell, fit in fits:
        by_class.setdefault(cell.shift_class(), []).append((cell, fit))
    anchors = {key: min(members, key=lambda item: item[0].local_delay) for key, members in by_class.items()}

    candidates = [anchors[key] for key in {cell.shift_class() for cell in tied}]
    best_cell, best = min(candidates, key=lambda item: item[0].tie_key())
    equivalent = sorted(cell.as_tuple() for cell, _ in by_class[best_cell.shift_class()])
    return best_cell, best, sorted(cell.as_tuple() for cell in tied), equivalent


def delay_grid_search(
    experiments: Sequence[Experiment],
    delay_ranges: DelayGrid | None = None,
    p_init: ModelParams | None = None,
    w: ErrorWeights | None = None,
    options: FitOptions | None = None,
) -> FitResult:
    delay_ranges = delay_ranges or DelayGrid()
    options = options or FitOptions()
    cells = delay_ranges.cells()
    margin = delay_ranges.max_delays()
    outcomes: list[FitResult | str | None] = [None] * len(cells)

    log_stage("Starting delay grid search", cells=len(cells), experiments=len(experiments), workers=options.workers)
    with ThreadPoolExecutor(max_workers=min(options.workers, len(cells))) as executor:
        future_to_index = {
            executor.submit(estimate_parameters, experiments, cell, p_init, w, options, margin): index
            for index, cell in enumerate(cells)
        }
        completed = 0
        for future in as_completed(future_to_index):
            index = future_to_index[future]
            try:
                outcomes[index] = future.result()
            except (ValueError, RuntimeError, np.linalg.LinAlgError) as exc:
                outcomes[index] = str(exc)
                logger.warning("Delay cell %s failed: %s", cells[index].as_tuple(), exc)
            completed += 1
            if completed % 10 == 0 or completed == len(cells):
                log_stage("Delay grid progress", completed=completed, total=len(cells))

    fits = [(cell, outcome) for cell, outcome in zip(cells, outcomes) if isinstance(outcome, FitResult)]
    if not fits:
        raise DelayGridSearchError({cell.as_tuple(): str(outcome) for cell, outcome in zip(cells, outcomes)})

    best_cell, best, ties, equivalent = _select_delay_cell(fits)
    if len(ties) > 1:
        logger.info("Delay cells %s tie at objective %s; picked %s", ties, best.objective, best_cell.as_tuple())
    if len(equivalent) > 1:
        log_stage("Delay cells differ only by a time shift", cells=equivalent, anchored=best_cell.as_tuple())

    grid_rows = []
    for cell, outcome in zip(cells, outcomes):
        row = {"delays": list(cell.as_tuple())}
        if isinstance(outcome, FitResult):
            row.update(objective=outcome.objective, termination=outcome.termination)
        else:
            row.update(objective=None, error=outcome)
        grid_rows.append(row)

    log_stage("Finished delay grid search", delays=best_cell.as_tuple(), objective=f"{best.objective:.6g}")
    return replace(
        best,
        grid=grid_rows,
        ties=ties if len(ties) > 1 else [],
        equivalent=equivalent if len(equivalent) > 1 else [],
    )


def replay_model(
    experiments: Sequence[Experiment],
    p: ModelParams,
    delays: DelayConfig,
    dt: float = DEFAULT_DT,
) -> pd.DataFrame:
    """Open-loop predictions against the measurements of every aligned window."""
    aligned = _align_all(experiments, delays, None)
    frames = []
    for exp in aligned:
        states = rollout(p.as_array(), exp.measured[:1], exp.m[None], exp.d[None], exp.u[None], dt)[0, 0]
        frame = pd.DataFrame({"window": exp.index, "t": exp.t})
        for index, channel in enumerate(CHANNELS):
            frame[f"{channel}_pred"] = states[:, index]
            frame[f"{channel}_meas"] = exp.measured[:, index]
        frames.append(frame)
    return pd.concat(frames, ignore_index=True)


def residual_statistics(replay: pd.DataFrame) -> dict[str, dict[str, float]]:
    stats = {}
    for channel in CHANNELS:
        error = replay[f"{channel}_pred"].to_numpy() - replay[f"{channel}_meas"].to_numpy()
        if channel == "psi":
            error = wrap_angle(error)
        stats[channel] = {
            "rms": float(np.sqrt(np.mean(error**2))),
            "max_abs": float(np.max(np.abs(error))),
            "mean": float(np.mean(error)),
        }
    return stats


def samples_to_frame(samples: Sequence[MeasurementSample]) -> pd.DataFrame:
    return pd.DataFrame([astuple_sample(sample) for sample in samples], columns=MEASUREMENT_COLUMNS)


def astuple_sample(sample: MeasurementSample) -> tuple[float, ...]:
    return (sample.t, sample.x_hat, sample.y_hat, sample.psi_hat, sample.v_hat, sample.m, sample.d, sample.u)


def save_measurement_log(samples: Sequence[MeasurementSample], path: str | Path) -> None:
    samples_to_frame(samples).to_csv(path, index=False)


def load_measurement_log(path: str | Path) -> list[MeasurementSample]:
    path = Path(path)
    try:
        raw_df = pd.read_csv(path, dtype=str, keep_default_na=False)
    except FileNotFoundError as exc:
        raise MeasurementLogError(f"Measurement log '{path}' was not found.") from exc
    except pd.errors.EmptyDataError as exc:
        raise MeasurementLogError("Measurement log is empty.", line=1) from exc
    except pd.errors.ParserError as exc:
        match = re.search(r"line (\d+)", str(exc))
        raise MeasurementLogError(f"Malformed row: {exc}", line=int(match.group(1)) if match else None) from exc

    if list(raw_df.columns) != MEASUREMENT_COLUMNS:
        raise MeasurementLogError(f"Header must be {','.join(MEASUREMENT_COLUMNS)}.", line=1)

    numeric_df = raw_df.apply(lambda column: pd.to_numeric(column.str.strip(), errors="coerce"))
    invalid = ~np.isfinite(numeric_df.to_numpy(dtype=float)).all(axis=1)
    if invalid.any():
        row = int(np.flatnonzero(invalid)[0])
        raise MeasurementLogError(f"Non-numeric or non-finite field in {raw_df.iloc[row].tolist()}.", line=row + 2)

    times = numeric_df["t"].to_numpy()
    out_of_order = np.flatnonzero(np.diff(times) <= 0)
    if out_of_order.size:
        row = int(out_of_order[0]) + 1
        raise MeasurementLogError(
            f"Timestamp {times[row]} does not follow {times[row - 1]}; logs must be causally ordered.",
            line=row + 2,
        )

    return [MeasurementSample(*map(float, row)) for row in numeric_df.itertuples(index=False)]


def save_fit_report(result: FitResult, path: str | Path, extra: dict | None = None) -> dict:
    payload = result.to_dict()
    if extra:
        payload.update(extra)
    Path(path).write_text(json.dumps(payload, indent=2), encoding="utf-8")
    return payload
