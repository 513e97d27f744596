"""On-board mid-level controller: state fusion, MPC and PID tracking, mode handling.

Every function here is pure. ``mlc_tick`` takes the controller memory as an
immutable ``MlcState`` and returns the next one, so many vehicles can be ticked
in parallel without sharing anything.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, fields, replace
from enum import Enum
from typing import Sequence

from vehicle_lab.dynamics import (
    DEFAULT_DT,
    NOMINAL_VOLTAGE,
    ControlInput,
    ModelParams,
    VehicleState,
    clamp,
    parameterized_derivative,
    steady_state_motor_command,
    wrap_angle,
)
from vehicle_lab.logging_config import logger
from vehicle_lab.messages import DirectInput, MessageDecodeError, TrajectorySegment, VehicleStateMsg, decode
from vehicle_lab.trajectory import (
    STANDSTILL_SPEED,
    Trajectory,
    TrajectoryError,
    interpolate,
    reference_yaw,
)

SAFE_STOP = (0.0, 0.0)


class OperatingMode(str, Enum):
    EXTERNAL_CONTROL = "EXTERNAL_CONTROL"
    TRAJECTORY_FOLLOWING = "TRAJECTORY_FOLLOWING"


# ---------------------------------------------------------------------------
# State fusion
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class IpsFix:
    step: int
    x: float
    y: float
    psi: float


@dataclass(frozen=True)
class HistoryEntry:
    step: int
    state: VehicleState
    applied: ControlInput | None
    odometer_v: float | None
    yaw_rate: float | None


@dataclass(frozen=True)
class FusionConfig:
    ips_gain: float = 0.5
    odometer_gain: float = 0.2
    history_length: int = 50

    def __post_init__(self):
        if not (0 <= self.ips_gain <= 1 and 0 <= self.odometer_gain <= 1):
            raise ValueError("Fusion gains must lie in [0, 1].")
        if self.history_length < 2:
            raise ValueError("history_length must be at least 2.")


@dataclass(frozen=True)
class StateEstimate:
    t: float
    step: int
    state: VehicleState
    ips_age: int
    odometer_age: int = 0
    history: tuple[HistoryEntry, ...] = ()
    ignored_fixes: int = 0

    @classmethod
    def initial(
        cls,
        state: VehicleState,
        step: int,
        dt: float = DEFAULT_DT,
        ips_age: int = 0,
        odometer_v: float | None = None,
        yaw_rate: float | None = None,
    ) -> StateEstimate:
        entry = HistoryEntry(step, state, None, odometer_v, yaw_rate)
        return cls(t=step * dt, step=step, state=state, ips_age=ips_age, history=(entry,))


def _propagate(
    state: VehicleState,
    inp: ControlInput | None,
    yaw_rate: float | None,
    p: ModelParams,
    dt: float,
) -> VehicleState:
    rate = parameterized_derivative(state, inp or ControlInput(*SAFE_STOP), p)
    dpsi = rate.dpsi if yaw_rate is None else yaw_rate
    try:
        return VehicleState(
            x=state.x + dt * rate.dx,
            y=state.y + dt * rate.dy,
            psi=state.psi + dt * dpsi,
            v=state.v + dt * rate.dv,
        )
    except ValueError:
        logger.warning("Estimator propagation went non-finite; holding the last estimate")
        return state


def _blend_speed(state: VehicleState, odometer_v: float | None, gain: float) -> VehicleState:
    if odometer_v is None or gain == 0:
        return state
    return replace(state, v=state.v + gain * (odometer_v - state.v))


def _rebase(state: VehicleState, fix: IpsFix, gain: float) -> VehicleState:
    return VehicleState(
        x=state.x + gain * (fix.x - state.x),
        y=state.y + gain * (fix.y - state.y),
        psi=state.psi + gain * wrap_angle(fix.psi - state.psi),
        v=state.v,
    )


def fuse(
    prev: StateEstimate,
    odometer_v: float | None,
    yaw_rate: float | None,
    ips_fixes: Sequence[IpsFix] = (),
    applied_input: ControlInput | None = None,
    p: ModelParams | None = None,
    dt: float = DEFAULT_DT,
    cfg: FusionConfig | None = None,
) -> StateEstimate:
    """Advance the estimate one step and fold in any delayed IPS fixes.

    ``applied_input`` is the input that acted over the last step. A fix tagged with
    an older step corrects the buffered estimate at that step, and the buffered
    inputs and sensor readings are replayed up to now.

    The correction at the fix step moves the buffered pose ``cfg.ips_gain`` of the way to
    the fix. The default 0.5 moves it halfway; ``ips_gain=1`` resets the pose to
    the fix exactly.
    """
    if not dt > 0:
        raise ValueError(f"dt must be positive, got {dt}.")
    if p is None:
        raise ValueError("fuse needs the controller's ModelParams.")
    cfg = cfg or FusionConfig()
    applied_input = applied_input or ControlInput(*SAFE_STOP)

    history = list(prev.history) or [HistoryEntry(prev.step, prev.state, None, None, None)]
    history[-1] = replace(history[-1], applied=applied_input)
    step = prev.step + 1
    predicted = _propagate(prev.state, applied_input, history[-1].yaw_rate, p, dt)
    history.append(HistoryEntry(step, _blend_speed(predicted, odometer_v, cfg.odometer_gain), None, odometer_v, yaw_rate))
    history = history[-cfg.history_length :]

    ips_age = prev.ips_age + 1
    ignored = prev.ignored_fixes
    for fix in sorted(ips_fixes, key=lambda item: item.step):
        offset = fix.step - history[0].step
        if fix.step > step or offset < 0:
            ignored += 1
            logger.debug("Ignoring IPS fix for step %s at step %s", fix.step, step)
            continue
        history[offset] = replace(history[offset], state=_rebase(history[offset].state, fix, cfg.ips_gain))
        for index in range(offset, len(history) - 1):
            entry, following = history[index], history[index + 1]
            replayed = _propagate(entry.state, entry.applied, entry.yaw_rate, p, dt)
            history[index + 1] = replace(
                following, state=_blend_speed(replayed, following.odometer_v, cfg.odometer_gain)
            )
        ips_age = min(ips_age, step - fix.step)

    return StateEstimate(
        t=step * dt,
        step=step,
        state=history[-1].state,
        ips_age=ips_age,
        odometer_age=0 if odometer_v is not None else prev.odometer_age + 1,
        history=tuple(history),
        ignored_fixes=ignored,
    )


# ---------------------------------------------------------------------------
# Model predictive control
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class MpcConfig:
    horizon: int = 25
    dt: float = DEFAULT_DT
    w_pos: float = 100.0
    w_yaw: float = 2.0
    w_speed: float = 2.0
    w_input: float = 0.05
    w_rate: float = 0.5
    m_bounds: tuple[float, float] = (-1.0, 1.0)
    d_bounds: tuple[float, float] = (-1.0, 1.0)
    delay_steps: int = 5
    max_iter: int = 30
    initial_step: float = 0.05
    max_step: float = 10.0
    armijo: float = 1e-4
    max_backtracks: int = 30
    tolerance: float = 1e-10

    def __post_init__(self):
        object.__setattr__(self, "m_bounds", tuple(self.m_bounds))
        object.__setattr__(self, "d_bounds", tuple(self.d_bounds))
        problems = []
        if self.horizon < 1:
            problems.append("horizon must be >= 1")
        if not self.dt > 0:
            problems.append("dt must be positive")
        if min(self.w_pos, self.w_yaw, self.w_speed, self.w_input, self.w_rate) < 0:
            problems.append("weights must be non-negative")
        for name in ("m_bounds", "d_bounds"):
            low, high = getattr(self, name)
            if not -1.0 <= low <= high <= 1.0:
                problems.append(f"{name} must lie inside [-1, 1]")
        if self.delay_steps < 0 or self.max_iter < 0:
            problems.append("delay_steps and max_iter must be >= 0")
        if problems:
            raise ValueError("Invalid MpcConfig: " + "; ".join(problems) + ".")

    def to_dict(self) -> dict:
        payload = asdict(self)
        payload["m_bounds"] = list(self.m_bounds)
        payload["d_bounds"] = list(self.d_bounds)
        return payload

    @classmethod
    def from_dict(cls, payload: dict) -> MpcConfig:
        known = {item.name for item in fields(cls)}
        unknown = sorted(set(payload) - known)
        if unknown:
            raise ValueError(f"Unknown MpcConfig keys: {', '.join(unknown)}.")
        return cls(**payload)


@dataclass(frozen=True)
class MpcProblem:
    start: VehicleState
    t_start: float
    references: tuple[tuple[float, float, float | None, float], ...]
    trim: tuple[tuple[float, float], ...]
    anchor: tuple[float, float] | None
    params: tuple[float, ...]
    voltage: float
    cfg: MpcConfig


@dataclass(frozen=True)
class MpcResult:
    command: ControlInput
    solution: tuple[tuple[float, ...], tuple[float, ...]]
    iterations: int
    cost: float
    converged: bool
    non_finite: bool = False
    cost_history: tuple[float, ...] = ()


def _motor(m: float, p8: float) -> float:
    return math.copysign(abs(m) ** p8, m) if m != 0 else 0.0


def _motor_slope(m: float, p8: float) -> float:
    if m == 0:
        return 1.0 if p8 == 1 else 0.0
    return p8 * abs(m) ** (p8 - 1.0)


def build_mpc_problem(
    est: StateEstimate,
    traj: Trajectory,
    p: ModelParams,
    cfg: MpcConfig,
    pending: Sequence[ControlInput] = (),
    prev_input: ControlInput | None = None,
    voltage: float = NOMINAL_VOLTAGE,
) -> MpcProblem:
    """Shift the estimate over the not-yet-effective inputs and sample the reference."""
    if traj is None or len(traj) == 0:
        raise TrajectoryError("MPC needs a non-empty trajectory.")
    dt = cfg.dt
    state = est.state
    buffered = list(pending)[-cfg.delay_steps :] if cfg.delay_steps else []
    for inp in buffered:
        state = _propagate(state, inp, None, p, dt)
    t_start = est.t + len(buffered) * dt

    samples = [interpolate(traj, t_start + index * dt) for index in range(cfg.horizon + 1)]
    yaws = [reference_yaw(sample) for sample in samples]
    references = []
    trim = []
    for index in range(cfg.horizon):
        sample, yaw, previous_yaw = samples[index + 1], yaws[index + 1], yaws[index]
        references.append((sample.x, sample.y, yaw, sample.speed))
        d_trim = -p.p9
        if yaw is not None and previous_yaw is not None and p.p4 != 0:
            yaw_rate = wrap_angle(yaw - previous_yaw) / dt
            d_trim = yaw_rate / (p.p4 * sample.speed) - p.p9
        m_trim = steady_state_motor_command(sample.speed, voltage, p) if sample.speed >= STANDSTILL_SPEED else 0.0
        trim.append((clamp(m_trim, *cfg.m_bounds), clamp(float(d_trim), *cfg.d_bounds)))

    return MpcProblem(
        start=state,
        t_start=t_start,
        references=tuple(references),
        trim=tuple(trim),
        anchor=(prev_input.m, prev_input.d) if prev_input is not None else None,
        params=tuple(p.as_array().tolist()),
        voltage=voltage,
        cfg=cfg,
    )


def _rollout(problem: MpcProblem, m_seq: Sequence[float], d_seq: Sequence[float]):
    p1, p2, p3, p4, p5, p6, p7, p8, p9, p10 = problem.params
    cfg = problem.cfg
    dt = cfg.dt
    drive = p6 + p7 * problem.voltage
    x, y, psi, v = problem.start.x, problem.start.y, problem.start.psi, problem.start.v
    states = [(x, y, psi, v)]
    previous = problem.anchor or (m_seq[0], d_seq[0])
    cost = 0.0
    try:
        for index in range(cfg.horizon):
            m, d = m_seq[index], d_seq[index]
            steer = d + p9
            speed = p1 * v * (1.0 + p2 * steer * steer)
            heading = psi + p3 * steer + p10
            x, y, psi, v = (
                x + dt * speed * math.cos(heading),
                y + dt * speed * math.sin(heading),
                psi + dt * p4 * v * steer,
                v + dt * (p5 * v + drive * _motor(m, p8)),
            )
            states.append((x, y, psi, v))

            ref_x, ref_y, ref_yaw, ref_speed = problem.references[index]
            trim_m, trim_d = problem.trim[index]
            cost += cfg.w_pos * ((x - ref_x) ** 2 + (y - ref_y) ** 2) + cfg.w_speed * (v - ref_speed) ** 2
            if ref_yaw is not None:
                cost += cfg.w_yaw * (1.0 - math.cos(psi - ref_yaw)) / 2.0
            cost += cfg.w_input * ((m - trim_m) ** 2 + (d - trim_d) ** 2)
            cost += cfg.w_rate * ((m - previous[0]) ** 2 + (d - previous[1]) ** 2)
            previous = (m, d)
    except (OverflowError, ValueError):
        return math.inf, states
    return cost, states


def _gradient(problem: MpcProblem, m_seq, d_seq, states) -> tuple[list[float], list[float]]:
    """Adjoint gradient of the rollout cost with respect to both input sequences."""
    p1, p2, p3, p4, p5, p6, p7, p8, p9, p10 = problem.params
    cfg = problem.cfg
    dt = cfg.dt
    drive = p6 + p7 * problem.voltage
    horizon = cfg.horizon
    grad_m = [0.0] * horizon
    grad_d = [0.0] * horizon
    lam_x = lam_y = lam_psi = lam_v = 0.0

    for index in reversed(range(horizon)):
        x1, y1, psi1, v1 = states[index + 1]
        ref_x, ref_y, ref_yaw, ref_speed = problem.references[index]
        lam_x += 2.0 * cfg.w_pos * (x1 - ref_x)
        lam_y += 2.0 * cfg.w_pos * (y1 - ref_y)
        lam_v += 2.0 * cfg.w_speed * (v1 - ref_speed)
        if ref_yaw is not None:
            lam_psi += cfg.w_yaw * math.sin(psi1 - ref_yaw) / 2.0

        _, _, psi0, v0 = states[index]
        m, d = m_seq[index], d_seq[index]
        steer = d + p9
        gain = 1.0 + p2 * steer * steer
        heading = psi0 + p3 * steer + p10
        cos_h, sin_h = math.cos(heading), math.sin(heading)

        grad_d[index] = (
            lam_x * dt * p1 * v0 * (2.0 * p2 * steer * cos_h - gain * sin_h * p3)
            + lam_y * dt * p1 * v0 * (2.0 * p2 * steer * sin_h + gain * cos_h * p3)
            + lam_psi * dt * p4 * v0
        )
        grad_m[index] = lam_v * dt * drive * _motor_slope(m, p8)

        trim_m, trim_d = problem.trim[index]
        grad_m[index] += 2.0 * cfg.w_input * (m - trim_m)
        grad_d[index] += 2.0 * cfg.w_input * (d - trim_d)
        if index > 0 or problem.anchor is not None:
            prev_m, prev_d = (m_seq[index - 1], d_seq[index - 1]) if index > 0 else problem.anchor
            grad_m[index] += 2.0 * cfg.w_rate * (m - prev_m)
            grad_d[index] += 2.0 * cfg.w_rate * (d - prev_d)
        if index + 1 < horizon:
            grad_m[index] -= 2.0 * cfg.w_rate * (m_seq[index + 1] - m)
            grad_d[index] -= 2.0 * cfg.w_rate * (d_seq[index + 1] - d)

        lam_x, lam_y, lam_psi, lam_v = (
            lam_x,
            lam_y,
            lam_psi + lam_x * (-dt * p1 * v0 * gain * sin_h) + lam_y * (dt * p1 * v0 * gain * cos_h),
            lam_x * dt * p1 * gain * cos_h
            + lam_y * dt * p1 * gain * sin_h
            + lam_psi * dt * p4 * steer
            + lam_v * (1.0 + dt * p5),
        )
    return grad_m, grad_d


def _safe_stop_result(voltage: float, horizon: int, iterations: int = 0) -> MpcResult:
    logger.warning("MPC solve went non-finite; issuing safe stop")
    return MpcResult(
        command=ControlInput(*SAFE_STOP, u=voltage),
        solution=((0.0,) * horizon, (0.0,) * horizon),
        iterations=iterations,
        cost=math.inf,
        converged=False,
        non_finite=True,
    )


def solve_mpc(problem: MpcProblem, initial: tuple[Sequence[float], Sequence[float]] | None = None) -> MpcResult:
    """Projected gradient descent with Armijo backtracking over the input sequences."""
    cfg = problem.cfg
    m_low, m_high = cfg.m_bounds
    d_low, d_high = cfg.d_bounds
    if initial is None:
        initial = ([trim[0] for trim in problem.trim], [trim[1] for trim in problem.trim])
    m_seq = [clamp(value, m_low, m_high) for value in initial[0]]
    d_seq = [clamp(value, d_low, d_high) for value in initial[1]]

    cost, states = _rollout(problem, m_seq, d_seq)
    if not math.isfinite(cost):
        return _safe_stop_result(problem.voltage, cfg.horizon)

    step = cfg.initial_step
    costs = [cost]
    iterations = 0
    converged = False
    for _ in range(cfg.max_iter):
        grad_m, grad_d = _gradient(problem, m_seq, d_seq, states)
        if not all(math.isfinite(value) for value in grad_m + grad_d):
            return _safe_stop_result(problem.voltage, cfg.horizon, iterations)

        accepted = False
        for _ in range(cfg.max_backtracks):
            trial_m = [clamp(m - step * g, m_low, m_high) for m, g in zip(m_seq, grad_m)]
            trial_d = [clamp(d - step * g, d_low, d_high) for d, g in zip(d_seq, grad_d)]
            moves = [a - b for a, b in zip(trial_m, m_seq)] + [a - b for a, b in zip(trial_d, d_seq)]
            if max(abs(move) for move in moves) <= cfg.tolerance:
                converged = True
                break
            directional = sum(g * move for g, move in zip(grad_m + grad_d, moves))
            trial_cost, trial_states = _rollout(problem, trial_m, trial_d)
            if math.isfinite(trial_cost) and trial_cost <= cost + cfg.armijo * directional:
                m_seq, d_seq, cost, states = trial_m, trial_d, trial_cost, trial_states
                costs.append(cost)
                step = min(step * 2.0, cfg.max_step)
                accepted = True
                break
            step *= 0.5

        if converged or not accepted:
            break
        iterations += 1

    command = ControlInput(m=clamp(m_seq[0], m_low, m_high), d=clamp(d_seq[0], d_low, d_high), u=problem.voltage)
    return MpcResult(
        command=command,
        solution=(tuple(m_seq), tuple(d_seq)),
        iterations=iterations,
        cost=cost,
        converged=converged,
        cost_history=tuple(costs),
    )


def _shifted(solution: tuple[Sequence[float], Sequence[float]], horizon: int):
    shifted = []
    for sequence in solution:
        values = list(sequence[1:]) + list(sequence[-1:])
        shifted.append((values + values[-1:] * horizon)[:horizon])
    return shifted[0], shifted[1]


def mpc_step(
    est: StateEstimate,
    traj: Trajectory,
    p: ModelParams,
    cfg: MpcConfig | None = None,
    prev_input: ControlInput | None = None,
    pending: Sequence[ControlInput] = (),
    warm_start: MpcResult | None = None,
    voltage: float = NOMINAL_VOLTAGE,
) -> MpcResult:
    cfg = cfg or MpcConfig()
    problem = build_mpc_problem(est, traj, p, cfg, pending, prev_input, voltage)
    initial = None
    if warm_start is not None and not warm_start.non_finite:
        initial = _shifted(warm_start.solution, cfg.horizon)
    return solve_mpc(problem, initial)


# ---------------------------------------------------------------------------
# PID baseline
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PidGains:
    k_ff: float = 1.0
    kp_speed: float = 1.0
    ki_speed: float = 0.5
    k_cross_track: float = 2.0
    k_heading: float = 1.0
    kd_cross_track: float = 0.0
    integral_limit: float = 1.0

    @classmethod
    def zero(cls) -> PidGains:
        return cls(0.0, 0.0, 0.0, 0.0, 0.0, 0.0)

    @classmethod
    def from_dict(cls, payload: dict) -> PidGains:
        known = {item.name for item in fields(cls)}
        unknown = sorted(set(payload) - known)
        if unknown:
            raise ValueError(f"Unknown PidGains keys: {', '.join(unknown)}.")
        return cls(**payload)


@dataclass(frozen=True)
class PidState:
    integral: float = 0.0
    prev_cross_track: float | None = None


@dataclass(frozen=True)
class PidResult:
    command: ControlInput
    state: PidState
    cross_track: float
    heading_error: float


def pid_step(
    est: StateEstimate,
    traj: Trajectory,
    p: ModelParams,
    gains: PidGains | None = None,
    dt: float = DEFAULT_DT,
    state: PidState | None = None,
    voltage: float = NOMINAL_VOLTAGE,
) -> PidResult:
    """PI speed loop through the inverse motor law and a Stanley-style PD steering law."""
    if traj is None or len(traj) == 0:
        raise TrajectoryError("PID needs a non-empty trajectory.")
    gains = gains or PidGains()
    state = state or PidState()
    vehicle = est.state

    sample = interpolate(traj, est.t)
    ahead = interpolate(traj, est.t + dt)
    ref_yaw = reference_yaw(sample)
    ref_speed = sample.speed
    yaw_for_error = ref_yaw if ref_yaw is not None else vehicle.psi

    cross_track = -math.sin(yaw_for_error) * (vehicle.x - sample.x) + math.cos(yaw_for_error) * (vehicle.y - sample.y)
    heading_error = float(wrap_angle(vehicle.psi - yaw_for_error))

    speed_error = ref_speed - vehicle.v
    integral = clamp(state.integral + speed_error * dt, -gains.integral_limit, gains.integral_limit)
    target_speed = gains.k_ff * ref_speed + gains.kp_speed * speed_error + gains.ki_speed * integral
    m = steady_state_motor_command(target_speed, voltage, p)

    steer_trim = 0.0
    ahead_yaw = reference_yaw(ahead)
    if ref_yaw is not None and ahead_yaw is not None and p.p4 != 0:
        steer_trim = wrap_angle(ahead_yaw - ref_yaw) / dt / (p.p4 * ref_speed)
    derivative = 0.0 if state.prev_cross_track is None else (cross_track - state.prev_cross_track) / dt
    d = (
        gains.k_ff * (float(steer_trim) - p.p9)
        - gains.k_cross_track * cross_track
        - gains.k_heading * heading_error
        - gains.kd_cross_track * derivative
    )

    return PidResult(
        command=ControlInput(m=clamp(m), d=clamp(d), u=voltage),
        state=PidState(integral=integral, prev_cross_track=cross_track),
        cross_track=cross_track,
        heading_error=heading_error,
    )


# ---------------------------------------------------------------------------
# Mid-level controller tick
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ControllerConfig:
    params: ModelParams
    kind: str = "mpc"
    mpc: MpcConfig = field(default_factory=MpcConfig)
    pid: PidGains = field(default_factory=PidGains)
    fusion: FusionConfig = field(default_factory=FusionConfig)
    actuation_delay: int = 5
    direct_input_timeout_steps: int = 10
    dt: float = DEFAULT_DT

    def __post_init__(self):
        if self.kind not in ("mpc", "pid"):
            raise ValueError(f"Controller kind must be 'mpc' or 'pid', got {self.kind!r}.")
        if self.actuation_delay < 0 or self.direct_input_timeout_steps < 1:
            raise ValueError("actuation_delay must be >= 0 and direct_input_timeout_steps >= 1.")


@dataclass(frozen=True)
class SensorReading:
    step: int
    odometer_v: float | None = None
    yaw_rate: float | None = None
    voltage: float = NOMINAL_VOLTAGE
    ips_fixes: tuple[IpsFix, ...] = ()


@dataclass(frozen=True)
class TickDiagnostics:
    controller: str = "none"
    iterations: int = 0
    cost: float = 0.0
    non_finite: bool = False
    cross_track: float = 0.0


@dataclass(frozen=True)
class MlcState:
    mode: OperatingMode = OperatingMode.TRAJECTORY_FOLLOWING
    estimate: StateEstimate | None = None
    trajectory: Trajectory | None = None
    command_history: tuple[ControlInput, ...] = ()
    direct_input: ControlInput | None = None
    direct_input_step: int | None = None
    mpc_memory: MpcResult | None = None
    pid_state: PidState = field(default_factory=PidState)
    malformed_messages: int = 0
    stale_points: int = 0
    diagnostics: TickDiagnostics = field(default_factory=TickDiagnostics)

    @classmethod
    def initial(cls, cfg: ControllerConfig) -> MlcState:
        zero = ControlInput(*SAFE_STOP)
        return cls(command_history=(zero,) * (cfg.actuation_delay + 1))


def _merge_segment(traj: Trajectory | None, segment: TrajectorySegment) -> tuple[Trajectory | None, int]:
    points = sorted(segment.points, key=lambda point: point.t)
    stale = 0
    if traj is None:
        try:
            return Trajectory.from_points(_strictly_increasing(points)), 0
        except TrajectoryError as exc:
            logger.warning("Rejected trajectory segment: %s", exc)
            return None, len(points)
    fresh = [point for point in points if point.t > traj.end_time and point.is_finite()]
    stale = len(points) - len(fresh)
    fresh = _strictly_increasing(fresh)
    if fresh:
        traj = Trajectory(points=traj.points + tuple(fresh))
    return traj, stale


def _strictly_increasing(points):
    kept = []
    for point in points:
        if not kept or point.t > kept[-1].t:
            kept.append(point)
    return kept


def mlc_tick(
    inbox: Sequence[str],
    sensors: SensorReading,
    mode_state: MlcState,
    cfg: ControllerConfig,
) -> tuple[ControlInput, VehicleStateMsg, MlcState]:
    """One 20 ms tick: read messages, fuse sensors, pick and clamp the actuator command."""
    step = sensors.step
    mode = mode_state.mode
    trajectory = mode_state.trajectory
    direct_input, direct_step = mode_state.direct_input, mode_state.direct_input_step
    malformed = mode_state.malformed_messages
    stale = mode_state.stale_points
    direct_this_tick = False

    for payload in inbox:
        try:
            message = decode(payload)
        except MessageDecodeError as exc:
            malformed += 1
            logger.debug("Dropping malformed message at step %s: %s", step, exc)
            continue
        if isinstance(message, DirectInput):
            direct_input = ControlInput(m=message.m, d=message.d, u=sensors.voltage).clamped()
            direct_step = step
            direct_this_tick = True
        elif isinstance(message, TrajectorySegment):
            trajectory, rejected = _merge_segment(trajectory, message)
            stale += rejected
            mode = OperatingMode.TRAJECTORY_FOLLOWING
        else:
            malformed += 1

    # a direct input received this tick wins over any segment received alongside it
    if direct_this_tick:
        mode = OperatingMode.EXTERNAL_CONTROL

    history = mode_state.command_history or (ControlInput(*SAFE_STOP),) * (cfg.actuation_delay + 1)
    estimate = mode_state.estimate
    if estimate is None:
        if sensors.ips_fixes:
            fix = max(sensors.ips_fixes, key=lambda item: item.step)
            start = VehicleState(fix.x, fix.y, fix.psi, sensors.odometer_v or 0.0)
            estimate = StateEstimate.initial(
                start, step, cfg.dt, ips_age=step - fix.step, odometer_v=sensors.odometer_v, yaw_rate=sensors.yaw_rate
            )
    else:
        estimate = fuse(
            estimate,
            sensors.odometer_v,
            sensors.yaw_rate,
            sensors.ips_fixes,
            applied_input=history[0],
            p=cfg.params,
            dt=cfg.dt,
            cfg=cfg.fusion,
        )

    mpc_memory = mode_state.mpc_memory
    pid_state = mode_state.pid_state
    diagnostics = TickDiagnostics()
    command = ControlInput(*SAFE_STOP, u=sensors.voltage)
    if mode is OperatingMode.EXTERNAL_CONTROL:
        if direct_input is not None and step - direct_step < cfg.direct_input_timeout_steps:
            command = direct_input
            diagnostics = TickDiagnostics(controller="direct")
    elif trajectory is not None and estimate is not None:
        if cfg.kind == "mpc":
            mpc_memory = mpc_step(
                estimate,
                trajectory,
                cfg.params,
                cfg.mpc,
                prev_input=history[-1],
                pending=history[1:],
                warm_start=mpc_memory,
                voltage=sensors.voltage,
            )
            command = mpc_memory.command
            diagnostics = TickDiagnostics("mpc", mpc_memory.iterations, mpc_memory.cost, mpc_memory.non_finite)
        else:
            result = pid_step(estimate, trajectory, cfg.params, cfg.pid, cfg.dt, pid_state, sensors.voltage)
            pid_state = result.state
            command = result.command
            diagnostics = TickDiagnostics("pid", cross_track=result.cross_track)

    command = command.clamped()
    history = history[1:] + (command,)
    pose = estimate.state if estimate is not None else None
    message = VehicleStateMsg(
        t=step * cfg.dt,
        x=pose.x if pose else 0.0,
        y=pose.y if pose else 0.0,
        psi=pose.psi if pose else 0.0,
        v=pose.v if pose else 0.0,
        m_applied=command.m,
        d_applied=command.d,
        ips_age=estimate.ips_age if estimate is not None else -1,
    )
    new_state = MlcState(
        mode=mode,
        estimate=estimate,
        trajectory=trajectory,
        command_history=history,
        direct_input=direct_input,
        direct_input_step=direct_step,
        mpc_memory=mpc_memory,
        pid_state=pid_state,
        malformed_messages=malformed,
        stale_points=stale,
        diagnostics=diagnostics,
    )
    return command, message, new_state
