"""Deterministic lock-step simulation of the vehicle lab.

One tick of ``run_scenario`` follows a fixed order: scripts publish, the bus
delivers, every vehicle's controller ticks, the actuation queues advance, the
ground truth integrates and the IPS observes. All randomness comes from
per-vehicle and per-link generators derived from ``(seed, name)``, so a vehicle
behaves the same whether it drives alone or inside a fleet.
"""

from __future__ import annotations

import hashlib
import json
import math
import zlib
from collections import deque
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np
import pandas as pd

from vehicle_lab import __version__
from vehicle_lab.controller import (
    ControllerConfig,
    FusionConfig,
    IpsFix,
    MlcState,
    MpcConfig,
    PidGains,
    SensorReading,
    mlc_tick,
)
from vehicle_lab.dynamics import (
    DEFAULT_DT,
    NOMINAL_VOLTAGE,
    ControlInput,
    ModelParams,
    PhysicalParams,
    VehicleState,
    euler_step,
    linearized_model_params,
    parameterized_rates,
    physical_derivative,
    wrap_angle,
)
from vehicle_lab.ident import DelayConfig, MeasurementSample
from vehicle_lab.logging_config import log_stage, logger
from vehicle_lab.messages import DirectInput, TrajectorySegment, encode
from vehicle_lab.trajectory import (
    Trajectory,
    TrajectoryError,
    TrajectoryPoint,
    circle,
    figure_eight,
    interpolate,
    load_trajectory_csv,
    reference_yaw,
)

ARENA_WIDTH = 4.5
ARENA_HEIGHT = 4.0
IPS_POSITION_BOUND = 0.0325
IPS_YAW_BOUND = 0.0393
# state messages travel vehicle to high-level controller, never back to a vehicle
HLC_NODE = "hlc"
EXCITATION_PROFILES = ("figure-eight", "random-chirp", "zero")

TRUTH_COLUMNS = ["step", "t", "vehicle", "x", "y", "psi", "v"]
IPS_COLUMNS = ["measured_step", "deliver_step", "vehicle", "emitted", "x", "y", "psi", "position_error", "yaw_error"]
COMMAND_COLUMNS = ["step", "vehicle", "m_cmd", "d_cmd", "m_applied", "d_applied", "applied_from_step"]
MESSAGE_COLUMNS = ["link", "vehicle", "kind", "send_step", "deliver_step", "payload"]
DIAGNOSTIC_COLUMNS = [
    "step", "vehicle", "mode", "controller", "iterations", "cost", "non_finite",
    "est_x", "est_y", "est_psi", "est_v", "ips_age", "odometer_v", "yaw_rate", "voltage",
    "malformed_messages", "stale_points",
]
EVENT_COLUMNS = ["step", "vehicle", "kind", "detail"]


class ScenarioValidationError(ValueError):
    """Raised with every problem found in a scenario or lab configuration."""

    def __init__(self, problems: list[str]):
        super().__init__("Invalid scenario: " + "; ".join(problems))
        self.problems = problems


def _check_keys(owner: str, payload: dict, allowed: set[str]) -> None:
    unknown = sorted(set(payload) - allowed)
    if unknown:
        raise ValueError(f"Unknown {owner} keys: {', '.join(unknown)}.")


def _rng(seed: int, name: str) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, zlib.crc32(name.encode("utf-8"))])))


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class IpsConfig:
    position_bound: float = IPS_POSITION_BOUND
    yaw_bound: float = IPS_YAW_BOUND
    delay_steps: int = 1
    loss: float = 0.0


@dataclass(frozen=True)
class LinkConfig:
    latency_steps: int = 1
    jitter_steps: int = 1
    loss: float = 0.01


@dataclass(frozen=True)
class OdometerConfig:
    ticks_per_rev: int = 6
    revs_per_meter: float = 55.0

    @property
    def ticks_per_meter(self) -> float:
        return self.ticks_per_rev * self.revs_per_meter


@dataclass(frozen=True)
class BatteryConfig:
    initial_voltage: float = NOMINAL_VOLTAGE
    discharge_rate: float = 0.0
    min_voltage: float = 6.0

    def voltage(self, t: float) -> float:
        return max(self.initial_voltage - self.discharge_rate * t, self.min_voltage)


@dataclass(frozen=True)
class LabConfig:
    arena_width: float = ARENA_WIDTH
    arena_height: float = ARENA_HEIGHT
    dt: float = DEFAULT_DT
    substeps: int = 4
    actuation_delay: int = 5
    ips: IpsConfig = field(default_factory=IpsConfig)
    network: dict[str, LinkConfig] = field(
        default_factory=lambda: {"trajectory": LinkConfig(), "direct": LinkConfig(), "state": LinkConfig()}
    )
    odometer: OdometerConfig = field(default_factory=OdometerConfig)
    battery: BatteryConfig = field(default_factory=BatteryConfig)
    gyro: bool = True
    seed: int = 0
    workers: int = 1

    def problems(self) -> list[str]:
        problems = []
        if not self.dt > 0:
            problems.append("dt must be positive")
        if self.substeps < 1:
            problems.append("substeps must be >= 1")
        if self.actuation_delay < 0 or self.ips.delay_steps < 0:
            problems.append("delays must be >= 0")
        if not (self.arena_width > 0 and self.arena_height > 0):
            problems.append("arena size must be positive")
        if min(self.ips.position_bound, self.ips.yaw_bound) < 0:
            problems.append("IPS noise bounds must be >= 0")
        if not 0 <= self.ips.loss <= 1:
            problems.append("IPS loss must lie in [0, 1]")
        for name, link in self.network.items():
            if not 0 <= link.loss <= 1:
                problems.append(f"network.{name}.loss must lie in [0, 1]")
            if link.latency_steps < 0 or link.jitter_steps < 0:
                problems.append(f"network.{name} latency and jitter must be >= 0")
        if not 0 <= self.seed < 2**64:
            problems.append("seed must be a 64-bit unsigned integer")
        if self.workers < 1:
            problems.append("workers must be >= 1")
        return problems

    def link(self, kind: str) -> LinkConfig:
        return self.network.get(kind, LinkConfig())

    def to_dict(self) -> dict:
        payload = asdict(self)
        payload["network"] = {name: asdict(link) for name, link in self.network.items()}
        return payload

    @classmethod
    def from_dict(cls, payload: dict) -> LabConfig:
        payload = dict(payload)
        nested = {"ips": IpsConfig, "odometer": OdometerConfig, "battery": BatteryConfig}
        try:
            _check_keys("LabConfig", payload, {item.name for item in fields(cls)})
            for key, nested_cls in nested.items():
                if key in payload:
                    _check_keys(key, payload[key], {item.name for item in fields(nested_cls)})
                    payload[key] = nested_cls(**payload[key])
            if "network" in payload:
                network = {}
                for name, link in payload["network"].items():
                    _check_keys(f"network.{name}", link, {item.name for item in fields(LinkConfig)})
                    network[name] = LinkConfig(**link)
                payload["network"] = {**cls().network, **network}
            lab = cls(**payload)
        except (TypeError, ValueError, AttributeError) as exc:
            raise ScenarioValidationError([f"lab: {exc}"]) from exc
        problems = lab.problems()
        if problems:
            raise ScenarioValidationError([f"lab: {problem}" for problem in problems])
        return lab


def load_lab_config(path: str | Path | None) -> LabConfig:
    if path is None:
        return LabConfig()
    return LabConfig.from_dict(_read_json(path))


def _read_json(path: str | Path) -> dict:
    path = Path(path)
    try:
        payload = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError as exc:
        raise ScenarioValidationError([f"file '{path}' was not found"]) from exc
    except json.JSONDecodeError as exc:
        raise ScenarioValidationError([f"file '{path}' is not valid JSON: {exc}"]) from exc
    if not isinstance(payload, dict):
        raise ScenarioValidationError([f"file '{path}' must hold a JSON object"])
    return payload


# ---------------------------------------------------------------------------
# Scenarios
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TimedInput:
    t: float
    m: float
    d: float


@dataclass(frozen=True)
class VehicleScript:
    kind: str = "idle"
    trajectory: Trajectory | None = None
    inputs: tuple[TimedInput, ...] = ()
    segment_period: float = 0.5
    lookahead: float = 2.0
    input_period: float = 0.1


@dataclass(frozen=True)
class ControllerSettings:
    kind: str = "mpc"
    mpc: MpcConfig = field(default_factory=MpcConfig)
    pid: PidGains = field(default_factory=PidGains)
    fusion: FusionConfig = field(default_factory=FusionConfig)


@dataclass(frozen=True)
class VehicleSpec:
    vehicle_id: str
    initial_state: VehicleState
    physical_params: PhysicalParams = field(default_factory=PhysicalParams)
    model_params: ModelParams | None = None
    controller: ControllerSettings = field(default_factory=ControllerSettings)
    script: VehicleScript = field(default_factory=VehicleScript)

    def controller_params(self) -> ModelParams:
        return self.model_params or linearized_model_params(self.physical_params)


@dataclass(frozen=True)
class ExcitationSpec:
    profile: str = "random-chirp"
    duration: float = 120.0
    sigma_pos: float = 0.01
    sigma_psi: float = math.radians(1.0)
    sigma_v: float = 0.02
    voltage_start: float = 8.3
    voltage_end: float = 6.6
    m_range: tuple[float, float] = (0.15, 0.6)
    hold_range: tuple[float, float] = (1.0, 3.0)
    steering_amplitude: float = 0.9

    def __post_init__(self):
        object.__setattr__(self, "m_range", tuple(self.m_range))
        object.__setattr__(self, "hold_range", tuple(self.hold_range))
        if self.profile not in EXCITATION_PROFILES:
            raise ValueError(f"Excitation profile must be one of {EXCITATION_PROFILES}, got {self.profile!r}.")
        if not self.duration > 0 or min(self.sigma_pos, self.sigma_psi, self.sigma_v) < 0:
            raise ValueError("Excitation duration must be positive and noise sigmas >= 0.")
        if not (self.voltage_start > 0 and self.voltage_end > 0):
            raise ValueError("Excitation voltages must be positive.")

    def noise_free(self) -> ExcitationSpec:
        return replace(self, sigma_pos=0.0, sigma_psi=0.0, sigma_v=0.0)


@dataclass(frozen=True)
class ScenarioSpec:
    duration: float
    vehicles: tuple[VehicleSpec, ...]
    excitation: ExcitationSpec | None = None
    name: str = "scenario"
    source: dict = field(default_factory=dict, compare=False)

    def problems(self, lab: LabConfig) -> list[str]:
        problems = []
        if not self.duration > 0:
            problems.append("duration must be positive")
        if not self.vehicles:
            problems.append("at least one vehicle is required")
        ids = [vehicle.vehicle_id for vehicle in self.vehicles]
        if len(set(ids)) != len(ids):
            problems.append("vehicle ids must be unique")
        for vehicle in self.vehicles:
            state = vehicle.initial_state
            if not (0 <= state.x <= lab.arena_width and 0 <= state.y <= lab.arena_height):
                problems.append(f"vehicle {vehicle.vehicle_id} starts outside the arena")
            if vehicle.script.kind == "trajectory" and vehicle.script.trajectory is None:
                problems.append(f"vehicle {vehicle.vehicle_id} has a trajectory script without a trajectory")
        return problems

    def steps(self, dt: float) -> int:
        return int(round(self.duration / dt))


def trajectory_from_dict(payload: dict, base_dir: Path | None = None) -> Trajectory:
    options = dict(payload)
    kind = options.pop("type", None)
    if kind == "figure-eight":
        if "center" in options:
            options["center"] = tuple(options["center"])
        return figure_eight(**options)
    if kind == "circle":
        if "center" in options:
            options["center"] = tuple(options["center"])
        return circle(**options)
    if kind == "csv":
        path = Path(options.pop("path"))
        return load_trajectory_csv(path if path.is_absolute() or base_dir is None else base_dir / path)
    if kind == "points":
        return Trajectory.from_points(TrajectoryPoint(*map(float, row)) for row in options.pop("points"))
    raise ValueError(f"Unknown trajectory type {kind!r}.")


def _script_from_dict(payload: dict, base_dir: Path | None) -> VehicleScript:
    payload = dict(payload)
    kind = payload.pop("type", "idle")
    if kind == "trajectory":
        trajectory = trajectory_from_dict(payload.pop("trajectory"), base_dir)
        _check_keys("trajectory script", payload, {"segment_period", "lookahead"})
        return VehicleScript(kind="trajectory", trajectory=trajectory, **payload)
    if kind == "direct":
        inputs = tuple(sorted((TimedInput(**item) for item in payload.pop("inputs")), key=lambda item: item.t))
        _check_keys("direct script", payload, {"input_period"})
        return VehicleScript(kind="direct", inputs=inputs, **payload)
    if kind == "idle":
        _check_keys("idle script", payload, set())
        return VehicleScript()
    raise ValueError(f"Unknown script type {kind!r}.")


def _controller_from_dict(payload: dict) -> ControllerSettings:
    _check_keys("controller", payload, {"kind", "mpc", "pid", "fusion"})
    return ControllerSettings(
        kind=payload.get("kind", "mpc"),
        mpc=MpcConfig.from_dict(payload.get("mpc", {})),
        pid=PidGains.from_dict(payload.get("pid", {})),
        fusion=FusionConfig(**payload.get("fusion", {})),
    )


def _vehicle_from_dict(payload: dict, base_dir: Path | None) -> VehicleSpec:
    _check_keys("vehicle", payload, {"id", "initial_state", "physical_params", "model_params", "controller", "script"})
    state = payload["initial_state"]
    if isinstance(state, dict):
        state = VehicleState(**{key: float(state.get(key, 0.0)) for key in ("x", "y", "psi", "v")})
    else:
        state = VehicleState.from_sequence(state)
    model_params = payload.get("model_params")
    if isinstance(model_params, dict):
        model_params = ModelParams(**{key: float(value) for key, value in model_params.items()})
    elif model_params == "identified":
        model_params = ModelParams.identified()
    elif model_params is not None:
        model_params = ModelParams.from_sequence(model_params)
    return VehicleSpec(
        vehicle_id=str(payload["id"]),
        initial_state=state,
        physical_params=PhysicalParams.from_dict(payload.get("physical_params", {})),
        model_params=model_params,
        controller=_controller_from_dict(payload.get("controller", {})),
        script=_script_from_dict(payload.get("script", {"type": "idle"}), base_dir),
    )


def scenario_from_dict(payload: dict, base_dir: Path | None = None) -> ScenarioSpec:
    """Build a ScenarioSpec, collecting every problem before raising."""
    problems = []
    try:
        _check_keys("scenario", payload, {"name", "duration", "vehicles", "excitation"})
    except ValueError as exc:
        problems.append(str(exc))

    vehicles = []
    for index, raw in enumerate(payload.get("vehicles", [])):
        try:
            vehicles.append(_vehicle_from_dict(raw, base_dir))
        except (KeyError, TypeError, ValueError, TrajectoryError) as exc:
            problems.append(f"vehicles[{index}]: {exc!s}")

    excitation = None
    if payload.get("excitation") is not None:
        try:
            excitation = ExcitationSpec(**payload["excitation"])
        except (TypeError, ValueError) as exc:
            problems.append(f"excitation: {exc}")

    duration = payload.get("duration")
    if not isinstance(duration, (int, float)):
        problems.append("duration must be a number")
        duration = 0.0
    if problems:
        raise ScenarioValidationError(problems)
    return ScenarioSpec(
        duration=float(duration),
        vehicles=tuple(vehicles),
        excitation=excitation,
        name=str(payload.get("name", "scenario")),
        source=payload,
    )


def load_scenario(path: str | Path) -> ScenarioSpec:
    path = Path(path)
    return scenario_from_dict(_read_json(path), base_dir=path.parent)


def validate_scenario(spec: ScenarioSpec, lab: LabConfig) -> None:
    problems = lab.problems() + spec.problems(lab)
    if problems:
        raise ScenarioValidationError(problems)


# ---------------------------------------------------------------------------
# World, sensors and bus
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class WorldEvent:
    step: int
    vehicle: str
    kind: str
    detail: str


@dataclass(frozen=True)
class VehicleWorld:
    vehicle_id: str
    phys: PhysicalParams
    truth: VehicleState
    pending: tuple[tuple[int, ControlInput], ...]
    applied: ControlInput = ControlInput(0.0, 0.0)
    applied_from: int = -1
    distance: float = 0.0
    ticks: int = 0
    odometer_v: float = 0.0
    yaw_rate: float = 0.0
    outside: bool = False


@dataclass(frozen=True)
class World:
    step: int
    vehicles: tuple[VehicleWorld, ...]
    events: tuple[WorldEvent, ...] = ()


def initial_world(spec: ScenarioSpec, lab: LabConfig) -> World:
    zero = ControlInput(0.0, 0.0, lab.battery.voltage(0.0))
    vehicles = tuple(
        VehicleWorld(
            vehicle_id=vehicle.vehicle_id,
            phys=vehicle.physical_params,
            truth=vehicle.initial_state,
            pending=tuple((-1, zero) for _ in range(lab.actuation_delay)),
            applied=zero,
        )
        for vehicle in spec.vehicles
    )
    return World(step=0, vehicles=vehicles)


def _inside(state: VehicleState, lab: LabConfig) -> bool:
    return 0 <= state.x <= lab.arena_width and 0 <= state.y <= lab.arena_height


def step_world(
    world: World,
    dt: float = DEFAULT_DT,
    commands: dict[str, ControlInput] | None = None,
    lab: LabConfig | None = None,
) -> World:
    """Advance every vehicle's ground truth by one tick.

    The command pushed this tick leaves the actuation queue ``actuation_delay`` ticks
    later; the one leaving now drives ``substeps`` Euler substeps of the physical model.
    """
    lab = lab or LabConfig()
    commands = commands or {}
    substep_dt = dt / lab.substeps
    ticks_per_meter = lab.odometer.ticks_per_meter
    events = []
    advanced = []

    for vehicle in world.vehicles:
        command = commands.get(vehicle.vehicle_id, ControlInput(0.0, 0.0, vehicle.applied.u)).clamped()
        queue = vehicle.pending + ((world.step, command),)
        (applied_from, applied), pending = queue[0], queue[1:]

        state, distance = vehicle.truth, vehicle.distance
        for _ in range(lab.substeps):
            distance += substep_dt * state.v
            state = euler_step(state, applied, vehicle.phys, substep_dt)
        ticks = math.floor(distance * ticks_per_meter)
        odometer_v = (ticks - vehicle.ticks) / (ticks_per_meter * dt)
        yaw_rate = physical_derivative(state, applied, vehicle.phys).dpsi if lab.gyro else None

        inside = _inside(state, lab)
        if not inside and not vehicle.outside:
            events.append(WorldEvent(world.step + 1, vehicle.vehicle_id, "arena_exit", f"x={state.x:.3f}, y={state.y:.3f}"))
            logger.warning("Vehicle %s left the arena at step %s", vehicle.vehicle_id, world.step + 1)
        advanced.append(
            replace(
                vehicle,
                truth=state,
                pending=pending,
                applied=applied,
                applied_from=applied_from,
                distance=distance,
                ticks=ticks,
                odometer_v=odometer_v,
                yaw_rate=yaw_rate,
                outside=not inside,
            )
        )
    return World(step=world.step + 1, vehicles=tuple(advanced), events=tuple(events))


def ips_observe(
    truth: VehicleState,
    cfg: IpsConfig,
    rng: np.random.Generator,
    step: int = 0,
) -> IpsFix | None:
    """Pose plus noise uniform in a disk (position) and an interval (yaw), or None if lost."""
    if rng.random() < cfg.loss:
        return None
    radius = cfg.position_bound * math.sqrt(rng.random())
    angle = 2.0 * math.pi * rng.random()
    yaw_error = cfg.yaw_bound * (2.0 * rng.random() - 1.0)
    return IpsFix(
        step=step,
        x=truth.x + radius * math.cos(angle),
        y=truth.y + radius * math.sin(angle),
        psi=truth.psi + yaw_error,
    )


@dataclass
class _Envelope:
    deliver_step: int
    payload: str
    record: dict


class MessageBus:
    """Per-link latency, jitter and loss with FIFO order kept inside each link."""

    def __init__(self, lab: LabConfig):
        self.lab = lab
        self._queues: dict[str, deque[_Envelope]] = {}
        self._last_delivery: dict[str, int] = {}
        self._rngs: dict[str, np.random.Generator] = {}
        self._destinations: dict[str, str] = {}
        self.records: list[dict] = []

    def _link_rng(self, link: str) -> np.random.Generator:
        if link not in self._rngs:
            self._rngs[link] = _rng(self.lab.seed, f"link:{link}")
        return self._rngs[link]

    def send(self, vehicle: str, kind: str, payload: str, step: int) -> None:
        link = f"{vehicle}/{kind}"
        config = self.lab.link(kind)
        rng = self._link_rng(link)
        lost = rng.random() < config.loss
        jitter = int(rng.integers(0, config.jitter_steps + 1))
        record = {"link": link, "vehicle": vehicle, "kind": kind, "send_step": step, "deliver_step": -1, "payload": payload}
        self.records.append(record)
        if lost:
            return
        deliver_step = max(step + config.latency_steps + jitter, self._last_delivery.get(link, step))
        self._last_delivery[link] = deliver_step
        record["deliver_step"] = deliver_step
        self._queues.setdefault(link, deque()).append(_Envelope(deliver_step, payload, record))
        self._destinations[link] = HLC_NODE if kind == "state" else vehicle

    def deliver(self, step: int) -> dict[str, list[str]]:
        inboxes: dict[str, list[str]] = {}
        for link in sorted(self._queues):
            queue = self._queues[link]
            while queue and queue[0].deliver_step <= step:
                inboxes.setdefault(self._destinations[link], []).append(queue.popleft().payload)
        return inboxes


def bus_deliver(bus: MessageBus, step: int) -> dict[str, list[str]]:
    """Pop every message due at or before `step`, grouped by destination node."""
    return bus.deliver(step)


# ---------------------------------------------------------------------------
# Scenario run
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SimTrace:
    truth: pd.DataFrame
    ips: pd.DataFrame
    commands: pd.DataFrame
    messages: pd.DataFrame
    diagnostics: pd.DataFrame
    events: pd.DataFrame
    seed: int
    config_hash: str
    scenario_name: str = "scenario"

    def vehicle_truth(self, vehicle: str) -> pd.DataFrame:
        return self.truth[self.truth["vehicle"] == vehicle].reset_index(drop=True)

    def export(self, out_dir: str | Path, manifest_extra: dict | None = None) -> dict[str, str]:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        outputs = {}
        for name in ("truth", "ips", "commands", "messages", "diagnostics", "events"):
            path = out_dir / f"{name}.csv"
            getattr(self, name).to_csv(path, index=False)
            outputs[name] = str(path)
        manifest = {
            "scenario": self.scenario_name,
            "seed": self.seed,
            "config_hash": self.config_hash,
            "version": __version__,
            "outputs": outputs,
            **(manifest_extra or {}),
        }
        manifest_path = out_dir / "trace_manifest.json"
        manifest_path.write_text(json.dumps(manifest, indent=2, sort_keys=True), encoding="utf-8")
        outputs["trace_manifest"] = str(manifest_path)
        return outputs


def config_hash(spec: ScenarioSpec, lab: LabConfig) -> str:
    payload = json.dumps({"scenario": spec.source or repr(spec), "lab": lab.to_dict()}, sort_keys=True, default=str)
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()


def _controller_config(vehicle: VehicleSpec, lab: LabConfig) -> ControllerConfig:
    settings = vehicle.controller
    return ControllerConfig(
        params=vehicle.controller_params(),
        kind=settings.kind,
        mpc=replace(settings.mpc, dt=lab.dt, delay_steps=lab.actuation_delay),
        pid=settings.pid,
        fusion=settings.fusion,
        actuation_delay=lab.actuation_delay,
        dt=lab.dt,
    )


def _publish_scripts(bus: MessageBus, spec: ScenarioSpec, step: int, dt: float) -> None:
    t = step * dt
    for vehicle in spec.vehicles:
        script = vehicle.script
        if script.kind == "trajectory":
            period = max(int(round(script.segment_period / dt)), 1)
            if step % period:
                continue
            points = script.trajectory.window(t, t + script.lookahead)
            if points:
                bus.send(vehicle.vehicle_id, "trajectory", encode(TrajectorySegment(points=tuple(points))), step)
        elif script.kind == "direct":
            period = max(int(round(script.input_period / dt)), 1)
            if step % period:
                continue
            current = [item for item in script.inputs if item.t <= t + 1e-9]
            if current:
                bus.send(vehicle.vehicle_id, "direct", encode(DirectInput(m=current[-1].m, d=current[-1].d)), step)


def run_scenario(spec: ScenarioSpec, lab: LabConfig | None = None) -> SimTrace:
    lab = lab or LabConfig()
    validate_scenario(spec, lab)
    dt = lab.dt
    n_steps = spec.steps(dt)
    controller_configs = [_controller_config(vehicle, lab) for vehicle in spec.vehicles]
    controller_states = [MlcState.initial(cfg) for cfg in controller_configs]
    ips_rngs = [_rng(lab.seed, f"ips:{vehicle.vehicle_id}") for vehicle in spec.vehicles]
    ips_queues: list[deque[tuple[int, IpsFix]]] = [deque() for _ in spec.vehicles]
    bus = MessageBus(lab)
    world = initial_world(spec, lab)

    truth_rows, ips_rows, command_rows, diagnostic_rows, event_rows = [], [], [], [], []

    def observe(world_now: World) -> None:
        for index, vehicle in enumerate(world_now.vehicles):
            fix = ips_observe(vehicle.truth, lab.ips, ips_rngs[index], step=world_now.step)
            if fix is None:
                ips_rows.append((world_now.step, -1, vehicle.vehicle_id, False, math.nan, math.nan, math.nan, math.nan, math.nan))
                continue
            deliver_step = world_now.step + lab.ips.delay_steps
            ips_queues[index].append((deliver_step, fix))
            ips_rows.append(
                (
                    world_now.step, deliver_step, vehicle.vehicle_id, True, fix.x, fix.y, fix.psi,
                    math.hypot(fix.x - vehicle.truth.x, fix.y - vehicle.truth.y),
                    abs(float(wrap_angle(fix.psi - vehicle.truth.psi))),
                )
            )

    def record_truth(world_now: World) -> None:
        for vehicle in world_now.vehicles:
            state = vehicle.truth
            truth_rows.append((world_now.step, world_now.step * dt, vehicle.vehicle_id, state.x, state.y, state.psi, state.v))

    log_stage("Running scenario", name=spec.name, vehicles=len(spec.vehicles), steps=n_steps, seed=lab.seed)
    record_truth(world)
    observe(world)
    executor = ThreadPoolExecutor(max_workers=lab.workers) if lab.workers > 1 else None
    try:
        for step in range(n_steps):
            _publish_scripts(bus, spec, step, dt)
            inboxes = bus_deliver(bus, step)
            voltage = lab.battery.voltage(step * dt)

            readings = []
            for index, vehicle in enumerate(world.vehicles):
                fixes = []
                while ips_queues[index] and ips_queues[index][0][0] <= step:
                    fixes.append(ips_queues[index].popleft()[1])
                readings.append(
                    SensorReading(
                        step=step,
                        odometer_v=vehicle.odometer_v,
                        yaw_rate=vehicle.yaw_rate if lab.gyro else None,
                        voltage=voltage,
                        ips_fixes=tuple(fixes),
                    )
                )

            tick_args = [
                (tuple(inboxes.get(vehicle.vehicle_id, ())), readings[index], controller_states[index], controller_configs[index])
                for index, vehicle in enumerate(spec.vehicles)
            ]
            if executor is not None:
                results = list(executor.map(lambda args: mlc_tick(*args), tick_args))
            else:
                results = [mlc_tick(*args) for args in tick_args]

            commands = {}
            for index, (command, state_message, new_state) in enumerate(results):
                vehicle_id = spec.vehicles[index].vehicle_id
                controller_states[index] = new_state
                commands[vehicle_id] = command
                bus.send(vehicle_id, "state", encode(state_message), step)
                estimate = new_state.estimate
                diagnostics = new_state.diagnostics
                diagnostic_rows.append(
                    (
                        step, vehicle_id, new_state.mode.value, diagnostics.controller, diagnostics.iterations,
                        diagnostics.cost, diagnostics.non_finite,
                        estimate.state.x if estimate else math.nan,
                        estimate.state.y if estimate else math.nan,
                        estimate.state.psi if estimate else math.nan,
                        estimate.state.v if estimate else math.nan,
                        estimate.ips_age if estimate else -1,
                        readings[index].odometer_v,
                        readings[index].yaw_rate if readings[index].yaw_rate is not None else math.nan,
                        voltage, new_state.malformed_messages, new_state.stale_points,
                    )
                )

            world = step_world(world, dt, commands, lab)
            for vehicle in world.vehicles:
                command = commands[vehicle.vehicle_id]
                command_rows.append(
                    (step, vehicle.vehicle_id, command.m, command.d, vehicle.applied.m, vehicle.applied.d, vehicle.applied_from)
                )
            event_rows.extend((event.step, event.vehicle, event.kind, event.detail) for event in world.events)
            record_truth(world)
            observe(world)
    finally:
        if executor is not None:
            executor.shutdown()

    message_rows = [tuple(record[column] for column in MESSAGE_COLUMNS) for record in bus.records]
    trace = SimTrace(
        truth=pd.DataFrame(truth_rows, columns=TRUTH_COLUMNS),
        ips=pd.DataFrame(ips_rows, columns=IPS_COLUMNS),
        commands=pd.DataFrame(command_rows, columns=COMMAND_COLUMNS),
        messages=pd.DataFrame(message_rows, columns=MESSAGE_COLUMNS),
        diagnostics=pd.DataFrame(diagnostic_rows, columns=DIAGNOSTIC_COLUMNS),
        events=pd.DataFrame(event_rows, columns=EVENT_COLUMNS),
        seed=lab.seed,
        config_hash=config_hash(spec, lab),
        scenario_name=spec.name,
    )
    log_stage("Finished scenario", name=spec.name, events=len(event_rows), messages=len(message_rows))
    return trace


def tracking_summary(trace: SimTrace, spec: ScenarioSpec) -> pd.DataFrame:
    """Mean/max position error and mean periodic yaw error against each reference."""
    rows = []
    for vehicle in spec.vehicles:
        trajectory = vehicle.script.trajectory
        if vehicle.script.kind != "trajectory" or trajectory is None:
            continue
        truth = trace.vehicle_truth(vehicle.vehicle_id)
        active = truth[(truth["t"] >= trajectory.start_time) & (truth["t"] <= trajectory.end_time)]
        position_errors, yaw_errors = [], []
        for row in active.itertuples(index=False):
            sample = interpolate(trajectory, row.t)
            position_errors.append(math.hypot(row.x - sample.x, row.y - sample.y))
            yaw = reference_yaw(sample)
            if yaw is not None:
                yaw_errors.append(abs(float(wrap_angle(row.psi - yaw))))
        rows.append(
            {
                "vehicle": vehicle.vehicle_id,
                "controller": vehicle.controller.kind,
                "samples": len(position_errors),
                "mean_position_error": float(np.mean(position_errors)) if position_errors else math.nan,
                "max_position_error": float(np.max(position_errors)) if position_errors else math.nan,
                "mean_yaw_error": float(np.mean(yaw_errors)) if yaw_errors else math.nan,
            }
        )
    return pd.DataFrame(rows, columns=["vehicle", "controller", "samples", "mean_position_error", "max_position_error", "mean_yaw_error"])


# ---------------------------------------------------------------------------
# Identification logs
# ---------------------------------------------------------------------------


def _staircase(rng: np.random.Generator, n_steps: int, dt: float, excitation: ExcitationSpec) -> np.ndarray:
    values = np.empty(n_steps)
    index = 0
    while index < n_steps:
        hold = int(round(rng.uniform(*excitation.hold_range) / dt))
        values[index : index + max(hold, 1)] = rng.uniform(*excitation.m_range)
        index += max(hold, 1)
    return values


def _chirp_steering(rng: np.random.Generator, n_steps: int, dt: float, amplitude: float) -> np.ndarray:
    t = np.arange(n_steps) * dt
    frequencies = rng.uniform(0.05, 1.0, size=6)
    phases = rng.uniform(0.0, 2.0 * np.pi, size=6)
    weights = rng.uniform(0.5, 1.0, size=6)
    signal = np.sum(weights[:, None] * np.sin(2.0 * np.pi * frequencies[:, None] * t[None, :] + phases[:, None]), axis=0)
    peak = np.max(np.abs(signal))
    return amplitude * signal / peak if peak > 0 else signal


def generate_ident_log(
    spec: ScenarioSpec,
    lab: LabConfig,
    true_params: ModelParams,
    delays: DelayConfig,
) -> list[MeasurementSample]:
    """Drive the grey-box model as ground truth and log it the way the lab sensors would.

    IPS rows lag the truth by ``ips_delay``, odometer rows by ``local_delay``; the
    command logged at k acts at k + ``actuation_delay``. Battery voltage falls
    linearly over the run so the voltage-dependent motor terms stay separable.
    """
    excitation = spec.excitation or ExcitationSpec()
    dt = lab.dt
    n_steps = int(round(excitation.duration / dt))
    rng = _rng(lab.seed, "ident-log")
    p = true_params.as_array()
    start = spec.vehicles[0].initial_state if spec.vehicles else VehicleState(0.0, 0.0, 0.0, 0.0)

    voltage = np.linspace(excitation.voltage_start, excitation.voltage_end, n_steps)
    if excitation.profile == "zero":
        m_cmd = np.zeros(n_steps)
        d_cmd = np.zeros(n_steps)
    else:
        m_cmd = _staircase(rng, n_steps, dt, excitation)
        d_cmd = _chirp_steering(rng, n_steps, dt, excitation.steering_amplitude)

    truth = np.empty((n_steps, 4))
    x, y, psi, v = start.x, start.y, start.psi, start.v
    lobe_heading, lobe_sign, lobe_amplitude = psi, 1.0, excitation.steering_amplitude
    for k in range(n_steps):
        truth[k] = (x, y, psi, v)
        if excitation.profile == "figure-eight":
            # one full turn per lobe, then reverse the steering direction
            if abs(psi - lobe_heading) >= 2.0 * math.pi:
                lobe_heading, lobe_sign = psi, -lobe_sign
                lobe_amplitude = rng.uniform(0.4, 1.0) * excitation.steering_amplitude
            d_cmd[k] = lobe_sign * lobe_amplitude
        source = k - delays.actuation_delay
        m, d, u = (m_cmd[source], d_cmd[source], voltage[source]) if source >= 0 else (0.0, 0.0, voltage[0])
        dx, dy, dpsi, dv = parameterized_rates(psi, v, m, d, u, p)
        x, y, psi, v = x + dt * dx, y + dt * dy, psi + dt * dpsi, v + dt * dv

    pose_source = np.maximum(np.arange(n_steps) - delays.ips_delay, 0)
    speed_source = np.maximum(np.arange(n_steps) - delays.local_delay, 0)
    x_ips = truth[pose_source, 0] + rng.normal(0.0, excitation.sigma_pos, n_steps)
    y_ips = truth[pose_source, 1] + rng.normal(0.0, excitation.sigma_pos, n_steps)
    psi_ips = wrap_angle(truth[pose_source, 2] + rng.normal(0.0, excitation.sigma_psi, n_steps))
    v_odo = truth[speed_source, 3] + rng.normal(0.0, excitation.sigma_v, n_steps)

    log_stage(
        "Generated identification log",
        profile=excitation.profile,
        samples=n_steps,
        delays=delays.as_tuple(),
    )
    return [
        MeasurementSample(
            t=k * dt,
            x_hat=float(x_ips[k]),
            y_hat=float(y_ips[k]),
            psi_hat=float(psi_ips[k]),
            v_hat=float(v_odo[k]),
            m=float(m_cmd[k]),
            d=float(d_cmd[k]),
            u=float(voltage[k]),
        )
        for k in range(n_steps)
    ]
