"""Kinematic bicycle models of the vehicle and their explicit-Euler discretization.

Two model variants share one derivative interface:

* ``PhysicalParams`` drives the exact kinematic bicycle with a first-order speed lag.
  It is the ground truth of the lab simulation.
* ``ModelParams`` drives the ten-parameter grey-box model that identification fits
  and the on-board controllers predict with.
"""

from __future__ import annotations

import math
from dataclasses import astuple, dataclass, fields
from typing import Sequence

import numpy as np

DEFAULT_DT = 0.02
NOMINAL_VOLTAGE = 7.4
WHEELBASE = 0.150
MIN_TURNING_RADIUS = 0.3
DEFAULT_DELTA_MAX = math.atan(WHEELBASE / MIN_TURNING_RADIUS)

IDENTIFIED_PARAMS = (1.00, -0.14, 0.20, 3.56, -2.19, -9.73, 2.52, 1.32, 0.03, -0.01)
# steady-state speed of the identified vehicle at m = 1 and nominal voltage
DEFAULT_V_IN_MAX = -(IDENTIFIED_PARAMS[5] + IDENTIFIED_PARAMS[6] * NOMINAL_VOLTAGE) / IDENTIFIED_PARAMS[4]


class SteeringDomainError(ValueError):
    """Raised when a steering angle reaches +-pi/2, where tan() is undefined."""


class IntegrationError(RuntimeError):
    """Raised when an integration step produces a non-finite state."""

    def __init__(self, field: str, value: float):
        super().__init__(f"Integration produced non-finite {field}={value}.")
        self.field = field
        self.value = value


def clamp(value: float, lower: float = -1.0, upper: float = 1.0) -> float:
    return min(max(value, lower), upper)


def wrap_angle(angle):
    """Map an angle (scalar or array) to [-pi, pi)."""
    return (angle + np.pi) % (2.0 * np.pi) - np.pi


def _require_finite(owner: str, values: dict[str, float]) -> None:
    for name, value in values.items():
        if not math.isfinite(value):
            raise ValueError(f"{owner}.{name} must be finite, got {value}.")


@dataclass(frozen=True)
class VehicleState:
    x: float
    y: float
    psi: float
    v: float

    def __post_init__(self):
        _require_finite("VehicleState", {"x": self.x, "y": self.y, "psi": self.psi, "v": self.v})

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.psi, self.v], dtype=float)

    @classmethod
    def from_sequence(cls, values: Sequence[float]) -> VehicleState:
        x, y, psi, v = (float(value) for value in values)
        return cls(x=x, y=y, psi=psi, v=v)


@dataclass(frozen=True)
class ControlInput:
    m: float
    d: float
    u: float = NOMINAL_VOLTAGE

    def __post_init__(self):
        _require_finite("ControlInput", {"m": self.m, "d": self.d, "u": self.u})
        if self.u <= 0:
            raise ValueError(f"Battery voltage must be positive, got {self.u}.")

    def clamped(self) -> ControlInput:
        m = clamp(self.m)
        d = clamp(self.d)
        if m == self.m and d == self.d:
            return self
        return ControlInput(m=m, d=d, u=self.u)


@dataclass(frozen=True)
class PhysicalParams:
    L: float = WHEELBASE
    l_r: float = WHEELBASE / 2.0
    K_v: float = 1.0
    T_v: float = -1.0 / IDENTIFIED_PARAMS[4]
    delta_max: float = DEFAULT_DELTA_MAX
    v_in_max: float = DEFAULT_V_IN_MAX
    u_nominal: float = NOMINAL_VOLTAGE

    def __post_init__(self):
        problems = []
        if not self.L > 0:
            problems.append("L must be positive")
        if not 0 <= self.l_r <= self.L:
            problems.append("l_r must lie in [0, L]")
        if not self.T_v > 0:
            problems.append("T_v must be positive")
        if not 0 < self.delta_max < math.pi / 2:
            problems.append("delta_max must lie in (0, pi/2)")
        if not self.u_nominal > 0:
            problems.append("u_nominal must be positive")
        if problems:
            raise ValueError("Invalid PhysicalParams: " + "; ".join(problems) + ".")

    @property
    def lr_ratio(self) -> float:
        return self.l_r / self.L

    def to_dict(self) -> dict[str, float]:
        return {field.name: getattr(self, field.name) for field in fields(self)}

    @classmethod
    def from_dict(cls, payload: dict) -> PhysicalParams:
        known = {field.name for field in fields(cls)}
        unknown = sorted(set(payload) - known)
        if unknown:
            raise ValueError(f"Unknown PhysicalParams keys: {', '.join(unknown)}.")
        return cls(**{key: float(value) for key, value in payload.items()})


@dataclass(frozen=True)
class ModelParams:
    p1: float
    p2: float
    p3: float
    p4: float
    p5: float
    p6: float
    p7: float
    p8: float
    p9: float
    p10: float

    def __post_init__(self):
        _require_finite("ModelParams", {field.name: getattr(self, field.name) for field in fields(self)})

    @classmethod
    def identified(cls) -> ModelParams:
        return cls.from_sequence(IDENTIFIED_PARAMS)

    @classmethod
    def from_sequence(cls, values: Sequence[float]) -> ModelParams:
        values = [float(value) for value in values]
        if len(values) != 10:
            raise ValueError(f"ModelParams needs exactly 10 values, got {len(values)}.")
        return cls(*values)

    def as_array(self) -> np.ndarray:
        return np.array(astuple(self), dtype=float)

    def stability_problems(self) -> list[str]:
        problems = []
        if not self.p5 < 0:
            problems.append(f"p5={self.p5} must be negative for stable speed dynamics")
        if not self.p8 > 0:
            problems.append(f"p8={self.p8} must be positive for a well-defined power law")
        return problems

    def require_stable(self) -> ModelParams:
        problems = self.stability_problems()
        if problems:
            raise ValueError("Unusable ModelParams: " + "; ".join(problems) + ".")
        return self

    def scaled(self, name: str, factor: float) -> ModelParams:
        values = {field.name: getattr(self, field.name) for field in fields(self)}
        values[name] = values[name] * factor
        return ModelParams(**values)


@dataclass(frozen=True)
class StateDerivative:
    dx: float
    dy: float
    dpsi: float
    dv: float


def steering_command_to_angle(d: float, phys: PhysicalParams) -> float:
    return phys.delta_max * clamp(d)


def _check_steering_domain(delta: float) -> None:
    if abs(delta) >= math.pi / 2:
        raise SteeringDomainError(f"|delta|={abs(delta)} must be below pi/2.")


def side_slip_exact(delta: float, phys: PhysicalParams) -> float:
    _check_steering_domain(delta)
    return math.atan(phys.lr_ratio * math.tan(delta))


def side_slip_taylor(delta: float, phys: PhysicalParams) -> float:
    return phys.lr_ratio * delta


def center_speed_exact(v: float, delta: float, phys: PhysicalParams) -> float:
    _check_steering_domain(delta)
    return v * math.sqrt(1.0 + (phys.lr_ratio * math.tan(delta)) ** 2)


def center_speed_taylor(v: float, delta: float, phys: PhysicalParams) -> float:
    return v * (1.0 + phys.lr_ratio**2 * delta**2)


def input_speed(m: float, u: float, phys: PhysicalParams) -> float:
    return phys.v_in_max * m * (u / phys.u_nominal)


def physical_derivative(state: VehicleState, inp: ControlInput, phys: PhysicalParams) -> StateDerivative:
    inp = inp.clamped()
    delta = steering_command_to_angle(inp.d, phys)
    beta = side_slip_exact(delta, phys)
    v_c = center_speed_exact(state.v, delta, phys)
    return StateDerivative(
        dx=v_c * math.cos(state.psi + beta),
        dy=v_c * math.sin(state.psi + beta),
        dpsi=state.v * math.tan(delta) / phys.L,
        dv=-state.v / phys.T_v + (phys.K_v / phys.T_v) * input_speed(inp.m, inp.u, phys),
    )


def motor_term(m, p8):
    """sign(m)*|m|**p8, defined as 0 at m = 0 (no command, no drive force)."""
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(m == 0, 0.0, np.sign(m) * np.abs(m) ** p8)


def parameterized_rates(psi, v, m, d, u, p):
    """Right-hand side of the grey-box model.

    Works elementwise on floats or broadcastable numpy arrays. ``p`` is indexable
    p[0]..p[9]; each entry may itself be an array (batched parameter sets).
    """
    steer = d + p[8]
    speed = p[0] * v * (1.0 + p[1] * steer * steer)
    heading = psi + p[2] * steer + p[9]
    dx = speed * np.cos(heading)
    dy = speed * np.sin(heading)
    dpsi = p[3] * v * steer
    dv = p[4] * v + (p[5] + p[6] * u) * motor_term(m, p[7])
    return dx, dy, dpsi, dv


def parameterized_derivative(state: VehicleState, inp: ControlInput, p: ModelParams) -> StateDerivative:
    inp = inp.clamped()
    dx, dy, dpsi, dv = parameterized_rates(state.psi, state.v, inp.m, inp.d, inp.u, astuple(p))
    return StateDerivative(dx=float(dx), dy=float(dy), dpsi=float(dpsi), dv=float(dv))


def derivative(state: VehicleState, inp: ControlInput, params: ModelParams | PhysicalParams) -> StateDerivative:
    if isinstance(params, ModelParams):
        return parameterized_derivative(state, inp, params)
    if isinstance(params, PhysicalParams):
        return physical_derivative(state, inp, params)
    raise TypeError(f"Unsupported model parameters: {type(params).__name__}")


def euler_step(
    state: VehicleState,
    inp: ControlInput,
    params: ModelParams | PhysicalParams,
    dt: float = DEFAULT_DT,
) -> VehicleState:
    if not dt > 0:
        raise ValueError(f"dt must be positive, got {dt}.")
    rate = derivative(state, inp, params)
    next_values = {
        "x": state.x + dt * rate.dx,
        "y": state.y + dt * rate.dy,
        "psi": state.psi + dt * rate.dpsi,
        "v": state.v + dt * rate.dv,
    }
    for name, value in next_values.items():
        if not math.isfinite(value):
            raise IntegrationError(name, value)
    return VehicleState(**next_values)


def simulate(
    initial: VehicleState,
    inputs: Sequence[ControlInput],
    params: ModelParams | PhysicalParams,
    dt: float = DEFAULT_DT,
) -> list[VehicleState]:
    if not dt > 0:
        raise ValueError(f"dt must be positive, got {dt}.")
    if len(inputs) == 0:
        raise ValueError("simulate needs at least one input.")
    states = [initial]
    for inp in inputs:
        states.append(euler_step(states[-1], inp, params, dt))
    return states


def linearized_model_params(phys: PhysicalParams) -> ModelParams:
    """Grey-box vector implied by the Taylor simplifications of the physical model."""
    ratio = phys.lr_ratio
    return ModelParams(
        p1=1.0,
        p2=ratio**2 * phys.delta_max**2,
        p3=ratio * phys.delta_max,
        p4=phys.delta_max / phys.L,
        p5=-1.0 / phys.T_v,
        p6=0.0,
        p7=phys.K_v * phys.v_in_max / (phys.T_v * phys.u_nominal),
        p8=1.0,
        p9=0.0,
        p10=0.0,
    )


def steady_state_speed(m: float, u: float, p: ModelParams) -> float:
    return float(-(p.p6 + p.p7 * u) * motor_term(clamp(m), p.p8) / p.p5)


def steady_state_motor_command(v: float, u: float, p: ModelParams) -> float:
    """Inverse of steady_state_speed, clamped to the command range."""
    gain = -(p.p6 + p.p7 * u) / p.p5
    if gain <= 0 or p.p8 <= 0 or v == 0:
        return 0.0
    ratio = v / gain
    return clamp(math.copysign(abs(ratio) ** (1.0 / p.p8), ratio))
