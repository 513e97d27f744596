"""JSON payloads exchanged between scripts, the bus and the on-board controller."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from typing import Union

from vehicle_lab.trajectory import TrajectoryPoint

DIRECT_INPUT = "DirectInput"
TRAJECTORY_SEGMENT = "TrajectorySegment"
VEHICLE_STATE = "VehicleStateMsg"


class MessageDecodeError(ValueError):
    """Raised when a payload is not a well-formed message."""


@dataclass(frozen=True)
class DirectInput:
    m: float
    d: float


@dataclass(frozen=True)
class TrajectorySegment:
    points: tuple[TrajectoryPoint, ...]


@dataclass(frozen=True)
class VehicleStateMsg:
    t: float
    x: float
    y: float
    psi: float
    v: float
    m_applied: float
    d_applied: float
    ips_age: int


Message = Union[DirectInput, TrajectorySegment, VehicleStateMsg]


def encode(message: Message) -> str:
    if isinstance(message, DirectInput):
        body = {"type": DIRECT_INPUT, "m": message.m, "d": message.d}
    elif isinstance(message, TrajectorySegment):
        body = {"type": TRAJECTORY_SEGMENT, "points": [asdict(point) for point in message.points]}
    elif isinstance(message, VehicleStateMsg):
        body = {"type": VEHICLE_STATE, **asdict(message)}
    else:
        raise TypeError(f"Cannot encode {type(message).__name__}")
    return json.dumps(body, sort_keys=True, allow_nan=False)


def _number(body: dict, key: str) -> float:
    value = body.get(key)
    if isinstance(value, bool) or not isinstance(value, (int, float)) or not math.isfinite(value):
        raise MessageDecodeError(f"Field '{key}' must be a finite number, got {value!r}.")
    return float(value)


def _exact_keys(body: dict, expected: set[str]) -> None:
    if set(body) != expected:
        raise MessageDecodeError(f"Expected fields {sorted(expected)}, got {sorted(body)}.")


def decode(payload: str) -> Message:
    try:
        body = json.loads(payload)
    except (TypeError, json.JSONDecodeError) as exc:
        raise MessageDecodeError(f"Payload is not JSON: {exc}") from exc
    if not isinstance(body, dict):
        raise MessageDecodeError("Payload must be a JSON object.")

    kind = body.pop("type", None)
    if kind == DIRECT_INPUT:
        _exact_keys(body, {"m", "d"})
        return DirectInput(m=_number(body, "m"), d=_number(body, "d"))

    if kind == TRAJECTORY_SEGMENT:
        _exact_keys(body, {"points"})
        raw_points = body["points"]
        if not isinstance(raw_points, list) or not raw_points:
            raise MessageDecodeError("TrajectorySegment needs a non-empty list of points.")
        points = []
        for raw in raw_points:
            if not isinstance(raw, dict):
                raise MessageDecodeError("Trajectory points must be objects.")
            _exact_keys(raw, {"t", "x", "y", "vx", "vy"})
            points.append(TrajectoryPoint(**{key: _number(raw, key) for key in ("t", "x", "y", "vx", "vy")}))
        return TrajectorySegment(points=tuple(points))

    if kind == VEHICLE_STATE:
        _exact_keys(body, {"t", "x", "y", "psi", "v", "m_applied", "d_applied", "ips_age"})
        values = {key: _number(body, key) for key in body}
        values["ips_age"] = int(values["ips_age"])
        return VehicleStateMsg(**values)

    raise MessageDecodeError(f"Unknown message type {kind!r}.")
