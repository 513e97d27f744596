"""Reference trajectories and their cubic Hermite interpolation.

A trajectory is a list of ``(t, x, y, vx, vy)`` points. Every segment between two
neighbouring points is a cubic Hermite polynomial that depends on those two points
only, so appending points never changes the reference already handed out.
"""

from __future__ import annotations

import bisect
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import pandas as pd

from vehicle_lab.logging_config import logger

TRAJECTORY_COLUMNS = ["t", "x", "y", "vx", "vy"]
DEFAULT_SPEED_LIMIT = 3.7
STANDSTILL_SPEED = 1e-3


class TrajectoryError(ValueError):
    """Raised when a trajectory cannot be built or read."""


class TrajectoryRejectedError(TrajectoryError):
    """Raised when an appended point would break strictly increasing time."""


@dataclass(frozen=True)
class TrajectoryPoint:
    t: float
    x: float
    y: float
    vx: float
    vy: float

    def is_finite(self) -> bool:
        return all(math.isfinite(value) for value in (self.t, self.x, self.y, self.vx, self.vy))


@dataclass(frozen=True)
class ReferenceSample:
    x: float
    y: float
    vx: float
    vy: float

    @property
    def speed(self) -> float:
        return math.hypot(self.vx, self.vy)


@dataclass(frozen=True)
class TrajectoryViolation:
    index: int
    kind: str
    message: str


@dataclass(frozen=True)
class Trajectory:
    points: tuple[TrajectoryPoint, ...]

    def __post_init__(self):
        points = tuple(self.points)
        object.__setattr__(self, "points", points)
        if not points:
            raise TrajectoryError("A trajectory needs at least one point.")
        problems = [
            violation
            for violation in validate(points, speed_limit=math.inf)
            if violation.kind in ("non_finite", "non_monotonic")
        ]
        if problems:
            raise TrajectoryError("; ".join(problem.message for problem in problems))
        object.__setattr__(self, "_times", tuple(point.t for point in points))

    @classmethod
    def from_points(cls, points: Iterable[TrajectoryPoint]) -> Trajectory:
        return cls(points=tuple(points))

    def __len__(self) -> int:
        return len(self.points)

    @property
    def start_time(self) -> float:
        return self.points[0].t

    @property
    def end_time(self) -> float:
        return self.points[-1].t

    def window(self, t_start: float, t_end: float) -> list[TrajectoryPoint]:
        """Points with t_start <= t <= t_end."""
        lo = bisect.bisect_left(self._times, t_start)
        hi = bisect.bisect_right(self._times, t_end)
        return list(self.points[lo:hi])


def append_point(traj: Trajectory, pt: TrajectoryPoint) -> Trajectory:
    if not pt.is_finite():
        raise TrajectoryRejectedError(f"Point at t={pt.t} has non-finite fields.")
    if not pt.t > traj.end_time:
        raise TrajectoryRejectedError(
            f"Point at t={pt.t} does not follow the last point at t={traj.end_time}."
        )
    return Trajectory(points=traj.points + (pt,))


def _hermite_segment(p0: TrajectoryPoint, p1: TrajectoryPoint, t_query: float) -> ReferenceSample:
    h = p1.t - p0.t
    s = (t_query - p0.t) / h
    s2 = s * s
    s3 = s2 * s
    h00 = 2.0 * s3 - 3.0 * s2 + 1.0
    h10 = s3 - 2.0 * s2 + s
    h01 = -2.0 * s3 + 3.0 * s2
    h11 = s3 - s2
    dh00 = 6.0 * s2 - 6.0 * s
    dh10 = 3.0 * s2 - 4.0 * s + 1.0
    dh01 = -6.0 * s2 + 6.0 * s
    dh11 = 3.0 * s2 - 2.0 * s
    return ReferenceSample(
        x=h00 * p0.x + h10 * h * p0.vx + h01 * p1.x + h11 * h * p1.vx,
        y=h00 * p0.y + h10 * h * p0.vy + h01 * p1.y + h11 * h * p1.vy,
        vx=(dh00 * p0.x + dh01 * p1.x) / h + dh10 * p0.vx + dh11 * p1.vx,
        vy=(dh00 * p0.y + dh01 * p1.y) / h + dh10 * p0.vy + dh11 * p1.vy,
    )


def interpolate(traj: Trajectory, t_query: float) -> ReferenceSample:
    if traj is None or len(traj) == 0:
        raise TrajectoryError("Cannot interpolate an empty trajectory.")
    times = traj._times
    first, last = traj.points[0], traj.points[-1]
    if t_query < first.t:
        return ReferenceSample(x=first.x, y=first.y, vx=0.0, vy=0.0)
    if t_query > last.t:
        return ReferenceSample(x=last.x, y=last.y, vx=0.0, vy=0.0)

    index = bisect.bisect_right(times, t_query) - 1
    knot = traj.points[index]
    if knot.t == t_query:
        return ReferenceSample(x=knot.x, y=knot.y, vx=knot.vx, vy=knot.vy)
    return _hermite_segment(knot, traj.points[index + 1], t_query)


def reference_yaw(sample: ReferenceSample) -> float | None:
    if sample.speed < STANDSTILL_SPEED:
        return None
    return math.atan2(sample.vy, sample.vx)


def validate(
    traj: Trajectory | Sequence[TrajectoryPoint],
    speed_limit: float = DEFAULT_SPEED_LIMIT,
) -> list[TrajectoryViolation]:
    points = traj.points if isinstance(traj, Trajectory) else tuple(traj)
    violations: list[TrajectoryViolation] = []
    for index, point in enumerate(points):
        if not point.is_finite():
            violations.append(
                TrajectoryViolation(index, "non_finite", f"Point {index} has non-finite fields.")
            )
            continue
        if index > 0 and not point.t > points[index - 1].t:
            violations.append(
                TrajectoryViolation(
                    index,
                    "non_monotonic",
                    f"Point {index} at t={point.t} is not after t={points[index - 1].t}.",
                )
            )
        speed = math.hypot(point.vx, point.vy)
        if speed > speed_limit:
            violations.append(
                TrajectoryViolation(
                    index,
                    "speed_limit",
                    f"Point {index} speed {speed:.3f} m/s exceeds {speed_limit:.3f} m/s.",
                )
            )
    return violations


def load_trajectory_csv(path: str | Path) -> Trajectory:
    path = Path(path)
    try:
        df = pd.read_csv(path)
    except FileNotFoundError as exc:
        raise TrajectoryError(f"Trajectory file '{path}' was not found.") from exc
    except (pd.errors.ParserError, pd.errors.EmptyDataError) as exc:
        raise TrajectoryError(f"Trajectory file '{path}' is not valid CSV: {exc}") from exc

    if list(df.columns) != TRAJECTORY_COLUMNS:
        raise TrajectoryError(
            f"Trajectory file '{path}' must have header {','.join(TRAJECTORY_COLUMNS)}."
        )
    numeric_df = df.apply(pd.to_numeric, errors="coerce")
    bad_rows = numeric_df.index[numeric_df.isna().any(axis=1)].tolist()
    if bad_rows:
        raise TrajectoryError(f"Trajectory file '{path}' line {bad_rows[0] + 2} is not numeric.")

    points = [TrajectoryPoint(*map(float, row)) for row in numeric_df.itertuples(index=False)]
    return Trajectory.from_points(points)


def save_trajectory_csv(traj: Trajectory, path: str | Path) -> None:
    df = pd.DataFrame([vars(point) for point in traj.points], columns=TRAJECTORY_COLUMNS)
    df.to_csv(path, index=False)


def _points_along_curve(
    curve_xy: np.ndarray,
    speed: float,
    start_time: float,
    knot_spacing: float,
) -> list[TrajectoryPoint]:
    """Resample a dense closed-form curve to constant speed by arc length."""
    segment_lengths = np.hypot(np.diff(curve_xy[:, 0]), np.diff(curve_xy[:, 1]))
    arc = np.concatenate([[0.0], np.cumsum(segment_lengths)])
    total_time = arc[-1] / speed
    knot_count = max(int(round(total_time / knot_spacing)), 1)
    knot_arc = np.linspace(0.0, arc[-1], knot_count + 1)
    knot_x = np.interp(knot_arc, arc, curve_xy[:, 0])
    knot_y = np.interp(knot_arc, arc, curve_xy[:, 1])

    tangent_x = np.gradient(curve_xy[:, 0], arc)
    tangent_y = np.gradient(curve_xy[:, 1], arc)
    knot_tx = np.interp(knot_arc, arc, tangent_x)
    knot_ty = np.interp(knot_arc, arc, tangent_y)
    norm = np.hypot(knot_tx, knot_ty)

    knot_t = start_time + knot_arc / speed
    return [
        TrajectoryPoint(
            t=float(t),
            x=float(x),
            y=float(y),
            vx=float(speed * tx / n),
            vy=float(speed * ty / n),
        )
        for t, x, y, tx, ty, n in zip(knot_t, knot_x, knot_y, knot_tx, knot_ty, norm)
    ]


def figure_eight(
    center: tuple[float, float] = (2.25, 2.0),
    half_width: float = 1.2,
    half_height: float = 0.6,
    speed: float = 1.0,
    start_time: float = 0.5,
    knot_spacing: float = 0.1,
    laps: int = 1,
    samples_per_lap: int = 4000,
) -> Trajectory:
    """Constant-speed figure eight x = a*sin(s), y = b*sin(2s), starting at the crossing."""
    if speed <= 0 or laps < 1:
        raise TrajectoryError("figure_eight needs a positive speed and at least one lap.")
    s = np.linspace(0.0, 2.0 * np.pi * laps, samples_per_lap * laps + 1)
    curve = np.column_stack(
        [center[0] + half_width * np.sin(s), center[1] + half_height * np.sin(2.0 * s)]
    )
    points = _points_along_curve(curve, speed, start_time, knot_spacing)
    logger.debug("Built figure-eight trajectory with %s knots", len(points))
    return Trajectory.from_points(points)


def circle(
    center: tuple[float, float] = (2.25, 2.0),
    radius: float = 1.0,
    speed: float = 1.0,
    start_time: float = 0.5,
    knot_spacing: float = 0.1,
    start_angle: float = -math.pi / 2,
    laps: int = 1,
    clockwise: bool = False,
    samples_per_lap: int = 2000,
) -> Trajectory:
    if speed <= 0 or radius <= 0 or laps < 1:
        raise TrajectoryError("circle needs a positive speed, radius and at least one lap.")
    direction = -1.0 if clockwise else 1.0
    s = start_angle + direction * np.linspace(0.0, 2.0 * np.pi * laps, samples_per_lap * laps + 1)
    curve = np.column_stack([center[0] + radius * np.cos(s), center[1] + radius * np.sin(s)])
    return Trajectory.from_points(_points_along_curve(curve, speed, start_time, knot_spacing))
