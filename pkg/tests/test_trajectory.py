from __future__ import annotations

import math
import tempfile
import unittest
from pathlib import Path

from hypothesis import given, settings
from hypothesis import strategies as st

from vehicle_lab.trajectory import (
    Trajectory,
    TrajectoryError,
    TrajectoryPoint,
    TrajectoryRejectedError,
    _hermite_segment,
    append_point,
    circle,
    figure_eight,
    interpolate,
    load_trajectory_csv,
    reference_yaw,
    save_trajectory_csv,
    validate,
)

coordinates = st.floats(min_value=-5.0, max_value=5.0, allow_nan=False)
velocities = st.floats(min_value=-3.0, max_value=3.0, allow_nan=False)


@st.composite
def trajectories(draw, min_points: int = 2, max_points: int = 8):
    count = draw(st.integers(min_value=min_points, max_value=max_points))
    gaps = draw(st.lists(st.floats(min_value=0.05, max_value=2.0), min_size=count - 1, max_size=count - 1))
    t = draw(st.floats(min_value=0.0, max_value=10.0))
    times = [t]
    for gap in gaps:
        times.append(times[-1] + gap)
    points = [
        TrajectoryPoint(t=time, x=draw(coordinates), y=draw(coordinates), vx=draw(velocities), vy=draw(velocities))
        for time in times
    ]
    return Trajectory.from_points(points)


def _close(a: float, b: float, rel: float = 1e-9, floor: float = 1e-9) -> bool:
    return abs(a - b) <= max(rel * max(abs(a), abs(b)), floor)


class InterpolateTests(unittest.TestCase):
    def test_linear_segment_midpoint(self):
        traj = Trajectory.from_points([TrajectoryPoint(0.0, 0.0, 0.0, 1.0, 0.0), TrajectoryPoint(1.0, 1.0, 0.0, 1.0, 0.0)])
        sample = interpolate(traj, 0.5)
        self.assertAlmostEqual(sample.x, 0.5, places=15)
        self.assertAlmostEqual(sample.vx, 1.0, places=15)
        self.assertEqual(sample.y, 0.0)

    def test_hold_rule_outside_range(self):
        traj = Trajectory.from_points([TrajectoryPoint(1.0, 0.5, 0.5, 1.0, 1.0), TrajectoryPoint(2.0, 1.5, 1.5, 1.0, 1.0)])
        before = interpolate(traj, 0.0)
        after = interpolate(traj, 5.0)
        self.assertEqual((before.x, before.y, before.vx, before.vy), (0.5, 0.5, 0.0, 0.0))
        self.assertEqual((after.x, after.y, after.vx, after.vy), (1.5, 1.5, 0.0, 0.0))
        self.assertIsNone(reference_yaw(after))

    def test_single_point_trajectory(self):
        traj = Trajectory.from_points([TrajectoryPoint(1.0, 2.0, 3.0, 0.5, 0.0)])
        sample = interpolate(traj, 1.0)
        self.assertEqual((sample.x, sample.y, sample.vx), (2.0, 3.0, 0.5))

    def test_empty_trajectory_is_rejected(self):
        with self.assertRaises(TrajectoryError):
            Trajectory.from_points([])

    @given(trajectories())
    def test_knots_are_reproduced_exactly(self, traj):
        for point in traj.points:
            sample = interpolate(traj, point.t)
            self.assertEqual((sample.x, sample.y, sample.vx, sample.vy), (point.x, point.y, point.vx, point.vy))

    @given(trajectories(min_points=3))
    def test_interior_knots_are_c1_continuous(self, traj):
        for index in range(1, len(traj) - 1):
            knot = traj.points[index]
            for p0, p1 in ((traj.points[index - 1], knot), (knot, traj.points[index + 1])):
                sample = _hermite_segment(p0, p1, knot.t)
                self.assertTrue(_close(sample.x, knot.x))
                self.assertTrue(_close(sample.y, knot.y))
                self.assertTrue(_close(sample.vx, knot.vx, floor=1e-8))
                self.assertTrue(_close(sample.vy, knot.vy, floor=1e-8))

    @given(trajectories(), st.floats(min_value=0.05, max_value=2.0), coordinates, coordinates, velocities, velocities)
    def test_append_keeps_existing_interpolation_bitwise(self, traj, gap, x, y, vx, vy):
        extended = append_point(traj, TrajectoryPoint(traj.end_time + gap, x, y, vx, vy))
        span = traj.end_time - traj.start_time
        for fraction in (0.0, 0.13, 0.5, 0.77, 0.999):
            t = traj.start_time + fraction * span
            self.assertEqual(interpolate(traj, t), interpolate(extended, t))

    @settings(max_examples=50)
    @given(
        st.floats(-3.0, 3.0), st.floats(-3.0, 3.0), st.floats(-2.0, 2.0), st.floats(-2.0, 2.0),
        st.lists(st.floats(0.05, 1.0), min_size=1, max_size=6), st.floats(0.0, 1.0),
    )
    def test_constant_velocity_line_is_reproduced(self, x0, y0, vx, vy, gaps, fraction):
        times = [0.0]
        for gap in gaps:
            times.append(times[-1] + gap)
        traj = Trajectory.from_points([TrajectoryPoint(t, x0 + vx * t, y0 + vy * t, vx, vy) for t in times])
        t = fraction * times[-1]
        sample = interpolate(traj, t)
        self.assertAlmostEqual(sample.x, x0 + vx * t, places=9)
        self.assertAlmostEqual(sample.y, y0 + vy * t, places=9)
        self.assertAlmostEqual(sample.vx, vx, places=9)
        self.assertAlmostEqual(sample.vy, vy, places=9)


class AppendTests(unittest.TestCase):
    def setUp(self):
        self.traj = Trajectory.from_points([TrajectoryPoint(0.0, 0.0, 0.0, 1.0, 0.0)])

    def test_append_to_single_point_defines_a_segment(self):
        extended = append_point(self.traj, TrajectoryPoint(1.0, 1.0, 0.0, 1.0, 0.0))
        self.assertEqual(len(extended), 2)
        self.assertEqual(len(self.traj), 1)

    def test_equal_time_is_rejected_and_original_unchanged(self):
        with self.assertRaises(TrajectoryRejectedError):
            append_point(self.traj, TrajectoryPoint(0.0, 1.0, 0.0, 1.0, 0.0))
        self.assertEqual(len(self.traj), 1)

    def test_non_finite_point_is_rejected(self):
        with self.assertRaises(TrajectoryRejectedError):
            append_point(self.traj, TrajectoryPoint(1.0, math.nan, 0.0, 1.0, 0.0))


class ValidateTests(unittest.TestCase):
    def test_speed_limit_is_reported(self):
        points = [TrajectoryPoint(0.0, 0.0, 0.0, 5.0, 0.0), TrajectoryPoint(1.0, 1.0, 0.0, 1.0, 0.0)]
        violations = validate(points)
        self.assertEqual([(item.index, item.kind) for item in violations], [(0, "speed_limit")])

    def test_non_monotonic_time_is_reported(self):
        points = [TrajectoryPoint(1.0, 0.0, 0.0, 1.0, 0.0), TrajectoryPoint(0.5, 1.0, 0.0, 1.0, 0.0)]
        self.assertEqual([item.kind for item in validate(points)], ["non_monotonic"])
        with self.assertRaises(TrajectoryError):
            Trajectory.from_points(points)


class GeneratorTests(unittest.TestCase):
    def test_figure_eight_runs_at_constant_speed_inside_arena(self):
        traj = figure_eight(speed=1.0)
        self.assertEqual(validate(traj), [])
        for point in traj.points:
            self.assertAlmostEqual(math.hypot(point.vx, point.vy), 1.0, places=6)
            self.assertTrue(0.0 < point.x < 4.5 and 0.0 < point.y < 4.0)
        self.assertAlmostEqual(traj.points[0].x, traj.points[-1].x, places=6)

    def test_circle_keeps_its_radius(self):
        traj = circle(center=(1.0, 1.0), radius=0.5, speed=0.5)
        for t in (traj.start_time + 0.33, traj.start_time + 2.1, traj.end_time - 0.05):
            sample = interpolate(traj, t)
            self.assertAlmostEqual(math.hypot(sample.x - 1.0, sample.y - 1.0), 0.5, delta=1e-3)

    def test_window_is_inclusive(self):
        traj = circle()
        points = traj.window(traj.points[2].t, traj.points[5].t)
        self.assertEqual(points, list(traj.points[2:6]))


class CsvTests(unittest.TestCase):
    def test_csv_round_trip_preserves_points(self):
        traj = circle(radius=0.4, knot_spacing=0.25)
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / "traj.csv"
            save_trajectory_csv(traj, path)
            loaded = load_trajectory_csv(path)
        self.assertEqual(len(loaded), len(traj))
        for original, reloaded in zip(traj.points, loaded.points):
            for name in ("t", "x", "y", "vx", "vy"):
                self.assertAlmostEqual(getattr(reloaded, name), getattr(original, name), places=12)

    def test_bad_header_is_rejected(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / "traj.csv"
            path.write_text("time,x,y,vx,vy\n0,0,0,1,0\n", encoding="utf-8")
            with self.assertRaises(TrajectoryError):
                load_trajectory_csv(path)

    def test_missing_file_is_rejected(self):
        with self.assertRaises(TrajectoryError):
            load_trajectory_csv("does-not-exist.csv")


if __name__ == "__main__":
    unittest.main()
