from __future__ import annotations

import json
import math
import os
import tempfile
import unittest
from dataclasses import replace
from pathlib import Path

import numpy as np

from vehicle_lab.dynamics import ModelParams, VehicleState
from vehicle_lab.ident import (
    AlignmentError,
    DelayConfig,
    DelayGrid,
    DelayGridSearchError,
    ErrorWeights,
    FitOptions,
    MeasurementLogError,
    MeasurementSample,
    apply_delays,
    delay_grid_search,
    estimate_parameters,
    load_measurement_log,
    objective,
    pose_error,
    replay_model,
    residual_statistics,
    save_fit_report,
    save_measurement_log,
    slice_experiments,
)
from vehicle_lab.labsim import ExcitationSpec, LabConfig, ScenarioSpec, VehicleSpec, generate_ident_log

IDENTIFIED = ModelParams.identified()
TRUE_DELAYS = DelayConfig(1, 0, 5)
PERTURBATION = np.array([1.04, 0.9, 1.1, 0.95, 1.05, 1.05, 0.96, 0.95, 1.2, 0.8])


def _scenario(profile: str = "random-chirp", duration: float = 20.0, noise_free: bool = True) -> ScenarioSpec:
    excitation = ExcitationSpec(profile=profile, duration=duration)
    return ScenarioSpec(
        duration=duration,
        vehicles=(VehicleSpec("v01", VehicleState(2.25, 2.0, 0.0, 0.0)),),
        excitation=excitation.noise_free() if noise_free else excitation,
    )


def _synthetic_log(profile="random-chirp", duration=20.0, noise_free=True, delays=TRUE_DELAYS, seed=0):
    return generate_ident_log(_scenario(profile, duration, noise_free), LabConfig(seed=seed), IDENTIFIED, delays)


def _uniform_log(count: int, dt: float = 0.02) -> list[MeasurementSample]:
    return [MeasurementSample(k * dt, 0.1 * k, 0.0, 0.0, 1.0, 0.5, 0.0, 7.4) for k in range(count)]


def _perturbed() -> ModelParams:
    return ModelParams.from_sequence(IDENTIFIED.as_array() * PERTURBATION)


def _within_recovery_tolerance(estimate: float, truth: float) -> bool:
    return abs(estimate - truth) <= max(0.10 * abs(truth), 0.02)


class PoseErrorTests(unittest.TestCase):
    def test_identical_states_have_zero_error(self):
        state = VehicleState(1.0, 2.0, 0.3, 0.5)
        self.assertEqual(pose_error(state, state), 0.0)

    def test_yaw_error_is_periodic(self):
        sim = VehicleState(1.0, 2.0, 0.3, 0.5)
        self.assertAlmostEqual(pose_error(sim, replace(sim, psi=0.3 + 2.0 * math.pi)), 0.0, places=20)
        self.assertAlmostEqual(pose_error(sim, replace(sim, psi=0.3 + math.pi)), 1.0, places=12)


class SliceTests(unittest.TestCase):
    def test_trailing_remainder_is_dropped(self):
        result = slice_experiments(_uniform_log(250), n_window=100)
        self.assertEqual(len(result.experiments), 2)
        self.assertEqual(result.dropped_tail, 50)
        self.assertEqual(result.discarded, [])

    def test_window_with_missing_sample_is_discarded(self):
        log = _uniform_log(301)
        del log[150]
        result = slice_experiments(log, n_window=100)
        self.assertEqual([exp.index for exp in result.experiments], [0, 2])
        self.assertEqual([index for index, _ in result.discarded], [1])

    def test_single_window_spans_two_seconds(self):
        result = slice_experiments(_uniform_log(100), n_window=100)
        self.assertEqual(len(result.experiments), 1)
        exp = result.experiments[0]
        self.assertAlmostEqual(exp.t[-1] - exp.t[0] + 0.02, 2.0, places=9)

    def test_empty_log_gives_no_experiments(self):
        self.assertEqual(slice_experiments([], n_window=100).experiments, [])

    def test_window_must_hold_two_samples(self):
        with self.assertRaises(ValueError):
            slice_experiments(_uniform_log(10), n_window=1)


class ApplyDelaysTests(unittest.TestCase):
    def setUp(self):
        self.experiment = slice_experiments(_uniform_log(100), n_window=100).experiments[0]

    def test_zero_delays_are_identity(self):
        aligned = apply_delays(self.experiment, DelayConfig())
        np.testing.assert_array_equal(aligned.x, self.experiment.x)
        np.testing.assert_array_equal(aligned.m, self.experiment.m)

    def test_identified_delays_trim_the_window(self):
        aligned = apply_delays(self.experiment, TRUE_DELAYS)
        self.assertEqual(len(aligned), 94)
        self.assertEqual(aligned.t[0], self.experiment.t[5])
        self.assertEqual(aligned.x[0], self.experiment.x[6])
        self.assertEqual(aligned.m[0], self.experiment.m[0])

    def test_delays_beyond_margin_are_rejected(self):
        with self.assertRaises(AlignmentError):
            apply_delays(self.experiment, DelayConfig(2, 0, 0), margin=DelayConfig(1, 0, 0))

    def test_delays_longer_than_window_are_rejected(self):
        with self.assertRaises(AlignmentError):
            apply_delays(self.experiment, DelayConfig(50, 0, 50))


class ObjectiveTests(unittest.TestCase):
    @classmethod
    def setUpClass(cls):
        cls.experiments = slice_experiments(_synthetic_log()).experiments

    def test_correct_alignment_removes_residual_on_exact_data(self):
        self.assertLessEqual(objective(self.experiments, IDENTIFIED, TRUE_DELAYS), 1e-12)
        self.assertGreater(objective(self.experiments, IDENTIFIED, DelayConfig(0, 0, 0), margin=TRUE_DELAYS), 1e-6)

    def test_yaw_gain_perturbation_increases_objective(self):
        base = objective(self.experiments, IDENTIFIED, TRUE_DELAYS)
        self.assertGreater(objective(self.experiments, IDENTIFIED.scaled("p4", 1.1), TRUE_DELAYS), base)

    def test_position_only_weights_ignore_other_channels(self):
        weights = ErrorWeights(w_x=1.0, w_y=0.0, w_psi=0.0, w_v=0.0)
        p = IDENTIFIED.scaled("p4", 1.05)

        def disturb(values):
            out = values.copy()
            out[10:] += 0.3
            return out

        disturbed = [replace(exp, y=disturb(exp.y), psi=disturb(exp.psi), v=disturb(exp.v)) for exp in self.experiments]
        base = objective(self.experiments, p, TRUE_DELAYS, w=weights)
        self.assertGreater(base, 0.0)
        self.assertEqual(objective(disturbed, p, TRUE_DELAYS, w=weights), base)
        self.assertGreater(objective(disturbed, p, TRUE_DELAYS), objective(self.experiments, p, TRUE_DELAYS))

    def test_objective_is_invariant_to_full_turns_in_measured_yaw(self):
        turned = [replace(exp, psi=exp.psi + 4.0 * math.pi) for exp in self.experiments]
        base = objective(self.experiments, IDENTIFIED.scaled("p4", 1.05), TRUE_DELAYS)
        self.assertAlmostEqual(objective(turned, IDENTIFIED.scaled("p4", 1.05), TRUE_DELAYS), base, delta=1e-9 * base)

    def test_objective_is_invariant_to_translation(self):
        moved = [replace(exp, x=exp.x + 0.7, y=exp.y - 1.3) for exp in self.experiments]
        base = objective(self.experiments, IDENTIFIED.scaled("p1", 1.05), TRUE_DELAYS)
        self.assertAlmostEqual(objective(moved, IDENTIFIED.scaled("p1", 1.05), TRUE_DELAYS), base, delta=1e-8 * base)

    def test_objective_needs_experiments(self):
        with self.assertRaises(ValueError):
            objective([], IDENTIFIED, TRUE_DELAYS)


class EstimateParametersTests(unittest.TestCase):
    @classmethod
    def setUpClass(cls):
        cls.experiments = slice_experiments(_synthetic_log()).experiments

    def test_truth_is_a_stationary_point(self):
        result = estimate_parameters(self.experiments, TRUE_DELAYS, p_init=IDENTIFIED)
        self.assertLessEqual(result.iterations, 2)
        np.testing.assert_allclose(result.params.as_array(), IDENTIFIED.as_array(), rtol=0, atol=1e-6)

    def test_noise_free_recovery(self):
        result = estimate_parameters(self.experiments, TRUE_DELAYS, p_init=_perturbed())
        self.assertLessEqual(result.objective, 1e-10)
        np.testing.assert_allclose(result.params.as_array(), IDENTIFIED.as_array(), rtol=1e-4)
        self.assertFalse(result.rank_deficient)
        self.assertEqual(result.unidentifiable, [])

    def test_free_initial_states_recover_the_same_parameters(self):
        options = FitOptions(init_mode="free")
        result = estimate_parameters(self.experiments[:4], TRUE_DELAYS, p_init=_perturbed(), options=options)
        self.assertLessEqual(result.objective, 1e-10)
        np.testing.assert_allclose(result.params.as_array(), IDENTIFIED.as_array(), rtol=1e-4)
        self.assertEqual(len(result.initial_states), 4)

    def test_objective_matches_re_evaluation(self):
        result = estimate_parameters(self.experiments, TRUE_DELAYS, p_init=_perturbed(), options=FitOptions(max_iter=5))
        again = objective(self.experiments, result.params, TRUE_DELAYS)
        self.assertAlmostEqual(result.objective, again, delta=1e-9 * max(again, 1e-300))

    def test_iteration_limit_is_reported_not_raised(self):
        result = estimate_parameters(self.experiments, TRUE_DELAYS, p_init=_perturbed(), options=FitOptions(max_iter=0))
        self.assertEqual(result.termination, "max_iter")
        self.assertEqual(result.iterations, 0)

    def test_accepted_steps_never_increase_cost(self):
        costs = []
        for max_iter in range(0, 6):
            result = estimate_parameters(
                self.experiments, TRUE_DELAYS, p_init=_perturbed(), options=FitOptions(max_iter=max_iter)
            )
            costs.append(result.objective)
        self.assertEqual(costs, sorted(costs, reverse=True))

    def test_fit_is_deterministic(self):
        first = estimate_parameters(self.experiments, TRUE_DELAYS, p_init=_perturbed(), options=FitOptions(max_iter=10))
        second = estimate_parameters(self.experiments, TRUE_DELAYS, p_init=_perturbed(), options=FitOptions(max_iter=10))
        self.assertEqual(first.to_dict(), second.to_dict())

    def test_translation_leaves_fitted_parameters_unchanged(self):
        moved = [replace(exp, x=exp.x + 0.5, y=exp.y + 0.25) for exp in self.experiments]
        base = estimate_parameters(self.experiments, TRUE_DELAYS, p_init=_perturbed())
        shifted = estimate_parameters(moved, TRUE_DELAYS, p_init=_perturbed())
        np.testing.assert_allclose(shifted.params.as_array(), base.params.as_array(), rtol=1e-6, atol=1e-9)


class DelayGridSearchTests(unittest.TestCase):
    @classmethod
    def setUpClass(cls):
        cls.experiments = slice_experiments(_synthetic_log()).experiments

    def test_grid_search_selects_generating_delays(self):
        grid = DelayGrid(ips=(0, 1, 2), local=(0, 1), actuation=(4, 5, 6))
        result = delay_grid_search(self.experiments, grid, _perturbed(), options=FitOptions(workers=4))
        self.assertEqual(result.delays, TRUE_DELAYS)
        evaluated = [row["objective"] for row in result.grid if row["objective"] is not None]
        self.assertEqual(len(result.grid), 18)
        self.assertAlmostEqual(result.objective, min(evaluated), delta=1e-12)
        self.assertEqual(result.equivalent, [(1, 0, 5), (2, 1, 4)])
        self.assertEqual(result.to_dict()["diagnostics"]["equivalent_delays"], [[1, 0, 5], [2, 1, 4]])

    def test_shifted_cells_anchor_on_the_smallest_local_delay(self):
        grid = DelayGrid(ips=(1, 2, 3), local=(0, 1, 2), actuation=(3, 4, 5))
        result = delay_grid_search(self.experiments, grid, IDENTIFIED, options=FitOptions(max_iter=5, workers=4))
        self.assertEqual(result.delays, TRUE_DELAYS)
        self.assertEqual(result.equivalent, [(1, 0, 5), (2, 1, 4), (3, 2, 3)])
        for row in result.grid:
            if tuple(row["delays"]) in result.equivalent:
                self.assertLessEqual(row["objective"], 1e-12)

    def test_noisy_log_recovers_generating_delays(self):
        noisy = slice_experiments(_synthetic_log(duration=30.0, noise_free=False)).experiments
        grid = DelayGrid(ips=(0, 1, 2), local=(0, 1), actuation=(4, 5, 6))
        result = delay_grid_search(noisy, grid, _perturbed(), options=FitOptions(workers=4))
        self.assertEqual(result.delays, TRUE_DELAYS)
        self.assertIn((2, 1, 4), result.equivalent)

    def test_single_cell_grid_matches_direct_estimate(self):
        grid = DelayGrid(ips=(1,), local=(0,), actuation=(5,))
        searched = delay_grid_search(self.experiments, grid, _perturbed(), options=FitOptions(max_iter=8))
        direct = estimate_parameters(self.experiments, TRUE_DELAYS, _perturbed(), options=FitOptions(max_iter=8))
        self.assertEqual(searched.params, direct.params)
        self.assertEqual(searched.objective, direct.objective)

    def test_equal_objectives_break_ties_lexicographically(self):
        still = slice_experiments(_synthetic_log(profile="zero")).experiments
        grid = DelayGrid(ips=(0, 1), local=(0, 1), actuation=(1, 2))
        result = delay_grid_search(still, grid, IDENTIFIED)
        self.assertEqual(result.delays, DelayConfig(0, 0, 1))
        self.assertEqual(len(result.ties), 8)

    def test_zero_excitation_is_reported_unidentifiable(self):
        still = slice_experiments(_synthetic_log(profile="zero")).experiments
        result = estimate_parameters(still, TRUE_DELAYS, IDENTIFIED)
        self.assertTrue(result.rank_deficient)
        self.assertEqual(len(result.unidentifiable), 10)
        self.assertIsNone(result.to_dict()["diagnostics"]["condition_number"])

    def test_every_cell_failing_raises_aggregate_error(self):
        short = slice_experiments(_uniform_log(12), n_window=6).experiments
        with self.assertRaises(DelayGridSearchError) as ctx:
            delay_grid_search(short, DelayGrid(ips=(0, 1), local=(0,), actuation=(5, 6)))
        self.assertEqual(len(ctx.exception.reasons), 4)

    def test_grid_and_delay_parsing(self):
        grid = DelayGrid.parse("ips=0..3,local=0..2,act=0..8")
        self.assertEqual(len(grid.cells()), 108)
        self.assertEqual(DelayGrid.parse("act=5").actuation, (5,))
        self.assertEqual(DelayConfig.parse("1,0,5"), TRUE_DELAYS)
        for text in ("ips=3..1", "speed=0..2"):
            with self.assertRaises(ValueError):
                DelayGrid.parse(text)
        with self.assertRaises(ValueError):
            DelayConfig.parse("1,0")


class ReplayTests(unittest.TestCase):
    def test_self_generated_log_replays_exactly(self):
        experiments = slice_experiments(_synthetic_log(duration=10.0)).experiments
        stats = residual_statistics(replay_model(experiments, IDENTIFIED, TRUE_DELAYS))
        for channel in ("x", "y", "psi", "v"):
            self.assertLessEqual(stats[channel]["max_abs"], 1e-8)

    def test_wrong_delays_increase_residuals(self):
        experiments = slice_experiments(_synthetic_log(duration=10.0)).experiments
        right = residual_statistics(replay_model(experiments, IDENTIFIED, TRUE_DELAYS))
        wrong = residual_statistics(replay_model(experiments, IDENTIFIED, DelayConfig(0, 0, 2)))
        self.assertGreater(wrong["x"]["rms"] + wrong["y"]["rms"], right["x"]["rms"] + right["y"]["rms"])

    def test_noisy_replay_stays_near_injected_noise(self):
        experiments = slice_experiments(_synthetic_log(duration=20.0, noise_free=False)).experiments
        stats = residual_statistics(replay_model(experiments, IDENTIFIED, TRUE_DELAYS))
        excitation = ExcitationSpec()
        self.assertLessEqual(stats["v"]["rms"], 2.0 * math.sqrt(2.0) * excitation.sigma_v)


class MeasurementLogTests(unittest.TestCase):
    def _write(self, text: str) -> Path:
        path = Path(self.tmp.name) / "log.csv"
        path.write_text(text, encoding="utf-8")
        return path

    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()

    def tearDown(self):
        self.tmp.cleanup()

    def test_well_formed_file_loads(self):
        path = self._write(
            "t,x_ips,y_ips,psi_ips,v_odo,m,d,u\n"
            "0.00,1.0,2.0,0.1,0.0,0.2,0.0,7.4\n"
            "0.02,1.0,2.0,0.1,0.01,0.2,0.0,7.4\n"
            "0.04,1.0,2.0,0.1,0.02,0.2,0.0,7.4\n"
        )
        samples = load_measurement_log(path)
        self.assertEqual(len(samples), 3)
        self.assertEqual(samples[2].v_hat, 0.02)

    def test_non_numeric_field_names_its_line(self):
        path = self._write("t,x_ips,y_ips,psi_ips,v_odo,m,d,u\n0.00,1,2,0,0,0,0,7.4\n0.02,1,abc,0,0,0,0,7.4\n")
        with self.assertRaises(MeasurementLogError) as ctx:
            load_measurement_log(path)
        self.assertEqual(ctx.exception.line, 3)

    def test_out_of_order_timestamps_are_rejected(self):
        path = self._write("t,x_ips,y_ips,psi_ips,v_odo,m,d,u\n0.02,1,2,0,0,0,0,7.4\n0.00,1,2,0,0,0,0,7.4\n")
        with self.assertRaises(MeasurementLogError) as ctx:
            load_measurement_log(path)
        self.assertEqual(ctx.exception.line, 3)

    def test_wrong_header_is_rejected(self):
        path = self._write("time,x,y,psi,v,m,d,u\n0,0,0,0,0,0,0,7.4\n")
        with self.assertRaises(MeasurementLogError) as ctx:
            load_measurement_log(path)
        self.assertEqual(ctx.exception.line, 1)

    def test_saved_log_loads_back(self):
        samples = _synthetic_log(duration=1.0)
        path = Path(self.tmp.name) / "synthetic.csv"
        save_measurement_log(samples, path)
        loaded = load_measurement_log(path)
        self.assertEqual(len(loaded), len(samples))
        np.testing.assert_allclose([s.x_hat for s in loaded], [s.x_hat for s in samples], rtol=1e-12)

    def test_fit_report_is_json(self):
        experiments = slice_experiments(_synthetic_log(duration=4.0)).experiments
        result = estimate_parameters(experiments, TRUE_DELAYS, IDENTIFIED)
        path = Path(self.tmp.name) / "fit.json"
        returned = save_fit_report(result, path, extra={"note": "unit"})
        payload = json.loads(path.read_text(encoding="utf-8"))
        self.assertEqual(payload, json.loads(json.dumps(returned)))
        self.assertEqual(payload["delays"], {"ips_delay": 1, "local_delay": 0, "actuation_delay": 5})
        self.assertEqual(payload["note"], "unit")
        self.assertEqual(len(payload["per_window"]), 2)


@unittest.skipUnless(os.getenv("VEHICLE_LAB_ACCEPTANCE"), "set VEHICLE_LAB_ACCEPTANCE=1 for the full identification runs")
class IdentificationAcceptanceTests(unittest.TestCase):
    def test_noisy_two_minute_log_recovers_parameters_and_delays(self):
        experiments = slice_experiments(_synthetic_log(duration=120.0, noise_free=False)).experiments
        result = delay_grid_search(experiments, DelayGrid(), options=FitOptions(workers=os.cpu_count() or 1))
        self.assertEqual(result.delays, TRUE_DELAYS)
        for estimate, truth in zip(result.params.as_array(), IDENTIFIED.as_array()):
            self.assertTrue(_within_recovery_tolerance(estimate, truth), f"{estimate} vs {truth}")

    def test_noise_free_two_minute_log_round_trips(self):
        experiments = slice_experiments(_synthetic_log(duration=120.0)).experiments
        result = delay_grid_search(experiments, DelayGrid(), options=FitOptions(workers=os.cpu_count() or 1))
        self.assertEqual(result.delays, TRUE_DELAYS)
        self.assertLessEqual(result.objective, 1e-10)
        np.testing.assert_allclose(result.params.as_array(), IDENTIFIED.as_array(), rtol=1e-4)


if __name__ == "__main__":
    unittest.main()
