import json
from types import SimpleNamespace

import numpy as np
import pytest
from numpy.testing import assert_allclose

from src.modules import experiment
from src.modules.baseline import (
    FitProblem, FitResult, SwarmConfig, direct_fit, pso_fit, render_crop, renderer_problem,
)
from src.modules.feedback import LoopState
from src.modules.networks import HAND_CUBE


def linear_problem(rng, dim=4, pixels=30, with_vjp=True, **kwargs):
    """Synthesis that is linear in the pose, so the optimum is known exactly."""
    M = rng.normal(size=(pixels, dim))
    target = rng.uniform(-0.5, 0.5, size=dim)
    observed = M @ target

    def synthesize(pose):
        return M @ pose

    def vjp(pose, grad_image):
        return M.T @ grad_image

    problem = FitProblem(observed, synthesize, np.zeros(dim), -1.0, 1.0,
                         vjp=vjp if with_vjp else None, **kwargs)
    return problem, target


class TestFitProblem:
    def test_bounds_validation(self):
        with pytest.raises(ValueError):
            FitProblem(np.zeros(3), lambda p: p, np.zeros(3), 1.0, -1.0)
        with pytest.raises(ValueError):
            FitProblem(np.zeros(3), lambda p: p, np.full(3, 2.0), -1.0, 1.0)

    def test_finite_difference_gradient_matches_vjp(self, rng):
        problem, _ = linear_problem(rng)
        fd = FitProblem(problem.observed, problem.synthesize, problem.initial, -1.0, 1.0, fd_step=1e-4)
        pose = np.array([0.1, -0.2, 0.3, 0.0])
        _, analytic = problem.objective_and_gradient(pose)
        _, numeric = fd.objective_and_gradient(pose)
        assert_allclose(numeric, analytic, rtol=1e-5, atol=1e-6)


class TestDirectFit:
    def test_recovers_linear_optimum(self, rng):
        problem, target = linear_problem(rng)
        result = direct_fit(problem)
        assert result.success
        assert_allclose(result.pose, target, atol=1e-3)
        assert result.objective < 1e-6
        assert result.trace[0] >= result.trace[-1]

    def test_finite_differences_only(self, rng):
        problem, target = linear_problem(rng, with_vjp=False, fd_step=1e-3)
        assert_allclose(direct_fit(problem).pose, target, atol=1e-3)

    def test_result_stays_in_bounds(self, rng):
        problem, _ = linear_problem(rng)
        problem.observed = problem.observed * 10.0
        result = direct_fit(problem)
        assert np.all(result.pose >= -1.0) and np.all(result.pose <= 1.0)


class TestSwarm:
    def test_trace_never_increases(self, rng):
        problem, _ = linear_problem(rng)
        result = pso_fit(problem, SwarmConfig(particles=8, generations=20, seed=2))
        assert len(result.trace) == 21
        assert np.all(np.diff(result.trace) <= 0)
        assert result.evaluations == 8 * 21
        assert result.trace[-1] <= problem.objective(problem.initial)

    def test_single_still_particle_returns_initial(self, rng):
        problem, _ = linear_problem(rng)
        result = pso_fit(problem, SwarmConfig(particles=1, generations=5, velocity_scale=0.0))
        assert_allclose(result.pose, problem.initial)

    def test_swarm_approaches_optimum(self, rng):
        problem, target = linear_problem(rng, dim=2)
        result = pso_fit(problem, SwarmConfig(particles=20, generations=60, seed=1))
        assert_allclose(result.pose, target, atol=5e-2)

    def test_seeded_runs_repeat(self, rng):
        problem, _ = linear_problem(rng)
        a = pso_fit(problem, SwarmConfig(particles=5, generations=4, seed=9))
        b = pso_fit(problem, SwarmConfig(particles=5, generations=4, seed=9))
        assert_allclose(a.pose, b.pose)

    def test_config_validation(self):
        with pytest.raises(ValueError):
            SwarmConfig(particles=0)


class TestRendererProblem:
    def test_true_pose_has_zero_objective(self, hand_samples, geometry):
        sample = hand_samples[0]
        center = sample.hand_pose[0]
        observed = render_crop(sample.hand_pose, geometry, center, HAND_CUBE, sample.camera, 16)
        problem = renderer_problem(observed, geometry, center, HAND_CUBE, sample.camera,
                                   sample.hand_pose - center, 16)
        assert problem.objective(problem.initial) == pytest.approx(0.0)
        assert observed.min() < 1.0

    def test_depth_offset_is_recovered(self, hand_samples, geometry):
        sample = hand_samples[1]
        center = sample.hand_pose[0]
        observed = render_crop(sample.hand_pose, geometry, center, HAND_CUBE, sample.camera, 16)
        truth = (sample.hand_pose - center).ravel()
        start = (sample.hand_pose - center + [0.0, 0.0, 3.0]).ravel()
        problem = renderer_problem(observed, geometry, center, HAND_CUBE, sample.camera, start, 16,
                                   max_evaluations=30)
        # lateral coordinates stay fixed; only depths are fitted
        lateral = np.ones((len(sample.hand_pose), 3), bool)
        lateral[:, 2] = False
        lateral = lateral.ravel()
        problem.lower[lateral] = problem.initial[lateral]
        problem.upper[lateral] = problem.initial[lateral]
        result = direct_fit(problem)
        assert result.objective < result.trace[0]
        offset = (result.pose - truth).reshape(-1, 3)[:, 2].mean()
        assert abs(offset) < 1.5
        assert_allclose(result.pose[lateral], truth[lateral])


class TestBaselineRuns:
    @pytest.fixture
    def fake_fit(self, monkeypatch):
        """Replaces the loop initialization and the optimizer with fixed outcomes."""
        truth = np.zeros((14, 3))
        initial = truth + [0.0, 0.0, 4.0]
        outcome = {}

        def hand_loop(depth, bundle, n, cam):
            state = LoopState(observed=np.zeros((4, 4)), locations={"hand": np.zeros(3)})
            state.record(initial)
            return state

        monkeypatch.setattr(experiment, "run_hand_loop", hand_loop)
        monkeypatch.setattr(experiment, "synthesizer_problem", lambda *args: None)
        monkeypatch.setattr(experiment, "direct_fit", lambda problem: outcome["result"])
        sample = SimpleNamespace(index=3, depth=None, camera=None, hand_pose=truth)
        return sample, SimpleNamespace(synthesizer=None), outcome

    @pytest.mark.parametrize("shift, trace, flagged", [
        (9.0, [5.0, 1.0], True),
        (1.0, [5.0, 1.0], False),
        (9.0, [5.0, 5.0], False),
        (9.0, [1.0, 2.0], False),
    ])
    def test_objective_and_error_pairing(self, fake_fit, shift, trace, flagged):
        sample, bundle, outcome = fake_fit
        outcome["result"] = FitResult(np.tile([0.0, 0.0, shift], 14), trace)
        (row,) = experiment.run_baseline([sample], bundle)
        assert bool(row["objective_down_error_up"]) is flagged
        assert row["initial_error"] == pytest.approx(4.0)
        assert row["final_error"] == pytest.approx(shift)
        assert (row["initial_objective"], row["final_objective"]) == (trace[0], trace[-1])

    def test_trace_files(self, fake_fit, tmp_path):
        sample, bundle, outcome = fake_fit
        outcome["result"] = FitResult(np.zeros(42), [3.0, 2.0, 0.5], success=False, message="ABNORMAL")
        (row,) = experiment.run_baseline([sample], bundle, trace_dir=str(tmp_path / "traces"))
        saved = json.loads((tmp_path / "traces" / "trace_000003.json").read_text())
        assert row["trace"].endswith("trace_000003.json")
        assert saved == {"objective": [3.0, 2.0, 0.5], "success": False, "message": "ABNORMAL"}
        assert not row["objective_down_error_up"]
