"""Rollout engine: modes, determinism, observation identities, metrics."""

import numpy as np
import pytest

from infotraj.control import default_gains
from infotraj.gp import Kernel, ResidualModel
from infotraj.simulate import (
    RolloutConfig,
    RolloutResult,
    draw_belief_sample,
    export_rollout_csv,
    rollout,
    tracking_error,
)
from infotraj.systems import Trajectory, builtin, builtin_task, default_feature_indices


def attitude_setup(horizon=150, seed=4):
    plant = builtin("attitude3", seed=seed)
    gains = default_gains(plant)
    task = builtin_task(plant, "figure8", horizon=horizon)
    kern = Kernel(1e-4, np.full(3, 1.0), 1e-8)
    model = ResidualModel.create(
        [kern] * 3, feature_indices=default_feature_indices(plant)
    )
    return plant, gains, task, model


class TestRolloutModes:
    def test_experiment_requires_true_plant(self):
        plant, gains, task, model = attitude_setup()
        with pytest.raises(ValueError):
            rollout(
                plant.nominal(), gains, model, task, RolloutConfig(mode="experiment")
            )

    def test_belief_requires_sample_or_model(self):
        plant, gains, task, _ = attitude_setup()
        with pytest.raises(ValueError):
            rollout(plant, gains, None, task, RolloutConfig(mode="belief"))

    def test_unknown_mode_rejected(self):
        with pytest.raises(ValueError):
            RolloutConfig(mode="dream")

    def test_belief_with_true_residual_matches_experiment(self):
        plant, gains, task, model = attitude_setup()

        def true_sample(feat):
            # features are the input vector; the residual ignores state
            return plant.true_residual(None, feat)

        exp = rollout(
            plant, gains, model, task, RolloutConfig(mode="experiment", seed=5)
        )
        bel = rollout(
            plant,
            gains,
            model,
            task,
            RolloutConfig(mode="belief", seed=5, residual_sample=true_sample),
        )
        np.testing.assert_array_equal(bel.trajectory.states, exp.trajectory.states)
        np.testing.assert_array_equal(bel.trajectory.inputs, exp.trajectory.inputs)

    def test_perfect_model_tracks_task(self):
        plant = builtin("oadi", seed=3)
        gains = default_gains(plant)
        task = builtin_task(plant, "figure8", horizon=300)
        res = rollout(
            plant,
            gains,
            None,
            task,
            RolloutConfig(mode="experiment"),
            g_hat_override=plant.true_residual,
        )
        assert tracking_error(res).squared < 1e-8


class TestDeterminism:
    def test_bitwise_identical_repeats(self):
        plant, gains, task, model = attitude_setup()
        cfg = RolloutConfig(
            mode="experiment", seed=11, noise_std=1e-4, estimation_noise_std=1e-3
        )
        a = rollout(plant, gains, model, task, cfg)
        b = rollout(plant, gains, model, task, cfg)
        np.testing.assert_array_equal(a.trajectory.states, b.trajectory.states)
        np.testing.assert_array_equal(a.trajectory.inputs, b.trajectory.inputs)
        np.testing.assert_array_equal(a.measured_targets, b.measured_targets)

    def test_belief_rollouts_share_model_read_only(self):
        plant, gains, task, model = attitude_setup()
        X = np.random.default_rng(0).normal(size=(10, 3)) * 0.3
        Y = np.random.default_rng(1).normal(size=(10, 3)) * 1e-3
        model = model.condition_arrays(X, Y)
        before = model.posterior(np.zeros(3))
        rollout(plant.nominal(), gains, model, task, RolloutConfig(mode="belief", seed=0))
        after = model.posterior(np.zeros(3))
        np.testing.assert_array_equal(before.mean, after.mean)


class TestResidualObservations:
    def test_identity_target_plus_h_equals_next_state(self):
        plant, gains, task, model = attitude_setup()
        res = rollout(
            plant, gains, model, task, RolloutConfig(mode="experiment", seed=2)
        )
        n = plant.state_dim
        for k in range(res.steps):
            x = res.residual_inputs[k, :n]
            u = res.residual_inputs[k, n:]
            np.testing.assert_allclose(
                res.residual_targets[k] + plant.h(x, u),
                res.trajectory.states[k + 1],
                atol=1e-12,
            )

    def test_experiment_targets_equal_true_residual(self):
        plant = builtin("oadi", seed=3)
        gains = default_gains(plant)
        task = builtin_task(plant, "figure8", horizon=100)
        res = rollout(plant, gains, None, task, RolloutConfig(mode="experiment"))
        n = plant.state_dim
        for k in range(res.steps):
            x = res.residual_inputs[k, :n]
            u = res.residual_inputs[k, n:]
            np.testing.assert_allclose(
                res.residual_targets[k], plant.true_residual(x, u), atol=1e-14
            )

    def test_measured_targets_differ_only_with_noise(self):
        plant, gains, task, model = attitude_setup()
        clean = rollout(
            plant, gains, model, task, RolloutConfig(mode="experiment", seed=3)
        )
        np.testing.assert_array_equal(clean.measured_targets, clean.residual_targets)
        noisy = rollout(
            plant,
            gains,
            model,
            task,
            RolloutConfig(mode="experiment", seed=3, noise_std=1e-3),
        )
        assert not np.array_equal(noisy.measured_targets, noisy.residual_targets)
        np.testing.assert_array_equal(noisy.residual_targets, clean.residual_targets)


class TestDivergence:
    def test_unstable_gain_flags_and_truncates(self):
        plant = builtin("oadi", seed=3)
        # destabilizing proportional gain on a double integrator
        from infotraj.control import ControllerGains

        gains = ControllerGains(30.0 * np.eye(2), np.zeros((2, 2)))
        task = builtin_task(plant, "figure8", horizon=400)
        ref = Trajectory(
            task.states + 3.0, task.inputs, task.sampling_time
        )
        res = rollout(
            plant,
            gains,
            None,
            ref,
            RolloutConfig(mode="experiment", initial_state=task.states[0]),
        )
        if res.diverged:
            assert res.steps < 400
            assert res.trajectory.states.shape[0] == res.steps + 1
            report = tracking_error(res)
            assert report.squared == np.inf
            assert report.diverged


class TestTrackingError:
    def make_result(self, ref_states, states, T=0.01):
        n = ref_states.shape[1]
        N = ref_states.shape[0] - 1
        traj = Trajectory(states, np.zeros((N + 1, 1)), T)
        ref = Trajectory(ref_states, np.zeros((N + 1, 1)), T)
        return RolloutResult(
            trajectory=traj,
            reference=ref,
            errors=np.linalg.norm(ref_states - states, axis=1),
            diverged=False,
            steps=N,
            residual_inputs=np.zeros((N, n + 1)),
            residual_targets=np.zeros((N, n)),
            measured_targets=np.zeros((N, n)),
            mode="evaluation",
            seed=0,
        )

    def test_perfect_tracking_scores_zero(self):
        ref = np.random.default_rng(0).normal(size=(21, 2))
        report = tracking_error(self.make_result(ref, ref.copy()))
        assert report.squared == 0.0
        assert report.abs_mean == 0.0

    def test_constant_offset_closed_form(self):
        N = 50
        delta = np.array([0.3, -0.4])
        ref = np.zeros((N + 1, 2))
        states = ref.copy()
        states[1:] += delta
        report = tracking_error(self.make_result(ref, states))
        assert report.squared == pytest.approx(N * float(delta @ delta), rel=1e-12)
        np.testing.assert_allclose(report.abs_axes, np.abs(delta), atol=1e-12)
        assert report.abs_mean == pytest.approx(np.abs(delta).mean(), rel=1e-12)

    def test_matches_direct_recomputation(self):
        rng = np.random.default_rng(9)
        ref = rng.normal(size=(31, 3))
        states = ref + rng.normal(size=(31, 3)) * 0.1
        states[0] = ref[0]
        report = tracking_error(self.make_result(ref, states))
        diff = ref[1:] - states[1:]
        assert report.squared == pytest.approx(np.sum(diff**2), rel=1e-12)
        np.testing.assert_allclose(
            report.abs_axes, np.mean(np.abs(diff), axis=0), atol=1e-14
        )


class TestBeliefDispersion:
    def test_spread_grows_with_prior_variance(self):
        plant, gains, task, _ = attitude_setup(horizon=100)
        idx = default_feature_indices(plant)

        def spread(sf2):
            kern = Kernel(sf2, np.full(3, 1.0), 1e-10)
            model = ResidualModel.create([kern] * 3, feature_indices=idx)
            finals = []
            for seed in range(8):
                res = rollout(
                    plant.nominal(),
                    gains,
                    model,
                    task,
                    RolloutConfig(mode="belief", seed=seed),
                )
                finals.append(res.trajectory.states[-1])
            return float(np.std(np.array(finals), axis=0).sum())

        assert spread(4e-6) > spread(1e-6)


class TestBeliefSampling:
    def test_draw_belief_sample_deterministic(self):
        plant, gains, task, model = attitude_setup(horizon=60)
        g1 = draw_belief_sample(plant.nominal(), gains, model, task, seed=3)
        g2 = draw_belief_sample(plant.nominal(), gains, model, task, seed=3)
        q = np.array([0.1, -0.2, 0.05])
        np.testing.assert_array_equal(g1(q), g2(q))


class TestExport:
    def test_csv_schema_and_sidecar(self, tmp_path):
        plant, gains, task, model = attitude_setup(horizon=40)
        res = rollout(
            plant, gains, model, task, RolloutConfig(mode="experiment", seed=1)
        )
        path = tmp_path / "roll.csv"
        export_rollout_csv(res, path, extra_meta={"tag": "unit"})
        lines = path.read_text().splitlines()
        header = lines[0].split(",")
        assert header == [
            "k",
            "x_0",
            "x_1",
            "x_2",
            "u_0",
            "u_1",
            "u_2",
            "xref_0",
            "xref_1",
            "xref_2",
            "err",
        ]
        assert len(lines) == 42
        sidecar = (tmp_path / "roll.kv").read_text()
        assert "mode = experiment" in sidecar
        assert "tag = unit" in sidecar
