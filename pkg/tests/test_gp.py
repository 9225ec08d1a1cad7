"""GP layer: oracle equivalence, conditioning properties, sampling moments,
hyperparameter fitting, and k-medoids subsampling."""

import math
from itertools import combinations

import numpy as np
import pytest

from infotraj.gp import (
    Dataset,
    FactorizationError,
    Kernel,
    KernelBounds,
    ResidualModel,
    fit_hyperparameters,
    kernel_eval,
    kmedoids_cost,
    kmedoids_indices,
    kmedoids_subsample,
    load_datasets_csv,
    log_marginal_likelihood,
    save_datasets_csv,
)


def dense_posterior(X, y, sf2, ls, sn2, q):
    """Independent dense-solve oracle for a single-channel GP posterior."""

    def k(a, b):
        d = (a - b) / ls
        return sf2 * math.exp(-0.5 * float(d @ d))

    n = X.shape[0]
    K = np.array([[k(X[i], X[j]) for j in range(n)] for i in range(n)])
    K = K + sn2 * np.eye(n)
    ks = np.array([k(q, X[i]) for i in range(n)])
    mean = ks @ np.linalg.solve(K, y)
    var = sf2 + sn2 - ks @ np.linalg.solve(K, ks)
    return float(mean), float(var)


def single_channel_model(X, y, kernel):
    return ResidualModel.create([kernel]).condition([Dataset(X, y)])


class TestKernel:
    def test_zero_distance_gives_signal_variance(self):
        k = Kernel(2.5, np.array([1.0, 0.5]), 0.1)
        assert kernel_eval(k, [0.3, -1.0], [0.3, -1.0]) == pytest.approx(2.5)

    def test_far_apart_is_numerically_zero(self):
        k = Kernel(1.0, np.array([1.0]), 0.0)
        assert kernel_eval(k, [0.0], [100.0]) < 1e-300

    def test_hand_evaluated_closed_form(self):
        k = Kernel(2.0, np.array([1.0, 2.0]), 0.0)
        val = kernel_eval(k, [0.0, 0.0], [1.0, 2.0])
        assert val == pytest.approx(2.0 * math.exp(-1.0), abs=1e-12)

    def test_symmetry(self):
        rng = np.random.default_rng(0)
        k = Kernel(1.3, rng.uniform(0.5, 2.0, size=4), 0.0)
        a, b = rng.normal(size=4), rng.normal(size=4)
        assert kernel_eval(k, a, b) == pytest.approx(kernel_eval(k, b, a), abs=0)

    def test_dimension_mismatch_raises(self):
        k = Kernel(1.0, np.ones(2), 0.0)
        with pytest.raises(ValueError):
            kernel_eval(k, [0.0], [1.0, 2.0])

    def test_invalid_parameters_raise(self):
        with pytest.raises(ValueError):
            Kernel(0.0, np.ones(1), 0.0)
        with pytest.raises(ValueError):
            Kernel(1.0, np.array([1.0, -1.0]), 0.0)
        with pytest.raises(ValueError):
            Kernel(1.0, np.ones(1), -0.1)

    def test_kv_round_trip(self, tmp_path):
        k = Kernel(1.234567891234, np.array([0.5, 2.25]), 1e-6)
        k.save(tmp_path / "kernel.kv")
        k2 = Kernel.load(tmp_path / "kernel.kv")
        assert k2.signal_variance == k.signal_variance
        assert np.array_equal(k2.lengthscales, k.lengthscales)
        assert k2.noise_variance == k.noise_variance


class TestPosterior:
    def test_empty_dataset_prior(self):
        model = ResidualModel.create([Kernel(1.0, np.ones(2), 0.01)])
        post = model.posterior(np.zeros(2))
        assert post.mean[0] == 0.0
        assert post.variance[0] == pytest.approx(1.01)

    def test_noise_free_interpolation(self):
        x0 = np.array([[0.7]])
        model = single_channel_model(x0, np.array([2.5]), Kernel(1.0, np.ones(1), 0.0))
        post = model.posterior(x0[0])
        assert post.mean[0] == pytest.approx(2.5, abs=1e-8)
        assert post.variance[0] == pytest.approx(0.0, abs=1e-8)

    def test_matches_dense_oracle(self):
        rng = np.random.default_rng(42)
        worst = 0.0
        for _ in range(200):
            n = int(rng.integers(2, 21))
            d = int(rng.integers(1, 9))
            X = rng.normal(0, 1, size=(n, d))
            y = rng.normal(0, 1, size=n)
            sf2 = float(rng.uniform(0.5, 3.0))
            ls = rng.uniform(0.5, 2.0, size=d)
            sn2 = float(rng.uniform(1e-4, 0.1))
            q = rng.normal(0, 1, size=d)
            model = single_channel_model(X, y, Kernel(sf2, ls, sn2))
            post = model.posterior(q)
            mean_o, var_o = dense_posterior(X, y, sf2, ls, sn2, q)
            worst = max(worst, abs(post.mean[0] - mean_o), abs(post.variance[0] - var_o))
        assert worst < 1e-10

    def test_batch_matches_single(self):
        rng = np.random.default_rng(7)
        X = rng.normal(size=(12, 3))
        y = rng.normal(size=12)
        model = single_channel_model(X, y, Kernel(1.5, np.full(3, 0.8), 0.01))
        Q = rng.normal(size=(9, 3))
        batch = model.posterior_batch(Q)
        for i in range(9):
            one = model.posterior(Q[i])
            np.testing.assert_allclose(batch.mean[i], one.mean, atol=1e-10)
            np.testing.assert_allclose(batch.variance[i], one.variance, atol=1e-10)

    def test_variance_bounded_by_prior(self):
        rng = np.random.default_rng(3)
        X = rng.normal(size=(15, 2))
        y = rng.normal(size=15)
        model = single_channel_model(X, y, Kernel(2.0, np.ones(2), 0.05))
        post = model.posterior_batch(rng.normal(size=(50, 2)))
        assert np.all(post.variance >= 0.0)
        assert np.all(post.variance <= 2.05 + 1e-12)

    def test_query_dimension_mismatch(self):
        model = ResidualModel.create([Kernel(1.0, np.ones(3), 0.0)])
        with pytest.raises(ValueError):
            model.posterior(np.zeros(2))


class TestConditioning:
    def make_model(self, rng, n=6, d=2):
        X = rng.normal(size=(n, d))
        y = rng.normal(size=n)
        return single_channel_model(X, y, Kernel(1.0, np.full(d, 0.9), 0.01))

    def test_condition_with_nothing_is_identity(self):
        rng = np.random.default_rng(11)
        model = self.make_model(rng)
        same = model.condition([Dataset.empty(2)])
        Q = rng.normal(size=(10, 2))
        np.testing.assert_allclose(
            same.posterior_batch(Q).mean, model.posterior_batch(Q).mean, atol=0
        )
        np.testing.assert_allclose(
            same.posterior_batch(Q).variance,
            model.posterior_batch(Q).variance,
            atol=0,
        )

    def test_variance_never_increases(self):
        rng = np.random.default_rng(12)
        for trial in range(100):
            d = int(rng.integers(1, 4))
            n = int(rng.integers(0, 10))
            kern = Kernel(
                float(rng.uniform(0.5, 2.0)),
                rng.uniform(0.5, 2.0, size=d),
                float(rng.uniform(1e-4, 0.1)),
            )
            model = ResidualModel.create([kern])
            if n:
                model = model.condition(
                    [Dataset(rng.normal(size=(n, d)), rng.normal(size=n))]
                )
            q = rng.normal(size=d)
            before = model.posterior(q).variance[0]
            after = (
                model.condition(
                    [Dataset(rng.normal(size=(1, d)), rng.normal(size=1))]
                )
                .posterior(q)
                .variance[0]
            )
            assert after <= before + 1e-12

    def test_two_batches_equal_one_batch(self):
        rng = np.random.default_rng(13)
        X1, y1 = rng.normal(size=(5, 2)), rng.normal(size=5)
        X2, y2 = rng.normal(size=(4, 2)), rng.normal(size=4)
        kern = Kernel(1.2, np.full(2, 1.1), 0.02)
        base = ResidualModel.create([kern])
        two = base.condition([Dataset(X1, y1)]).condition([Dataset(X2, y2)])
        one = base.condition([Dataset(np.vstack([X1, X2]), np.concatenate([y1, y2]))])
        Q = rng.normal(size=(10, 2))
        np.testing.assert_allclose(
            two.posterior_batch(Q).mean, one.posterior_batch(Q).mean, atol=1e-8
        )
        np.testing.assert_allclose(
            two.posterior_batch(Q).variance,
            one.posterior_batch(Q).variance,
            atol=1e-8,
        )

    def test_original_model_untouched(self):
        rng = np.random.default_rng(14)
        model = self.make_model(rng)
        q = rng.normal(size=2)
        before = model.posterior(q)
        model.condition([Dataset(rng.normal(size=(3, 2)), rng.normal(size=3))])
        after = model.posterior(q)
        assert before.mean[0] == after.mean[0]
        assert before.variance[0] == after.variance[0]

    def test_mean_at_agrees_with_posterior(self):
        rng = np.random.default_rng(15)
        X = rng.normal(size=(8, 3))
        Y = rng.normal(size=(8, 2))
        kerns = [Kernel(1.0, np.full(3, 0.7), 0.01), Kernel(0.5, np.full(3, 1.3), 0.02)]
        model = ResidualModel.create(kerns).condition_arrays(X, Y)
        q = rng.normal(size=3)
        np.testing.assert_allclose(model.mean_at(q), model.posterior(q).mean, atol=1e-12)


class TestSampleFunction:
    def test_zero_variance_anchor_reproduces_target(self):
        x0 = np.array([[0.4]])
        model = single_channel_model(x0, np.array([1.7]), Kernel(1.0, np.ones(1), 0.0))
        for seed in range(5):
            g = model.sample_function(x0, seed=seed)
            assert g(x0[0])[0] == pytest.approx(1.7, abs=1e-6)

    def test_moments_match_posterior(self):
        rng = np.random.default_rng(21)
        X = rng.normal(size=(6, 2))
        y = rng.normal(size=6)
        model = single_channel_model(X, y, Kernel(1.0, np.full(2, 1.0), 0.05))
        zstar = np.array([0.3, -0.2])
        anchors = np.vstack([zstar, rng.normal(size=(4, 2))])
        draws = np.array(
            [model.sample_function(anchors, seed=s)(zstar)[0] for s in range(2000)]
        )
        post = model.posterior(zstar)
        stderr = math.sqrt(post.variance[0] / 2000)
        assert abs(draws.mean() - post.mean[0]) < 4 * stderr
        assert abs(draws.var() - post.variance[0]) < 0.2 * post.variance[0]

    def test_same_seed_same_function(self):
        rng = np.random.default_rng(22)
        model = single_channel_model(
            rng.normal(size=(5, 2)), rng.normal(size=5), Kernel(1.0, np.ones(2), 0.01)
        )
        anchors = rng.normal(size=(6, 2))
        g1 = model.sample_function(anchors, seed=9)
        g2 = model.sample_function(anchors, seed=9)
        for _ in range(10):
            q = rng.normal(size=2)
            np.testing.assert_array_equal(g1(q), g2(q))

    def test_interpolation_exact_at_anchors(self):
        rng = np.random.default_rng(23)
        model = ResidualModel.create([Kernel(1.0, np.ones(2), 0.0)])
        anchors = rng.normal(size=(5, 2))
        g = model.sample_function(anchors, seed=1)
        for i in range(5):
            np.testing.assert_allclose(g(anchors[i]), g.values[i], atol=0)

    def test_pointwise_scheme_deterministic_per_sequence(self):
        rng = np.random.default_rng(24)
        model = single_channel_model(
            rng.normal(size=(4, 1)), rng.normal(size=4), Kernel(1.0, np.ones(1), 0.1)
        )
        qs = rng.normal(size=(8, 1))
        a = [model.sample_function(None, seed=3, scheme="pointwise")(q) for q in qs]
        b = [model.sample_function(None, seed=3, scheme="pointwise")(q) for q in qs]
        np.testing.assert_array_equal(np.array(a), np.array(b))

    def test_empty_anchors_rejected(self):
        model = ResidualModel.create([Kernel(1.0, np.ones(2), 0.0)])
        with pytest.raises(ValueError):
            model.sample_function(np.zeros((0, 2)), seed=0)


class TestFitHyperparameters:
    def test_recovers_lengthscale_within_factor_two(self):
        rng = np.random.default_rng(31)
        true = Kernel(1.0, np.array([0.5]), 1e-4)
        X = rng.uniform(-2, 2, size=(60, 1))
        model = ResidualModel.create([true])
        g = model.sample_function(X, seed=5)
        y = np.array([g(x)[0] for x in X])
        init = Kernel(0.5, np.array([2.0]), 1e-3)
        fitted = fit_hyperparameters(Dataset(X, y), init, seed=0)
        assert 0.25 < fitted.lengthscales[0] < 1.0

    def test_never_below_init_likelihood(self):
        rng = np.random.default_rng(32)
        ds = Dataset(rng.normal(size=(20, 2)), rng.normal(size=20))
        init = Kernel(1.0, np.ones(2), 0.1)
        fitted = fit_hyperparameters(ds, init, restarts=3, seed=1)
        assert (
            log_marginal_likelihood(ds, fitted)
            >= log_marginal_likelihood(ds, init) - 1e-9
        )

    def test_duplicate_points_with_noise_floor(self):
        X = np.zeros((6, 2))
        y = np.array([1.0, 1.1, 0.9, 1.05, 0.95, 1.0])
        bounds = KernelBounds(noise_variance=(1e-6, 10.0))
        fitted = fit_hyperparameters(
            Dataset(X, y), Kernel(1.0, np.ones(2), 1e-3), bounds=bounds, seed=2
        )
        assert fitted.noise_variance >= 1e-6

    def test_deterministic_under_seed(self):
        rng = np.random.default_rng(33)
        ds = Dataset(rng.normal(size=(15, 1)), rng.normal(size=15))
        init = Kernel(1.0, np.ones(1), 0.05)
        a = fit_hyperparameters(ds, init, seed=7)
        b = fit_hyperparameters(ds, init, seed=7)
        assert a.signal_variance == b.signal_variance
        assert np.array_equal(a.lengthscales, b.lengthscales)
        assert a.noise_variance == b.noise_variance

    def test_too_few_points_rejected(self):
        with pytest.raises(ValueError):
            fit_hyperparameters(
                Dataset(np.zeros((1, 1)), np.zeros(1)), Kernel(1.0, np.ones(1), 0.0)
            )


class TestKMedoids:
    def test_full_selection_returns_everything(self):
        rng = np.random.default_rng(41)
        ds = Dataset(rng.normal(size=(7, 2)), rng.normal(size=7))
        out = kmedoids_subsample(ds, 7, seed=0)
        assert sorted(map(tuple, out.inputs)) == sorted(map(tuple, ds.inputs))

    def test_two_clusters_one_medoid_each(self):
        rng = np.random.default_rng(42)
        A = rng.normal(0.0, 0.3, size=(10, 2))
        B = rng.normal(8.0, 0.3, size=(10, 2))
        idx = kmedoids_indices(np.vstack([A, B]), 2, seed=0)
        assert (idx < 10).sum() == 1

    def test_near_exhaustive_on_small_instance(self):
        rng = np.random.default_rng(43)
        X = rng.normal(size=(12, 3))
        best = min(kmedoids_cost(X, c) for c in combinations(range(12), 3))
        ours = kmedoids_cost(X, kmedoids_indices(X, 3, seed=0))
        assert ours <= 1.1 * best

    def test_output_subset_of_input(self):
        rng = np.random.default_rng(44)
        ds = Dataset(rng.normal(size=(30, 2)), rng.normal(size=30))
        out = kmedoids_subsample(ds, 8, seed=1)
        rows = {tuple(r) for r in ds.inputs}
        assert all(tuple(r) in rows for r in out.inputs)
        assert len(out) == 8

    def test_k_zero_rejected(self):
        ds = Dataset(np.zeros((3, 1)), np.zeros(3))
        with pytest.raises(ValueError):
            kmedoids_subsample(ds, 0)

    def test_k_above_size_rejected(self):
        ds = Dataset(np.zeros((3, 1)), np.zeros(3))
        with pytest.raises(ValueError):
            kmedoids_subsample(ds, 4)

    def test_targets_follow_inputs(self):
        rng = np.random.default_rng(45)
        X = rng.normal(size=(20, 1))
        y = X[:, 0] * 10.0
        out = kmedoids_subsample(Dataset(X, y), 5, seed=0)
        np.testing.assert_allclose(out.targets, out.inputs[:, 0] * 10.0)


class TestPersistence:
    def test_dataset_csv_round_trip(self, tmp_path):
        rng = np.random.default_rng(51)
        datasets = [
            Dataset(rng.normal(size=(6, 3)), rng.normal(size=6), np.arange(6)),
            Dataset(rng.normal(size=(6, 3)), rng.normal(size=6), np.zeros(6)),
        ]
        path = tmp_path / "data.csv"
        save_datasets_csv(path, datasets)
        loaded = load_datasets_csv(path)
        assert len(loaded) == 2
        for a, b in zip(datasets, loaded):
            np.testing.assert_array_equal(a.inputs, b.inputs)
            np.testing.assert_array_equal(a.targets, b.targets)
            np.testing.assert_array_equal(a.trajectory_ids, b.trajectory_ids)

    def test_model_snapshot_round_trip(self, tmp_path):
        rng = np.random.default_rng(52)
        X = rng.normal(size=(10, 2))
        Y = rng.normal(size=(10, 3))
        kerns = [Kernel(1.0 + c, np.full(2, 0.5 + c), 0.01) for c in range(3)]
        model = ResidualModel.create(kerns, feature_indices=(2, 3)).condition_arrays(
            X, Y
        )
        model.save(tmp_path / "snap")
        loaded = ResidualModel.load(tmp_path / "snap")
        assert loaded.feature_indices == (2, 3)
        Q = rng.normal(size=(5, 2))
        np.testing.assert_allclose(
            loaded.posterior_batch(Q).mean, model.posterior_batch(Q).mean, atol=1e-12
        )
        np.testing.assert_allclose(
            loaded.posterior_batch(Q).variance,
            model.posterior_batch(Q).variance,
            atol=1e-12,
        )
