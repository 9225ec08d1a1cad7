"""Built-in oracle checks, runnable from the CLI.

A fast subset of the acceptance suite: every check compares library
output against an independent computation (dense solves, closed forms,
brute-force predicates) and prints one PASS/FAIL line.
"""

from __future__ import annotations

import numpy as np

from . import systems
from .control import default_gains, verify_assumption1
from .gp import Dataset, Kernel, ResidualModel
from .region import (
    estimate_region,
    monte_carlo_integral,
    region_from_points,
    uniform_box_samples,
)
from .trajgen import deviation_sequence, sample_candidates


def _dense_oracle(X, y, sf2, ls, sn2, q):
    def k(a, b):
        d = (a - b) / ls
        return sf2 * np.exp(-0.5 * d @ d)

    n = X.shape[0]
    K = np.array([[k(X[i], X[j]) for j in range(n)] for i in range(n)])
    K += sn2 * np.eye(n)
    ks = np.array([k(q, X[i]) for i in range(n)])
    sol = np.linalg.solve(K, y)
    mean = ks @ sol
    var = sf2 + sn2 - ks @ np.linalg.solve(K, ks)
    return mean, var


def check_gp_oracle(n_instances=50, tol=1e-10, seed=0) -> bool:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n_instances):
        n = int(rng.integers(1, 21))
        d = int(rng.integers(1, 9))
        X = rng.normal(0, 1, size=(n, d))
        y = rng.normal(0, 1, size=n)
        sf2 = float(rng.uniform(0.5, 3.0))
        ls = rng.uniform(0.5, 2.0, size=d)
        sn2 = float(rng.uniform(1e-4, 0.1))
        q = rng.normal(0, 1, size=d)
        model = ResidualModel.create([Kernel(sf2, ls, sn2)]).condition(
            [Dataset(X, y)]
        )
        post = model.posterior(q)
        mean_o, var_o = _dense_oracle(X, y, sf2, ls, sn2, q)
        worst = max(
            worst, abs(post.mean[0] - mean_o), abs(post.variance[0] - var_o)
        )
    return worst < tol


def check_variance_monotonicity(n_instances=50, tol=1e-12, seed=1) -> bool:
    rng = np.random.default_rng(seed)
    for _ in range(n_instances):
        d = int(rng.integers(1, 5))
        n = int(rng.integers(0, 12))
        kern = Kernel(
            float(rng.uniform(0.5, 2.0)),
            rng.uniform(0.5, 2.0, size=d),
            float(rng.uniform(1e-4, 0.1)),
        )
        model = ResidualModel.create([kern])
        if n:
            model = model.condition(
                [Dataset(rng.normal(0, 1, (n, d)), rng.normal(0, 1, n))]
            )
        q = rng.normal(0, 1, size=d)
        before = model.posterior(q).variance[0]
        grown = model.condition(
            [Dataset(rng.normal(0, 1, (1, d)), rng.normal(0, 1, 1))]
        )
        after = grown.posterior(q).variance[0]
        if after > before + tol:
            return False
    return True


def check_assumption1() -> bool:
    plant = systems.builtin("oadi", seed=3)
    gains = default_gains(plant)
    task = systems.builtin_task(plant, "figure8", horizon=500)
    perfect = verify_assumption1(plant, gains, task)
    if perfect.max_error >= 1e-6 or perfect.diverged:
        return False
    from .simulate import RolloutConfig, rollout

    bare = rollout(
        plant, gains, None, task, RolloutConfig(mode="experiment", seed=0)
    )
    return float(bare.errors[-1]) > 0.01


def check_mc_integration(samples=100_000, rel_tol=0.02, seed=2) -> bool:
    from scipy.special import erf

    bounds = np.array([[-1.0, 2.0], [0.0, 3.0], [-2.0, 1.0]])
    c = np.array([0.5, 1.0, -0.5])
    s = np.array([0.8, 1.2, 0.6])
    rng = np.random.default_rng(seed)
    pts = uniform_box_samples(bounds, samples, rng)
    values = np.exp(-0.5 * np.sum(((pts - c) / s) ** 2, axis=1))
    volume = float(np.prod(bounds[:, 1] - bounds[:, 0]))
    estimate = monte_carlo_integral(values, volume)
    exact = 1.0
    for j in range(3):
        a, b = bounds[j]
        exact *= (
            s[j]
            * np.sqrt(np.pi / 2.0)
            * (erf((b - c[j]) / (np.sqrt(2) * s[j])) - erf((a - c[j]) / (np.sqrt(2) * s[j])))
        )
    return abs(estimate - exact) / exact < rel_tol


def check_region_soundness(n_instances=5, seed=3) -> bool:
    plant = systems.builtin("attitude3", seed=0)
    gains = default_gains(plant)
    task = systems.builtin_task(plant, "figure8", horizon=150)
    kern = Kernel(1e-4, np.full(3, 1.0), 1e-8)
    model = ResidualModel.create(
        [kern] * 3, feature_indices=systems.default_feature_indices(plant)
    )
    for inst in range(n_instances):
        regio = estimate_region(
            plant.nominal(),
            gains,
            model,
            task,
            n_rollouts=2,
            n_samples=512,
            seed=seed + inst,
        )
        if not regio.membership_ok():
            return False
    return True


def check_band_limit(n_candidates=30, seed=4) -> bool:
    horizon, dt, f_max = 200, 0.01, 2.0
    cands = sample_candidates(
        n_candidates, 3, horizon, dt, amplitude_caps=0.5, f_max=f_max, seed=seed
    )
    freqs = np.fft.rfftfreq(horizon, dt)
    above = freqs > f_max + 1e-9
    for params in cands:
        delta = deviation_sequence(params, horizon, dt)[:horizon]
        spec = np.abs(np.fft.rfft(delta, axis=0)) ** 2
        total = spec.sum()
        if total > 0 and spec[above].sum() / total >= 0.01:
            return False
    return True


CHECKS = (
    ("gp posterior vs dense oracle", check_gp_oracle),
    ("variance monotone under conditioning", check_variance_monotonicity),
    ("controller tracks with true residual", check_assumption1),
    ("monte-carlo integral vs closed form", check_mc_integration),
    ("region membership predicate", check_region_soundness),
    ("deviation band limit", check_band_limit),
)


def run_all(quick: bool = True) -> int:
    failures = 0
    for name, fn in CHECKS:
        ok = fn()
        print(f"{'PASS' if ok else 'FAIL'}  {name}")
        if not ok:
            failures += 1
    return failures
