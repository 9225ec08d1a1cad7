"""Task-relevant region estimation and the informative cost.

The region is a finite point cloud: uniform samples of the state-input
box kept when they fall within a weighted distance epsilon of any point
visited by belief rollouts of the task. The informative cost of a
candidate is the sum of posterior variance traces over an evaluation
set drawn from that region, after hypothetically conditioning the model
on the candidate's simulated data. Volume and sample-count factors are
constant across candidates and dropped from the cost; the region volume
estimate is kept as a diagnostic.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import csv

import numpy as np
from scipy.spatial import cKDTree

from . import kvformat
from .gp import kmedoids_indices
from .simulate import RolloutConfig, rollout


class EmptyRegionError(ValueError):
    """No samples within epsilon of the task rollouts; raise epsilon or
    sample more densely."""


@dataclass(frozen=True)
class RegionEstimate:
    points: np.ndarray
    epsilon: float
    norm_weights: np.ndarray
    source_points: np.ndarray
    volume: float
    n_sampled: int
    seed: int

    def __len__(self) -> int:
        return self.points.shape[0]

    def membership_ok(self) -> bool:
        """Re-check every retained point against the source rollouts
        (brute force, independent of the KD-tree retrieval path)."""
        w = self.norm_weights
        for z in self.points:
            d = np.linalg.norm((self.source_points - z) * w, axis=1)
            if not np.any(d <= self.epsilon + 1e-12):
                return False
        return True

    def save_csv(self, path) -> None:
        path = Path(path)
        d = self.points.shape[1]
        with open(path, "w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow([f"z_{j}" for j in range(d)])
            for row in self.points:
                writer.writerow([repr(float(v)) for v in row])
        kvformat.dump_kv(
            path.with_suffix(".kv"),
            {
                "epsilon": self.epsilon,
                "seed": self.seed,
                "n_sampled": self.n_sampled,
                "n_retained": len(self),
                "volume": self.volume,
                "norm_weights": self.norm_weights,
            },
        )


def uniform_box_samples(bounds, count: int, rng) -> np.ndarray:
    bounds = np.asarray(bounds, dtype=np.float64)
    lo, hi = bounds[:, 0], bounds[:, 1]
    return lo + (hi - lo) * rng.random((count, bounds.shape[0]))


def box_volume(bounds) -> float:
    bounds = np.asarray(bounds, dtype=np.float64)
    return float(np.prod(bounds[:, 1] - bounds[:, 0]))


def default_norm_weights(pool: np.ndarray, bounds) -> np.ndarray:
    """Per-dimension weights 1/range so state and input components are
    comparable; floored by a fraction of the box width."""
    bounds = np.asarray(bounds, dtype=np.float64)
    span = pool.max(axis=0) - pool.min(axis=0)
    floor = 1e-3 * (bounds[:, 1] - bounds[:, 0])
    floor[floor <= 0.0] = 1.0
    return 1.0 / np.maximum(span, floor)


def region_from_points(
    samples: np.ndarray,
    rollout_points: np.ndarray,
    epsilon: float,
    norm_weights: np.ndarray,
    total_volume: float,
    seed: int = 0,
) -> RegionEstimate:
    """Membership filter: keep samples within weighted epsilon of any
    rollout point."""
    if epsilon < 0.0:
        raise ValueError("epsilon must be >= 0")
    w = np.asarray(norm_weights, dtype=np.float64)
    tree = cKDTree(rollout_points * w)
    dist, _ = tree.query(samples * w, k=1)
    keep = dist <= epsilon
    retained = samples[keep]
    if retained.shape[0] == 0:
        raise EmptyRegionError(
            f"epsilon = {epsilon:g} retained none of {samples.shape[0]} samples"
        )
    volume = total_volume * retained.shape[0] / samples.shape[0]
    return RegionEstimate(
        points=retained,
        epsilon=float(epsilon),
        norm_weights=w,
        source_points=np.asarray(rollout_points, dtype=np.float64),
        volume=volume,
        n_sampled=samples.shape[0],
        seed=seed,
    )


def estimate_region(
    plant,
    gains,
    model,
    task,
    n_rollouts: int = 3,
    n_samples: int = 4096,
    epsilon: float = None,
    seed: int = 0,
    norm_weights=None,
    retention_floor: float = 0.05,
    estimation_noise_std=None,
) -> RegionEstimate:
    """Estimate the task-relevant set from belief rollouts of the task.

    Only the nominal plant surface is used; the sealed plant is never
    stepped. With `epsilon=None` the threshold defaults to the average
    weighted input-space distance between the inputs commanded under the
    mean model and the ones realized under sampled residuals, floored so
    that at least `retention_floor` of the uniform samples survive (a
    confident model would otherwise shrink the region to nothing).
    """
    if n_rollouts < 1:
        raise ValueError("need at least one task rollout")
    n = plant.state_dim
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x5EED]))
    bounds = np.vstack([plant.state_bounds, plant.input_bounds])

    mean_fn = lambda f: model.mean_at(f)  # noqa: E731
    probe = rollout(
        plant,
        gains,
        model,
        task,
        RolloutConfig(mode="belief", seed=seed, residual_sample=mean_fn),
    )
    feats = model.features(probe.residual_inputs)
    stride_idx = np.arange(0, feats.shape[0], 10)
    if stride_idx[-1] != feats.shape[0] - 1:
        stride_idx = np.append(stride_idx, feats.shape[0] - 1)
    anchors = feats[stride_idx]
    rollouts = []
    for j in range(n_rollouts):
        sample = model.sample_function(anchors, int(seed) * 1000003 + j)
        res = rollout(
            plant,
            gains,
            model,
            task,
            RolloutConfig(
                mode="belief",
                seed=int(seed) * 1000003 + j,
                residual_sample=sample,
                estimation_noise_std=estimation_noise_std,
            ),
        )
        rollouts.append(res)
    pool = np.vstack([r.residual_inputs for r in rollouts])
    if norm_weights is None:
        norm_weights = default_norm_weights(pool, bounds)
    w = np.asarray(norm_weights, dtype=np.float64)

    derived = epsilon is None
    if derived:
        w_u = w[n:]
        dists = []
        for r in rollouts:
            k = min(r.steps, probe.steps)
            du = (r.residual_inputs[:k, n:] - probe.residual_inputs[:k, n:]) * w_u
            dists.append(np.linalg.norm(du, axis=1))
        epsilon = float(np.mean(np.concatenate(dists)))

    # sample the reachable envelope (rollout extent padded by a few
    # epsilon) instead of the full box: a uniform draw over the whole
    # state-input box would almost never land inside the tube
    pad = 3.0 * max(epsilon, 1e-12) / w
    lo = np.maximum(bounds[:, 0], pool.min(axis=0) - pad)
    hi = np.minimum(bounds[:, 1], pool.max(axis=0) + pad)
    sample_box = np.column_stack([lo, hi])
    samples = uniform_box_samples(sample_box, n_samples, rng)

    if derived and 0.0 < retention_floor < 1.0:
        # a confident model can drive the heuristic to zero; keep enough
        # of the sample cloud to integrate over
        tree = cKDTree(pool * w)
        nearest, _ = tree.query(samples * w, k=1)
        floor_eps = float(np.quantile(nearest, retention_floor))
        epsilon = max(epsilon, floor_eps)

    return region_from_points(
        samples, pool, epsilon, w, box_volume(sample_box), seed=seed
    )


def sample_evaluation_set(region: RegionEstimate, count: int, seed: int) -> np.ndarray:
    """Uniform-with-replacement draw from the region's point cloud."""
    if count < 1:
        raise ValueError("count must be >= 1")
    rng = np.random.default_rng(seed)
    idx = rng.integers(0, len(region), size=count)
    return region.points[idx]


@dataclass(frozen=True)
class InformativeCost:
    value: float
    per_point: np.ndarray
    evaluation_points: np.ndarray


def informative_cost(
    model,
    simulated_inputs,
    simulated_targets,
    eval_points,
    subsample_budget: int = 40,
    seed: int = 0,
) -> InformativeCost:
    """Posterior-variance sum over the evaluation set after conditioning
    a copy of the model on a candidate's simulated data.

    `simulated_inputs` are full z rows; targets are per-channel residual
    observations from the belief rollout. The base model is untouched.
    """
    eval_points = np.asarray(eval_points, dtype=np.float64)
    Z = np.asarray(simulated_inputs, dtype=np.float64)
    Y = np.asarray(simulated_targets, dtype=np.float64)
    if Z.shape[0] != Y.shape[0]:
        raise ValueError("simulated inputs/targets length mismatch")
    if Z.shape[0] > 0:
        feats = model.features(Z)
        if subsample_budget and Z.shape[0] > subsample_budget:
            idx = kmedoids_indices(feats, subsample_budget, seed=seed)
            feats = feats[idx]
            Y = Y[idx]
        conditioned = model.condition_arrays(feats, Y)
    else:
        conditioned = model
    per_point = conditioned.variance_trace(model.features(eval_points))
    return InformativeCost(float(per_point.sum()), per_point, eval_points)


def monte_carlo_integral(values, volume: float) -> float:
    """(V/S) * sum(values): the Monte-Carlo integral behind the cost."""
    values = np.asarray(values, dtype=np.float64)
    return float(volume * values.mean())
