"""Closed-loop rollout engine.

Three modes share one loop:

* ``experiment``  - steps the true plant (sealed residual); the only mode
  that consumes experiment budget. Optionally adds seeded Gaussian noise
  to the collected residual observations.
* ``belief``      - steps the nominal model plus a residual function
  sampled from the learned model; used inside trajectory selection and
  never touches the true plant.
* ``evaluation``  - same as experiment but marks a scoring run.

The controller always compensates with the model posterior mean (or an
explicit override), regardless of mode.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import kvformat
from .control import CompensationSolve, Controller
from .systems import Trajectory

MODES = ("experiment", "belief", "evaluation")


@dataclass(frozen=True)
class RolloutConfig:
    """Rollout settings.

    `noise_std` adds seeded Gaussian noise to the collected residual
    observations (IMU-style measurement noise). `estimation_noise_std`
    feeds the controller a noisy state estimate, which is what makes a
    real closed loop wander off the ideal reference tube; the plant
    itself always steps from the true state.
    """

    mode: str
    seed: int = 0
    residual_sample: object = None
    noise_std: object = None
    estimation_noise_std: object = None
    initial_state: object = None
    divergence_factor: float = 10.0

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")


@dataclass(frozen=True)
class RolloutResult:
    trajectory: Trajectory
    reference: Trajectory
    errors: np.ndarray
    diverged: bool
    steps: int
    residual_inputs: np.ndarray
    residual_targets: np.ndarray
    measured_targets: np.ndarray
    mode: str
    seed: int
    unconverged_steps: int = 0


def make_g_hat(model, state_dim: int, input_dim: int = None):
    """Posterior-mean residual estimate as a (x, u) callable.

    Splits the model's feature indices into state and input parts once,
    so the controller's inner iterations avoid re-concatenating z.
    """
    if model is None:
        return None
    idx = model.feature_indices
    if idx is None:
        def g_hat(x, u):
            return model.mean_at(np.concatenate([x, u]))

        return g_hat
    state_idx = np.array([i for i in idx if i < state_dim], dtype=np.intp)
    input_idx = np.array([i - state_dim for i in idx if i >= state_dim], dtype=np.intp)
    if state_idx.size == 0:
        if input_dim is not None and np.array_equal(
            input_idx, np.arange(input_dim)
        ):
            # input-only features over the full input vector: pass u through
            def g_hat(x, u):
                return model.mean_at(u)
        else:
            def g_hat(x, u):
                return model.mean_at(np.ascontiguousarray(u[input_idx]))
    else:
        def g_hat(x, u):
            return model.mean_at(
                np.concatenate([x[state_idx], u[input_idx]])
            )
    return g_hat


def rollout(
    plant,
    gains,
    model,
    reference: Trajectory,
    config: RolloutConfig,
    g_hat_override=None,
    solve: CompensationSolve = CompensationSolve(),
) -> RolloutResult:
    """Roll the closed loop along a reference trajectory."""
    N = reference.horizon
    n = plant.state_dim
    m = plant.input_dim
    if reference.state_dim != n or reference.input_dim != m:
        raise ValueError("reference dimensions do not match the plant")

    if config.mode in ("experiment", "evaluation") and not hasattr(plant, "step_true"):
        raise ValueError(f"{config.mode} mode needs the true plant, not a nominal view")
    sample = config.residual_sample
    if config.mode == "belief" and sample is None:
        if model is None:
            raise ValueError("belief mode needs a residual_sample or a model")
        sample = draw_belief_sample(plant, gains, model, reference, config.seed)

    g_hat = (
        g_hat_override
        if g_hat_override is not None
        else make_g_hat(model, n, input_dim=m)
    )
    controller = Controller(gains, plant, g_hat=g_hat, solve=solve)

    feature_of = (lambda z: z) if model is None else model.features
    rng = np.random.default_rng(config.seed)
    noise_std = config.noise_std
    if noise_std is not None:
        noise_std = np.broadcast_to(np.asarray(noise_std, dtype=np.float64), (n,))
    est_std = config.estimation_noise_std
    if est_std is not None:
        est_std = np.broadcast_to(np.asarray(est_std, dtype=np.float64), (n,))

    X = np.zeros((N + 1, n))
    U = np.zeros((N + 1, m))
    Z = np.zeros((N, n + m))
    targets = np.zeros((N, n))
    measured = np.zeros((N, n))
    X[0] = (
        reference.states[0]
        if config.initial_state is None
        else np.asarray(config.initial_state, dtype=np.float64)
    )

    bound = config.divergence_factor * np.max(np.abs(plant.state_bounds), axis=1)
    diverged = False
    unconverged = 0
    steps = 0
    for k in range(N):
        x_meas = X[k]
        if est_std is not None:
            x_meas = X[k] + est_std * rng.standard_normal(n)
        res = controller.step(reference.states[k], reference.states[k + 1], x_meas)
        if not res.converged:
            unconverged += 1
        u = res.u
        U[k] = u
        Z[k, :n] = X[k]
        Z[k, n:] = u
        h_next = plant.h(X[k], u)
        if config.mode == "belief":
            g_val = np.asarray(sample(feature_of(Z[k])), dtype=np.float64)
            x_next = h_next + g_val
        else:
            x_next = plant.step_true(X[k], u)
            g_val = x_next - h_next
        targets[k] = g_val
        if noise_std is not None:
            measured[k] = g_val + noise_std * rng.standard_normal(n)
        else:
            measured[k] = g_val
        steps = k + 1
        if not np.all(np.isfinite(x_next)) or np.any(np.abs(x_next) > bound):
            diverged = True
            X[k + 1] = np.where(np.isfinite(x_next), x_next, 0.0)
            break
        X[k + 1] = x_next

    kept = steps if diverged else N
    executed = Trajectory(X[: kept + 1], U[: kept + 1], reference.sampling_time)
    ref_cut = Trajectory(
        reference.states[: kept + 1],
        reference.inputs[: kept + 1],
        reference.sampling_time,
    )
    errors = np.linalg.norm(ref_cut.states - executed.states, axis=1)
    return RolloutResult(
        trajectory=executed,
        reference=ref_cut,
        errors=errors,
        diverged=diverged,
        steps=kept,
        residual_inputs=Z[:kept],
        residual_targets=targets[:kept],
        measured_targets=measured[:kept],
        mode=config.mode,
        seed=config.seed,
        unconverged_steps=unconverged,
    )


def belief_anchor_points(plant, gains, model, reference, stride: int = 10):
    """Anchor grid for residual sampling along a candidate reference.

    A mean rollout (simulated residual = posterior mean) traces where
    the closed loop is believed to go; the visited points, strided, are
    the anchors. The rollout is deterministic, so the grid can be reused
    across sample draws for the same reference.
    """
    mean_fn = lambda f: model.mean_at(f)  # noqa: E731
    probe = rollout(
        plant,
        gains,
        model,
        reference,
        RolloutConfig(mode="belief", seed=0, residual_sample=mean_fn),
    )
    feats = model.features(probe.residual_inputs)
    if feats.shape[0] == 0:
        raise ValueError("mean rollout produced no anchor points")
    idx = np.arange(0, feats.shape[0], stride)
    if idx[-1] != feats.shape[0] - 1:
        idx = np.append(idx, feats.shape[0] - 1)
    return feats[idx]


def draw_belief_sample(plant, gains, model, reference, seed, stride: int = 10):
    """Sample a residual function anchored along the candidate reference."""
    anchors = belief_anchor_points(plant, gains, model, reference, stride=stride)
    return model.sample_function(anchors, seed)


@dataclass(frozen=True)
class ErrorReport:
    """Problem-objective and per-axis tracking metrics for one rollout."""

    squared: float
    abs_axes: np.ndarray
    abs_mean: float
    diverged: bool


def tracking_error(result: RolloutResult) -> ErrorReport:
    """Squared-error sum and mean-absolute per-axis error.

    Metrics run over k = 1..N; the k = 0 term is identically zero since
    rollouts start on the reference. Divergent rollouts report infinity.
    """
    n = result.reference.state_dim
    if result.diverged:
        return ErrorReport(np.inf, np.full(n, np.inf), np.inf, True)
    diff = result.reference.states[1:] - result.trajectory.states[1:]
    squared = float(np.sum(diff * diff))
    abs_axes = np.mean(np.abs(diff), axis=0)
    return ErrorReport(squared, abs_axes, float(abs_axes.mean()), False)


def export_rollout_csv(result: RolloutResult, path, extra_meta=None) -> None:
    """Write `k, x_*, u_*, xref_*, err` rows plus a `.kv` metadata sidecar."""
    path = Path(path)
    n = result.trajectory.state_dim
    m = result.trajectory.input_dim
    header = (
        ["k"]
        + [f"x_{i}" for i in range(n)]
        + [f"u_{i}" for i in range(m)]
        + [f"xref_{i}" for i in range(n)]
        + ["err"]
    )
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for k in range(result.trajectory.states.shape[0]):
            row = [str(k)]
            row += [repr(float(v)) for v in result.trajectory.states[k]]
            row += [repr(float(v)) for v in result.trajectory.inputs[k]]
            row += [repr(float(v)) for v in result.reference.states[k]]
            row.append(repr(float(result.errors[k])))
            writer.writerow(row)
    report = tracking_error(result)
    meta = {
        "mode": result.mode,
        "seed": result.seed,
        "diverged": result.diverged,
        "steps": result.steps,
        "cost_squared": report.squared,
        "err_abs_mean": report.abs_mean,
    }
    if extra_meta:
        meta.update(extra_meta)
    kvformat.dump_kv(path.with_suffix(".kv"), meta)
