"""Model-based feedback policy with residual compensation.

The policy forms a desired next state from a reference feedforward plus
proportional and integral error action, then solves

    min_u || x_star - l(x) - B u - g_hat(x, u) ||

by a damped fixed-point iteration with backtracking on the damping
factor. For square input maps (B invertible) this realizes the desired
net effect exactly up to the solver tolerance; for overactuated plants
the minimum-norm allocation gives the least-squares compensation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import kvformat


@dataclass(frozen=True)
class ControllerGains:
    """Proportional/integral gain matrices plus an integral clamp box."""

    K: np.ndarray
    K_I: np.ndarray
    integral_clamp: float = 10.0

    def __post_init__(self):
        K = np.asarray(self.K, dtype=np.float64)
        K_I = np.asarray(self.K_I, dtype=np.float64)
        if K.ndim != 2 or K.shape[0] != K.shape[1]:
            raise ValueError("K must be square")
        if K_I.shape != K.shape:
            raise ValueError("K_I must match K")
        if not np.allclose(K, K.T):
            raise ValueError("K must be symmetric")
        eig = np.linalg.eigvalsh(K)
        if np.any(eig <= 0.0):
            raise ValueError("K must be positive definite")
        eig_i = np.linalg.eigvalsh(0.5 * (K_I + K_I.T))
        if np.any(eig_i < -1e-12):
            raise ValueError("K_I must be positive semidefinite")
        object.__setattr__(self, "K", K)
        object.__setattr__(self, "K_I", K_I)
        object.__setattr__(self, "integral_clamp", float(self.integral_clamp))

    @property
    def dim(self) -> int:
        return self.K.shape[0]

    def save(self, path) -> None:
        kvformat.dump_kv(
            path,
            {
                "n": self.dim,
                "K": self.K,
                "K_I": self.K_I,
                "integral_clamp": self.integral_clamp,
            },
        )

    @classmethod
    def load(cls, path) -> "ControllerGains":
        kv = kvformat.load_kv(path)
        n = kvformat.get_int(kv, "n")
        return cls(
            np.array(kvformat.get_floats(kv, "K")).reshape(n, n),
            np.array(kvformat.get_floats(kv, "K_I")).reshape(n, n),
            kvformat.get_float(kv, "integral_clamp", 10.0),
        )


def default_gains(plant, kp: float = 0.5, ki: float = None) -> ControllerGains:
    """Per-plant defaults: no integral action on the linear plant so that
    unmodeled constant disturbances show up as steady-state offset."""
    n = plant.state_dim
    if ki is None:
        ki = 0.0 if plant.kind == "oadi" else 0.02
    return ControllerGains(kp * np.eye(n), ki * np.eye(n))


@dataclass(frozen=True)
class CompensationSolve:
    """Fixed-point solver settings for the input compensation."""

    max_iterations: int = 50
    tolerance: float = 1e-10
    damping: float = 1.0

    def __post_init__(self):
        if self.tolerance <= 0.0:
            raise ValueError("tolerance must be > 0")
        if not (0.0 < self.damping <= 1.0):
            raise ValueError("damping must be in (0, 1]")


@dataclass(frozen=True)
class PolicyResult:
    u: np.ndarray
    objective: float
    converged: bool
    iterations: int


def policy(
    gains: ControllerGains,
    x_ref_now,
    x_ref_next,
    x,
    integral_sum,
    g_hat,
    plant,
    solve: CompensationSolve = CompensationSolve(),
    u0=None,
) -> PolicyResult:
    """Compute the control input for one step.

    `integral_sum` is the running (already clamped) error sum including
    the current step. `g_hat(x, u)` is any residual estimate in state
    units; None means no compensation. `u0` warm-starts the fixed point
    (the contraction's limit does not depend on it).
    """
    x = np.asarray(x, dtype=np.float64)
    err = np.asarray(x_ref_now, dtype=np.float64) - x
    x_star = (
        np.asarray(x_ref_next, dtype=np.float64)
        + gains.K @ err
        + gains.K_I @ np.asarray(integral_sum, dtype=np.float64)
    )
    target = x_star - plant.drift(x)
    B = plant.input_matrix
    alloc = plant.alloc

    if g_hat is None:
        u = alloc @ target
        r = target - B @ u
        return PolicyResult(u, math.sqrt(float(r @ r)), True, 1)

    def residual_norm(u, g_u):
        r = target - B @ u - g_u
        return math.sqrt(float(r @ r))

    u = alloc @ target if u0 is None else np.asarray(u0, dtype=np.float64)
    g_u = g_hat(x, u)
    obj = residual_norm(u, g_u)
    converged = False
    iterations = 0
    for iterations in range(1, solve.max_iterations + 1):
        proposal = alloc @ (target - g_u)
        lam = solve.damping
        accepted = False
        while lam > 1e-6:
            u_new = (1.0 - lam) * u + lam * proposal
            g_new = g_hat(x, u_new)
            obj_new = residual_norm(u_new, g_new)
            if obj_new <= obj:
                accepted = True
                break
            lam *= 0.5
        if not accepted:
            break
        du = u_new - u
        step = math.sqrt(float(du @ du))
        u, g_u, obj = u_new, g_new, obj_new
        if step <= solve.tolerance:
            converged = True
            break
    return PolicyResult(u, obj, converged, iterations)


class Controller:
    """Per-rollout controller state: gains plus the running error integral."""

    def __init__(self, gains: ControllerGains, plant, g_hat=None,
                 solve: CompensationSolve = CompensationSolve()):
        self.gains = gains
        self.plant = plant
        self.g_hat = g_hat
        self.solve = solve
        self.integral = np.zeros(gains.dim)
        self._last_u = None

    def reset(self) -> None:
        self.integral[:] = 0.0
        self._last_u = None

    def step(self, x_ref_now, x_ref_next, x) -> PolicyResult:
        err = np.asarray(x_ref_now, dtype=np.float64) - np.asarray(
            x, dtype=np.float64
        )
        self.integral = np.clip(
            self.integral + err,
            -self.gains.integral_clamp,
            self.gains.integral_clamp,
        )
        result = policy(
            self.gains,
            x_ref_now,
            x_ref_next,
            x,
            self.integral,
            self.g_hat,
            self.plant,
            self.solve,
            u0=self._last_u,
        )
        self._last_u = result.u
        return result


@dataclass(frozen=True)
class TrackingReport:
    max_error: float
    errors: np.ndarray
    diverged: bool


def verify_assumption1(plant, gains, task, solve=CompensationSolve()) -> TrackingReport:
    """Controller sanity gate: track the task with g_hat = true residual.

    A healthy (plant, gains, task) combination tracks essentially
    perfectly; failure indicates an infeasible task or a compensation
    solve that does not contract.
    """
    from . import simulate

    result = simulate.rollout(
        plant,
        gains,
        model=None,
        reference=task,
        config=simulate.RolloutConfig(mode="experiment", seed=0),
        g_hat_override=plant.true_residual,
        solve=solve,
    )
    errors = np.linalg.norm(task.states - result.trajectory.states, axis=1)
    return TrackingReport(float(errors.max()), errors, result.diverged)
