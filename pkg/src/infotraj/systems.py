"""Ground-truth and nominal plant definitions.

Discrete-time dynamics x[k+1] = h(x, u) + g(x, u) where the first
principles part h is known to the controller and the residual g is
hidden behind the experiment interface. All built-in plants are
input-affine, h(x, u) = l(x) + B u, which is what the compensating
controller relies on.

Built-ins:

* ``oadi`` - overactuated double integrator(s) with an unknown actuator
  disturbance matrix and a constant acceleration-level offset. The
  disturbance lives in the span of the nominal input directions, so a
  dynamically consistent reference is perfectly trackable once the
  residual is known. h is linear; Lipschitz constant = ||[A  B]||_2.
* ``attitude3`` - 3-axis angular-velocity plant w' = w + T (tau + g(tau))
  with a smooth nonlinear torque mismatch built from random Fourier
  features, amplitude- and slope-capped so the compensation fixed point
  contracts. Lipschitz constant <= 1 + T (1 + slope cap).
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import kvformat


@dataclass(frozen=True)
class Trajectory:
    """Time-indexed state and input sequences over horizon N."""

    states: np.ndarray
    inputs: np.ndarray
    sampling_time: float

    def __post_init__(self):
        X = np.asarray(self.states, dtype=np.float64)
        U = np.asarray(self.inputs, dtype=np.float64)
        if X.ndim != 2 or U.ndim != 2:
            raise ValueError("states and inputs must be 2-D arrays")
        if X.shape[0] != U.shape[0]:
            raise ValueError(
                f"states and inputs disagree on horizon: {X.shape[0]} vs {U.shape[0]}"
            )
        if X.shape[0] < 2:
            raise ValueError("a trajectory needs at least 2 samples")
        if not (np.all(np.isfinite(X)) and np.all(np.isfinite(U))):
            raise ValueError("trajectory entries must be finite")
        object.__setattr__(self, "states", X)
        object.__setattr__(self, "inputs", U)
        object.__setattr__(self, "sampling_time", float(self.sampling_time))

    @property
    def horizon(self) -> int:
        return self.states.shape[0] - 1

    @property
    def state_dim(self) -> int:
        return self.states.shape[1]

    @property
    def input_dim(self) -> int:
        return self.inputs.shape[1]

    def save_csv(self, path) -> None:
        n, m = self.state_dim, self.input_dim
        header = (
            ["k"]
            + [f"x_{i}" for i in range(n)]
            + [f"u_{i}" for i in range(m)]
        )
        with open(path, "w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(header)
            for k in range(self.states.shape[0]):
                row = [str(k)]
                row += [repr(float(v)) for v in self.states[k]]
                row += [repr(float(v)) for v in self.inputs[k]]
                writer.writerow(row)

    @classmethod
    def load_csv(cls, path, sampling_time: float) -> "Trajectory":
        with open(path, "r", encoding="utf-8", newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader)
            n = sum(1 for c in header if c.startswith("x_"))
            m = sum(1 for c in header if c.startswith("u_"))
            rows = [[float(v) for v in row[1:]] for row in reader]
        arr = np.array(rows)
        return cls(arr[:, :n], arr[:, n : n + m], sampling_time)


class PlantDivergence(RuntimeError):
    """True dynamics produced a non-finite state."""


@dataclass(frozen=True)
class PlantSpec:
    """Input-affine plant with a sealed residual.

    ``step_true`` is the experiment interface; everything the selection
    algorithm may see is available through :meth:`nominal`.
    """

    name: str
    kind: str
    state_dim: int
    input_dim: int
    sampling_time: float
    drift: callable
    input_matrix: np.ndarray
    residual: callable
    state_bounds: np.ndarray
    input_bounds: np.ndarray
    params: dict = field(default_factory=dict)
    residual_scale: float = 1.0
    excited_axes: int = 1

    def __post_init__(self):
        B = np.asarray(self.input_matrix, dtype=np.float64)
        if B.shape != (self.state_dim, self.input_dim):
            raise ValueError("input_matrix shape mismatch")
        object.__setattr__(self, "input_matrix", B)
        object.__setattr__(
            self, "state_bounds", np.asarray(self.state_bounds, dtype=np.float64)
        )
        object.__setattr__(
            self, "input_bounds", np.asarray(self.input_bounds, dtype=np.float64)
        )
        object.__setattr__(self, "_alloc", np.linalg.pinv(B))

    @property
    def alloc(self) -> np.ndarray:
        """Right inverse of the input matrix (minimum-norm allocation)."""
        return self._alloc

    def h(self, x, u) -> np.ndarray:
        return self.drift(x) + self.input_matrix @ u

    def true_residual(self, x, u) -> np.ndarray:
        """Hidden residual g(x, u); experiment-side access only."""
        return self.residual(x, u)

    def step_true(self, x, u) -> np.ndarray:
        """One step of the true dynamics h + g (an 'experiment' step)."""
        return self.h(x, u) + self.residual(x, u)

    def step_nominal(self, x, u, g_hat=None) -> np.ndarray:
        """One step of the believed dynamics h + g_hat."""
        out = self.h(x, u)
        if g_hat is not None:
            out = out + g_hat(x, u)
        return out

    def nominal(self) -> "NominalPlant":
        return NominalPlant(
            name=self.name,
            kind=self.kind,
            state_dim=self.state_dim,
            input_dim=self.input_dim,
            sampling_time=self.sampling_time,
            drift=self.drift,
            input_matrix=self.input_matrix,
            state_bounds=self.state_bounds,
            input_bounds=self.input_bounds,
            excited_axes=self.excited_axes,
        )

    def save(self, path) -> None:
        """Dump all parameters (including the sealed residual's) to kv text."""
        items = {
            "kind": self.kind,
            "name": self.name,
            "state_dim": self.state_dim,
            "input_dim": self.input_dim,
            "sampling_time": self.sampling_time,
            "residual_scale": self.residual_scale,
            "excited_axes": self.excited_axes,
            "state_bounds": self.state_bounds,
            "input_bounds": self.input_bounds,
        }
        for key, value in self.params.items():
            items[key] = np.asarray(value)
        kvformat.dump_kv(path, items)


@dataclass(frozen=True)
class NominalPlant:
    """Controller-visible view of a plant: first principles only, no residual."""

    name: str
    kind: str
    state_dim: int
    input_dim: int
    sampling_time: float
    drift: callable
    input_matrix: np.ndarray
    state_bounds: np.ndarray
    input_bounds: np.ndarray
    excited_axes: int

    def __post_init__(self):
        object.__setattr__(self, "_alloc", np.linalg.pinv(self.input_matrix))

    @property
    def alloc(self) -> np.ndarray:
        return self._alloc

    def h(self, x, u) -> np.ndarray:
        return self.drift(x) + self.input_matrix @ u

    def step_nominal(self, x, u, g_hat=None) -> np.ndarray:
        out = self.h(x, u)
        if g_hat is not None:
            out = out + g_hat(x, u)
        return out


def default_feature_indices(plant, kind: str = "input"):
    """Indices into z = (x, u) used as GP input; the torque-mismatch
    setting learns on the input only."""
    n, m = plant.state_dim, plant.input_dim
    if kind == "input":
        return tuple(range(n, n + m))
    if kind == "state_input":
        return tuple(range(n + m))
    raise ValueError(f"unknown feature kind: {kind!r}")


# built-in plants ----------------------------------------------------------


def builtin(name: str, seed: int, **options) -> PlantSpec:
    """Construct a built-in synthetic plant; deterministic in (name, seed)."""
    if name == "oadi":
        return _make_oadi(seed, **options)
    if name == "attitude3":
        return _make_attitude3(seed, **options)
    raise ValueError(f"unknown plant name: {name!r} (expected 'oadi' or 'attitude3')")


def _make_oadi(
    seed: int,
    n: int = 2,
    m: int = 3,
    sampling_time: float = 0.01,
    residual_gain: float = 0.3,
    offset_accel: float = 1.0,
) -> PlantSpec:
    if n not in (2, 4):
        raise ValueError("oadi supports n = 2 or n = 4")
    nb = n // 2
    if m <= n:
        raise ValueError("oadi is overactuated: need m > n")
    T = sampling_time
    rng = np.random.default_rng(seed)

    A = np.zeros((n, n))
    for b in range(nb):
        A[2 * b : 2 * b + 2, 2 * b : 2 * b + 2] = [[1.0, T], [0.0, 1.0]]
    b_base = np.array([0.5 * T * T, T])

    B_nom = np.zeros((n, m))
    for j in range(m):
        b = j % nb
        B_nom[2 * b : 2 * b + 2, j] = b_base

    # actuator disturbance: acceleration-level, so it stays in the span of
    # the nominal input directions; rescaled to a fixed effective gain
    delta = rng.uniform(-1.0, 1.0, size=(nb, m))
    B_dist = np.zeros((n, m))
    for b in range(nb):
        B_dist[2 * b : 2 * b + 2, :] = np.outer(b_base, delta[b])
    gain = np.linalg.norm(B_dist @ np.linalg.pinv(B_nom), 2)
    if gain > 0:
        B_dist *= residual_gain / gain

    # constant acceleration offset (gravity-like), bounded away from zero
    signs = rng.choice([-1.0, 1.0], size=nb)
    mags = rng.uniform(0.5, 1.0, size=nb) * offset_accel
    D_dist = np.zeros(n)
    for b in range(nb):
        D_dist[2 * b : 2 * b + 2] = b_base * signs[b] * mags[b]

    def drift(x, _A=A):
        return _A @ np.asarray(x, dtype=np.float64)

    def residual(x, u, _Bd=B_dist, _Dd=D_dist):
        return _Bd @ np.asarray(u, dtype=np.float64) + _Dd

    state_bounds = np.column_stack([-4.0 * np.ones(n), 4.0 * np.ones(n)])
    input_bounds = np.column_stack([-6.0 * np.ones(m), 6.0 * np.ones(m)])
    return PlantSpec(
        name="oadi",
        kind="oadi",
        state_dim=n,
        input_dim=m,
        sampling_time=T,
        drift=drift,
        input_matrix=B_nom,
        residual=residual,
        state_bounds=state_bounds,
        input_bounds=input_bounds,
        params={"A": A, "B_nom": B_nom, "B_dist": B_dist, "D_dist": D_dist},
        residual_scale=residual_gain,
        excited_axes=nb,
    )


def _make_attitude3(
    seed: int,
    sampling_time: float = 0.01,
    residual_scale: float = 0.8,
    slope_cap: float = 1.5,
    w_scale: float = 2.5,
    n_features: int = 20,
) -> PlantSpec:
    T = sampling_time
    rng = np.random.default_rng(seed)
    W = rng.normal(0.0, w_scale, size=(n_features, 3))
    phases = rng.uniform(0.0, 2.0 * np.pi, size=n_features)
    amps = rng.normal(0.0, 1.0, size=n_features)
    # cap |g| by residual_scale and |dg/dtau| by slope_cap; the
    # compensation solver's backtracking tolerates slopes above 1
    amps *= residual_scale / np.sum(np.abs(amps))
    lipschitz = float(np.sum(np.abs(amps) * np.linalg.norm(W, axis=1)))
    if lipschitz > slope_cap:
        W *= slope_cap / lipschitz

    def drift(x):
        return np.asarray(x, dtype=np.float64)

    def residual(x, u, _W=W, _ph=phases, _a=amps, _T=T):
        # smooth torque mismatch per axis, scaled into state units
        proj = _W @ np.asarray(u, dtype=np.float64)
        g_tau = np.array(
            [
                _a @ np.cos(proj + _ph),
                _a @ np.sin(proj + _ph),
                _a @ np.cos(proj - _ph),
            ]
        )
        return _T * g_tau

    state_bounds = np.column_stack([-2.0 * np.ones(3), 2.0 * np.ones(3)])
    input_bounds = np.column_stack([-4.0 * np.ones(3), 4.0 * np.ones(3)])
    return PlantSpec(
        name="attitude3",
        kind="attitude3",
        state_dim=3,
        input_dim=3,
        sampling_time=T,
        drift=drift,
        input_matrix=T * np.eye(3),
        residual=residual,
        state_bounds=state_bounds,
        input_bounds=input_bounds,
        params={"W": W, "phases": phases, "amps": amps},
        residual_scale=residual_scale,
        excited_axes=3,
    )


def load_plant(path) -> PlantSpec:
    """Rebuild a plant from a parameter dump written by PlantSpec.save."""
    kv = kvformat.load_kv(path)
    kind = kvformat.get_str(kv, "kind")
    n = kvformat.get_int(kv, "state_dim")
    m = kvformat.get_int(kv, "input_dim")
    T = kvformat.get_float(kv, "sampling_time")
    if kind == "oadi":
        A = np.array(kvformat.get_floats(kv, "A")).reshape(n, n)
        B_nom = np.array(kvformat.get_floats(kv, "B_nom")).reshape(n, m)
        B_dist = np.array(kvformat.get_floats(kv, "B_dist")).reshape(n, m)
        D_dist = np.array(kvformat.get_floats(kv, "D_dist"))

        def drift(x, _A=A):
            return _A @ np.asarray(x, dtype=np.float64)

        def residual(x, u, _Bd=B_dist, _Dd=D_dist):
            return _Bd @ np.asarray(u, dtype=np.float64) + _Dd

        params = {"A": A, "B_nom": B_nom, "B_dist": B_dist, "D_dist": D_dist}
        input_matrix = B_nom
    elif kind == "attitude3":
        nf = len(kvformat.get_floats(kv, "phases"))
        W = np.array(kvformat.get_floats(kv, "W")).reshape(nf, 3)
        phases = np.array(kvformat.get_floats(kv, "phases"))
        amps = np.array(kvformat.get_floats(kv, "amps"))

        def drift(x):
            return np.asarray(x, dtype=np.float64)

        def residual(x, u, _W=W, _ph=phases, _a=amps, _T=T):
            proj = _W @ np.asarray(u, dtype=np.float64)
            g_tau = np.array(
                [
                    _a @ np.cos(proj + _ph),
                    _a @ np.sin(proj + _ph),
                    _a @ np.cos(proj - _ph),
                ]
            )
            return _T * g_tau

        params = {"W": W, "phases": phases, "amps": amps}
        input_matrix = T * np.eye(3)
    else:
        raise ValueError(f"unknown plant kind in dump: {kind!r}")
    return PlantSpec(
        name=kvformat.get_str(kv, "name"),
        kind=kind,
        state_dim=n,
        input_dim=m,
        sampling_time=T,
        drift=drift,
        input_matrix=input_matrix,
        residual=residual,
        state_bounds=np.array(kvformat.get_floats(kv, "state_bounds")).reshape(n, 2),
        input_bounds=np.array(kvformat.get_floats(kv, "input_bounds")).reshape(m, 2),
        params=params,
        residual_scale=kvformat.get_float(kv, "residual_scale"),
        excited_axes=kvformat.get_int(kv, "excited_axes"),
    )


# reference trajectories ---------------------------------------------------


def builtin_task(plant, name: str = "figure8", horizon: int = 400, scale: float = 1.0) -> Trajectory:
    """A task reference for a built-in plant, amplitude-scalable.

    ``figure8`` is a two-tone Lissajous pattern; for the double
    integrator the profile is generated at the acceleration level and
    integrated exactly through the plant's discretization, so the
    reference is dynamically consistent.
    """
    T = plant.sampling_time
    N = int(horizon)
    n, m = plant.state_dim, plant.input_dim
    t = np.arange(N + 1) * T
    if name == "setpoint":
        return Trajectory(np.zeros((N + 1, n)), np.zeros((N + 1, m)), T)
    if name != "figure8":
        raise ValueError(f"unknown task name: {name!r}")
    if plant.kind == "attitude3":
        f0 = 0.25
        amp = 0.5 * scale
        X = np.zeros((N + 1, 3))
        X[:, 0] = amp * np.sin(2.0 * np.pi * f0 * t)
        X[:, 1] = amp * np.sin(4.0 * np.pi * f0 * t)
        X[:, 2] = 0.4 * amp * np.sin(2.0 * np.pi * f0 * t + np.pi / 3.0) - (
            0.4 * amp * np.sin(np.pi / 3.0)
        )
        return Trajectory(X, np.zeros((N + 1, 3)), T)
    if plant.kind == "oadi":
        nb = n // 2
        f0 = 0.25
        amp = 2.0 * scale
        X = np.zeros((N + 1, n))
        for b in range(nb):
            # cosine acceleration keeps the velocity zero-mean and the
            # position oscillation bounded
            accel = amp * np.cos(2.0 * np.pi * f0 * (1 + b) * t)
            p = np.zeros(N + 1)
            v = np.zeros(N + 1)
            for k in range(N):
                p[k + 1] = p[k] + T * v[k] + 0.5 * T * T * accel[k]
                v[k + 1] = v[k] + T * accel[k]
            X[:, 2 * b] = p
            X[:, 2 * b + 1] = v
        return Trajectory(X, np.zeros((N + 1, m)), T)
    raise ValueError(f"no built-in task for plant kind {plant.kind!r}")


def excited_state_rows(plant) -> list[int]:
    """State rows that receive the excitation directly (one per excited axis)."""
    if plant.kind == "attitude3":
        return [0, 1, 2]
    if plant.kind == "oadi":
        return [2 * b + 1 for b in range(plant.excited_axes)]
    raise ValueError(f"no excitation mapping for plant kind {plant.kind!r}")


def inject_deviation(plant, task: Trajectory, delta) -> Trajectory:
    """Add an excitation sequence to a task reference, per plant mapping.

    ``delta`` has one column per excited axis and lives at the level of
    the excited state row's derivative (the channel the input drives
    directly), so its amplitude maps one to one onto input excursion
    regardless of tone frequency. The deviation of the excited state row
    is the mean-removed discrete integral of delta (mean removal keeps
    higher integrals from ramping); for ``oadi`` the position row
    additionally receives the exact discrete integral of the velocity
    deviation, keeping the deviated reference dynamically consistent.
    """
    delta = np.asarray(delta, dtype=np.float64)
    Np1 = task.states.shape[0]
    if delta.shape != (Np1, plant.excited_axes):
        raise ValueError(
            f"delta must have shape ({Np1}, {plant.excited_axes}), got {delta.shape}"
        )
    states = task.states.copy()
    T = task.sampling_time

    def integral(col):
        out = np.zeros(Np1)
        out[1:] = T * np.cumsum(col[:-1])
        return out - out.mean()

    if plant.kind == "attitude3":
        for axis in range(3):
            states[:, axis] += integral(delta[:, axis])
        return Trajectory(states, task.inputs.copy(), T)
    if plant.kind == "oadi":
        for b in range(plant.excited_axes):
            dv = integral(delta[:, b])
            dp = np.zeros(Np1)
            for k in range(Np1 - 1):
                dp[k + 1] = dp[k] + 0.5 * T * (dv[k] + dv[k + 1])
            states[:, 2 * b] += dp
            states[:, 2 * b + 1] += dv
        return Trajectory(states, task.inputs.copy(), T)
    raise ValueError(f"no deviation mapping for plant kind {plant.kind!r}")
