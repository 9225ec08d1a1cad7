"""Bayesian residual-dynamics model.

Independent single-output Gaussian processes with a squared-exponential
kernel, one per residual output channel. Models are immutable values:
conditioning and hyperparameter fitting return new objects, so a model
can be shared read-only across parallel candidate evaluations.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.linalg import cho_solve, solve_triangular
from scipy.optimize import minimize

from . import backend, kvformat

# Diagonal jitter ladder, scaled by the signal variance; zero first so
# well-conditioned systems match a plain dense solve exactly.
JITTER_LADDER = (0.0, 1e-10, 1e-8, 1e-6)

LOG_2PI = math.log(2.0 * math.pi)


class FactorizationError(RuntimeError):
    """Covariance matrix not positive definite after jitter escalation."""


def _as_matrix(x, name="inputs"):
    arr = np.ascontiguousarray(x, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr.reshape(-1, 1)
    if arr.ndim != 2:
        raise ValueError(f"{name} must be a 2-D array, got shape {arr.shape}")
    return arr


def _as_vector(x, name="vector"):
    arr = np.ascontiguousarray(x, dtype=np.float64).ravel()
    return arr


@dataclass(frozen=True)
class Kernel:
    """Squared-exponential kernel hyperparameters for one output channel."""

    signal_variance: float
    lengthscales: np.ndarray
    noise_variance: float = 0.0

    def __post_init__(self):
        ls = _as_vector(self.lengthscales, "lengthscales")
        object.__setattr__(self, "lengthscales", ls)
        object.__setattr__(self, "signal_variance", float(self.signal_variance))
        object.__setattr__(self, "noise_variance", float(self.noise_variance))
        if self.signal_variance <= 0.0:
            raise ValueError("signal_variance must be > 0")
        if self.noise_variance < 0.0:
            raise ValueError("noise_variance must be >= 0")
        if ls.size == 0 or np.any(ls <= 0.0):
            raise ValueError("all lengthscales must be > 0")

    @property
    def input_dim(self) -> int:
        return self.lengthscales.size

    @property
    def inv_lengthscales(self) -> np.ndarray:
        return 1.0 / self.lengthscales

    def save(self, path) -> None:
        items = {"signal_variance": self.signal_variance}
        for j, l in enumerate(self.lengthscales):
            items[f"lengthscale_{j}"] = float(l)
        items["noise_variance"] = self.noise_variance
        kvformat.dump_kv(path, items)

    @classmethod
    def load(cls, path) -> "Kernel":
        kv = kvformat.load_kv(path)
        sf2 = kvformat.get_float(kv, "signal_variance")
        sn2 = kvformat.get_float(kv, "noise_variance")
        ls = []
        while f"lengthscale_{len(ls)}" in kv:
            ls.append(kvformat.get_float(kv, f"lengthscale_{len(ls)}"))
        if not ls:
            raise kvformat.KVError("missing required key 'lengthscale_0'")
        return cls(sf2, np.array(ls), sn2)


def kernel_eval(kernel: Kernel, a, b) -> float:
    """Evaluate k(a, b); symmetric, equals signal_variance at a == b."""
    a = _as_vector(a, "a")
    b = _as_vector(b, "b")
    if a.size != b.size or a.size != kernel.input_dim:
        raise ValueError(
            f"dimension mismatch: a has {a.size}, b has {b.size}, "
            f"kernel expects {kernel.input_dim}"
        )
    diff = (a - b) * kernel.inv_lengthscales
    return float(kernel.signal_variance * math.exp(-0.5 * float(diff @ diff)))


@dataclass(frozen=True)
class Dataset:
    """Training data for one output channel."""

    inputs: np.ndarray
    targets: np.ndarray
    trajectory_ids: np.ndarray = None

    def __post_init__(self):
        X = _as_matrix(self.inputs)
        y = _as_vector(self.targets, "targets")
        if X.shape[0] != y.size:
            raise ValueError(
                f"inputs/targets length mismatch: {X.shape[0]} vs {y.size}"
            )
        ids = self.trajectory_ids
        if ids is None:
            ids = np.zeros(y.size, dtype=np.int64)
        else:
            ids = np.asarray(ids, dtype=np.int64).ravel()
            if ids.size != y.size:
                raise ValueError("trajectory_ids length mismatch")
        object.__setattr__(self, "inputs", X)
        object.__setattr__(self, "targets", y)
        object.__setattr__(self, "trajectory_ids", ids)

    def __len__(self) -> int:
        return self.targets.size

    @property
    def input_dim(self) -> int:
        return self.inputs.shape[1]

    @classmethod
    def empty(cls, input_dim: int) -> "Dataset":
        return cls(
            np.zeros((0, input_dim)), np.zeros(0), np.zeros(0, dtype=np.int64)
        )

    def concat(self, other: "Dataset") -> "Dataset":
        if len(self) == 0:
            return other
        if len(other) == 0:
            return self
        if self.input_dim != other.input_dim:
            raise ValueError("input dimension mismatch in concat")
        return Dataset(
            np.vstack([self.inputs, other.inputs]),
            np.concatenate([self.targets, other.targets]),
            np.concatenate([self.trajectory_ids, other.trajectory_ids]),
        )

    def take(self, indices) -> "Dataset":
        idx = np.asarray(indices, dtype=np.int64)
        return Dataset(
            self.inputs[idx], self.targets[idx], self.trajectory_ids[idx]
        )


def save_datasets_csv(path, datasets) -> None:
    """Write per-channel datasets to one CSV (channel column tells them apart)."""
    dims = {ds.input_dim for ds in datasets}
    if len(dims) != 1:
        raise ValueError("all channel datasets must share the input dimension")
    d = dims.pop()
    header = [f"dim_{j}" for j in range(d)] + ["target", "channel", "trajectory_id"]
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for channel, ds in enumerate(datasets):
            for i in range(len(ds)):
                row = [repr(float(v)) for v in ds.inputs[i]]
                row += [
                    repr(float(ds.targets[i])),
                    str(channel),
                    str(int(ds.trajectory_ids[i])),
                ]
                writer.writerow(row)


def load_datasets_csv(path) -> list[Dataset]:
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        d = sum(1 for name in header if name.startswith("dim_"))
        if header[:d] != [f"dim_{j}" for j in range(d)] or header[d:] != [
            "target",
            "channel",
            "trajectory_id",
        ]:
            raise ValueError(f"unexpected dataset CSV header: {header}")
        per_channel: dict[int, list] = {}
        for row in reader:
            channel = int(row[d + 1])
            per_channel.setdefault(channel, []).append(
                (
                    [float(v) for v in row[:d]],
                    float(row[d]),
                    int(row[d + 2]),
                )
            )
    n_channels = max(per_channel) + 1 if per_channel else 0
    out = []
    for c in range(n_channels):
        rows = per_channel.get(c, [])
        if rows:
            out.append(
                Dataset(
                    np.array([r[0] for r in rows]),
                    np.array([r[1] for r in rows]),
                    np.array([r[2] for r in rows], dtype=np.int64),
                )
            )
        else:
            out.append(Dataset.empty(d))
    return out


class _Channel:
    """One GP channel: kernel + dataset + cached Cholesky factorization."""

    __slots__ = ("kernel", "dataset", "_chol", "_alpha", "_kinv", "jitter")

    def __init__(self, kernel: Kernel, dataset: Dataset):
        if len(dataset) and dataset.input_dim != kernel.input_dim:
            raise ValueError(
                f"dataset dimension {dataset.input_dim} does not match "
                f"kernel dimension {kernel.input_dim}"
            )
        self.kernel = kernel
        self.dataset = dataset
        self._kinv = None
        if len(dataset) == 0:
            self._chol = None
            self._alpha = None
            self.jitter = 0.0
            return
        K_base = backend.se_gram(
            dataset.inputs,
            kernel.inv_lengthscales,
            kernel.signal_variance,
            kernel.noise_variance,
        )
        scale = max(kernel.signal_variance, 1.0)
        for jitter in JITTER_LADDER:
            try:
                K = K_base if jitter == 0.0 else K_base + jitter * scale * np.eye(
                    len(dataset)
                )
                self._chol = np.linalg.cholesky(K)
                self.jitter = jitter * scale
                break
            except np.linalg.LinAlgError:
                continue
        else:
            raise FactorizationError(
                f"covariance not positive definite for {len(dataset)} points "
                f"after jitter up to {JITTER_LADDER[-1]}"
            )
        self._alpha = cho_solve((self._chol, True), dataset.targets)

    @property
    def kinv(self) -> np.ndarray:
        if self._kinv is None:
            self._kinv = cho_solve((self._chol, True), np.eye(len(self.dataset)))
            self._kinv = np.ascontiguousarray(self._kinv)
        return self._kinv

    @property
    def prior_variance(self) -> float:
        return self.kernel.signal_variance + self.kernel.noise_variance

    def posterior_batch(self, Q: np.ndarray):
        k = self.kernel
        if len(self.dataset) == 0:
            mean = np.zeros(Q.shape[0])
            var = np.full(Q.shape[0], self.prior_variance)
            return mean, var
        Ks = backend.se_cross(
            Q, self.dataset.inputs, k.inv_lengthscales, k.signal_variance
        )
        mean = Ks @ self._alpha
        V = solve_triangular(self._chol, Ks.T, lower=True)
        var = self.prior_variance - np.einsum("ij,ij->j", V, V)
        np.clip(var, 0.0, None, out=var)
        return mean, var

    def mean_one(self, q: np.ndarray) -> float:
        if len(self.dataset) == 0:
            return 0.0
        k = self.kernel
        return backend.mean_one(
            self.dataset.inputs, q, k.inv_lengthscales, k.signal_variance, self._alpha
        )

    def mean_var_one(self, q: np.ndarray):
        if len(self.dataset) == 0:
            return 0.0, self.prior_variance
        k = self.kernel
        mean, quad = backend.mean_quad_one(
            self.dataset.inputs,
            q,
            k.inv_lengthscales,
            k.signal_variance,
            self._alpha,
            self.kinv,
        )
        return mean, max(self.prior_variance - quad, 0.0)

    def log_marginal_likelihood(self) -> float:
        n = len(self.dataset)
        if n == 0:
            return 0.0
        return float(
            -0.5 * self.dataset.targets @ self._alpha
            - np.sum(np.log(np.diag(self._chol)))
            - 0.5 * n * LOG_2PI
        )


@dataclass(frozen=True)
class Posterior:
    """Per-channel posterior mean and variance at one or more queries."""

    mean: np.ndarray
    variance: np.ndarray


@dataclass(frozen=True)
class ResidualModel:
    """Stack of independent GP channels over a shared feature space.

    `feature_indices` selects which components of a state-input vector
    z = (x, u) form the GP input; None means the full vector. The model
    itself always works in feature space.
    """

    channels: tuple
    feature_indices: tuple = None

    @classmethod
    def create(cls, kernels, feature_indices=None) -> "ResidualModel":
        dims = {k.input_dim for k in kernels}
        if len(dims) != 1:
            raise ValueError("all channel kernels must share the input dimension")
        empty = Dataset.empty(dims.pop())
        chans = tuple(_Channel(k, empty) for k in kernels)
        return cls(channels=chans, feature_indices=_norm_idx(feature_indices))

    @property
    def n_channels(self) -> int:
        return len(self.channels)

    @property
    def input_dim(self) -> int:
        return self.channels[0].kernel.input_dim

    @property
    def n_points(self) -> int:
        return max(len(c.dataset) for c in self.channels)

    def features(self, z) -> np.ndarray:
        """Project a full state-input vector (or batch) to the GP input space."""
        z = np.asarray(z, dtype=np.float64)
        if self.feature_indices is None:
            return z
        idx = list(self.feature_indices)
        return z[..., idx]

    def posterior(self, query) -> Posterior:
        q = np.ascontiguousarray(query, dtype=np.float64).ravel()
        if q.size != self.input_dim:
            raise ValueError(
                f"query dimension {q.size} does not match model dimension "
                f"{self.input_dim}"
            )
        means = np.empty(self.n_channels)
        variances = np.empty(self.n_channels)
        for i, ch in enumerate(self.channels):
            means[i], variances[i] = ch.mean_var_one(q)
        return Posterior(means, variances)

    def posterior_batch(self, queries) -> Posterior:
        Q = np.ascontiguousarray(_as_matrix(queries, "queries"))
        if Q.shape[1] != self.input_dim:
            raise ValueError(
                f"query dimension {Q.shape[1]} does not match model dimension "
                f"{self.input_dim}"
            )
        means = np.empty((Q.shape[0], self.n_channels))
        variances = np.empty((Q.shape[0], self.n_channels))
        for i, ch in enumerate(self.channels):
            means[:, i], variances[:, i] = ch.posterior_batch(Q)
        return Posterior(means, variances)

    @property
    def _shared_stack(self):
        """Stacked per-channel parameters when all channels share the same
        training inputs (the common case after condition_arrays); enables
        the fused mean kernel on the controller hot path."""
        cached = self.__dict__.get("_shared_stack_cache", "unset")
        if cached != "unset":
            return cached
        stack = None
        first = self.channels[0].dataset.inputs
        if len(self.channels[0].dataset) > 0 and all(
            ch.dataset.inputs is first for ch in self.channels[1:]
        ):
            stack = (
                first,
                np.ascontiguousarray(
                    [ch.kernel.inv_lengthscales for ch in self.channels]
                ),
                np.array([ch.kernel.signal_variance for ch in self.channels]),
                np.ascontiguousarray([ch._alpha for ch in self.channels]),
            )
        self.__dict__["_shared_stack_cache"] = stack
        return stack

    def mean_at(self, q) -> np.ndarray:
        """Posterior means at a single feature-space query (controller hot path)."""
        q = np.ascontiguousarray(q, dtype=np.float64)
        stack = self._shared_stack
        if stack is not None:
            X, inv_ls, sf2s, alphas = stack
            return backend.mean_multi(X, q, inv_ls, sf2s, alphas)
        return np.array([ch.mean_one(q) for ch in self.channels])

    def variance_trace(self, queries) -> np.ndarray:
        """Sum of channel posterior variances per query row."""
        return self.posterior_batch(queries).variance.sum(axis=1)

    def condition(self, new_datasets) -> "ResidualModel":
        """Return a new model conditioned on per-channel extra data."""
        if len(new_datasets) != self.n_channels:
            raise ValueError(
                f"expected {self.n_channels} channel datasets, got {len(new_datasets)}"
            )
        old = [ch.dataset for ch in self.channels]
        # keep the inputs array shared across channels when it already is;
        # the fused mean kernel keys off that identity
        if _shared_inputs(old) and _shared_inputs(new_datasets):
            if len(old[0]) == 0:
                X = new_datasets[0].inputs
            elif len(new_datasets[0]) == 0:
                X = old[0].inputs
            else:
                X = np.vstack([old[0].inputs, new_datasets[0].inputs])
            merged = [
                Dataset(
                    X,
                    np.concatenate([o.targets, d.targets]),
                    np.concatenate([o.trajectory_ids, d.trajectory_ids]),
                )
                for o, d in zip(old, new_datasets)
            ]
        else:
            merged = [o.concat(d) for o, d in zip(old, new_datasets)]
        chans = tuple(
            _Channel(ch.kernel, ds) for ch, ds in zip(self.channels, merged)
        )
        return ResidualModel(channels=chans, feature_indices=self.feature_indices)

    def condition_arrays(self, inputs, targets, trajectory_id=0) -> "ResidualModel":
        """Condition all channels on shared inputs with per-channel targets."""
        X = _as_matrix(inputs)
        Y = np.asarray(targets, dtype=np.float64)
        if Y.ndim != 2 or Y.shape != (X.shape[0], self.n_channels):
            raise ValueError(
                f"targets must have shape ({X.shape[0]}, {self.n_channels})"
            )
        ids = np.full(X.shape[0], trajectory_id, dtype=np.int64)
        return self.condition(
            [Dataset(X, Y[:, c], ids) for c in range(self.n_channels)]
        )

    def with_kernels(self, kernels) -> "ResidualModel":
        """Rebuild with new hyperparameters on the same data (after refitting)."""
        if len(kernels) != self.n_channels:
            raise ValueError("kernel count mismatch")
        chans = tuple(
            _Channel(k, ch.dataset) for k, ch in zip(kernels, self.channels)
        )
        return ResidualModel(channels=chans, feature_indices=self.feature_indices)

    def datasets(self) -> list[Dataset]:
        return [ch.dataset for ch in self.channels]

    def kernels(self) -> list[Kernel]:
        return [ch.kernel for ch in self.channels]

    def sample_function(self, anchor_points, seed, scheme="joint"):
        """Draw one residual function g' from the model belief.

        `joint` draws the channels jointly at the anchor points and
        interpolates linearly between the two nearest anchors, which
        makes g' a well-defined deterministic function. `pointwise`
        draws an independent value per call (deterministic only for an
        identical query sequence).
        """
        if scheme == "pointwise":
            return _PointwiseSample(self, seed)
        if scheme != "joint":
            raise ValueError(f"unknown sampling scheme: {scheme!r}")
        A = _as_matrix(anchor_points, "anchor_points")
        if A.shape[0] == 0:
            raise ValueError("anchor_points must be non-empty")
        if A.shape[1] != self.input_dim:
            raise ValueError("anchor dimension does not match model dimension")
        A = np.ascontiguousarray(A)
        rng = np.random.default_rng(seed)
        values = np.empty((A.shape[0], self.n_channels))
        for c, ch in enumerate(self.channels):
            mean, cov = _joint_posterior(ch, A)
            values[:, c] = mean + _psd_sqrt(cov) @ rng.standard_normal(A.shape[0])
        return _JointSample(A, values)

    def save(self, directory) -> None:
        """Persist kernels and datasets under a directory (model snapshot)."""
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        meta = {
            "n_channels": self.n_channels,
            "feature_indices": ""
            if self.feature_indices is None
            else list(self.feature_indices),
        }
        kvformat.dump_kv(directory / "model.kv", meta)
        for c, ch in enumerate(self.channels):
            ch.kernel.save(directory / f"kernel_{c}.kv")
        save_datasets_csv(directory / "dataset.csv", self.datasets())

    @classmethod
    def load(cls, directory) -> "ResidualModel":
        directory = Path(directory)
        kv = kvformat.load_kv(directory / "model.kv")
        n_channels = kvformat.get_int(kv, "n_channels")
        raw_idx = kv.get("feature_indices", "")
        idx = None if raw_idx == "" else tuple(int(v) for v in raw_idx.split(","))
        kernels = [Kernel.load(directory / f"kernel_{c}.kv") for c in range(n_channels)]
        datasets = load_datasets_csv(directory / "dataset.csv")
        if len(datasets) == 0:
            datasets = [Dataset.empty(kernels[0].input_dim)] * n_channels
        chans = tuple(_Channel(k, ds) for k, ds in zip(kernels, datasets))
        return cls(channels=chans, feature_indices=idx)


def _norm_idx(feature_indices):
    if feature_indices is None:
        return None
    return tuple(int(i) for i in feature_indices)


def _shared_inputs(datasets) -> bool:
    first = datasets[0].inputs
    return all(ds.inputs is first for ds in datasets[1:])


def _joint_posterior(ch: _Channel, A: np.ndarray):
    """Posterior predictive mean and covariance at anchor rows of A."""
    k = ch.kernel
    prior = backend.se_gram(A, k.inv_lengthscales, k.signal_variance, k.noise_variance)
    if len(ch.dataset) == 0:
        return np.zeros(A.shape[0]), prior
    cross = backend.se_cross(
        A, ch.dataset.inputs, k.inv_lengthscales, k.signal_variance
    )
    mean = cross @ ch._alpha
    V = solve_triangular(ch._chol, cross.T, lower=True)
    return mean, prior - V.T @ V


def _psd_sqrt(M: np.ndarray) -> np.ndarray:
    """Square root of a symmetric PSD matrix; exact for zero variance
    directions (negative eigenvalues from roundoff are clipped)."""
    vals, vecs = np.linalg.eigh(0.5 * (M + M.T))
    return vecs * np.sqrt(np.clip(vals, 0.0, None))


class _JointSample:
    """Residual function sampled jointly at anchors, interpolated between them."""

    __slots__ = ("anchors", "values")

    def __init__(self, anchors, values):
        self.anchors = anchors
        self.values = values

    def __call__(self, q) -> np.ndarray:
        q = np.asarray(q, dtype=np.float64).ravel()
        d2 = np.sum((self.anchors - q) ** 2, axis=1)
        if d2.shape[0] == 1:
            return self.values[0].copy()
        i1, i2 = np.argpartition(d2, 1)[:2]
        if d2[i2] < d2[i1]:
            i1, i2 = i2, i1
        d1 = math.sqrt(d2[i1])
        d2_ = math.sqrt(d2[i2])
        if d1 == 0.0:
            return self.values[i1].copy()
        w = d1 / (d1 + d2_)
        return (1.0 - w) * self.values[i1] + w * self.values[i2]


class _PointwiseSample:
    """Independent posterior draw per query; seed-deterministic per sequence."""

    __slots__ = ("model", "rng")

    def __init__(self, model, seed):
        self.model = model
        self.rng = np.random.default_rng(seed)

    def __call__(self, q) -> np.ndarray:
        post = self.model.posterior(q)
        return post.mean + np.sqrt(post.variance) * self.rng.standard_normal(
            post.mean.size
        )


# hyperparameter fitting --------------------------------------------------


@dataclass(frozen=True)
class KernelBounds:
    """Box bounds for hyperparameter search, as (low, high) pairs."""

    signal_variance: tuple = (1e-8, 1e8)
    lengthscale: tuple = (1e-4, 1e4)
    noise_variance: tuple = (1e-10, 1e4)

    @classmethod
    def from_data(cls, dataset: Dataset) -> "KernelBounds":
        vy = max(float(np.var(dataset.targets)), 1e-10)
        spans = dataset.inputs.max(axis=0) - dataset.inputs.min(axis=0)
        span = max(float(np.max(spans)), 1e-4) if spans.size else 1.0
        return cls(
            signal_variance=(1e-6 * vy, 1e4 * vy),
            lengthscale=(1e-3 * span, 1e3 * span),
            noise_variance=(1e-8 * vy, 1e2 * vy),
        )


def log_marginal_likelihood(dataset: Dataset, kernel: Kernel) -> float:
    return _Channel(kernel, dataset).log_marginal_likelihood()


def fit_hyperparameters(
    dataset: Dataset,
    init: Kernel,
    bounds: KernelBounds = None,
    restarts: int = 5,
    seed: int = 0,
    max_iter: int = 200,
) -> Kernel:
    """Multi-restart local ascent of the log marginal likelihood.

    Gradient-free (Nelder-Mead) over log-parameters inside box bounds.
    The returned kernel never scores below `init`.
    """
    if len(dataset) < 2:
        raise ValueError("hyperparameter fitting needs at least 2 points")
    if bounds is None:
        bounds = KernelBounds.from_data(dataset)
    d = dataset.input_dim
    lo = np.log(
        [bounds.signal_variance[0]]
        + [bounds.lengthscale[0]] * d
        + [bounds.noise_variance[0]]
    )
    hi = np.log(
        [bounds.signal_variance[1]]
        + [bounds.lengthscale[1]] * d
        + [bounds.noise_variance[1]]
    )

    def build(theta) -> Kernel:
        return Kernel(
            math.exp(theta[0]),
            np.exp(theta[1 : 1 + d]),
            math.exp(theta[1 + d]),
        )

    def objective(theta) -> float:
        try:
            return -log_marginal_likelihood(dataset, build(theta))
        except FactorizationError:
            return np.inf

    theta_init = np.log(
        np.concatenate(
            [
                [init.signal_variance],
                np.broadcast_to(init.lengthscales, (d,)),
                [max(init.noise_variance, bounds.noise_variance[0])],
            ]
        )
    )
    try:
        best_lml = log_marginal_likelihood(dataset, init)
        best_kernel = init
    except FactorizationError:
        best_lml = -np.inf
        best_kernel = None

    rng = np.random.default_rng(seed)
    starts = [np.clip(theta_init, lo, hi)]
    for _ in range(max(restarts - 1, 0)):
        starts.append(
            np.clip(theta_init + rng.uniform(-1.5, 1.5, size=theta_init.size), lo, hi)
        )
    box = list(zip(lo, hi))
    for x0 in starts:
        res = minimize(
            objective,
            x0,
            method="Nelder-Mead",
            bounds=box,
            options={"maxiter": max_iter, "xatol": 1e-4, "fatol": 1e-8},
        )
        if np.isfinite(res.fun) and -res.fun > best_lml:
            best_lml = -res.fun
            best_kernel = build(res.x)
    if best_kernel is None:
        raise FactorizationError("all hyperparameter restarts failed to factorize")
    return best_kernel


# k-medoids subsampling ----------------------------------------------------


def kmedoids_indices(X, k: int, seed: int = 0, max_swaps: int = 200) -> np.ndarray:
    """PAM-style medoid selection on squared Euclidean input distance.

    Greedy build followed by best-improvement swaps; swap gains are
    evaluated with nearest/second-nearest bookkeeping so a full pass is
    O(p^2). Total within-cluster cost never increases. The procedure is
    deterministic (ties broken by index); `seed` is accepted for API
    stability but has no effect.
    """
    X = _as_matrix(X)
    p = X.shape[0]
    if k <= 0:
        raise ValueError("k must be >= 1")
    if k > p:
        raise ValueError(f"k = {k} exceeds dataset size {p}")
    if k == p:
        return np.arange(p, dtype=np.int64)
    sq = np.sum(X * X, axis=1)
    D = sq[:, None] + sq[None, :] - 2.0 * (X @ X.T)
    np.maximum(D, 0.0, out=D)

    medoids = [int(np.argmin(D.sum(axis=1)))]
    nearest = D[:, medoids[0]].copy()
    while len(medoids) < k:
        # cost after adding candidate c: sum of min(nearest, D[:, c])
        reduced = np.minimum(nearest[:, None], D)
        costs = reduced.sum(axis=0)
        costs[medoids] = np.inf
        c = int(np.argmin(costs))
        medoids.append(c)
        np.minimum(nearest, D[:, c], out=nearest)

    medoids = np.array(sorted(medoids), dtype=np.int64)
    for _ in range(max_swaps):
        Dm = D[:, medoids]
        order = np.argsort(Dm, axis=1)
        near = order[:, 0]
        d1 = Dm[np.arange(p), near]
        d2 = (
            Dm[np.arange(p), order[:, 1]] if k > 1 else np.full(p, np.inf)
        )
        cost = float(d1.sum())

        is_medoid = np.zeros(p, dtype=bool)
        is_medoid[medoids] = True
        cand = np.where(~is_medoid)[0]
        # gain(m, c) = shared(c) + adj(m, c), see below; new_cost = cost + gain
        Dc = D[:, cand]
        capped = np.minimum(d1[:, None], Dc)
        shared_per_c = capped.sum(axis=0) - d1.sum()
        adj = np.minimum(d2[:, None], Dc)
        adj -= capped
        one_hot = np.zeros((k, p))
        one_hot[near, np.arange(p)] = 1.0
        gains = shared_per_c[None, :] + one_hot @ adj
        best_flat = int(np.argmin(gains))
        best_gain = float(gains.ravel()[best_flat])
        if best_gain >= -1e-12 * max(cost, 1.0):
            break
        m_idx, c_idx = divmod(best_flat, cand.size)
        new = medoids.copy()
        new[m_idx] = cand[c_idx]
        medoids = np.sort(new)
    return medoids


def kmedoids_cost(X, medoid_indices) -> float:
    X = _as_matrix(X)
    med = X[np.asarray(medoid_indices, dtype=np.int64)]
    d2 = (
        np.sum(X * X, axis=1)[:, None]
        + np.sum(med * med, axis=1)[None, :]
        - 2.0 * X @ med.T
    )
    np.maximum(d2, 0.0, out=d2)
    return float(d2.min(axis=1).sum())


def kmedoids_subsample(dataset: Dataset, k: int, seed: int = 0) -> Dataset:
    """Subsample a dataset to its k medoids (members of the input set)."""
    if k > len(dataset):
        raise ValueError(f"k = {k} exceeds dataset size {len(dataset)}")
    idx = kmedoids_indices(dataset.inputs, k, seed=seed)
    return dataset.take(idx)
