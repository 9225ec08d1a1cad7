"""Excitation sampling and informative trajectory selection.

Candidate references are the task reference plus a band-limited
deviation: per excited axis, a small number of sine tones with sampled
frequency and amplitude. Frequencies are drawn on the DFT grid of the
horizon so emitted sequences carry no energy outside the commanded bins.

Selection runs the sampling-based algorithm: sample parameter sets,
belief-rollout each candidate with residual functions drawn from the
current model, condition a model copy on each rollout's simulated data,
and score the sum of posterior variances over an evaluation set drawn
from the task-relevant region. Lowest cost wins.
"""

from __future__ import annotations

import csv
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import systems
from .region import (
    estimate_region,
    informative_cost,
    sample_evaluation_set,
)
from .simulate import RolloutConfig, belief_anchor_points, rollout


class SelectionError(RuntimeError):
    """No feasible candidate; typically the amplitude caps are too large."""


@dataclass(frozen=True)
class DeviationParams:
    """Sine-tone excitation: per excited axis, (frequency, amplitude) pairs."""

    frequencies: np.ndarray
    amplitudes: np.ndarray
    f_max: float

    def __post_init__(self):
        F = np.atleast_2d(np.asarray(self.frequencies, dtype=np.float64))
        A = np.atleast_2d(np.asarray(self.amplitudes, dtype=np.float64))
        if F.shape != A.shape:
            raise ValueError("frequencies and amplitudes must have equal shape")
        if np.any(F <= 0.0):
            raise ValueError("frequencies must be > 0")
        if np.any(F > self.f_max + 1e-12):
            raise ValueError(
                f"frequency above the cap: max {F.max():g} > f_max {self.f_max:g}"
            )
        object.__setattr__(self, "frequencies", F)
        object.__setattr__(self, "amplitudes", A)
        object.__setattr__(self, "f_max", float(self.f_max))

    @property
    def n_axes(self) -> int:
        return self.frequencies.shape[0]

    @property
    def n_tones(self) -> int:
        return self.frequencies.shape[1]

    @classmethod
    def zero(cls, n_axes: int, n_tones: int, f_max: float) -> "DeviationParams":
        return cls(
            np.full((n_axes, n_tones), min(1.0, f_max)),
            np.zeros((n_axes, n_tones)),
            f_max,
        )


def deviation(params: DeviationParams, k: int, sampling_time: float) -> np.ndarray:
    """Excitation value per axis at step k: sum of alpha * sin(2 pi f k T)."""
    t = k * sampling_time
    return np.sum(
        params.amplitudes * np.sin(2.0 * np.pi * params.frequencies * t), axis=1
    )


def deviation_sequence(params: DeviationParams, horizon: int, sampling_time: float) -> np.ndarray:
    """Excitation sequence, shape (horizon + 1, n_axes)."""
    t = np.arange(horizon + 1)[:, None, None] * sampling_time
    return np.sum(
        params.amplitudes[None] * np.sin(2.0 * np.pi * params.frequencies[None] * t),
        axis=2,
    )


def grid_frequencies(horizon: int, sampling_time: float, f_max: float) -> np.ndarray:
    """DFT-bin frequencies q / (N T) up to f_max."""
    base = 1.0 / (horizon * sampling_time)
    q_max = int(np.floor(f_max / base + 1e-9))
    if q_max < 1:
        raise ValueError(
            f"horizon too short: the lowest DFT bin {base:g} Hz exceeds f_max {f_max:g} Hz"
        )
    return base * np.arange(1, q_max + 1)


def sample_candidates(
    count: int,
    n_axes: int,
    horizon: int,
    sampling_time: float,
    amplitude_caps,
    f_max: float = 2.0,
    n_tones: int = 2,
    seed: int = 0,
) -> list[DeviationParams]:
    """Uniformly sample deviation parameter sets (deterministic per seed).

    Frequencies are drawn from the horizon's DFT grid below f_max,
    amplitudes uniformly within the per-axis caps.
    """
    if count < 1:
        raise ValueError("count must be >= 1")
    caps = np.broadcast_to(
        np.asarray(amplitude_caps, dtype=np.float64), (n_axes,)
    )
    freqs = grid_frequencies(horizon, sampling_time, f_max)
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(count):
        F = freqs[rng.integers(0, freqs.size, size=(n_axes, n_tones))]
        A = rng.uniform(-1.0, 1.0, size=(n_axes, n_tones)) * caps[:, None]
        out.append(DeviationParams(F, A, f_max))
    return out


def default_amplitude_caps(plant, task, fraction: float = 0.25) -> np.ndarray:
    """Per-axis caps in excited-derivative units: a fraction of the task's
    peak derivative on each excited state row, floored by a fraction of
    the input bound so constant tasks still get excitation."""
    rows = systems.excited_state_rows(plant)
    deriv = np.abs(np.diff(task.states[:, rows], axis=0)) / task.sampling_time
    peaks = deriv.max(axis=0) if deriv.size else np.zeros(len(rows))
    input_half_width = 0.5 * float(
        np.mean(plant.input_bounds[:, 1] - plant.input_bounds[:, 0])
    )
    return fraction * np.maximum(peaks, 0.2 * input_half_width)


@dataclass(frozen=True)
class SelectionConfig:
    n_candidates: int = 20
    n_tones: int = 2
    f_max: float = 2.0
    amplitude_caps: object = None
    n_rollouts: int = 3
    region_rollouts: int = 3
    region_samples: int = 4096
    epsilon: float = None
    eval_count: int = 256
    subsample_budget: int = 40
    include_task_candidate: bool = False
    estimation_noise_std: object = None
    seed: int = 0
    jobs: int = 1


@dataclass(frozen=True)
class CandidateReport:
    candidate_id: int
    params: DeviationParams
    reference: systems.Trajectory
    cost: float
    per_rollout_costs: np.ndarray
    feasible: bool
    rank: int = -1


@dataclass(frozen=True)
class SelectionResult:
    reports: list
    winner: CandidateReport
    region: object
    eval_points: np.ndarray

    def sorted_reports(self) -> list:
        feasible = [r for r in self.reports if r.feasible]
        infeasible = [r for r in self.reports if not r.feasible]
        return sorted(feasible, key=lambda r: r.rank) + infeasible


def _rollout_seed(seed: int, candidate_id: int, j: int) -> int:
    return int(
        np.random.SeedSequence([seed, candidate_id, j]).generate_state(1)[0]
    )


def select_informative(
    plant,
    gains,
    model,
    task,
    config: SelectionConfig = SelectionConfig(),
) -> SelectionResult:
    """Run one selection round and return the ranked candidates.

    Uses only the nominal plant surface; candidates whose belief rollout
    diverges are reported infeasible and excluded from the ranking.
    """
    caps = config.amplitude_caps
    if caps is None:
        caps = default_amplitude_caps(plant, task)
    params_list = sample_candidates(
        config.n_candidates,
        plant.excited_axes,
        task.horizon,
        task.sampling_time,
        caps,
        f_max=config.f_max,
        n_tones=config.n_tones,
        seed=config.seed,
    )
    if config.include_task_candidate:
        params_list.append(
            DeviationParams.zero(plant.excited_axes, config.n_tones, config.f_max)
        )

    regio = estimate_region(
        plant,
        gains,
        model,
        task,
        n_rollouts=config.region_rollouts,
        n_samples=config.region_samples,
        epsilon=config.epsilon,
        seed=config.seed,
        estimation_noise_std=config.estimation_noise_std,
    )
    eval_points = sample_evaluation_set(regio, config.eval_count, config.seed)

    def evaluate(item):
        cid, params = item
        delta = deviation_sequence(params, task.horizon, task.sampling_time)
        reference = systems.inject_deviation(plant, task, delta)
        costs = []
        feasible = True
        try:
            anchors = belief_anchor_points(plant, gains, model, reference)
        except ValueError:
            anchors = None
            feasible = False
        for j in range(config.n_rollouts if feasible else 0):
            sample = model.sample_function(
                anchors, _rollout_seed(config.seed, cid, j)
            )
            res = rollout(
                plant,
                gains,
                model,
                reference,
                RolloutConfig(
                    mode="belief",
                    seed=_rollout_seed(config.seed, cid, j),
                    residual_sample=sample,
                    estimation_noise_std=config.estimation_noise_std,
                ),
            )
            if res.diverged:
                feasible = False
                break
            cost = informative_cost(
                model,
                res.residual_inputs,
                res.residual_targets,
                eval_points,
                subsample_budget=config.subsample_budget,
                seed=config.seed,
            )
            costs.append(cost.value)
        value = float(np.mean(costs)) if feasible else np.inf
        return CandidateReport(
            candidate_id=cid,
            params=params,
            reference=reference,
            cost=value,
            per_rollout_costs=np.array(costs),
            feasible=feasible,
        )

    items = list(enumerate(params_list))
    if config.jobs > 1:
        with ThreadPoolExecutor(max_workers=config.jobs) as pool:
            reports = list(pool.map(evaluate, items))
    else:
        reports = [evaluate(it) for it in items]

    feasible = [r for r in reports if r.feasible]
    if not feasible:
        raise SelectionError(
            "every candidate diverged in simulation; reduce the amplitude caps"
        )
    order = sorted(feasible, key=lambda r: (r.cost, r.candidate_id))
    ranked = {r.candidate_id: rank for rank, r in enumerate(order)}
    reports = [
        replace(r, rank=ranked.get(r.candidate_id, -1)) for r in reports
    ]
    winner = next(r for r in reports if r.rank == 0)
    return SelectionResult(
        reports=reports, winner=winner, region=regio, eval_points=eval_points
    )


def export_selection_csv(result: SelectionResult, path) -> None:
    """Selection report rows: id, cost, feasibility, rank, tone parameters."""
    reports = result.reports
    n_axes = reports[0].params.n_axes
    n_tones = reports[0].params.n_tones
    flat = n_axes * n_tones
    header = (
        ["candidate_id", "cost", "feasible", "rank"]
        + [f"f_{i + 1}" for i in range(flat)]
        + [f"alpha_{i + 1}" for i in range(flat)]
    )
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for r in reports:
            row = [
                str(r.candidate_id),
                repr(float(r.cost)),
                "true" if r.feasible else "false",
                str(r.rank),
            ]
            row += [repr(float(v)) for v in r.params.frequencies.ravel()]
            row += [repr(float(v)) for v in r.params.amplitudes.ravel()]
            writer.writerow(row)
