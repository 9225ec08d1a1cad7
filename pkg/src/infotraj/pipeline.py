"""Outer active-learning protocol.

Per iteration and arm: pick a reference (selected informative trajectory,
task replay, or nothing), execute it on the sealed plant, pool the
collected residual observations, k-medoids-subsample the pool to the
iteration's data budget, condition the prior model, refit
hyperparameters, and score an evaluation rollout of the task. Arms are
paired: same plant draw, same initial model, same seed streams; only the
executed reference differs.

The sealed plant counts every true-dynamics step so experiment budget
accounting can be asserted; belief rollouts run against the nominal
surface and never touch it.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.stats import spearmanr

from . import gp, systems
from .control import ControllerGains, default_gains
from .simulate import RolloutConfig, rollout, tracking_error
from .trajgen import SelectionConfig, select_informative

ARMS = ("informative", "non_informative", "no_learning")
_ARM_CODE = {"informative": 1, "non_informative": 2, "no_learning": 3}

# purpose codes for seed derivation
_PRIOR, _SELECT, _EXECUTE, _EVALUATE, _SUBSAMPLE, _FIT, _NOISE = range(7)


def derive_seed(*parts) -> int:
    """Stable integer seed from integer parts (order-sensitive)."""
    return int(np.random.SeedSequence(list(parts)).generate_state(1)[0])


class SealedPlant:
    """Experiment interface around a plant: counts true-dynamics steps."""

    def __init__(self, plant: systems.PlantSpec):
        self._plant = plant
        self.experiment_steps = 0

    def __getattr__(self, name):
        return getattr(self._plant, name)

    def step_true(self, x, u):
        self.experiment_steps += 1
        return self._plant.step_true(x, u)

    def nominal(self) -> systems.NominalPlant:
        return self._plant.nominal()


@dataclass(frozen=True)
class ExperimentConfig:
    plant_name: str = "attitude3"
    plant_seed: int = 0
    plant_options: dict = field(default_factory=dict)
    task_name: str = "figure8"
    horizon: int = 400
    task_scale: float = 1.0
    feature_kind: str = "input"
    kernel_signal_variance: float = None
    kernel_lengthscale: float = None
    kernel_noise_variance: float = None
    kp: float = 0.5
    ki: float = None
    iterations: int = 4
    budgets: tuple = (20, 40, 60, 80)
    prior_budget: int = 40
    arms: tuple = ("informative", "non_informative")
    seeds: tuple = (0,)
    noise_rel: float = 0.01
    est_noise_rel: float = 0.005
    hyperfit: bool = True
    fit_restarts: int = 3
    fit_max_iter: int = 120
    selection: SelectionConfig = field(default_factory=SelectionConfig)
    eval_scale: float = 1.65
    correlation_candidates: int = 6
    pool_cap: int = 1200
    jobs: int = 1

    def __post_init__(self):
        budgets = tuple(int(b) for b in self.budgets)
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if len(budgets) != self.iterations:
            raise ValueError(
                f"need one budget per iteration: {len(budgets)} budgets for "
                f"{self.iterations} iterations"
            )
        if any(b2 <= b1 for b1, b2 in zip(budgets, budgets[1:])):
            raise ValueError("budgets must be strictly increasing")
        for arm in self.arms:
            if arm not in ARMS:
                raise ValueError(f"unknown arm {arm!r}; expected one of {ARMS}")
        object.__setattr__(self, "budgets", budgets)
        object.__setattr__(self, "arms", tuple(self.arms))
        object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))


@dataclass(frozen=True)
class IterationRecord:
    iteration: int
    arm: str
    executed_id: str
    budget: int
    err_squared: float
    err_abs_axes: np.ndarray
    err_abs_mean: float
    informative_cost: float
    wall_time: float
    diverged: bool
    model: object


@dataclass(frozen=True)
class Unit:
    """Everything one (seed, arm-set) comparison unit shares."""

    config: ExperimentConfig
    unit_seed: int
    plant: systems.PlantSpec
    gains: ControllerGains
    task: systems.Trajectory
    prior_model: gp.ResidualModel
    noise_std: np.ndarray
    est_noise_std: object
    prior_steps: int


@dataclass(frozen=True)
class ArmState:
    arm: str
    sealed: SealedPlant
    iteration: int
    model: gp.ResidualModel
    pool_inputs: tuple = ()
    pool_targets: tuple = ()


def initial_kernels(config: ExperimentConfig, plant, target_scale: float):
    """One kernel per residual channel from config (data-driven defaults)."""
    sf2 = config.kernel_signal_variance
    if sf2 is None:
        sf2 = max(target_scale**2, 1e-10)
    ls = config.kernel_lengthscale
    if ls is None:
        widths = plant.input_bounds[:, 1] - plant.input_bounds[:, 0]
        ls = 0.25 * float(np.mean(widths))
    sn2 = config.kernel_noise_variance
    if sn2 is None:
        sn2 = max(1e-4 * sf2, 1e-12)
    n_features = len(systems.default_feature_indices(plant, config.feature_kind))
    kern = gp.Kernel(sf2, np.full(n_features, ls), sn2)
    return [kern] * plant.state_dim


def setup_unit(config: ExperimentConfig, unit_seed: int) -> Unit:
    """Draw the plant, execute the prior task run, and build the prior model."""
    plant = systems.builtin(
        config.plant_name,
        derive_seed(config.plant_seed, unit_seed),
        **config.plant_options,
    )
    gains = default_gains(plant, kp=config.kp, ki=config.ki)
    task = systems.builtin_task(
        plant, config.task_name, horizon=config.horizon, scale=config.task_scale
    )
    est_noise_std = None
    if config.est_noise_rel > 0.0:
        spread = task.states.std(axis=0)
        floor = max(float(spread.max()), 1e-9)
        est_noise_std = config.est_noise_rel * np.maximum(spread, 0.1 * floor)
    sealed = SealedPlant(plant)
    prior_run = rollout(
        sealed,
        gains,
        model=None,
        reference=task,
        config=RolloutConfig(
            mode="experiment",
            seed=derive_seed(unit_seed, _PRIOR),
            estimation_noise_std=est_noise_std,
        ),
    )
    if prior_run.diverged:
        raise RuntimeError("prior task run diverged; check plant/gain settings")

    target_std = prior_run.residual_targets.std(axis=0)
    noise_std = config.noise_rel * target_std
    feats_idx = systems.default_feature_indices(plant, config.feature_kind)
    kernels = initial_kernels(config, plant, float(np.max(target_std)))
    model = gp.ResidualModel.create(kernels, feature_indices=feats_idx)

    # measured (possibly noisy) observations from the prior run, subsampled
    noisy = _apply_noise(
        prior_run.residual_targets, noise_std, derive_seed(unit_seed, _NOISE, 0)
    )
    feats = model.features(prior_run.residual_inputs)
    k = min(config.prior_budget, feats.shape[0])
    idx = gp.kmedoids_indices(feats, k, seed=derive_seed(unit_seed, _SUBSAMPLE, 0))
    model = model.condition_arrays(feats[idx], noisy[idx], trajectory_id=0)
    model = _refit(model, config, derive_seed(unit_seed, _FIT, 0))
    return Unit(
        config=config,
        unit_seed=unit_seed,
        plant=plant,
        gains=gains,
        task=task,
        prior_model=model,
        noise_std=noise_std,
        est_noise_std=est_noise_std,
        prior_steps=sealed.experiment_steps,
    )


def _apply_noise(targets, noise_std, seed):
    if np.all(noise_std == 0.0):
        return targets
    rng = np.random.default_rng(seed)
    return targets + noise_std * rng.standard_normal(targets.shape)


def _refit(model: gp.ResidualModel, config: ExperimentConfig, seed: int):
    if not config.hyperfit:
        return model
    kernels = []
    for c, channel in enumerate(model.channels):
        if len(channel.dataset) < 2:
            kernels.append(channel.kernel)
            continue
        kernels.append(
            gp.fit_hyperparameters(
                channel.dataset,
                channel.kernel,
                restarts=config.fit_restarts,
                seed=derive_seed(seed, c),
                max_iter=config.fit_max_iter,
            )
        )
    return model.with_kernels(kernels)


def new_arm_state(unit: Unit, arm: str) -> ArmState:
    return ArmState(
        arm=arm,
        sealed=SealedPlant(unit.plant),
        iteration=0,
        model=unit.prior_model,
    )


@dataclass(frozen=True)
class IterationOutput:
    record: IterationRecord
    state: "ArmState"
    selection: object
    executed: object
    evaluation: object


def run_iteration(unit: Unit, state: ArmState) -> IterationOutput:
    """One protocol iteration; returns the record plus the advanced state."""
    config = unit.config
    i = state.iteration
    budget = config.budgets[i]
    t0 = time.perf_counter()

    # seeds are shared across arms (paired streams); only the executed
    # reference differs between them
    selection = None
    if state.arm == "informative":
        # selection runs in the pure model-belief world; estimation noise
        # applies to real runs only
        sel_cfg = replace(
            config.selection,
            seed=derive_seed(unit.unit_seed, i, _SELECT),
            jobs=config.jobs,
        )
        selection = select_informative(
            state.sealed.nominal(), unit.gains, state.model, unit.task, sel_cfg
        )
        reference = selection.winner.reference
        executed_id = f"informative_{i}"
        info_cost = selection.winner.cost
    elif state.arm == "non_informative":
        reference = unit.task
        executed_id = f"task_{i}"
        info_cost = float("nan")
    else:  # no_learning
        reference = None
        executed_id = "none"
        info_cost = float("nan")

    diverged = False
    model = state.model
    pool_inputs = state.pool_inputs
    pool_targets = state.pool_targets
    run = None
    if reference is not None:
        run = rollout(
            state.sealed,
            unit.gains,
            state.model,
            reference,
            RolloutConfig(
                mode="experiment",
                seed=derive_seed(unit.unit_seed, i, _EXECUTE),
                noise_std=unit.noise_std,
                estimation_noise_std=unit.est_noise_std,
            ),
        )
        diverged = run.diverged
        if not diverged:
            pool_inputs = pool_inputs + (run.residual_inputs,)
            pool_targets = pool_targets + (run.measured_targets,)
            Z = np.vstack(pool_inputs)
            Y = np.vstack(pool_targets)
            if Z.shape[0] > config.pool_cap:
                keep = np.unique(
                    np.linspace(0, Z.shape[0] - 1, config.pool_cap).round()
                ).astype(np.int64)
                Z, Y = Z[keep], Y[keep]
            feats = unit.prior_model.features(Z)
            k = min(budget, feats.shape[0])
            idx = gp.kmedoids_indices(
                feats, k, seed=derive_seed(unit.unit_seed, i, _SUBSAMPLE)
            )
            model = unit.prior_model.condition_arrays(
                feats[idx], Y[idx], trajectory_id=i + 1
            )
            model = _refit(model, config, derive_seed(unit.unit_seed, i, _FIT))

    # the evaluation seed is shared by every arm, iteration, and budget of
    # a unit: scoring runs differ only through the model in the loop
    evaluation = rollout(
        state.sealed,
        unit.gains,
        model,
        unit.task,
        RolloutConfig(
            mode="evaluation",
            seed=derive_seed(unit.unit_seed, _EVALUATE),
            estimation_noise_std=unit.est_noise_std,
        ),
    )
    report = tracking_error(evaluation)
    record = IterationRecord(
        iteration=i,
        arm=state.arm,
        executed_id=executed_id,
        budget=budget,
        err_squared=report.squared,
        err_abs_axes=report.abs_axes,
        err_abs_mean=report.abs_mean,
        informative_cost=info_cost,
        wall_time=time.perf_counter() - t0,
        diverged=diverged,
        model=model,
    )
    next_state = ArmState(
        arm=state.arm,
        sealed=state.sealed,
        iteration=i + 1,
        model=model,
        pool_inputs=pool_inputs,
        pool_targets=pool_targets,
    )
    return IterationOutput(
        record=record,
        state=next_state,
        selection=selection,
        executed=run,
        evaluation=evaluation,
    )


def run_arm(unit: Unit, arm: str, iteration_hook=None):
    """All iterations of one arm; returns records and the final state."""
    state = new_arm_state(unit, arm)
    records = []
    for _ in range(unit.config.iterations):
        out = run_iteration(unit, state)
        state = out.state
        records.append(out.record)
        if iteration_hook is not None:
            iteration_hook(out)
    return records, state


@dataclass(frozen=True)
class ComparisonRow:
    arm: str
    budget: int
    seed: int
    err_squared: float
    err_abs_axes: np.ndarray
    err_abs_mean: float


@dataclass(frozen=True)
class ComparisonResult:
    rows: list
    improvements: dict
    win_fraction: float

    def rows_for(self, arm, budget=None):
        return [
            r
            for r in self.rows
            if r.arm == arm and (budget is None or r.budget == budget)
        ]


def compare_arms(config: ExperimentConfig, unit_hook=None) -> ComparisonResult:
    """Run every arm over every budget with paired seeds.

    `unit_hook(unit, arm, records, state)` is called after each arm of
    each unit (used by the CLI to persist outputs and support resume).
    """
    rows = []
    for unit_seed in config.seeds:
        unit = setup_unit(config, unit_seed)
        for arm in config.arms:
            records, state = run_arm(unit, arm)
            for rec in records:
                rows.append(
                    ComparisonRow(
                        arm=arm,
                        budget=rec.budget,
                        seed=unit_seed,
                        err_squared=rec.err_squared,
                        err_abs_axes=rec.err_abs_axes,
                        err_abs_mean=rec.err_abs_mean,
                    )
                )
            if unit_hook is not None:
                unit_hook(unit, arm, records, state)
    return summarize_comparison(rows, config)


def summarize_comparison(rows, config: ExperimentConfig) -> ComparisonResult:
    improvements = {}
    wins = 0
    total = 0
    if "informative" in config.arms and "non_informative" in config.arms:
        for budget in config.budgets:
            rel = []
            for seed in config.seeds:
                inf = [
                    r
                    for r in rows
                    if r.arm == "informative" and r.budget == budget and r.seed == seed
                ]
                rep = [
                    r
                    for r in rows
                    if r.arm == "non_informative"
                    and r.budget == budget
                    and r.seed == seed
                ]
                if not inf or not rep:
                    continue
                e_inf, e_rep = inf[0].err_abs_mean, rep[0].err_abs_mean
                if np.isfinite(e_inf) and np.isfinite(e_rep) and e_rep > 0:
                    rel.append((e_rep - e_inf) / e_rep)
                    total += 1
                    if e_inf < e_rep:
                        wins += 1
            improvements[budget] = float(np.median(rel)) if rel else float("nan")
    win_fraction = wins / total if total else float("nan")
    return ComparisonResult(rows=rows, improvements=improvements, win_fraction=win_fraction)


@dataclass(frozen=True)
class CorrelationResult:
    costs: np.ndarray
    errors: np.ndarray
    spearman_rho: float
    degenerate: bool
    excluded: int


def correlation_study(config: ExperimentConfig) -> CorrelationResult:
    """Execute several candidates for real and correlate informative cost
    with the post-update task tracking error."""
    if config.correlation_candidates < 6:
        raise ValueError("correlation study needs at least 6 candidates")
    unit = setup_unit(config, config.seeds[0])
    sealed = SealedPlant(unit.plant)
    sel_cfg = replace(
        config.selection,
        n_candidates=config.correlation_candidates - 1,
        include_task_candidate=True,
        seed=derive_seed(unit.unit_seed, _SELECT),
        jobs=config.jobs,
    )
    selection = select_informative(
        sealed.nominal(), unit.gains, unit.prior_model, unit.task, sel_cfg
    )
    budget = config.budgets[0]
    costs, errors = [], []
    excluded = 0
    for report in selection.reports:
        if not report.feasible:
            excluded += 1
            continue
        run = rollout(
            sealed,
            unit.gains,
            unit.prior_model,
            report.reference,
            RolloutConfig(
                mode="experiment",
                seed=derive_seed(unit.unit_seed, _EXECUTE, report.candidate_id),
                noise_std=unit.noise_std,
                estimation_noise_std=unit.est_noise_std,
            ),
        )
        if run.diverged:
            excluded += 1
            continue
        feats = unit.prior_model.features(run.residual_inputs)
        k = min(budget, feats.shape[0])
        idx = gp.kmedoids_indices(
            feats, k, seed=derive_seed(unit.unit_seed, _SUBSAMPLE, report.candidate_id)
        )
        model = unit.prior_model.condition_arrays(
            feats[idx], run.measured_targets[idx], trajectory_id=report.candidate_id
        )
        model = _refit(
            model, config, derive_seed(unit.unit_seed, _FIT, report.candidate_id)
        )
        evaluation = rollout(
            sealed,
            unit.gains,
            model,
            unit.task,
            RolloutConfig(
                mode="evaluation",
                seed=derive_seed(unit.unit_seed, _EVALUATE),
                estimation_noise_std=unit.est_noise_std,
            ),
        )
        err = tracking_error(evaluation)
        costs.append(report.cost)
        errors.append(err.abs_mean)
    costs = np.array(costs)
    errors = np.array(errors)
    if costs.size < 2 or np.allclose(costs, costs[0]) or np.allclose(errors, errors[0]):
        return CorrelationResult(costs, errors, float("nan"), True, excluded)
    rho = float(spearmanr(costs, errors).statistic)
    return CorrelationResult(costs, errors, rho, False, excluded)


@dataclass(frozen=True)
class GeneralizationRow:
    seed: int
    err_baseline: np.ndarray
    err_informative: np.ndarray
    err_replay: np.ndarray

    @property
    def axes_won(self) -> int:
        """Axes where the informative-trained model reduces error at least
        as much as the replay-trained one."""
        return int(np.sum(self.err_informative <= self.err_replay))


@dataclass(frozen=True)
class GeneralizationResult:
    rows: list
    majority_pass: bool


def generalization_study(config: ExperimentConfig) -> GeneralizationResult:
    """Train both arms at scale 1, evaluate on the task scaled up.

    Error reduction is measured against tracking without any model; the
    vote per seed asks for informative >= replay on most axes.
    """
    rows = []
    for unit_seed in config.seeds:
        unit = setup_unit(config, unit_seed)
        eval_task = systems.builtin_task(
            unit.plant,
            config.task_name,
            horizon=config.horizon,
            scale=config.task_scale * config.eval_scale,
        )

        def evaluate(model):
            res = rollout(
                SealedPlant(unit.plant),
                unit.gains,
                model,
                eval_task,
                RolloutConfig(
                    mode="evaluation",
                    seed=derive_seed(unit_seed, _EVALUATE, 99),
                    estimation_noise_std=unit.est_noise_std,
                ),
            )
            return tracking_error(res).abs_axes

        _, state_inf = run_arm(unit, "informative")
        _, state_rep = run_arm(unit, "non_informative")
        rows.append(
            GeneralizationRow(
                seed=unit_seed,
                err_baseline=evaluate(None),
                err_informative=evaluate(state_inf.model),
                err_replay=evaluate(state_rep.model),
            )
        )
    half = max((len(rows) + 1) // 2, 1)
    n_axes = rows[0].err_baseline.size if rows else 3
    need = min(2, n_axes)
    passes = sum(1 for r in rows if r.axes_won >= need)
    return GeneralizationResult(rows=rows, majority_pass=passes >= half)
