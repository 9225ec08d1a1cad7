"""Command-line front end.

Commands:

* ``select``   - one selection round; writes the candidate report and the
  winning reference trajectory.
* ``run``      - the full arm comparison over all budgets and seeds;
  writes per-iteration artifacts and a top-level comparison.csv.
* ``correlate``- execute candidates for real and report the informative
  cost vs tracking error correlation.
* ``plotdata`` - tidy CSVs (scatter, bars, phase) from a completed run.
* ``verify``   - fast built-in oracle checks; nonzero exit on failure.

Configs are flat `section.key = value` text; every resolved parameter is
echoed and hashed into the run manifest before any computation starts.
Exit codes: 2 config error, 3 selection failure, 4 incomplete run input.
"""

from __future__ import annotations

import argparse
import csv
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__, kvformat, pipeline, systems
from .simulate import export_rollout_csv, tracking_error
from .trajgen import SelectionConfig, SelectionError, export_selection_csv


def build_config(kv: dict, seed=None, jobs=None, arms=None, budgets=None):
    """Resolve a parsed config file into an ExperimentConfig."""
    plant_name = kvformat.require(kv, "plant.name")
    selection = SelectionConfig(
        n_candidates=kvformat.get_int(kv, "selection.candidates", 20),
        n_tones=kvformat.get_int(kv, "selection.tones", 2),
        f_max=kvformat.get_float(kv, "selection.f_max", 2.0),
        amplitude_caps=(
            np.array(kvformat.get_floats(kv, "selection.amplitude_caps"))
            if "selection.amplitude_caps" in kv
            else None
        ),
        n_rollouts=kvformat.get_int(kv, "selection.rollouts", 3),
        region_rollouts=kvformat.get_int(kv, "selection.region_rollouts", 3),
        region_samples=kvformat.get_int(kv, "selection.region_samples", 4096),
        epsilon=(
            kvformat.get_float(kv, "selection.epsilon")
            if "selection.epsilon" in kv
            else None
        ),
        eval_count=kvformat.get_int(kv, "selection.eval_count", 256),
        subsample_budget=kvformat.get_int(kv, "selection.subsample_budget", 40),
        include_task_candidate=kvformat.get_bool(
            kv, "selection.include_task_candidate", False
        ),
    )
    if budgets is None:
        budgets = tuple(kvformat.get_ints(kv, "run.budgets", [20, 40, 60, 80]))
    if arms is None:
        arms = tuple(
            kvformat.get_strs(kv, "run.arms", ["informative", "non_informative"])
        )
    seeds = tuple(kvformat.get_ints(kv, "run.seeds", [0]))
    if seed is not None:
        seeds = tuple(int(seed) + i for i in range(len(seeds)))
    config = pipeline.ExperimentConfig(
        plant_name=plant_name,
        plant_seed=kvformat.get_int(kv, "plant.seed", 0),
        task_name=kvformat.get_str(kv, "task.name", "figure8"),
        horizon=kvformat.get_int(kv, "task.horizon", 400),
        task_scale=kvformat.get_float(kv, "task.scale", 1.0),
        feature_kind=kvformat.get_str(kv, "model.features", "input"),
        kernel_signal_variance=(
            kvformat.get_float(kv, "kernel.signal_variance")
            if "kernel.signal_variance" in kv
            else None
        ),
        kernel_lengthscale=(
            kvformat.get_float(kv, "kernel.lengthscale")
            if "kernel.lengthscale" in kv
            else None
        ),
        kernel_noise_variance=(
            kvformat.get_float(kv, "kernel.noise_variance")
            if "kernel.noise_variance" in kv
            else None
        ),
        kp=kvformat.get_float(kv, "controller.kp", 0.5),
        ki=(
            kvformat.get_float(kv, "controller.ki")
            if "controller.ki" in kv
            else None
        ),
        iterations=kvformat.get_int(kv, "run.iterations", len(budgets)),
        budgets=budgets,
        prior_budget=kvformat.get_int(kv, "run.prior_budget", 40),
        arms=arms,
        seeds=seeds,
        noise_rel=kvformat.get_float(kv, "run.noise_rel", 0.01),
        hyperfit=kvformat.get_bool(kv, "run.hyperfit", True),
        fit_restarts=kvformat.get_int(kv, "run.fit_restarts", 3),
        fit_max_iter=kvformat.get_int(kv, "run.fit_max_iter", 120),
        selection=selection,
        eval_scale=kvformat.get_float(kv, "run.eval_scale", 1.65),
        correlation_candidates=kvformat.get_int(kv, "run.correlation_candidates", 6),
        pool_cap=kvformat.get_int(kv, "run.pool_cap", 1200),
        jobs=int(jobs) if jobs else kvformat.get_int(kv, "run.jobs", 1),
    )
    return config


def resolved_items(config) -> dict:
    """Flatten every resolved parameter for the manifest hash."""
    items = {}
    for key, value in sorted(vars(config).items()):
        if key == "selection":
            for skey, svalue in sorted(vars(value).items()):
                items[f"selection.{skey}"] = _plain(svalue)
        else:
            items[key] = _plain(value)
    return items


def _plain(value):
    if value is None:
        return "none"
    if isinstance(value, np.ndarray):
        return list(map(float, value.ravel()))
    if isinstance(value, dict):
        return str(sorted(value.items()))
    return value


def write_manifest(outdir: Path, command: str, config, config_path, master_seed):
    items = resolved_items(config)
    manifest = {
        "command": command,
        "config_path": str(config_path),
        "config_hash": kvformat.kv_hash(items),
        "master_seed": master_seed,
        "toolkit_version": __version__,
        "timestamp": time.strftime("%Y-%m-%dT%H:%M:%S"),
    }
    outdir.mkdir(parents=True, exist_ok=True)
    kvformat.dump_kv(outdir / "manifest.kv", manifest)
    kvformat.dump_kv(outdir / "config.resolved.kv", items)


def _master_seed(config) -> int:
    return config.seeds[0] if config.seeds else 0


def cmd_select(args) -> int:
    kv = kvformat.load_kv(args.config)
    config = build_config(kv, seed=args.seed, jobs=args.jobs)
    outdir = Path(args.outdir)
    write_manifest(outdir, "select", config, args.config, _master_seed(config))
    unit = pipeline.setup_unit(config, _master_seed(config))
    sel_cfg = replace(
        config.selection,
        seed=pipeline.derive_seed(unit.unit_seed, 1, 0, 1),
        jobs=config.jobs,
    )
    from .trajgen import select_informative

    result = select_informative(
        pipeline.SealedPlant(unit.plant).nominal(),
        unit.gains,
        unit.prior_model,
        unit.task,
        sel_cfg,
    )
    export_selection_csv(result, outdir / "selection.csv")
    result.winner.reference.save_csv(outdir / "winner_ref.csv")
    unit.task.save_csv(outdir / "task_ref.csv")
    result.region.save_csv(outdir / "region.csv")
    print(
        f"selected candidate {result.winner.candidate_id} "
        f"(cost {result.winner.cost:.6g}) out of {len(result.reports)}"
    )
    return 0


def _rows_path(outdir: Path, arm: str, seed: int) -> Path:
    return outdir / "_units" / f"rows_{arm}_{seed}.csv"


def _write_unit_rows(path: Path, records) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(
            ["iteration", "budget", "err_squared", "err_abs_mean"]
            + [f"err_abs_{i}" for i in range(len(records[0].err_abs_axes))]
        )
        for rec in records:
            row = [
                str(rec.iteration),
                str(rec.budget),
                repr(float(rec.err_squared)),
                repr(float(rec.err_abs_mean)),
            ]
            row += [repr(float(v)) for v in rec.err_abs_axes]
            writer.writerow(row)


def _load_unit_rows(path: Path, arm: str, seed: int):
    rows = []
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        next(reader)
        for raw in reader:
            rows.append(
                pipeline.ComparisonRow(
                    arm=arm,
                    budget=int(raw[1]),
                    seed=seed,
                    err_squared=float(raw[2]),
                    err_abs_axes=np.array([float(v) for v in raw[4:]]),
                    err_abs_mean=float(raw[3]),
                )
            )
    return rows


def _axis_names(n: int) -> list:
    return ["x", "y", "z"][:n] if n <= 3 else [str(i) for i in range(n)]


def write_comparison_csv(path: Path, rows) -> None:
    n = len(rows[0].err_abs_axes) if rows else 3
    header = ["arm", "budget", "seed", "err_sq"] + [
        f"err_abs_{a}" for a in _axis_names(n)
    ]
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for r in rows:
            row = [r.arm, str(r.budget), str(r.seed), repr(float(r.err_squared))]
            row += [repr(float(v)) for v in r.err_abs_axes]
            writer.writerow(row)


def _persist_iteration(unit_dir: Path, out: pipeline.IterationOutput) -> None:
    it_dir = unit_dir / f"iter_{out.record.iteration}"
    it_dir.mkdir(parents=True, exist_ok=True)
    if out.executed is not None:
        export_rollout_csv(out.executed, it_dir / "executed.csv")
    export_rollout_csv(out.evaluation, it_dir / "evaluation.csv")
    if out.selection is not None:
        export_selection_csv(out.selection, it_dir / "selection.csv")
        out.selection.winner.reference.save_csv(it_dir / "winner_ref.csv")
    out.record.model.save(it_dir / "model")
    rec = out.record
    kvformat.dump_kv(
        it_dir / "record.kv",
        {
            "iteration": rec.iteration,
            "arm": rec.arm,
            "executed_id": rec.executed_id,
            "budget": rec.budget,
            "err_squared": rec.err_squared,
            "err_abs_mean": rec.err_abs_mean,
            "err_abs_axes": rec.err_abs_axes,
            "informative_cost": rec.informative_cost,
            "wall_time": rec.wall_time,
            "diverged": rec.diverged,
        },
    )


def cmd_run(args) -> int:
    kv = kvformat.load_kv(args.config)
    arms = tuple(args.arms.split(",")) if args.arms else None
    budgets = (
        tuple(int(b) for b in args.budgets.split(",")) if args.budgets else None
    )
    config = build_config(
        kv, seed=args.seed, jobs=args.jobs, arms=arms, budgets=budgets
    )
    outdir = Path(args.outdir)
    write_manifest(outdir, "run", config, args.config, _master_seed(config))

    all_rows = []
    for unit_seed in config.seeds:
        pending = [
            arm
            for arm in config.arms
            if not (args.resume and _rows_path(outdir, arm, unit_seed).exists())
        ]
        unit = pipeline.setup_unit(config, unit_seed) if pending else None
        if unit is not None:
            unit.task.save_csv(outdir / "task_ref.csv")
        for arm in config.arms:
            rows_file = _rows_path(outdir, arm, unit_seed)
            if arm not in pending:
                all_rows.extend(_load_unit_rows(rows_file, arm, unit_seed))
                continue
            unit_dir = outdir / arm / f"seed_{unit_seed}"
            records, _ = pipeline.run_arm(
                unit, arm, iteration_hook=lambda out: _persist_iteration(unit_dir, out)
            )
            _write_unit_rows(rows_file, records)
            all_rows.extend(_load_unit_rows(rows_file, arm, unit_seed))
    result = pipeline.summarize_comparison(all_rows, config)
    write_comparison_csv(outdir / "comparison.csv", result.rows)
    summary = {"win_fraction": result.win_fraction}
    for budget, med in result.improvements.items():
        summary[f"median_improvement_budget_{budget}"] = med
    kvformat.dump_kv(outdir / "summary.kv", summary)
    for budget, med in result.improvements.items():
        print(f"budget {budget}: median improvement {med:+.2%}")
    if result.improvements:
        print(f"pooled win fraction: {result.win_fraction:.2%}")
    print(f"wrote {outdir / 'comparison.csv'}")
    return 0


def cmd_correlate(args) -> int:
    kv = kvformat.load_kv(args.config)
    config = build_config(kv, seed=args.seed, jobs=args.jobs)
    outdir = Path(args.outdir)
    write_manifest(outdir, "correlate", config, args.config, _master_seed(config))
    result = pipeline.correlation_study(config)
    with open(outdir / "correlation.csv", "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["candidate", "cost", "err_abs_mean"])
        for i, (c, e) in enumerate(zip(result.costs, result.errors)):
            writer.writerow([str(i), repr(float(c)), repr(float(e))])
    kvformat.dump_kv(
        outdir / "correlation.kv",
        {
            "spearman_rho": result.spearman_rho,
            "degenerate": result.degenerate,
            "excluded": result.excluded,
        },
    )
    if result.degenerate:
        print("correlation degenerate (identical candidates or errors)")
    else:
        print(f"spearman rho = {result.spearman_rho:.3f}")
    return 0


def cmd_plotdata(args) -> int:
    run_dir = Path(args.run_dir)
    outdir = Path(args.outdir) if args.outdir else run_dir / "plotdata"
    comparison = run_dir / "comparison.csv"
    task_ref = run_dir / "task_ref.csv"
    missing = [str(p) for p in (comparison, task_ref) if not p.exists()]
    if missing:
        print(
            "incomplete run directory, missing: " + ", ".join(missing),
            file=sys.stderr,
        )
        return 4
    outdir.mkdir(parents=True, exist_ok=True)

    # bars: mean and std of err_abs over seeds per (arm, budget)
    with open(comparison, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        rows = list(reader)
    err_idx = header.index("err_sq")
    groups = {}
    for row in rows:
        key = (row[0], row[1])
        mean_abs = np.mean([float(v) for v in row[err_idx + 1 :]])
        groups.setdefault(key, []).append(mean_abs)
    with open(outdir / "bars.csv", "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["arm", "budget", "mean_err_abs", "std_err_abs", "count"])
        for (arm, budget), vals in sorted(groups.items()):
            writer.writerow(
                [
                    arm,
                    budget,
                    repr(float(np.mean(vals))),
                    repr(float(np.std(vals))),
                    str(len(vals)),
                ]
            )

    # scatter: cost vs error pairs when a correlation study is present
    corr = run_dir / "correlation.csv"
    if corr.exists():
        with open(corr, "r", encoding="utf-8", newline="") as fh:
            reader = csv.reader(fh)
            next(reader)
            pairs = [(r[1], r[2]) for r in reader]
        with open(outdir / "scatter.csv", "w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["cost", "err_abs_mean"])
            for c, e in pairs:
                writer.writerow([c, e])

    # phase: state-derivative vs state for task and the first modified ref
    winner = None
    for cand in sorted(run_dir.glob("informative/seed_*/iter_0/winner_ref.csv")):
        winner = cand
        break
    if winner is None and (run_dir / "winner_ref.csv").exists():
        winner = run_dir / "winner_ref.csv"
    with open(outdir / "phase.csv", "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["axis", "x", "xdot", "which"])
        for which, path in (("task", task_ref), ("modified", winner)):
            if path is None:
                continue
            states, dt = _load_ref_states(path)
            xdot = np.diff(states, axis=0) / dt
            for axis in range(states.shape[1]):
                for k in range(xdot.shape[0]):
                    writer.writerow(
                        [
                            str(axis),
                            repr(float(states[k, axis])),
                            repr(float(xdot[k, axis])),
                            which,
                        ]
                    )
    print(f"wrote plot data under {outdir}")
    return 0


def _load_ref_states(path):
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        n = sum(1 for c in header if c.startswith("x_"))
        rows = [[float(v) for v in row[1 : 1 + n]] for row in reader]
    # sampling time is not stored in the trajectory CSV; phase shape is
    # invariant to it, so a unit step is fine
    return np.array(rows), 1.0


def cmd_verify(args) -> int:
    """Built-in oracle checks (fast subset of the acceptance suite)."""
    from . import verify as verify_mod

    failures = verify_mod.run_all(quick=True)
    return 0 if failures == 0 else 1


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="infotraj",
        description="Active model learning with informative trajectories",
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p, needs_config=True):
        if needs_config:
            p.add_argument("--config", required=True, help="kv config file")
        p.add_argument("--seed", type=int, default=None, help="master seed override")
        p.add_argument("--jobs", type=int, default=None, help="worker cap")
        p.add_argument("--outdir", default="infotraj_out", help="output directory")

    p_select = sub.add_parser("select", help="run one selection round")
    add_common(p_select)
    p_select.set_defaults(func=cmd_select)

    p_run = sub.add_parser("run", help="full arm comparison")
    add_common(p_run)
    p_run.add_argument("--resume", action="store_true", help="reuse finished units")
    p_run.add_argument("--arms", default=None, help="comma-separated arm list")
    p_run.add_argument("--budgets", default=None, help="comma-separated budgets")
    p_run.set_defaults(func=cmd_run)

    p_corr = sub.add_parser("correlate", help="cost vs error correlation study")
    add_common(p_corr)
    p_corr.set_defaults(func=cmd_correlate)

    p_plot = sub.add_parser("plotdata", help="tidy plot CSVs from a run")
    p_plot.add_argument("run_dir", help="completed run directory")
    p_plot.add_argument("--outdir", default=None)
    p_plot.set_defaults(func=cmd_plotdata)

    p_verify = sub.add_parser("verify", help="built-in oracle checks")
    p_verify.set_defaults(func=cmd_verify)

    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except kvformat.KVError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except SelectionError as exc:
        print(f"selection error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
