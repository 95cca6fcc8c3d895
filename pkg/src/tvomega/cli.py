"""Command line entry point: ``tvomega <command> --config FILE [options]``.

Commands
    gen          write per-step stream CSVs for every seed
    train-omega  fit one estimator per seed on the full stream and snapshot it
    benchmark    train every protocol at every step and score it on the next step
    rl           paired omega-weighted / unweighted replay TD runs
    validate     MMD between each step and its past, plain and omega-weighted
    plot         re-render figures from CSVs already in the output directory

``--config`` takes a file path or ``preset:NAME`` (see ``tvomega.config.presets``).
Exit status: 0 success, 1 invalid configuration or arguments, 2 I/O problem.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np
from scipy import stats

from . import omega as om
from . import plotting
from .config import ConfigError, ExperimentConfig, presets
from .drift import ScheduleError, generate_stream, write_stream_csv
from .nn import InputError
from .rl import run_rl_experiment
from .seeding import child_rng
from .trainers import benchmark_plan, mean_accuracy, run_benchmark, summarize
from .validate import fig3_protocol

log = logging.getLogger("tvomega")

MANIFEST = "manifest.json"
EXIT_OK, EXIT_CONFIG, EXIT_IO = 0, 1, 2


class ManifestMismatch(ConfigError):
    pass


# -- persistence helpers ------------------------------------------------------------


def _cell(v):
    return repr(v) if isinstance(v, float) else v


def write_rows(path, rows, fieldnames) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fieldnames, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: _cell(r[k]) for k in fieldnames})


def read_rows(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def prepare_out(cfg: ExperimentConfig, command: str, force: bool) -> Path:
    """Create the output directory, or check that an existing one was made with the same config."""
    out = Path(cfg.run.out)
    manifest = out / MANIFEST
    digest = cfg.digest()
    data = {"config_hash": digest, "commands": []}
    if manifest.exists():
        old = json.loads(manifest.read_text())
        if old.get("config_hash") != digest and not force:
            raise ManifestMismatch(f"{out} holds results for config {old.get('config_hash', '?')[:12]}; "
                                   "use --force to overwrite")
        if old.get("config_hash") == digest:
            data = old
    out.mkdir(parents=True, exist_ok=True)
    if command not in data["commands"]:
        data["commands"].append(command)
    manifest.write_text(json.dumps(data, indent=2, sort_keys=True) + "\n")
    (out / "config.ini").write_text(cfg.to_ini())
    return out


def _map(fn, items, jobs: int):
    if jobs > 1 and len(items) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(fn, items))
    return [fn(i) for i in items]


# -- commands -----------------------------------------------------------------------


def cmd_gen(cfg: ExperimentConfig, args) -> int:
    out = prepare_out(cfg, "gen", args.force)
    for seed in cfg.run.seeds:
        d = out / "streams" / f"seed_{seed}"
        d.mkdir(parents=True, exist_ok=True)
        stream = generate_stream(cfg.schedule, seed)
        for t in range(cfg.schedule.horizon):
            write_stream_csv(stream.at(t), d / f"step_{t:03d}.csv")
        log.info("seed %d: %d steps written to %s", seed, cfg.schedule.horizon, d)
    return EXIT_OK


def _fit_estimator(cfg: ExperimentConfig, seed: int) -> om.OmegaEstimator:
    o = cfg.omega
    sch = cfg.schedule
    n_labels = sch.n_labels if o.use_labels else None
    est = om.OmegaEstimator.create(sch.dim, sch.horizon, mode=o.mode, clip=o.clip, hidden=o.hidden,
                                   n_labels=n_labels, batchnorm=o.batchnorm, n_freqs=o.n_freqs,
                                   min_period=o.min_period, rng=child_rng(seed, "omega-init", o.mode))
    stream = generate_stream(sch, seed)
    return om.train(est, stream, epochs=cfg.run.omega_epochs, batch_size=o.batch_size,
                    rng=child_rng(seed, "omega-train", o.mode), lr=o.lr, regenerate=o.regenerate)


def cmd_train_omega(cfg: ExperimentConfig, args) -> int:
    out = prepare_out(cfg, "train-omega", args.force)
    for seed in cfg.run.seeds:
        est = _fit_estimator(cfg, seed)
        est.save(out / f"omega_seed{seed}.txt")
        log.info("seed %d: estimator saved", seed)
    return EXIT_OK


def _benchmark_seed(job):
    cfg, seed = job
    r = cfg.run
    return run_benchmark(cfg.schedule, r.protocols, [seed], cfg.model, cfg.omega, test_size=r.test_size,
                         start=r.start, stop=r.stop)


RUN_FIELDS = ("protocol", "seed", "t", "accuracy", "n_train", "wallclock_ms")
SUMMARY_FIELDS = ("protocol", "t", "mean_accuracy", "stderr", "n_seeds")


def cmd_benchmark(cfg: ExperimentConfig, args) -> int:
    r = cfg.run
    if args.dry_run:
        for seed, t, p in benchmark_plan(cfg.schedule, r.protocols, r.seeds, start=r.start):
            if r.stop is None or t < r.stop:
                print(f"seed={seed} t={t} protocol={p}")
        return EXIT_OK
    out = prepare_out(cfg, "benchmark", args.force)
    runs = [run for chunk in _map(_benchmark_seed, [(cfg, s) for s in r.seeds], args.jobs) for run in chunk]
    write_rows(out / "runs.csv", [row for run in runs for row in run.rows()], RUN_FIELDS)
    summary = summarize(runs)
    write_rows(out / "summary.csv", summary, SUMMARY_FIELDS)
    plotting.accuracy_plot(summary, out / "accuracy.svg")
    for p in r.protocols:
        print(f"{p}\tmean_accuracy(t>={r.score_from})={mean_accuracy(runs, p, r.score_from):.4f}")
    return EXIT_OK


def _rl_seed(job):
    cfg, seed, baseline_only, unit = job
    return run_rl_experiment(cfg.rl, [seed], baseline_only=baseline_only, force_unit_omega=unit)[seed]


CURVE_FIELDS = ("seed", "learner", "episode", "eval_return", "buffer_size", "mean_omega")


def paired_summary(results: dict) -> tuple[list[dict], dict]:
    """Per-seed final-quarter returns and a paired t-test of weighted minus unweighted."""
    rows = []
    for seed, pair in sorted(results.items()):
        row = {"seed": seed, "unweighted": pair["unweighted"].final_quarter_mean()}
        if "weighted" in pair:
            row["weighted"] = pair["weighted"].final_quarter_mean()
            row["difference"] = row["weighted"] - row["unweighted"]
        rows.append(row)
    stats_out = {}
    if rows and "difference" in rows[0]:
        d = np.array([r["difference"] for r in rows])
        if len(d) > 1 and np.ptp(d) > 0:
            p = float(stats.ttest_1samp(d, 0.0).pvalue)
        else:
            # identical differences: no evidence of a shift unless they are all nonzero
            p = 1.0 if np.all(d == 0) else 0.0
        stats_out = {"wins": int(np.sum(d > 0)), "n": len(d), "mean_difference": float(d.mean()), "p_value": p}
    return rows, stats_out


def cmd_rl(cfg: ExperimentConfig, args) -> int:
    if args.dry_run:
        for seed in cfg.run.seeds:
            learners = ["unweighted"] if args.baseline_only else ["unweighted", "weighted"]
            print(f"seed={seed} episodes={cfg.rl.episodes} learners={','.join(learners)}")
        return EXIT_OK
    out = prepare_out(cfg, "rl", args.force)
    jobs = [(cfg, s, args.baseline_only, False) for s in cfg.run.seeds]
    results = dict(zip(cfg.run.seeds, _map(_rl_seed, jobs, args.jobs)))
    curves = {}
    for seed, pair in results.items():
        rows = []
        for learner, curve in sorted(pair.items()):
            rows += [dict(row, learner=learner) for row in curve.rows()]
            curves.setdefault(learner, []).append(curve.eval_returns)
        write_rows(out / f"rl_curves_seed{seed}.csv", rows, CURVE_FIELDS)
    rows, test = paired_summary(results)
    fields = ["seed", "unweighted"] + (["weighted", "difference"] if test else [])
    write_rows(out / "rl_summary.csv", rows, fields)
    plotting.rl_plot(curves, out / "rl_returns.svg")
    if test:
        print(f"weighted wins {test['wins']}/{test['n']} seeds, mean difference {test['mean_difference']:.3f}, "
              f"paired t p={test['p_value']:.3g}")
    return EXIT_OK


REPORT_FIELDS = ("t", "mmd_unweighted", "mmd_weighted", "bandwidth", "n_current", "n_past",
                 "mmd_unweighted_pos", "mmd_weighted_pos")


def cmd_validate(cfg: ExperimentConfig, args) -> int:
    out = Path(cfg.run.out)
    snaps = {s: out / f"omega_seed{s}.txt" for s in cfg.run.seeds}
    missing = [str(p) for p in snaps.values() if not p.exists()]
    if missing:
        raise FileNotFoundError(f"missing estimator snapshot(s): {', '.join(missing)}; run train-omega first")
    out = prepare_out(cfg, "validate", args.force)
    for seed, path in snaps.items():
        est = om.OmegaEstimator.load(path)
        report = fig3_protocol(generate_stream(cfg.schedule, seed), est)
        report.write_csv(out / f"mmd_seed{seed}.csv")
        plotting.mmd_plot(report.records, out / f"mmd_seed{seed}.svg")
    return EXIT_OK


def cmd_plot(cfg: ExperimentConfig, args) -> int:
    out = Path(cfg.run.out)
    if not out.is_dir():
        raise FileNotFoundError(f"{out} does not exist")
    made = 0
    if (out / "summary.csv").exists():
        rows = read_rows(out / "summary.csv")
        for r in rows:
            r["t"] = int(r["t"])
        plotting.accuracy_plot(rows, out / "accuracy.svg")
        made += 1
    for path in sorted(out.glob("mmd_seed*.csv")):
        plotting.mmd_plot(read_rows(path), path.with_suffix(".svg"))
        made += 1
    curve_files = sorted(out.glob("rl_curves_seed*.csv"))
    if curve_files:
        curves = {}
        for path in curve_files:
            by = {}
            for r in read_rows(path):
                by.setdefault(r["learner"], []).append(float(r["eval_return"]))
            for k, v in by.items():
                curves.setdefault(k, []).append(v)
        plotting.rl_plot(curves, out / "rl_returns.svg")
        made += 1
    if not made:
        raise FileNotFoundError(f"nothing to plot in {out}")
    return EXIT_OK


COMMANDS = {"gen": cmd_gen, "train-omega": cmd_train_omega, "benchmark": cmd_benchmark, "rl": cmd_rl,
            "validate": cmd_validate, "plot": cmd_plot}


def load_config(spec: str) -> ExperimentConfig:
    if spec.startswith("preset:"):
        name = spec.split(":", 1)[1]
        table = presets()
        if name not in table:
            raise ConfigError(f"unknown preset {name!r}; choose from {sorted(table)}")
        return table[name]
    return ExperimentConfig.load(spec)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tvomega", description="Time-varying importance weights for drifting data.")
    parser.add_argument("command", choices=sorted(COMMANDS))
    parser.add_argument("--config", required=True, help="config file, or preset:NAME")
    parser.add_argument("--seed", type=int, help="run a single seed instead of the configured list")
    parser.add_argument("--out", help="output directory (overrides run.out)")
    parser.add_argument("--jobs", type=int, default=1, help="worker processes, one seed per task")
    parser.add_argument("--dry-run", action="store_true", help="print the work plan and write nothing")
    parser.add_argument("--force", action="store_true", help="overwrite results made with another config")
    parser.add_argument("--baseline-only", action="store_true", help="rl: run only the unweighted learner")
    parser.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        if args.jobs < 1:
            raise ConfigError("--jobs must be >= 1")
        cfg = load_config(args.config).with_overrides(seed=args.seed, out=args.out).validate()
        return COMMANDS[args.command](cfg, args)
    except (ConfigError, ScheduleError, InputError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except BrokenPipeError:
        return EXIT_OK
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
