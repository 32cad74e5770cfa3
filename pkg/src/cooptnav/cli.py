"""Operator surface: train / eval / replay / convlab commands.

Every command takes --scenario, --config, --seed, --out and --threads
where meaningful, writes its delimited output (JSONL / JSON / CSV) plus a
vector figure, and finishes with a run manifest. Exit codes: 0 success,
1 runtime failure, 2 configuration error. COOPT_LOG sets verbosity.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import convlab, pipeline, plots
from .coopt import TrainConfig
from .errors import ConfigurationError, CooptError
from .scenarios import resolve_scenario
from .world import EpisodeLog

log = logging.getLogger("cooptnav")

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_CONFIG = 2


def _setup_logging():
    level = os.environ.get("COOPT_LOG", "INFO").upper()
    logging.basicConfig(
        level=getattr(logging, level, logging.INFO),
        format="%(asctime)s %(name)s %(levelname)s %(message)s")


def _load_json(path):
    try:
        with open(path) as fh:
            return json.load(fh)
    except FileNotFoundError:
        raise ConfigurationError(f"no such config file: {path}")
    except json.JSONDecodeError as err:
        raise ConfigurationError(f"{path}: invalid JSON: {err}")


def _out_dir(args):
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_train(args):
    scenario = resolve_scenario(args.scenario)
    cfg_obj = _load_json(args.config) if args.config else {}
    if args.seed is not None:
        cfg_obj["seed"] = args.seed
    if args.threads is not None:
        cfg_obj["threads"] = args.threads
    try:
        cfg = TrainConfig.from_json(cfg_obj)
    except TypeError as err:
        raise ConfigurationError(f"bad train config: {err}")
    out = _out_dir(args)

    def checkpoint_cb(k, policy, value, gen):
        models_now = pipeline.Models(models.policy_spec, policy,
                                     models.value_spec, value,
                                     models.gen_spec, gen)
        pipeline.save_checkpoints(models_now, out)

    models = pipeline.build_models(scenario, cfg.seed)
    log.info("training %s for %d outer iterations", scenario.scenario_id,
             cfg.outer_iters)
    record, trained = pipeline.train(scenario, cfg, models, checkpoint_cb)
    record_path = out / "record.jsonl"
    record.save(record_path)
    ckpts = pipeline.save_checkpoints(trained, out)
    curve_path = out / "training_curve.svg"
    plots.render_training_curve(record, curve_path)
    outputs = {"record.jsonl": str(record_path),
               "training_curve.svg": str(curve_path), **ckpts}
    pipeline.write_manifest(out / "manifest.json", "train", sys.argv[1:],
                            cfg.to_json(), cfg.seed, outputs)
    log.info("wrote %s", record_path)
    return EXIT_OK


def cmd_eval(args):
    scenario = resolve_scenario(args.scenario)
    envgen_path = args.envgen
    policy, policy_spec, gen_spec, gen = pipeline.load_checkpoints(
        scenario, args.policy, envgen_path)
    modes = args.modes.split(",") if args.modes else (
        ["co_opt", "hand_designed", "random_layout"] if gen is not None
        else ["hand_designed", "random_layout"])
    for mode in modes:
        if mode not in pipeline.EVAL_MODES:
            raise ConfigurationError(f"unknown eval mode {mode!r}")
    out = _out_dir(args)
    seed = args.seed if args.seed is not None else 0
    reports = {}
    outputs = {}
    for mode in modes:
        report, logs = pipeline.evaluate(
            scenario, policy, policy_spec, mode, args.tasks, args.trials,
            seed, gen=gen, gen_spec=gen_spec, threads=args.threads or 1,
            keep_logs=args.save_episodes)
        reports[mode] = report
        path = out / f"metrics_{mode}.json"
        report.save(path)
        outputs[path.name] = str(path)
        log.info("%s: spl=%.3f pctspeed=%.3f numcoll=%.3f diffacc=%.3f",
                 mode, report.spl, report.pctspeed, report.numcoll,
                 report.diffacc)
        if args.save_episodes and logs:
            ep_path = out / f"episode_{mode}.csv"
            logs[0].save_csv(ep_path)
            outputs[ep_path.name] = str(ep_path)
    bars_path = out / "metrics.svg"
    plots.render_metric_bars(reports, bars_path)
    outputs["metrics.svg"] = str(bars_path)
    pipeline.write_manifest(out / "manifest.json", "eval", sys.argv[1:],
                            {"tasks": args.tasks, "trials": args.trials,
                             "modes": modes}, seed, outputs)
    return EXIT_OK


def cmd_replay(args):
    try:
        episode = EpisodeLog.load_csv(args.episode)
    except FileNotFoundError:
        raise ConfigurationError(f"no such episode file: {args.episode}")
    except ValueError as err:
        log.error("failed to parse %s: %s", args.episode, err)
        return EXIT_RUNTIME
    arena = None
    if args.scenario:
        arena = resolve_scenario(args.scenario).arena
    out = _out_dir(args)
    path = out / (Path(args.episode).stem + ".svg")
    plots.render_episode(episode, path, arena=arena,
                         title=episode.scenario_id or None)
    pipeline.write_manifest(out / "manifest.json", "replay", sys.argv[1:],
                            {"episode": str(args.episode)}, 0,
                            {path.name: str(path)})
    log.info("wrote %s", path)
    return EXIT_OK


def cmd_convlab(args):
    cfg = _load_json(args.config) if args.config else {"sweeps": []}
    entries = cfg.get("sweeps", [])
    for entry in entries:
        if entry.get("problem") not in convlab.BUNDLED_PROBLEMS:
            raise ConfigurationError(
                f"unknown problem {entry.get('problem')!r}; bundled: "
                f"{', '.join(convlab.BUNDLED_PROBLEMS)}")
    out = _out_dir(args)
    rows = convlab.run_sweep(entries)
    ratios = convlab.halving_ratios(rows)
    csv_path = out / "sweep.csv"
    with open(csv_path, "w") as fh:
        fh.write(convlab.sweep_csv(rows))
        for ratio in ratios:
            fh.write(f"# halving_ratio,{ratio!r}\n")
    fig_path = out / "sweep.svg"
    plots.render_sweep(rows, fig_path)
    pipeline.write_manifest(out / "manifest.json", "convlab", sys.argv[1:],
                            cfg, 0, {"sweep.csv": str(csv_path),
                                     "sweep.svg": str(fig_path)})
    n_fail = sum(not r["satisfied"] for r in rows)
    for row in rows:
        status = "ok" if row["satisfied"] else "VIOLATED"
        log.info("%s dalpha=%g eps=%g: max_error=%.3e bound=%.3e [%s]",
                 row["problem"], row["delta_alpha"], row["eps"],
                 row["max_error"], row["bound"], status)
    if n_fail:
        log.error("%d of %d bound checks failed", n_fail, len(rows))
        return EXIT_RUNTIME
    return EXIT_OK


def build_parser():
    parser = argparse.ArgumentParser(
        prog="cooptnav",
        description="Co-optimize multi-agent navigation policies and "
                    "reconfigurable obstacle layouts.")
    sub = parser.add_subparsers(dest="command", required=True)

    train = sub.add_parser("train", help="run the coordinated optimization")
    train.add_argument("--scenario", required=True,
                       help="built-in name or scenario JSON path")
    train.add_argument("--config", help="TrainConfig JSON path")
    train.add_argument("--seed", type=int)
    train.add_argument("--out", required=True)
    train.add_argument("--threads", type=int)
    train.set_defaults(func=cmd_train)

    ev = sub.add_parser("eval", help="evaluate checkpoints over random tasks")
    ev.add_argument("--scenario", required=True)
    ev.add_argument("--policy", required=True, help="policy checkpoint JSON")
    ev.add_argument("--envgen", help="generator checkpoint JSON")
    ev.add_argument("--config", help="(unused, reserved)")
    ev.add_argument("--tasks", type=int, default=30)
    ev.add_argument("--trials", type=int, default=10)
    ev.add_argument("--modes", help="comma list of "
                    + ",".join(pipeline.EVAL_MODES))
    ev.add_argument("--seed", type=int)
    ev.add_argument("--out", required=True)
    ev.add_argument("--threads", type=int, default=1)
    ev.add_argument("--save-episodes", action="store_true")
    ev.set_defaults(func=cmd_eval)

    rp = sub.add_parser("replay", help="render an exported episode CSV")
    rp.add_argument("--episode", required=True)
    rp.add_argument("--scenario",
                    help="optional; frames the plot with the arena bounds")
    rp.add_argument("--config", help="(unused, reserved)")
    rp.add_argument("--seed", type=int, help="(unused, reserved)")
    rp.add_argument("--threads", type=int, help="(unused, reserved)")
    rp.add_argument("--out", required=True)
    rp.set_defaults(func=cmd_replay)

    cv = sub.add_parser("convlab", help="tracking-bound sweeps")
    cv.add_argument("--config", required=True, help="sweep config JSON")
    cv.add_argument("--scenario", help="(unused, reserved)")
    cv.add_argument("--out", required=True)
    cv.add_argument("--seed", type=int, help="(unused, reserved)")
    cv.add_argument("--threads", type=int, help="(unused, reserved)")
    cv.set_defaults(func=cmd_convlab)
    return parser


def main(argv=None):
    _setup_logging()
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigurationError as err:
        log.error("configuration error: %s", err)
        return EXIT_CONFIG
    except CooptError as err:
        log.error("runtime failure: %s", err)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
