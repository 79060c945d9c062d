"""Command-line front end: ``affordance-rl <subcommand> [options]``.

Exit codes: 0 when the requested artifact was fully produced, 1 for a replay
mismatch or I/O failure, 2 for bad usage or configuration, 3 for a missing
prerequisite artifact, 4 when training diverged, 5 for unusable data.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

OUT_ENV = "AFFORDANCE_RL_OUT"
EXIT_OK, EXIT_FAIL, EXIT_USAGE, EXIT_MISSING, EXIT_DIVERGED, EXIT_DATA = 0, 1, 2, 3, 4, 5

log = logging.getLogger("affordance_rl")


def _common() -> argparse.ArgumentParser:
    # SUPPRESS defaults let the flags appear before or after the subcommand
    p = argparse.ArgumentParser(add_help=False)
    g = p.add_argument_group("global options")
    g.add_argument("--config", default=argparse.SUPPRESS, help="TOML run config (defaults if omitted)")
    g.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="root seed, overrides the config")
    g.add_argument("--out", default=argparse.SUPPRESS,
                   help=f"run directory (default: ${OUT_ENV} or ./runs)")
    g.add_argument("--deterministic", action="store_true", default=argparse.SUPPRESS,
                   help="single-threaded numerics for bitwise-reproducible runs")
    g.add_argument("--threads", type=int, default=argparse.SUPPRESS, help="BLAS thread limit")
    g.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE", default=argparse.SUPPRESS,
                   help="override one config value (repeatable)")
    g.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS)
    return p


def build_parser() -> argparse.ArgumentParser:
    common = _common()
    parser = argparse.ArgumentParser(
        prog="affordance-rl", parents=[common],
        description="Train a reaching arm on buttons and sliders, label its motions, "
                    "and track how its perceived affordance shifts on a deceptive widget.",
        epilog=f"Outputs land in the run directory ({OUT_ENV} sets the default).",
    )
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")

    p = sub.add_parser("train", parents=[common], help="phase 1: PPO on buttons and sliders")
    p.add_argument("--updates", type=int, help="override phase1.updates")

    p = sub.add_parser("collect-labels", parents=[common], help="gather labeled successful motions")
    p.add_argument("--checkpoint", help="policy checkpoint (default: checkpoints/phase1.npz)")
    p.add_argument("--per-class", type=int, help="override dataset.n_per_class")

    p = sub.add_parser("train-classifier", parents=[common], help="fit the motion classifier")
    p.add_argument("--dataset", help="labeled dataset (default: datasets/labels.jsonl)")

    p = sub.add_parser("adapt", parents=[common], help="phase 2: adaptation on the deceptive widget")
    p.add_argument("--checkpoint", help="phase-1 checkpoint (default: checkpoints/phase1.npz)")
    p.add_argument("--classifier", help="classifier (default: checkpoints/classifier.npz)")
    p.add_argument("--updates", type=int, help="override phase2.updates")

    p = sub.add_parser("probe", parents=[common], help="print the affordance distribution of a policy")
    p.add_argument("--checkpoint", help="policy checkpoint (default: checkpoints/phase1.npz)")
    p.add_argument("--classifier", help="classifier (default: checkpoints/classifier.npz)")
    p.add_argument("--widget", default="deceptive", choices=("button", "slider", "deceptive"))
    p.add_argument("--rollouts", type=int, help="override phase2.probe_rollouts")
    p.add_argument("--save-trajectories", metavar="PATH", help="also write the probe rollouts as JSONL")

    p = sub.add_parser("replay", parents=[common], help="re-simulate stored trajectories, check rewards bitwise")
    p.add_argument("--trajectory", required=True, help="trajectory JSONL file")

    p = sub.add_parser("emit-plots", parents=[common], help="write long-format plot data per figure panel")
    p.add_argument("--metrics", help="metrics directory (default: <out>/metrics)")
    return parser


def _opt(args, name, default=None):
    return getattr(args, name, default)


def _load_plan(args):
    from .config import load_config, parse_override
    from .harness import ExperimentPlan

    overrides = dict(parse_override(s) for s in _opt(args, "set", None) or [])
    if _opt(args, "seed") is not None:
        overrides["seed"] = args.seed
    if args.command in ("train", "adapt") and args.updates is not None:
        overrides[("phase1" if args.command == "train" else "phase2") + ".updates"] = args.updates
    if args.command == "collect-labels" and args.per_class is not None:
        overrides["dataset.n_per_class"] = args.per_class
    config = load_config(_opt(args, "config"), overrides)
    out = _opt(args, "out") or os.environ.get(OUT_ENV) or "runs"
    return ExperimentPlan.from_config(config, out, deterministic=bool(_opt(args, "deterministic", False)))


def _limit_threads(args):
    from threadpoolctl import threadpool_limits

    n = 1 if _opt(args, "deterministic") else _opt(args, "threads")
    return threadpool_limits(limits=n) if n else None


def _run(args) -> int:
    from . import harness
    from .affordance import ClassifierParams
    from .env import read_trajectories, replay_matches, write_trajectories
    from .ppo import load_checkpoint

    plan = _load_plan(args)
    cmd = args.command

    if cmd == "train":
        def show(row, agent):
            print(f"update {row.update:4d}  steps {row.env_steps:8d}  success "
                  + "  ".join(f"{k}={v:.3f}" for k, v in row.success.items()), flush=True)

        harness.run_phase1(plan, on_row=show)
        print(f"wrote {plan.phase1_checkpoint} and {plan.metrics_path('phase1')}")

    elif cmd == "collect-labels":
        motions = harness.collect_labeled_dataset(plan, args.checkpoint)
        print(f"wrote {len(motions)} labeled motions to {plan.dataset_path}")

    elif cmd == "train-classifier":
        _, report = harness.train_affordance_classifier(plan, args.dataset)
        print(f"test accuracy {report['test_accuracy']:.3f}  recall "
              + "  ".join(f"{k}={v:.3f}" for k, v in report["recall"].items()))
        print(f"wrote {plan.classifier_path}")

    elif cmd == "adapt":
        def show(d, agent):
            print(f"update {d['update']:4d}  success {d['success_deceptive']:.3f}  "
                  f"p_press {d['p_press']:.3f}  p_slide {d['p_slide']:.3f}", flush=True)

        harness.run_phase2_adaptation(plan, args.checkpoint, args.classifier, on_row=show)
        print(f"wrote {plan.phase2_checkpoint} and {plan.metrics_path('phase2')}")

    elif cmd == "probe":
        ckpt = harness.require_artifact(args.checkpoint or plan.phase1_checkpoint, "policy checkpoint")
        clf_path = harness.require_artifact(args.classifier or plan.classifier_path, "affordance classifier")
        agent, _ = load_checkpoint(ckpt)
        result, _ = harness.probe(plan, agent, ClassifierParams.load(clf_path), args.widget, args.rollouts)
        d = result.distribution
        print(f"widget={args.widget} rollouts={len(result.labels)} "
              f"p_press={d.p_press:.4f} p_slide={d.p_slide:.4f} success_rate={result.success_rate:.4f}")
        if args.save_trajectories:
            for i, t in enumerate(result.trajectories):
                t.episode_id = f"probe-{args.widget}-{i}"
            write_trajectories(args.save_trajectories, result.trajectories, plan.config.episode)

    elif cmd == "replay":
        path = Path(args.trajectory)
        if not path.is_file():
            raise harness.MissingArtifact(f"missing trajectory file: {path}")
        bad = [t.episode_id for t, ep in read_trajectories(path)
               if not replay_matches(t, ep, arm=plan.config.arm, physics=plan.config.physics)]
        if bad:
            print(f"MISMATCH in {len(bad)} episode(s): {', '.join(bad[:10])}")
            return EXIT_FAIL
        print("MATCH")

    elif cmd == "emit-plots":
        metrics = Path(args.metrics) if args.metrics else plan.path("metrics")
        for p in harness.emit_plot_data(metrics, plan.path("plotdata"), plan.config.episode.dt):
            print(f"wrote {p}")
    return EXIT_OK


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if _opt(args, "verbose") else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")

    from .config import ConfigError
    from .harness import DatasetCollectionFailed, MissingArtifact, SchemaError
    from .ppo import TrainingDiverged

    limiter = None
    try:
        limiter = _limit_threads(args)
        return _run(args)
    except ConfigError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_USAGE
    except MissingArtifact as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_MISSING
    except TrainingDiverged as err:
        print(f"error: training diverged: {err}; last good checkpoint kept", file=sys.stderr)
        return EXIT_DIVERGED
    except (DatasetCollectionFailed, SchemaError, ValueError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_DATA
    except OSError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_FAIL
    finally:
        if limiter is not None:
            limiter.restore_original_limits()


if __name__ == "__main__":
    sys.exit(main())
