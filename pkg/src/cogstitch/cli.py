import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path
from typing import Sequence

from .algorithms import load_agent
from .datasets import save
from .envs import make_env, parse_condition
from .errors import CheckpointError, ConfigError, DatasetError, DivergenceError, NotRegistered, TrainingError
from .harness import ExperimentConfig, apply_overrides, evaluate, report, run, run_finetune
from .oracle import default_mdp, dump_qstar, value_iteration
from .scripted import ScriptedConfig, collect, default_mix, parse_mix
from .utils import announce_seed, make_rng, resolve_seed, write_csv

logger = logging.getLogger("cogstitch")

EXIT_OK = 0
EXIT_FAILED = 1
EXIT_CONFIG = 2
EXIT_DIVERGED = 3


def _split(text: str | None) -> list[str]:
    return [part.strip() for part in (text or "").split(",") if part.strip()]


def _experiment(args: argparse.Namespace) -> ExperimentConfig:
    config = ExperimentConfig.from_json(args.config) if args.config else ExperimentConfig()
    config = apply_overrides(config, args.set or [])
    direct = {"env": args.env, "method": getattr(args, "method", None), "prior": args.prior, "task": args.task, "output_dir": args.out, "finetune_episodes": getattr(args, "episodes", None)}
    return replace(config, **{key: value for key, value in direct.items() if value is not None})


def cmd_collect(args: argparse.Namespace) -> int:
    if args.episodes < 1:
        raise ConfigError(f"--episodes must be at least 1, got {args.episodes}")
    seed = announce_seed(resolve_seed(args.seed), "collect")
    env = make_env(args.env)
    fallback = default_mix(args.env, args.kind)
    mix = parse_mix(args.mix) if args.mix else fallback.policies
    conditions = [parse_condition(c) for c in _split(args.conditions)] or list(fallback.conditions)
    rewards = fallback.reward_labels if args.rewards is None else args.rewards == "on"
    cfg = ScriptedConfig(action_noise_std=args.noise_std, episode_len=args.episode_len)
    ds = collect(env, mix, args.episodes, rewards, make_rng(seed), conditions=conditions, cfg=cfg, seed=seed, progress=not args.quiet)
    path = save(ds, args.out)
    print(f"{len(ds)} transitions in {ds.num_trajectories} trajectories ({ds.success_count()} rewarded) written to {path}")
    return EXIT_OK


def cmd_train(args: argparse.Namespace) -> int:
    config = _experiment(args)
    table = run(config, seed=args.seed, progress=not args.quiet)
    print(table.to_markdown())
    return EXIT_OK


def cmd_eval(args: argparse.Namespace) -> int:
    seed = announce_seed(resolve_seed(args.seed), "evaluation")
    env = make_env(args.env)
    agent = load_agent(args.checkpoint)
    conditions = [parse_condition(c) for c in _split(args.conditions)] or list(env.conditions)
    rows = []
    for i, cond in enumerate(conditions):
        rate = evaluate(agent, env, cond, args.trials, seed + i, args.workers)
        rows.append({"condition": cond.value, "trials": args.trials, "success_rate": rate})
        print(f"{cond.value}: {rate:.3f}")
    if args.out:
        write_csv(args.out, ["condition", "trials", "success_rate"], rows)
    return EXIT_OK


def cmd_finetune(args: argparse.Namespace) -> int:
    config = _experiment(args)
    result = run_finetune(config, args.checkpoint, seed=args.seed, progress=not args.quiet)
    for episode, scores in result.snapshots:
        print(f"episode {episode}: " + ", ".join(f"{c}={r:.3f}" for c, r in scores.items()))
    return EXIT_OK


def cmd_report(args: argparse.Namespace) -> int:
    table = report(args.dirs, args.out)
    print(table.to_markdown())
    return EXIT_OK


def _grid_size(text: str) -> int:
    _, _, value = text.rpartition("=")
    try:
        return int(value)
    except ValueError as ex:
        raise ConfigError(f"--grid expects G=<size>, got '{text}'") from ex


def cmd_oracle(args: argparse.Namespace) -> int:
    mdp = default_mdp(_grid_size(args.grid), args.gamma, blocker_removable=not args.fixed_blocker)
    path = dump_qstar(mdp, value_iteration(mdp), args.out)
    print(f"Q* over {mdp.num_states} states written to {path}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cogstitch", description="Offline RL with conservative Q-learning over prior and task datasets.")
    parser.add_argument("--log-level", default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    parser.add_argument("--quiet", action="store_true", help="no progress bars")
    verbs = parser.add_subparsers(dest="verb", required=True)

    p = verbs.add_parser("collect", help="run scripted policies and store a dataset")
    p.add_argument("--env", required=True)
    p.add_argument("--kind", choices=["prior", "task"], default="prior", help="default mix, conditions and labels to start from")
    p.add_argument("--mix", help="policy weights, e.g. open=0.35,close=0.35,pick_place=0.3")
    p.add_argument("--conditions", help="comma separated initial conditions")
    p.add_argument("--episodes", type=int, required=True)
    p.add_argument("--rewards", choices=["on", "off"])
    p.add_argument("--noise-std", type=float, default=0.2)
    p.add_argument("--episode-len", type=int, default=30)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--seed", type=int)
    p.set_defaults(handler=cmd_collect)

    for verb, handler, help_text in (("train", cmd_train, "train and evaluate one method"), ("finetune", cmd_finetune, "fine-tune a checkpoint online")):
        p = verbs.add_parser(verb, help=help_text)
        p.add_argument("--config", type=Path, help="experiment config (JSON)")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config value, e.g. train.alpha_cql=1.0")
        p.add_argument("--env")
        p.add_argument("--prior")
        p.add_argument("--task")
        p.add_argument("--out", help="output directory")
        p.add_argument("--seed", type=int)
        if verb == "train":
            p.add_argument("--method")
        else:
            p.add_argument("--checkpoint", required=True)
            p.add_argument("--episodes", type=int)
        p.set_defaults(handler=handler)

    p = verbs.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--env", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--conditions")
    p.add_argument("--trials", type=int, default=250)
    p.add_argument("--workers", type=int, default=4)
    p.add_argument("--out", type=Path)
    p.add_argument("--seed", type=int)
    p.set_defaults(handler=cmd_eval)

    p = verbs.add_parser("report", help="summarize run directories")
    p.add_argument("dirs", nargs="+", type=Path)
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(handler=cmd_report)

    p = verbs.add_parser("oracle", help="exact gridworld ground truth")
    oracle = p.add_subparsers(dest="action", required=True)
    dump = oracle.add_parser("dump", help="write the optimal Q-table as CSV")
    dump.add_argument("--grid", default="G=6", help="grid size, e.g. G=3")
    dump.add_argument("--gamma", type=float, default=0.99)
    dump.add_argument("--fixed-blocker", action="store_true", help="blocker cannot be removed")
    dump.add_argument("--out", type=Path, required=True)
    dump.set_defaults(handler=cmd_oracle)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=getattr(logging, args.log_level), format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        return int(args.handler(args))
    except DivergenceError as ex:
        logger.error("%s", ex)
        return EXIT_DIVERGED
    except (ConfigError, DatasetError, CheckpointError, NotRegistered) as ex:
        logger.error("%s", ex)
        return EXIT_CONFIG
    except TrainingError as ex:
        logger.error("%s", ex)
        return EXIT_FAILED


if __name__ == "__main__":
    sys.exit(main())
