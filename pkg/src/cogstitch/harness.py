"""
Experiment orchestration: configuration, the method matrix, policy evaluation,
per-seed run directories with manifests, and the summary report.

A run directory looks like

    <output_dir>/<env>/<method>/seed_<n>/
        agent.ckpt  metrics.csv  curve.csv  manifest.json  [finetune.csv]

and `report` only ever reads manifests and curves back from such directories.
"""

import copy
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Any, Callable, Iterable, Protocol, Sequence, runtime_checkable

import numpy as np

from .algorithms import (
    METRIC_COLUMNS,
    Agent,
    Evaluator,
    FinetuneResult,
    TrainConfig,
    TrainResult,
    finetune_online,
    load_agent,
    save_agent,
    train_bc,
    train_offline,
)
from .datasets import Dataset, filter_successful, load
from .envs import Environment, InitialCondition, make_env, parse_condition
from .errors import ConfigError, DivergenceError
from .nncore import GaussianPolicy, deterministic_action
from .registry import register_as, resolve_or_fail
from .scripted import ScriptedConfig, command, make_controller
from .utils import announce_seed, make_rng, read_csv, resolve_seed, sha256_file, spawn_seed, write_csv

logger = logging.getLogger("cogstitch.harness")

MANIFEST_VERSION = 1
METHOD_IDS = ("cog", "no_prior", "bc_all", "bc_init", "bc_oracle", "sac", "bc_sac_finetune")
RESULT_COLUMNS = ["env", "method", "condition", "mean", "std", "seeds", "diverged"]
CURVE_COLUMNS = ["method", "seed", "phase", "step", "condition", "success_rate"]
FINETUNE_COLUMNS = ["episode", "condition", "success", "step", "buffer_size"]


# configuration


@dataclass
class EvalConfig:
    conditions: list[str] = field(default_factory=list)
    trials_per_condition: int = 250
    seeds: list[int] = field(default_factory=lambda: [0, 1, 2])
    workers: int = 4
    snapshot_trials: int = 50
    best_of_last: int = 3

    def __post_init__(self) -> None:
        self.conditions = [parse_condition(c).value for c in self.conditions]
        if self.trials_per_condition < 1 or self.snapshot_trials < 1:
            raise ConfigError("evaluation needs at least one trial per condition")
        if not self.seeds:
            raise ConfigError("at least one seed is required")
        if self.workers < 1 or self.best_of_last < 1:
            raise ConfigError("workers and best_of_last must be positive")


@dataclass
class ExperimentConfig:
    env: str = "drawer_grasp"
    method: str = "cog"
    prior: str | None = None
    task: str | None = None
    output_dir: str = "runs"
    seed: int | None = None
    bc_steps: int | None = None
    finetune_episodes: int = 0
    finetune_eval_every: int = 100
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def __post_init__(self) -> None:
        if isinstance(self.train, dict):
            self.train = _build(TrainConfig, self.train, "train")
        if isinstance(self.eval, dict):
            self.eval = _build(EvalConfig, self.eval, "eval")
        if self.method not in METHOD_IDS:
            raise ConfigError(f"unknown method '{self.method}' (known: {', '.join(METHOD_IDS)})")
        if self.finetune_episodes < 0 or self.finetune_eval_every < 0:
            raise ConfigError("fine-tuning episode counts must be non-negative")

    @classmethod
    def from_dict(cls, values: dict[str, Any]) -> "ExperimentConfig":
        return _build(cls, values, "experiment")

    @classmethod
    def from_json(cls, path: str | Path) -> "ExperimentConfig":
        try:
            values = json.loads(Path(path).read_text())
        except FileNotFoundError as ex:
            raise ConfigError(f"config file {path} does not exist") from ex
        except json.JSONDecodeError as ex:
            raise ConfigError(f"{path}: not valid JSON ({ex})") from ex
        if not isinstance(values, dict):
            raise ConfigError(f"{path}: expected a JSON object")
        return cls.from_dict(values)

    def as_dict(self) -> dict[str, Any]:
        values = asdict(self)
        values["train"] = self.train.as_dict()
        return values

    def conditions_for(self, env: Environment) -> list[InitialCondition]:
        if not self.eval.conditions:
            return list(env.conditions)
        conditions = [parse_condition(c) for c in self.eval.conditions]
        for c in conditions:
            if c not in env.conditions:
                raise ConfigError(f"condition '{c.value}' does not exist in env '{env.env_id}'")
        return conditions

    def run_dir(self, seed: int) -> Path:
        return Path(self.output_dir) / self.env / self.method / f"seed_{seed}"


def _build(klass: Any, values: dict[str, Any], section: str) -> Any:
    try:
        return klass(**values)
    except TypeError as ex:
        raise ConfigError(f"bad '{section}' section: {ex}") from ex


def _parse_value(raw: str) -> Any:
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def apply_overrides(config: ExperimentConfig, overrides: Sequence[str]) -> ExperimentConfig:
    "Apply `section.key=value` strings; values are parsed as JSON and fall back to plain strings."
    values = config.as_dict()
    for item in overrides:
        key, sep, raw = item.partition("=")
        if not sep or not key.strip():
            raise ConfigError(f"override '{item}' is not of the form key=value")
        *sections, leaf = key.strip().split(".")
        node = values
        for part in sections:
            if not isinstance(node.get(part), dict):
                raise ConfigError(f"unknown config section '{part}' in '{item}'")
            node = node[part]
        if leaf not in node:
            raise ConfigError(f"unknown config key '{key.strip()}'")
        node[leaf] = _parse_value(raw)
    return ExperimentConfig.from_dict(values)


# datasets


def _load_checked(path: str | None, role: str, env: Environment) -> Dataset | None:
    if path is None:
        return None
    if not Path(path).exists():
        raise ConfigError(f"{role} dataset {path} does not exist")
    ds = load(path)
    if ds.meta.env != env.env_id or ds.meta.obs_dim != env.obs_dim:
        raise ConfigError(f"{role} dataset {path} was recorded on {ds.meta.env} (obs_dim {ds.meta.obs_dim}), not {env.env_id} (obs_dim {env.obs_dim})")
    return ds


def load_datasets(config: ExperimentConfig, env: Environment) -> tuple[Dataset | None, Dataset | None]:
    "Load and validate the prior and task datasets a method needs; every failure is a config error raised before training."
    prior = _load_checked(config.prior, "prior", env)
    task = _load_checked(config.task, "task", env)
    needs = make_method(config.method).needs
    if "prior" in needs and prior is None:
        raise ConfigError(f"method '{config.method}' needs a prior dataset")
    if "task" in needs and task is None:
        raise ConfigError(f"method '{config.method}' needs a task dataset")
    if task is not None and not task.meta.reward_labeled:
        raise ConfigError(f"task dataset {config.task} carries no reward labels")
    return prior, task


# methods


@dataclass
class RunContext:
    config: ExperimentConfig
    env: Environment
    prior: Dataset | None
    task: Dataset | None
    seed: int
    evaluator: Evaluator | None = None
    progress: bool = False

    @property
    def train(self) -> TrainConfig:
        return self.config.train

    def datasets(self, *roles: str) -> list[Dataset]:
        found = [getattr(self, role) for role in roles]
        if any(ds is None for ds in found):
            raise ConfigError(f"method '{self.config.method}' needs datasets: {', '.join(roles)}")
        return found


@runtime_checkable
class Method(Protocol):
    method_id: str
    needs: tuple[str, ...]

    def train(self, ctx: RunContext) -> TrainResult: ...


@register_as(Method, namespace="cog")
class Cog:
    "CQL on the union of the reward-free prior data and the task data."

    method_id = "cog"
    needs = ("prior", "task")

    def train(self, ctx: RunContext) -> TrainResult:
        return train_offline(ctx.datasets("prior", "task"), ctx.train, ctx.seed, ctx.evaluator, progress=ctx.progress)


@register_as(Method, namespace="no_prior")
class NoPrior:
    method_id = "no_prior"
    needs = ("task",)

    def train(self, ctx: RunContext) -> TrainResult:
        return train_offline(ctx.datasets("task"), ctx.train, ctx.seed, ctx.evaluator, progress=ctx.progress)


@register_as(Method, namespace="bc_all")
class BcAll:
    method_id = "bc_all"
    needs = ("prior", "task")

    def train(self, ctx: RunContext) -> TrainResult:
        return train_bc(ctx.datasets("prior", "task"), ctx.train, ctx.seed, evaluator=ctx.evaluator, progress=ctx.progress)


@register_as(Method, namespace="bc_init")
class BcInit:
    "Behavior-clone the prior data, then run offline RL on the task data from that policy."

    method_id = "bc_init"
    needs = ("prior", "task")

    def train(self, ctx: RunContext) -> TrainResult:
        (prior,) = ctx.datasets("prior")
        pre = train_bc([prior], ctx.train, ctx.seed, steps=ctx.config.bc_steps, progress=ctx.progress)
        result = train_offline(ctx.datasets("task"), ctx.train, ctx.seed + 1, ctx.evaluator, agent=pre.agent, allow_bc=False, progress=ctx.progress)
        result.metrics = pre.metrics + result.metrics
        return result


@register_as(Method, namespace="bc_oracle")
class BcOracle:
    method_id = "bc_oracle"
    needs = ("task",)

    def train(self, ctx: RunContext) -> TrainResult:
        (task,) = ctx.datasets("task")
        successes = filter_successful(task)
        if len(successes) == 0:
            raise ConfigError("task dataset holds no successful trajectory to clone")
        logger.info("BC-oracle keeps %d of %d trajectories", successes.num_trajectories, task.num_trajectories)
        return train_bc([successes], ctx.train, ctx.seed, evaluator=ctx.evaluator, progress=ctx.progress)


@register_as(Method, namespace="sac")
class Sac:
    method_id = "sac"
    needs = ("prior", "task")

    def train(self, ctx: RunContext) -> TrainResult:
        cfg = replace(ctx.train, alpha_cql=0.0, entropy_backup=True)
        return train_offline(ctx.datasets("prior", "task"), cfg, ctx.seed, ctx.evaluator, allow_bc=False, progress=ctx.progress)


@register_as(Method, namespace="bc_sac_finetune")
class BcSacFinetune:
    "BC on all offline data, then online SAC from that policy with fresh critics."

    method_id = "bc_sac_finetune"
    needs = ("prior", "task")

    def train(self, ctx: RunContext) -> TrainResult:
        pre = train_bc(ctx.datasets("prior", "task"), ctx.train, ctx.seed, steps=ctx.config.bc_steps, evaluator=ctx.evaluator, progress=ctx.progress)
        cfg = replace(ctx.train, alpha_cql=0.0, entropy_backup=True)
        agent = pre.agent
        agent.cfg = cfg
        agent.reset_optimizers()
        conditions = ctx.config.conditions_for(ctx.env)
        if ctx.evaluator is not None:
            pre.online_snapshots.append((0, ctx.evaluator(agent)))
        online = finetune_online(
            agent, ctx.env, conditions, cfg, ctx.seed + 1, ctx.config.finetune_episodes, ctx.evaluator, ctx.config.finetune_eval_every, ctx.progress
        )
        pre.episodes = online.episodes
        pre.online_snapshots.extend(online.snapshots)
        return pre


def make_method(method_id: str) -> Method:
    method: Method = resolve_or_fail(Method, method_id)
    return method


# evaluation


class Actor(Protocol):
    def start(self, env: Environment, rng: np.random.Generator) -> None: ...

    def __call__(self, obs: np.ndarray) -> np.ndarray: ...


class PolicyActor:
    "Deterministic policy: tanh of the Gaussian mean."

    def __init__(self, policy: GaussianPolicy) -> None:
        self.policy = policy

    def start(self, env: Environment, rng: np.random.Generator) -> None:
        pass

    def __call__(self, obs: np.ndarray) -> np.ndarray:
        return deterministic_action(self.policy, obs)[0]


class ScriptedActor:
    def __init__(self, policy: str, cfg: ScriptedConfig | None = None) -> None:
        self.policy = policy
        self.cfg = cfg or ScriptedConfig.noiseless()

    def start(self, env: Environment, rng: np.random.Generator) -> None:
        self.rng = rng
        self.controller = make_controller(self.policy, env, self.cfg, rng)

    def __call__(self, obs: np.ndarray) -> np.ndarray:
        action = self.controller.act()
        if action is None:
            return command()
        if self.cfg.action_noise_std > 0:
            action = np.clip(action + self.rng.normal(0.0, self.cfg.action_noise_std, size=action.shape), -1.0, 1.0)
        return action


class RandomActor:
    def start(self, env: Environment, rng: np.random.Generator) -> None:
        self.rng = rng
        self.act_dim = env.act_dim

    def __call__(self, obs: np.ndarray) -> np.ndarray:
        return self.rng.uniform(-1.0, 1.0, self.act_dim)


ActorFactory = Callable[[], Actor]


def _trial(actor: Actor, env: Environment, cond: InitialCondition, seed: int) -> bool:
    rng = make_rng(seed)
    obs = env.reset(cond, rng)
    actor.start(env, rng)
    for _ in range(env.horizon):
        obs, reward = env.step(actor(obs))
        if reward > 0:
            return True
    return False


def evaluate(
    agent: "Agent | ActorFactory",
    env: "Environment | str",
    condition: "InitialCondition | str",
    trials: int,
    seed: int,
    workers: int = 1,
) -> float:
    """
    Success rate over `trials` rollouts of one horizon each, where success means
    some step paid reward. Every trial has its own seed drawn from `seed`, so the
    result does not depend on how trials are spread over worker threads. Each
    worker gets its own environment and its own copy of the policy.
    """
    if trials < 1:
        raise ConfigError(f"trials must be at least 1, got {trials}")
    cond = parse_condition(condition)
    template = make_env(env) if isinstance(env, str) else env
    if cond not in template.conditions:
        raise ConfigError(f"condition '{cond.value}' does not exist in env '{template.env_id}'")
    if isinstance(agent, Agent):
        policy = agent.policy

        def factory() -> Actor:
            return PolicyActor(policy.clone())

    else:
        factory = agent
    seeds = make_rng(seed)
    trial_seeds = [spawn_seed(seeds) for _ in range(trials)]
    chunks = [chunk for chunk in np.array_split(np.arange(trials), min(workers, trials)) if len(chunk)]
    jobs = [(factory(), copy.deepcopy(template), chunk) for chunk in chunks]

    def work(job: tuple[Actor, Environment, np.ndarray]) -> int:
        actor, worker_env, indices = job
        return sum(_trial(actor, worker_env, cond, trial_seeds[i]) for i in indices)

    if len(jobs) == 1:
        successes = work(jobs[0])
    else:
        with ThreadPoolExecutor(max_workers=len(jobs)) as pool:
            successes = sum(pool.map(work, jobs))
    return successes / trials


def make_evaluator(env_id: str, conditions: Sequence[InitialCondition], trials: int, seed: int, workers: int = 1) -> Evaluator:
    def evaluator(agent: Agent) -> dict[str, float]:
        return {c.value: evaluate(agent, env_id, c, trials, seed + i, workers) for i, c in enumerate(conditions)}

    return evaluator


def best_of_last(history: Sequence[tuple[int, dict[str, float]]], count: int) -> dict[str, float]:
    "Per condition, the best success rate among the last `count` evaluations."
    best: dict[str, float] = {}
    for _, scores in history[-count:]:
        for condition, rate in scores.items():
            best[condition] = max(rate, best.get(condition, 0.0))
    return best


# results


@dataclass(frozen=True)
class ResultRow:
    env: str
    method: str
    condition: str
    mean: float
    std: float
    seeds: int
    diverged: int = 0


@dataclass
class ResultTable:
    rows: list[ResultRow] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.rows)

    def lookup(self, method: str, condition: str) -> ResultRow:
        for row in self.rows:
            if row.method == method and row.condition == condition:
                return row
        raise KeyError((method, condition))

    def to_markdown(self) -> str:
        lines = ["# Success rates", "", "Mean (standard deviation) over seeds; every policy is evaluated deterministically.", ""]
        for env in sorted({r.env for r in self.rows}):
            rows = [r for r in self.rows if r.env == env]
            methods = [m for m in METHOD_IDS if any(r.method == m for r in rows)]
            lines += [f"## {env}", "", "| condition | " + " | ".join(methods) + " |", "|---|" + "---|" * len(methods)]
            for condition in sorted({r.condition for r in rows}):
                cells = []
                for m in methods:
                    found = [r for r in rows if r.method == m and r.condition == condition]
                    cells.append(_cell(found[0]) if found else "n/a")
                lines.append(f"| {condition} | " + " | ".join(cells) + " |")
            lines.append("")
        return "\n".join(lines)

    def write(self, out_dir: str | Path, stem: str = "report") -> tuple[Path, Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        markdown = out / f"{stem}.md"
        markdown.write_text(self.to_markdown())
        table = write_csv(out / f"{stem}.csv", RESULT_COLUMNS, (asdict(r) for r in self.rows))
        return markdown, table


def _cell(row: ResultRow) -> str:
    text = f"{row.mean:.2f} ({row.std:.2f})"
    return f"{text} [diverged {row.diverged}/{row.seeds}]" if row.diverged else text


def summarize(cells: Iterable[tuple[str, str, str, float, bool]]) -> ResultTable:
    "Aggregate (env, method, condition, success, diverged) cells into mean and population stddev per row."
    groups: dict[tuple[str, str, str], list[tuple[float, bool]]] = {}
    for env, method, condition, value, diverged in cells:
        groups.setdefault((env, method, condition), []).append((value, diverged))
    rows = []
    for (env, method, condition), values in sorted(groups.items(), key=lambda kv: (kv[0][0], _method_order(kv[0][1]), kv[0][2])):
        rates = np.array([v for v, _ in values])
        rows.append(ResultRow(env, method, condition, float(rates.mean()), float(rates.std()), len(values), sum(d for _, d in values)))
    return ResultTable(rows)


def _method_order(method: str) -> int:
    return METHOD_IDS.index(method) if method in METHOD_IDS else len(METHOD_IDS)


def _curve_rows(method: str, seed: int, result: TrainResult) -> list[dict[str, Any]]:
    rows = []
    for phase, history in (("offline", result.snapshots), ("online", result.online_snapshots)):
        for step, scores in history:
            rows.extend({"method": method, "seed": seed, "phase": phase, "step": step, "condition": c, "success_rate": r} for c, r in scores.items())
    return rows


def _dataset_entry(path: str | None) -> dict[str, str] | None:
    return None if path is None else {"path": str(path), "sha256": sha256_file(path)}


def _write_manifest(path: Path, manifest: dict[str, Any]) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return path


def run(config: ExperimentConfig, seed: int | None = None, progress: bool = False) -> ResultTable:
    """
    Train and evaluate one method for every configured seed.

    Each seed gets a run directory with checkpoint, metrics, learning curve and a
    manifest; the reported success rate per condition is the best of the last few
    evaluations, the last of which is the full-size evaluation of the final
    checkpoint. A diverged seed scores 0 everywhere; after all seeds have run the
    first divergence is raised again so callers can tell.
    """
    base = announce_seed(resolve_seed(seed, config.seed), f"{config.method} on {config.env}")
    env = make_env(config.env)
    conditions = config.conditions_for(env)
    prior, task = load_datasets(config, env)
    method = make_method(config.method)
    cells: list[tuple[str, str, str, float, bool]] = []
    divergences: list[DivergenceError] = []
    for s in config.eval.seeds:
        cell_rng = make_rng(base + s)
        train_seed, eval_seed = spawn_seed(cell_rng), spawn_seed(cell_rng)
        run_dir = config.run_dir(s)
        evaluator = make_evaluator(config.env, conditions, config.eval.snapshot_trials, eval_seed, config.eval.workers)
        manifest: dict[str, Any] = {
            "version": MANIFEST_VERSION,
            "env": config.env,
            "method": config.method,
            "seed": s,
            "base_seed": base,
            "expected_seeds": list(config.eval.seeds),
            "config": config.as_dict(),
            "datasets": {"prior": _dataset_entry(config.prior), "task": _dataset_entry(config.task)},
            "diverged": None,
        }
        logger.info("running %s seed %d into %s", config.method, s, run_dir)
        try:
            result = method.train(RunContext(config, env, prior, task, train_seed, evaluator, progress))
        except DivergenceError as ex:
            divergences.append(ex)
            manifest["diverged"] = {"step": ex.step, "mean_abs_q": ex.mean_abs_q, "threshold": ex.threshold}
            manifest["reported"] = {c.value: 0.0 for c in conditions}
            _write_manifest(run_dir / "manifest.json", manifest)
            cells.extend((config.env, config.method, c.value, 0.0, True) for c in conditions)
            continue
        final = {
            c.value: evaluate(result.agent, env, c, config.eval.trials_per_condition, eval_seed + 1_000 + i, config.eval.workers) for i, c in enumerate(conditions)
        }
        history = (result.online_snapshots or result.snapshots) + [(result.agent.step, final)]
        reported = best_of_last(history, config.eval.best_of_last)
        checkpoint = save_agent(result.agent, run_dir / "agent.ckpt")
        write_csv(run_dir / "metrics.csv", METRIC_COLUMNS, result.metrics)
        write_csv(run_dir / "curve.csv", CURVE_COLUMNS, _curve_rows(config.method, s, result))
        if result.episodes:
            write_csv(run_dir / "finetune.csv", FINETUNE_COLUMNS, result.episodes)
        manifest.update(
            {
                "checkpoint": {"path": checkpoint.name, "sha256": sha256_file(checkpoint)},
                "metrics": "metrics.csv",
                "curve": "curve.csv",
                "final": final,
                "reported": reported,
                "steps": result.agent.step,
            }
        )
        _write_manifest(run_dir / "manifest.json", manifest)
        cells.extend((config.env, config.method, c, rate, False) for c, rate in sorted(reported.items()))
        logger.info("%s seed %d: %s", config.method, s, ", ".join(f"{c}={r:.3f}" for c, r in sorted(reported.items())))
    table = summarize(cells)
    table.write(Path(config.output_dir) / config.env / config.method, stem="results")
    if divergences:
        raise divergences[0]
    return table


def run_finetune(config: ExperimentConfig, checkpoint: str | Path, seed: int | None = None, progress: bool = False) -> FinetuneResult:
    "Online fine-tuning of a saved agent with the configured objective; writes episodes, curve and checkpoint next to each other."
    run_seed = announce_seed(resolve_seed(seed, config.seed), f"fine-tuning {checkpoint}")
    env = make_env(config.env)
    conditions = config.conditions_for(env)
    agent = load_agent(checkpoint, config.train)
    if agent.obs_dim != env.obs_dim:
        raise ConfigError(f"checkpoint {checkpoint} expects obs_dim {agent.obs_dim}, env '{env.env_id}' has {env.obs_dim}")
    rng = make_rng(run_seed)
    train_seed, eval_seed = spawn_seed(rng), spawn_seed(rng)
    evaluator = make_evaluator(config.env, conditions, config.eval.snapshot_trials, eval_seed, config.eval.workers)
    result = finetune_online(agent, env, conditions, config.train, train_seed, config.finetune_episodes, evaluator, config.finetune_eval_every, progress)
    out = Path(config.output_dir) / config.env / config.method / "finetune"
    write_csv(out / "finetune.csv", FINETUNE_COLUMNS, result.episodes)
    curve = [{"method": config.method, "seed": run_seed, "phase": "online", "step": ep, "condition": c, "success_rate": r} for ep, scores in result.snapshots for c, r in scores.items()]
    write_csv(out / "curve.csv", CURVE_COLUMNS, curve)
    saved = save_agent(agent, out / "agent.ckpt")
    manifest = {
        "version": MANIFEST_VERSION,
        "env": config.env,
        "method": config.method,
        "seed": run_seed,
        "source_checkpoint": {"path": str(checkpoint), "sha256": sha256_file(checkpoint)},
        "checkpoint": {"path": saved.name, "sha256": sha256_file(saved)},
        "episodes": config.finetune_episodes,
        "config": config.as_dict(),
    }
    _write_manifest(out / "manifest.json", manifest)
    return result


def report(result_dirs: Sequence[str | Path], out_dir: str | Path) -> ResultTable:
    """
    Collect every run manifest under `result_dirs` into one table plus merged
    learning curves. Missing seeds only produce a warning. The output depends on
    nothing but the manifests and curves read, so repeated calls write identical
    files.
    """
    manifests = sorted({p.resolve() for d in result_dirs for p in Path(d).rglob("manifest.json")})
    cells: list[tuple[str, str, str, float, bool]] = []
    seen: dict[tuple[str, str], set[int]] = {}
    expected: dict[tuple[str, str], set[int]] = {}
    curves: list[dict[str, str]] = []
    for path in manifests:
        manifest = json.loads(path.read_text())
        if "reported" not in manifest:
            continue
        key = (manifest["env"], manifest["method"])
        seen.setdefault(key, set()).add(int(manifest["seed"]))
        expected.setdefault(key, set()).update(int(s) for s in manifest.get("expected_seeds", [manifest["seed"]]))
        diverged = manifest.get("diverged") is not None
        cells.extend((key[0], key[1], c, float(v), diverged) for c, v in sorted(manifest["reported"].items()))
        if (curve := path.parent / manifest.get("curve", "curve.csv")).exists():
            curves.extend(read_csv(curve))
    for key in sorted(expected):
        if missing := sorted(expected[key] - seen[key]):
            logger.warning("partial results for %s/%s: seeds %s missing", key[0], key[1], missing)
    table = summarize(cells)
    table.write(out_dir)
    curves.sort(key=lambda r: (_method_order(r["method"]), int(r["seed"]), r["phase"], int(r["step"]), r["condition"]))
    write_csv(Path(out_dir) / "curves.csv", CURVE_COLUMNS, curves)
    logger.info("report over %d runs written to %s", len(manifests), out_dir)
    return table
