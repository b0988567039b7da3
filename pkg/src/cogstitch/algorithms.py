"""
Learning algorithms on top of nncore: the CQL(H) actor-critic, SAC, behavior
cloning, online fine-tuning and an exact tabular CQL solver for the gridworld.
"""

import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Any, Callable, Sequence

import numpy as np
from tqdm import tqdm

from .datasets import Batch, Dataset, DatasetMeta, GridDataset, Transition, sample_batch
from .envs import Environment, InitialCondition, parse_condition
from .errors import ConfigError, ContractError, DimensionError, DivergenceError, NumericalError, TrainingError
from .nncore import (
    Adam,
    GaussianPolicy,
    QFunction,
    Tensor,
    deterministic_action,
    load_checkpoint,
    log_prob,
    logsumexp,
    minimum,
    no_grad,
    sample_and_logprob,
    save_checkpoint,
    stack,
)
from .oracle import NUM_ACTIONS, GridMdp
from .utils import make_rng, spawn_seed

logger = logging.getLogger("cogstitch.algorithms")

METRIC_COLUMNS = ["step", "q1_loss", "q2_loss", "policy_loss", "cql_penalty", "mean_q_data", "temperature", "eval_condition", "eval_success_rate"]


@dataclass
class TrainConfig:
    gamma: float = 0.99
    alpha_cql: float = 1.0
    lr_q: float = 3e-4
    lr_policy: float = 3e-5
    lr_temperature: float = 3e-4
    batch_size: int = 256
    tau: float = 0.005
    num_q: int = 2
    n_negative: int = 1
    bc_warmstart_steps: int = 2_000
    total_steps: int = 50_000
    eval_interval: int = 5_000
    log_interval: int = 1_000
    hidden_dims: tuple[int, ...] = (256, 256)
    auto_entropy: bool = True
    initial_temperature: float = 1.0
    target_entropy: float | None = None
    entropy_backup: bool = False
    divergence_factor: float = 10.0

    def __post_init__(self) -> None:
        self.hidden_dims = tuple(int(h) for h in self.hidden_dims)
        if not 0.0 < self.gamma < 1.0:
            raise ConfigError(f"gamma must lie in (0, 1), got {self.gamma}")
        if not 0.0 < self.tau <= 1.0:
            raise ConfigError(f"tau must lie in (0, 1], got {self.tau}")
        if min(self.lr_q, self.lr_policy, self.lr_temperature) <= 0:
            raise ConfigError("learning rates must be positive")
        if self.alpha_cql < 0:
            raise ConfigError(f"alpha_cql must be non-negative, got {self.alpha_cql}")
        if self.num_q != 2:
            raise ConfigError(f"exactly two Q-functions are supported, got {self.num_q}")
        if self.batch_size < 1 or self.n_negative < 0 or self.total_steps < 0 or self.bc_warmstart_steps < 0:
            raise ConfigError("batch_size must be positive; step counts and n_negative non-negative")
        if self.eval_interval < 1 or self.log_interval < 1:
            raise ConfigError("eval_interval and log_interval must be positive")
        if self.initial_temperature <= 0:
            raise ConfigError(f"initial_temperature must be positive, got {self.initial_temperature}")

    @classmethod
    def full_length(cls, **overrides: Any) -> "TrainConfig":
        "Full-length schedule: 1m gradient steps after a 10k-step BC warmstart."
        return cls(**{"total_steps": 1_000_000, "bc_warmstart_steps": 10_000, "eval_interval": 50_000, "log_interval": 10_000, **overrides})

    @classmethod
    def sac(cls, **overrides: Any) -> "TrainConfig":
        "Plain SAC: no conservative penalty, entropy inside the backup."
        return cls(**{"alpha_cql": 0.0, "entropy_backup": True, **overrides})

    @property
    def divergence_threshold(self) -> float:
        return self.divergence_factor / (1.0 - self.gamma)

    def as_dict(self) -> dict[str, Any]:
        values = asdict(self)
        values["hidden_dims"] = list(self.hidden_dims)
        return values


class Agent:
    """Twin critics with target copies, the squashed Gaussian policy, the entropy temperature and their optimizers."""

    def __init__(self, obs_dim: int, act_dim: int, cfg: TrainConfig, rng: np.random.Generator) -> None:
        self.obs_dim = obs_dim
        self.act_dim = act_dim
        self.cfg = cfg
        self.q1 = QFunction(obs_dim, act_dim, rng, cfg.hidden_dims)
        self.q2 = QFunction(obs_dim, act_dim, rng, cfg.hidden_dims)
        self.q1_target = self.q1.clone()
        self.q2_target = self.q2.clone()
        self.policy = GaussianPolicy(obs_dim, act_dim, rng, cfg.hidden_dims)
        self.log_temperature = Tensor(math.log(cfg.initial_temperature), requires_grad=True)
        self.target_entropy = float(cfg.target_entropy if cfg.target_entropy is not None else -act_dim)
        self.step = 0
        self.reset_optimizers()

    def reset_optimizers(self) -> None:
        self.q1_opt = Adam(self.q1.parameters(), self.cfg.lr_q)
        self.q2_opt = Adam(self.q2.parameters(), self.cfg.lr_q)
        self.policy_opt = Adam(self.policy.parameters(), self.cfg.lr_policy)
        self.temperature_opt = Adam({"log_temperature": self.log_temperature}, self.cfg.lr_temperature)

    @property
    def temperature(self) -> float:
        return float(np.exp(self.log_temperature.data))

    def critics(self) -> list[tuple[QFunction, Adam]]:
        return [(self.q1, self.q1_opt), (self.q2, self.q2_opt)]

    def act(self, obs: np.ndarray) -> np.ndarray:
        return deterministic_action(self.policy, obs)

    def tensors(self) -> dict[str, np.ndarray]:
        out: dict[str, np.ndarray] = {}
        for prefix, module in (("q1", self.q1), ("q2", self.q2), ("q1_target", self.q1_target), ("q2_target", self.q2_target), ("policy", self.policy)):
            out.update({f"{prefix}.{name}": values for name, values in module.state_dict().items()})
        out["log_temperature"] = self.log_temperature.data.copy()
        out["step"] = np.array(float(self.step))
        return out

    def load_tensors(self, tensors: dict[str, np.ndarray]) -> None:
        for prefix, module in (("q1", self.q1), ("q2", self.q2), ("q1_target", self.q1_target), ("q2_target", self.q2_target), ("policy", self.policy)):
            module.load_state_dict({name[len(prefix) + 1 :]: v for name, v in tensors.items() if name.startswith(prefix + ".")})
        self.log_temperature.data = np.asarray(tensors["log_temperature"], dtype=np.float64).reshape(())
        self.step = int(tensors.get("step", np.array(0.0)))
        self.reset_optimizers()


def save_agent(agent: Agent, path: str | Path) -> Path:
    return save_checkpoint(path, agent.tensors())


def load_agent(path: str | Path, cfg: TrainConfig | None = None) -> Agent:
    "Rebuild an agent from a checkpoint; network sizes are read off the stored tensors. Optimizer moments start fresh."
    tensors = load_checkpoint(path)
    layers = sorted({int(name.split(".")[1][len("layer") :]) for name in tensors if name.startswith("policy.layer")})
    widths = [tensors[f"policy.layer{i}.weight"].shape for i in layers]
    obs_dim, act_dim = widths[0][0], widths[-1][1] // 2
    cfg = replace(cfg or TrainConfig(), hidden_dims=tuple(w[1] for w in widths[:-1]))
    agent = Agent(obs_dim, act_dim, cfg, make_rng(0))
    agent.load_tensors(tensors)
    return agent


# losses


@dataclass
class Negatives:
    "Actions entering the logsumexp estimate, with the log-density they were drawn from."

    actions: list[np.ndarray]
    log_density: list[np.ndarray]


def sample_negatives(agent: Agent, batch: Batch, cfg: TrainConfig, rng: np.random.Generator) -> Negatives:
    n, d = batch.actions.shape
    uniform_log_density = -d * math.log(2.0)
    actions = [rng.uniform(-1.0, 1.0, (n, d)) for _ in range(cfg.n_negative)]
    densities = [np.full(n, uniform_log_density) for _ in range(cfg.n_negative)]
    with no_grad():
        for obs in (batch.obs, batch.next_obs):
            a, logp = sample_and_logprob(agent.policy, obs, rng)
            actions.append(a.data)
            densities.append(logp.data)
    return Negatives(actions, densities)


def cql_penalty(q: QFunction, obs: np.ndarray, q_data: Tensor, negatives: Negatives) -> Tensor:
    "Importance-sampled logsumexp of Q at s minus the mean Q of the dataset actions."
    columns = [q(obs, a) - density for a, density in zip(negatives.actions, negatives.log_density)]
    lse = logsumexp(stack(columns, axis=-1), axis=-1) - math.log(len(columns))
    return lse.mean() - q_data.mean()


def tabular_penalty(q_values: Tensor, data_actions: np.ndarray) -> Tensor:
    "The same penalty with the sum over a finite action set done exactly; q_values is [B, A]."
    rows = np.arange(q_values.shape[0])
    return logsumexp(q_values, axis=-1).mean() - q_values[rows, np.asarray(data_actions)].mean()


def bellman_target(batch: Batch, agent: Agent, cfg: TrainConfig, rng: np.random.Generator) -> np.ndarray:
    """
    y = r + gamma * min(Q1_target, Q2_target)(s', a') with a' drawn from the
    current policy. Only the SAC variant subtracts the entropy term.

    There are no terminal flags: on zero-reward data with alpha_cql = 0 the fixed
    point is Q = 0 everywhere. With alpha_cql > 0 the penalty shifts that fixed
    point below zero on out-of-data actions and above it on data actions.
    """
    with no_grad():
        a_next, logp_next = sample_and_logprob(agent.policy, batch.next_obs, rng)
        q_next = np.minimum(agent.q1_target(batch.next_obs, a_next).data, agent.q2_target(batch.next_obs, a_next).data)
    if cfg.entropy_backup:
        q_next = q_next - agent.temperature * logp_next.data
    return np.asarray(batch.rewards + cfg.gamma * q_next)


@dataclass
class CriticStats:
    bellman: float
    penalty: float
    mean_q_data: float
    mean_abs_q: float


def cql_critic_loss(q: QFunction, batch: Batch, target: np.ndarray, negatives: Negatives | None, cfg: TrainConfig) -> tuple[Tensor, CriticStats]:
    """
    alpha_cql * penalty + 1/2 mean (Q(s, a) - y)^2. At alpha_cql = 0 (or without
    negatives) this is the plain Bellman regression.
    """
    q_data = q(batch.obs, batch.actions)
    bellman = ((q_data - target) ** 2).mean() * 0.5
    loss, penalty_value = bellman, 0.0
    if cfg.alpha_cql > 0 and negatives is not None:
        penalty = cql_penalty(q, batch.obs, q_data, negatives)
        loss = penalty * cfg.alpha_cql + bellman
        penalty_value = penalty.item()
    stats = CriticStats(bellman.item(), penalty_value, float(q_data.data.mean()), float(np.abs(q_data.data).mean()))
    return loss, stats


def policy_loss(agent: Agent, obs: np.ndarray, rng: np.random.Generator) -> tuple[Tensor, np.ndarray]:
    action, logp = sample_and_logprob(agent.policy, obs, rng)
    q = minimum(agent.q1(obs, action), agent.q2(obs, action))
    return (logp * agent.temperature - q).mean(), logp.data


def bc_loss(policy: GaussianPolicy, obs: np.ndarray, actions: np.ndarray) -> Tensor:
    return -log_prob(policy, obs, actions).mean()


def bc_update(agent: Agent, batch: Batch) -> float:
    agent.policy_opt.zero_grad()
    loss = bc_loss(agent.policy, batch.obs, batch.actions)
    loss.backward()
    agent.policy_opt.step()
    return loss.item()


def update_temperature(agent: Agent, logp: np.ndarray) -> float:
    agent.temperature_opt.zero_grad()
    loss = agent.log_temperature * float(-(logp + agent.target_entropy).mean())
    loss.backward()
    agent.temperature_opt.step()
    return loss.item()


def soft_target_update(agent: Agent, tau: float) -> None:
    for online, target in ((agent.q1, agent.q1_target), (agent.q2, agent.q2_target)):
        target_params = target.parameters()
        for name, p in online.parameters().items():
            target_params[name].data = (1.0 - tau) * target_params[name].data + tau * p.data


# training loops


@dataclass
class StepStats:
    step: int
    q1_loss: float
    q2_loss: float
    policy_loss: float
    cql_penalty: float
    mean_q_data: float
    temperature: float
    used_bc: bool

    def row(self, **extra: Any) -> dict[str, Any]:
        values: dict[str, Any] = {k: v for k, v in asdict(self).items() if k in METRIC_COLUMNS}
        values.update(extra)
        return values


def train_step(agent: Agent, union: Sequence[Dataset], cfg: TrainConfig, rng: np.random.Generator, allow_bc: bool = True) -> StepStats:
    """
    One gradient step: both critics on the CQL objective, then the policy (BC
    during the warmstart window), then the temperature and the target networks.
    """
    batch = sample_batch(union, cfg.batch_size, rng)
    try:
        target = bellman_target(batch, agent, cfg, rng)
        negatives = sample_negatives(agent, batch, cfg, rng) if cfg.alpha_cql > 0 else None
        losses: list[float] = []
        stats: list[CriticStats] = []
        for q, opt in agent.critics():
            opt.zero_grad()
            loss, critic_stats = cql_critic_loss(q, batch, target, negatives, cfg)
            loss.backward()
            opt.step()
            losses.append(loss.item())
            stats.append(critic_stats)
        used_bc = allow_bc and agent.step < cfg.bc_warmstart_steps
        agent.policy_opt.zero_grad()
        if used_bc:
            pi_loss = bc_loss(agent.policy, batch.obs, batch.actions)
        else:
            pi_loss, logp = policy_loss(agent, batch.obs, rng)
        pi_loss.backward()
        agent.policy_opt.step()
        if not used_bc and cfg.auto_entropy:
            update_temperature(agent, logp)
        soft_target_update(agent, cfg.tau)
    except NumericalError as ex:
        raise TrainingError(f"training step {agent.step} produced non-finite values: {ex}", {"step": float(agent.step)}) from ex
    agent.step += 1
    mean_abs_q = float(np.mean([s.mean_abs_q for s in stats]))
    if mean_abs_q > cfg.divergence_threshold:
        logger.warning("Q-function diverged at step %d: mean |Q| %.4g > %.4g", agent.step, mean_abs_q, cfg.divergence_threshold)
        raise DivergenceError(agent.step, mean_abs_q, cfg.divergence_threshold)
    return StepStats(
        step=agent.step,
        q1_loss=losses[0],
        q2_loss=losses[1],
        policy_loss=pi_loss.item(),
        cql_penalty=float(np.mean([s.penalty for s in stats])),
        mean_q_data=float(np.mean([s.mean_q_data for s in stats])),
        temperature=agent.temperature,
        used_bc=used_bc,
    )


Evaluator = Callable[[Agent], dict[str, float]]


@dataclass
class TrainResult:
    agent: Agent
    metrics: list[dict[str, Any]] = field(default_factory=list)
    snapshots: list[tuple[int, dict[str, float]]] = field(default_factory=list)
    episodes: list[dict[str, Any]] = field(default_factory=list)
    online_snapshots: list[tuple[int, dict[str, float]]] = field(default_factory=list)


def _training_union(datasets: Sequence[Dataset], need_labels: bool = True) -> list[Dataset]:
    union = [ds for ds in datasets if len(ds)]
    if not union:
        raise ConfigError("no transitions to train on")
    if need_labels and not any(ds.meta.reward_labeled for ds in union):
        raise ConfigError("offline RL needs a reward-labeled task dataset")
    first = union[0].meta
    for ds in union[1:]:
        if not first.compatible(ds.meta):
            raise ConfigError(f"dataset layouts differ: {first.env}/{first.obs_dim} vs {ds.meta.env}/{ds.meta.obs_dim}")
    return union


def _snapshot(result: TrainResult, evaluator: Evaluator, stats: StepStats | None, step: int) -> None:
    scores = evaluator(result.agent)
    result.snapshots.append((step, scores))
    base = stats.row() if stats is not None else {"step": step}
    for condition, rate in scores.items():
        result.metrics.append({**base, "eval_condition": condition, "eval_success_rate": rate})
    logger.info("step %d: %s", step, ", ".join(f"{c}={r:.3f}" for c, r in scores.items()))


def train_offline(
    datasets: Sequence[Dataset],
    cfg: TrainConfig,
    seed: int,
    evaluator: Evaluator | None = None,
    agent: Agent | None = None,
    allow_bc: bool = True,
    progress: bool = False,
) -> TrainResult:
    """
    Offline actor-critic training on the union of `datasets` (pass only the task
    dataset for the no-prior ablation). Evaluation snapshots are taken every
    `eval_interval` steps and after the last one.
    """
    union = _training_union(datasets)
    rng = make_rng(seed)
    if agent is None:
        meta = union[0].meta
        agent = Agent(meta.obs_dim, meta.act_dim, cfg, make_rng(spawn_seed(rng)))
    result = TrainResult(agent)
    logger.info("offline training: %d transitions, %d steps, alpha=%g", sum(len(ds) for ds in union), cfg.total_steps, cfg.alpha_cql)
    for i in tqdm(range(cfg.total_steps), desc="train", disable=not progress):
        stats = train_step(agent, union, cfg, rng, allow_bc)
        done = i + 1
        if evaluator is not None and (done % cfg.eval_interval == 0 or done == cfg.total_steps):
            _snapshot(result, evaluator, stats, stats.step)
        elif done % cfg.log_interval == 0:
            result.metrics.append(stats.row())
    return result


def train_bc(
    datasets: Sequence[Dataset],
    cfg: TrainConfig,
    seed: int,
    steps: int | None = None,
    evaluator: Evaluator | None = None,
    progress: bool = False,
) -> TrainResult:
    "Behavior cloning of every action in the union; the critics stay untouched."
    union = _training_union(datasets, need_labels=False)
    rng = make_rng(seed)
    meta = union[0].meta
    agent = Agent(meta.obs_dim, meta.act_dim, cfg, make_rng(spawn_seed(rng)))
    result = TrainResult(agent)
    steps = cfg.total_steps if steps is None else steps
    for i in tqdm(range(steps), desc="bc", disable=not progress):
        loss = bc_update(agent, sample_batch(union, cfg.batch_size, rng))
        agent.step += 1
        done = i + 1
        stats = StepStats(agent.step, 0.0, 0.0, loss, 0.0, 0.0, agent.temperature, True)
        if evaluator is not None and (done % cfg.eval_interval == 0 or done == steps):
            _snapshot(result, evaluator, stats, agent.step)
        elif done % cfg.log_interval == 0:
            result.metrics.append(stats.row())
    return result


def run_episode(
    agent: Agent, env: Environment, cond: "InitialCondition | str", rng: np.random.Generator, deterministic: bool = True
) -> tuple[list[Transition], bool]:
    "Roll out the policy for a full horizon; success means some step paid reward."
    obs = env.reset(parse_condition(cond), rng)
    transitions: list[Transition] = []
    success = False
    for _ in range(env.horizon):
        if deterministic:
            action = agent.act(obs)[0]
        else:
            with no_grad():
                sampled, _ = sample_and_logprob(agent.policy, obs, rng)
            action = sampled.data[0]
        next_obs, reward = env.step(action)
        transitions.append(Transition(obs, action, reward, next_obs))
        success = success or reward > 0
        obs = next_obs
    return transitions, success


@dataclass
class FinetuneResult:
    agent: Agent
    buffer: Dataset
    episodes: list[dict[str, Any]] = field(default_factory=list)
    snapshots: list[tuple[int, dict[str, float]]] = field(default_factory=list)


def finetune_online(
    agent: Agent,
    env: Environment,
    cond_mix: Sequence["InitialCondition | str"],
    cfg: TrainConfig,
    seed: int,
    episodes: int,
    evaluator: Evaluator | None = None,
    eval_every: int = 0,
    progress: bool = False,
) -> FinetuneResult:
    """
    Alternate one exploration episode with one gradient step per collected
    transition. Batches come only from the online buffer; the offline datasets
    play no further part.
    """
    if episodes < 0:
        raise ConfigError(f"episodes must be non-negative, got {episodes}")
    conditions = [parse_condition(c) for c in cond_mix]
    if not conditions:
        raise ConfigError("fine-tuning needs at least one initial condition")
    rng = make_rng(seed)
    buffer = Dataset(DatasetMeta(env=env.env_id, obs_dim=env.obs_dim, act_dim=env.act_dim, reward_labeled=True, seed=seed))
    result = FinetuneResult(agent, buffer)
    for ep in tqdm(range(episodes), desc="finetune", disable=not progress):
        cond = conditions[int(rng.integers(len(conditions)))]
        transitions, success = run_episode(agent, env, cond, rng, deterministic=False)
        buffer.append(transitions)
        for _ in transitions:
            train_step(agent, [buffer], cfg, rng, allow_bc=False)
        result.episodes.append({"episode": ep + 1, "condition": cond.value, "success": float(success), "step": agent.step, "buffer_size": len(buffer)})
        if evaluator is not None and eval_every > 0 and (ep + 1) % eval_every == 0:
            scores = evaluator(agent)
            result.snapshots.append((ep + 1, scores))
            logger.info("fine-tune episode %d: %s", ep + 1, ", ".join(f"{c}={r:.3f}" for c, r in scores.items()))
    return result


# exact tabular solver


def _dataset_statistics(mdp: GridMdp, datasets: Sequence[GridDataset]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    counts = np.zeros((mdp.num_states, NUM_ACTIONS))
    reward_sum = np.zeros((mdp.num_states, NUM_ACTIONS))
    next_counts = np.zeros((mdp.num_states, NUM_ACTIONS, mdp.num_states))
    for data in datasets:
        for t in data.transitions:
            s, a, s_next = mdp.state_id(t.state), int(t.action), mdp.state_id(t.next_state)
            counts[s, a] += 1
            reward_sum[s, a] += t.reward
            next_counts[s, a, s_next] += 1
    return counts, reward_sum, next_counts


def tabular_cql(mdp: GridMdp, datasets: Sequence[GridDataset], alpha: float, iterations: int = 10_000, tol: float = 1e-10, newton_steps: int = 8) -> np.ndarray:
    """
    Fixed point of the CQL update with exact expectations over dataset counts.

    At every dataset state the update minimizes
        alpha * (logsumexp_a q(a) - sum_a beta(a) q(a)) + 1/2 sum_a beta(a) (q(a) - y(a))^2
    where beta is the empirical action distribution and y the empirical backup
    with a greedy bootstrap. Unseen actions at dataset states only feel the
    logsumexp pull and go to -inf; states outside the data keep Q = 0. Seen
    actions are solved with a few damped Newton steps per sweep.

    Because of those -inf entries, `(beta * q).sum(axis=1)` is NaN wherever an
    action was never taken; use `expected_q` for the data-weighted value.
    """
    if alpha < 0:
        raise ConfigError(f"alpha must be non-negative, got {alpha}")
    counts, reward_sum, next_counts = _dataset_statistics(mdp, datasets)
    seen = counts > 0
    visits = counts.sum(axis=1)
    in_data = visits > 0
    if not in_data.any():
        raise ContractError("tabular_cql needs at least one transition")
    safe = np.where(seen, counts, 1.0)
    mean_reward = reward_sum / safe
    transition = next_counts / safe[:, :, None]
    beta = counts / np.where(in_data, visits, 1.0)[:, None]
    masked = alpha > 0
    q = np.zeros((mdp.num_states, NUM_ACTIONS))
    if masked:
        q[in_data[:, None] & ~seen] = -np.inf
    states = np.flatnonzero(in_data)
    for sweep in range(iterations):
        values = np.max(q, axis=1)
        y = mean_reward + mdp.gamma * np.einsum("sat,t->sa", transition, values)
        updated = q.copy()
        if not masked:
            updated[seen] = y[seen]
        else:
            updated[states] = _solve_penalized(q[states], y[states], beta[states], seen[states], alpha, newton_steps)
        finite = np.isfinite(updated)
        change = float(np.abs(updated[finite] - q[finite]).max()) if finite.any() else 0.0
        q = updated
        if change < tol:
            logger.debug("tabular CQL converged after %d sweeps (alpha=%g)", sweep + 1, alpha)
            break
    return q


def expected_q(q: np.ndarray, beta: np.ndarray) -> np.ndarray:
    "Per-state sum_a beta(a) q(a), with zero-weight actions left out so -inf entries do not turn it into NaN."
    if q.shape != beta.shape:
        raise DimensionError(f"q {q.shape} and beta {beta.shape} must have the same shape")
    weighted = np.where(beta > 0, beta * np.where(np.isfinite(q), q, 0.0), 0.0)
    support_inf = (beta > 0) & ~np.isfinite(q)
    return np.where(support_inf.any(axis=1), -np.inf, weighted.sum(axis=1))


def _solve_penalized(q: np.ndarray, y: np.ndarray, beta: np.ndarray, seen: np.ndarray, alpha: float, steps: int) -> np.ndarray:
    x = np.where(seen, np.where(np.isfinite(q), q, y), 0.0)
    eye = np.eye(x.shape[1])
    for _ in range(steps):
        logits = np.where(seen, x, -np.inf)
        p = np.exp(logits - logits.max(axis=1, keepdims=True))
        p /= p.sum(axis=1, keepdims=True)
        grad = np.where(seen, alpha * (p - beta) + beta * (x - y), 0.0)
        hess = alpha * (p[:, :, None] * eye - p[:, :, None] * p[:, None, :]) + beta[:, :, None] * eye
        hess = np.where(seen[:, :, None] & seen[:, None, :], hess, 0.0) + (~seen)[:, :, None] * eye
        delta = np.linalg.solve(hess, -grad[:, :, None])[:, :, 0]
        x = x + np.clip(delta, -1.0, 1.0)
    return np.where(seen, x, -np.inf)