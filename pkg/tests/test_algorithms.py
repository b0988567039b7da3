import copy
from functools import partial

import numpy as np
import pytest
from cogstitch import (
    Agent,
    ConfigError,
    ContractError,
    Dataset,
    DatasetMeta,
    DimensionError,
    DivergenceError,
    DrawerGridEnv,
    GridDataset,
    TrainConfig,
    TrainingError,
    Transition,
    bellman_target,
    cql_critic_loss,
    expected_q,
    finetune_online,
    load_agent,
    policy_loss,
    save_agent,
    soft_target_update,
    tabular_cql,
    train_bc,
    train_offline,
)
from cogstitch.algorithms import bc_loss, run_episode, sample_negatives, tabular_penalty, train_step
from cogstitch.datasets import GridTransition, sample_batch
from cogstitch.envs import GridAction, all_grid_states, grid_start, grid_step
from cogstitch.nncore import Tensor, gradient_check, sample_and_logprob
from cogstitch.oracle import default_mdp, evaluate_policy_exact, greedy_policy, value_iteration
from cogstitch.scripted import collect_grid
from cogstitch.utils import make_rng

SMALL = dict(hidden_dims=(16, 16), batch_size=32, bc_warmstart_steps=0)


def _dataset(rng: np.random.Generator, size: int = 64, obs_dim: int = 8, labeled: bool = True, action: float | None = None) -> Dataset:
    ds = Dataset(DatasetMeta(env="drawer_grid", obs_dim=obs_dim, reward_labeled=labeled))
    trajectory = []
    for _ in range(size):
        a = np.full(8, action) if action is not None else rng.uniform(-1, 1, 8)
        r = float(rng.random() < 0.2) if labeled else 0.0
        trajectory.append(Transition(rng.normal(size=obs_dim), a, r, rng.normal(size=obs_dim)))
    return ds.append(trajectory)


def _agent(**overrides) -> Agent:
    cfg = TrainConfig(**{**SMALL, **overrides})
    return Agent(8, 8, cfg, make_rng(0))


def test_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(gamma=1.0)
    with pytest.raises(ConfigError):
        TrainConfig(alpha_cql=-1.0)
    with pytest.raises(ConfigError):
        TrainConfig(num_q=3)
    assert TrainConfig.sac().alpha_cql == 0.0 and TrainConfig.sac().entropy_backup
    assert TrainConfig.full_length(alpha_cql=5.0).total_steps == 1_000_000
    assert TrainConfig(gamma=0.9, divergence_factor=10.0).divergence_threshold == pytest.approx(100.0)


def test_default_target_entropy():
    assert _agent().target_entropy == -8.0
    assert _agent(target_entropy=-2.0).target_entropy == -2.0


def test_soft_target_update_extremes():
    agent = _agent()
    for p in agent.q1.parameters().values():
        p.data = p.data + 1.0
    before = agent.q1_target.state_dict()
    soft_target_update(agent, 0.0)
    assert all(np.array_equal(before[k], v) for k, v in agent.q1_target.state_dict().items())
    soft_target_update(agent, 1.0)
    online = agent.q1.state_dict()
    assert all(np.array_equal(online[k], v) for k, v in agent.q1_target.state_dict().items())


def test_soft_target_update_is_geometric():
    agent = _agent()
    name = "layer0.bias"
    agent.q2_target.parameters()[name].data = np.zeros_like(agent.q2.parameters()[name].data)
    agent.q2.parameters()[name].data = np.ones_like(agent.q2.parameters()[name].data)
    for _ in range(10):
        soft_target_update(agent, 0.1)
    assert np.allclose(agent.q2_target.parameters()[name].data, 1.0 - 0.9**10)


def _zero(module) -> None:
    for p in module.parameters().values():
        p.data = np.zeros_like(p.data)


def test_bellman_target_with_zero_critics():
    agent = _agent()
    _zero(agent.q1_target)
    _zero(agent.q2_target)
    batch = sample_batch([_dataset(make_rng(1))], 32, make_rng(2))
    target = bellman_target(batch, agent, agent.cfg, make_rng(3))
    assert np.array_equal(target, batch.rewards)


def test_sac_backup_adds_entropy_bonus():
    agent = _agent(alpha_cql=0.0, entropy_backup=True)
    _zero(agent.q1_target)
    _zero(agent.q2_target)
    batch = sample_batch([_dataset(make_rng(1))], 32, make_rng(2))
    target = bellman_target(batch, agent, agent.cfg, make_rng(3))
    assert not np.array_equal(target, batch.rewards)


def test_critic_loss_without_penalty_is_half_mse():
    agent = _agent(alpha_cql=0.0)
    batch = sample_batch([_dataset(make_rng(4))], 32, make_rng(5))
    target = np.ones(32)
    loss, stats = cql_critic_loss(agent.q1, batch, target, None, agent.cfg)
    q = agent.q1(batch.obs, batch.actions).data
    assert loss.item() == pytest.approx(0.5 * np.mean((q - 1.0) ** 2))
    assert stats.penalty == 0.0


def _critic_objective(q, batch, target, negatives, cfg) -> Tensor:
    return cql_critic_loss(q, batch, target, negatives, cfg)[0]


def _policy_objective(agent: Agent, obs: np.ndarray, seed: int) -> Tensor:
    return policy_loss(agent, obs, make_rng(seed))[0]


def test_cql_critic_loss_gradient():
    for seed in range(100):
        cfg = TrainConfig(**SMALL) if seed % 2 else TrainConfig(**{**SMALL, "alpha_cql": 5.0, "n_negative": 4})
        agent = Agent(8, 8, cfg, make_rng(seed))
        batch = sample_batch([_dataset(make_rng(1000 + seed), size=16)], 8, make_rng(2000 + seed))
        target = bellman_target(batch, agent, cfg, make_rng(3000 + seed))
        negatives = sample_negatives(agent, batch, cfg, make_rng(4000 + seed))
        assert len(negatives.actions) == cfg.n_negative + 2

        for q in (agent.q1, agent.q2):
            result = gradient_check(partial(_critic_objective, q, batch, target, negatives, cfg), q.parameters(), make_rng(seed))
            assert result.checked > 0, seed
            assert result.max_rel_error < 1e-4, seed


def test_policy_loss_gradient():
    for seed in range(100):
        agent = Agent(8, 8, TrainConfig(**SMALL), make_rng(seed))
        obs = make_rng(1000 + seed).normal(size=(8, 8))
        result = gradient_check(partial(_policy_objective, agent, obs, seed), agent.policy.parameters(), make_rng(2000 + seed))
        assert result.max_rel_error < 1e-4, seed


def test_bc_loss_gradient():
    for seed in range(100):
        agent = Agent(8, 8, TrainConfig(**SMALL), make_rng(seed))
        batch = sample_batch([_dataset(make_rng(1000 + seed), size=16)], 8, make_rng(2000 + seed))
        result = gradient_check(partial(bc_loss, agent.policy, batch.obs, batch.actions), agent.policy.parameters(), make_rng(3000 + seed))
        assert result.checked > 0, seed
        assert result.max_rel_error < 1e-4, seed


def _flatten_critic(q, value: float) -> None:
    q.mlp.weights[-1].data = np.zeros_like(q.mlp.weights[-1].data)
    q.mlp.biases[-1].data = np.full_like(q.mlp.biases[-1].data, value)


def test_flat_critic_leaves_only_the_entropy_gradient():
    agent = _agent()
    _flatten_critic(agent.q1, 2.0)
    _flatten_critic(agent.q2, 3.0)
    obs = make_rng(40).normal(size=(32, 8))

    agent.policy.zero_grad()
    loss, logp = policy_loss(agent, obs, make_rng(41))
    loss.backward()
    from_loss = {k: p.grad.copy() for k, p in agent.policy.parameters().items()}

    agent.policy.zero_grad()
    _, entropy_logp = sample_and_logprob(agent.policy, obs, make_rng(41))
    (entropy_logp * agent.temperature).mean().backward()

    assert loss.item() == pytest.approx(agent.temperature * logp.mean() - 2.0)
    for name, p in agent.policy.parameters().items():
        assert np.allclose(from_loss[name], p.grad, atol=1e-12), name


def test_flat_critic_widens_a_narrow_policy():
    agent = _agent(lr_policy=1e-2)
    _flatten_critic(agent.q1, 0.0)
    _flatten_critic(agent.q2, 0.0)
    agent.policy.mlp.biases[-1].data[agent.act_dim :] = -2.0
    obs = make_rng(42).normal(size=(64, 8))
    rng = make_rng(43)

    for _ in range(300):
        agent.policy_opt.zero_grad()
        policy_loss(agent, obs, rng)[0].backward()
        agent.policy_opt.step()

    _, log_std = agent.policy.distribution(obs)
    assert np.exp(log_std.data).mean() > 0.5


class _PeakedCritic:
    "Q(s, a) = -(a - peak)^2 for a one-dimensional action."

    def __init__(self, peak: float) -> None:
        self.peak = peak

    def __call__(self, obs, act):
        return ((act - self.peak) ** 2).reshape(-1) * -1.0


def test_policy_climbs_a_quadratic_critic():
    cfg = TrainConfig(hidden_dims=(16, 16), initial_temperature=1e-4, lr_policy=1e-2)
    agent = Agent(2, 1, cfg, make_rng(44))
    agent.q1 = agent.q2 = _PeakedCritic(0.3)
    obs = np.tile([0.5, -0.5], (64, 1))
    rng = make_rng(45)

    for step in range(1500):
        if step == 1000:
            agent.policy_opt.state.lr = 1e-3
        agent.policy_opt.zero_grad()
        policy_loss(agent, obs, rng)[0].backward()
        agent.policy_opt.step()

    assert abs(float(agent.act(obs[:1])[0, 0]) - 0.3) < 0.02


def test_tabular_penalty_gradient_is_softmax_minus_data():
    values = np.array([[0.5, -1.0, 2.0], [0.0, 0.0, 0.0]])
    q = Tensor(values, requires_grad=True)
    tabular_penalty(q, np.array([1, 2])).backward()
    softmax = np.exp(values) / np.exp(values).sum(axis=1, keepdims=True)
    expected = (softmax - np.eye(3)[[1, 2]]) / 2
    assert np.allclose(q.grad, expected)


def test_train_step_counts_and_bc_window():
    agent = _agent(bc_warmstart_steps=1)
    union = [_dataset(make_rng(14))]
    first = train_step(agent, union, agent.cfg, make_rng(15))
    second = train_step(agent, union, agent.cfg, make_rng(16))
    assert (first.step, second.step) == (1, 2)
    assert first.used_bc and not second.used_bc
    assert train_step(_agent(bc_warmstart_steps=5), union, agent.cfg, make_rng(17), allow_bc=False).used_bc is False


def test_divergence_guard():
    agent = _agent(divergence_factor=1e-6)
    with pytest.raises(DivergenceError) as caught:
        train_step(agent, [_dataset(make_rng(18))], agent.cfg, make_rng(19))
    assert caught.value.step == 1 and agent.step == 1


def test_non_finite_values_abort_training():
    agent = _agent()
    for p in agent.q1.parameters().values():
        p.data = np.full_like(p.data, 1e200)
    with pytest.raises(TrainingError) as caught:
        train_step(agent, [_dataset(make_rng(20))], agent.cfg, make_rng(21))
    assert not isinstance(caught.value, DivergenceError)


def test_zero_steps_write_nothing():
    result = train_offline([_dataset(make_rng(22))], TrainConfig(**SMALL, total_steps=0), seed=0)
    assert result.metrics == [] and result.snapshots == []
    assert result.agent.step == 0


def test_metrics_rows_and_snapshots():
    cfg = TrainConfig(**SMALL, total_steps=5, eval_interval=2, log_interval=1)
    calls = []

    def evaluator(agent):
        calls.append(agent.step)
        return {"open_drawer": 0.5}

    result = train_offline([_dataset(make_rng(23))], cfg, seed=1, evaluator=evaluator)
    assert [step for step, _ in result.snapshots] == [2, 4, 5]
    assert calls == [2, 4, 5]
    assert [row["step"] for row in result.metrics] == [1, 2, 3, 4, 5]
    assert result.metrics[1]["eval_success_rate"] == 0.5


def test_log_interval_without_evaluator():
    cfg = TrainConfig(**SMALL, total_steps=4, log_interval=2)
    result = train_offline([_dataset(make_rng(24))], cfg, seed=2)
    assert [row["step"] for row in result.metrics] == [2, 4]


def test_training_is_reproducible():
    cfg = TrainConfig(**SMALL, total_steps=3)
    data = [_dataset(make_rng(25))]
    a = train_offline(data, cfg, seed=3).agent.tensors()
    b = train_offline(data, cfg, seed=3).agent.tensors()
    assert all(np.array_equal(a[k], b[k]) for k in a)


def test_offline_rl_needs_reward_labels():
    with pytest.raises(ConfigError):
        train_offline([_dataset(make_rng(26), labeled=False)], TrainConfig(**SMALL), seed=0)
    with pytest.raises(ConfigError):
        train_offline([], TrainConfig(**SMALL), seed=0)


def test_mismatched_layouts_are_rejected():
    with pytest.raises(ConfigError):
        train_offline([_dataset(make_rng(27)), _dataset(make_rng(28), obs_dim=6)], TrainConfig(**SMALL, total_steps=1), seed=0)


def test_behavior_cloning_recovers_a_constant_action():
    cfg = TrainConfig(**SMALL, lr_policy=1e-2, total_steps=300)
    result = train_bc([_dataset(make_rng(29), labeled=False, action=0.5)], cfg, seed=4)
    assert result.agent.step == 300
    action = result.agent.act(make_rng(30).normal(size=(4, 8)))
    assert np.allclose(action, 0.5, atol=0.1)


def test_behavior_cloning_memorizes_a_single_pair():
    rng = make_rng(46)
    obs, action = rng.normal(size=8), rng.uniform(-0.8, 0.8, 8)
    ds = Dataset(DatasetMeta(env="drawer_grid", obs_dim=8, reward_labeled=False))
    ds.append([Transition(obs, action, 0.0, obs)])
    cfg = TrainConfig(**SMALL, lr_policy=1e-3, total_steps=3000)

    result = train_bc([ds], cfg, seed=5)

    assert np.allclose(result.agent.act(obs)[0], action, atol=0.01)


@pytest.mark.slow
def test_zero_reward_data_without_terminals_keeps_q_at_zero():
    rng = make_rng(47)
    obs = rng.normal(size=(128, 8))
    ds = Dataset(DatasetMeta(env="drawer_grid", obs_dim=8))
    ds.append([Transition(obs[i], rng.uniform(-1, 1, 8), 0.0, obs[rng.integers(len(obs))]) for i in range(len(obs))])
    cfg = TrainConfig(hidden_dims=(16, 16), batch_size=64, alpha_cql=0.0, gamma=0.9, tau=0.1, bc_warmstart_steps=5000, total_steps=5000)

    agent = train_offline([ds], cfg, seed=6).agent

    for q in (agent.q1, agent.q2):
        assert np.abs(q(ds.obs, ds.actions).data).max() < 0.05


def test_swapping_the_twin_critics_changes_nothing():
    cfg = TrainConfig(**{**SMALL, "bc_warmstart_steps": 5}, total_steps=20)
    data = [_dataset(make_rng(48))]
    agent = Agent(8, 8, cfg, make_rng(49))
    swapped = copy.deepcopy(agent)
    swapped.q1, swapped.q2 = swapped.q2, swapped.q1
    swapped.q1_target, swapped.q2_target = swapped.q2_target, swapped.q1_target
    swapped.reset_optimizers()

    a = train_offline(data, cfg, seed=7, agent=agent).agent
    b = train_offline(data, cfg, seed=7, agent=swapped).agent

    obs = make_rng(50).normal(size=(16, 8))
    pa, pb = a.policy.state_dict(), b.policy.state_dict()
    assert all(np.array_equal(pa[k], pb[k]) for k in pa)
    assert np.array_equal(a.q1(obs, a.act(obs)).data, b.q2(obs, b.act(obs)).data)
    assert a.temperature == b.temperature


def test_agent_checkpoint_round_trip(tmp_path):
    result = train_offline([_dataset(make_rng(31))], TrainConfig(**SMALL, total_steps=2), seed=5)
    path = save_agent(result.agent, tmp_path / "agent.ckpt")
    loaded = load_agent(path)
    obs = make_rng(32).normal(size=(3, 8))
    assert loaded.step == 2
    assert loaded.cfg.hidden_dims == (16, 16)
    assert np.array_equal(loaded.act(obs), result.agent.act(obs))
    assert loaded.temperature == result.agent.temperature


def test_run_episode_covers_the_horizon():
    env = DrawerGridEnv(size=3)
    transitions, success = run_episode(_agent(), env, "open_drawer", make_rng(33))
    assert len(transitions) == env.horizon
    assert success == any(t.reward > 0 for t in transitions)


def test_finetune_trains_once_per_transition():
    env = DrawerGridEnv(size=3, horizon=5)
    agent = _agent()
    scores = []

    def evaluator(a):
        scores.append(a.step)
        return {"open_drawer": 0.0}

    result = finetune_online(agent, env, ["open_drawer", "closed_drawer"], agent.cfg, seed=6, episodes=2, evaluator=evaluator, eval_every=1)
    assert len(result.buffer) == 10 and result.buffer.num_trajectories == 2
    assert agent.step == 10
    assert [row["buffer_size"] for row in result.episodes] == [5, 10]
    assert scores == [5, 10]


def test_finetune_rejects_bad_arguments():
    agent = _agent()
    with pytest.raises(ConfigError):
        finetune_online(agent, DrawerGridEnv(), ["open_drawer"], agent.cfg, seed=0, episodes=-1)
    with pytest.raises(ConfigError):
        finetune_online(agent, DrawerGridEnv(), [], agent.cfg, seed=0, episodes=1)


# tabular solver


def _full_coverage(mdp) -> GridDataset:
    data = GridDataset()
    for s in all_grid_states(mdp.rules.size):
        for a in GridAction:
            nxt, r = grid_step(s, a, mdp.rules)
            data.extend([GridTransition(s, a, r, nxt)])
    return data


def _stitching_data(rules) -> tuple[GridDataset, GridDataset]:
    prior = collect_grid(rules, {"open": 1.0}, 1, False, make_rng(0), ["closed_drawer"])
    prior.extend(collect_grid(rules, {"unblock": 1.0}, 1, False, make_rng(0), ["blocked_drawer_1"]).transitions)
    task = collect_grid(rules, {"grasp": 1.0}, 1, True, make_rng(0), ["open_drawer"])
    return prior, task


def _success_from(mdp, q, cond) -> float:
    return evaluate_policy_exact(mdp, greedy_policy(q))[mdp.state_id(grid_start(cond, mdp.rules))]


def test_tabular_without_penalty_matches_value_iteration():
    mdp = default_mdp(size=3, gamma=0.9)
    q = tabular_cql(mdp, [_full_coverage(mdp)], alpha=0.0)
    assert np.abs(q - value_iteration(mdp)).max() < 1e-6


def test_tabular_penalty_is_monotone_in_alpha():
    mdp = default_mdp(size=3, gamma=0.9)
    data = [_full_coverage(mdp)]
    expected = [tabular_cql(mdp, data, alpha=alpha).mean(axis=1) for alpha in (0.0, 1.0, 10.0)]
    assert np.all(expected[1] <= expected[0] + 1e-6)
    assert np.all(expected[2] <= expected[1] + 1e-6)
    assert expected[2].sum() < expected[0].sum()


def test_tabular_unseen_actions_are_ruled_out():
    mdp = default_mdp(size=3, gamma=0.9)
    _, task = _stitching_data(mdp.rules)
    q = tabular_cql(mdp, [task], alpha=1.0)
    open_start = mdp.state_id(grid_start("open_drawer", mdp.rules))
    assert q[open_start, GridAction.LEFT] > 0
    assert np.isneginf(q[open_start, GridAction.RIGHT])
    closed_start = mdp.state_id(grid_start("closed_drawer", mdp.rules))
    assert np.all(q[closed_start] == 0.0)


def test_tabular_stitching():
    mdp = default_mdp(size=3, gamma=0.9)
    prior, task = _stitching_data(mdp.rules)

    q = tabular_cql(mdp, [prior, task], alpha=1.0)

    for cond in ("open_drawer", "closed_drawer", "blocked_drawer_1", "blocked_drawer_2"):
        assert _success_from(mdp, q, cond) == 1.0


def test_tabular_task_only_fails_from_new_starts():
    mdp = default_mdp(size=3, gamma=0.9)
    _, task = _stitching_data(mdp.rules)

    q = tabular_cql(mdp, [task], alpha=1.0)

    assert _success_from(mdp, q, "open_drawer") == 1.0
    assert _success_from(mdp, q, "closed_drawer") == 0.0
    assert _success_from(mdp, q, "blocked_drawer_1") == 0.0


def test_tabular_needs_data():
    mdp = default_mdp(size=3)
    with pytest.raises(ContractError):
        tabular_cql(mdp, [GridDataset()], alpha=1.0)
    with pytest.raises(ConfigError):
        tabular_cql(mdp, [_full_coverage(mdp)], alpha=-1.0)


def _empirical_beta(mdp, data: GridDataset) -> np.ndarray:
    counts = np.zeros((mdp.num_states, len(GridAction)))
    for t in data.transitions:
        counts[mdp.state_id(t.state), int(t.action)] += 1
    visits = counts.sum(axis=1, keepdims=True)
    return counts / np.where(visits > 0, visits, 1.0)


def test_expected_q_skips_ruled_out_actions():
    mdp = default_mdp(size=3, gamma=0.9)
    _, task = _stitching_data(mdp.rules)
    q = tabular_cql(mdp, [task], alpha=1.0)
    beta = _empirical_beta(mdp, task)

    with np.errstate(invalid="ignore"):
        naive = (beta * q).sum(axis=1)
    values = expected_q(q, beta)

    assert np.isnan(naive).any()
    assert np.all(np.isfinite(values))
    open_start = mdp.state_id(grid_start("open_drawer", mdp.rules))
    assert values[open_start] == q[open_start, GridAction.LEFT]


def test_expected_q_checks_shapes():
    with pytest.raises(DimensionError):
        expected_q(np.zeros((3, 6)), np.zeros((3, 5)))
