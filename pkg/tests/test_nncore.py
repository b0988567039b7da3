import math
from functools import partial

import numpy as np
import pytest
from cogstitch import CheckpointError, ContractError, DimensionError, TrainingError
from cogstitch.nncore import (
    Adam,
    GaussianPolicy,
    Mlp,
    MlpSpec,
    QFunction,
    Tensor,
    gradient_check,
    load_checkpoint,
    log_prob,
    logsumexp,
    sample_and_logprob,
    save_checkpoint,
)
from cogstitch.utils import make_rng


def _pinned_policy(mean: float, log_std: float) -> GaussianPolicy:
    "One-dimensional policy whose output ignores the observation."
    policy = GaussianPolicy(1, 1, make_rng(0), hidden_dims=(4,))
    policy.mlp.weights[-1].data = np.zeros_like(policy.mlp.weights[-1].data)
    policy.mlp.biases[-1].data = np.array([mean, log_std])
    return policy


def test_sum_gradient_is_ones():
    w = Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
    w.sum().backward()
    assert np.array_equal(w.grad, np.ones((2, 3)))


def test_dead_relu_passes_no_gradient():
    x = Tensor([-1.0, -2.0, -0.5], requires_grad=True)
    x.relu().sum().backward()
    assert np.array_equal(x.grad, np.zeros(3))


def test_backward_needs_a_scalar():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with pytest.raises(ContractError):
        (x * 2.0).backward()


def test_broadcast_gradient_is_summed_back():
    x = Tensor(np.ones((4, 3)), requires_grad=True)
    b = Tensor(np.zeros(3), requires_grad=True)
    (x + b).sum().backward()
    assert np.array_equal(b.grad, np.full(3, 4.0))


def test_logsumexp_values():
    assert logsumexp(Tensor(np.zeros((1, 4)))).data[0] == pytest.approx(math.log(4.0))
    assert logsumexp(Tensor([[3.5]])).data[0] == pytest.approx(3.5)
    big = logsumexp(Tensor([[1000.0, 1000.5]])).data[0]
    assert math.isfinite(big)
    assert big == pytest.approx(1000.5 + math.log1p(math.exp(-0.5)))


def test_logsumexp_gradient_is_softmax():
    values = np.array([[0.1, -0.4, 2.0]])
    x = Tensor(values, requires_grad=True)
    logsumexp(x).sum().backward()
    expected = np.exp(values) / np.exp(values).sum()
    assert np.allclose(x.grad, expected)


def test_logsumexp_rejects_empty_axis():
    with pytest.raises(ContractError):
        logsumexp(Tensor(np.zeros((2, 0))))


def test_zero_weights_give_zero_output():
    mlp = Mlp(MlpSpec(3, 2, (5,)), make_rng(1))
    for p in mlp.parameters().values():
        p.data = np.zeros_like(p.data)
    assert np.array_equal(mlp(np.ones((4, 3))).data, np.zeros((4, 2)))


def test_forward_matches_hand_computation():
    rng = make_rng(2)
    mlp = Mlp(MlpSpec(2, 1, (16,)), rng)
    x = rng.normal(size=(5, 2))
    w0, b0, w1, b1 = (p.data for p in mlp.parameters().values())
    expected = np.maximum(x @ w0 + b0, 0.0) @ w1 + b1
    assert np.allclose(mlp(x).data, expected)


def test_forward_rejects_wrong_width():
    mlp = Mlp(MlpSpec(3, 1, (4,)), make_rng(0))
    with pytest.raises(DimensionError):
        mlp(np.ones((2, 5)))


def _squared_error(q: QFunction, obs: np.ndarray, act: np.ndarray, target: np.ndarray) -> Tensor:
    return ((q(obs, act) - target) ** 2).mean()


def _negative_log_likelihood(policy: GaussianPolicy, obs: np.ndarray, actions: np.ndarray) -> Tensor:
    return -log_prob(policy, obs, actions).mean()


def test_q_function_gradient_check():
    for seed in range(100):
        rng = make_rng(seed)
        q = QFunction(4, 2, rng, hidden_dims=(8, 8))
        obs, act = rng.normal(size=(6, 4)), rng.uniform(-1, 1, (6, 2))
        target = rng.normal(size=6)

        result = gradient_check(partial(_squared_error, q, obs, act, target), q.parameters(), rng)

        assert result.checked > 0, seed
        assert result.max_rel_error < 1e-4, seed


def test_policy_log_prob_gradient_check():
    for seed in range(100):
        rng = make_rng(seed)
        policy = GaussianPolicy(3, 2, rng, hidden_dims=(8,), final_scale=0.5)
        obs, actions = rng.normal(size=(7, 3)), rng.uniform(-0.9, 0.9, (7, 2))

        result = gradient_check(partial(_negative_log_likelihood, policy, obs, actions), policy.parameters(), rng)

        assert result.max_rel_error < 1e-4, seed


def test_samples_stay_inside_the_box():
    policy = GaussianPolicy(3, 8, make_rng(7), hidden_dims=(16,))
    action, logp = sample_and_logprob(policy, make_rng(8).normal(size=(500, 3)), make_rng(9))
    assert action.shape == (500, 8) and logp.shape == (500,)
    assert np.all(np.abs(action.data) < 1.0)


def test_same_seed_same_sample():
    policy = GaussianPolicy(2, 3, make_rng(0), hidden_dims=(8,))
    obs = np.ones((4, 2))
    a1, l1 = sample_and_logprob(policy, obs, make_rng(11))
    a2, l2 = sample_and_logprob(policy, obs, make_rng(11))
    assert np.array_equal(a1.data, a2.data) and np.array_equal(l1.data, l2.data)


def test_sample_logprob_agrees_with_log_prob():
    policy = _pinned_policy(0.2, 0.0)
    obs = np.zeros((50, 1))
    action, logp = sample_and_logprob(policy, obs, make_rng(12))
    assert np.allclose(logp.data, log_prob(policy, obs, action.data).data, atol=1e-6)


def test_near_deterministic_policy():
    policy = _pinned_policy(0.3, -20.0)
    action, logp = sample_and_logprob(policy, np.zeros((3, 1)), make_rng(13))
    assert np.allclose(action.data, math.tanh(0.3), atol=1e-6)
    assert np.all(logp.data > 10.0)


def test_squashed_density_integrates_to_one():
    policy = _pinned_policy(0.2, 0.0)
    grid = np.linspace(-1.0 + 1e-7, 1.0 - 1e-7, 200_001)
    density = np.exp(log_prob(policy, np.zeros((len(grid), 1)), grid[:, None]).data)
    area = float(np.sum((density[1:] + density[:-1]) * np.diff(grid)) / 2.0)
    assert area == pytest.approx(1.0, abs=1e-2)


def test_adam_leaves_zero_gradients_alone():
    p = Tensor([0.5, -1.5], requires_grad=True)
    Adam({"p": p}, lr=0.1).step()
    assert np.array_equal(p.data, [0.5, -1.5])


def test_adam_first_step_moves_by_learning_rate():
    p = Tensor([1.0, 1.0], requires_grad=True)
    p.grad = np.array([3.0, -0.2])
    Adam({"p": p}, lr=0.01).step()
    assert np.allclose(p.data, [0.99, 1.01], atol=1e-6)


def test_adam_rejects_nan_gradient():
    p = Tensor([1.0], requires_grad=True)
    p.grad = np.array([np.nan])
    with pytest.raises(TrainingError):
        Adam({"p": p}, lr=0.01).step()


def test_checkpoint_round_trip(tmp_path):
    tensors = {"a.weight": make_rng(0).normal(size=(3, 4)), "scalar": np.array(2.5), "empty": np.zeros((0, 2))}
    loaded = load_checkpoint(save_checkpoint(tmp_path / "model.ckpt", tensors))
    assert list(loaded) == list(tensors)
    for name, values in tensors.items():
        assert loaded[name].shape == values.shape
        assert np.array_equal(loaded[name], values)


def test_checkpoint_bad_magic(tmp_path):
    path = tmp_path / "bad.ckpt"
    path.write_bytes(b"NOTACKPT" + b"\x00" * 8)
    with pytest.raises(CheckpointError):
        load_checkpoint(path)


def test_checkpoint_truncated(tmp_path):
    path = save_checkpoint(tmp_path / "model.ckpt", {"w": np.ones((5, 5))})
    path.write_bytes(path.read_bytes()[:-7])
    with pytest.raises(CheckpointError):
        load_checkpoint(path)


def test_checkpoint_missing(tmp_path):
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "nowhere.ckpt")
