"""
Dense tensors with reverse-mode automatic differentiation, on top of numpy.

Every operation records a closure that maps the gradient of its output to the
gradients of its inputs; `Tensor.backward()` walks the recorded graph in reverse
topological order. The layers built on top (MLP, Q-function, squashed Gaussian
policy) and the Adam optimizer are everything the actor-critic updates need.
All arithmetic is float64.
"""

from __future__ import annotations

import copy
import logging
import math
import struct
import threading
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path
from typing import TYPE_CHECKING, Callable, Iterator, Sequence

if TYPE_CHECKING:
    from typing_extensions import Self

import numpy as np

from .errors import CheckpointError, ContractError, DimensionError, NumericalError, TrainingError

logger = logging.getLogger("cogstitch.nncore")

LOG_STD_MIN = -20.0
LOG_STD_MAX = 2.0
BC_ACTION_LIMIT = 1.0 - 1e-6
_HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)

_grad_mode = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_grad_mode, "enabled", True)


@contextmanager
def no_grad() -> Iterator[None]:
    previous = is_grad_enabled()
    _grad_mode.enabled = False
    try:
        yield
    finally:
        _grad_mode.enabled = previous


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _check_finite(values: np.ndarray, where: str) -> None:
    if not np.isfinite(values).all():
        raise NumericalError(f"non-finite values produced by {where}")


Backward = Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "op", "_parents", "_backward")
    # ndarray <op> Tensor must dispatch to the Tensor's reflected operator
    __array_ufunc__ = None

    def __init__(self, data: "np.ndarray | float | Sequence[float]", requires_grad: bool = False, op: str = "") -> None:
        values = np.array(data, dtype=np.float64)
        _check_finite(values, op or "tensor constructor")
        self.data = values
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = np.zeros_like(values) if requires_grad else None
        self.op = op
        self._parents: tuple["Tensor", ...] = ()
        self._backward: Backward | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op or 'leaf'}, requires_grad={self.requires_grad})"

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    # graph construction

    @staticmethod
    def _make(data: np.ndarray, parents: tuple["Tensor", ...], op: str, backward: Backward) -> "Tensor":
        track = is_grad_enabled() and any(p.requires_grad for p in parents)
        out = Tensor(data, op=op)
        if track:
            out.requires_grad = True
            out._parents = parents
            out._backward = backward
        return out

    def backward(self) -> None:
        if self.data.shape != ():
            raise ContractError(f"backward() needs a scalar loss, got shape {self.data.shape}")
        if not self.requires_grad:
            return
        order = self._topological_order()
        for node in order:
            if node._parents:
                node.grad = np.zeros_like(node.data)
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward is None or node.grad is None:
                continue
            for parent, grad in zip(node._parents, node._backward(node.grad)):
                if grad is None or not parent.requires_grad:
                    continue
                grad = _unbroadcast(grad, parent.shape)
                _check_finite(grad, f"backward of {node.op}")
                if parent.grad is None:
                    parent.grad = np.zeros_like(parent.data)
                parent.grad = parent.grad + grad

    def _topological_order(self) -> list["Tensor"]:
        order: list[Tensor] = []
        visited: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if parent.requires_grad and id(parent) not in visited:
                    stack.append((parent, False))
        return order

    # arithmetic

    def __add__(self, other: "Tensor | float | np.ndarray") -> "Tensor":
        other = as_tensor(other)
        return Tensor._make(self.data + other.data, (self, other), "add", lambda g: (g, g))

    __radd__ = __add__

    def __neg__(self) -> "Tensor":
        return Tensor._make(-self.data, (self,), "neg", lambda g: (-g,))

    def __sub__(self, other: "Tensor | float | np.ndarray") -> "Tensor":
        other = as_tensor(other)
        return Tensor._make(self.data - other.data, (self, other), "sub", lambda g: (g, -g))

    def __rsub__(self, other: "Tensor | float | np.ndarray") -> "Tensor":
        return as_tensor(other) - self

    def __mul__(self, other: "Tensor | float | np.ndarray") -> "Tensor":
        other = as_tensor(other)
        a, b = self.data, other.data
        return Tensor._make(a * b, (self, other), "mul", lambda g: (g * b, g * a))

    __rmul__ = __mul__

    def __truediv__(self, other: "Tensor | float | np.ndarray") -> "Tensor":
        other = as_tensor(other)
        a, b = self.data, other.data
        return Tensor._make(a / b, (self, other), "div", lambda g: (g / b, -g * a / (b * b)))

    def __pow__(self, exponent: float) -> "Tensor":
        a = self.data
        return Tensor._make(a**exponent, (self,), "pow", lambda g: (g * exponent * a ** (exponent - 1),))

    def __matmul__(self, other: "Tensor") -> "Tensor":
        a, b = self.data, other.data
        if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
            raise DimensionError(f"matmul of {a.shape} and {b.shape}")
        return Tensor._make(a @ b, (self, other), "matmul", lambda g: (g @ b.T, a.T @ g))

    def __getitem__(self, index: object) -> "Tensor":
        shape = self.data.shape

        def backward(g: np.ndarray) -> tuple[np.ndarray]:
            full = np.zeros(shape)
            np.add.at(full, index, g)
            return (full,)

        return Tensor._make(self.data[index], (self,), "getitem", backward)

    # reductions and shape

    def sum(self, axis: int | None = None, keepdims: bool = False) -> "Tensor":
        shape = self.data.shape

        def backward(g: np.ndarray) -> tuple[np.ndarray]:
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, shape),)

        return Tensor._make(self.data.sum(axis=axis, keepdims=keepdims), (self,), "sum", backward)

    def mean(self, axis: int | None = None, keepdims: bool = False) -> "Tensor":
        count = self.data.size if axis is None else self.data.shape[axis]
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / count)

    def reshape(self, *shape: int) -> "Tensor":
        original = self.data.shape
        return Tensor._make(self.data.reshape(*shape), (self,), "reshape", lambda g: (g.reshape(original),))

    # elementwise functions

    def exp(self) -> "Tensor":
        out = np.exp(self.data)
        return Tensor._make(out, (self,), "exp", lambda g: (g * out,))

    def log(self) -> "Tensor":
        a = self.data
        return Tensor._make(np.log(a), (self,), "log", lambda g: (g / a,))

    def tanh(self) -> "Tensor":
        out = np.tanh(self.data)
        return Tensor._make(out, (self,), "tanh", lambda g: (g * (1.0 - out * out),))

    def relu(self) -> "Tensor":
        mask = self.data > 0
        return Tensor._make(self.data * mask, (self,), "relu", lambda g: (g * mask,))

    def softplus(self) -> "Tensor":
        a = self.data
        return Tensor._make(np.logaddexp(0.0, a), (self,), "softplus", lambda g: (g * _sigmoid(a),))

    def clamp(self, low: float, high: float) -> "Tensor":
        a = self.data
        mask = (a >= low) & (a <= high)
        return Tensor._make(np.clip(a, low, high), (self,), "clamp", lambda g: (g * mask,))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return np.exp(-np.logaddexp(0.0, -x))


def as_tensor(value: "Tensor | float | np.ndarray | Sequence[float]") -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def minimum(a: Tensor, b: Tensor) -> Tensor:
    take_a = a.data <= b.data
    return Tensor._make(np.where(take_a, a.data, b.data), (a, b), "minimum", lambda g: (g * take_a, g * ~take_a))


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    parts = [as_tensor(t) for t in tensors]
    sizes = [p.data.shape[axis] for p in parts]
    splits = np.cumsum(sizes)[:-1]
    return Tensor._make(np.concatenate([p.data for p in parts], axis=axis), tuple(parts), "concat", lambda g: np.split(g, splits, axis=axis))


def stack(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    parts = [as_tensor(t) for t in tensors]
    count = len(parts)

    def backward(g: np.ndarray) -> list[np.ndarray]:
        return [np.take(g, i, axis=axis) for i in range(count)]

    return Tensor._make(np.stack([p.data for p in parts], axis=axis), tuple(parts), "stack", backward)


def logsumexp(values: Tensor, axis: int = -1) -> Tensor:
    """Stable log(sum(exp(values))) along `axis`; the gradient is the softmax."""
    data = values.data
    if data.ndim == 0 or data.shape[axis] == 0:
        raise ContractError(f"logsumexp over an empty axis {axis} of shape {data.shape}")
    peak = data.max(axis=axis, keepdims=True)
    shifted = np.exp(data - peak)
    total = shifted.sum(axis=axis, keepdims=True)
    out = (peak + np.log(total)).squeeze(axis)
    softmax = shifted / total

    def backward(g: np.ndarray) -> tuple[np.ndarray]:
        return (np.expand_dims(g, axis) * softmax,)

    return Tensor._make(out, (values,), "logsumexp", backward)


# layers


@dataclass(frozen=True)
class MlpSpec:
    input_dim: int
    output_dim: int
    hidden_dims: tuple[int, ...] = (256, 256)

    def __post_init__(self) -> None:
        dims = (self.input_dim, self.output_dim, *self.hidden_dims)
        if any(int(d) < 1 for d in dims):
            raise ContractError(f"MLP dimensions must be >= 1, got {dims}")


class Module:
    "Named parameter container shared by the networks."

    def parameters(self) -> dict[str, Tensor]:
        raise NotImplementedError  # pragma: no cover

    def zero_grad(self) -> None:
        for p in self.parameters().values():
            p.zero_grad()

    def clone(self) -> Self:
        twin = copy.deepcopy(self)
        twin.zero_grad()
        return twin

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.parameters().items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        params = self.parameters()
        if set(state) != set(params):
            raise DimensionError(f"state keys {sorted(state)} do not match parameters {sorted(params)}")
        for name, p in params.items():
            values = np.asarray(state[name], dtype=np.float64)
            if values.shape != p.shape:
                raise DimensionError(f"{name}: expected shape {p.shape}, got {values.shape}")
            p.data = values.copy()
            p.zero_grad()


class Mlp(Module):
    def __init__(self, spec: MlpSpec, rng: np.random.Generator, final_scale: float = 1.0) -> None:
        self.spec = spec
        dims = [spec.input_dim, *spec.hidden_dims, spec.output_dim]
        self.weights: list[Tensor] = []
        self.biases: list[Tensor] = []
        for i, (fan_in, fan_out) in enumerate(zip(dims[:-1], dims[1:])):
            bound = 1.0 / math.sqrt(fan_in)
            scale = final_scale if i == len(dims) - 2 else 1.0
            self.weights.append(Tensor(rng.uniform(-bound, bound, (fan_in, fan_out)) * scale, requires_grad=True))
            self.biases.append(Tensor(rng.uniform(-bound, bound, fan_out) * scale, requires_grad=True))

    def parameters(self) -> dict[str, Tensor]:
        params: dict[str, Tensor] = {}
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            params[f"layer{i}.weight"] = w
            params[f"layer{i}.bias"] = b
        return params

    def __call__(self, x: "Tensor | np.ndarray") -> Tensor:
        return forward(self, x)


def forward(mlp: Mlp, x: "Tensor | np.ndarray") -> Tensor:
    h = as_tensor(x)
    if h.data.ndim == 1:
        h = h.reshape(1, -1)
    if h.data.ndim != 2 or h.shape[-1] != mlp.spec.input_dim:
        raise DimensionError(f"expected input [..., {mlp.spec.input_dim}], got {h.shape}")
    last = len(mlp.weights) - 1
    for i, (w, b) in enumerate(zip(mlp.weights, mlp.biases)):
        h = h @ w + b
        if i < last:
            h = h.relu()
    return h


class QFunction(Module):
    "Q(s, a) as an MLP over the concatenated observation and action."

    def __init__(self, obs_dim: int, act_dim: int, rng: np.random.Generator, hidden_dims: tuple[int, ...] = (256, 256)) -> None:
        self.obs_dim = obs_dim
        self.act_dim = act_dim
        self.mlp = Mlp(MlpSpec(obs_dim + act_dim, 1, tuple(hidden_dims)), rng)

    def parameters(self) -> dict[str, Tensor]:
        return self.mlp.parameters()

    def __call__(self, obs: "Tensor | np.ndarray", act: "Tensor | np.ndarray") -> Tensor:
        obs, act = as_tensor(obs), as_tensor(act)
        if obs.shape[-1] != self.obs_dim or act.shape[-1] != self.act_dim:
            raise DimensionError(f"Q expects obs [..., {self.obs_dim}] and act [..., {self.act_dim}], got {obs.shape} and {act.shape}")
        return self.mlp(concat([obs, act], axis=-1)).reshape(-1)


class GaussianPolicy(Module):
    """
    Squashed Gaussian policy head: the trunk outputs a mean and a log-stddev per
    action dimension, the log-stddev is clamped to [-20, 2] and samples are pushed
    through tanh so actions land in (-1, 1).
    """

    def __init__(self, obs_dim: int, act_dim: int, rng: np.random.Generator, hidden_dims: tuple[int, ...] = (256, 256), final_scale: float = 1e-2) -> None:
        self.obs_dim = obs_dim
        self.act_dim = act_dim
        self.mlp = Mlp(MlpSpec(obs_dim, 2 * act_dim, tuple(hidden_dims)), rng, final_scale=final_scale)

    def parameters(self) -> dict[str, Tensor]:
        return self.mlp.parameters()

    def distribution(self, obs: "Tensor | np.ndarray") -> tuple[Tensor, Tensor]:
        out = self.mlp(obs)
        mean = out[:, : self.act_dim]
        log_std = out[:, self.act_dim :].clamp(LOG_STD_MIN, LOG_STD_MAX)
        return mean, log_std


def _squash_correction(u: "Tensor") -> Tensor:
    # log(1 - tanh(u)^2) = 2 * (log 2 - u - softplus(-2u))
    return ((-2.0 * u).softplus() + u - math.log(2.0)) * -2.0


def sample_and_logprob(policy: GaussianPolicy, obs: "Tensor | np.ndarray", rng: np.random.Generator) -> tuple[Tensor, Tensor]:
    """
    Reparameterized sample a = tanh(mean + std * eps) and its log-density,
    including the tanh change-of-variables term. Returns ([B, d], [B]).
    """
    mean, log_std = policy.distribution(obs)
    eps = rng.standard_normal(mean.shape)
    u = mean + log_std.exp() * eps
    action = u.tanh()
    log_normal = (-log_std).sum(axis=-1) + float(-0.5 * policy.act_dim * 2 * _HALF_LOG_2PI) + (-0.5 * (eps * eps).sum(axis=-1))
    logprob = log_normal - _squash_correction(u).sum(axis=-1)
    return action, logprob


def log_prob(policy: GaussianPolicy, obs: "Tensor | np.ndarray", action: np.ndarray) -> Tensor:
    "Log-density of given actions; actions at exactly +-1 are pulled inside the open box first."
    a = np.clip(np.asarray(action, dtype=np.float64), -BC_ACTION_LIMIT, BC_ACTION_LIMIT)
    if a.ndim == 1:
        a = a.reshape(1, -1)
    if a.shape[-1] != policy.act_dim:
        raise DimensionError(f"expected actions [..., {policy.act_dim}], got {a.shape}")
    u = np.arctanh(a)
    mean, log_std = policy.distribution(obs)
    z = (Tensor(u) - mean) * (-log_std).exp()
    log_normal = ((z * z) * -0.5 - log_std).sum(axis=-1) - policy.act_dim * _HALF_LOG_2PI
    correction = _squash_correction(Tensor(u)).data.sum(axis=-1)
    return log_normal - correction


def deterministic_action(policy: GaussianPolicy, obs: np.ndarray) -> np.ndarray:
    with no_grad():
        mean, _ = policy.distribution(obs)
    return np.tanh(mean.data)


# optimizer


@dataclass
class AdamState:
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(state: AdamState, params: dict[str, Tensor]) -> None:
    for name, p in params.items():
        if p.grad is None:
            raise ContractError(f"parameter {name} has no gradient slot")
        if not np.isfinite(p.grad).all():
            bad = int((~np.isfinite(p.grad)).sum())
            raise TrainingError(f"non-finite gradient for {name}", {"non_finite_entries": float(bad), "adam_step": float(state.step)})
    state.step += 1
    correction1 = 1.0 - state.beta1**state.step
    correction2 = 1.0 - state.beta2**state.step
    for name, p in params.items():
        g = p.grad
        assert g is not None
        m = state.beta1 * state.m.get(name, np.zeros_like(g)) + (1.0 - state.beta1) * g
        v = state.beta2 * state.v.get(name, np.zeros_like(g)) + (1.0 - state.beta2) * g * g
        state.m[name], state.v[name] = m, v
        p.data = p.data - state.lr * (m / correction1) / (np.sqrt(v / correction2) + state.eps)


class Adam:
    def __init__(self, params: dict[str, Tensor], lr: float) -> None:
        self.params = params
        self.state = AdamState(lr=lr)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def step(self) -> None:
        adam_step(self.state, self.params)


# gradient checking


@dataclass
class GradCheckResult:
    max_rel_error: float
    checked: int
    skipped: int


def gradient_check(
    loss_fn: Callable[[], Tensor],
    params: dict[str, Tensor],
    rng: np.random.Generator,
    h: float = 1e-5,
    coords_per_param: int = 3,
) -> GradCheckResult:
    """
    Compare analytic gradients with central finite differences on a few random
    coordinates of every parameter. Coordinates whose second difference shows a
    kink (ReLU or clamp switching inside [-h, h]) are skipped and counted.
    """
    for p in params.values():
        p.zero_grad()
    loss_fn().backward()
    analytic = {name: p.grad.copy() for name, p in params.items() if p.grad is not None}
    worst, checked, skipped = 0.0, 0, 0
    with no_grad():
        base = loss_fn().item()
        for name, p in params.items():
            flat = p.data.reshape(-1)
            for index in rng.choice(flat.size, size=min(coords_per_param, flat.size), replace=False):
                original = flat[index]
                flat[index] = original + h
                up = loss_fn().item()
                flat[index] = original - h
                down = loss_fn().item()
                flat[index] = original
                if abs(up + down - 2.0 * base) > 1e-9 * max(1.0, abs(base)):
                    skipped += 1
                    continue
                numeric = (up - down) / (2.0 * h)
                exact = analytic[name].reshape(-1)[index]
                worst = max(worst, abs(numeric - exact) / max(1.0, abs(numeric), abs(exact)))
                checked += 1
    return GradCheckResult(worst, checked, skipped)


# checkpoint container

CHECKPOINT_MAGIC = b"COGCKPT1"


def save_checkpoint(path: str | Path, tensors: dict[str, np.ndarray]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        for name, values in tensors.items():
            values = np.asarray(values, dtype="<f8")
            encoded = name.encode("utf-8")
            f.write(struct.pack("<I", len(encoded)))
            f.write(encoded)
            f.write(struct.pack("<I", values.ndim))
            f.write(struct.pack(f"<{values.ndim}I", *values.shape))
            f.write(values.tobytes(order="C"))
    logger.info("checkpoint written: %s (%d tensors)", path, len(tensors))
    return path


def load_checkpoint(path: str | Path) -> dict[str, np.ndarray]:
    try:
        raw = Path(path).read_bytes()
    except FileNotFoundError as ex:
        raise CheckpointError(f"{path}: no such checkpoint") from ex
    if raw[: len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: bad magic bytes")
    offset = len(CHECKPOINT_MAGIC)
    tensors: dict[str, np.ndarray] = {}

    def take(count: int) -> bytes:
        nonlocal offset
        if offset + count > len(raw):
            raise CheckpointError(f"{path}: truncated at byte {offset}")
        chunk = raw[offset : offset + count]
        offset += count
        return chunk

    while offset < len(raw):
        (name_len,) = struct.unpack("<I", take(4))
        try:
            name = take(name_len).decode("utf-8")
        except UnicodeDecodeError as ex:
            raise CheckpointError(f"{path}: bad tensor name near byte {offset}") from ex
        (rank,) = struct.unpack("<I", take(4))
        dims = struct.unpack(f"<{rank}I", take(4 * rank))
        count = int(np.prod(dims)) if rank else 1
        tensors[name] = np.frombuffer(take(8 * count), dtype="<f8").reshape(dims).astype(np.float64)
    return tensors
