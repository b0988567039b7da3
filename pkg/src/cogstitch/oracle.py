"""
Exact ground truth for the drawer gridworld: the enumerated MDP, value
iteration, breadth-first reachability and exact policy evaluation.
"""

import itertools
import logging
import math
from collections import deque
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .envs import DEFAULT_GRID_SIZE, GridAction, GridObject, GridRules, GridState, all_grid_states, grid_step
from .errors import ConfigError
from .utils import write_csv

logger = logging.getLogger("cogstitch.oracle")

NUM_ACTIONS = len(GridAction)
QSTAR_COLUMNS = ["gripper", "drawer", "blocker", "object", "action", "q"]


@dataclass
class GridMdp:
    rules: GridRules
    gamma: float
    states: list[GridState]
    index: dict[GridState, int]
    next_state: np.ndarray
    reward: np.ndarray

    @classmethod
    def build(cls, rules: GridRules | None = None, gamma: float = 0.99) -> "GridMdp":
        if not 0.0 < gamma < 1.0:
            raise ConfigError(f"gamma must lie in (0, 1), got {gamma}")
        rules = rules or GridRules()
        states = all_grid_states(rules.size)
        index = {s: i for i, s in enumerate(states)}
        next_state = np.zeros((len(states), NUM_ACTIONS), dtype=np.int64)
        reward = np.zeros((len(states), NUM_ACTIONS))
        for i, s in enumerate(states):
            for a in GridAction:
                nxt, r = grid_step(s, a, rules)
                next_state[i, a] = index[nxt]
                reward[i, a] = r
        return cls(rules, gamma, states, index, next_state, reward)

    @property
    def num_states(self) -> int:
        return len(self.states)

    def state_id(self, gs: GridState) -> int:
        return self.index[gs]

    def is_success(self, s: int) -> bool:
        return self.states[s].obj is GridObject.OUT


def value_iteration(mdp: GridMdp, tol: float = 1e-10, max_iterations: int = 100_000) -> np.ndarray:
    "Optimal Q-table; stops once the sup-norm Bellman residual drops below `tol`."
    if tol <= 0:
        raise ConfigError(f"tol must be positive, got {tol}")
    q = np.zeros((mdp.num_states, NUM_ACTIONS))
    for iteration in range(max_iterations):
        updated = mdp.reward + mdp.gamma * q.max(axis=1)[mdp.next_state]
        residual = float(np.abs(updated - q).max())
        q = updated
        if residual < tol:
            logger.debug("value iteration converged after %d sweeps", iteration + 1)
            break
    return q


def greedy_policy(q: np.ndarray) -> np.ndarray:
    return np.argmax(q, axis=1)


def reachability(mdp: GridMdp, start: "GridState | int") -> float:
    "Fewest steps until a rewarded transition, or inf."
    s0 = start if isinstance(start, int) else mdp.state_id(start)
    if mdp.is_success(s0):
        return 0
    depth = {s0: 0}
    queue = deque([s0])
    while queue:
        s = queue.popleft()
        for a in range(NUM_ACTIONS):
            if mdp.reward[s, a] > 0:
                return depth[s] + 1
            nxt = int(mdp.next_state[s, a])
            if nxt not in depth:
                depth[nxt] = depth[s] + 1
                queue.append(nxt)
    return math.inf


def exhaustive_min_steps(mdp: GridMdp, start: "GridState | int", max_depth: int) -> float:
    "Brute force over every action sequence up to `max_depth`."
    s0 = start if isinstance(start, int) else mdp.state_id(start)
    if mdp.is_success(s0):
        return 0
    for depth in range(1, max_depth + 1):
        for plan in itertools.product(range(NUM_ACTIONS), repeat=depth):
            s = s0
            for a in plan:
                if mdp.reward[s, a] > 0:
                    return depth
                s = int(mdp.next_state[s, a])
    return math.inf


def evaluate_policy_exact(mdp: GridMdp, policy_table: np.ndarray, horizon: int = 20) -> np.ndarray:
    "Per start state: 1.0 if the deterministic rollout collects a reward within the horizon."
    policy_table = np.asarray(policy_table, dtype=np.int64)
    if policy_table.shape != (mdp.num_states,):
        raise ConfigError(f"policy table needs one action per state ({mdp.num_states}), got {policy_table.shape}")
    success = np.zeros(mdp.num_states)
    for s0 in range(mdp.num_states):
        s = s0
        for _ in range(horizon):
            a = policy_table[s]
            if mdp.reward[s, a] > 0:
                success[s0] = 1.0
                break
            s = int(mdp.next_state[s, a])
    return success


def success_probability_uniform(mdp: GridMdp, start: "GridState | int", horizon: int = 20) -> float:
    "Exact success probability of the uniform random policy, by powers of the absorbing chain."
    s0 = start if isinstance(start, int) else mdp.state_id(start)
    n = mdp.num_states
    chain = np.zeros((n + 1, n + 1))
    chain[n, n] = 1.0
    for s in range(n):
        for a in range(NUM_ACTIONS):
            target = n if mdp.reward[s, a] > 0 else int(mdp.next_state[s, a])
            chain[s, target] += 1.0 / NUM_ACTIONS
    return float(np.linalg.matrix_power(chain, horizon)[s0, n])


def dump_qstar(mdp: GridMdp, q: np.ndarray, path: str | Path) -> Path:
    rows = (
        {"gripper": s.gripper, "drawer": "open" if s.drawer_open else "closed", "blocker": s.blocker.value, "object": s.obj.value, "action": a.name.lower(), "q": float(q[i, a])}
        for i, s in enumerate(mdp.states)
        for a in GridAction
    )
    path = write_csv(path, QSTAR_COLUMNS, rows)
    logger.info("Q* table for G=%d written to %s", mdp.rules.size, path)
    return path


def default_mdp(size: int = DEFAULT_GRID_SIZE, gamma: float = 0.99, blocker_removable: bool = True) -> GridMdp:
    return GridMdp.build(GridRules(size=size, blocker_removable=blocker_removable), gamma)
