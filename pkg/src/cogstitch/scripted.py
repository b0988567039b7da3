"""
Noisy scripted controllers that generate the prior and task datasets.

Controllers read the simulator state directly, emit a noiseless command, and the
rollout loop adds Gaussian noise to every action channel before stepping. Each
controller closes (or releases, or pulls) once its sampled distance threshold is
met, which is where most of the scripted failures come from.
"""

import logging
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np
from tqdm import tqdm

from .datasets import Dataset, DatasetMeta, EpisodeOrigin, GridDataset, GridTransition, Transition
from .envs import (
    DRAWER_CELL,
    HOVER_OFFSET,
    MAX_DISPLACEMENT,
    Blocker,
    DrawerGraspEnv,
    DrawerGridEnv,
    Environment,
    GridAction,
    GridObject,
    GridRules,
    GridState,
    InitialCondition,
    PlaceInBoxEnv,
    TabletopEnv,
    encode_grid_action,
    grid_start,
    grid_step,
    parse_condition,
)
from .errors import ConfigError, ContractError
from .utils import make_rng, spawn_seed

logger = logging.getLogger("cogstitch.scripted")

HOVER_TOLERANCE = 0.02
PICK_CLEARANCE = 0.15
CARRY_Z = 0.35
MIN_THRESHOLD = 0.005
DROP_X_RANGE = (0.05, 0.95)
GRID_SCRIPTS = ("grasp", "open", "close", "unblock")


@dataclass(frozen=True)
class ScriptedConfig:
    threshold_mean: float = 0.04
    threshold_std: float = 0.01
    action_noise_std: float = 0.2
    episode_len: int = 30
    tray_bias: float = 0.5
    grid_epsilon: float = 0.0

    def __post_init__(self) -> None:
        if self.threshold_std < 0 or self.action_noise_std < 0:
            raise ConfigError("scripted noise levels must be non-negative")
        if not 0.0 <= self.tray_bias <= 1.0:
            raise ConfigError(f"tray_bias must lie in [0, 1], got {self.tray_bias}")
        if not 0.0 <= self.grid_epsilon <= 1.0:
            raise ConfigError(f"grid_epsilon must lie in [0, 1], got {self.grid_epsilon}")
        if self.episode_len < 1:
            raise ConfigError(f"episode_len must be positive, got {self.episode_len}")

    @classmethod
    def noiseless(cls) -> "ScriptedConfig":
        return cls(threshold_std=0.0, action_noise_std=0.0)

    def sample_threshold(self, rng: np.random.Generator) -> float:
        return max(MIN_THRESHOLD, float(rng.normal(self.threshold_mean, self.threshold_std)))


def command(move: "Sequence[float] | np.ndarray" = (0.0, 0.0), gripper: float = 0.0, neutral: float = -1.0) -> np.ndarray:
    "Action8 vector: planar motion on the dx/dy channels, gripper and neutral triggers on the last two."
    return np.array([move[0], move[1], 0.0, 0.0, 0.0, 0.0, gripper, neutral])


def toward(position: np.ndarray, target: np.ndarray) -> np.ndarray:
    return np.clip((np.asarray(target) - position) / MAX_DISPLACEMENT, -1.0, 1.0)


def _dist(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.linalg.norm(np.asarray(a) - np.asarray(b)))


class Controller:
    name = ""
    index: int | None = None
    pad_to: int | None = None

    def __init__(self, env: Environment, cfg: ScriptedConfig, rng: np.random.Generator) -> None:
        self.env = env
        self.cfg = cfg
        self.threshold = cfg.sample_threshold(rng)
        self.finished = False

    def act(self) -> np.ndarray | None:
        raise NotImplementedError  # pragma: no cover


class GraspController(Controller):
    "Hover above the object, reach, close within threshold, lift above the env's lift height, return to neutral, idle."

    name = "grasp"

    def __init__(self, env: TabletopEnv, cfg: ScriptedConfig, rng: np.random.Generator, index: int = 0) -> None:
        super().__init__(env, cfg, rng)
        self.tabletop = env
        self.index = index
        self.phase = "approach"
        self.lift_height = env.lift_z
        self.pad_to = cfg.episode_len

    def _grasp_phases(self) -> np.ndarray | None:
        s = self.tabletop.state
        obj = s.objects[self.index]
        if self.phase == "approach":
            if s.held == self.index:
                self.phase = "lift"
            elif _dist(s.gripper, obj) < self.threshold:
                self.phase = "lift"
                return command(gripper=-1.0)
            else:
                hover = obj + np.array([0.0, HOVER_OFFSET])
                if _dist(s.gripper, hover) > HOVER_TOLERANCE:
                    return command(toward(s.gripper, hover), gripper=1.0)
                self.phase = "reach"
        if self.phase == "reach":
            if _dist(s.gripper, obj) < self.threshold:
                self.phase = "lift"
                return command(gripper=-1.0)
            return command(toward(s.gripper, obj), gripper=1.0)
        if self.phase == "lift" and s.gripper[1] <= self.lift_height:
            return command((0.0, 1.0), gripper=-1.0)
        return None

    def act(self) -> np.ndarray | None:
        if (a := self._grasp_phases()) is not None:
            return a
        if self.phase == "lift":
            self.phase = "idle"
            return command(gripper=-1.0, neutral=1.0)
        return command(gripper=-1.0)


class PickPlaceController(GraspController):
    "Grasp, carry to a drop point (over the box with probability tray_bias), release, return to neutral."

    name = "pick_place"

    def __init__(self, env: TabletopEnv, cfg: ScriptedConfig, rng: np.random.Generator, index: int = 0) -> None:
        super().__init__(env, cfg, rng, index)
        self.pad_to = None
        self.lift_height = float(env.state.objects[index][1]) + PICK_CLEARANCE
        low, high = env.drop_box_x if rng.random() < cfg.tray_bias else DROP_X_RANGE
        self.drop = np.array([rng.uniform(low, high), CARRY_Z])
        self.drop_threshold = cfg.sample_threshold(rng)
        if env.state.held == index:
            self.phase = "carry"

    def act(self) -> np.ndarray | None:
        if self.finished:
            return None
        if (a := self._grasp_phases()) is not None:
            return a
        s = self.tabletop.state
        if self.phase == "lift":
            self.phase = "carry"
        if self.phase == "carry":
            if _dist(s.gripper, self.drop) >= self.drop_threshold:
                return command(toward(s.gripper, self.drop), gripper=-1.0)
            self.phase = "released"
            return command(gripper=1.0)
        self.finished = True
        return command(gripper=1.0, neutral=1.0)


class DrawerController(Controller):
    "Move to a handle, pull toward +x (open) or push toward -x (close), lift off, return to neutral."

    def __init__(self, env: DrawerGraspEnv, cfg: ScriptedConfig, rng: np.random.Generator, opening: bool, top: bool = False) -> None:
        super().__init__(env, cfg, rng)
        self.drawers = env
        self.opening = opening
        self.top = top
        self.name = "open" if opening else "close"
        self.phase = "approach"

    def handle(self) -> np.ndarray:
        s = self.drawers.state
        return self.drawers.handle(s.drawer2 if self.top else s.drawer, top=self.top)

    def act(self) -> np.ndarray | None:
        if self.finished:
            return None
        g = self.drawers.state.gripper
        if self.phase == "approach":
            handle = self.handle()
            if _dist(g, handle) >= self.threshold:
                return command(toward(g, handle), gripper=1.0)
            self.phase = "drag"
        if self.phase == "drag":
            env = self.drawers
            if self.opening and g[0] < env.HANDLE_CLOSED_X + env.TRAVEL:
                return command((1.0, 0.0), gripper=1.0)
            if not self.opening and g[0] > env.HANDLE_CLOSED_X:
                return command((-1.0, 0.0), gripper=1.0)
            self.phase = "lift"
        if g[1] <= self.handle()[1] + HOVER_OFFSET:
            return command((0.0, 1.0), gripper=1.0)
        self.finished = True
        return command(gripper=1.0, neutral=1.0)


def plan_grid_action(gs: GridState, kind: str, rules: GridRules, attempted: bool = False) -> GridAction | None:
    """
    Next action of a deterministic grid script, or None once a prior script is back
    at the neutral cell. Prior scripts try their action once (`attempted`) and then
    head back whether or not it worked.
    """
    if kind == "grasp":
        if gs.obj is GridObject.OUT:
            return GridAction.NOOP
        if gs.obj is GridObject.HELD:
            return GridAction.RIGHT
        return GridAction.LEFT if gs.gripper != DRAWER_CELL else GridAction.GRASP
    goals = {
        "open": (gs.drawer_open, GridAction.TOGGLE_DRAWER),
        "close": (not gs.drawer_open, GridAction.TOGGLE_DRAWER),
        "unblock": (gs.blocker is not Blocker.PRESENT, GridAction.REMOVE_BLOCKER),
    }
    if kind not in goals:
        raise ConfigError(f"unknown grid script '{kind}'")
    reached, action = goals[kind]
    if not reached and not attempted:
        return GridAction.LEFT if gs.gripper != DRAWER_CELL else action
    if gs.gripper < rules.neutral_cell:
        return GridAction.RIGHT
    if gs.gripper > rules.neutral_cell:
        return GridAction.LEFT
    return None


def _is_attempt(gs: GridState, kind: str, action: GridAction) -> bool:
    return kind != "grasp" and gs.gripper == DRAWER_CELL and action in (GridAction.TOGGLE_DRAWER, GridAction.REMOVE_BLOCKER)


class GridController(Controller):
    def __init__(self, env: DrawerGridEnv, cfg: ScriptedConfig, rng: np.random.Generator, kind: str) -> None:
        super().__init__(env, cfg, rng)
        self.grid_env = env
        self.name = kind
        self.rng = rng
        if kind not in GRID_SCRIPTS:
            raise ConfigError(f"unknown grid script '{kind}'")
        self.pad_to = env.horizon if kind == "grasp" else None
        self.attempted = False

    def act(self) -> np.ndarray | None:
        gs = self.grid_env.state.grid
        action = plan_grid_action(gs, self.name, self.grid_env.rules, self.attempted)
        if action is None:
            return None
        self.attempted = self.attempted or _is_attempt(gs, self.name, action)
        if self.cfg.grid_epsilon > 0 and self.rng.random() < self.cfg.grid_epsilon:
            action = GridAction(int(self.rng.integers(len(GridAction))))
        return encode_grid_action(action)


@dataclass
class Rollout:
    policy: str
    condition: InitialCondition
    initial_state: object
    final_state: object
    transitions: list[Transition] = field(default_factory=list)
    grasped: bool = False

    @property
    def succeeded(self) -> bool:
        return any(t.reward > 0 for t in self.transitions)

    def __len__(self) -> int:
        return len(self.transitions)


def rollout(
    env: Environment,
    cond: "InitialCondition | str",
    make: Callable[[], Controller],
    cfg: ScriptedConfig,
    rng: np.random.Generator,
    reset_seed: int | None = None,
) -> Rollout:
    """
    Reset, then run a controller with noise on every channel until it stops or the horizon is reached.

    With `reset_seed` the reset draws from its own generator, so the start state
    can be rebuilt later from the condition and the seed alone.
    """
    cond = parse_condition(cond)
    obs = env.reset(cond, rng if reset_seed is None else make_rng(reset_seed))
    initial = env.get_state()
    controller = make()
    limit = min(env.horizon, controller.pad_to or env.horizon)
    transitions: list[Transition] = []
    grasped = False
    watch = controller.index if isinstance(env, TabletopEnv) else None
    while len(transitions) < limit:
        clean = controller.act()
        if clean is None:
            break
        noise = rng.normal(0.0, cfg.action_noise_std, size=clean.shape) if cfg.action_noise_std > 0 else 0.0
        action = np.clip(clean + noise, -1.0, 1.0)
        next_obs, reward = env.step(action)
        transitions.append(Transition(obs, action, reward, next_obs))
        obs = next_obs
        if watch is not None and isinstance(env, TabletopEnv):
            grasped = grasped or env.grasp_success(watch)
        if controller.finished:
            break
    return Rollout(controller.name, cond, initial, env.get_state(), transitions, grasped)


def replays_exactly(env: Environment, trajectory: Rollout) -> bool:
    "Step from the logged initial state with the logged actions and compare observations and rewards bit for bit."
    env.set_state(trajectory.initial_state)
    if trajectory.transitions and not np.array_equal(env.observe(), trajectory.transitions[0].obs):
        return False
    for t in trajectory.transitions:
        next_obs, reward = env.step(t.action)
        if reward != t.reward or not np.array_equal(next_obs, t.next_obs):
            return False
    return True


def replay_stored(env: Environment, ds: Dataset, index: int) -> bool:
    """
    Replay trajectory `index` of a stored dataset from a fresh reset rebuilt from its
    origin. Observations must match bit for bit; rewards are compared only when the
    dataset kept its labels.
    """
    origin = ds.origins[index]
    if origin is None:
        raise ContractError(f"trajectory {index} of {ds.meta.env} has no recorded origin to replay from")
    if ds.meta.env != env.env_id:
        raise ContractError(f"dataset was recorded on {ds.meta.env}, not {env.env_id}")
    obs = env.reset(origin.condition, make_rng(origin.reset_seed))
    for t in ds.trajectory(index):
        if not np.array_equal(obs, t.obs):
            return False
        obs, reward = env.step(t.action)
        if not np.array_equal(obs, t.next_obs) or (ds.meta.reward_labeled and reward != t.reward):
            return False
    return True


def _default_condition(env: Environment, policy: str) -> InitialCondition:
    if isinstance(env, PlaceInBoxEnv):
        return InitialCondition.OBJECT_IN_TRAY
    if isinstance(env, DrawerGraspEnv) and policy == "open":
        return InitialCondition.CLOSED_DRAWER
    return InitialCondition.OPEN_DRAWER


def _require_tabletop(env: Environment, policy: str) -> TabletopEnv:
    if not isinstance(env, TabletopEnv):
        raise ConfigError(f"scripted policy '{policy}' needs a tabletop env, got '{env.env_id}'")
    return env


def scripted_grasp(env: Environment, cfg: ScriptedConfig, rng: np.random.Generator, cond: "InitialCondition | str | None" = None) -> Rollout:
    tabletop = _require_tabletop(env, "grasp")
    return rollout(env, cond or _default_condition(env, "grasp"), lambda: GraspController(tabletop, cfg, rng), cfg, rng)


def scripted_pick_place(
    env: Environment, cfg: ScriptedConfig, rng: np.random.Generator, cond: "InitialCondition | str | None" = None, index: int = 0
) -> Rollout:
    tabletop = _require_tabletop(env, "pick_place")
    return rollout(env, cond or _default_condition(env, "pick_place"), lambda: PickPlaceController(tabletop, cfg, rng, index), cfg, rng)


def scripted_drawer(
    env: Environment, cfg: ScriptedConfig, mode: str, rng: np.random.Generator, cond: "InitialCondition | str | None" = None, top: bool = False
) -> Rollout:
    if not isinstance(env, DrawerGraspEnv):
        raise ConfigError(f"scripted drawer policies need the drawer scene, got '{env.env_id}'")
    if mode not in ("open", "close"):
        raise ConfigError(f"drawer mode must be 'open' or 'close', got '{mode}'")
    return rollout(env, cond or _default_condition(env, mode), lambda: DrawerController(env, cfg, rng, mode == "open", top), cfg, rng)


def make_controller(policy: str, env: Environment, cfg: ScriptedConfig, rng: np.random.Generator) -> Controller:
    "Sub-policy of a collection mix; drawer scripts pick a drawer, pick-place in the drawer scene never touches the target."
    if isinstance(env, DrawerGridEnv):
        return GridController(env, cfg, rng, policy)
    if isinstance(env, DrawerGraspEnv):
        if policy in ("open", "close"):
            return DrawerController(env, cfg, rng, policy == "open", top=bool(rng.random() < 0.5))
        if policy == "pick_place":
            index = DrawerGraspEnv.DISTRACTOR if rng.random() < 0.5 else DrawerGraspEnv.OBSTRUCTION
            return PickPlaceController(env, cfg, rng, index)
        if policy == "grasp":
            return GraspController(env, cfg, rng, DrawerGraspEnv.TARGET)
    elif isinstance(env, TabletopEnv):
        if policy == "grasp":
            return GraspController(env, cfg, rng)
        if policy == "pick_place":
            return PickPlaceController(env, cfg, rng)
    raise ConfigError(f"scripted policy '{policy}' is not available for env '{env.env_id}'")


def parse_mix(text: str) -> dict[str, float]:
    "Parse 'open=0.35,close=0.35,pick_place=0.3' into normalized weights."
    mix: dict[str, float] = {}
    for part in filter(None, (p.strip() for p in text.split(","))):
        name, sep, weight = part.partition("=")
        try:
            mix[name.strip()] = float(weight) if sep else 1.0
        except ValueError as ex:
            raise ConfigError(f"bad mix weight in '{part}'") from ex
    return normalize_mix(mix)


def normalize_mix(mix: Mapping[str, float]) -> dict[str, float]:
    total = sum(mix.values())
    if not mix or total <= 0 or any(w < 0 for w in mix.values()):
        raise ConfigError(f"policy mix needs non-negative weights with a positive sum, got {dict(mix)}")
    return {k: w / total for k, w in mix.items()}


def choose_policy(mix: Mapping[str, float], rng: np.random.Generator) -> str:
    names = list(mix)
    return names[int(rng.choice(len(names), p=np.array([mix[n] for n in names])))]


@dataclass(frozen=True)
class DataMix:
    policies: dict[str, float]
    conditions: tuple[InitialCondition, ...]
    reward_labels: bool


_IC = InitialCondition

DEFAULT_MIXES: dict[str, dict[str, DataMix]] = {
    "place_in_box": {
        "prior": DataMix({"grasp": 1.0}, (_IC.OBJECT_IN_TRAY,), False),
        "task": DataMix({"pick_place": 1.0}, (_IC.OBJECT_IN_GRIPPER,), True),
    },
    "drawer_grasp": {
        "prior": DataMix(
            {"open": 0.35, "close": 0.35, "pick_place": 0.3},
            (_IC.OPEN_DRAWER, _IC.CLOSED_DRAWER, _IC.BLOCKED_DRAWER_1, _IC.BLOCKED_DRAWER_2),
            False,
        ),
        "task": DataMix({"grasp": 1.0}, (_IC.OPEN_DRAWER,), True),
    },
    "drawer_grid": {
        "prior": DataMix({"open": 0.35, "close": 0.35, "unblock": 0.3}, (_IC.OPEN_DRAWER, _IC.CLOSED_DRAWER, _IC.BLOCKED_DRAWER_2), False),
        "task": DataMix({"grasp": 1.0}, (_IC.OPEN_DRAWER,), True),
    },
}


def default_mix(env_id: str, kind: str) -> DataMix:
    try:
        return DEFAULT_MIXES[env_id][kind]
    except KeyError as ex:
        raise ConfigError(f"no default '{kind}' data mix for env '{env_id}'") from ex


def collect(
    env: Environment,
    policy_mix: Mapping[str, float],
    episodes: int,
    reward_labels: bool,
    rng: np.random.Generator,
    conditions: Sequence["InitialCondition | str"] | None = None,
    cfg: ScriptedConfig | None = None,
    seed: int | None = None,
    progress: bool = False,
    rollouts: list[Rollout] | None = None,
) -> Dataset:
    """
    Run `episodes` scripted episodes and store them as one dataset.

    Episode i draws everything from its own generator seeded with base + i, so
    episodes can be reproduced individually. Each stored trajectory records its
    condition and reset seed for `replay_stored`. Without reward labels every
    stored reward is zero. Pass a list as `rollouts` to also receive the raw episodes.
    """
    if episodes < 1:
        raise ContractError(f"episodes must be at least 1, got {episodes}")
    cfg = cfg or ScriptedConfig()
    mix = normalize_mix(policy_mix)
    conds = [parse_condition(c) for c in (conditions or env.conditions)]
    base = spawn_seed(rng)
    ds = Dataset(DatasetMeta(env=env.env_id, obs_dim=env.obs_dim, act_dim=env.act_dim, reward_labeled=reward_labels, seed=seed))
    counts = dict.fromkeys(mix, 0)
    successes = 0
    for i in tqdm(range(episodes), desc=f"collect {env.env_id}", disable=not progress):
        ep_rng = make_rng(base + i)
        policy = choose_policy(mix, ep_rng)
        cond = conds[int(ep_rng.integers(len(conds)))]
        reset_seed = spawn_seed(ep_rng)
        episode = rollout(env, cond, lambda: make_controller(policy, env, cfg, ep_rng), cfg, ep_rng, reset_seed)
        counts[policy] += 1
        successes += episode.succeeded
        if rollouts is not None:
            rollouts.append(episode)
        if not episode.transitions:
            continue
        stored = episode.transitions if reward_labels else [Transition(t.obs, t.action, 0.0, t.next_obs) for t in episode.transitions]
        ds.append(stored, EpisodeOrigin(cond.value, reset_seed))
    logger.info("collected %d transitions from %d episodes on %s (mix %s, %d rewarded)", len(ds), episodes, env.env_id, counts, successes)
    return ds


def collect_grid(
    rules: GridRules,
    policy_mix: Mapping[str, float],
    episodes: int,
    reward_labels: bool,
    rng: np.random.Generator,
    conditions: Sequence["InitialCondition | str"],
    horizon: int = 20,
    epsilon: float = 0.0,
    with_blocker: bool = True,
) -> GridDataset:
    "Scripted episodes straight on the gridworld, for the tabular solver."
    mix = normalize_mix(policy_mix)
    conds = [parse_condition(c) for c in conditions]
    data = GridDataset(reward_labeled=reward_labels)
    for _ in range(episodes):
        kind = choose_policy(mix, rng)
        gs = grid_start(conds[int(rng.integers(len(conds)))], rules, with_blocker)
        episode: list[GridTransition] = []
        attempted = False
        for _ in range(horizon):
            action = plan_grid_action(gs, kind, rules, attempted)
            if action is None:
                break
            attempted = attempted or _is_attempt(gs, kind, action)
            if epsilon > 0 and rng.random() < epsilon:
                action = GridAction(int(rng.integers(len(GridAction))))
            nxt, reward = grid_step(gs, action, rules)
            episode.append(GridTransition(gs, action, reward, nxt))
            gs = nxt
        data.extend(episode)
    return data
