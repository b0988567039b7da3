"""
Planar kinematic simulators and the drawer gridworld.

The tabletop scenes live in the unit square (x to the right, z up). The gripper
moves at most 0.05 per axis per step, grasps the nearest graspable object inside
its grasp radius when it closes, and drops what it holds to the table when it opens. Dynamics
are deterministic; all randomness is in `reset`.

Observation layouts (every entry mapped from [0, 1] to [-1, 1], flags to -1/+1):

    place_in_box:  gripper x, z | aperture open | holding | object x, z
    drawer_grasp:  gripper x, z | aperture open | holding | target x, z |
                   distractor x, z | drawer extent | top drawer extent |
                   obstruction x, z
    drawer_grid:   gripper cell | drawer open | blocker one-hot (present,
                   removed, n/a) | object one-hot (in drawer, held, out)
"""

import itertools
import logging
from dataclasses import dataclass, replace
from enum import Enum, IntEnum
from typing import Iterable, Protocol, runtime_checkable

import numpy as np

from .errors import ConfigError, ContractError, DimensionError
from .registry import register_as, resolve_or_fail

logger = logging.getLogger("cogstitch.envs")

ACT_DIM = 8
MAX_DISPLACEMENT = 0.05
RESET_JITTER = 0.02
GRASP_RADIUS = 0.02
HOVER_OFFSET = 0.05
NEUTRAL_POSE = (0.5, 0.8)
REST_Z = 0.05

OBS_LAYOUT_VERSION = 1


class InitialCondition(str, Enum):
    OBJECT_IN_GRIPPER = "object_in_gripper"
    OBJECT_IN_TRAY = "object_in_tray"
    OPEN_DRAWER = "open_drawer"
    CLOSED_DRAWER = "closed_drawer"
    BLOCKED_DRAWER_1 = "blocked_drawer_1"
    BLOCKED_DRAWER_2 = "blocked_drawer_2"


def parse_condition(value: "str | InitialCondition") -> InitialCondition:
    try:
        return InitialCondition(value)
    except ValueError as ex:
        known = ", ".join(c.value for c in InitialCondition)
        raise ConfigError(f"unknown initial condition '{value}' (known: {known})") from ex


@dataclass(frozen=True)
class Action8:
    dx: float = 0.0
    dy: float = 0.0
    dz: float = 0.0
    dalpha: float = 0.0
    dbeta: float = 0.0
    dgamma: float = 0.0
    gripper_open: float = 0.0
    move_to_neutral: float = 0.0

    @classmethod
    def from_array(cls, values: "np.ndarray | Iterable[float]") -> "Action8":
        a = np.asarray(values, dtype=np.float64).reshape(-1)
        if a.shape != (ACT_DIM,):
            raise DimensionError(f"expected an {ACT_DIM}-dim action, got shape {a.shape}")
        return cls(*np.clip(a, -1.0, 1.0).tolist())

    def as_array(self) -> np.ndarray:
        return np.array([self.dx, self.dy, self.dz, self.dalpha, self.dbeta, self.dgamma, self.gripper_open, self.move_to_neutral])

    @property
    def closes(self) -> bool:
        return self.gripper_open < -0.5

    @property
    def opens(self) -> bool:
        return self.gripper_open > 0.5

    @property
    def neutral(self) -> bool:
        return self.move_to_neutral > 0.5


@dataclass
class TabletopState:
    gripper: np.ndarray
    gripper_closed: bool
    held: int | None
    objects: np.ndarray
    in_drawer: np.ndarray
    drawer: float = 0.0
    drawer2: float = 0.0
    t: int = 0

    def copy(self) -> "TabletopState":
        return replace(self, gripper=self.gripper.copy(), objects=self.objects.copy(), in_drawer=self.in_drawer.copy())


@runtime_checkable
class Environment(Protocol):
    env_id: str
    obs_dim: int
    act_dim: int
    horizon: int
    conditions: tuple[InitialCondition, ...]

    def reset(self, cond: "InitialCondition | str", rng: np.random.Generator) -> np.ndarray: ...

    def step(self, action: "np.ndarray | Action8") -> tuple[np.ndarray, float]: ...

    def observe(self) -> np.ndarray: ...

    def success(self) -> bool: ...

    def get_state(self) -> object: ...

    def set_state(self, state: object) -> None: ...


def _unit(v: float) -> float:
    return 2.0 * v - 1.0


def _flag(v: bool) -> float:
    return 1.0 if v else -1.0


class TabletopEnv:
    env_id = "tabletop"
    horizon = 40
    conditions: tuple[InitialCondition, ...] = ()
    object_names: tuple[str, ...] = ()
    lift_z = 0.6
    grasp_radius = GRASP_RADIUS
    drop_box_x = (0.0, 1.0)

    def __init__(self, jitter: float = RESET_JITTER, horizon: int | None = None) -> None:
        self.jitter = jitter
        if horizon is not None:
            self.horizon = horizon
        self.act_dim = ACT_DIM
        self._state: TabletopState | None = None
        self.obs_dim = len(self.observe_state(self._canonical_state()))

    # hooks

    def _canonical_state(self) -> TabletopState:
        n = len(self.object_names)
        return TabletopState(np.array(NEUTRAL_POSE), False, None, np.zeros((n, 2)), np.zeros(n, dtype=bool))

    def _reset_state(self, cond: InitialCondition, rng: np.random.Generator) -> TabletopState:
        raise NotImplementedError  # pragma: no cover

    def graspable(self, state: TabletopState, index: int) -> bool:
        return True

    def success_state(self, state: TabletopState) -> bool:
        raise NotImplementedError  # pragma: no cover

    def observe_state(self, state: TabletopState) -> np.ndarray:
        raise NotImplementedError  # pragma: no cover

    def _move(self, state: TabletopState, delta: np.ndarray) -> None:
        state.gripper = np.clip(state.gripper + delta, 0.0, 1.0)

    # public surface

    @property
    def state(self) -> TabletopState:
        if self._state is None:
            raise ContractError(f"{self.env_id}: reset() must be called before stepping")
        return self._state

    def get_state(self) -> TabletopState:
        return self.state.copy()

    def set_state(self, state: object) -> None:
        if not isinstance(state, TabletopState):
            raise ContractError(f"{self.env_id}: expected a TabletopState")
        self._state = state.copy()

    def reset(self, cond: "InitialCondition | str", rng: np.random.Generator) -> np.ndarray:
        cond = parse_condition(cond)
        if cond not in self.conditions:
            raise ConfigError(f"condition '{cond.value}' does not apply to env '{self.env_id}'")
        self._state = self._reset_state(cond, rng)
        return self.observe()

    def observe(self) -> np.ndarray:
        return self.observe_state(self.state)

    def success(self) -> bool:
        return self.success_state(self.state)

    def grasp_success(self, index: int = 0) -> bool:
        state = self.state
        return state.held == index and state.gripper[1] > self.lift_z

    def step(self, action: "np.ndarray | Action8") -> tuple[np.ndarray, float]:
        state = self.state
        if state.t >= self.horizon:
            raise ContractError(f"{self.env_id}: step after horizon {self.horizon}")
        a = action if isinstance(action, Action8) else Action8.from_array(action)
        if a.closes and not state.gripper_closed:
            state.gripper_closed = True
            state.held = self._nearest_graspable(state)
            if state.held is not None:
                state.in_drawer[state.held] = False
        elif a.opens and state.gripper_closed:
            state.gripper_closed = False
            if state.held is not None:
                state.objects[state.held] = (state.objects[state.held][0], REST_Z)
                state.held = None
        if a.neutral:
            state.gripper = np.array(NEUTRAL_POSE)
        else:
            self._move(state, MAX_DISPLACEMENT * np.array([a.dx, a.dy]))
        if state.held is not None:
            state.objects[state.held] = state.gripper
        state.t += 1
        return self.observe(), float(self.success_state(state))

    def _nearest_graspable(self, state: TabletopState) -> int | None:
        best, best_dist = None, self.grasp_radius
        for i in range(len(self.object_names)):
            dist = float(np.linalg.norm(state.objects[i] - state.gripper))
            if dist <= best_dist and self.graspable(state, i):
                best, best_dist = i, dist
        return best

    def _jitter(self, rng: np.random.Generator, size: int | tuple[int, ...] = ()) -> np.ndarray:
        return rng.normal(0.0, self.jitter, size) if self.jitter > 0 else np.zeros(size)


@register_as(Environment, namespace="place_in_box")
class PlaceInBoxEnv(TabletopEnv):
    """Put the object into the box on the right; the harder start has it resting in the tray on the left."""

    env_id = "place_in_box"
    horizon = 40
    conditions = (InitialCondition.OBJECT_IN_GRIPPER, InitialCondition.OBJECT_IN_TRAY)
    object_names = ("object",)
    lift_z = 0.45
    grasp_radius = 0.014

    TRAY_SPOT = (0.25, REST_Z)
    BOX_X = (0.65, 0.90)
    BOX_TOP = 0.20
    drop_box_x = BOX_X

    def _reset_state(self, cond: InitialCondition, rng: np.random.Generator) -> TabletopState:
        state = self._canonical_state()
        if cond is InitialCondition.OBJECT_IN_GRIPPER:
            state.gripper_closed = True
            state.held = 0
            state.objects[0] = state.gripper
        else:
            state.objects[0] = (np.clip(self.TRAY_SPOT[0] + self._jitter(rng), 0.0, 1.0), REST_Z)
        return state

    def in_box(self, point: np.ndarray) -> bool:
        return self.BOX_X[0] <= point[0] <= self.BOX_X[1] and point[1] <= self.BOX_TOP

    def success_state(self, state: TabletopState) -> bool:
        return state.held is None and self.in_box(state.objects[0])

    def observe_state(self, state: TabletopState) -> np.ndarray:
        gx, gz = state.gripper
        ox, oz = state.objects[0]
        return np.array([_unit(gx), _unit(gz), _flag(not state.gripper_closed), _flag(state.held is not None), _unit(ox), _unit(oz)])


@register_as(Environment, namespace="drawer_grasp")
class DrawerGraspEnv(TabletopEnv):
    """
    Take the target out of the bottom drawer. The drawer opens when an empty
    gripper in the handle zone moves toward +x; it refuses to open while the top
    drawer is more than half open or while the obstruction sits in its sweep region.
    The target rides with the drawer and is only reachable when the drawer is
    more than 0.7 open.
    """

    env_id = "drawer_grasp"
    horizon = 80
    conditions = (
        InitialCondition.OPEN_DRAWER,
        InitialCondition.CLOSED_DRAWER,
        InitialCondition.BLOCKED_DRAWER_1,
        InitialCondition.BLOCKED_DRAWER_2,
    )
    object_names = ("target", "distractor", "obstruction")
    lift_z = 0.6
    grasp_radius = 0.023

    TARGET, DISTRACTOR, OBSTRUCTION = 0, 1, 2
    HANDLE_CLOSED_X = 0.30
    TRAVEL = 0.30
    HANDLE_Z = 0.15
    TOP_HANDLE_Z = 0.40
    HANDLE_HALF_WIDTH = 0.05
    HANDLE_HALF_HEIGHT = 0.025
    TARGET_OFFSET = (-0.10, 0.10)
    REACHABLE_EXTENT = 0.7
    TOP_BLOCKS_ABOVE = 0.5
    CABINET = (0.65, 0.30)
    BIN_X = (0.75, 0.95)
    drop_box_x = BIN_X
    DISTRACTOR_SPOT = 0.72
    OBSTRUCTION_PARKED = 0.85
    OBSTRUCTION_BLOCKING = 0.45

    def handle(self, extent: float, top: bool = False) -> np.ndarray:
        return np.array([self.HANDLE_CLOSED_X + self.TRAVEL * extent, self.TOP_HANDLE_Z if top else self.HANDLE_Z])

    def target_rest(self, extent: float) -> np.ndarray:
        return np.array([self.handle(extent)[0] + self.TARGET_OFFSET[0], self.TARGET_OFFSET[1]])

    def _reset_state(self, cond: InitialCondition, rng: np.random.Generator) -> TabletopState:
        state = self._canonical_state()
        closed = float(np.clip(abs(self._jitter(rng)), 0.0, 0.1))
        opened = float(np.clip(1.0 - abs(self._jitter(rng)), 0.9, 1.0))
        state.drawer = opened if cond is InitialCondition.OPEN_DRAWER else closed
        state.drawer2 = opened if cond is InitialCondition.BLOCKED_DRAWER_1 else float(np.clip(abs(self._jitter(rng)), 0.0, 0.1))
        obstruction_x = self.OBSTRUCTION_BLOCKING if cond is InitialCondition.BLOCKED_DRAWER_2 else self.OBSTRUCTION_PARKED
        state.objects[self.TARGET] = self.target_rest(state.drawer)
        state.in_drawer[self.TARGET] = True
        state.objects[self.DISTRACTOR] = (self.DISTRACTOR_SPOT + self._jitter(rng), REST_Z)
        state.objects[self.OBSTRUCTION] = (obstruction_x + self._jitter(rng), REST_Z)
        return state

    def graspable(self, state: TabletopState, index: int) -> bool:
        return not state.in_drawer[index] or state.drawer > self.REACHABLE_EXTENT

    def in_cabinet(self, point: np.ndarray) -> bool:
        return point[0] <= self.CABINET[0] and point[1] <= self.CABINET[1]

    def sweep_blocked(self, state: TabletopState) -> bool:
        if state.held == self.OBSTRUCTION:
            return False
        ox, oz = state.objects[self.OBSTRUCTION]
        front = self.handle(state.drawer)[0] - 0.02
        return front <= ox <= self.HANDLE_CLOSED_X + self.TRAVEL + 0.05 and oz <= self.CABINET[1]

    def can_open(self, state: TabletopState) -> bool:
        return state.drawer2 <= self.TOP_BLOCKS_ABOVE and not self.sweep_blocked(state)

    def _in_handle_zone(self, gripper: np.ndarray, handle: np.ndarray) -> bool:
        return abs(gripper[0] - handle[0]) <= self.HANDLE_HALF_WIDTH and abs(gripper[1] - handle[1]) <= self.HANDLE_HALF_HEIGHT

    def _move(self, state: TabletopState, delta: np.ndarray) -> None:
        before = state.gripper.copy()
        super()._move(state, delta)
        if state.held is not None:
            return
        dx = state.gripper[0] - before[0]
        if self._in_handle_zone(before, self.handle(state.drawer)):
            extent = float(np.clip(state.drawer + dx / self.TRAVEL, 0.0, 1.0))
            if extent > state.drawer and not self.can_open(state):
                extent = state.drawer
            shift = (extent - state.drawer) * self.TRAVEL
            state.drawer = extent
            state.objects[state.in_drawer, 0] += shift
        elif self._in_handle_zone(before, self.handle(state.drawer2, top=True)):
            state.drawer2 = float(np.clip(state.drawer2 + dx / self.TRAVEL, 0.0, 1.0))

    def success_state(self, state: TabletopState) -> bool:
        return state.held == self.TARGET and state.gripper[1] > self.lift_z and not self.in_cabinet(state.gripper)

    def observe_state(self, state: TabletopState) -> np.ndarray:
        gx, gz = state.gripper
        values = [_unit(gx), _unit(gz), _flag(not state.gripper_closed), _flag(state.held is not None)]
        for i in (self.TARGET, self.DISTRACTOR):
            values.extend(_unit(v) for v in state.objects[i])
        values.extend([_unit(state.drawer), _unit(state.drawer2)])
        values.extend(_unit(v) for v in state.objects[self.OBSTRUCTION])
        return np.array(values)


# gridworld


class GridAction(IntEnum):
    LEFT = 0
    RIGHT = 1
    TOGGLE_DRAWER = 2
    GRASP = 3
    REMOVE_BLOCKER = 4
    NOOP = 5


class Blocker(str, Enum):
    PRESENT = "present"
    REMOVED = "removed"
    NA = "n/a"


class GridObject(str, Enum):
    IN_DRAWER = "in_drawer"
    HELD = "held"
    OUT = "out"


DRAWER_CELL = 0
DEFAULT_GRID_SIZE = 6


@dataclass(frozen=True)
class GridState:
    gripper: int
    drawer_open: bool
    blocker: Blocker
    obj: GridObject


@dataclass(frozen=True)
class GridRules:
    size: int = DEFAULT_GRID_SIZE
    blocker_removable: bool = True

    def __post_init__(self) -> None:
        if self.size < 2:
            raise ConfigError(f"grid needs at least 2 cells, got {self.size}")

    @property
    def neutral_cell(self) -> int:
        return self.size // 2


def grid_step(gs: GridState, action: "GridAction | int", rules: GridRules = GridRules()) -> tuple[GridState, float]:
    "Deterministic gridworld transition; anything that does not apply is a no-op."
    try:
        action = GridAction(int(action))
    except ValueError:
        action = GridAction.NOOP
    at_drawer = gs.gripper == DRAWER_CELL
    nxt = gs
    if action is GridAction.LEFT:
        nxt = replace(gs, gripper=max(0, gs.gripper - 1))
    elif action is GridAction.RIGHT:
        nxt = replace(gs, gripper=min(rules.size - 1, gs.gripper + 1))
    elif action is GridAction.TOGGLE_DRAWER and at_drawer:
        if gs.drawer_open:
            nxt = replace(gs, drawer_open=False)
        elif gs.blocker is not Blocker.PRESENT:
            nxt = replace(gs, drawer_open=True)
    elif action is GridAction.GRASP and at_drawer and gs.drawer_open and gs.obj is GridObject.IN_DRAWER:
        nxt = replace(gs, obj=GridObject.HELD)
    elif action is GridAction.REMOVE_BLOCKER and at_drawer and gs.blocker is Blocker.PRESENT and rules.blocker_removable:
        nxt = replace(gs, blocker=Blocker.REMOVED)
    if nxt.obj is GridObject.HELD and nxt.gripper != DRAWER_CELL:
        nxt = replace(nxt, obj=GridObject.OUT)
    return nxt, float(nxt.obj is GridObject.OUT)


def all_grid_states(size: int = DEFAULT_GRID_SIZE) -> list[GridState]:
    return [GridState(g, d, b, o) for g, d, b, o in itertools.product(range(size), (False, True), Blocker, GridObject)]


def grid_start(cond: "InitialCondition | str", rules: GridRules = GridRules(), with_blocker: bool = True) -> GridState:
    cond = parse_condition(cond)
    cleared = Blocker.REMOVED if with_blocker else Blocker.NA
    if cond is InitialCondition.OPEN_DRAWER:
        return GridState(rules.neutral_cell, True, cleared, GridObject.IN_DRAWER)
    if cond is InitialCondition.CLOSED_DRAWER:
        return GridState(rules.neutral_cell, False, cleared, GridObject.IN_DRAWER)
    if cond in (InitialCondition.BLOCKED_DRAWER_1, InitialCondition.BLOCKED_DRAWER_2) and with_blocker:
        return GridState(rules.neutral_cell, False, Blocker.PRESENT, GridObject.IN_DRAWER)
    raise ConfigError(f"condition '{cond.value}' does not apply to the drawer gridworld")


def encode_grid_action(action: "GridAction | int") -> np.ndarray:
    "Discrete action as an Action8 vector: +1 on its own channel, -1 elsewhere."
    vec = -np.ones(ACT_DIM)
    vec[int(action)] = 1.0
    return vec


def decode_grid_action(action: np.ndarray) -> GridAction:
    a = np.asarray(action, dtype=np.float64).reshape(-1)
    if a.shape != (ACT_DIM,):
        raise DimensionError(f"expected an {ACT_DIM}-dim action, got shape {a.shape}")
    return GridAction(int(np.argmax(a[: len(GridAction)])))


def observe_grid(gs: GridState, rules: GridRules = GridRules()) -> np.ndarray:
    values = [_unit(gs.gripper / (rules.size - 1)), _flag(gs.drawer_open)]
    values.extend(_flag(gs.blocker is b) for b in Blocker)
    values.extend(_flag(gs.obj is o) for o in GridObject)
    return np.array(values)


@dataclass
class GridEnvState:
    grid: GridState
    t: int = 0


@register_as(Environment, namespace="drawer_grid")
class DrawerGridEnv:
    "The gridworld behind the Action8 / feature-vector interface of the tabletop scenes."

    env_id = "drawer_grid"
    horizon = 20
    conditions = (
        InitialCondition.OPEN_DRAWER,
        InitialCondition.CLOSED_DRAWER,
        InitialCondition.BLOCKED_DRAWER_1,
        InitialCondition.BLOCKED_DRAWER_2,
    )

    def __init__(self, size: int = DEFAULT_GRID_SIZE, horizon: int | None = None, **_: object) -> None:
        self.rules = GridRules(size=size)
        if horizon is not None:
            self.horizon = horizon
        self.act_dim = ACT_DIM
        self.obs_dim = len(observe_grid(grid_start(InitialCondition.OPEN_DRAWER, self.rules), self.rules))
        self._state: GridEnvState | None = None

    @property
    def state(self) -> GridEnvState:
        if self._state is None:
            raise ContractError("drawer_grid: reset() must be called before stepping")
        return self._state

    def get_state(self) -> GridEnvState:
        return replace(self.state)

    def set_state(self, state: object) -> None:
        if not isinstance(state, GridEnvState):
            raise ContractError("drawer_grid: expected a GridEnvState")
        self._state = replace(state)

    def reset(self, cond: "InitialCondition | str", rng: np.random.Generator) -> np.ndarray:
        self._state = GridEnvState(grid_start(cond, self.rules))
        return self.observe()

    def observe(self) -> np.ndarray:
        return observe_grid(self.state.grid, self.rules)

    def success(self) -> bool:
        return self.state.grid.obj is GridObject.OUT

    def step(self, action: "np.ndarray | Action8") -> tuple[np.ndarray, float]:
        state = self.state
        if state.t >= self.horizon:
            raise ContractError(f"drawer_grid: step after horizon {self.horizon}")
        vec = action.as_array() if isinstance(action, Action8) else np.clip(np.asarray(action, dtype=np.float64), -1.0, 1.0)
        state.grid, reward = grid_step(state.grid, decode_grid_action(vec), self.rules)
        state.t += 1
        return self.observe(), reward


def make_env(env_id: str, **kwargs: object) -> Environment:
    env: Environment = resolve_or_fail(Environment, env_id, **kwargs)
    return env
