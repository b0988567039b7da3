# flake8: noqa
# type: ignore

from .__about__ import __version__
from .algorithms import (
    Agent,
    TrainConfig,
    TrainResult,
    bc_update,
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
from .datasets import Dataset, DatasetMeta, EpisodeOrigin, GridDataset, Transition, filter_successful, load, sample_batch, save
from .envs import DrawerGraspEnv, DrawerGridEnv, Environment, GridAction, GridRules, GridState, InitialCondition, PlaceInBoxEnv, grid_step, make_env
from .errors import (
    AlreadyRegistered,
    CheckpointError,
    CogError,
    ConfigError,
    ContractError,
    DatasetError,
    DimensionError,
    DivergenceError,
    NotRegistered,
    NumericalError,
    TrainingError,
)
from .harness import EvalConfig, ExperimentConfig, Method, ResultTable, evaluate, report, run
from .oracle import GridMdp, evaluate_policy_exact, reachability, value_iteration
from .registry import Registry, RegistryArgument, register_as, resolve
from .scripted import ScriptedConfig, collect, scripted_drawer, scripted_grasp, scripted_pick_place
