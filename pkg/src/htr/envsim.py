"""Task-parameterised goal-reaching environments.

Two environments share one task family: goals on the upper half of a circle
of radius ``goal_distance`` around the origin.  The goal is never part of the
observation, so the agent has to infer it from reward.

* ``point_robot``: state ``(x, y)``, action ``(dx, dy)``.
* ``wheeled``: a kinematic differential-drive robot, state ``(x, y, heading,
  speed)``, action ``(forward speed, turn rate)``.

In both cases the agent position is the first two state components, which is
what :func:`state_to_task` projects onto when building hindsight tasks.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterator, Literal, Optional, Sequence

import numpy as np

from htr.errors import IllegalStateError, InvalidArgumentError

DT = 0.1
DEFAULT_HORIZON = {"point_robot": 100, "wheeled": 200}

EnvKind = Literal["point_robot", "wheeled"]
RewardMode = Literal["sparse", "dense"]
RolloutMode = Literal["prior", "posterior"]


@dataclass(frozen=True)
class TaskDescriptor:
    goal: tuple[float, float]
    success_radius: float = 0.2
    task_id: int = 0

    def __post_init__(self):
        if not self.success_radius > 0:
            raise InvalidArgumentError(f"success_radius must be > 0, got {self.success_radius}")
        object.__setattr__(self, "goal", (float(self.goal[0]), float(self.goal[1])))

    @property
    def goal_array(self) -> np.ndarray:
        return np.array(self.goal, dtype=np.float64)


@dataclass(frozen=True)
class Transition:
    state: np.ndarray
    action: np.ndarray
    reward: float
    next_state: np.ndarray
    done: bool
    task_id: int
    step_index: int


@dataclass
class Trajectory:
    """One episode stored column-wise.

    ``sparse_rewards`` always holds the sparse reward of the source task (plus
    control penalty); for sparse-mode collection it equals ``rewards``.
    ``successes`` marks steps that ended inside the success radius, which is
    what "nonzero reward" means once a control penalty is present.
    """

    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    next_states: np.ndarray
    dones: np.ndarray
    task_id: int
    rollout_mode: RolloutMode = "prior"
    sparse_rewards: Optional[np.ndarray] = None
    successes: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.sparse_rewards is None:
            self.sparse_rewards = self.rewards
        if self.successes is None:
            # exact when there is no control penalty (point robot)
            self.successes = np.asarray(self.sparse_rewards) > 0

    def __len__(self) -> int:
        return len(self.rewards)

    def __getitem__(self, i: int) -> Transition:
        if i < 0:
            i += len(self)
        return Transition(
            state=self.states[i],
            action=self.actions[i],
            reward=float(self.rewards[i]),
            next_state=self.next_states[i],
            done=bool(self.dones[i]),
            task_id=self.task_id,
            step_index=i,
        )

    def __iter__(self) -> Iterator[Transition]:
        for i in range(len(self)):
            yield self[i]

    @classmethod
    def from_transitions(cls, transitions: Sequence[Transition], rollout_mode: RolloutMode = "prior") -> "Trajectory":
        if not transitions:
            raise InvalidArgumentError("a trajectory needs at least one transition")
        task_ids = {t.task_id for t in transitions}
        if len(task_ids) != 1:
            raise InvalidArgumentError(f"mixed task ids in trajectory: {sorted(task_ids)}")
        for i, t in enumerate(transitions):
            if t.step_index != i:
                raise InvalidArgumentError("step_index values must be consecutive from 0")
        return cls(
            states=np.array([t.state for t in transitions], dtype=np.float64),
            actions=np.array([t.action for t in transitions], dtype=np.float64),
            rewards=np.array([t.reward for t in transitions], dtype=np.float64),
            next_states=np.array([t.next_state for t in transitions], dtype=np.float64),
            dones=np.array([t.done for t in transitions], dtype=bool),
            task_id=transitions[0].task_id,
            rollout_mode=rollout_mode,
        )


@dataclass
class EnvSpec:
    kind: EnvKind = "point_robot"
    horizon: int = 100
    goal_distance: float = 2.0
    success_radius: float = 0.2
    reward_mode: RewardMode = "sparse"
    control_cost_weight: float = 0.01

    def validate(self) -> None:
        if self.kind not in ("point_robot", "wheeled"):
            raise InvalidArgumentError(f"env.kind: unknown environment {self.kind!r}")
        if self.reward_mode not in ("sparse", "dense"):
            raise InvalidArgumentError(f"env.reward_mode: unknown reward mode {self.reward_mode!r}")
        if self.horizon < 1:
            raise InvalidArgumentError("env.horizon must be >= 1")
        if not self.success_radius > 0:
            raise InvalidArgumentError("env.success_radius must be > 0")
        if not self.goal_distance > self.success_radius:
            raise InvalidArgumentError("env.goal_distance must exceed env.success_radius")
        if self.control_cost_weight < 0:
            raise InvalidArgumentError("env.control_cost_weight must be >= 0")

    @property
    def state_dim(self) -> int:
        return 2 if self.kind == "point_robot" else 4

    @property
    def action_dim(self) -> int:
        return 2

    @property
    def effective_control_cost(self) -> float:
        return self.control_cost_weight if self.kind == "wheeled" else 0.0


# ---------------------------------------------------------------------------
# task distribution and rewards


def task_from_angle(theta: float, goal_distance: float, success_radius: float = 0.2, task_id: int = 0) -> TaskDescriptor:
    return TaskDescriptor(
        goal=(goal_distance * math.cos(theta), goal_distance * math.sin(theta)),
        success_radius=success_radius,
        task_id=task_id,
    )


def sample_tasks(
    n: int,
    goal_distance: float,
    rng_seed: int,
    success_radius: float = 0.2,
    first_id: int = 0,
) -> list[TaskDescriptor]:
    """Draw ``n`` goals uniformly in angle on the upper semicircle."""
    if n < 1:
        raise InvalidArgumentError(f"n must be >= 1, got {n}")
    rng = np.random.default_rng(rng_seed)
    thetas = rng.uniform(0.0, math.pi, size=n)
    return [task_from_angle(float(th), goal_distance, success_radius, first_id + i) for i, th in enumerate(thetas)]


def _goal_distance(next_state: np.ndarray, goal: tuple[float, float]) -> np.ndarray:
    # explicit dx*dx + dy*dy keeps the result bitwise reproducible (no BLAS / FMA)
    next_state = np.asarray(next_state, dtype=np.float64)
    dx = next_state[..., 0] - goal[0]
    dy = next_state[..., 1] - goal[1]
    return np.sqrt(dx * dx + dy * dy)


def _as_scalar(x: np.ndarray):
    return float(x) if np.ndim(x) == 0 else x


def sparse_reward(next_state, task: TaskDescriptor):
    """``1 - d`` inside the success radius (strictly), else 0.

    Accepts one state or a stack of states along the leading axes.
    """
    d = _goal_distance(next_state, task.goal)
    return _as_scalar(np.where(d < task.success_radius, 1.0 - d, 0.0))


def dense_reward(next_state, task: TaskDescriptor):
    return _as_scalar(-_goal_distance(next_state, task.goal))


def control_penalty(action, weight: float):
    action = np.asarray(action, dtype=np.float64)
    return _as_scalar(weight * (action[..., 0] * action[..., 0] + action[..., 1] * action[..., 1]))


def state_to_task(state, success_radius: float, task_id: int = 0) -> TaskDescriptor:
    """Hindsight task whose goal is the agent position in ``state``."""
    state = np.asarray(state, dtype=np.float64)
    return TaskDescriptor(goal=(float(state[0]), float(state[1])), success_radius=success_radius, task_id=task_id)


# ---------------------------------------------------------------------------
# environments


class GoalEnv:
    """Base class; subclasses implement ``_initial_state`` and ``_dynamics``."""

    kind: EnvKind

    def __init__(self, spec: EnvSpec, task: Optional[TaskDescriptor] = None):
        spec.validate()
        self.spec = spec
        self.task = task
        self._state: Optional[np.ndarray] = None
        self._t = 0
        self._done = True

    def set_task(self, task: TaskDescriptor) -> None:
        self.task = task

    def reset(self) -> np.ndarray:
        self._state = self._initial_state()
        self._t = 0
        self._done = False
        return self._state.copy()

    def reward(self, action: np.ndarray, next_state: np.ndarray, mode: Optional[RewardMode] = None) -> float:
        if self.task is None:
            raise IllegalStateError("no task set")
        mode = mode or self.spec.reward_mode
        goal_term = sparse_reward(next_state, self.task) if mode == "sparse" else dense_reward(next_state, self.task)
        cw = self.spec.effective_control_cost
        if cw:
            goal_term = goal_term - control_penalty(action, cw)
        return goal_term

    def step(self, action) -> tuple[np.ndarray, float, bool]:
        if self._done or self._state is None:
            raise IllegalStateError("step called on a finished episode; call reset() first")
        action = np.asarray(action, dtype=np.float64)
        if action.shape != (self.spec.action_dim,):
            raise InvalidArgumentError(f"action must have shape ({self.spec.action_dim},), got {action.shape}")
        if not np.all(np.isfinite(action)):
            raise InvalidArgumentError("action contains non-finite values")
        action = np.clip(action, -1.0, 1.0)
        next_state = self._dynamics(self._state, action)
        r = self.reward(action, next_state)
        self._t += 1
        self._done = self._t >= self.spec.horizon
        self._state = next_state
        return next_state.copy(), r, self._done

    @property
    def elapsed(self) -> int:
        return self._t

    def _initial_state(self) -> np.ndarray:
        raise NotImplementedError

    def _dynamics(self, state: np.ndarray, action: np.ndarray) -> np.ndarray:
        raise NotImplementedError


class PointRobotEnv(GoalEnv):
    kind = "point_robot"

    def _initial_state(self):
        return np.zeros(2)

    def _dynamics(self, state, action):
        return state + action * DT


class WheeledEnv(GoalEnv):
    """Unicycle kinematics; the fourth state entry is the last commanded speed."""

    kind = "wheeled"

    def _initial_state(self):
        return np.zeros(4)

    def _dynamics(self, state, action):
        x, y, phi, _ = state
        v, omega = action
        return np.array([x + v * math.cos(phi) * DT, y + v * math.sin(phi) * DT, phi + omega * DT, v])


def make_env(spec: EnvSpec, task: Optional[TaskDescriptor] = None) -> GoalEnv:
    if spec.kind == "point_robot":
        return PointRobotEnv(spec, task)
    if spec.kind == "wheeled":
        return WheeledEnv(spec, task)
    raise InvalidArgumentError(f"unknown environment kind {spec.kind!r}")
