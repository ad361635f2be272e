"""Hindsight task relabeling for context-based meta-RL.

A trajectory collected under an unknown task is rewritten as experience for a
task it actually achieved: the goal is moved to one of its visited positions
and the sparse reward recomputed.  Unlike goal relabeling for goal-conditioned
agents, one hindsight task is applied to a whole training batch (context and
RL batch alike), because the encoder must infer a single task from it.

Two strategies:

* SER (single episode relabeling) relabels lazily at sample time.  One episode
  is drawn from a task buffer, a hindsight goal is chosen from its visited
  states and both the context and the RL batch are drawn from that episode.
* EC (episode clustering) relabels eagerly at collection time.  Each new
  trajectory is relabelled to the centre of a polar grid cell containing its
  hindsight goal and stored in that cell's buffer; cells are then sampled
  like ordinary task buffers.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Literal, Optional, Sequence

import numpy as np

from htr.context import TaskBuffer, TransitionBatch, sample_context, sample_rl_batch
from htr.envsim import TaskDescriptor, Trajectory, Transition, control_penalty, sparse_reward, state_to_task
from htr.errors import IllegalStateError, InvalidArgumentError

Strategy = Literal["SER", "EC"]

SER_ID_BASE = 1 << 40
EC_ID_BASE = 1 << 32


@dataclass
class RelabelConfig:
    """``enabled = false`` gives plain PEARL; otherwise ``K`` is the per-task relabel probability."""

    enabled: bool = True
    K: float = 0.1
    strategy: Strategy = "SER"
    anneal_steps: int = 0
    only_unsolved: bool = False
    grid_angle_bins: int = 12
    grid_radius_bins: int = 8
    ec_explore_fraction: float = 0.5

    def validate(self) -> None:
        if not 0.0 <= self.K <= 1.0:
            raise InvalidArgumentError(f"relabel.K must lie in [0, 1], got {self.K}")
        if self.strategy not in ("SER", "EC"):
            raise InvalidArgumentError(f"relabel.strategy: unknown strategy {self.strategy!r}")
        if self.anneal_steps < 0:
            raise InvalidArgumentError("relabel.anneal_steps must be >= 0")
        if self.grid_angle_bins < 1 or self.grid_radius_bins < 1:
            raise InvalidArgumentError("relabel grid bins must be >= 1")
        if not 0.0 <= self.ec_explore_fraction <= 1.0:
            raise InvalidArgumentError("relabel.ec_explore_fraction must lie in [0, 1]")

    def effective_k(self, step: int) -> float:
        """``K`` after linear annealing to zero over ``anneal_steps`` gradient steps."""
        if not self.anneal_steps:
            return self.K
        return self.K * max(0.0, 1.0 - step / self.anneal_steps)


# ---------------------------------------------------------------------------
# relabel function


def relabel_rewards(next_states: np.ndarray, actions: np.ndarray, task: TaskDescriptor, control_cost_weight: float = 0.0):
    """Sparse rewards (minus the unchanged control penalty) and success flags under ``task``."""
    r = np.asarray(sparse_reward(next_states, task), dtype=np.float64)
    hits = r > 0
    if control_cost_weight:
        r = r - control_penalty(actions, control_cost_weight)
    return r, hits


def relabel_transition(t: Transition, task: TaskDescriptor, control_cost_weight: float = 0.0) -> Transition:
    r = sparse_reward(t.next_state, task)
    if control_cost_weight:
        r = r - control_penalty(t.action, control_cost_weight)
    return replace(t, reward=float(r), task_id=task.task_id)


def relabel_trajectory(traj: Trajectory, task: TaskDescriptor, control_cost_weight: float = 0.0) -> Trajectory:
    r, hits = relabel_rewards(traj.next_states, traj.actions, task, control_cost_weight)
    return Trajectory(
        states=traj.states,
        actions=traj.actions,
        rewards=r,
        next_states=traj.next_states,
        dones=traj.dones,
        task_id=task.task_id,
        rollout_mode=traj.rollout_mode,
        sparse_rewards=r,
        successes=hits,
    )


def select_hindsight_index(traj: Trajectory, rng: np.random.Generator) -> int:
    if len(traj) == 0:
        raise InvalidArgumentError("cannot pick a hindsight task from an empty trajectory")
    return int(rng.integers(len(traj)))


def select_hindsight_task(traj: Trajectory, rng: np.random.Generator, success_radius: float = 0.2, task_id: int = SER_ID_BASE) -> TaskDescriptor:
    """Goal at the position of a uniformly chosen visited ``next_state``."""
    i = select_hindsight_index(traj, rng)
    return state_to_task(traj.next_states[i], success_radius, task_id)


def _episode_batch(traj: Trajectory, idx: np.ndarray, task: TaskDescriptor, control_cost_weight: float) -> TransitionBatch:
    r, hits = relabel_rewards(traj.next_states[idx], traj.actions[idx], task, control_cost_weight)
    return TransitionBatch(
        states=traj.states[idx],
        actions=traj.actions[idx],
        rewards=r,
        next_states=traj.next_states[idx],
        dones=traj.dones[idx],
        task_ids=np.full(len(idx), task.task_id, dtype=np.int64),
        successes=hits,
        step_indices=idx.astype(np.int64),
        source="hindsight",
    )


def _draw(n_avail: int, k: int, rng: np.random.Generator) -> np.ndarray:
    if n_avail >= k:
        return rng.choice(n_avail, size=k, replace=False)
    return rng.integers(0, n_avail, size=k)


def ser_sample(
    buffer: TaskBuffer,
    M: int,
    N: int,
    rng: np.random.Generator,
    control_cost_weight: float = 0.0,
    task_id: int = SER_ID_BASE,
) -> tuple[TransitionBatch, TransitionBatch, TaskDescriptor]:
    """Context and RL batch from one episode, both relabelled under one hindsight task."""
    if buffer.n_episodes == 0:
        raise IllegalStateError("SER needs at least one stored episode")
    traj = buffer.episodes[int(rng.integers(buffer.n_episodes))]
    task = select_hindsight_task(traj, rng, buffer.task.success_radius, task_id)
    ctx = _episode_batch(traj, _draw(len(traj), M, rng), task, control_cost_weight)
    rl = _episode_batch(traj, _draw(len(traj), N, rng), task, control_cost_weight)
    return ctx, rl, task


# ---------------------------------------------------------------------------
# episode clustering


@dataclass
class HindsightBuffer:
    cluster_id: tuple[int, int]
    representative_task: TaskDescriptor
    explore: TaskBuffer
    exploit: TaskBuffer

    @property
    def n_explore_episodes(self) -> int:
        return self.explore.n_episodes

    @property
    def n_exploit_episodes(self) -> int:
        return self.exploit.n_episodes

    def __len__(self) -> int:
        return len(self.explore) + len(self.exploit)


class EpisodeClusters:
    """Polar grid of hindsight buffers over the disc of radius ``goal_distance``.

    Angles cover the task semicircle ``[0, π]``; goals below the x axis are
    clamped to the nearer boundary wedge and goals beyond ``goal_distance``
    to the outer ring.
    """

    def __init__(
        self,
        goal_distance: float,
        success_radius: float = 0.2,
        angle_bins: int = 12,
        radius_bins: int = 8,
        explore_fraction: float = 0.5,
        capacity: int = 100_000,
        control_cost_weight: float = 0.0,
    ):
        self.goal_distance = goal_distance
        self.success_radius = success_radius
        self.angle_bins = angle_bins
        self.radius_bins = radius_bins
        self.explore_fraction = explore_fraction
        self.capacity = capacity
        self.control_cost_weight = control_cost_weight
        self.buffers: dict[tuple[int, int], HindsightBuffer] = {}
        self.clamped = 0

    def bin_of(self, goal: Sequence[float]) -> tuple[tuple[int, int], bool]:
        x, y = float(goal[0]), float(goal[1])
        r = math.sqrt(x * x + y * y)
        theta = math.atan2(y, x)
        clamped = False
        if theta < 0.0:
            theta = 0.0 if theta > -math.pi / 2 else math.pi
            clamped = True
        a = int(theta / (math.pi / self.angle_bins))
        if a >= self.angle_bins:
            a = self.angle_bins - 1
        rb = int(r / (self.goal_distance / self.radius_bins))
        if rb >= self.radius_bins:
            clamped = clamped or r > self.goal_distance
            rb = self.radius_bins - 1
        return (a, rb), clamped

    def center_task(self, cell: tuple[int, int]) -> TaskDescriptor:
        a, rb = cell
        theta = (a + 0.5) * math.pi / self.angle_bins
        r = (rb + 0.5) * self.goal_distance / self.radius_bins
        return TaskDescriptor(
            goal=(r * math.cos(theta), r * math.sin(theta)),
            success_radius=self.success_radius,
            task_id=EC_ID_BASE + a * self.radius_bins + rb,
        )

    def buffer_for(self, cell: tuple[int, int]) -> HindsightBuffer:
        hb = self.buffers.get(cell)
        if hb is None:
            task = self.center_task(cell)
            hb = HindsightBuffer(cell, task, TaskBuffer(task, self.capacity), TaskBuffer(task, self.capacity))
            self.buffers[cell] = hb
        return hb

    def nonempty(self) -> list[HindsightBuffer]:
        return [hb for _, hb in sorted(self.buffers.items()) if len(hb) > 0]


def ec_ingest(traj: Trajectory, clusters: EpisodeClusters, rng: np.random.Generator) -> tuple[TaskDescriptor, HindsightBuffer]:
    """Relabel ``traj`` to the centre of its hindsight goal's cell and store it there.

    Returns the exact hindsight task (a visited position) and the cell buffer.
    """
    hindsight = select_hindsight_task(traj, rng, clusters.success_radius)
    cell, clamped = clusters.bin_of(hindsight.goal)
    clusters.clamped += clamped
    hb = clusters.buffer_for(cell)
    relabelled = relabel_trajectory(traj, hb.representative_task, clusters.control_cost_weight)
    (hb.explore if traj.rollout_mode == "prior" else hb.exploit).add_trajectory(relabelled)
    return hindsight, hb


def _split(n: int, fraction: float, have_explore: bool, have_exploit: bool) -> tuple[int, int]:
    if have_explore and have_exploit:
        k = int(round(n * fraction))
        return k, n - k
    return (n, 0) if have_explore else (0, n)


def ec_sample(
    clusters: EpisodeClusters,
    M: int,
    N: int,
    rng: np.random.Generator,
    recency_window: Optional[int] = None,
) -> tuple[TransitionBatch, TransitionBatch, TaskDescriptor]:
    """Recent-context and uniform RL batch from one uniformly chosen nonempty cell.

    Both batches mix exploration (prior-rollout) and exploitation episodes in
    the configured proportion whenever the cell holds both kinds.
    """
    cells = clusters.nonempty()
    if not cells:
        raise IllegalStateError("no hindsight buffer holds any data yet")
    hb = cells[int(rng.integers(len(cells)))]
    have_e, have_x = len(hb.explore) > 0, len(hb.exploit) > 0
    f = clusters.explore_fraction

    parts_ctx, parts_rl = [], []
    m_e, m_x = _split(M, f, have_e, have_x)
    n_e, n_x = _split(N, f, have_e, have_x)
    for buf, m, n in ((hb.explore, m_e, n_e), (hb.exploit, m_x, n_x)):
        if m:
            parts_ctx.append(sample_context(buf, m, rng, recency_window))
        if n:
            parts_rl.append(sample_rl_batch(buf, n, rng))
    ctx = TransitionBatch.concatenate(parts_ctx)
    rl = TransitionBatch.concatenate(parts_rl)
    ctx.source = rl.source = "hindsight"
    return ctx, rl, hb.representative_task


# ---------------------------------------------------------------------------
# per-task batch source decision


@dataclass
class SampledBatches:
    context: TransitionBatch
    rl: TransitionBatch
    source: Literal["real", "hindsight"]
    task: TaskDescriptor


class RelabelMetrics:
    """Running means over a logging window."""

    def __init__(self):
        self.reset()

    def reset(self) -> None:
        self._distances: list[float] = []
        self._hindsight_hits = 0
        self._hindsight_n = 0
        self._real_hits = 0
        self._real_n = 0

    def record(self, batches: SampledBatches) -> None:
        hits = int(np.count_nonzero(batches.rl.successes))
        if batches.source == "hindsight":
            gx, gy = batches.task.goal
            self._distances.append(math.sqrt(gx * gx + gy * gy))
            self._hindsight_hits += hits
            self._hindsight_n += len(batches.rl)
        else:
            self._real_hits += hits
            self._real_n += len(batches.rl)

    def summary(self) -> dict[str, Optional[float]]:
        """Window means; a metric with no contributing batches is ``None``."""
        return {
            "mean_hindsight_task_distance": float(np.mean(self._distances)) if self._distances else None,
            "hindsight_nonzero_reward_fraction": self._hindsight_hits / self._hindsight_n if self._hindsight_n else None,
            "real_nonzero_reward_fraction": self._real_hits / self._real_n if self._real_n else None,
        }


def relabel_metrics(metrics: RelabelMetrics) -> dict[str, Optional[float]]:
    return metrics.summary()


class Relabeler:
    """Decides per task whether the training batch is real or hindsight.

    All relabeling randomness comes from ``rng``, a stream separate from the
    one used for real-batch sampling, so ``K = 0`` leaves the rest of training
    bit-identical to running without a relabeler.
    """

    def __init__(
        self,
        config: RelabelConfig,
        rng: np.random.Generator,
        clusters: Optional[EpisodeClusters] = None,
        control_cost_weight: float = 0.0,
    ):
        config.validate()
        if config.strategy == "EC" and clusters is None:
            raise InvalidArgumentError("EC relabeling needs an EpisodeClusters instance")
        self.config = config
        self.rng = rng
        self.clusters = clusters
        self.control_cost_weight = control_cost_weight
        self._next_id = SER_ID_BASE

    def ingest(self, traj: Trajectory) -> None:
        if self.config.strategy == "EC":
            ec_ingest(traj, self.clusters, self.rng)

    def wants_hindsight(self, buffer: TaskBuffer, step: int) -> bool:
        p_h = self.rng.random()
        if self.config.only_unsolved and buffer.ever_succeeded:
            return False
        if self.config.strategy == "EC" and not self.clusters.nonempty():
            return False
        return p_h < self.config.effective_k(step)

    def hindsight_batches(self, buffer: TaskBuffer, M: int, N: int, recency_window: Optional[int] = None) -> SampledBatches:
        if self.config.strategy == "SER":
            ctx, rl, task = ser_sample(buffer, M, N, self.rng, self.control_cost_weight, self._next_id)
            self._next_id += 1
        else:
            ctx, rl, task = ec_sample(self.clusters, M, N, self.rng, recency_window)
        return SampledBatches(ctx, rl, "hindsight", task)


def real_batches(
    buffer: TaskBuffer,
    M: int,
    N: int,
    rng: np.random.Generator,
    recency_window: Optional[int] = None,
    context_reward_key: str = "rewards",
) -> SampledBatches:
    ctx = sample_context(buffer, M, rng, recency_window, context_reward_key)
    rl = sample_rl_batch(buffer, N, rng)
    return SampledBatches(ctx, rl, "real", buffer.task)


def maybe_relabel(
    buffer: TaskBuffer,
    M: int,
    N: int,
    sample_rng: np.random.Generator,
    relabeler: Optional[Relabeler] = None,
    step: int = 0,
    recency_window: Optional[int] = None,
    context_reward_key: str = "rewards",
) -> SampledBatches:
    """Hindsight batches with probability ``K`` (after annealing and the
    only-unsolved filter), otherwise real context and RL batches from ``buffer``."""
    if buffer.total_transitions == 0:
        raise IllegalStateError(f"task {buffer.task.task_id} has no data")
    if relabeler is not None and relabeler.wants_hindsight(buffer, step):
        return relabeler.hindsight_batches(buffer, M, N, recency_window)
    return real_batches(buffer, M, N, sample_rng, recency_window, context_reward_key)
