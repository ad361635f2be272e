"""Meta-training loop, batched data collection and the meta-test protocol."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

from htr.context import (
    ContextEncoder,
    Learner,
    TaskBuffer,
    combined_update,
    posterior_arrays,
)
from htr.envsim import EnvSpec, GoalEnv, TaskDescriptor, Trajectory, control_penalty, make_env, sample_tasks, sparse_reward
from htr.harness.config import RunConfig, save_config
from htr.harness.metrics import MetricsRow, export_csv, export_timing
from htr.relabel import EpisodeClusters, Relabeler, RelabelMetrics, maybe_relabel
from htr.sac import AgentNets
from htr.tensornet.checkpoint import load_checkpoint, save_checkpoint

log = logging.getLogger(__name__)

STREAMS = ("tasks", "init", "collect", "sample", "update", "relabel", "eval")


def make_streams(seed: int) -> dict[str, np.random.Generator]:
    """Independent generators per concern, so turning one consumer on or off
    (relabeling, evaluation) never shifts the draws seen by the others."""
    children = np.random.SeedSequence(seed).spawn(len(STREAMS))
    return {name: np.random.default_rng(ss) for name, ss in zip(STREAMS, children)}


# ---------------------------------------------------------------------------
# rollouts


@dataclass
class Agent:
    nets: AgentNets
    encoder: ContextEncoder

    @property
    def latent_dim(self) -> int:
        return self.nets.latent_dim


def run_episodes(
    envs: Sequence[GoalEnv],
    agent: Agent,
    z: np.ndarray,
    rng: np.random.Generator,
    deterministic: bool = False,
    rollout_mode: str = "prior",
) -> list[Trajectory]:
    """One full episode in every env, stepped in lockstep with one policy call per step.

    ``z`` holds one latent row per env.  ``sparse_rewards`` of each returned
    trajectory hold the sparse reward of its task whatever the env's reward mode.
    """
    spec = envs[0].spec
    n, H = len(envs), spec.horizon
    ds, da = spec.state_dim, spec.action_dim
    S = np.empty((n, H, ds))
    A = np.empty((n, H, da))
    R = np.empty((n, H))
    NS = np.empty((n, H, ds))
    D = np.zeros((n, H), dtype=bool)
    states = np.stack([e.reset() for e in envs])
    for t in range(H):
        actions = agent.nets.act(states, z, rng, deterministic)
        S[:, t] = states
        for i, env in enumerate(envs):
            # the horizon is a time limit, not a terminal state, so ``done`` stays False
            ns, r, _ = env.step(actions[i])
            A[i, t] = np.clip(actions[i], -1.0, 1.0)
            R[i, t] = r
            NS[i, t] = ns
        states = NS[:, t]
    out = []
    cw = spec.effective_control_cost
    for i, env in enumerate(envs):
        sparse = np.asarray(sparse_reward(NS[i], env.task))
        hits = sparse > 0
        if cw:
            sparse = sparse - control_penalty(A[i], cw)
        out.append(
            Trajectory(
                states=S[i], actions=A[i], rewards=R[i], next_states=NS[i], dones=D[i],
                task_id=env.task.task_id, rollout_mode=rollout_mode,
                sparse_rewards=R[i] if spec.reward_mode == "sparse" else sparse,
                successes=hits,
            )
        )
    return out


def _context_array(trajs: Sequence[Trajectory], reward_key: str) -> np.ndarray:
    return np.concatenate(
        [np.concatenate([t.states, t.actions, getattr(t, reward_key)[:, None], t.next_states], axis=1) for t in trajs]
    )


def _sample_latents(mean: np.ndarray, var: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    return mean + np.sqrt(var) * rng.standard_normal(mean.shape)


def collect_data(
    envs: Sequence[GoalEnv],
    agent: Agent,
    buffers: Sequence[TaskBuffer],
    episodes: int,
    rng: np.random.Generator,
    context_reward_key: str = "rewards",
    on_trajectory=None,
) -> list[list[Trajectory]]:
    """First episode with ``z`` from the prior, later ones from the posterior
    given everything collected for that task so far in this call."""
    n, L = len(envs), agent.latent_dim
    gathered: list[list[Trajectory]] = [[] for _ in range(n)]
    for e in range(episodes):
        if e == 0:
            z = rng.standard_normal((n, L))
            mode = "prior"
        else:
            ctx = np.stack([_context_array(g, context_reward_key) for g in gathered])
            z = _sample_latents(*posterior_arrays(agent.encoder, ctx), rng)
            mode = "posterior"
        for i, traj in enumerate(run_episodes(envs, agent, z, rng, rollout_mode=mode)):
            gathered[i].append(traj)
            buffers[i].add_trajectory(traj)
            if on_trajectory is not None:
                on_trajectory(traj)
    return gathered


def meta_test(
    agent: Agent,
    tasks: Sequence[TaskDescriptor],
    env_spec: EnvSpec,
    episodes_per_task: int,
    rng: np.random.Generator,
    deterministic: bool = True,
    dense_context: bool = False,
) -> np.ndarray:
    """Sparse return per adaptation episode, averaged over ``tasks``.

    Each task starts from an empty context and a prior sample of ``z``; after
    every episode the posterior is re-encoded from all context gathered in
    that task.  The context carries sparse rewards unless ``dense_context``
    (the dense oracle).  Nothing is trained and no shared buffer is touched.
    """
    spec = EnvSpec(**{**env_spec.__dict__, "reward_mode": "dense" if dense_context else "sparse"})
    envs = [make_env(spec, t) for t in tasks]
    n, L = len(envs), agent.latent_dim
    context: list[list[Trajectory]] = [[] for _ in range(n)]
    curve = np.empty(episodes_per_task)
    for e in range(episodes_per_task):
        if e == 0:
            z = rng.standard_normal((n, L))
        else:
            ctx = np.stack([_context_array(c, "rewards") for c in context])
            z = _sample_latents(*posterior_arrays(agent.encoder, ctx), rng)
        trajs = run_episodes(envs, agent, z, rng, deterministic)
        for c, t in zip(context, trajs):
            c.append(t)
        curve[e] = np.mean([t.sparse_rewards.sum() for t in trajs])
    return curve


def prior_rollout_positions(agent: Agent, tasks: Sequence[TaskDescriptor], env_spec: EnvSpec, count: int, rng) -> np.ndarray:
    """Agent positions of ``count`` pre-adaptation (prior ``z``) episodes, shape ``(count, H + 1, 2)``."""
    envs = [make_env(env_spec, tasks[i % len(tasks)]) for i in range(count)]
    z = rng.standard_normal((count, agent.latent_dim))
    trajs = run_episodes(envs, agent, z, rng, deterministic=True)
    return np.stack([np.vstack([t.states[:1, :2], t.next_states[:, :2]]) for t in trajs])


# ---------------------------------------------------------------------------
# trainer


class Trainer:
    def __init__(self, cfg: RunConfig):
        cfg.validate()
        self.cfg = cfg
        self.rngs = make_streams(cfg.seed)
        spec = cfg.env
        task_seed = int(self.rngs["tasks"].integers(2**31))
        tasks = sample_tasks(cfg.n_train_tasks + cfg.n_test_tasks, spec.goal_distance, task_seed, spec.success_radius)
        self.train_tasks = tasks[: cfg.n_train_tasks]
        self.test_tasks = tasks[cfg.n_train_tasks :]

        init = self.rngs["init"]
        ds, da, L = spec.state_dim, spec.action_dim, cfg.latent_dim
        nets = AgentNets(ds, da, L, cfg.policy_hidden, cfg.alpha, cfg.gamma, cfg.tau, init)
        encoder = ContextEncoder(2 * ds + da + 1, L, cfg.encoder_hidden, init)
        self.agent = Agent(nets, encoder)
        self.learner = Learner(nets, encoder, cfg.lr, cfg.kl_weight, self.rngs["update"])

        self.envs = [make_env(spec, t) for t in self.train_tasks]
        self.buffers = [TaskBuffer(t, cfg.buffer_capacity) for t in self.train_tasks]
        self.relabeler: Optional[Relabeler] = None
        if cfg.relabel.enabled:
            clusters = None
            if cfg.relabel.strategy == "EC":
                clusters = EpisodeClusters(
                    spec.goal_distance, spec.success_radius,
                    cfg.relabel.grid_angle_bins, cfg.relabel.grid_radius_bins,
                    cfg.relabel.ec_explore_fraction, cfg.buffer_capacity,
                    spec.effective_control_cost,
                )
            self.relabeler = Relabeler(cfg.relabel, self.rngs["relabel"], clusters, spec.effective_control_cost)
        self.relabel_metrics = RelabelMetrics()
        self.context_reward_key = "sparse_rewards" if cfg.oracle_dense and cfg.oracle_sparse_context else "rewards"
        self.dense_context = cfg.oracle_dense and not cfg.oracle_sparse_context

        self.iteration = 0
        self.env_steps = 0
        self.grad_steps = 0
        self.log: list[MetricsRow] = []
        self.wall: list[float] = []

    # -- phases ---------------------------------------------------------------------

    def collect(self) -> None:
        cfg = self.cfg
        hook = self.relabeler.ingest if self.relabeler is not None else None
        collect_data(self.envs, self.agent, self.buffers, cfg.episodes_per_task_per_iter,
                     self.rngs["collect"], self.context_reward_key, hook)
        self.env_steps += len(self.envs) * cfg.episodes_per_task_per_iter * cfg.env.horizon

    def train_step(self) -> dict[str, float]:
        cfg = self.cfg
        rng = self.rngs["sample"]
        chosen = rng.choice(len(self.buffers), size=cfg.meta_batch, replace=False)
        pairs = []
        hindsight = 0
        for i in chosen:
            sb = maybe_relabel(
                self.buffers[i], cfg.context_size, cfg.batch_size, rng, self.relabeler,
                self.grad_steps, cfg.recency_window or None, self.context_reward_key,
            )
            self.relabel_metrics.record(sb)
            hindsight += sb.source == "hindsight"
            pairs.append((sb.context, sb.rl))
        out = combined_update(pairs, self.learner)
        self.grad_steps += 1
        out["hindsight_batches"] = hindsight
        return out

    def evaluate(self) -> tuple[Optional[np.ndarray], np.ndarray]:
        cfg = self.cfg
        rng = self.rngs["eval"]
        train_curve = None
        if cfg.n_eval_train_tasks:
            train_curve = meta_test(self.agent, self.train_tasks[: cfg.n_eval_train_tasks], cfg.env, cfg.eval_episodes,
                                    rng, dense_context=self.dense_context)
        test_curve = meta_test(self.agent, self.test_tasks, cfg.env, cfg.eval_episodes, rng, dense_context=self.dense_context)
        return train_curve, test_curve

    def iterate(self) -> MetricsRow:
        cfg = self.cfg
        self.collect()
        losses = {"critic": 0.0, "actor": 0.0, "kl": 0.0}
        hindsight = 0
        for _ in range(cfg.train_steps_per_iter):
            out = self.train_step()
            for k in losses:
                losses[k] += out[k] / cfg.train_steps_per_iter
            hindsight += out["hindsight_batches"]
        self.iteration += 1
        row = MetricsRow(
            iter=self.iteration,
            env_steps=self.env_steps,
            grad_steps=self.grad_steps,
            hindsight_batch_fraction=hindsight / (cfg.train_steps_per_iter * cfg.meta_batch),
            critic_loss=losses["critic"],
            actor_loss=losses["actor"],
            kl_loss=losses["kl"],
            **self.relabel_metrics.summary(),
        )
        self.relabel_metrics.reset()
        if self.iteration % cfg.eval_every == 0 or self.iteration == cfg.total_iters:
            train_curve, test_curve = self.evaluate()
            row.avg_train_adaptation_return = None if train_curve is None else float(train_curve.mean())
            row.avg_test_adaptation_return = float(test_curve.mean())
            row.final_episode_test_return = float(test_curve[-1])
        self.log.append(row)
        return row

    # -- persistence -------------------------------------------------------------------

    def checkpoint_state(self) -> dict[str, np.ndarray]:
        state = self.learner.state_dict()
        for name, opt in self.learner.optimizers.items():
            st = opt.state_dict()
            state[f"adam.{name}.t"] = np.array(float(st["t"]))
            for j, (m, v) in enumerate(zip(st["m"], st["v"])):
                state[f"adam.{name}.m{j}"] = m
                state[f"adam.{name}.v{j}"] = v
        return state

    def save(self, path: Union[str, Path]) -> None:
        save_checkpoint(path, self.checkpoint_state())

    def load(self, path: Union[str, Path]) -> None:
        state = load_checkpoint(path)
        self.learner.load_state_dict(state)
        for name, opt in self.learner.optimizers.items():
            key = f"adam.{name}.t"
            if key in state:
                n = len(opt.params)
                opt.load_state_dict({
                    "t": int(state[key]),
                    "m": [state[f"adam.{name}.m{j}"] for j in range(n)],
                    "v": [state[f"adam.{name}.v{j}"] for j in range(n)],
                })

    # -- driver --------------------------------------------------------------------

    def run(self, out_dir: Optional[Union[str, Path]] = None) -> list[MetricsRow]:
        cfg = self.cfg
        out = Path(out_dir) if out_dir is not None else None
        if out is not None:
            out.mkdir(parents=True, exist_ok=True)
            save_config(cfg, out / "config.cfg")
        t0 = time.perf_counter()
        while self.iteration < cfg.total_iters:
            row = self.iterate()
            self.wall.append(time.perf_counter() - t0)
            if row.avg_test_adaptation_return is not None:
                log.info("iter %d steps %d test return %.3f", row.iter, row.env_steps, row.avg_test_adaptation_return)
            if out is not None and cfg.checkpoint_every and self.iteration % cfg.checkpoint_every == 0:
                self.save(out / f"checkpoint_{self.iteration:05d}.ckpt")
        if out is not None and self.log:
            export_csv(self.log, out / "metrics.csv")
            export_timing([r.iter for r in self.log], self.wall, out / "timing.csv")
            self.save(out / "checkpoint_final.ckpt")
            if cfg.prior_rollouts:
                pos = prior_rollout_positions(self.agent, self.test_tasks, cfg.env, cfg.prior_rollouts, self.rngs["eval"])
                goals = np.array([t.goal for t in self.test_tasks])
                np.savez(out / "prior_rollouts.npz", positions=pos, goals=goals)
        return self.log


def meta_train(cfg: RunConfig, out_dir: Optional[Union[str, Path]] = None) -> list[MetricsRow]:
    return Trainer(cfg).run(out_dir)
