"""Latent task inference: context encoder, per-task buffers and the joint update.

The encoder maps every context transition ``(s, a, r, s')`` to an independent
Gaussian factor over the latent task variable; the posterior is their
normalised product, which makes it invariant to the order of the context.
"""

from __future__ import annotations

import threading
from collections import deque
from dataclasses import dataclass
from typing import Literal, Optional, Sequence, Union

import numpy as np

from htr.envsim import TaskDescriptor, Trajectory, Transition
from htr.errors import IllegalStateError, InvalidArgumentError
from htr.sac import AgentNets, RlBatch, actor_loss, critic_loss, soft_update
from htr.tensornet import autodiff as ad
from htr.tensornet.autodiff import Tensor
from htr.tensornet.nn import Mlp, MlpSpec
from htr.tensornet.optim import Adam

BatchSource = Literal["real", "hindsight"]
VAR_FLOOR = 1e-7


@dataclass
class LatentPosterior:
    """Diagonal Gaussian belief; ``mean``/``var`` may carry a leading task axis."""

    mean: Union[Tensor, np.ndarray]
    var: Union[Tensor, np.ndarray]

    @classmethod
    def prior(cls, latent_dim: int) -> "LatentPosterior":
        return cls(np.zeros(latent_dim), np.ones(latent_dim))

    @property
    def mean_array(self) -> np.ndarray:
        return ad.as_tensor(self.mean).data

    @property
    def var_array(self) -> np.ndarray:
        return ad.as_tensor(self.var).data


@dataclass
class TransitionBatch:
    """Column-wise batch of transitions, used for both context and RL batches."""

    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    next_states: np.ndarray
    dones: np.ndarray
    task_ids: np.ndarray
    successes: np.ndarray
    step_indices: np.ndarray
    source: BatchSource = "real"

    def __len__(self) -> int:
        return len(self.rewards)

    def __getitem__(self, i: int) -> Transition:
        return Transition(
            state=self.states[i],
            action=self.actions[i],
            reward=float(self.rewards[i]),
            next_state=self.next_states[i],
            done=bool(self.dones[i]),
            task_id=int(self.task_ids[i]),
            step_index=int(self.step_indices[i]),
        )

    def encoder_input(self) -> np.ndarray:
        return np.concatenate([self.states, self.actions, self.rewards[:, None], self.next_states], axis=1)

    @classmethod
    def concatenate(cls, batches: Sequence["TransitionBatch"]) -> "TransitionBatch":
        return cls(
            *(np.concatenate([getattr(b, f) for b in batches]) for f in _COLUMNS),
            source=batches[0].source,
        )


_COLUMNS = ("states", "actions", "rewards", "next_states", "dones", "task_ids", "successes", "step_indices")

# alias kept for readability at call sites
ContextBatch = TransitionBatch


def _trajectory_successes(traj: Trajectory) -> np.ndarray:
    return np.asarray(traj.successes, dtype=bool)


# ---------------------------------------------------------------------------
# encoder and posterior algebra


class ContextEncoder:
    """MLP producing one Gaussian factor ``(mu, softplus(raw) + floor)`` per transition."""

    def __init__(self, transition_dim: int, latent_dim: int, hidden: Sequence[int] = (200, 200, 200), rng=None):
        self.latent_dim = latent_dim
        self.net = Mlp(MlpSpec(transition_dim, 2 * latent_dim, hidden), rng, "encoder")

    @property
    def params(self):
        return self.net.params

    def factors(self, x: Union[np.ndarray, Tensor]) -> tuple[Tensor, Tensor]:
        """Per-transition factors for input of shape ``(..., M, d)``."""
        x = ad.as_tensor(x)
        lead = x.shape[:-1]
        out = self.net(x.reshape(-1, x.shape[-1])).reshape(*lead, 2 * self.latent_dim)
        L = self.latent_dim
        mu = out[..., :L]
        var = ad.softplus(out[..., L:]) + VAR_FLOOR
        return mu, var


def product_of_gaussians(mus: Union[Tensor, np.ndarray], variances: Union[Tensor, np.ndarray], axis: int = -2) -> LatentPosterior:
    """Normalised product of diagonal Gaussian factors along ``axis``.

    ``var = 1 / Σ 1/σ²``, ``mean = var · Σ μ/σ²`` componentwise.
    """
    mus, variances = ad.as_tensor(mus), ad.as_tensor(variances)
    precision = ad.reciprocal(variances)
    var = ad.reciprocal(precision.sum(axis=axis))
    mean = var * (mus * precision).sum(axis=axis)
    return LatentPosterior(mean, var)


def encode(context: Union[TransitionBatch, np.ndarray], encoder: ContextEncoder) -> LatentPosterior:
    """Posterior over ``z`` given a context batch (or a stacked ``(T, M, d)`` array)."""
    x = context.encoder_input() if isinstance(context, TransitionBatch) else np.asarray(context)
    if x.ndim < 2 or x.shape[-2] == 0:
        raise InvalidArgumentError("cannot encode an empty context")
    mu, var = encoder.factors(x)
    return product_of_gaussians(mu, var)


def posterior_arrays(encoder: ContextEncoder, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Untracked :func:`encode` for a ``(T, M, d)`` stack; returns ``(mean, var)`` of shape ``(T, L)``."""
    T, M, d = x.shape
    if M == 0:
        raise InvalidArgumentError("cannot encode an empty context")
    L = encoder.latent_dim
    out = encoder.net.predict(x.reshape(-1, d)).reshape(T, M, 2 * L)
    var_f = np.logaddexp(0.0, out[..., L:]) + VAR_FLOOR
    prec = 1.0 / var_f
    var = 1.0 / prec.sum(axis=1)
    mean = var * (out[..., :L] * prec).sum(axis=1)
    return mean, var


def kl_loss(posterior: LatentPosterior) -> Tensor:
    """``KL(N(mean, var) || N(0, I))`` summed over latent dims (and tasks)."""
    mean, var = ad.as_tensor(posterior.mean), ad.as_tensor(posterior.var)
    return 0.5 * (var + mean * mean - 1.0 - ad.log(var)).sum()


def sample_z(posterior: LatentPosterior, rng: Optional[np.random.Generator] = None, noise: Optional[np.ndarray] = None) -> Tensor:
    """Reparameterised draw ``mean + sqrt(var) * xi``."""
    mean, var = ad.as_tensor(posterior.mean), ad.as_tensor(posterior.var)
    if noise is None:
        noise = rng.standard_normal(mean.shape)
    return mean + ad.sqrt(var) * noise


# ---------------------------------------------------------------------------
# replay


class TaskBuffer:
    """Episodic FIFO store for one task.

    Whole episodes are evicted oldest-first once the transition count exceeds
    ``capacity``.  Readers see an immutable snapshot of the flattened columns,
    so sampling while another thread adds an episode stays consistent.
    """

    def __init__(self, task: TaskDescriptor, capacity: int = 100_000):
        if capacity < 1:
            raise InvalidArgumentError("capacity must be >= 1")
        self.task = task
        self.capacity = capacity
        self.episodes: deque[Trajectory] = deque()
        self.total_transitions = 0
        self._lock = threading.Lock()
        self._flat: Optional[dict] = None
        self.ever_succeeded = False

    def __len__(self) -> int:
        return self.total_transitions

    @property
    def n_episodes(self) -> int:
        return len(self.episodes)


    def add_trajectory(self, traj: Trajectory) -> None:
        if traj.task_id != self.task.task_id:
            raise InvalidArgumentError(f"trajectory task {traj.task_id} does not match buffer task {self.task.task_id}")
        if len(traj) == 0:
            raise InvalidArgumentError("cannot add an empty trajectory")
        with self._lock:
            self.episodes.append(traj)
            self.total_transitions += len(traj)
            self.ever_succeeded = self.ever_succeeded or bool(_trajectory_successes(traj).any())
            while self.total_transitions > self.capacity and len(self.episodes) > 1:
                self.total_transitions -= len(self.episodes.popleft())
            self._flat = None

    def snapshot(self) -> dict:
        flat = self._flat
        if flat is None:
            with self._lock:
                eps = list(self.episodes)
                flat = {
                    "states": np.concatenate([e.states for e in eps]),
                    "actions": np.concatenate([e.actions for e in eps]),
                    "rewards": np.concatenate([e.rewards for e in eps]),
                    "sparse_rewards": np.concatenate([e.sparse_rewards for e in eps]),
                    "next_states": np.concatenate([e.next_states for e in eps]),
                    "dones": np.concatenate([e.dones for e in eps]),
                    "successes": np.concatenate([_trajectory_successes(e) for e in eps]),
                    "step_indices": np.concatenate([np.arange(len(e)) for e in eps]),
                }
                self._flat = flat
        return flat

    def gather(self, idx: np.ndarray, source: BatchSource = "real", reward_key: str = "rewards") -> TransitionBatch:
        flat = self.snapshot()
        return TransitionBatch(
            states=flat["states"][idx],
            actions=flat["actions"][idx],
            rewards=flat[reward_key][idx],
            next_states=flat["next_states"][idx],
            dones=flat["dones"][idx],
            task_ids=np.full(len(idx), self.task.task_id, dtype=np.int64),
            successes=flat["successes"][idx],
            step_indices=flat["step_indices"][idx],
            source=source,
        )


def sample_context(
    buffer: TaskBuffer,
    M: int,
    rng: np.random.Generator,
    recency_window: Optional[int] = None,
    reward_key: str = "rewards",
) -> TransitionBatch:
    """``M`` transitions drawn uniformly from the most recent ``recency_window``.

    Draws without replacement when the window holds at least ``M``
    transitions, so a buffer of exactly ``M`` returns all of them.
    """
    n = buffer.total_transitions
    if n == 0:
        raise IllegalStateError("cannot sample context from an empty buffer")
    w = n if not recency_window or recency_window >= n else recency_window
    lo = n - w
    if w >= M:
        idx = lo + rng.choice(w, size=M, replace=False)
    else:
        idx = lo + rng.integers(0, w, size=M)
    return buffer.gather(idx, "real", reward_key)


def sample_rl_batch(buffer: TaskBuffer, N: int, rng: np.random.Generator) -> TransitionBatch:
    """``N`` transitions uniformly (with replacement) over the whole buffer."""
    n = buffer.total_transitions
    if n == 0:
        raise IllegalStateError("cannot sample from an empty buffer")
    return buffer.gather(rng.integers(0, n, size=N), "real")


# ---------------------------------------------------------------------------
# joint update


class Learner:
    """Networks, optimisers and hyperparameters for the joint encoder/SAC step."""

    def __init__(
        self,
        nets: AgentNets,
        encoder: ContextEncoder,
        lr: float = 3e-4,
        kl_weight: float = 0.1,
        rng: Optional[np.random.Generator] = None,
    ):
        self.nets = nets
        self.encoder = encoder
        self.kl_weight = kl_weight
        self.rng = rng if rng is not None else np.random.default_rng(0)
        self.optimizers = {
            "actor": Adam(nets.actor.params, lr),
            "critic1": Adam(nets.critic1.params, lr),
            "critic2": Adam(nets.critic2.params, lr),
            "encoder": Adam(encoder.params, lr),
        }

    @property
    def trainable(self):
        return [p for opt in self.optimizers.values() for p in opt.params]

    def zero_grad(self) -> None:
        for opt in self.optimizers.values():
            opt.zero_grad()

    def state_dict(self) -> dict[str, np.ndarray]:
        out = {}
        for net in (*self.nets.networks.values(), self.encoder.net):
            out.update({k: v.copy() for k, v in net.state_dict().items()})
        return out

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        for net in (*self.nets.networks.values(), self.encoder.net):
            net.load_state_dict(state)

    def checksum(self) -> str:
        import hashlib

        h = hashlib.sha256()
        for k, v in sorted(self.state_dict().items()):
            h.update(k.encode())
            h.update(np.ascontiguousarray(v).tobytes())
        return h.hexdigest()


@dataclass
class UpdateNoise:
    latent: np.ndarray
    target: np.ndarray
    actor: np.ndarray

    @classmethod
    def draw(cls, rng: np.random.Generator, n_tasks: int, batch: int, latent_dim: int, action_dim: int) -> "UpdateNoise":
        return cls(
            latent=rng.standard_normal((n_tasks, latent_dim)),
            target=rng.standard_normal((n_tasks * batch, action_dim)),
            actor=rng.standard_normal((n_tasks * batch, action_dim)),
        )


def _stack(batches: Sequence[TransitionBatch], name: str) -> np.ndarray:
    return np.concatenate([getattr(b, name) for b in batches])


def compute_losses(
    pairs: Sequence[tuple[TransitionBatch, TransitionBatch]],
    learner: Learner,
    noise: UpdateNoise,
) -> dict:
    """Build the joint loss over a meta-batch of ``(context, rl_batch)`` pairs.

    Returns the recorded tensors plus float summaries.  Each task contributes
    its own mean critic/actor loss and KL; the totals are sums over tasks.
    """
    if not pairs:
        raise InvalidArgumentError("empty meta-batch")
    T = len(pairs)
    M = len(pairs[0][0])
    N = len(pairs[0][1])
    if any(len(c) != M or len(b) != N for c, b in pairs):
        raise InvalidArgumentError("all tasks in a meta-batch need equal context and batch sizes")
    ctx = np.stack([c.encoder_input() for c, _ in pairs])
    posterior = encode(ctx, learner.encoder)
    z = sample_z(posterior, noise=noise.latent)
    rl = RlBatch(
        states=_stack([b for _, b in pairs], "states"),
        actions=_stack([b for _, b in pairs], "actions"),
        rewards=_stack([b for _, b in pairs], "rewards"),
        next_states=_stack([b for _, b in pairs], "next_states"),
        dones=_stack([b for _, b in pairs], "dones"),
        z=z,
        segments=T,
    )
    c_loss, c_info = critic_loss(rl, learner.nets, noise=noise.target)
    a_loss, a_info = actor_loss(rl, learner.nets, noise=noise.actor)
    kl = kl_loss(posterior)
    total = c_loss + learner.kl_weight * kl + a_loss
    return {
        "total": total,
        "critic": c_loss,
        "actor": a_loss,
        "kl": kl,
        "posterior": posterior,
        "z": z,
        "info": {**c_info, **a_info},
    }


def combined_update(
    pairs: Sequence[tuple[TransitionBatch, TransitionBatch]],
    learner: Learner,
    noise: Optional[UpdateNoise] = None,
) -> dict[str, float]:
    """One gradient step on encoder, actor and both critics, then target update.

    Critic loss plus ``kl_weight * KL`` reach the encoder; the actor loss sees
    ``z`` and the critics as constants.  Gradients are summed over the
    meta-batch and each network gets a single Adam step.
    """
    if noise is None:
        nets = learner.nets
        noise = UpdateNoise.draw(learner.rng, len(pairs), len(pairs[0][1]), nets.latent_dim, nets.action_dim)
    learner.zero_grad()
    out = compute_losses(pairs, learner, noise)
    out["total"].backward()
    for opt in learner.optimizers.values():
        opt.step()
    soft_update(learner.nets)
    return {
        "total": out["total"].item(),
        "critic": out["critic"].item(),
        "actor": out["actor"].item(),
        "kl": out["kl"].item(),
        **out["info"],
    }
