"""Latent-conditioned soft actor-critic losses.

Every network takes the latent task vector ``z`` as an extra input: the actor
maps ``state ⊕ z`` to a tanh-Gaussian over actions and the twin critics map
``state ⊕ action ⊕ z`` to a scalar.

Losses can be evaluated over several tasks at once.  Rows are grouped into
``segments`` contiguous, equally sized blocks (one per task); the returned
loss is the sum over blocks of the per-block mean.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass
from typing import Optional, Sequence, Union

import numpy as np

from htr.errors import InvalidArgumentError
from htr.tensornet import autodiff as ad
from htr.tensornet.autodiff import Tensor
from htr.tensornet.distributions import DiagGaussianHead, sample_gaussian_tanh, sample_gaussian_tanh_np
from htr.tensornet.nn import Mlp, MlpSpec


@dataclass
class RlBatch:
    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    next_states: np.ndarray
    dones: np.ndarray
    z: Union[Tensor, np.ndarray]
    segments: int = 1

    def __len__(self) -> int:
        return len(self.rewards)

    def z_rows(self) -> Tensor:
        """``z`` broadcast to one row per transition (gradient preserved)."""
        z = ad.as_tensor(self.z)
        n = len(self)
        if z.ndim == 1:
            return ad.repeat_rows(z.reshape(1, -1), n)
        if z.shape[0] == n:
            return z
        if z.shape[0] == self.segments and n % self.segments == 0:
            return ad.repeat_rows(z, n // self.segments)
        raise InvalidArgumentError(f"z of shape {z.shape} does not match a batch of {n} rows")


class AgentNets:
    def __init__(
        self,
        state_dim: int,
        action_dim: int,
        latent_dim: int,
        hidden: Sequence[int] = (300, 300, 300),
        alpha: float = 0.2,
        gamma: float = 0.99,
        tau: float = 0.005,
        rng: Optional[np.random.Generator] = None,
        last_layer_scale: Optional[float] = 3e-3,
    ):
        if not alpha > 0:
            raise InvalidArgumentError("alpha must be > 0")
        if not 0 < gamma < 1:
            raise InvalidArgumentError("gamma must lie in (0, 1)")
        if not 0 < tau <= 1:
            raise InvalidArgumentError("tau must lie in (0, 1]")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.state_dim, self.action_dim, self.latent_dim = state_dim, action_dim, latent_dim
        self.alpha, self.gamma, self.tau = alpha, gamma, tau
        self.actor = Mlp(MlpSpec(state_dim + latent_dim, 2 * action_dim, hidden), rng, "actor", last_layer_scale)
        qspec = MlpSpec(state_dim + action_dim + latent_dim, 1, hidden)
        self.critic1 = Mlp(qspec, rng, "critic1", last_layer_scale)
        self.critic2 = Mlp(qspec, rng, "critic2", last_layer_scale)
        self.target1 = copy.deepcopy(self.critic1)
        self.target2 = copy.deepcopy(self.critic2)
        self.target1.name, self.target2.name = "target1", "target2"
        for net in (self.target1, self.target2):
            for p in net.params:
                p.name = p.name.replace("critic", "target")

    @property
    def networks(self) -> dict[str, Mlp]:
        return {"actor": self.actor, "critic1": self.critic1, "critic2": self.critic2, "target1": self.target1, "target2": self.target2}

    def act(self, state: np.ndarray, z: np.ndarray, rng: np.random.Generator, deterministic: bool = False) -> np.ndarray:
        out = self.actor.predict(np.concatenate([state, z], axis=-1))
        a, _ = sample_gaussian_tanh_np(out[..., : self.action_dim], out[..., self.action_dim :], rng, deterministic)
        return a


def _segment_mean(per_row: Tensor, segments: int) -> Tensor:
    if segments == 1:
        return per_row.mean()
    return per_row.reshape(segments, -1).mean(axis=1).sum()


def critic_target(batch: RlBatch, nets: AgentNets, rng: Optional[np.random.Generator] = None, noise: Optional[np.ndarray] = None) -> np.ndarray:
    """Soft Bellman target ``r + γ(1-done)(min Q_targ(s', a') - α log π(a'|s'))``, untracked."""
    z_rows = batch.z_rows().data
    out = nets.actor.predict(np.concatenate([batch.next_states, z_rows], axis=1))
    A = nets.action_dim
    a_next, logp_next = sample_gaussian_tanh_np(out[:, :A], out[:, A:], rng, noise=noise)
    q_in = np.concatenate([batch.next_states, a_next, z_rows], axis=1)
    q_next = np.minimum(nets.target1.predict(q_in), nets.target2.predict(q_in))[:, 0]
    soft_v = q_next - nets.alpha * logp_next
    return batch.rewards + nets.gamma * (1.0 - batch.dones.astype(np.float64)) * soft_v


def critic_loss(
    batch: RlBatch,
    nets: AgentNets,
    rng: Optional[np.random.Generator] = None,
    noise: Optional[np.ndarray] = None,
) -> tuple[Tensor, dict]:
    """Mean squared soft Bellman error, averaged over both critic heads.

    The target is a constant.  ``z`` keeps its gradient so an encoder that
    produced it is trained through this loss.
    """
    if len(batch) == 0:
        raise InvalidArgumentError("critic_loss needs a nonempty batch")
    y = critic_target(batch, nets, rng, noise)
    z = batch.z_rows()
    x = ad.concat([batch.states, batch.actions, z], axis=1)
    q1 = nets.critic1(x)[:, 0]
    q2 = nets.critic2(x)[:, 0]
    per_row = 0.5 * ((q1 - y) ** 2 + (q2 - y) ** 2)
    loss = _segment_mean(per_row, batch.segments)
    return loss, {"q1": float(q1.data.mean()), "q2": float(q2.data.mean()), "target": float(y.mean())}


def actor_loss(
    batch: RlBatch,
    nets: AgentNets,
    rng: Optional[np.random.Generator] = None,
    noise: Optional[np.ndarray] = None,
) -> tuple[Tensor, dict]:
    """``α log π(a|s,z) - min(Q1, Q2)(s, a, z)`` with reparameterised ``a``.

    ``z`` and the critic weights are treated as constants, so only the actor
    accumulates gradient.
    """
    if len(batch) == 0:
        raise InvalidArgumentError("actor_loss needs a nonempty batch")
    z = Tensor(batch.z_rows().data)
    out = nets.actor(ad.concat([batch.states, z], axis=1))
    head = DiagGaussianHead.from_output(out)
    if noise is None:
        noise = rng.standard_normal(head.mean.shape)
    action, log_prob = sample_gaussian_tanh(head, noise=noise)
    x = ad.concat([batch.states, action, z], axis=1)
    q = ad.minimum(nets.critic1(x, detach_params=True), nets.critic2(x, detach_params=True))[:, 0]
    per_row = nets.alpha * log_prob - q
    loss = _segment_mean(per_row, batch.segments)
    return loss, {"log_pi": float(log_prob.data.mean()), "log_std": float(head.log_std.data.mean())}


def soft_update(nets: AgentNets, tau: Optional[float] = None) -> None:
    tau = nets.tau if tau is None else tau
    for target, critic in ((nets.target1, nets.critic1), (nets.target2, nets.critic2)):
        for pt, pc in zip(target.params, critic.params):
            pt.data *= 1.0 - tau
            pt.data += tau * pc.data
