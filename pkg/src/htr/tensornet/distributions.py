"""Tanh-squashed diagonal Gaussian used by the actor."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from htr.tensornet import autodiff as ad
from htr.tensornet.autodiff import Tensor

LOG_STD_MIN = -20.0
LOG_STD_MAX = 2.0
_HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)
TANH_EPS = 1e-6


@dataclass
class DiagGaussianHead:
    mean: Tensor
    log_std: Tensor

    @classmethod
    def from_output(cls, out: Tensor) -> "DiagGaussianHead":
        """Split a network output ``[mean | raw_log_std]`` and clamp the log-std."""
        d = out.shape[-1] // 2
        return cls(mean=out[..., :d], log_std=ad.clip(out[..., d:], LOG_STD_MIN, LOG_STD_MAX))

    @property
    def std(self) -> np.ndarray:
        return np.exp(self.log_std.data)


def sample_gaussian_tanh(
    head: DiagGaussianHead,
    rng: Optional[np.random.Generator] = None,
    noise: Optional[np.ndarray] = None,
) -> tuple[Tensor, Tensor]:
    """Reparameterised ``a = tanh(mean + std * xi)`` and its log-density.

    The log-density includes the change-of-variables term for the squashing
    and is summed over the last axis.  Pass ``noise`` to fix ``xi``.
    """
    if noise is None:
        noise = rng.standard_normal(head.mean.shape)
    std = ad.exp(head.log_std)
    pre = head.mean + std * noise
    action = ad.tanh(pre)
    # (pre - mean) / std == noise, so the Gaussian term only depends on log_std
    gauss = (-0.5 * noise * noise - _HALF_LOG_2PI) - head.log_std
    squash = ad.log(1.0 - action * action + TANH_EPS)
    log_prob = (gauss - squash).sum(axis=-1)
    return action, log_prob


def sample_gaussian_tanh_np(
    mean: np.ndarray,
    log_std: np.ndarray,
    rng: Optional[np.random.Generator] = None,
    deterministic: bool = False,
    noise: Optional[np.ndarray] = None,
):
    """Untracked counterpart for rollouts and targets; returns ``(action, log_prob)``."""
    log_std = np.clip(log_std, LOG_STD_MIN, LOG_STD_MAX)
    if deterministic:
        noise = np.zeros_like(mean)
    elif noise is None:
        noise = rng.standard_normal(mean.shape)
    a = np.tanh(mean + np.exp(log_std) * noise)
    gauss = (-0.5 * noise * noise - _HALF_LOG_2PI) - log_std
    log_prob = (gauss - np.log(1.0 - a * a + TANH_EPS)).sum(axis=-1)
    return a, log_prob
