"""Group-relative policy optimization on sequence-level log-probabilities."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad


@dataclass(frozen=True)
class GRPOConfig:
    epsilon: float
    beta: float
    std_floor: float = 1e-8

    def __post_init__(self):
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")
        if self.beta < 0:
            raise ValueError("beta must be nonnegative")
        if self.std_floor <= 0:
            raise ValueError("std_floor must be positive")


@dataclass
class SampleGroup:
    rewards: np.ndarray
    logp_theta: object  # array or Tensor, one entry per output
    logp_old: np.ndarray
    logp_ref: np.ndarray

    def __post_init__(self):
        self.rewards = np.asarray(self.rewards, dtype=np.float64)
        self.logp_old = np.asarray(self.logp_old, dtype=np.float64)
        self.logp_ref = np.asarray(self.logp_ref, dtype=np.float64)
        G = self.rewards.shape[0]
        if G < 2:
            raise ValueError("a group needs at least two outputs")
        theta = ad.tensor(self.logp_theta).data
        for name, v in (("logp_theta", theta), ("logp_old", self.logp_old), ("logp_ref", self.logp_ref)):
            if v.shape != (G,):
                raise ValueError(f"{name} must have shape ({G},)")
            if not np.all(np.isfinite(v)):
                raise ValueError(f"{name} must be finite")

    @property
    def G(self) -> int:
        return self.rewards.shape[0]


def advantages(rewards, std_floor: float = 1e-8) -> np.ndarray:
    """Rewards standardized within the group with the population std."""
    r = np.asarray(rewards, dtype=np.float64)
    if r.ndim != 1 or r.shape[0] < 2:
        raise ValueError("need at least two rewards")
    return (r - r.mean()) / max(r.std(), std_floor)


def kl_estimate(logp_theta, logp_ref):
    """``x - log x - 1`` with ``x = pi_ref / pi_theta``; nonnegative, zero only at equality."""
    log_x = ad.sub(logp_ref, logp_theta)
    return ad.exp(log_x) - log_x - 1.0


def objective(group: SampleGroup, cfg: GRPOConfig) -> ad.Tensor:
    """Clipped surrogate minus the KL penalty, averaged over the group (to be maximized)."""
    A = advantages(group.rewards, cfg.std_floor)
    theta = ad.tensor(group.logp_theta)
    ratio = ad.exp(theta - group.logp_old)
    clipped = ad.clip(ratio, 1.0 - cfg.epsilon, 1.0 + cfg.epsilon)
    surrogate = ad.minimum(ratio * A, clipped * A)
    return ad.mean(surrogate - cfg.beta * kl_estimate(theta, group.logp_ref))
