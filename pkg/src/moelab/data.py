"""Synthetic sequence task with disjoint token domains.

The vocabulary is split into equal domains. Each sequence stays inside one
domain and follows that domain's fixed permutation, except that with
probability ``noise`` the next token is drawn uniformly from the domain.
A router that sends each domain to its own experts can fit the task, which
makes expert specialization measurable.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class TaskConfig:
    vocab: int = 256
    domains: int = 4
    seq_len: int = 64
    noise: float = 0.2
    seed: int = 0

    def __post_init__(self):
        if self.vocab % self.domains:
            raise ValueError("vocab must split evenly into domains")


class SyntheticTask:
    def __init__(self, cfg: TaskConfig):
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed)
        self.width = cfg.vocab // cfg.domains
        self.perms = np.stack([rng.permutation(self.width) for _ in range(cfg.domains)])

    def domain_of(self, tokens) -> np.ndarray:
        return np.asarray(tokens) // self.width

    def sample(self, batch: int, rng: np.random.Generator, length: int | None = None):
        """Return ``(tokens, domains)``; tokens has ``length + 1`` columns (inputs plus final target)."""
        n = (length or self.cfg.seq_len) + 1
        dom = rng.integers(0, self.cfg.domains, batch)
        x = np.empty((batch, n), dtype=np.int64)
        x[:, 0] = rng.integers(0, self.width, batch)
        jump = rng.random((batch, n)) < self.cfg.noise
        rand = rng.integers(0, self.width, (batch, n))
        for i in range(1, n):
            nxt = self.perms[dom, x[:, i - 1]]
            x[:, i] = np.where(jump[:, i], rand[:, i], nxt)
        return x + (dom * self.width)[:, None], dom

    def entropy_floor(self) -> float:
        """Per-token cross-entropy of the true next-token distribution (nats)."""
        w, p = self.width, self.cfg.noise
        hit = 1 - p + p / w
        miss = p / w
        return float(-(hit * np.log(hit) + (w - 1) * miss * np.log(miss))) if p > 0 else 0.0
