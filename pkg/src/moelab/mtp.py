"""Sequential multi-token prediction modules that share the main model's embedding and head."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .mla import MLAConfig
from .model import Block, make_block

LOG_FLOOR = 1e-30


@dataclass
class MTPModule:
    proj: Tensor  # (d, 2d)
    h_norm: Tensor
    e_norm: Tensor
    block: Block
    out_norm: Tensor

    def parameters(self) -> list[Tensor]:
        return [self.proj, self.h_norm, self.e_norm, self.out_norm] + self.block.parameters()


@dataclass
class MTPStack:
    modules: list
    embedding: Tensor
    head: Tensor
    lam: float = 0.3

    @property
    def D(self) -> int:
        return len(self.modules)

    @classmethod
    def init(cls, model, depth: int = 1, lam: float = 0.3, seed: int = 0,
             n_h: int = 1, d_ff: int | None = None) -> MTPStack:
        """Build ``depth`` modules on top of ``model``, reusing its embedding and head objects."""
        c = model.cfg
        rng = np.random.default_rng(seed)
        mla = MLAConfig(c.d, n_h, c.d // n_h, min(c.d_c, c.d - 1), min(c.d_cq, c.d - 1), c.d_hR)
        mods = []
        for _ in range(depth):
            ones = lambda: Tensor(np.ones(c.d), True)  # noqa: E731
            mods.append(MTPModule(
                Tensor(rng.normal(0.0, c.init_std, (c.d, 2 * c.d)), True),
                ones(), ones(),
                make_block(mla, rng, c.init_std, d_ff=d_ff or 2 * c.d),
                ones(),
            ))
        return cls(mods, model.embedding, model.head, lam)

    def parameters(self) -> list[Tensor]:
        """Parameters owned by the stack (the shared embedding and head are excluded)."""
        return [p for m in self.modules for p in m.parameters()]


@dataclass
class MTPOutputs:
    reps: list
    logits: list

    @property
    def probs(self) -> list[Tensor]:
        return [ad.softmax(z, axis=-1) for z in self.logits]


def mtp_forward(h0, tokens, stack: MTPStack) -> MTPOutputs:
    """Depth-k representations over positions ``1..T-k`` and their next-next-token logits.

    ``h0`` is the main model's last hidden state, (T, d) or (B, T, d).
    ``tokens`` holds at least ``T + 1`` ids along its last axis.
    """
    h = ad.tensor(h0)
    tokens = np.asarray(tokens)
    T = h.shape[-2]
    if tokens.shape[-1] < T + 1:
        raise ValueError(f"need {T + 1} tokens, got {tokens.shape[-1]}")
    if stack.D >= T:
        raise ValueError(f"depth {stack.D} leaves no positions for T={T}")
    reps, logits = [], []
    for k, m in enumerate(stack.modules, start=1):
        prev = h[..., : T - k, :]
        emb = stack.embedding[tokens[..., k:T]]
        cat = ad.concat([ad.rmsnorm(prev, m.h_norm), ad.rmsnorm(emb, m.e_norm)], axis=-1)
        h, _ = m.block(ad.matmul(cat, m.proj.T))
        reps.append(h)
        logits.append(ad.matmul(ad.rmsnorm(h, m.out_norm), stack.head.T))
    return MTPOutputs(reps, logits)


def mtp_loss(outputs: MTPOutputs, tokens, stack: MTPStack):
    """Per-depth cross-entropies normalized by ``T`` and their ``lam / D`` weighted total."""
    tokens = np.asarray(tokens)
    if len(outputs.logits) < stack.D:
        raise ValueError("outputs do not cover every depth")
    losses = []
    for k, z in enumerate(outputs.logits[: stack.D], start=1):
        T = z.shape[-2] + k
        lp = ad.maximum(ad.log_softmax(z, axis=-1), np.log(LOG_FLOOR))
        tgt = tokens[..., k + 1 : T + 1]
        onehot = np.zeros(lp.shape)
        np.put_along_axis(onehot, tgt[..., None], 1.0, axis=-1)
        nll = -ad.tsum(ad.mul(lp, onehot)) * (1.0 / T)
        if lp.ndim == 3:
            nll = nll * (1.0 / lp.shape[0])
        losses.append(nll)
    total = losses[0]
    for x in losses[1:]:
        total = total + x
    return losses, total * (stack.lam / stack.D)


def _draft_logits(h, tokens, stack: MTPStack) -> Tensor:
    # every position of h, including the last, paired with the token that follows it
    m = stack.modules[0]
    T = h.shape[-2]
    emb = stack.embedding[tokens[..., 1 : T + 1]]
    cat = ad.concat([ad.rmsnorm(h, m.h_norm), ad.rmsnorm(emb, m.e_norm)], axis=-1)
    z, _ = m.block(ad.matmul(cat, m.proj.T))
    return ad.matmul(ad.rmsnorm(z, m.out_norm), stack.head.T)


def speculative_acceptance(model, stack: MTPStack, prompts, length: int) -> float:
    """Share of steps where the depth-1 draft equals the next greedy token of the main model."""
    if len(prompts) == 0:
        raise ValueError("no prompts")
    hits = total = 0
    with ad.no_grad():
        for prompt in prompts:
            seq = list(prompt)
            draft = None
            for _ in range(length):
                out = model.forward(np.array(seq)[None])
                nxt = int(out.logits.data[0, -1].argmax())
                if draft is not None:
                    hits += int(draft == nxt)
                    total += 1
                seq.append(nxt)
                draft = int(_draft_logits(out.hidden, np.array(seq)[None], stack).data[0, -1].argmax())
    return hits / total if total else 0.0
