"""Small decoder-only MoE language model built from the library pieces."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .mla import MLAConfig, MLAWeights, mla_forward
from .moe import ExpertConfig, FFN, MoELayer, NodeTopology, RoutingDecision


@dataclass(frozen=True)
class ModelConfig:
    vocab: int = 256
    d: int = 64
    n_layers: int = 2
    n_h: int = 4
    d_h: int = 16
    d_c: int = 32
    d_cq: int = 48
    d_hR: int = 8
    N_s: int = 1
    N_r: int = 8
    K_r: int = 2
    d_ff: int = 32
    init_std: float = 0.006
    gamma: float = 0.001

    def mla(self) -> MLAConfig:
        return MLAConfig(self.d, self.n_h, self.d_h, self.d_c, self.d_cq, self.d_hR)

    def experts(self) -> ExpertConfig:
        return ExpertConfig(self.N_s, self.N_r, self.K_r, self.d, self.d_ff)


@dataclass
class Block:
    """Pre-norm block: attention then either an MoE layer or a dense FFN."""

    attn_norm: Tensor
    attn: MLAWeights
    ffn_norm: Tensor
    moe: MoELayer | None = None
    ffn: FFN | None = None

    def parameters(self) -> list[Tensor]:
        ps = [self.attn_norm, self.ffn_norm] + self.attn.parameters()
        if self.moe is not None:
            ps += self.moe.parameters()
        if self.ffn is not None:
            ps += self.ffn.parameters()
        return ps

    def __call__(self, h: Tensor, use_bias: bool = True, topo: NodeTopology | None = None):
        h = h + mla_forward(ad.rmsnorm(h, self.attn_norm), self.attn)
        x = ad.rmsnorm(h, self.ffn_norm)
        if self.ffn is not None:
            return h + self.ffn(x), None
        flat = ad.reshape(x, (-1, x.shape[-1]))
        y, dec = self.moe(flat, use_bias=use_bias, topo=topo, residual=False)
        return h + ad.reshape(y, h.shape), dec


def make_block(mla_cfg: MLAConfig, rng, std: float, moe_cfg: ExpertConfig | None = None,
               d_ff: int = 0, gamma: float = 0.001) -> Block:
    ones = lambda n: Tensor(np.ones(n), True)  # noqa: E731
    attn = MLAWeights.init(mla_cfg, rng, std)
    if moe_cfg is not None:
        return Block(ones(mla_cfg.d), attn, ones(mla_cfg.d), moe=MoELayer.init(moe_cfg, rng, std, gamma))
    return Block(ones(mla_cfg.d), attn, ones(mla_cfg.d), ffn=FFN.init(mla_cfg.d, d_ff, rng, std))


@dataclass
class ForwardOut:
    logits: Tensor
    hidden: Tensor
    decisions: list = field(default_factory=list)


@dataclass
class ToyLM:
    cfg: ModelConfig
    embedding: Tensor
    blocks: list
    final_norm: Tensor
    head: Tensor

    @classmethod
    def init(cls, cfg: ModelConfig, seed: int) -> ToyLM:
        rng = np.random.default_rng(seed)
        std = cfg.init_std
        emb = Tensor(rng.normal(0.0, std, (cfg.vocab, cfg.d)), True)
        blocks = [make_block(cfg.mla(), rng, std, cfg.experts(), gamma=cfg.gamma) for _ in range(cfg.n_layers)]
        head = Tensor(rng.normal(0.0, std, (cfg.vocab, cfg.d)), True)
        return cls(cfg, emb, blocks, Tensor(np.ones(cfg.d), True), head)

    def parameters(self) -> list[Tensor]:
        ps = [self.embedding, self.final_norm, self.head]
        for b in self.blocks:
            ps += b.parameters()
        return ps

    @property
    def routers(self):
        return [b.moe.router for b in self.blocks if b.moe is not None]

    def output_head(self, h) -> Tensor:
        return ad.matmul(ad.rmsnorm(h, self.final_norm), self.head.T)

    def forward(self, tokens, use_bias: bool = True, topo: NodeTopology | None = None) -> ForwardOut:
        """``tokens`` is (B, T) integer; returns logits (B, T, V) and the last hidden state."""
        tokens = np.asarray(tokens)
        h = self.embedding[tokens]
        decisions: list[RoutingDecision] = []
        for b in self.blocks:
            h, dec = b(h, use_bias, topo)
            if dec is not None:
                decisions.append(dec)
        return ForwardOut(self.output_head(h), h, decisions)
