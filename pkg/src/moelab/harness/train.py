"""Training loop shared by every ablation."""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field

import numpy as np

from .. import autodiff as ad
from ..autodiff import BF16_EMULATED, FULL, AdamW
from ..data import SyntheticTask
from ..layers import fp8_linears
from ..model import ModelConfig, ToyLM
from ..moe import BalanceConfig, balance_loss, expert_load_profile, expert_loads, update_bias
from ..mtp import MTPStack, mtp_forward, mtp_loss

BALANCE_MODES = ("aux-free", "seq-aux", "batch-aux", "none")


@dataclass
class TrainConfig:
    steps: int = 1000
    batch: int = 8
    lr: float = 3e-3
    warmup_frac: float = 0.02
    decay_start_frac: float = 0.8
    final_lr_frac: float = 0.1
    balance: str = "aux-free"
    alpha: float = 1e-4
    gamma: float = 1e-3
    # gamma is switched off for the tail of training
    gamma_off_frac: float = 0.97
    mtp_depth: int = 0
    lam_high: float = 0.3
    lam_low: float = 0.1
    lam_switch_frac: float = 0.68
    fp8: bool = False
    bf16_moments: bool = False
    seed: int = 0
    data_seed: int = 1
    record_every: int = 10
    val_batches: int = 8

    def __post_init__(self):
        if self.balance not in BALANCE_MODES:
            raise ValueError(f"balance must be one of {BALANCE_MODES}")
        if self.steps < 1 or self.batch < 1:
            raise ValueError("steps and batch must be positive")

    def lr_at(self, step: int) -> float:
        """Linear warmup, constant, then cosine decay to ``final_lr_frac``."""
        f = step / self.steps
        if f < self.warmup_frac:
            return self.lr * (step + 1) / max(1, round(self.warmup_frac * self.steps))
        if f < self.decay_start_frac:
            return self.lr
        t = (f - self.decay_start_frac) / (1 - self.decay_start_frac)
        lo = self.final_lr_frac
        return self.lr * (lo + (1 - lo) * 0.5 * (1 + math.cos(math.pi * t)))

    def lam_at(self, step: int) -> float:
        return self.lam_high if step / self.steps < self.lam_switch_frac else self.lam_low

    def gamma_at(self, step: int) -> float:
        return self.gamma if step / self.steps < self.gamma_off_frac else 0.0


@dataclass
class RunResult:
    records: list
    val_loss: float
    specialization: float
    load_profile: list
    final_window_load: float
    fingerprint: str
    model: ToyLM = field(repr=False)
    stack: MTPStack | None = field(default=None, repr=False)


def _aux(decisions, tcfg: TrainConfig, mcfg: ModelConfig, batch: int):
    if tcfg.balance not in ("seq-aux", "batch-aux"):
        return None
    bal = BalanceConfig(tcfg.alpha, "sequence" if tcfg.balance == "seq-aux" else "batch")
    ecfg = mcfg.experts()
    total = None
    for dec in decisions:
        s = ad.reshape(dec.affinities, (batch, -1, ecfg.N_r))
        sel = dec.selected.reshape(batch, -1, ecfg.K_r)
        term = balance_loss(s, sel, ecfg, bal)
        total = term if total is None else total + term
    return total


def max_relative_load(decisions, N_r: int) -> float:
    return float(max(expert_load_profile(expert_loads(d.selected, N_r)).max() for d in decisions))


def evaluate(model: ToyLM, task: SyntheticTask, tcfg: TrainConfig, stack=None):
    """Validation loss plus the per-domain specialization score.

    Specialization is the maximum relative expert load among one domain's
    tokens, averaged over domains and MoE layers.
    """
    rng = np.random.default_rng(tcfg.data_seed + 7919)
    mcfg = model.cfg
    losses = []
    counts = np.zeros((mcfg.n_layers, task.cfg.domains, mcfg.N_r))
    with ad.no_grad(), fp8_linears(tcfg.fp8):
        for _ in range(tcfg.val_batches):
            x, dom = task.sample(tcfg.batch, rng)
            out = model.forward(x[:, :-1], use_bias=True)
            losses.append(ad.cross_entropy(out.logits, x[:, 1:]).item())
            tok_dom = np.repeat(dom, x.shape[1] - 1)
            for li, dec in enumerate(out.decisions):
                for k in range(task.cfg.domains):
                    counts[li, k] += expert_loads(dec.selected[tok_dom == k], mcfg.N_r)
    spec = np.mean([[expert_load_profile(c).max() for c in layer if c.sum() > 0] for layer in counts])
    profile = [expert_load_profile(layer.sum(axis=0)).tolist() for layer in counts]
    return float(np.mean(losses)), float(spec), profile


def train(mcfg: ModelConfig, task: SyntheticTask, tcfg: TrainConfig, progress=None) -> RunResult:
    model = ToyLM.init(mcfg, tcfg.seed)
    for r in model.routers:
        r.gamma = tcfg.gamma
    stack = MTPStack.init(model, tcfg.mtp_depth, tcfg.lam_high, seed=tcfg.seed + 1) if tcfg.mtp_depth else None
    params = model.parameters() + (stack.parameters() if stack else [])
    opt = AdamW(params, tcfg.lr, moment_precision=BF16_EMULATED if tcfg.bf16_moments else FULL)
    rng = np.random.default_rng(tcfg.data_seed)
    use_bias = tcfg.balance == "aux-free"
    digest = hashlib.sha256()
    for p in model.parameters():
        digest.update(p.data.tobytes())
    records = []
    window_from = int(0.9 * tcfg.steps)
    window = np.zeros((mcfg.n_layers, mcfg.N_r))
    for step in range(tcfg.steps):
        x, _ = task.sample(tcfg.batch, rng)
        if step == 0:
            digest.update(x.tobytes())
        with fp8_linears(tcfg.fp8):
            out = model.forward(x[:, :-1], use_bias=use_bias)
            main = ad.cross_entropy(out.logits, x[:, 1:])
            loss = main
            aux = _aux(out.decisions, tcfg, mcfg, tcfg.batch)
            if aux is not None:
                loss = loss + aux
            mtp_total = None
            if stack is not None:
                stack.lam = tcfg.lam_at(step)
                _, mtp_total = mtp_loss(mtp_forward(out.hidden, x, stack), x, stack)
                loss = loss + mtp_total
        if step >= window_from:
            for li, dec in enumerate(out.decisions):
                window[li] += expert_loads(dec.selected, mcfg.N_r)
        grads = ad.backward(loss)
        opt.step(grads, tcfg.lr_at(step))
        if use_bias:
            for r, dec in zip(model.routers, out.decisions):
                r.gamma = tcfg.gamma_at(step)
                update_bias(expert_loads(dec.selected, mcfg.N_r), r)
        if step % tcfg.record_every == 0 or step == tcfg.steps - 1:
            rec = {"step": step, "loss": main.item(), "max_relative_load": max_relative_load(out.decisions, mcfg.N_r)}
            if mtp_total is not None:
                rec["mtp_loss"] = mtp_total.item()
            records.append(rec)
            if progress:
                progress(rec)
    val, spec, profile = evaluate(model, task, tcfg, stack)
    final_load = float(max(expert_load_profile(w).max() for w in window))
    return RunResult(records, val, spec, profile, final_load, digest.hexdigest(), model, stack)
