"""Fine-grained mixture-of-experts layer with bias-based load balancing."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .layers import linear


@dataclass(frozen=True)
class ExpertConfig:
    N_s: int
    N_r: int
    K_r: int
    d: int
    d_ff: int

    def __post_init__(self):
        if not 1 <= self.K_r <= self.N_r:
            raise ValueError("need 1 <= K_r <= N_r")
        if self.N_s < 0 or self.d < 1 or self.d_ff < 1:
            raise ValueError("bad expert dims")


@dataclass
class RouterState:
    centroids: Tensor
    biases: np.ndarray
    gamma: float = 0.001

    @classmethod
    def init(cls, cfg: ExpertConfig, rng, std: float = 0.006, gamma: float = 0.001) -> RouterState:
        return cls(Tensor(rng.normal(0.0, std, (cfg.N_r, cfg.d)), True), np.zeros(cfg.N_r), gamma)


@dataclass(frozen=True)
class BalanceConfig:
    alpha: float = 0.0001
    scope: str = "sequence"

    def __post_init__(self):
        if self.alpha < 0:
            raise ValueError("alpha must be nonnegative")
        if self.scope not in ("sequence", "batch"):
            raise ValueError(f"unknown balance scope {self.scope!r}")


@dataclass(frozen=True)
class NodeTopology:
    expert_node: tuple
    M: int = 4

    def __post_init__(self):
        if self.M < 1:
            raise ValueError("M must be at least 1")

    @classmethod
    def uniform(cls, N_r: int, node_count: int, M: int = 4) -> NodeTopology:
        if N_r % node_count:
            raise ValueError("experts must split evenly over nodes")
        per = N_r // node_count
        return cls(tuple(i // per for i in range(N_r)), M)

    @property
    def node_count(self) -> int:
        return max(self.expert_node) + 1


@dataclass
class RoutingDecision:
    """Top-K selection with differentiable gates.

    ``gates`` is a (T, N_r) tensor that is zero off the selected set, so its
    rows sum to one. ``selected`` is (T, K_r), best first.
    """

    selected: np.ndarray
    gates: Tensor
    affinities: Tensor

    @property
    def mask(self) -> np.ndarray:
        m = np.zeros(self.gates.shape, dtype=bool)
        np.put_along_axis(m, self.selected, True, axis=1)
        return m


def affinity(u, state: RouterState) -> Tensor:
    u = ad.tensor(u)
    if u.shape[-1] != state.centroids.shape[1]:
        raise ValueError("token and centroid dims differ")
    return ad.sigmoid(ad.matmul(u, state.centroids.T))


def _topk(scores: np.ndarray, k: int) -> np.ndarray:
    # stable sort on the negated score keeps the lower index first on ties
    return np.argsort(-scores, axis=1, kind="stable")[:, :k]


def _gates(s: Tensor, selected: np.ndarray) -> Tensor:
    mask = np.zeros(s.shape)
    np.put_along_axis(mask, selected, 1.0, axis=1)
    sel = ad.mul(s, mask)
    return ad.div(sel, ad.tsum(sel, axis=1, keepdims=True))


def _rows(s) -> Tensor:
    s = ad.tensor(s)
    if s.ndim == 1:
        s = ad.reshape(s, (1, -1))
    if np.isnan(s.data).any():
        raise ValueError("NaN affinity")
    return s


def route(s, state: RouterState, cfg: ExpertConfig, use_bias: bool = True) -> RoutingDecision:
    """Top-K by ``s + b`` (or ``s``); gate values always come from raw ``s``."""
    s = _rows(s)
    score = s.data + state.biases if use_bias else s.data
    sel = _topk(score, cfg.K_r)
    return RoutingDecision(sel, _gates(s, sel), s)


def node_limited_route(
    s, state: RouterState, cfg: ExpertConfig, topo: NodeTopology, use_bias: bool = True
) -> RoutingDecision:
    """Restrict each token to the ``M`` nodes whose best ``ceil(K_r/M)`` scores sum highest."""
    s = _rows(s)
    score = s.data + state.biases if use_bias else s.data
    nodes = np.asarray(topo.expert_node)
    n_nodes = topo.node_count
    M = min(topo.M, n_nodes)
    per = math.ceil(cfg.K_r / M)
    node_score = np.full((score.shape[0], n_nodes), -np.inf)
    for n in range(n_nodes):
        block = np.sort(score[:, nodes == n], axis=1)[:, ::-1]
        node_score[:, n] = block[:, :per].sum(axis=1)
    keep = _topk(node_score, M)
    allowed = np.zeros_like(score, dtype=bool)
    for j in range(M):
        allowed |= nodes[None, :] == keep[:, j : j + 1]
    if allowed.sum(axis=1).min() < cfg.K_r:
        raise ValueError("chosen nodes host fewer than K_r experts")
    sel = _topk(np.where(allowed, score, -np.inf), cfg.K_r)
    return RoutingDecision(sel, _gates(s, sel), s)


@dataclass
class FFN:
    """SwiGLU feed-forward: ``W_down (silu(W_gate x) * W_up x)``."""

    W_gate: Tensor
    W_up: Tensor
    W_down: Tensor

    @classmethod
    def init(cls, d: int, d_ff: int, rng, std: float = 0.006) -> FFN:
        mk = lambda *s: Tensor(rng.normal(0.0, std, s), True)  # noqa: E731
        return cls(mk(d_ff, d), mk(d_ff, d), mk(d, d_ff))

    def __call__(self, x) -> Tensor:
        a = ad.silu(linear(x, self.W_gate)) * linear(x, self.W_up)
        return linear(a, self.W_down)

    def parameters(self) -> list[Tensor]:
        return [self.W_gate, self.W_up, self.W_down]


@dataclass
class Experts:
    shared: list
    routed: list

    @classmethod
    def init(cls, cfg: ExpertConfig, rng, std: float = 0.006) -> Experts:
        return cls(
            [FFN.init(cfg.d, cfg.d_ff, rng, std) for _ in range(cfg.N_s)],
            [FFN.init(cfg.d, cfg.d_ff, rng, std) for _ in range(cfg.N_r)],
        )

    def parameters(self) -> list[Tensor]:
        return [p for f in self.shared + self.routed for p in f.parameters()]


def moe_forward(
    u, decision: RoutingDecision, experts: Experts, cfg: ExpertConfig, residual: bool = True
) -> Tensor:
    """Residual plus every shared expert plus the gated selected experts.

    Each routed expert only sees the tokens that selected it; nothing is
    dropped. ``residual=False`` leaves out the ``u`` term for callers that
    add their own skip connection.
    """
    u = ad.tensor(u)
    single = u.ndim == 1
    if single:
        u = ad.reshape(u, (1, -1))
    n = u.shape[0]
    sel = decision.selected
    if sel.shape[0] != n or sel.min() < 0 or sel.max() >= len(experts.routed):
        raise ValueError("routing decision does not fit the expert set")
    out = u if residual else ad.Tensor(np.zeros(u.shape))
    for f in experts.shared:
        out = out + f(u)
    for i, f in enumerate(experts.routed):
        rows = np.nonzero((sel == i).any(axis=1))[0]
        if rows.size == 0:
            continue
        y = f(u[rows]) * decision.gates[rows, i : i + 1]
        out = out + ad.scatter_add(y, rows, n)
    return ad.reshape(out, (-1,)) if single else out


def expert_loads(selected: np.ndarray, N_r: int) -> np.ndarray:
    return np.bincount(np.asarray(selected).reshape(-1), minlength=N_r).astype(np.float64)


def update_bias(loads, state: RouterState) -> np.ndarray:
    """Step each bias by ``gamma`` against the sign of its load's deviation from the mean."""
    loads = np.asarray(loads, dtype=np.float64)
    if loads.sum() <= 0:
        raise ValueError("no tokens were routed")
    state.biases = state.biases - state.gamma * np.sign(loads - loads.mean())
    return state.biases


def balance_loss(s, selections, cfg: ExpertConfig, bal: BalanceConfig) -> Tensor:
    """Complementary balance loss ``alpha * sum_i f_i P_i``.

    ``s`` is (T, N_r) for one sequence or (B, T, N_r) for a batch, with
    ``selections`` of matching leading shape and trailing K_r. Sequence
    scope averages the per-sequence losses; batch scope pools all tokens.
    """
    s = ad.tensor(s)
    sel = np.asarray(selections)
    if s.ndim == 2:
        s, sel = ad.reshape(s, (1,) + s.shape), sel[None]
    if bal.scope == "batch":
        s, sel = ad.reshape(s, (1, -1, cfg.N_r)), sel.reshape(1, -1, sel.shape[-1])
    B, T, _ = s.shape
    if T == 0:
        raise ValueError("balance loss needs at least one token")
    counts = np.zeros((B, cfg.N_r))
    for b in range(B):
        counts[b] = np.bincount(sel[b].reshape(-1), minlength=cfg.N_r)
    f = counts * cfg.N_r / (cfg.K_r * T)
    s_norm = ad.div(s, ad.tsum(s, axis=2, keepdims=True))
    P = ad.mean(s_norm, axis=1)
    per_seq = ad.tsum(ad.mul(P, f), axis=1)
    return ad.mean(per_seq) * bal.alpha


def expert_load_profile(loads, cfg: ExpertConfig | None = None) -> np.ndarray:
    """Load per expert divided by the perfectly balanced load (balanced = 1)."""
    loads = np.asarray(loads, dtype=np.float64)
    total = loads.sum()
    if total <= 0:
        raise ValueError("zero total load")
    return loads * loads.size / total


@dataclass
class MoELayer:
    cfg: ExpertConfig
    router: RouterState
    experts: Experts

    @classmethod
    def init(cls, cfg: ExpertConfig, rng, std: float = 0.006, gamma: float = 0.001) -> MoELayer:
        return cls(cfg, RouterState.init(cfg, rng, std, gamma), Experts.init(cfg, rng, std))

    def parameters(self) -> list[Tensor]:
        return [self.router.centroids] + self.experts.parameters()

    def __call__(self, u, use_bias: bool = True, topo: NodeTopology | None = None, residual: bool = True):
        """Returns ``(h', decision)`` for tokens ``u`` of shape (N, d)."""
        s = affinity(u, self.router)
        if topo is None:
            dec = route(s, self.router, self.cfg, use_bias)
        else:
            dec = node_limited_route(s, self.router, self.cfg, topo, use_bias)
        return moe_forward(u, dec, self.experts, self.cfg, residual), dec


def bias_balancing_trace(s, cfg: ExpertConfig, gamma: float, steps: int) -> np.ndarray:
    """Max relative load after each round of route-then-update on fixed affinities.

    Entry 0 is the load before any update. Useful for checking that the
    bias rule alone drives a skewed router toward balance.
    """
    s = np.asarray(s, dtype=np.float64)
    state = RouterState(Tensor(np.zeros((cfg.N_r, 1))), np.zeros(cfg.N_r), gamma)
    out = []
    for _ in range(steps + 1):
        loads = expert_loads(_topk(s + state.biases, cfg.K_r), cfg.N_r)
        out.append(expert_load_profile(loads).max())
        update_bias(loads, state)
    return np.array(out)
