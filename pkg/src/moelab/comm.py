"""Cross-node dispatch accounting and redundant expert placement."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class ClusterTopology:
    node_count: int
    gpus_per_node: int = 8
    ib_bandwidth: float = 50.0
    nvlink_bandwidth: float = 160.0

    def __post_init__(self):
        if self.ib_bandwidth <= 0 or self.nvlink_bandwidth <= 0:
            raise ValueError("bandwidths must be positive")
        if self.node_count < 1 or self.gpus_per_node < 1:
            raise ValueError("need at least one node and one gpu per node")

    @property
    def gpu_count(self) -> int:
        return self.node_count * self.gpus_per_node


def block_placement(n_experts: int, topo: ClusterTopology) -> list:
    """Expert ``i`` on ``(node, local_gpu)``; consecutive experts share a gpu."""
    per = math.ceil(n_experts / topo.gpu_count)
    return [divmod(i // per, topo.gpus_per_node) for i in range(n_experts)]


@dataclass
class DispatchPlan:
    source: tuple
    ib: list = field(default_factory=list)
    nvlink: list = field(default_factory=list)

    @property
    def remote_nodes(self) -> int:
        return len(self.ib)


def plan_dispatch(experts, placement, topo: ClusterTopology, source: tuple, M: int = 4) -> DispatchPlan:
    """One IB hop per remote node to the gpu with the source's local index, then NVLink fan-out."""
    src_node, src_gpu = source
    by_node: dict = {}
    for e in experts:
        node, gpu = placement[e]
        by_node.setdefault(node, []).append((node, gpu))
    if len(by_node) > M:
        raise ValueError(f"token touches {len(by_node)} nodes, limit is {M}")
    plan = DispatchPlan(tuple(source))
    for node in sorted(by_node):
        hop = (node, src_gpu)
        if node != src_node:
            plan.ib.append(((src_node, src_gpu), hop))
        for target in by_node[node]:
            plan.nvlink.append((hop, target))
    return plan


def effective_capacity(topo: ClusterTopology, M: int) -> tuple[float, int]:
    """Experts reachable per node for the IB cost of one, and the per-token maximum."""
    if M < 1:
        raise ValueError("M must be at least 1")
    per_node = topo.nvlink_bandwidth / topo.ib_bandwidth
    # round half up; the epsilon absorbs binary noise such as 4 * 3.2
    return per_node, math.floor(M * per_node + 0.5 + 1e-9)


@dataclass
class RedundancyPlan:
    placement: dict
    gpu_loads: np.ndarray
    max_load: float
    baseline_max_load: float


def _gpu_loads(loads, placement: dict, topo: ClusterTopology) -> np.ndarray:
    out = np.zeros((topo.node_count, topo.gpus_per_node))
    for e, hosts in placement.items():
        for node, gpu in hosts:
            out[node, gpu] += loads[e] / len(hosts)
    return out


def _choose(loads, R: int) -> list:
    order = sorted(range(len(loads)), key=lambda e: (-loads[e], e))
    return order[:R]


def _check_capacity(R: int, topo: ClusterTopology) -> None:
    if R > topo.gpu_count:
        raise ValueError("more redundant experts than gpus")


def _refine_node(loads, chosen, own, cur, start, start_max):
    """Depth-first search for a strictly lower node max than the greedy start."""
    order = sorted(range(len(chosen)), key=lambda i: (-loads[chosen[i]], chosen[i]))
    best = [start_max, list(start)]
    pick = [0] * len(chosen)
    taken = np.zeros(cur.shape[0], dtype=bool)

    def dfs(k):
        if k == len(order):
            top = cur.max()
            if top < best[0]:
                best[0], best[1] = top, list(pick)
            return
        i = order[k]
        half = loads[chosen[i]] / 2
        for g in sorted(range(cur.shape[0]), key=lambda g: (cur[g], g)):
            if g != own[i] and taken[g]:
                continue
            if cur[g] + half >= best[0]:
                break
            cur[g] += half
            taken[g] |= g != own[i]
            pick[i] = g
            dfs(k + 1)
            cur[g] -= half
            if g != own[i]:
                taken[g] = False

    dfs(0)
    return best[1]


def select_redundant(loads, R: int, topo: ClusterTopology, placement) -> RedundancyPlan:
    """Duplicate the ``R`` busiest experts inside their own nodes.

    Each duplicate takes half its expert's load and sits on a gpu of the
    original's node; a gpu takes at most one duplicate, except that a
    duplicate may share the original's gpu, where it changes nothing. Busiest
    first, each duplicate goes to the lightest allowed gpu if that beats
    leaving it with the original. A depth-first search then looks for a lower
    max per node. Keeping every duplicate with its original is always
    allowed, so the max gpu load never grows.
    """
    loads = np.asarray(loads, dtype=np.float64)
    chosen = _choose(loads, R)
    _check_capacity(R, topo)
    hosts = {e: [tuple(placement[e])] for e in range(len(loads))}
    current = _gpu_loads(loads, hosts, topo)
    baseline = current.max()
    # greedy pass
    target = {}
    taken = np.zeros((topo.node_count, topo.gpus_per_node), dtype=bool)
    for e in chosen:
        node, own = placement[e]
        half = loads[e] / 2
        free = np.nonzero(~taken[node])[0]
        free = free[free != own]
        target[e] = own
        if free.size:
            g = int(free[np.argmin(current[node, free])])
            if current[node, g] + half < current[node, own]:
                target[e] = g
                taken[node, g] = True
                current[node, own] -= half
                current[node, g] += half
    # exact refinement, one node at a time
    for node in range(topo.node_count):
        mine = [e for e in chosen if placement[e][0] == node]
        if not mine:
            continue
        cur = current[node].copy()
        for e in mine:
            cur[target[e]] -= loads[e] / 2
        own = [placement[e][1] for e in mine]
        picks = _refine_node(loads, mine, own, cur, [target[e] for e in mine], current[node].max())
        for e, g in zip(mine, picks):
            target[e] = g
            cur[g] += loads[e] / 2
        current[node] = cur
    for e in chosen:
        hosts[e].append((placement[e][0], target[e]))
    return RedundancyPlan(hosts, current, float(current.max()), float(baseline))


def exhaustive_redundant_max_load(loads, R: int, topo: ClusterTopology, placement) -> float:
    """Best achievable max gpu load for the same duplicated set, by enumeration."""
    import itertools

    loads = np.asarray(loads, dtype=np.float64)
    chosen = _choose(loads, R)
    _check_capacity(R, topo)
    base = np.zeros((topo.node_count, topo.gpus_per_node))
    for e, (node, gpu) in enumerate(placement):
        base[node, gpu] += loads[e] / 2 if e in chosen else loads[e]
    options = [[(placement[e][0], g) for g in range(topo.gpus_per_node)] for e in chosen]
    best = math.inf
    for combo in itertools.product(*options):
        moved = [c for e, c in zip(chosen, combo) if c != tuple(placement[e])]
        if len(set(moved)) < len(moved):
            continue
        cur = base.copy()
        for e, (node, gpu) in zip(chosen, combo):
            cur[node, gpu] += loads[e] / 2
        best = min(best, cur.max())
    return float(best)


def placement_report(plan: RedundancyPlan) -> dict:
    """JSON-ready summary of a redundancy plan."""
    loads = plan.gpu_loads
    return {
        "placement": {str(e): [list(h) for h in hs] for e, hs in plan.placement.items()},
        "gpu_loads": loads.tolist(),
        "max_load": plan.max_load,
        "baseline_max_load": plan.baseline_max_load,
        "max_over_mean": float(loads.max() / loads.mean()) if loads.mean() > 0 else 1.0,
    }


def traffic_report(routings, placement, topo: ClusterTopology, sources, M: int = 4) -> dict:
    """Totals over many tokens: IB sends, NVLink deliveries and the worst single token."""
    ib = nv = worst = 0
    for experts, src in zip(routings, sources):
        p = plan_dispatch(experts, placement, topo, src, M)
        ib += len(p.ib)
        nv += len(p.nvlink)
        worst = max(worst, len(p.ib))
    return {"tokens": len(routings), "ib_transfers": ib, "nvlink_deliveries": nv, "max_ib_per_token": worst, "M": M}
