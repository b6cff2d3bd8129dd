import itertools

import numpy as np
import pytest

from moelab.comm import (
    ClusterTopology, block_placement, effective_capacity, placement_report, plan_dispatch, select_redundant,
    traffic_report,
)


def test_capacity_examples():
    per, top = effective_capacity(ClusterTopology(8), 4)
    assert per == pytest.approx(3.2) and top == 13
    assert effective_capacity(ClusterTopology(8, ib_bandwidth=50, nvlink_bandwidth=50), 4) == (1.0, 4)
    assert effective_capacity(ClusterTopology(8, ib_bandwidth=50, nvlink_bandwidth=100), 2) == (2.0, 4)
    # 2.5 rounds up, not to even
    assert effective_capacity(ClusterTopology(2, ib_bandwidth=2, nvlink_bandwidth=5), 1)[1] == 3
    with pytest.raises(ValueError):
        effective_capacity(ClusterTopology(8), 0)
    with pytest.raises(ValueError):
        ClusterTopology(8, ib_bandwidth=0)


def test_block_placement():
    topo = ClusterTopology(2, gpus_per_node=2)
    assert block_placement(8, topo) == [(0, 0), (0, 0), (0, 1), (0, 1), (1, 0), (1, 0), (1, 1), (1, 1)]
    assert block_placement(3, topo) == [(0, 0), (0, 1), (1, 0)]


def test_local_targets_use_no_ib():
    topo = ClusterTopology(4, gpus_per_node=4)
    place = block_placement(16, topo)
    p = plan_dispatch([0, 1, 3], place, topo, (0, 2))
    assert p.remote_nodes == 0 and len(p.nvlink) == 3


def test_even_spread_over_four_remote_nodes():
    topo = ClusterTopology(8, gpus_per_node=8)
    place = block_placement(256, topo)
    experts = [32 * n + k for n in (1, 3, 5, 7) for k in (0, 9)]
    p = plan_dispatch(experts, place, topo, (0, 5))
    assert p.remote_nodes == 4 and len(p.nvlink) == 8
    # IB lands on the source's in-node index
    assert {hop for _, hop in p.ib} == {(n, 5) for n in (1, 3, 5, 7)}
    assert all(src == (0, 5) for src, _ in p.ib)


def test_node_limit_violation():
    topo = ClusterTopology(8)
    place = block_placement(64, topo)
    with pytest.raises(ValueError):
        plan_dispatch([0, 8, 16, 24, 32], place, topo, (0, 0), M=4)


def test_ib_per_token_never_exceeds_m():
    rng = np.random.default_rng(0)
    topo = ClusterTopology(8)
    place = block_placement(256, topo)
    routings, sources = [], []
    for _ in range(2000):
        nodes = rng.choice(8, rng.integers(1, 5), replace=False)
        pool = [e for e in range(256) if place[e][0] in nodes]
        routings.append(list(rng.choice(pool, 8, replace=False)))
        sources.append((int(rng.integers(8)), int(rng.integers(8))))
    for experts, src in zip(routings, sources):
        p = plan_dispatch(experts, place, topo, src)
        remote = {place[e][0] for e in experts} - {src[0]}
        assert p.remote_nodes == len(remote) <= 4
    rep = traffic_report(routings, place, topo, sources)
    assert rep["max_ib_per_token"] <= 4 and rep["nvlink_deliveries"] == 8 * 2000


def brute_force_max_load(loads, R, topo, place):
    """Try every in-node gpu for each duplicate of the R busiest experts."""
    chosen = sorted(range(len(loads)), key=lambda e: (-loads[e], e))[:R]
    best = np.inf
    for combo in itertools.product(range(topo.gpus_per_node), repeat=len(chosen)):
        moved = [(place[e][0], g) for e, g in zip(chosen, combo) if g != place[e][1]]
        if len(set(moved)) < len(moved):
            continue
        grid = np.zeros((topo.node_count, topo.gpus_per_node))
        for e, (n, g) in enumerate(place):
            grid[n, g] += loads[e] / 2 if e in chosen else loads[e]
        for e, g in zip(chosen, combo):
            grid[place[e][0], g] += loads[e] / 2
        best = min(best, grid.max())
    return best


SMALL_TOPOS = [(1, 2), (1, 3), (1, 4), (2, 1), (2, 2), (4, 1)]


def test_redundancy_matches_exhaustive_optimum():
    rng = np.random.default_rng(1)
    count = 0
    for nodes, gpn in SMALL_TOPOS:
        topo = ClusterTopology(nodes, gpus_per_node=gpn)
        for n_exp in range(1, 9):
            place = block_placement(n_exp, topo)
            for R in range(0, min(topo.gpu_count, n_exp) + 1):
                for _ in range(6):
                    loads = rng.integers(0, 40, n_exp).astype(float)
                    plan = select_redundant(loads, R, topo, place)
                    assert plan.max_load == pytest.approx(brute_force_max_load(loads, R, topo, place), abs=1e-12)
                    assert plan.max_load <= plan.baseline_max_load
                    np.testing.assert_allclose(plan.gpu_loads.sum(), loads.sum())
                    count += 1
    assert count > 500


def test_uniform_loads_stay_balanced():
    topo = ClusterTopology(4)
    place = block_placement(64, topo)
    for R in (0, 1, 8, 32):
        rep = placement_report(select_redundant(np.full(64, 10.0), R, topo, place))
        assert rep["max_over_mean"] == 1.0


def test_hot_expert_gets_split():
    topo = ClusterTopology(1, gpus_per_node=4)
    place = block_placement(4, topo)
    loads = np.array([100.0, 10, 10, 10])
    plan = select_redundant(loads, 1, topo, place)
    assert len(plan.placement[0]) == 2 and plan.placement[0][0] != plan.placement[0][1]
    assert plan.baseline_max_load == 100 and plan.max_load == 60
    np.testing.assert_array_equal(np.sort(plan.gpu_loads[0]), [10, 10, 50, 60])


def test_prefill_default_one_duplicate_per_gpu():
    topo = ClusterTopology(4)
    place = block_placement(256, topo)
    loads = np.random.default_rng(2).gamma(1.0, 100.0, 256)
    plan = select_redundant(loads, 32, topo, place)
    assert sum(len(h) - 1 for h in plan.placement.values()) == 32
    moved = [h[1] for h in plan.placement.values() if len(h) > 1 and h[1] != h[0]]
    assert len(moved) == len(set(moved))
    assert plan.max_load < plan.baseline_max_load


def test_too_many_duplicates():
    topo = ClusterTopology(1, gpus_per_node=2)
    with pytest.raises(ValueError):
        select_redundant(np.ones(4), 3, topo, block_placement(4, topo))
