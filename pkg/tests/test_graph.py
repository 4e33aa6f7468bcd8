import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from builders import random_graph, random_snapshot
from qoslb.graph import (STAY, Action, RanGraph, apply_action, build_graph, detect_cell_edge,
                         extract_subgraph, feasible_actions, select_subgraph_cells)
from qoslb.radio import mcs_index


class TestCellEdge:
    def test_examples(self):
        assert detect_cell_edge(-90, [-86])
        assert not detect_cell_edge(-80, [-100])
        assert detect_cell_edge(-90, [-95])
        assert not detect_cell_edge(-90, [-95.0001])

    def test_no_other_cell(self):
        assert not detect_cell_edge(-90, [])


class TestBuildGraph:
    def test_no_edge_ues_no_cell_edges(self):
        snap = random_snapshot(np.random.default_rng(0), 6, 4)
        snap.rsrp[:] = -130.0
        snap.rsrp[np.arange(6), snap.serving] = -80.0
        g = build_graph(snap)
        assert len(g.edges_cc) == 0

    def test_single_edge_ue(self):
        snap = random_snapshot(np.random.default_rng(1), 1, 3)
        snap.rsrp[0] = [-100.0, -102.0, -125.0]
        snap.serving[:] = 0
        g = build_graph(snap)
        assert g.edges_cc.tolist() == [[0, 1]]

    @settings(max_examples=60, deadline=None)
    @given(st.integers(0, 2**31 - 1))
    def test_cell_edges_match_pairwise_oracle(self, seed):
        snap = random_snapshot(np.random.default_rng(seed), 15, 6)
        g = build_graph(snap)
        expected = set()
        for u in range(15):
            own = snap.rsrp[u, snap.serving[u]]
            best_other = max(snap.rsrp[u, k] for k in range(6) if k != snap.serving[u])
            if own - best_other > 5.0:
                continue
            for a, b in itertools.combinations(range(6), 2):
                if snap.rsrp[u, a] >= -120 and snap.rsrp[u, b] >= -120:
                    expected.add((a, b))
        assert {tuple(e) for e in g.edges_cc.tolist()} == expected

    def test_layout(self):
        snap = random_snapshot(np.random.default_rng(2), 7, 4)
        g = build_graph(snap)
        assert g.x_ue.shape == (7, 5) and g.x_cell.shape == (4, 2)
        assert g.num_nodes == 11
        assert len(g.edges_uc) == 7
        assert np.all((g.x_ue >= 0) & np.isfinite(g.x_ue))

    def test_missing_serving_cell(self):
        snap = random_snapshot(np.random.default_rng(3), 4, 4)
        snap.serving[1] = -1
        with pytest.raises(ValueError):
            build_graph(snap)


def feasibility_oracle(snap):
    """Every (u, k) pair passing the cell-edge, load, MCS and RSRP tests."""
    sinr = snap.wideband_sinr_db()
    out = set()
    for u in range(snap.num_ues):
        s = snap.serving[u]
        others = [snap.rsrp[u, k] for k in range(snap.num_cells) if k != s]
        if snap.rsrp[u, s] - max(others) > 5.0:
            continue
        for k in range(snap.num_cells):
            if (k != s and snap.utilization[k] < snap.utilization[s]
                    and mcs_index(sinr[u, k]) >= 0 and snap.rsrp[u, k] >= -120.0):
                out.add((u, s, k))
    return out


class TestFeasibility:
    def test_equal_load_only_stay(self):
        snap = random_snapshot(np.random.default_rng(4), 10, 6)
        snap.utilization[:] = 0.5
        actions, sets = feasible_actions(build_graph(snap), snap)
        assert actions == [STAY]
        assert sets.target_cells == [] and sets.target_ues == []

    def test_rsrp_floor(self):
        snap = random_snapshot(np.random.default_rng(5), 1, 2, num_bands=2)
        snap.rsrp[0] = [-100.0, -121.0]
        snap.signal_mw[:] = 1.0
        snap.serving[:] = 0
        snap.utilization[:] = [0.9, 0.1]
        snap.rsrp[0, 1] = -121.0
        actions, _ = feasible_actions(build_graph(snap), snap, edge_margin_db=50)
        assert actions == [STAY]
        snap.rsrp[0, 1] = -119.0
        actions, _ = feasible_actions(build_graph(snap), snap, edge_margin_db=50)
        assert actions == [STAY, Action(0, 0, 1)]

    @settings(max_examples=80, deadline=None)
    @given(st.integers(0, 2**31 - 1))
    def test_matches_brute_force(self, seed):
        snap = random_snapshot(np.random.default_rng(seed), 12, 6)
        actions, sets = feasible_actions(build_graph(snap), snap)
        assert actions[0] == STAY
        got = {(a.ue, a.source, a.target) for a in actions[1:]}
        assert got == feasibility_oracle(snap)
        assert set(sets.target_ues) <= set(sets.cell_edge_ues)
        assert set(sets.target_cells) == {k for _, _, k in got}


class TestApplyAction:
    def test_stay_identity(self):
        g = random_graph(np.random.default_rng(0))
        assert apply_action(g, STAY) is g

    def test_round_trip(self):
        g = random_graph(np.random.default_rng(1), max_nodes=12, min_cells=3)
        u = int(g.ue_ids[0])
        src = int(g.cell_ids[g.serving[0]])
        dst = next(int(c) for c in g.cell_ids if c != src)
        h = apply_action(g, Action(u, src, dst))
        assert len(h.edges_uc) == g.num_ues
        assert h.num_nodes == g.num_nodes
        assert np.array_equal(h.edges_cc, g.edges_cc) and np.array_equal(h.x_ue, g.x_ue)
        back = apply_action(h, Action(u, dst, src))
        assert back.edges_uc == g.edges_uc

    def test_wrong_source(self):
        g = random_graph(np.random.default_rng(2), max_nodes=12, min_cells=3)
        src = int(g.cell_ids[g.serving[0]])
        wrong = next(int(c) for c in g.cell_ids if c != src)
        with pytest.raises(ValueError):
            apply_action(g, Action(int(g.ue_ids[0]), wrong, src))


class TestSubgraph:
    def test_hand_trace(self):
        # A=0, B=1, C=2
        per_ue = {1: [0, 1], 2: [1, 2]}
        assert select_subgraph_cells([0, 1, 2], [1, 2], per_ue) == [0, 1, 2]

    def test_single_target(self):
        assert select_subgraph_cells([3], [0], {0: [3]}) == [3]

    def test_empty(self):
        g = random_graph(np.random.default_rng(3))
        assert extract_subgraph(g, [], [], {}) == ([], None)

    def test_subgraph_contents(self):
        g = random_graph(np.random.default_rng(4), max_nodes=14, min_cells=4)
        u = int(g.ue_ids[0])
        src = int(g.cell_ids[g.serving[0]])
        targets = [int(c) for c in g.cell_ids if c != src][:2]
        chosen, sub = extract_subgraph(g, targets, [u], {u: targets})
        assert chosen == sorted(targets)
        assert set(sub.cell_ids.tolist()) == set(targets) | {src}
        assert u in sub.ue_ids.tolist()
        for i, ue in enumerate(sub.ue_ids):
            assert int(sub.cell_ids[sub.serving[i]]) == int(g.cell_ids[g.serving[g.ue_index(ue)]])


class TestSerialization:
    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 2**31 - 1))
    def test_round_trip(self, seed):
        g = random_graph(np.random.default_rng(seed), max_nodes=12)
        assert RanGraph.from_json(g.to_json()).same_as(g)
        assert RanGraph.from_dict(g.to_dict()).same_as(g)

    def test_rejects_bad_serving(self):
        with pytest.raises(ValueError):
            RanGraph(ue_ids=np.arange(1), cell_ids=np.arange(2), serving=np.array([5]),
                     edges_cc=np.zeros((0, 2), dtype=np.int64), x_ue=np.zeros((1, 5)),
                     x_cell=np.zeros((2, 2)))
