import itertools

import networkx as nx
import numpy as np
import pytest

from microuc import milp
from microuc.milp import Model, lin_sum
from microuc.topology import (
    CandidateSet,
    FeederGraph,
    Switch,
    TopologyError,
    add_candidate_constraints,
    add_spanning_tree_constraints,
    count_switching,
    enumerate_candidates,
    filter_candidates,
    format_catalog,
    paper_feeder,
)


def test_paper_feeder_has_sixteen_candidates():
    cset = enumerate_candidates(paper_feeder())
    assert len(cset) == 16
    # full-service options sort last; the demo loop admits four of them
    full = [c for c in cset.candidates if c.n_served() == 5]
    assert [c.id for c in full] == [13, 14, 15, 16]


def test_candidates_pass_independent_graph_check():
    graph = paper_feeder()
    cset = enumerate_candidates(graph)
    for cand in cset.candidates:
        served = {lg for lg, s in zip(graph.lgs, cand.served_lgs) if s}
        g = nx.Graph()
        g.add_nodes_from(served)
        for sw, closed in zip(graph.switches, cand.switch_states):
            if closed:
                assert sw.lg_from in served and sw.lg_to in served
                g.add_edge(sw.lg_from, sw.lg_to)
        assert graph.source_lg in served
        assert nx.is_connected(g)
        assert nx.is_tree(g)
        assert set(g.nodes) == served


def test_two_lg_feeder_two_candidates():
    graph = FeederGraph([1, 2], [Switch("S1", 1, 2)], source_lg=1)
    cset = enumerate_candidates(graph)
    assert len(cset) == 2
    assert cset.served_sets() == {frozenset({1}), frozenset({1, 2})}


def test_missing_source_rejected():
    with pytest.raises(TopologyError, match="source"):
        FeederGraph([1, 2], [Switch("S1", 1, 2)], source_lg=9)


def test_disconnected_graph_rejected():
    with pytest.raises(TopologyError, match="disconnected"):
        FeederGraph([1, 2, 3], [Switch("S1", 1, 2)], source_lg=1)


def test_mapping_matrices_match_candidates():
    cset = enumerate_candidates(paper_feeder())
    for x, cand in enumerate(cset.candidates):
        assert np.array_equal(cset.lg_map[:, x], np.array(cand.served_lgs, dtype=float))
        assert np.array_equal(cset.switch_map[:, x],
                              np.array(cand.switch_states, dtype=float))


def test_filter_candidates():
    cset = enumerate_candidates(paper_feeder())
    r4 = filter_candidates(cset, [13, 14, 16])
    assert len(r4) == 13
    assert {c.id for c in r4.candidates} == set(range(1, 17)) - {13, 14, 16}
    same = filter_candidates(cset, [])
    assert len(same) == 16
    with pytest.raises(TopologyError, match="every candidate"):
        filter_candidates(cset, [c.id for c in cset.candidates])
    with pytest.raises(TopologyError, match="unknown"):
        filter_candidates(cset, [99])


def test_single_candidate_forced():
    graph = FeederGraph([1, 2], [Switch("S1", 1, 2)], source_lg=1)
    cset = enumerate_candidates(graph)
    full = CandidateSet(graph, [c for c in cset.candidates if c.n_served() == 2])
    m = Model()
    tv = add_candidate_constraints(m, full, horizon=1)
    m.set_objective(milp.LinExpr(), "max")
    sol = milp.solve(m)
    assert sol.status == "optimal"
    assert sol[tv.u_topol[0][0]] == 1.0
    assert sol[tv.u_g[0][0]] == 1.0 and sol[tv.u_g[0][1]] == 1.0
    assert sol[tv.u_sw[0][0]] == 1.0


def test_full_service_selects_an_all_on_option():
    cset = enumerate_candidates(paper_feeder())
    m = Model()
    tv = add_candidate_constraints(m, cset, horizon=1)
    m.set_objective(lin_sum(tv.u_g[0]), "max")
    sol = milp.solve(m)
    assert sol.status == "optimal"
    assert all(sol[u] == 1.0 for u in tv.u_g[0])
    chosen = [c.id for x, c in enumerate(cset.candidates)
              if sol[tv.u_topol[0][x]] == 1.0]
    assert len(chosen) == 1 and chosen[0] in (13, 14, 15, 16)


def test_candidate_selection_matches_enumeration_oracle():
    # random 3-candidate subsets, maximize served load under a capacity cap;
    # compare against brute force over the options
    graph = paper_feeder()
    cset = enumerate_candidates(graph)
    rng = np.random.default_rng(3)
    loads = {lg: float(rng.uniform(50, 150)) for lg in graph.lgs}
    for trial in range(5):
        pick = rng.choice(len(cset.candidates), size=3, replace=False)
        sub = CandidateSet(graph, [cset.candidates[i] for i in pick])
        cap = float(rng.uniform(150, 450))
        m = Model()
        tv = add_candidate_constraints(m, sub, horizon=1)
        served = lin_sum(loads[lg] * tv.u_g[0][i] for i, lg in enumerate(graph.lgs))
        m.add_constraint(served, "<=", cap, name="cap")
        m.set_objective(served, "max")
        sol = milp.solve(m)
        best = max((sum(loads[lg] for lg, s in zip(graph.lgs, c.served_lgs) if s)
                    for c in sub.candidates
                    if sum(loads[lg] for lg, s in zip(graph.lgs, c.served_lgs) if s)
                    <= cap + 1e-9), default=None)
        if best is None:
            assert sol.status == "infeasible"
        else:
            assert sol.objective_value == pytest.approx(best, abs=1e-6)


def _st_feasible_served_sets(graph):
    """All served sets admitted by the spanning-tree encoding (solve a
    feasibility MILP per subset with LG statuses pinned)."""
    feasible = set()
    others = [lg for lg in graph.lgs if lg != graph.source_lg]
    for r in range(len(others) + 1):
        for combo in itertools.combinations(others, r):
            served = frozenset({graph.source_lg, *combo})
            m = Model()
            tv = add_spanning_tree_constraints(m, graph, horizon=1)
            for i, lg in enumerate(graph.lgs):
                m.add_constraint(tv.u_g[0][i], "==", 1.0 if lg in served else 0.0,
                                 name=f"pin_{lg}")
            m.set_objective(milp.LinExpr(), "min")
            if milp.solve(m).status == "optimal":
                feasible.add(served)
    return feasible


def test_spanning_tree_served_sets_equal_candidate_sets():
    graph = paper_feeder()
    cset = enumerate_candidates(graph)
    assert _st_feasible_served_sets(graph) == cset.served_sets()


def test_spanning_tree_source_only_zero_closed():
    graph = paper_feeder()
    m = Model()
    tv = add_spanning_tree_constraints(m, graph, horizon=1)
    for i, lg in enumerate(graph.lgs):
        m.add_constraint(tv.u_g[0][i], "==", 1.0 if lg == graph.source_lg else 0.0,
                         name=f"pin_{lg}")
    m.set_objective(lin_sum(tv.u_sw[0]), "min")
    sol = milp.solve(m)
    assert sol.status == "optimal"
    assert sum(sol[u] for u in tv.u_sw[0]) == 0.0


def test_spanning_tree_all_served_uses_four_switches():
    graph = paper_feeder()
    m = Model()
    tv = add_spanning_tree_constraints(m, graph, horizon=1)
    for i in range(len(graph.lgs)):
        m.add_constraint(tv.u_g[0][i], "==", 1.0, name=f"pin_{i}")
    m.set_objective(milp.LinExpr(), "min")
    sol = milp.solve(m)
    assert sol.status == "optimal"
    assert sum(sol[u] for u in tv.u_sw[0]) == pytest.approx(4.0, abs=1e-9)


def test_count_switching():
    assert count_switching(np.zeros((4, 5), dtype=bool)) == 0
    states = np.zeros((4, 5), dtype=bool)
    states[1, 2] = True
    states[3, 2] = True
    assert count_switching(states) == 3
    assert count_switching(np.zeros((1, 5), dtype=bool)) == 0


def test_catalog_and_serialization_round_trip():
    cset = enumerate_candidates(paper_feeder())
    text = format_catalog(cset)
    assert text.splitlines()[0].startswith("16 radial")
    assert len(text.splitlines()) == 17
    back = CandidateSet.from_json(cset.to_json())
    assert len(back) == len(cset)
    assert back.served_sets() == cset.served_sets()
    assert np.array_equal(back.switch_map, cset.switch_map)
