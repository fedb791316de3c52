"""Switchable load-group graph: radial topology candidates and encodings.

A feeder is a set of load groups (LGs) joined by remotely switched ties. A
valid operating topology energizes a subset of LGs containing the grid-forming
source, with the closed switches forming a tree over exactly that subset (no
loops, nothing energized off-tree). Candidates are enumerated exhaustively and
exposed to the scheduler either as a pick-one candidate list with LG/switch
mapping matrices, or through a conventional parent-child spanning-tree
encoding for comparison runs.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .milp import BINARY, CONTINUOUS, Model, lin_sum


class TopologyError(ValueError):
    pass


@dataclass(frozen=True)
class Switch:
    id: str
    lg_from: int
    lg_to: int


@dataclass
class FeederGraph:
    lgs: list[int]
    switches: list[Switch]
    source_lg: int

    def __post_init__(self):
        if len(set(self.lgs)) != len(self.lgs):
            raise TopologyError("duplicate LG ids")
        if self.source_lg not in self.lgs:
            raise TopologyError(f"source LG {self.source_lg} not among LGs {self.lgs}")
        ids = set()
        for sw in self.switches:
            if sw.id in ids:
                raise TopologyError(f"duplicate switch id {sw.id!r}")
            ids.add(sw.id)
            if sw.lg_from not in self.lgs or sw.lg_to not in self.lgs:
                raise TopologyError(f"switch {sw.id!r} references unknown LG")
        if not self._all_closed_connected():
            raise TopologyError("graph is disconnected even with all switches closed")

    def _all_closed_connected(self) -> bool:
        return len(self._reachable(set(range(len(self.switches))))) == len(self.lgs)

    def _reachable(self, closed: set[int]) -> set[int]:
        adj: dict[int, list[int]] = {lg: [] for lg in self.lgs}
        for i in closed:
            sw = self.switches[i]
            adj[sw.lg_from].append(sw.lg_to)
            adj[sw.lg_to].append(sw.lg_from)
        seen = {self.source_lg}
        stack = [self.source_lg]
        while stack:
            u = stack.pop()
            for v in adj[u]:
                if v not in seen:
                    seen.add(v)
                    stack.append(v)
        return seen

    def lg_pos(self, lg: int) -> int:
        return self.lgs.index(lg)


def paper_feeder() -> FeederGraph:
    """The 5-LG / 5-switch demonstration feeder (one tie loop through the
    source group; enumerates to 16 radial candidates)."""
    return FeederGraph(
        lgs=[1, 2, 3, 4, 5],
        switches=[
            Switch("S1", 1, 2),
            Switch("S2", 1, 3),
            Switch("S3", 2, 4),
            Switch("S4", 3, 4),
            Switch("S5", 4, 5),
        ],
        source_lg=1,
    )


@dataclass(frozen=True)
class TopologyCandidate:
    id: int
    switch_states: tuple[bool, ...]   # ordered like graph.switches
    served_lgs: tuple[bool, ...]      # ordered like graph.lgs

    def n_served(self) -> int:
        return sum(self.served_lgs)


@dataclass
class CandidateSet:
    graph: FeederGraph
    candidates: list[TopologyCandidate]
    lg_map: np.ndarray = field(init=False)      # (n_lg, n_cand) 0/1
    switch_map: np.ndarray = field(init=False)  # (n_sw, n_cand) 0/1

    def __post_init__(self):
        if not self.candidates:
            raise TopologyError("empty candidate set")
        n_lg, n_sw = len(self.graph.lgs), len(self.graph.switches)
        self.lg_map = np.zeros((n_lg, len(self.candidates)))
        self.switch_map = np.zeros((n_sw, len(self.candidates)))
        for x, cand in enumerate(self.candidates):
            self.lg_map[:, x] = cand.served_lgs
            self.switch_map[:, x] = cand.switch_states

    def __len__(self) -> int:
        return len(self.candidates)

    def by_id(self, cid: int) -> TopologyCandidate:
        for cand in self.candidates:
            if cand.id == cid:
                return cand
        raise TopologyError(f"no candidate with id {cid}")

    def served_sets(self) -> set[frozenset[int]]:
        return {frozenset(lg for lg, s in zip(self.graph.lgs, cand.served_lgs) if s)
                for cand in self.candidates}

    def to_json(self) -> str:
        doc = {
            "lgs": self.graph.lgs,
            "switches": [[sw.id, sw.lg_from, sw.lg_to] for sw in self.graph.switches],
            "source_lg": self.graph.source_lg,
            "candidates": [
                {"id": c.id,
                 "served_lgs": [lg for lg, s in zip(self.graph.lgs, c.served_lgs) if s],
                 "closed_switches": [sw.id for sw, s in
                                     zip(self.graph.switches, c.switch_states) if s]}
                for c in self.candidates],
        }
        return json.dumps(doc, indent=2)

    @staticmethod
    def from_json(text: str) -> "CandidateSet":
        doc = json.loads(text)
        graph = FeederGraph(
            lgs=list(doc["lgs"]),
            switches=[Switch(s[0], s[1], s[2]) for s in doc["switches"]],
            source_lg=doc["source_lg"],
        )
        cands = []
        for c in doc["candidates"]:
            served = tuple(lg in set(c["served_lgs"]) for lg in graph.lgs)
            closed = tuple(sw.id in set(c["closed_switches"]) for sw in graph.switches)
            cands.append(TopologyCandidate(c["id"], closed, served))
        return CandidateSet(graph, cands)

    def save(self, path) -> None:
        Path(path).write_text(self.to_json())


def enumerate_candidates(graph: FeederGraph) -> CandidateSet:
    """All deduplicated (served set, switch states) pairs whose closed switches
    form a source-rooted tree over exactly the served LGs.  Candidates are
    numbered 1..N ordered by served count, then served pattern, then switch
    pattern, so full-service options sort last."""
    n_sw = len(graph.switches)
    found: set[tuple[tuple[bool, ...], tuple[bool, ...]]] = set()
    for mask in range(1 << n_sw):
        closed = {i for i in range(n_sw) if mask >> i & 1}
        served = graph._reachable(closed)
        # every closed switch must lie inside the served tree
        if any(graph.switches[i].lg_from not in served or
               graph.switches[i].lg_to not in served for i in closed):
            continue
        if len(closed) != len(served) - 1:
            continue  # a loop (or an unreachable closed edge): not radial
        served_t = tuple(lg in served for lg in graph.lgs)
        states_t = tuple(i in closed for i in range(n_sw))
        found.add((served_t, states_t))
    ordered = sorted(found, key=lambda p: (sum(p[0]), p[0], p[1]))
    cands = [TopologyCandidate(i + 1, states, served)
             for i, (served, states) in enumerate(ordered)]
    return CandidateSet(graph, cands)


def filter_candidates(cset: CandidateSet, excluded_ids) -> CandidateSet:
    """Drop candidates by id (keeping the original numbering) and rebuild
    the mapping matrices."""
    excluded = set(int(i) for i in excluded_ids)
    known = {c.id for c in cset.candidates}
    missing = excluded - known
    if missing:
        raise TopologyError(f"unknown candidate ids: {sorted(missing)}")
    remaining = [c for c in cset.candidates if c.id not in excluded]
    if not remaining:
        raise TopologyError("filtering removed every candidate")
    return CandidateSet(cset.graph, remaining)


@dataclass
class TopologyVars:
    """Handles returned by the topology encodings.  ``u_g[t][m]`` /
    ``u_sw[t][s]`` follow graph.lgs / graph.switches order; ``u_topol`` is
    None under the spanning-tree encoding."""

    method: str
    graph: FeederGraph
    u_g: list[list]
    u_sw: list[list]
    u_topol: list[list] | None = None
    candidates: list[TopologyCandidate] | None = None


def add_candidate_constraints(model: Model, cset: CandidateSet, horizon: int,
                              block: str = "topology") -> TopologyVars:
    """Pick-one candidate selection per interval; LG and switch statuses are
    tied to the selection through the mapping matrices (so they need no own
    integrality)."""
    if len(cset) == 0:
        raise TopologyError("empty candidate set")
    graph = cset.graph
    u_topol, u_g, u_sw = [], [], []
    for t in range(horizon):
        u_topol.append([model.add_var(BINARY, name=f"Utopol_{c.id}_{t}")
                        for c in cset.candidates])
        u_g.append([model.add_var(CONTINUOUS, lb=0.0, ub=1.0, name=f"UG_{lg}_{t}")
                    for lg in graph.lgs])
        u_sw.append([model.add_var(CONTINUOUS, lb=0.0, ub=1.0, name=f"USW_{sw.id}_{t}")
                     for sw in graph.switches])
        model.add_constraint(lin_sum(u_topol[t]), "==", 1.0,
                             name=f"topol_pick_{t}", block=block)
        for m, lg in enumerate(graph.lgs):
            expr = lin_sum(cset.lg_map[m, x] * u_topol[t][x] for x in range(len(cset)))
            model.add_constraint(expr - u_g[t][m], "==", 0.0,
                                 name=f"topol_lgmap_{lg}_{t}", block=block)
        for s, sw in enumerate(graph.switches):
            expr = lin_sum(cset.switch_map[s, x] * u_topol[t][x] for x in range(len(cset)))
            model.add_constraint(expr - u_sw[t][s], "==", 0.0,
                                 name=f"topol_swmap_{sw.id}_{t}", block=block)
    return TopologyVars("candidates", graph, u_g, u_sw, u_topol, cset.candidates)


def add_spanning_tree_constraints(model: Model, graph: FeederGraph, horizon: int,
                                  block: str = "topology") -> TopologyVars:
    """Parent-child spanning-tree radiality: every served non-source LG has
    exactly one parent over closed switches, the source has none, and closed
    switches only join served LGs.  Closed count = served count - 1 follows
    from the parent sums."""
    u_g, u_sw = [], []
    src = graph.source_lg
    for t in range(horizon):
        u_g.append([model.add_var(BINARY, name=f"UG_{lg}_{t}") for lg in graph.lgs])
        u_sw.append([model.add_var(BINARY, name=f"USW_{sw.id}_{t}")
                     for sw in graph.switches])
        # source LG always energized (it hosts the grid-forming plant)
        model.add_constraint(u_g[t][graph.lg_pos(src)], "==", 1.0,
                             name=f"st_source_{t}", block=block)
        parents: dict[int, list] = {lg: [] for lg in graph.lgs}
        for s, sw in enumerate(graph.switches):
            names = []
            for child, parent in ((sw.lg_from, sw.lg_to), (sw.lg_to, sw.lg_from)):
                if child == src:
                    continue  # the source never takes a parent
                beta = model.add_var(CONTINUOUS, lb=0.0, ub=1.0,
                                     name=f"beta_{sw.id}_{child}_{t}")
                parents[child].append(beta)
                names.append(beta)
            model.add_constraint(lin_sum(names) - u_sw[t][s], "==", 0.0,
                                 name=f"st_orient_{sw.id}_{t}", block=block)
            for lg in (sw.lg_from, sw.lg_to):
                model.add_constraint(u_sw[t][s] - u_g[t][graph.lg_pos(lg)], "<=", 0.0,
                                     name=f"st_endp_{sw.id}_{lg}_{t}", block=block)
        for lg in graph.lgs:
            if lg == src:
                continue
            model.add_constraint(lin_sum(parents[lg]) - u_g[t][graph.lg_pos(lg)],
                                 "==", 0.0, name=f"st_parent_{lg}_{t}", block=block)
    return TopologyVars("spanning_tree", graph, u_g, u_sw)


def count_switching(switch_states) -> int:
    """Number of switch-state changes between consecutive intervals.
    ``switch_states``: array-like of shape (n_intervals, n_switches)."""
    states = np.asarray(switch_states, dtype=bool)
    if states.ndim != 2 or states.shape[0] < 2:
        return 0
    return int(np.sum(states[1:] != states[:-1]))


def format_catalog(cset: CandidateSet) -> str:
    """Text rendition of the candidate catalog (one line per option)."""
    lines = [f"{len(cset)} radial topology candidates "
             f"(source LG {cset.graph.source_lg})"]
    for c in cset.candidates:
        served = [str(lg) for lg, s in zip(cset.graph.lgs, c.served_lgs) if s]
        closed = [sw.id for sw, s in zip(cset.graph.switches, c.switch_states) if s]
        lines.append(f"option {c.id:>3}: serves LGs {{{','.join(served)}}} "
                     f"via closed {{{','.join(closed) if closed else '-'}}}")
    return "\n".join(lines)
