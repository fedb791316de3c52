"""Per-phase linearized power flow on radial node networks.

Node voltages are tracked as squared magnitudes in per-unit; the drop along a
segment is linear in the per-phase active and reactive flows (the usual
branch-flow linearization with losses neglected).  The same tree structure
drives three consumers: constraint generation in the dispatch stage, voltage
evaluation inside the feeder simulator, and standalone diagnostics.

Bases: ``v_base_kv`` is line-to-neutral kV, ``s_base_kva`` is the per-phase
power base. Loads are positive consumption in kW / kvar.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

PHASES = ("a", "b", "c")

V_SOURCE_PU = 1.03
V_MIN_PU = 0.95
V_MAX_PU = 1.05


class NetworkError(ValueError):
    pass


@dataclass(frozen=True)
class NetworkNode:
    id: str
    lg: int
    is_source: bool = False
    critical: bool = False


@dataclass(frozen=True)
class LineSegment:
    id: str
    from_node: str
    to_node: str
    r_ohm: tuple[float, float, float]
    x_ohm: tuple[float, float, float]
    switch_id: str | None = None   # inter-LG tie controlled by this switch

    def __post_init__(self):
        if any(r < 0 for r in self.r_ohm) or any(x < 0 for x in self.x_ohm):
            raise NetworkError(f"segment {self.id!r} has negative impedance")


@dataclass
class NetworkModel:
    nodes: list[NetworkNode]
    segments: list[LineSegment]
    v_base_kv: float = 2.4
    s_base_kva: float = 1000.0
    v_source_pu: float = V_SOURCE_PU
    v_min_pu: float = V_MIN_PU
    v_max_pu: float = V_MAX_PU

    def __post_init__(self):
        ids = [n.id for n in self.nodes]
        if len(set(ids)) != len(ids):
            raise NetworkError("duplicate node ids")
        sources = [n for n in self.nodes if n.is_source]
        if len(sources) != 1:
            raise NetworkError(f"exactly one source node required, found {len(sources)}")
        self.source_node = sources[0].id
        self._by_id = {n.id: n for n in self.nodes}
        for seg in self.segments:
            if seg.from_node not in self._by_id or seg.to_node not in self._by_id:
                raise NetworkError(f"segment {seg.id!r} references unknown node")

    def node(self, node_id: str) -> NetworkNode:
        return self._by_id[node_id]

    @property
    def z_base_ohm(self) -> float:
        return (self.v_base_kv ** 2) * 1000.0 / self.s_base_kva

    def active_segments(self, served_lgs: set[int], closed_switches: set[str]):
        """Segments energized under a switch/service state: intra-LG segments
        of served LGs, plus closed inter-LG ties between served LGs."""
        out = []
        for seg in self.segments:
            lg_a = self._by_id[seg.from_node].lg
            lg_b = self._by_id[seg.to_node].lg
            if seg.switch_id is None:
                if lg_a in served_lgs and lg_b in served_lgs and lg_a == lg_b:
                    out.append(seg)
                elif lg_a != lg_b:
                    raise NetworkError(
                        f"segment {seg.id!r} crosses LGs without a switch")
            elif seg.switch_id in closed_switches:
                if lg_a not in served_lgs or lg_b not in served_lgs:
                    raise NetworkError(
                        f"closed switch {seg.switch_id!r} touches an unserved LG")
                out.append(seg)
        return out


@dataclass
class RadialTree:
    """Rooted orientation of the active network: segment order is parent
    before child, so one backward and one forward sweep suffice."""

    network: NetworkModel
    node_ids: list[str]                       # energized nodes, root first
    parent: dict[str, str | None]
    ordered_segments: list[tuple[LineSegment, str, str]]  # (segment, parent, child)
    r_pu: np.ndarray = field(init=False)      # (n_segments, 3)
    x_pu: np.ndarray = field(init=False)

    def __post_init__(self):
        z = self.network.z_base_ohm
        self.r_pu = np.array([[r / z for r in seg.r_ohm]
                              for seg, _, _ in self.ordered_segments])
        self.x_pu = np.array([[x / z for x in seg.x_ohm]
                              for seg, _, _ in self.ordered_segments])
        self._pos = {nid: i for i, nid in enumerate(self.node_ids)}

    def node_pos(self, node_id: str) -> int:
        return self._pos[node_id]


def build_tree(network: NetworkModel, served_lgs, closed_switches) -> RadialTree:
    """Orient the active network from the source. Raises on loops, and on
    energized nodes unreachable from the source."""
    served = set(served_lgs)
    closed = set(closed_switches)
    segs = network.active_segments(served, closed)
    adj: dict[str, list[tuple[LineSegment, str]]] = {}
    for seg in segs:
        adj.setdefault(seg.from_node, []).append((seg, seg.to_node))
        adj.setdefault(seg.to_node, []).append((seg, seg.from_node))

    root = network.source_node
    if network.node(root).lg not in served:
        raise NetworkError("source LG is not served")
    parent: dict[str, str | None] = {root: None}
    ordered: list[tuple[LineSegment, str, str]] = []
    order = [root]
    queue = [root]
    seen_segments = set()
    while queue:
        u = queue.pop(0)
        for seg, v in adj.get(u, []):
            if seg.id in seen_segments:
                continue
            seen_segments.add(seg.id)
            if v in parent:
                raise NetworkError(f"loop detected at segment {seg.id!r}")
            parent[v] = u
            ordered.append((seg, u, v))
            order.append(v)
            queue.append(v)

    energized = [n.id for n in network.nodes if n.lg in served]
    missing = set(energized) - set(order)
    if missing:
        raise NetworkError(f"energized nodes unreachable from source: {sorted(missing)}")
    return RadialTree(network, order, parent, ordered)


def evaluate(tree: RadialTree, p_load_kw: np.ndarray, q_load_kvar: np.ndarray):
    """Linearized solve on a fixed tree.

    ``p_load_kw``/``q_load_kvar``: (n_nodes, 3) positive consumption, indexed
    like ``tree.node_ids``. Returns (v_sq_pu (n_nodes, 3), p_flow_kw,
    q_flow_kvar (n_segments, 3) flowing parent->child).
    """
    n = len(tree.node_ids)
    ns = len(tree.ordered_segments)
    p = np.asarray(p_load_kw, dtype=float).reshape(n, 3).copy()
    q = np.asarray(q_load_kvar, dtype=float).reshape(n, 3).copy()
    p_flow = np.zeros((ns, 3))
    q_flow = np.zeros((ns, 3))
    # backward: accumulate downstream load into each segment flow
    down_p = p.copy()
    down_q = q.copy()
    for i in range(ns - 1, -1, -1):
        seg, up, dn = tree.ordered_segments[i]
        di = tree.node_pos(dn)
        p_flow[i] = down_p[di]
        q_flow[i] = down_q[di]
        ui = tree.node_pos(up)
        down_p[ui] += down_p[di]
        down_q[ui] += down_q[di]
    # forward: squared-voltage drops from the source
    v = np.zeros((n, 3))
    v[0, :] = tree.network.v_source_pu ** 2
    s_base = tree.network.s_base_kva
    for i, (seg, up, dn) in enumerate(tree.ordered_segments):
        ui, di = tree.node_pos(up), tree.node_pos(dn)
        drop = 2.0 * (tree.r_pu[i] * p_flow[i] + tree.x_pu[i] * q_flow[i]) / s_base
        v[di] = v[ui] - drop
    return v, p_flow, q_flow


def ladder_solve(tree: RadialTree, p_load_kw: np.ndarray, q_load_kvar: np.ndarray,
                 tol: float = 1e-10, max_iter: int = 100):
    """Backward/forward sweep with constant-power loads on the same per-phase
    decoupled impedances (the nonlinear reference the linear model is checked
    against). Returns voltage magnitudes in p.u., shape (n_nodes, 3)."""
    n = len(tree.node_ids)
    ns = len(tree.ordered_segments)
    s_base = tree.network.s_base_kva
    s = (np.asarray(p_load_kw, dtype=float) + 1j * np.asarray(q_load_kvar, dtype=float))
    s = s.reshape(n, 3) / s_base  # per-unit complex load
    z = tree.r_pu + 1j * tree.x_pu
    v = np.full((n, 3), tree.network.v_source_pu, dtype=complex)
    for _ in range(max_iter):
        i_node = np.conj(s / v)
        i_flow = np.zeros((ns, 3), dtype=complex)
        acc = i_node.copy()
        for i in range(ns - 1, -1, -1):
            seg, up, dn = tree.ordered_segments[i]
            di = tree.node_pos(dn)
            i_flow[i] = acc[di]
            acc[tree.node_pos(up)] += acc[di]
        v_new = v.copy()
        v_new[0, :] = tree.network.v_source_pu
        for i, (seg, up, dn) in enumerate(tree.ordered_segments):
            v_new[tree.node_pos(dn)] = v_new[tree.node_pos(up)] - z[i] * i_flow[i]
        if np.max(np.abs(v_new - v)) < tol:
            v = v_new
            break
        v = v_new
    return np.abs(v)
