import itertools
import math
import sys

import numpy as np
import pytest

from microuc import milp
from microuc.milp import BINARY, CONTINUOUS, Model, ModelError, SolverError, lin_sum


def test_add_binary_var_bounds():
    m = Model()
    v = m.add_var(BINARY, name="U_G_1_1")
    assert (v.lb, v.ub) == (0.0, 1.0)
    assert v.kind == BINARY


def test_add_free_continuous_var():
    m = Model()
    v = m.add_var(CONTINUOUS, lb=-math.inf, ub=math.inf, name="free")
    assert v.lb == -math.inf and v.ub == math.inf


def test_duplicate_name_rejected():
    m = Model()
    m.add_var(BINARY, name="u")
    with pytest.raises(ModelError, match="duplicate"):
        m.add_var(CONTINUOUS, name="u")


def test_constraint_stored_verbatim():
    m = Model()
    x = m.add_var(CONTINUOUS, name="x")
    y = m.add_var(CONTINUOUS, name="y")
    m.add_constraint(x + y, "<=", 1.0, name="cap")
    expr, relop, rhs = m.constraint_expr(0)
    assert relop == "<=" and rhs == 1.0
    assert expr.terms == {x: 1.0, y: 1.0}


def test_empty_expr_constraint_accepted_then_infeasible():
    m = Model()
    m.add_var(CONTINUOUS, name="x", ub=2.0)
    m.add_constraint(milp.LinExpr(), "<=", -1.0, name="impossible")
    sol = milp.solve(m)
    assert sol.status == "infeasible"


def test_foreign_varref_rejected():
    m1, m2 = Model(), Model()
    x = m1.add_var(CONTINUOUS, name="x")
    m2.add_var(CONTINUOUS, name="y")
    with pytest.raises(ModelError, match="another model"):
        m2.add_constraint(x * 1.0, "<=", 1.0)


def test_mps_deterministic_bytes(tmp_path):
    def build():
        m = Model("same")
        x = m.add_var(CONTINUOUS, ub=3.0, name="x")
        u = m.add_var(BINARY, name="u")
        m.add_constraint(x + 2.0 * u, "<=", 3.0, name="c1")
        m.set_objective(x + u, "max")
        return m

    p1, p2 = tmp_path / "a.mps", tmp_path / "b.mps"
    build().write_exchange(p1)
    build().write_exchange(p2)
    assert p1.read_bytes() == p2.read_bytes()


def test_one_var_lp():
    m = Model()
    x = m.add_var(CONTINUOUS, name="x")
    m.add_constraint(x, "<=", 3.0, name="cap")
    m.set_objective(x, "max")
    sol = milp.solve(m)
    assert sol.status == "optimal"
    assert sol["x"] == pytest.approx(3.0, abs=1e-9)
    assert sol.objective_value == pytest.approx(3.0, abs=1e-9)


def _knapsack_model():
    values = [6.0, 10.0, 12.0]
    weights = [1.0, 2.0, 3.0]
    cap = 4.0
    m = Model("knapsack")
    xs = [m.add_var(BINARY, name=f"x{i}") for i in range(3)]
    m.add_constraint(lin_sum(w * x for w, x in zip(weights, xs)), "<=", cap, name="cap")
    m.set_objective(lin_sum(v * x for v, x in zip(values, xs)), "max")
    return m, values, weights, cap


def _knapsack_enumerate(values, weights, cap):
    best = -math.inf
    for pick in itertools.product([0, 1], repeat=len(values)):
        if sum(w * p for w, p in zip(weights, pick)) <= cap + 1e-12:
            best = max(best, sum(v * p for v, p in zip(values, pick)))
    return best


def test_knapsack_matches_enumeration():
    m, values, weights, cap = _knapsack_model()
    sol = milp.solve(m)
    assert sol.status == "optimal"
    assert sol.objective_value == pytest.approx(
        _knapsack_enumerate(values, weights, cap), abs=1e-6)


def test_infeasible_model_status():
    m = Model()
    x = m.add_var(CONTINUOUS, lb=0.0, ub=1.0, name="x")
    m.add_constraint(x, ">=", 2.0, name="too_big")
    sol = milp.solve(m)
    assert sol.status == "infeasible"


def test_unbounded_model_status():
    m = Model()
    x = m.add_var(CONTINUOUS, lb=0.0, ub=math.inf, name="x")
    m.set_objective(x, "max")
    sol = milp.solve(m)
    assert sol.status == "unbounded"


def test_mps_round_trip_parse():
    m, values, weights, cap = _knapsack_model()
    text = m.to_mps()
    import tempfile, pathlib
    with tempfile.TemporaryDirectory() as tmp:
        p = pathlib.Path(tmp) / "k.mps"
        p.write_text(text)
        m2 = milp.parse_mps(p)
    assert [v.name for v in m2.variables] == [v.name for v in m.variables]
    assert [v.kind for v in m2.variables] == [v.kind for v in m.variables]
    sol = milp.solve(m2)
    assert sol.objective_value == pytest.approx(
        _knapsack_enumerate(values, weights, cap), abs=1e-6)


def test_external_adapter_round_trip():
    m, values, weights, cap = _knapsack_model()
    cmd = [sys.executable, "-m", "microuc.milp"]
    sol = milp.solve(m, solver_cmd=cmd)
    assert sol.status == "optimal"
    assert sol.objective_value == pytest.approx(
        _knapsack_enumerate(values, weights, cap), abs=1e-6)
    assert set(sol.values) == {"x0", "x1", "x2"}
    for name in ("x0", "x1", "x2"):
        assert sol.values[name] in (0.0, 1.0)


def test_external_adapter_missing_command():
    m, *_ = _knapsack_model()
    with pytest.raises(SolverError, match="not found"):
        milp.solve(m, solver_cmd="definitely-not-a-solver-binary")


def test_solution_text_parse_errors():
    with pytest.raises(SolverError, match="STATUS"):
        milp.parse_solution_text("x 1\n")
    with pytest.raises(SolverError, match="unknown"):
        milp.parse_solution_text("STATUS sideways\n")


def _random_binary_milp(rng):
    """Random MILP over <= 8 binaries with small integer data."""
    n = int(rng.integers(2, 9))
    n_cons = int(rng.integers(1, 5))
    c = rng.integers(-10, 11, size=n).astype(float)
    rows = []
    for _ in range(n_cons):
        a = rng.integers(-5, 6, size=n).astype(float)
        relop = ["<=", ">=", "=="][int(rng.integers(0, 3))]
        if relop == "==":
            # anchor equality on an achievable value so feasible cases exist
            pick = rng.integers(0, 2, size=n)
            b = float(a @ pick)
        else:
            b = float(rng.integers(-8, 9))
        rows.append((a, relop, b))
    sense = "max" if rng.integers(0, 2) else "min"
    return n, c, rows, sense


def _enumerate_optimum(n, c, rows, sense):
    best = None
    for pick in itertools.product([0, 1], repeat=n):
        x = np.array(pick, dtype=float)
        ok = True
        for a, relop, b in rows:
            lhs = float(a @ x)
            if relop == "<=" and lhs > b + 1e-9:
                ok = False
            elif relop == ">=" and lhs < b - 1e-9:
                ok = False
            elif relop == "==" and abs(lhs - b) > 1e-9:
                ok = False
            if not ok:
                break
        if not ok:
            continue
        val = float(c @ x)
        if best is None or (sense == "max" and val > best) or (sense == "min" and val < best):
            best = val
    return best


@pytest.mark.parametrize("seed", range(12))
def test_random_small_milp_matches_enumeration(seed):
    rng = np.random.default_rng(seed)
    n, c, rows, sense = _random_binary_milp(rng)
    m = Model()
    xs = [m.add_var(BINARY, name=f"b{i}") for i in range(n)]
    for k, (a, relop, b) in enumerate(rows):
        m.add_constraint(lin_sum(a[i] * xs[i] for i in range(n)), relop, b, name=f"r{k}")
    m.set_objective(lin_sum(c[i] * xs[i] for i in range(n)), sense)
    sol = milp.solve(m)
    best = _enumerate_optimum(n, c, rows, sense)
    if best is None:
        assert sol.status == "infeasible"
    else:
        assert sol.status == "optimal"
        assert sol.objective_value == pytest.approx(best, abs=1e-6)
