"""Small MILP construction layer with an MPS exchange format and pluggable solving.

Models are built from variables, linear expressions and constraints, then either
solved in-process (HiGHS through scipy.optimize.milp) or handed to an external
solver command that receives the MPS file path and prints a solution in the text
format below.

Solution text format (one item per line, parsed case-insensitively):

    STATUS optimal
    OBJECTIVE 42.5
    x1 1
    x2 0.25

STATUS is one of optimal / feasible / infeasible / unbounded / error.  The
OBJECTIVE line and the variable lines may be omitted for infeasible results.
``microuc-solve`` (see :func:`adapter_main`) is a bundled adapter that follows
this contract, so the exchange-file path works out of the box.
"""

from __future__ import annotations

import math
import subprocess
import sys
import tempfile
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import sparse
from scipy.optimize import Bounds, LinearConstraint
from scipy.optimize import milp as _scipy_milp

CONTINUOUS = "continuous"
BINARY = "binary"

# Integrality tolerance for binary values read back from a solver; values
# inside the tolerance are snapped to exactly 0/1.
BINARY_TOL = 1e-5

DEFAULT_TIME_LIMIT_S = 300.0
DEFAULT_MIP_GAP = 1e-4

_RELOPS = ("<=", ">=", "==")


class ModelError(ValueError):
    """Raised for malformed model construction (duplicate names, foreign vars, ...)."""


class SolverError(RuntimeError):
    """Raised when a solver cannot be invoked or returns unusable output."""


@dataclass(frozen=True, eq=False)
class VarRef:
    """Handle to a model variable. Identity-hashed; arithmetic builds LinExpr."""

    index: int
    name: str
    kind: str
    lb: float
    ub: float
    model_id: int

    def __add__(self, other):
        return LinExpr.from_var(self) + other

    __radd__ = __add__

    def __sub__(self, other):
        return LinExpr.from_var(self) - other

    def __rsub__(self, other):
        return (-1.0) * LinExpr.from_var(self) + other

    def __mul__(self, coef):
        return LinExpr.from_var(self) * coef

    __rmul__ = __mul__

    def __neg__(self):
        return LinExpr.from_var(self) * -1.0


class LinExpr:
    """Linear expression: coefficient map keyed by VarRef plus a constant."""

    __slots__ = ("terms", "constant")

    def __init__(self, terms: dict[VarRef, float] | None = None, constant: float = 0.0):
        self.terms = terms if terms is not None else {}
        self.constant = constant

    @staticmethod
    def from_var(v: VarRef) -> "LinExpr":
        return LinExpr({v: 1.0})

    @staticmethod
    def _coerce(x) -> "LinExpr":
        if isinstance(x, LinExpr):
            return x
        if isinstance(x, VarRef):
            return LinExpr.from_var(x)
        return LinExpr({}, float(x))

    def copy(self) -> "LinExpr":
        return LinExpr(dict(self.terms), self.constant)

    def add_term(self, v: VarRef, coef: float) -> "LinExpr":
        """In-place accumulate; the workhorse for building big sums cheaply."""
        c = self.terms.get(v, 0.0) + coef
        if c == 0.0:
            self.terms.pop(v, None)
        else:
            self.terms[v] = c
        return self

    def __add__(self, other):
        other = LinExpr._coerce(other)
        out = self.copy()
        for v, c in other.terms.items():
            nc = out.terms.get(v, 0.0) + c
            if nc == 0.0:
                out.terms.pop(v, None)
            else:
                out.terms[v] = nc
        out.constant += other.constant
        return out

    __radd__ = __add__

    def __sub__(self, other):
        return self + (LinExpr._coerce(other) * -1.0)

    def __rsub__(self, other):
        return LinExpr._coerce(other) + (self * -1.0)

    def __mul__(self, coef):
        coef = float(coef)
        if coef == 0.0:
            return LinExpr({}, 0.0)
        return LinExpr({v: c * coef for v, c in self.terms.items()}, self.constant * coef)

    __rmul__ = __mul__

    def __neg__(self):
        return self * -1.0

    def value(self, values: dict[str, float]) -> float:
        """Evaluate against a name -> value map (e.g. Solution.values)."""
        return self.constant + sum(c * values[v.name] for v, c in self.terms.items())


def lin_sum(items) -> LinExpr:
    """Sum VarRefs / LinExprs / numbers without quadratic copying."""
    out = LinExpr()
    for it in items:
        if isinstance(it, VarRef):
            out.add_term(it, 1.0)
        elif isinstance(it, LinExpr):
            for v, c in it.terms.items():
                nc = out.terms.get(v, 0.0) + c
                if nc == 0.0:
                    out.terms.pop(v, None)
                else:
                    out.terms[v] = nc
            out.constant += it.constant
        else:
            out.constant += float(it)
    return out


@dataclass
class _Constraint:
    name: str
    terms: dict[VarRef, float]
    relop: str
    rhs: float
    block: str | None


@dataclass
class Solution:
    status: str  # optimal | feasible | infeasible | unbounded | error
    values: dict[str, float] = field(default_factory=dict)
    objective_value: float = math.nan
    solve_seconds: float = 0.0
    message: str = ""

    @property
    def ok(self) -> bool:
        return self.status in ("optimal", "feasible")

    def __getitem__(self, var) -> float:
        name = var.name if isinstance(var, VarRef) else var
        return self.values[name]


class Model:
    """A MILP under construction. Single writer; insertion order is preserved
    so identical build sequences serialize to identical bytes."""

    _ids = 0

    def __init__(self, name: str = "model"):
        Model._ids += 1
        self._id = Model._ids
        self.name = name
        self.variables: list[VarRef] = []
        self.constraints: list[_Constraint] = []
        self.objective: LinExpr = LinExpr()
        self.sense: str = "min"
        self._var_names: set[str] = set()
        self._con_names: set[str] = set()

    # -- construction -------------------------------------------------------

    def add_var(self, kind: str = CONTINUOUS, lb: float | None = None, ub: float | None = None,
                name: str | None = None) -> VarRef:
        if kind not in (CONTINUOUS, BINARY):
            raise ModelError(f"unknown variable kind {kind!r}")
        if kind == BINARY:
            lb = 0.0 if lb is None else float(lb)
            ub = 1.0 if ub is None else float(ub)
            if lb < 0.0 or ub > 1.0:
                raise ModelError(f"binary variable bounds must lie in [0,1], got ({lb}, {ub})")
        else:
            lb = 0.0 if lb is None else float(lb)
            ub = math.inf if ub is None else float(ub)
        lb, ub = float(lb), float(ub)
        if lb > ub:
            raise ModelError(f"lower bound {lb} exceeds upper bound {ub}")
        if name is None:
            name = f"x{len(self.variables)}"
        self._check_name(name)
        if name in self._var_names:
            raise ModelError(f"duplicate variable name {name!r}")
        v = VarRef(len(self.variables), name, kind, lb, ub, self._id)
        self.variables.append(v)
        self._var_names.add(name)
        return v

    def add_constraint(self, expr, relop: str, rhs: float = 0.0,
                       name: str | None = None, block: str | None = None) -> int:
        if relop not in _RELOPS:
            raise ModelError(f"unknown relational operator {relop!r}")
        expr = LinExpr._coerce(expr)
        for v in expr.terms:
            if v.model_id != self._id:
                raise ModelError(
                    f"variable {v.name!r} belongs to another model (id {v.model_id})")
        if name is None:
            name = f"c{len(self.constraints)}"
        self._check_name(name)
        if name in self._con_names:
            raise ModelError(f"duplicate constraint name {name!r}")
        terms = {v: c for v, c in expr.terms.items() if c != 0.0}
        con = _Constraint(name, terms, relop, float(rhs) - expr.constant, block)
        self.constraints.append(con)
        self._con_names.add(name)
        return len(self.constraints) - 1

    def set_objective(self, expr, sense: str = "min") -> None:
        if sense not in ("min", "max"):
            raise ModelError(f"objective sense must be 'min' or 'max', got {sense!r}")
        expr = LinExpr._coerce(expr)
        for v in expr.terms:
            if v.model_id != self._id:
                raise ModelError(
                    f"variable {v.name!r} belongs to another model (id {v.model_id})")
        self.objective = expr
        self.sense = sense

    def _check_name(self, name: str) -> None:
        if not name or any(ch.isspace() for ch in name):
            raise ModelError(f"invalid name {name!r}: must be non-empty without whitespace")

    def constraint_expr(self, i: int) -> tuple[LinExpr, str, float]:
        con = self.constraints[i]
        return LinExpr(dict(con.terms)), con.relop, con.rhs

    # -- exchange format -----------------------------------------------------

    def write_exchange(self, path) -> None:
        """Write the model as a fixed MPS file, byte-for-byte deterministic."""
        Path(path).write_text(self.to_mps(), encoding="ascii")

    def to_mps(self) -> str:
        def num(x: float) -> str:
            if x == math.inf:
                return "1e30"
            if x == -math.inf:
                return "-1e30"
            return format(x, ".12g")

        lines = [f"NAME          {self.name}"]
        lines.append("OBJSENSE")
        lines.append("    MAX" if self.sense == "max" else "    MIN")
        lines.append("ROWS")
        lines.append(" N  OBJ")
        code = {"<=": "L", ">=": "G", "==": "E"}
        for con in self.constraints:
            lines.append(f" {code[con.relop]}  {con.name}")
        lines.append("COLUMNS")
        # Column-major entries; the objective coefficient is always written so
        # every variable appears even when unreferenced.
        by_var: list[list[tuple[str, float]]] = [[] for _ in self.variables]
        for con in self.constraints:
            for v, c in con.terms.items():
                by_var[v.index].append((con.name, c))
        marker_open = False
        nmark = 0
        for v in self.variables:
            if v.kind == BINARY and not marker_open:
                lines.append(f"    M{nmark}        'MARKER'                 'INTORG'")
                marker_open = True
                nmark += 1
            elif v.kind != BINARY and marker_open:
                lines.append(f"    M{nmark}        'MARKER'                 'INTEND'")
                marker_open = False
                nmark += 1
            obj_c = self.objective.terms.get(v, 0.0)
            lines.append(f"    {v.name:<10}{'OBJ':<10}{num(obj_c)}")
            for row_name, c in by_var[v.index]:
                lines.append(f"    {v.name:<10}{row_name:<10}{num(c)}")
        if marker_open:
            lines.append(f"    M{nmark}        'MARKER'                 'INTEND'")
        lines.append("RHS")
        for con in self.constraints:
            if con.rhs != 0.0:
                lines.append(f"    {'RHS':<10}{con.name:<10}{num(con.rhs)}")
        lines.append("BOUNDS")
        for v in self.variables:
            if v.lb == -math.inf:
                lines.append(f" MI {'BND':<10}{v.name}")
            else:
                lines.append(f" LO {'BND':<10}{v.name:<10}{num(v.lb)}")
            if v.ub == math.inf:
                lines.append(f" PL {'BND':<10}{v.name}")
            else:
                lines.append(f" UP {'BND':<10}{v.name:<10}{num(v.ub)}")
        lines.append("ENDATA")
        return "\n".join(lines) + "\n"


def parse_mps(path) -> Model:
    """Parse the MPS dialect written by :meth:`Model.to_mps` (plus the common
    bound codes FX/FR/BV), enough for the bundled solver adapter."""
    model = Model()
    section = None
    row_relop: dict[str, str] = {}
    obj_row = None
    row_order: list[str] = []
    col_entries: dict[str, list[tuple[str, float]]] = {}
    col_order: list[str] = []
    int_cols: set[str] = set()
    rhs: dict[str, float] = {}
    bounds: dict[str, list[float | None]] = {}
    in_int = False
    sense = "min"
    code = {"L": "<=", "G": ">=", "E": "=="}

    for raw in Path(path).read_text().splitlines():
        if not raw.strip() or raw.lstrip().startswith("*"):
            continue
        is_header = not raw[0].isspace()
        tok = raw.split()
        if is_header:
            section = tok[0].upper()
            if section == "NAME":
                model.name = tok[1] if len(tok) > 1 else "model"
            if section == "ENDATA":
                break
            continue
        if section == "OBJSENSE":
            sense = tok[0].lower()
            continue
        if section == "ROWS":
            kind, name = tok[0].upper(), tok[1]
            if kind == "N":
                obj_row = name
            else:
                row_relop[name] = code[kind]
                row_order.append(name)
            continue
        if section == "COLUMNS":
            if len(tok) >= 3 and tok[1].strip("'").upper() == "MARKER":
                in_int = tok[2].strip("'").upper() == "INTORG"
                continue
            name = tok[0]
            if name not in col_entries:
                col_entries[name] = []
                col_order.append(name)
                if in_int:
                    int_cols.add(name)
            pairs = tok[1:]
            for i in range(0, len(pairs) - 1, 2):
                col_entries[name].append((pairs[i], float(pairs[i + 1])))
            continue
        if section == "RHS":
            pairs = tok[1:]
            for i in range(0, len(pairs) - 1, 2):
                rhs[pairs[i]] = float(pairs[i + 1])
            continue
        if section == "RANGES":
            raise ModelError("RANGES section is not supported")
        if section == "BOUNDS":
            btype = tok[0].upper()
            name = tok[2]
            val = float(tok[3]) if len(tok) > 3 else None
            lo_hi = bounds.setdefault(name, [None, None])
            if btype == "LO":
                lo_hi[0] = val
            elif btype == "UP":
                lo_hi[1] = val
            elif btype == "FX":
                lo_hi[0] = lo_hi[1] = val
            elif btype == "MI":
                lo_hi[0] = -math.inf
            elif btype == "PL":
                lo_hi[1] = math.inf
            elif btype == "FR":
                lo_hi[0], lo_hi[1] = -math.inf, math.inf
            elif btype == "BV":
                lo_hi[0], lo_hi[1] = 0.0, 1.0
                int_cols.add(name)
            else:
                raise ModelError(f"unsupported bound type {btype!r}")
            continue

    def clean_inf(x: float) -> float:
        if x >= 1e30:
            return math.inf
        if x <= -1e30:
            return -math.inf
        return x

    var_refs: dict[str, VarRef] = {}
    for name in col_order:
        lo_hi = bounds.get(name, [None, None])
        is_int = name in int_cols
        lb = 0.0 if lo_hi[0] is None else clean_inf(lo_hi[0])
        ub = (1.0 if is_int else math.inf) if lo_hi[1] is None else clean_inf(lo_hi[1])
        kind = BINARY if is_int and lb >= 0.0 and ub <= 1.0 else CONTINUOUS
        if is_int and kind != BINARY:
            raise ModelError(f"integer column {name!r} with non-binary bounds is not supported")
        var_refs[name] = model.add_var(kind, lb, ub, name)

    obj = LinExpr()
    row_terms: dict[str, LinExpr] = {name: LinExpr() for name in row_order}
    for name in col_order:
        v = var_refs[name]
        for row, coef in col_entries[name]:
            if row == obj_row:
                obj.add_term(v, coef)
            else:
                row_terms[row].add_term(v, coef)
    for row in row_order:
        model.add_constraint(row_terms[row], row_relop[row], rhs.get(row, 0.0), name=row)
    model.set_objective(obj, "max" if sense == "max" else "min")
    return model


# -- solving ----------------------------------------------------------------


def _solve_scipy(model: Model, time_limit_s: float, mip_gap: float) -> Solution:
    n = len(model.variables)
    c = np.zeros(n)
    for v, coef in model.objective.terms.items():
        c[v.index] = coef
    flip = -1.0 if model.sense == "max" else 1.0
    lb = np.array([v.lb for v in model.variables]) if n else np.zeros(0)
    ub = np.array([v.ub for v in model.variables]) if n else np.zeros(0)
    integrality = np.array([1 if v.kind == BINARY else 0 for v in model.variables],
                           dtype=np.int64) if n else np.zeros(0)

    rows, cols, vals = [], [], []
    clo, cup = [], []
    for i, con in enumerate(model.constraints):
        for v, coef in con.terms.items():
            rows.append(i)
            cols.append(v.index)
            vals.append(coef)
        if con.relop == "<=":
            clo.append(-np.inf)
            cup.append(con.rhs)
        elif con.relop == ">=":
            clo.append(con.rhs)
            cup.append(np.inf)
        else:
            clo.append(con.rhs)
            cup.append(con.rhs)
    constraints = ()
    if model.constraints:
        a = sparse.coo_matrix((vals, (rows, cols)), shape=(len(model.constraints), n))
        constraints = LinearConstraint(a.tocsr(), np.array(clo), np.array(cup))

    t0 = time.perf_counter()
    res = _scipy_milp(flip * c, constraints=constraints, integrality=integrality,
                      bounds=Bounds(lb, ub),
                      options={"time_limit": float(time_limit_s), "mip_rel_gap": float(mip_gap)})
    elapsed = time.perf_counter() - t0

    status_map = {0: "optimal", 1: "feasible", 2: "infeasible", 3: "unbounded", 4: "error"}
    status = status_map.get(res.status, "error")
    if status == "feasible" and res.x is None:
        status = "error"
    sol = Solution(status=status, solve_seconds=elapsed, message=res.message or "")
    if res.x is not None:
        sol.values = _extract_values(model, res.x)
        sol.objective_value = flip * float(res.fun) + model.objective.constant
    return sol


def _extract_values(model: Model, x: np.ndarray) -> dict[str, float]:
    values: dict[str, float] = {}
    for v in model.variables:
        val = float(x[v.index])
        if v.kind == BINARY:
            if abs(val - round(val)) > BINARY_TOL:
                raise SolverError(
                    f"binary variable {v.name!r} has non-integral value {val!r}")
            val = float(round(val))
        values[v.name] = val
    return values


def _solve_external(model: Model, solver_cmd, time_limit_s: float, mip_gap: float) -> Solution:
    cmd = [solver_cmd] if isinstance(solver_cmd, str) else list(solver_cmd)
    with tempfile.TemporaryDirectory(prefix="microuc_milp_") as tmp:
        mps_path = Path(tmp) / "model.mps"
        model.write_exchange(mps_path)
        argv = cmd + [str(mps_path), "--time-limit", str(time_limit_s), "--mip-gap", str(mip_gap)]
        t0 = time.perf_counter()
        try:
            proc = subprocess.run(argv, capture_output=True, text=True)
        except FileNotFoundError as exc:
            raise SolverError(f"solver command not found: {cmd[0]!r}") from exc
        elapsed = time.perf_counter() - t0
        if proc.returncode != 0:
            raise SolverError(f"solver exited with code {proc.returncode}: {proc.stderr.strip()}")
        sol = parse_solution_text(proc.stdout)
    sol.solve_seconds = elapsed
    if sol.ok:
        missing = [v.name for v in model.variables if v.name not in sol.values]
        if missing:
            raise SolverError(f"solver output missing values for {len(missing)} variables "
                              f"(first: {missing[0]!r})")
        for v in model.variables:
            if v.kind == BINARY:
                val = sol.values[v.name]
                if abs(val - round(val)) > BINARY_TOL:
                    raise SolverError(f"binary variable {v.name!r} has non-integral value {val!r}")
                sol.values[v.name] = float(round(val))
        if math.isnan(sol.objective_value):
            sol.objective_value = model.objective.value(sol.values)
    return sol


def solve(model: Model, solver_cmd=None, time_limit_s: float = DEFAULT_TIME_LIMIT_S,
          mip_gap: float = DEFAULT_MIP_GAP) -> Solution:
    """Solve the model. ``solver_cmd=None`` uses the in-process HiGHS backend;
    otherwise ``solver_cmd`` (string or argv list) is invoked on the exchange
    file and its stdout parsed as solution text."""
    if solver_cmd is None:
        return _solve_scipy(model, time_limit_s, mip_gap)
    return _solve_external(model, solver_cmd, time_limit_s, mip_gap)


# -- solution text ----------------------------------------------------------


def format_solution_text(sol: Solution) -> str:
    lines = [f"STATUS {sol.status}"]
    if sol.ok:
        lines.append(f"OBJECTIVE {format(sol.objective_value, '.17g')}")
        for name, val in sol.values.items():
            lines.append(f"{name} {format(val, '.17g')}")
    return "\n".join(lines) + "\n"


def parse_solution_text(text: str) -> Solution:
    status = None
    objective = math.nan
    values: dict[str, float] = {}
    for line in text.splitlines():
        tok = line.split()
        if not tok:
            continue
        key = tok[0].upper()
        if key == "STATUS":
            status = tok[1].lower()
        elif key == "OBJECTIVE":
            objective = float(tok[1])
        elif len(tok) == 2:
            values[tok[0]] = float(tok[1])
    if status is None:
        raise SolverError("solution text has no STATUS line")
    if status not in ("optimal", "feasible", "infeasible", "unbounded", "error"):
        raise SolverError(f"unknown solver status {status!r}")
    return Solution(status=status, values=values, objective_value=objective)


def adapter_main(argv=None) -> int:
    """Entry point of ``microuc-solve``: read an MPS file, solve in process,
    print solution text on stdout."""
    args = list(sys.argv[1:] if argv is None else argv)
    time_limit = DEFAULT_TIME_LIMIT_S
    mip_gap = DEFAULT_MIP_GAP
    paths = []
    i = 0
    while i < len(args):
        if args[i] == "--time-limit":
            time_limit = float(args[i + 1])
            i += 2
        elif args[i] == "--mip-gap":
            mip_gap = float(args[i + 1])
            i += 2
        else:
            paths.append(args[i])
            i += 1
    if len(paths) != 1:
        print("usage: microuc-solve FILE.mps [--time-limit S] [--mip-gap G]", file=sys.stderr)
        return 2
    model = parse_mps(paths[0])
    sol = solve(model, time_limit_s=time_limit, mip_gap=mip_gap)
    sys.stdout.write(format_solution_text(sol))
    return 0


if __name__ == "__main__":
    sys.exit(adapter_main())
