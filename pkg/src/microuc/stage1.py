"""24-hour-ahead rolling unit commitment for the islanded feeder.

Maximizes weighted served energy minus PV-curtailment and pickup-transient
penalties, subject to minimum-service-duration rules (soft), the accumulated
pickup-duration / decay logic, radial topology selection, per-LG power
balance over switch flows, per-phase demand-response budgeting with a PCC
unbalance cap, and BESS/PV plant constraints.

Conventions: 0-based interval index t, interval length ``dt_minutes`` (default
30); energies in kWh, powers kW, durations minutes.  The "initial" state
(index -1) is carried in Stage1InitialState.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np

from .clpu import PHASES, ClpuParams
from .milp import BINARY, CONTINUOUS, LinExpr, Model, Solution, lin_sum, solve
from .topology import (CandidateSet, FeederGraph, TopologyVars,
                       add_candidate_constraints, add_spanning_tree_constraints)

# loads are modeled at a fixed 0.95 lagging power factor
LOAD_PF = 0.95
PF_RATIO = math.tan(math.acos(LOAD_PF))


def octagon_halfplanes(s_kva: float) -> list[tuple[float, float, float]]:
    """Half-planes (a, b, rhs) of the regular octagon inscribed in the kVA
    circle (vertices on the axes), used as an inner P-Q capability set:
    feasible iff a*P + b*Q <= rhs for all eight."""
    r = s_kva * math.cos(math.pi / 8.0)
    planes = []
    for k in range(8):
        th = (k + 0.5) * math.pi / 4.0
        planes.append((math.cos(th), math.sin(th), r))
    return planes

_BLOCKS = ("topology", "msd", "clpu", "power_balance", "unbalance_dr", "der")


class Stage1Error(RuntimeError):
    pass


class InfeasibleError(Stage1Error):
    """Raised when the commitment problem is infeasible; ``block`` names the
    first constraint block whose removal restores feasibility."""

    def __init__(self, message: str, block: str | None = None):
        super().__init__(message)
        self.block = block


@dataclass
class Stage1Weights:
    k_pv: float = 0.5          # PV curtailment penalty per kWh
    k_clpu: float = 1.0        # outer pickup-penalty weight
    k1_clpu: float = 1.0       # pickup energy term, per kWh
    k2_clpu: float = 0.02      # peak-duration term, per minute
    k3_clpu: float = 0.02      # remaining-duration term, per minute
    dr_penalty: float = 0.5    # DR budget usage, per weighted kWh

    def validate(self) -> None:
        for name in ("k_pv", "k_clpu", "k1_clpu", "k2_clpu", "k3_clpu", "dr_penalty"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")


@dataclass
class Stage1Params:
    n_intervals: int = 48
    dt_minutes: float = 30.0
    weights: Stage1Weights = field(default_factory=Stage1Weights)
    w_crit: dict = field(default_factory=dict)      # lg -> critical weight (default 2)
    w_pref: np.ndarray | None = None                # (n_intervals,) preferred-period weights
    dr_budget_fraction: float = 0.1                 # share of served load biddable as DR
    unbalance_limit: float | None = 0.2             # PCC unbalance cap; None disables
    big_m: float = 1500.0                           # minutes; > 24*60
    small_m: float = 1e-3
    msd_intervals: dict = field(default_factory=dict)  # lg -> min service intervals
    msd_default: int = 2
    msd_penalty: float | None = None                # None: 10 x max hourly load
    voll: float = 50.0                              # last-resort shed penalty per kWh
    flow_cap_kw: float | None = None                # None: sized from forecasts

    def validate(self) -> None:
        if self.n_intervals < 1:
            raise ValueError("n_intervals must be >= 1")
        if not 0.0 <= self.dr_budget_fraction <= 1.0:
            raise ValueError("dr_budget_fraction must lie in [0, 1]")
        if self.big_m <= 1440.0:
            raise ValueError("big_m must exceed 1440 minutes")
        if self.unbalance_limit is not None and self.unbalance_limit < 0:
            raise ValueError("unbalance_limit must be >= 0")
        self.weights.validate()
        for lg, d in self.msd_intervals.items():
            if d < 1:
                raise ValueError(f"msd_intervals[{lg}] must be >= 1")

    def w_pref_series(self) -> np.ndarray:
        if self.w_pref is None:
            return np.ones(self.n_intervals)
        w = np.asarray(self.w_pref, dtype=float)
        if len(w) != self.n_intervals:
            raise ValueError("w_pref length must equal n_intervals")
        return w

    def msd_for(self, lg: int) -> int:
        return int(self.msd_intervals.get(lg, self.msd_default))

    def crit_weight(self, lg: int) -> float:
        return float(self.w_crit.get(lg, 2.0))


@dataclass
class ForecastSet:
    """Per-(LG, phase, interval) load forecasts (non-critical / critical, both
    including the temperature-dependent steady HVAC draw), per-phase PV
    prediction, outdoor temperature, and the per-phase synchronized HVAC peak."""

    lgs: list[int]
    p_noncrit: np.ndarray    # (n_lg, 3, T) kW
    p_crit: np.ndarray       # (n_lg, 3, T) kW
    pv_phase: np.ndarray     # (T,) kW per phase
    t_out: np.ndarray        # (T,) degC
    p_max_clpu: np.ndarray   # (n_lg, 3) kW

    def validate(self, n_intervals: int) -> None:
        n_lg = len(self.lgs)
        shapes = {
            "p_noncrit": (self.p_noncrit, (n_lg, 3, n_intervals)),
            "p_crit": (self.p_crit, (n_lg, 3, n_intervals)),
            "pv_phase": (self.pv_phase, (n_intervals,)),
            "t_out": (self.t_out, (n_intervals,)),
            "p_max_clpu": (self.p_max_clpu, (n_lg, 3)),
        }
        for name, (arr, shape) in shapes.items():
            if np.asarray(arr).shape != shape:
                raise ValueError(f"{name} has shape {np.asarray(arr).shape}, expected {shape}")
        for name in ("p_noncrit", "p_crit", "pv_phase", "p_max_clpu"):
            if np.any(np.asarray(getattr(self, name)) < -1e-9):
                raise ValueError(f"{name} must be non-negative")

    def load(self, m: int, p: int, t: int) -> float:
        """Total baseload P_{m,p,t} (non-critical + critical), kW."""
        return float(self.p_noncrit[m, p, t] + self.p_crit[m, p, t])


@dataclass
class DerParams:
    pv_rating_kw: float = 4200.0
    bess_power_kw: float = 3000.0
    bess_energy_kwh: float = 6000.0
    eff_charge: float = 0.95
    eff_discharge: float = 0.95
    soc_min: float = 0.2
    soc_max: float = 0.9
    inverter_kva: float | None = None   # None: 1.2 x (pv + bess power)
    reserve_fraction: float = 0.1

    def validate(self) -> None:
        if not 0.0 < self.soc_min < self.soc_max <= 1.0:
            raise ValueError("require 0 < soc_min < soc_max <= 1")
        for name in ("eff_charge", "eff_discharge"):
            if not 0.0 < getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in (0, 1]")
        if self.pv_rating_kw < 0 or self.bess_power_kw <= 0 or self.bess_energy_kwh <= 0:
            raise ValueError("DER ratings must be positive")
        if not 0.0 <= self.reserve_fraction <= 1.0:
            raise ValueError("reserve_fraction must lie in [0, 1]")

    @property
    def energy_min_kwh(self) -> float:
        return self.soc_min * self.bess_energy_kwh

    @property
    def energy_max_kwh(self) -> float:
        return self.soc_max * self.bess_energy_kwh

    @property
    def apparent_rating_kva(self) -> float:
        if self.inverter_kva is not None:
            return self.inverter_kva
        return 1.2 * (self.pv_rating_kw + self.bess_power_kw)


@dataclass
class Stage1InitialState:
    u_ini: dict            # lg -> 0/1 service status before interval 0
    msd_served_ini: dict   # lg -> consecutive intervals already served
    d_ini: dict            # lg -> accumulated pickup-duration minutes
    dre_ini: dict          # lg -> remaining peak-duration minutes
    k_ini: dict            # lg -> HVAC factor, p.u. of synchronized peak
    soc_kwh: float

    @staticmethod
    def steady(lgs, der: DerParams, clpu: "ClpuInputs | None",
               soc: float | None = None) -> "Stage1InitialState":
        """All LGs on with no pickup backlog; BESS at soc (fraction) or soc_max."""
        k0 = {}
        for i, lg in enumerate(lgs):
            k0[lg] = float(clpu.k_steady[i, 0]) if clpu is not None else 0.0
        frac = der.soc_max if soc is None else soc
        return Stage1InitialState(
            u_ini={lg: 1 for lg in lgs},
            msd_served_ini={lg: 10 ** 6 for lg in lgs},
            d_ini={lg: 0.0 for lg in lgs},
            dre_ini={lg: 0.0 for lg in lgs},
            k_ini=k0,
            soc_kwh=frac * der.bess_energy_kwh,
        )


@dataclass
class ClpuInputs:
    """Pickup-model parameters evaluated on the forecast temperature series."""

    tau: np.ndarray        # (T,) minutes of peak per minute of outage
    dsat: np.ndarray       # (T,) peak-duration cap, minutes
    gamma: np.ndarray      # (T,) decay per interval, p.u.
    k_steady: np.ndarray   # (n_lg, T) p.u. of synchronized peak
    p_max: np.ndarray      # (n_lg, 3) kW

    @staticmethod
    def from_params(params: ClpuParams, lgs, t_out) -> "ClpuInputs":
        t_out = np.asarray(t_out, dtype=float)
        n_lg, T = len(lgs), len(t_out)
        k_steady = np.zeros((n_lg, T))
        p_max = np.zeros((n_lg, 3))
        for i, lg in enumerate(lgs):
            k_steady[i] = params.k_steady(lg, t_out)
            p_max[i] = params.p_max_clpu[params.lg_row(lg)]
        return ClpuInputs(
            tau=np.asarray(params.tau(t_out), dtype=float),
            dsat=np.asarray(params.dsat(t_out), dtype=float),
            gamma=np.asarray(params.gamma(t_out), dtype=float),
            k_steady=k_steady,
            p_max=p_max,
        )


@dataclass
class Stage1Vars:
    """Variable handles produced while assembling the model."""

    topo: TopologyVars
    d: list | None = None        # [t][m]
    dpeak: list | None = None
    dre: list | None = None
    k: list | None = None
    usat: list | None = None
    udecay: list | None = None
    flows: list | None = None    # [t][s][p]
    dr: list | None = None       # [t][p]
    slack: list | None = None    # [t][p] source-LG last-resort shed
    bess_phase: list | None = None  # [t][p] plant per-phase injection
    msd_slack: dict = field(default_factory=dict)  # (m, t) -> VarRef
    pv_phase: list | None = None  # [t]
    p_dis: list | None = None
    p_chg: list | None = None
    u_chg: list | None = None
    energy: list | None = None
    clpu_inputs: ClpuInputs | None = None

    def u_g(self, t: int, m: int):
        return self.topo.u_g[t][m]

    def p_clpu_expr(self, m: int, p: int, t: int) -> LinExpr:
        """P^CLPU_{m,p,t} = (k - k_steady U^G) x per-phase synchronized peak."""
        if self.k is None:
            return LinExpr()
        ci = self.clpu_inputs
        pmax = float(ci.p_max[m, p])
        if pmax <= 0.0:
            return LinExpr()
        kst = float(ci.k_steady[m, t])
        return pmax * self.k[t][m] - (pmax * kst) * self.u_g(t, m)

    def pcc_expr(self, forecasts: ForecastSet, p: int, t: int) -> LinExpr:
        """PCC phase power: served load + pickup power - DR - emergency slack."""
        expr = LinExpr()
        for m in range(len(forecasts.lgs)):
            expr.add_term(self.u_g(t, m), forecasts.load(m, p, t))
            expr = expr + self.p_clpu_expr(m, p, t)
        expr.add_term(self.dr[t][p], -1.0)
        expr.add_term(self.slack[t][p], -1.0)
        return expr


def _dt_hours(params: Stage1Params) -> float:
    return params.dt_minutes / 60.0


# -- constraint blocks --------------------------------------------------------


def add_clpu_constraints(model: Model, params: Stage1Params, clpu: ClpuInputs,
                         v: Stage1Vars, init: Stage1InitialState, lgs) -> None:
    """Accumulated peak duration, saturation, remaining duration, decay gating
    and the HVAC load factor, per LG and interval.

    Besides the defining big-M inequalities, the accumulators carry matching
    upper-side cuts (d and dre cannot exceed their own recursions) and
    right-sized bounds.  Those are redundant for every integral solution but
    collapse the LP relaxation, which otherwise lets the accumulators float
    and branches very slowly.
    """
    T, n_lg = params.n_intervals, len(lgs)
    dt, M, Ms = params.dt_minutes, params.big_m, params.small_m
    for lg in lgs:
        if init.u_ini[lg] and init.d_ini[lg] > 0:
            raise ValueError(f"LG {lg}: served initial state cannot carry an "
                             f"accumulated off-duration")
        if not init.u_ini[lg] and (init.dre_ini[lg] > 0 or init.k_ini[lg] > 0):
            raise ValueError(f"LG {lg}: interrupted initial state cannot carry "
                             f"a remaining duration or HVAC factor")
    dsat_max = float(np.max(clpu.dsat))
    # remaining duration can never exceed the largest admissible peak duration
    # (plus the tiny decay-forcing lift accumulated once per interval)
    dre_ub = max(dsat_max, max(float(init.dre_ini[lg]) for lg in lgs)) \
        + (T + 1) * Ms + dt

    # running cap on the accumulated duration per LG
    d_ub = np.zeros((n_lg, T))
    for m, lg in enumerate(lgs):
        run = float(init.d_ini[lg])
        for t in range(T):
            run = min(run + float(clpu.tau[t]) * dt, M)
            d_ub[m, t] = run

    v.d = [[model.add_var(CONTINUOUS, lb=0.0, ub=float(d_ub[m][t]),
                          name=f"d_{lgs[m]}_{t}")
            for m in range(n_lg)] for t in range(T)]
    v.dpeak = [[model.add_var(CONTINUOUS, lb=0.0,
                              ub=float(min(d_ub[m][t], dsat_max)),
                              name=f"dpeak_{lgs[m]}_{t}")
                for m in range(n_lg)] for t in range(T)]
    v.dre = [[model.add_var(CONTINUOUS, lb=0.0, ub=dre_ub,
                            name=f"dre_{lgs[m]}_{t}")
              for m in range(n_lg)] for t in range(T)]
    v.k = [[model.add_var(CONTINUOUS, lb=0.0, ub=1.0, name=f"k_{lgs[m]}_{t}")
            for m in range(n_lg)] for t in range(T)]
    v.usat = [[model.add_var(BINARY, name=f"Usat_{lgs[m]}_{t}")
               for m in range(n_lg)] for t in range(T)]
    v.udecay = [[model.add_var(BINARY, name=f"Udecay_{lgs[m]}_{t}")
                 for m in range(n_lg)] for t in range(T)]
    v.clpu_inputs = clpu

    for m, lg in enumerate(lgs):
        u_ini = float(init.u_ini[lg])
        d_ini = float(init.d_ini[lg])
        dre_ini = float(init.dre_ini[lg])
        k_ini = float(init.k_ini[lg])
        dpeak_ini = min(d_ini, float(clpu.dsat[0]))
        for t in range(T):
            ug = v.u_g(t, m)
            d, dpeak, dre = v.d[t][m], v.dpeak[t][m], v.dre[t][m]
            k, usat, udecay = v.k[t][m], v.usat[t][m], v.udecay[t][m]
            tau_dt = float(clpu.tau[t]) * dt
            # accumulation cleared while served
            model.add_constraint(d + float(d_ub[m][t]) * ug, "<=", float(d_ub[m][t]),
                                 name=f"clpu_doff_{lg}_{t}", block="clpu")
            # off intervals add tau*dt to the running duration (both sides);
            # activation constants are right-sized (capped by the nominal M)
            prev_d = v.d[t - 1][m] if t > 0 else d_ini
            m9 = min(M, (float(d_ub[m][t - 1]) if t > 0 else d_ini) + tau_dt)
            expr = d + (m9 + tau_dt) * ug - prev_d
            model.add_constraint(expr, ">=", tau_dt,
                                 name=f"clpu_dacc_{lg}_{t}", block="clpu")
            model.add_constraint(d - prev_d, "<=", tau_dt,
                                 name=f"clpu_dacc_up_{lg}_{t}", block="clpu")
            # saturation only meaningful while off
            model.add_constraint(usat + ug, "<=", 1.0,
                                 name=f"clpu_sat_off_{lg}_{t}", block="clpu")
            model.add_constraint(dpeak - float(clpu.dsat[t]) * usat, ">=", 0.0,
                                 name=f"clpu_peak_sat_{lg}_{t}", block="clpu")
            m12 = min(M, float(d_ub[m][t]))
            model.add_constraint(dpeak - d + m12 * usat, ">=", 0.0,
                                 name=f"clpu_peak_acc_{lg}_{t}", block="clpu")
            model.add_constraint(dpeak - d, "<=", 0.0,
                                 name=f"clpu_peak_cap_{lg}_{t}", block="clpu")
            # remaining duration: carried in at pickup, burns dt per served
            # interval, clamped to zero while off
            prev_dre = v.dre[t - 1][m] if t > 0 else dre_ini
            prev_dpeak = v.dpeak[t - 1][m] if t > 0 else dpeak_ini
            prev_dpeak_ub = min(float(d_ub[m][t - 1]), dsat_max) if t > 0 else dpeak_ini
            m13 = min(M, dre_ub + prev_dpeak_ub + dt)
            expr = dre - prev_dre - prev_dpeak - m13 * ug
            if t > 0:
                expr = expr + dt * v.u_g(t - 1, m)
                rhs = -m13
            else:
                rhs = -m13 - dt * u_ini
            model.add_constraint(expr, ">=", rhs,
                                 name=f"clpu_dre_{lg}_{t}", block="clpu")
            model.add_constraint(dre - prev_dre - prev_dpeak, "<=", Ms,
                                 name=f"clpu_dre_up_{lg}_{t}", block="clpu")
            model.add_constraint(dre - dre_ub * ug, "<=", 0.0,
                                 name=f"clpu_dre_on_{lg}_{t}", block="clpu")
            # decay may start only once the remaining duration is exhausted
            model.add_constraint(udecay - ug, "<=", 0.0,
                                 name=f"clpu_decay_on_{lg}_{t}", block="clpu")
            model.add_constraint(dre + dre_ub * udecay, "<=", dre_ub,
                                 name=f"clpu_decay_gate_{lg}_{t}", block="clpu")
            model.add_constraint(dre + dre_ub * udecay - Ms * ug, ">=", 0.0,
                                 name=f"clpu_decay_force_{lg}_{t}", block="clpu")
            # HVAC factor: bounded by the steady level and full peak, jumps to
            # 1 p.u. at pickup, decays gamma per interval once gated
            kst = float(clpu.k_steady[m, t])
            model.add_constraint(k - kst * ug, ">=", 0.0,
                                 name=f"clpu_k_lo_{lg}_{t}", block="clpu")
            model.add_constraint(k - ug, "<=", 0.0,
                                 name=f"clpu_k_hi_{lg}_{t}", block="clpu")
            prev_k = v.k[t - 1][m] if t > 0 else k_ini
            expr = k - prev_k - ug + float(clpu.gamma[t]) * udecay
            if t > 0:
                expr = expr + v.u_g(t - 1, m)
                rhs = 0.0
            else:
                rhs = -u_ini
            model.add_constraint(expr, ">=", rhs,
                                 name=f"clpu_k_jump_{lg}_{t}", block="clpu")


def add_msd_constraints(model: Model, params: Stage1Params, v: Stage1Vars,
                        init: Stage1InitialState, lgs) -> None:
    """Soft minimum service duration: a turn-on at t demands the next
    remaining-need intervals stay on unless the slack (penalized) is paid."""
    T = params.n_intervals
    for m, lg in enumerate(lgs):
        msd = params.msd_for(lg)
        for t in range(T):
            if t == 0:
                need = max(min(msd - int(init.msd_served_ini[lg]), T), 0)
                prev = float(init.u_ini[lg])
            else:
                need = min(msd, T - t)
                prev = v.u_g(t - 1, m)
            if need <= 0:
                continue
            slack = model.add_var(CONTINUOUS, lb=0.0, ub=1.0,
                                  name=f"msdslack_{lg}_{t}")
            v.msd_slack[(m, t)] = slack
            window = lin_sum(v.u_g(t + z, m) for z in range(need))
            expr = window - need * (v.u_g(t, m) - prev) + need * slack
            model.add_constraint(expr, ">=", 0.0,
                                 name=f"msd_{lg}_{t}", block="msd")


def add_power_balance(model: Model, params: Stage1Params, forecasts: ForecastSet,
                      v: Stage1Vars, graph: FeederGraph) -> None:
    """Per-LG, per-phase balance over switch flows; open switches carry no
    flow.  DR and the last-resort slack offset the source-LG demand (they act
    at the PCC)."""
    T = params.n_intervals
    lgs = graph.lgs
    n_sw = len(graph.switches)
    cap = params.flow_cap_kw
    if cap is None:
        load_by_phase = (forecasts.p_noncrit + forecasts.p_crit).sum(axis=0)
        cap = float(load_by_phase.max() + forecasts.p_max_clpu.sum())
    v.flows = [[[model.add_var(CONTINUOUS, lb=-cap, ub=cap,
                               name=f"F_{sw.id}_{ph}_{t}")
                 for ph in PHASES] for sw in graph.switches] for t in range(T)]
    v.dr = [[model.add_var(CONTINUOUS, lb=0.0, name=f"PDR_{ph}_{t}")
             for ph in PHASES] for t in range(T)]
    v.slack = [[model.add_var(CONTINUOUS, lb=0.0, name=f"shed_{ph}_{t}")
                for ph in PHASES] for t in range(T)]
    # per-phase BESS injection at the plant bus (free sign: the grid-forming
    # inverter absorbs the phase imbalance, within the unbalance band)
    v.bess_phase = [[model.add_var(CONTINUOUS, lb=-cap, ub=cap,
                                   name=f"Pbess_{ph}_{t}")
                     for ph in PHASES] for t in range(T)]

    src_pos = graph.lg_pos(graph.source_lg)
    for t in range(T):
        for s in range(n_sw):
            for p in range(3):
                f = v.flows[t][s][p]
                usw = v.topo.u_sw[t][s]
                model.add_constraint(f - cap * usw, "<=", 0.0,
                                     name=f"flowcap_p_{s}_{p}_{t}", block="power_balance")
                model.add_constraint(f + cap * usw, ">=", 0.0,
                                     name=f"flowcap_n_{s}_{p}_{t}", block="power_balance")
        for m, lg in enumerate(lgs):
            for p, ph in enumerate(PHASES):
                # inflow - outflow = U^G P + P^CLPU (minus DR/slack at source)
                expr = LinExpr()
                for s, sw in enumerate(graph.switches):
                    if sw.lg_to == lg:
                        expr.add_term(v.flows[t][s][p], 1.0)
                    elif sw.lg_from == lg:
                        expr.add_term(v.flows[t][s][p], -1.0)
                expr.add_term(v.u_g(t, m), -forecasts.load(m, p, t))
                expr = expr - v.p_clpu_expr(m, p, t)
                if m == src_pos:
                    # the plant injects here; DR and slack relieve it
                    expr.add_term(v.pv_phase[t], 1.0)
                    expr.add_term(v.bess_phase[t][p], 1.0)
                    expr.add_term(v.dr[t][p], 1.0)
                    expr.add_term(v.slack[t][p], 1.0)
                model.add_constraint(expr, "==", 0.0,
                                     name=f"balance_{lg}_{ph}_{t}", block="power_balance")
        # the charge/discharge totals close over the per-phase injections
        total = lin_sum(v.bess_phase[t])
        total.add_term(v.p_dis[t], -1.0)
        total.add_term(v.p_chg[t], 1.0)
        model.add_constraint(total, "==", 0.0,
                             name=f"plant_total_{t}", block="power_balance")
        # slack cannot exceed the source LG's own demand
        for p, ph in enumerate(PHASES):
            expr = v.slack[t][p] - forecasts.load(src_pos, p, t) * v.u_g(t, src_pos) \
                - v.p_clpu_expr(src_pos, p, t)
            model.add_constraint(expr, "<=", 0.0,
                                 name=f"shedcap_{ph}_{t}", block="power_balance")


def add_unbalance_and_dr(model: Model, params: Stage1Params, forecasts: ForecastSet,
                         v: Stage1Vars) -> None:
    """Per-phase DR budget cap and the PCC unbalance band."""
    T = params.n_intervals
    n_lg = len(forecasts.lgs)
    k_dr = params.dr_budget_fraction
    lim = params.unbalance_limit
    for t in range(T):
        pcc = [v.pcc_expr(forecasts, p, t) for p in range(3)]
        for p, ph in enumerate(PHASES):
            budget = LinExpr()
            for m in range(n_lg):
                budget.add_term(v.u_g(t, m), k_dr * forecasts.load(m, p, t))
                budget = budget + k_dr * v.p_clpu_expr(m, p, t)
            model.add_constraint(v.dr[t][p] - budget, "<=", 0.0,
                                 name=f"dr_budget_{ph}_{t}", block="unbalance_dr")
        if lim is None:
            continue
        avg = (pcc[0] + pcc[1] + pcc[2]) * (1.0 / 3.0)
        for p, ph in enumerate(PHASES):
            model.add_constraint(pcc[p] - (1.0 + lim) * avg, "<=", 0.0,
                                 name=f"imb_hi_{ph}_{t}", block="unbalance_dr")
            model.add_constraint((1.0 - lim) * avg - pcc[p], "<=", 0.0,
                                 name=f"imb_lo_{ph}_{t}", block="unbalance_dr")


def add_der_constraints(model: Model, params: Stage1Params, der: DerParams,
                        forecasts: ForecastSet, v: Stage1Vars,
                        init: Stage1InitialState) -> None:
    """BESS energy recursion with efficiency split, mutually exclusive
    charge/discharge, PV limits, inverter octagon and discharge reserve."""
    T = params.n_intervals
    dt_h = _dt_hours(params)
    for t in range(T):
        model.add_constraint(
            v.p_dis[t] - der.bess_power_kw + der.bess_power_kw * v.u_chg[t],
            "<=", 0.0, name=f"dis_cap_{t}", block="der")
        model.add_constraint(
            v.p_chg[t] - der.bess_power_kw * v.u_chg[t],
            "<=", 0.0, name=f"chg_cap_{t}", block="der")
        prev_e = v.energy[t - 1] if t > 0 else init.soc_kwh
        expr = v.energy[t] - der.eff_charge * dt_h * v.p_chg[t] \
            + (dt_h / der.eff_discharge) * v.p_dis[t]
        if t > 0:
            expr = expr - prev_e
            model.add_constraint(expr, "==", 0.0, name=f"soc_{t}", block="der")
        else:
            model.add_constraint(expr, "==", float(prev_e), name=f"soc_{t}", block="der")
        # discharge headroom serves as spinning reserve for the islanded system
        served = LinExpr()
        for p in range(3):
            served = served + v.pcc_expr(forecasts, p, t)
        expr = der.reserve_fraction * served + v.p_dis[t] - v.p_chg[t]
        model.add_constraint(expr, "<=", der.bess_power_kw,
                             name=f"reserve_{t}", block="der")
        # inner-octagon approximation of the plant kVA circle
        p_plant = LinExpr()
        for p in range(3):
            p_plant = p_plant + v.pcc_expr(forecasts, p, t)
        q_plant = p_plant * PF_RATIO
        for kk, (ca, sb, rhs) in enumerate(octagon_halfplanes(der.apparent_rating_kva)):
            model.add_constraint(ca * p_plant + sb * q_plant, "<=", rhs,
                                 name=f"octagon_{kk}_{t}", block="der")


def add_objective(model: Model, params: Stage1Params, forecasts: ForecastSet,
                  v: Stage1Vars) -> dict:
    """Weighted served energy minus DR, PV-curtailment, pickup and slack
    penalties.  Returns the named sub-expressions for later evaluation."""
    T = params.n_intervals
    dt_h = _dt_hours(params)
    w_pref = params.w_pref_series()
    wt = params.weights
    lgs = forecasts.lgs

    f_serve = LinExpr()
    for t in range(T):
        for m, lg in enumerate(lgs):
            val = sum(forecasts.p_noncrit[m, p, t] +
                      params.crit_weight(lg) * forecasts.p_crit[m, p, t]
                      for p in range(3))
            f_serve.add_term(v.u_g(t, m), float(w_pref[t]) * val * dt_h)
    f_dr = LinExpr()
    for t in range(T):
        for p in range(3):
            f_dr.add_term(v.dr[t][p], float(w_pref[t]) * dt_h)
    f_load = f_serve - wt.dr_penalty * f_dr

    f_pv = LinExpr()
    for t in range(T):
        f_pv = f_pv + 3.0 * dt_h * (float(forecasts.pv_phase[t]) - v.pv_phase[t])

    f_clpu = LinExpr()
    if v.k is not None:
        for t in range(T):
            for m in range(len(lgs)):
                for p in range(3):
                    f_clpu = f_clpu + wt.k1_clpu * dt_h * v.p_clpu_expr(m, p, t)
                f_clpu.add_term(v.dpeak[t][m], wt.k2_clpu)
                f_clpu.add_term(v.dre[t][m], wt.k3_clpu)

    msd_penalty = params.msd_penalty
    if msd_penalty is None:
        total_load = (forecasts.p_noncrit + forecasts.p_crit).sum(axis=(0, 1))
        msd_penalty = 10.0 * float(total_load.max()) if total_load.size else 0.0
    f_msd = lin_sum(v.msd_slack.values()) * msd_penalty

    f_voll = LinExpr()
    for t in range(T):
        for p in range(3):
            f_voll.add_term(v.slack[t][p], params.voll * dt_h)

    objective = f_load - wt.k_pv * f_pv - wt.k_clpu * f_clpu - f_msd - f_voll
    model.set_objective(objective, "max")
    return {"f_load": f_load, "f_pv": f_pv, "f_clpu": f_clpu,
            "f_msd": f_msd, "f_voll": f_voll}


# -- schedule extraction ------------------------------------------------------


@dataclass
class Stage1Schedule:
    lgs: list[int]
    switch_ids: list[str]
    n_intervals: int
    dt_minutes: float
    u_g: np.ndarray             # (n_lg, T) 0/1
    u_sw: np.ndarray            # (n_sw, T) 0/1
    topology_id: np.ndarray     # (T,) candidate id, -1 under spanning tree
    dr: np.ndarray              # (3, T) kW
    slack: np.ndarray           # (3, T) kW
    pv_phase: np.ndarray        # (T,) kW scheduled per phase
    pv_curt_phase: np.ndarray   # (T,) kW curtailed per phase
    p_dis: np.ndarray           # (T,) kW
    p_chg: np.ndarray           # (T,) kW
    energy: np.ndarray          # (T,) kWh at interval end
    d: np.ndarray               # (n_lg, T) minutes
    dpeak: np.ndarray
    dre: np.ndarray
    k: np.ndarray               # (n_lg, T) p.u.
    k_clpu: np.ndarray          # (n_lg, T) p.u.
    p_clpu: np.ndarray          # (n_lg, 3, T) kW
    flows: np.ndarray           # (n_sw, 3, T) kW
    pcc: np.ndarray             # (3, T) kW
    msd_slack_total: float
    objective_value: float
    f_load: float
    f_pv: float
    f_clpu: float
    status: str
    build_seconds: float
    solve_seconds: float

    def unbalance_factor(self) -> np.ndarray:
        """Recomputed PCC unbalance factor per interval (0 where idle)."""
        avg = self.pcc.mean(axis=0)
        dev = np.abs(self.pcc - avg[None, :]).max(axis=0)
        out = np.zeros_like(avg)
        nz = avg > 1e-6
        out[nz] = dev[nz] / avg[nz]
        return out

    def to_csv(self, path) -> None:
        import csv
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            header = ["interval", "topology_id"]
            header += [f"ug_{lg}" for lg in self.lgs]
            header += [f"usw_{s}" for s in self.switch_ids]
            header += [f"dr_{ph}" for ph in PHASES]
            header += [f"pcc_{ph}" for ph in PHASES]
            header += ["pv_phase_kw", "pv_curt_kw", "bess_dis_kw", "bess_chg_kw",
                       "energy_kwh", "unbalance"]
            w.writerow(header)
            unb = self.unbalance_factor()
            for t in range(self.n_intervals):
                row = [t, int(self.topology_id[t])]
                row += [int(self.u_g[m, t]) for m in range(len(self.lgs))]
                row += [int(self.u_sw[s, t]) for s in range(len(self.switch_ids))]
                row += [f"{self.dr[p, t]:.6f}" for p in range(3)]
                row += [f"{self.pcc[p, t]:.6f}" for p in range(3)]
                row += [f"{self.pv_phase[t]:.6f}", f"{self.pv_curt_phase[t]:.6f}",
                        f"{self.p_dis[t]:.6f}", f"{self.p_chg[t]:.6f}",
                        f"{self.energy[t]:.6f}", f"{unb[t]:.6f}"]
                w.writerow(row)


def _build_model(params: Stage1Params, forecasts: ForecastSet, der: DerParams,
                 clpu: ClpuInputs | None, topology, init: Stage1InitialState,
                 skip_blocks: frozenset = frozenset()):
    model = Model("stage1_uc")
    T = params.n_intervals

    if isinstance(topology, CandidateSet):
        graph = topology.graph
        topo = add_candidate_constraints(model, topology, T)
    elif isinstance(topology, FeederGraph):
        graph = topology
        topo = add_spanning_tree_constraints(model, graph, T)
    else:
        raise Stage1Error("topology must be a CandidateSet or a FeederGraph "
                          "(spanning-tree baseline)")
    if list(graph.lgs) != list(forecasts.lgs):
        raise Stage1Error("forecast LG order must match the feeder graph")

    v = Stage1Vars(topo=topo)
    v.pv_phase = [model.add_var(CONTINUOUS, lb=0.0, ub=float(forecasts.pv_phase[t]),
                                name=f"PV_{t}") for t in range(T)]
    v.p_dis = [model.add_var(CONTINUOUS, lb=0.0, ub=der.bess_power_kw,
                             name=f"Pdis_{t}") for t in range(T)]
    v.p_chg = [model.add_var(CONTINUOUS, lb=0.0, ub=der.bess_power_kw,
                             name=f"Pchg_{t}") for t in range(T)]
    v.u_chg = [model.add_var(BINARY, name=f"Uchg_{t}") for t in range(T)]
    v.energy = [model.add_var(CONTINUOUS, lb=der.energy_min_kwh,
                              ub=der.energy_max_kwh, name=f"E_{t}")
                for t in range(T)]

    if clpu is not None and "clpu" not in skip_blocks:
        add_clpu_constraints(model, params, clpu, v, init, graph.lgs)
    if "msd" not in skip_blocks:
        add_msd_constraints(model, params, v, init, graph.lgs)
    if "power_balance" not in skip_blocks:
        add_power_balance(model, params, forecasts, v, graph)
    else:
        raise Stage1Error("power balance block cannot be skipped")
    if "unbalance_dr" not in skip_blocks:
        add_unbalance_and_dr(model, params, forecasts, v)
    if "der" not in skip_blocks:
        add_der_constraints(model, params, der, forecasts, v, init)
    parts = add_objective(model, params, forecasts, v)
    return model, v, graph, parts


def _probe_infeasibility(params, forecasts, der, clpu, topology, init,
                         solver_cmd, time_limit_s, mip_gap) -> str | None:
    """Identify the first block whose removal restores feasibility."""
    for block in ("msd", "clpu", "unbalance_dr", "der"):
        try:
            model, *_ = _build_model(params, forecasts, der, clpu, topology, init,
                                     skip_blocks=frozenset({block}))
        except Stage1Error:
            continue
        sol = solve(model, solver_cmd, min(time_limit_s, 60.0), mip_gap)
        if sol.ok:
            return block
    return None


def solve_stage1(params: Stage1Params, forecasts: ForecastSet, der: DerParams,
                 clpu: ClpuInputs | None, topology, init: Stage1InitialState,
                 solver_cmd=None, time_limit_s: float = 300.0,
                 mip_gap: float = 1e-4) -> Stage1Schedule:
    """Assemble and solve the commitment problem, returning the schedule.

    ``topology`` is either a CandidateSet (pick-one list) or a FeederGraph
    (spanning-tree encoding).  ``clpu=None`` removes pickup estimation from
    the model entirely (comparison runs).
    """
    params.validate()
    der.validate()
    forecasts.validate(params.n_intervals)

    t0 = time.perf_counter()
    model, v, graph, parts = _build_model(params, forecasts, der, clpu,
                                          topology, init)
    build_seconds = time.perf_counter() - t0
    sol = solve(model, solver_cmd, time_limit_s, mip_gap)
    if not sol.ok:
        if sol.status == "infeasible":
            block = _probe_infeasibility(params, forecasts, der, clpu, topology,
                                         init, solver_cmd, time_limit_s, mip_gap)
            msg = "stage-1 problem infeasible"
            if block:
                msg += f"; removing the '{block}' block restores feasibility"
            raise InfeasibleError(msg, block)
        raise Stage1Error(f"stage-1 solve failed with status {sol.status!r}: {sol.message}")

    return _extract_schedule(params, forecasts, graph, v, parts, sol,
                             build_seconds, topology)


def _extract_schedule(params, forecasts, graph, v: Stage1Vars, parts, sol: Solution,
                      build_seconds, topology) -> Stage1Schedule:
    T = params.n_intervals
    lgs = graph.lgs
    n_lg, n_sw = len(lgs), len(graph.switches)
    u_g = np.zeros((n_lg, T))
    u_sw = np.zeros((n_sw, T))
    topo_id = np.full(T, -1)
    for t in range(T):
        for m in range(n_lg):
            u_g[m, t] = round(sol[v.topo.u_g[t][m]])
        for s in range(n_sw):
            u_sw[s, t] = round(sol[v.topo.u_sw[t][s]])
        if v.topo.u_topol is not None:
            for x, cand in enumerate(v.topo.candidates):
                if round(sol[v.topo.u_topol[t][x]]) == 1:
                    topo_id[t] = cand.id
                    break

    def arr1(vars_t):
        return np.array([sol[x] for x in vars_t])

    dr = np.array([[sol[v.dr[t][p]] for t in range(T)] for p in range(3)])
    slack = np.array([[sol[v.slack[t][p]] for t in range(T)] for p in range(3)])
    pv = arr1(v.pv_phase)
    pv_curt = np.asarray(forecasts.pv_phase, dtype=float) - pv
    d = np.zeros((n_lg, T))
    dpeak = np.zeros((n_lg, T))
    dre = np.zeros((n_lg, T))
    k = np.zeros((n_lg, T))
    k_clpu = np.zeros((n_lg, T))
    p_clpu = np.zeros((n_lg, 3, T))
    if v.k is not None:
        ci = v.clpu_inputs
        for t in range(T):
            for m in range(n_lg):
                d[m, t] = sol[v.d[t][m]]
                dpeak[m, t] = sol[v.dpeak[t][m]]
                dre[m, t] = sol[v.dre[t][m]]
                k[m, t] = sol[v.k[t][m]]
                k_clpu[m, t] = k[m, t] - float(ci.k_steady[m, t]) * u_g[m, t]
                for p in range(3):
                    p_clpu[m, p, t] = k_clpu[m, t] * float(ci.p_max[m, p])
    flows = np.array([[[sol[v.flows[t][s][p]] for t in range(T)]
                       for p in range(3)] for s in range(n_sw)]) if n_sw else \
        np.zeros((0, 3, T))
    pcc = np.zeros((3, T))
    for t in range(T):
        for p in range(3):
            pcc[p, t] = v.pcc_expr(forecasts, p, t).value(sol.values)

    return Stage1Schedule(
        lgs=list(lgs),
        switch_ids=[sw.id for sw in graph.switches],
        n_intervals=T,
        dt_minutes=params.dt_minutes,
        u_g=u_g, u_sw=u_sw, topology_id=topo_id,
        dr=dr, slack=slack,
        pv_phase=pv, pv_curt_phase=pv_curt,
        p_dis=arr1(v.p_dis), p_chg=arr1(v.p_chg), energy=arr1(v.energy),
        d=d, dpeak=dpeak, dre=dre, k=k, k_clpu=k_clpu, p_clpu=p_clpu,
        flows=flows, pcc=pcc,
        msd_slack_total=float(sum(sol[s] for s in v.msd_slack.values())),
        objective_value=sol.objective_value,
        f_load=parts["f_load"].value(sol.values),
        f_pv=parts["f_pv"].value(sol.values),
        f_clpu=parts["f_clpu"].value(sol.values),
        status=sol.status,
        build_seconds=build_seconds,
        solve_seconds=sol.solve_seconds,
    )
