"""HVAC population thermostat simulation and the performance-based pickup model.

A fleet of single-zone cooling units is stepped at 1-minute resolution through
outage windows; the restoration transients are then distilled into a compact
parameter set (synchronized peak, peak-duration slope and saturation, decay
rate, steady level) indexed by outdoor temperature.  Those parameters are what
the scheduling stages consume.

Units: temperatures degC, power kW, thermal resistance degC/kW, thermal
capacitance kWh/degC, durations minutes unless stated otherwise.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

PHASES = ("a", "b", "c")

# Fraction of the synchronized peak below which the restoration peak is
# considered over. Fig-7-style peak durations are measured against this cut.
PEAK_THRESHOLD = 0.95

# Scheduling interval the decay/accumulation rates are expressed against.
INTERVAL_MINUTES = 30.0

_STEP_MINUTES = 1.0


class ExtractionError(ValueError):
    """Raised when a trace set cannot support a parameter fit."""


@dataclass(frozen=True)
class HvacUnit:
    """One thermostatically controlled cooling unit (first-order ETP model)."""

    thermal_resistance: float     # degC per kW of heat flow
    thermal_capacitance: float    # kWh per degC
    rated_electric_power: float   # kW electric when running
    cooling_capacity: float       # kW thermal removed when running
    setpoint: float               # degC
    deadband: float               # degC, full width of the hysteresis band
    initial_room_temp: float      # degC
    phase: str = "a"
    lg_index: int = 0
    node_index: int = 0

    def __post_init__(self):
        for name in ("thermal_resistance", "thermal_capacitance",
                     "rated_electric_power", "cooling_capacity", "deadband"):
            if getattr(self, name) <= 0.0:
                raise ValueError(f"{name} must be strictly positive, got {getattr(self, name)}")
        if not 15.0 <= self.setpoint <= 30.0:
            raise ValueError(f"setpoint must lie in [15, 30] degC, got {self.setpoint}")
        if self.phase not in PHASES:
            raise ValueError(f"phase must be one of {PHASES}, got {self.phase!r}")


@dataclass(frozen=True)
class PopulationRanges:
    """Uniform sampling ranges for synthetic unit populations."""

    thermal_resistance: tuple[float, float] = (1.5, 2.5)
    thermal_capacitance: tuple[float, float] = (1.0, 2.0)
    rated_electric_power: tuple[float, float] = (3.0, 5.0)
    cop: tuple[float, float] = (2.8, 3.5)
    setpoint: tuple[float, float] = (21.0, 25.0)
    deadband: tuple[float, float] = (1.0, 2.0)


def make_population(n: int, ranges: PopulationRanges, rng: np.random.Generator,
                    lg_index: int = 0, node_index: int = 0,
                    phases=None) -> list[HvacUnit]:
    """Draw a reproducible unit population. ``phases`` may be a sequence of
    per-unit phase labels; round-robin over a/b/c otherwise."""
    units = []
    for i in range(n):
        r = rng.uniform(*ranges.thermal_resistance)
        c = rng.uniform(*ranges.thermal_capacitance)
        p = rng.uniform(*ranges.rated_electric_power)
        cop = rng.uniform(*ranges.cop)
        sp = rng.uniform(*ranges.setpoint)
        db = rng.uniform(*ranges.deadband)
        t0 = rng.uniform(sp - db / 2.0, sp + db / 2.0)
        ph = phases[i] if phases is not None else PHASES[i % 3]
        units.append(HvacUnit(r, c, p, cop * p, sp, db, t0,
                              phase=ph, lg_index=lg_index, node_index=node_index))
    return units


class HvacFleet:
    """Vectorized minute-stepper over a unit list. This is the single
    thermostat code path shared by the model pipeline and the feeder
    simulator, so their transients agree exactly."""

    def __init__(self, units: list[HvacUnit]):
        if not units:
            raise ValueError("fleet needs at least one unit")
        self.units = list(units)
        self.n = len(units)
        self.resistance = np.array([u.thermal_resistance for u in units])
        self.capacitance = np.array([u.thermal_capacitance for u in units])
        self.rated_power = np.array([u.rated_electric_power for u in units])
        self.cooling = np.array([u.cooling_capacity for u in units])
        self.upper = np.array([u.setpoint + u.deadband / 2.0 for u in units])
        self.lower = np.array([u.setpoint - u.deadband / 2.0 for u in units])
        self.phase_index = np.array([PHASES.index(u.phase) for u in units])
        self.lg_index = np.array([u.lg_index for u in units])
        self.node_index = np.array([u.node_index for u in units])
        # exact 1-minute decay factor of the first-order thermal model
        self.alpha = np.exp(-(_STEP_MINUTES / 60.0) / (self.resistance * self.capacitance))
        self.temps = np.array([u.initial_room_temp for u in units])
        self.on = self.temps > self.upper

    def step(self, t_out: float, energized: np.ndarray) -> np.ndarray:
        """Advance one minute. Thermostats are evaluated first (de-energized
        units drop out; restored units above the upper band start at once),
        then room temperatures evolve under the resulting compressor state.
        Returns per-unit electric power (kW) drawn during the minute."""
        on = np.where(self.temps > self.upper, True,
                      np.where(self.temps < self.lower, False, self.on))
        on &= energized
        self.on = on
        power = np.where(on, self.rated_power, 0.0)
        target = t_out - np.where(on, self.cooling * self.resistance, 0.0)
        self.temps = target + (self.temps - target) * self.alpha
        return power

    def snapshot(self) -> tuple[np.ndarray, np.ndarray]:
        return self.temps.copy(), self.on.copy()

    def restore(self, temps: np.ndarray, on: np.ndarray) -> None:
        self.temps = temps.copy()
        self.on = on.copy()


@dataclass
class HvacTrace:
    """Minute-resolution population trace."""

    time_minutes: np.ndarray          # (T,)
    lg_ids: list[int]                 # sorted LG indices present
    aggregate_power: np.ndarray       # (n_lg, 3, T) kW
    on_status: np.ndarray             # (n_units, T) bool
    room_temps: np.ndarray            # (n_units, T) degC
    rated_power: np.ndarray           # (n_units,) kW
    outage_windows: list[tuple[int, int]] = field(default_factory=list)

    def total_power(self) -> np.ndarray:
        return self.aggregate_power.sum(axis=(0, 1))

    def synchronized_peak(self) -> float:
        return float(self.rated_power.sum())

    def restore_minute(self) -> int:
        if not self.outage_windows:
            raise ValueError("trace has no outage window")
        return self.outage_windows[-1][1]


def simulate_hvac_population(units: list[HvacUnit], weather: np.ndarray,
                             outage_windows: list[tuple[int, int]],
                             horizon: int) -> HvacTrace:
    """Simulate the population for ``horizon`` minutes under the given outdoor
    temperature series and outage windows (half-open [start, end) minutes,
    non-overlapping). All units lose power during an outage window."""
    if horizon < 1:
        raise ValueError(f"horizon must be >= 1 minute, got {horizon}")
    weather = np.asarray(weather, dtype=float)
    if len(weather) < horizon:
        raise ValueError(f"weather series ({len(weather)} min) shorter than horizon ({horizon} min)")
    windows = sorted((int(s), int(e)) for s, e in outage_windows)
    last_end = -1
    for s, e in windows:
        if s >= e:
            raise ValueError(f"empty outage window ({s}, {e})")
        if s < last_end:
            raise ValueError("outage windows overlap")
        if s < 0 or e > horizon:
            raise ValueError(f"outage window ({s}, {e}) outside horizon {horizon}")
        last_end = e

    fleet = HvacFleet(units)
    lg_ids = sorted(set(int(i) for i in fleet.lg_index))
    lg_pos = {lg: i for i, lg in enumerate(lg_ids)}
    agg = np.zeros((len(lg_ids), 3, horizon))
    on_status = np.zeros((fleet.n, horizon), dtype=bool)
    temps = np.zeros((fleet.n, horizon))
    row = np.array([lg_pos[int(i)] for i in fleet.lg_index])
    col = fleet.phase_index

    energized = np.ones(horizon, dtype=bool)
    for s, e in windows:
        energized[s:e] = False

    for t in range(horizon):
        mask = np.full(fleet.n, energized[t])
        power = fleet.step(float(weather[t]), mask)
        np.add.at(agg[:, :, t], (row, col), power)
        on_status[:, t] = fleet.on
        temps[:, t] = fleet.temps

    return HvacTrace(np.arange(horizon, dtype=float), lg_ids, agg, on_status,
                     temps, fleet.rated_power.copy(), windows)


# -- parameter extraction -----------------------------------------------------


def measure_peak_duration(trace: HvacTrace, threshold: float = PEAK_THRESHOLD) -> float:
    """Minutes from restoration until total power first drops below
    ``threshold`` of the synchronized peak (0 for traces with no peak)."""
    if not trace.outage_windows:
        return 0.0
    r = trace.restore_minute()
    norm = trace.total_power() / trace.synchronized_peak()
    below = np.nonzero(norm[r:] < threshold)[0]
    if len(below) == 0:
        return float(len(norm) - r)
    return float(below[0])


def _group_by_temp(traces: dict) -> dict[float, dict[float, HvacTrace]]:
    grouped: dict[float, dict[float, HvacTrace]] = {}
    for (t_out, dur), trace in traces.items():
        grouped.setdefault(float(t_out), {})[float(dur)] = trace
    return grouped


def _fit_peak_curve(by_dur: dict[float, HvacTrace], t_out: float,
                    threshold: float, saturation_tol: float):
    """Per-temperature piece of the peak-duration fit: (slope, plateau, d_off)."""
    if len(by_dur) < 3:
        raise ExtractionError(
            f"temperature {t_out}: need >= 3 outage durations, got {len(by_dur)}")
    durs = np.array(sorted(by_dur))
    peaks = np.array([measure_peak_duration(by_dur[d], threshold) for d in durs])
    plateau = float(peaks.max())
    if plateau <= 0.0:
        # no visible peak at this temperature: flat zero curve
        return 0.0, 0.0, 0.0
    saturated = peaks >= (1.0 - saturation_tol) * plateau
    d_off = float(durs[saturated].min())
    pre = durs < d_off
    if pre.sum() < 2:
        raise ExtractionError(
            f"temperature {t_out}: fewer than 2 pre-saturation points")
    x, y = durs[pre], peaks[pre]
    denom = float(np.dot(x, x))
    slope = float(np.dot(x, y)) / denom if denom > 0 else 0.0
    return max(slope, 0.0), plateau, d_off


def extract_peak_duration_curve(traces: dict, threshold: float = PEAK_THRESHOLD,
                                saturation_tol: float = 0.05):
    """Fit, per temperature, the peak-duration-vs-outage-duration line.

    ``traces`` maps (t_out, outage_minutes) -> HvacTrace.  Returns three dicts
    keyed by temperature: slope (minutes of peak per minute of outage, fitted
    through the origin over the pre-saturation region), the plateau peak
    duration (minutes), and the outage duration at which the plateau is
    reached (minutes).
    """
    grouped = _group_by_temp(traces)
    if len(grouped) < 2:
        raise ExtractionError(f"need traces for >= 2 temperatures, got {len(grouped)}")
    rate: dict[float, float] = {}
    peak_sat: dict[float, float] = {}
    off_sat: dict[float, float] = {}
    for t_out in sorted(grouped):
        rate[t_out], peak_sat[t_out], off_sat[t_out] = _fit_peak_curve(
            grouped[t_out], t_out, threshold, saturation_tol)
    return rate, peak_sat, off_sat


def extract_decay_rate(traces: dict, p_max_clpu: float,
                       steady_levels: dict | None = None,
                       threshold: float = PEAK_THRESHOLD,
                       steady_tol: float = 0.02,
                       interval_minutes: float = INTERVAL_MINUTES,
                       steady_window: float = 60.0):
    """Fit a per-interval decay rate per temperature, averaged over outage
    durations.  ``steady_levels`` optionally maps temperature to the steady
    level in p.u. of the synchronized peak (e.g. measured on a no-outage
    trace); without it each trace's own tail average is used.  Returns
    (rates, flagged): temperatures whose traces are already at the steady
    level at restoration carry rate 1.0 and appear in ``flagged``."""
    grouped = _group_by_temp(traces)
    rates: dict[float, float] = {}
    flagged: set[float] = set()
    for t_out in sorted(grouped):
        fits = []
        for dur, trace in sorted(grouped[t_out].items()):
            if dur <= 0 or not trace.outage_windows:
                continue
            norm = trace.total_power() / p_max_clpu
            r = trace.restore_minute()
            if steady_levels is not None:
                k_steady = float(steady_levels[t_out])
            else:
                k_steady = float(norm[-int(steady_window):].mean())
            if norm[r] <= k_steady + steady_tol:
                continue  # no decay to fit on this trace
            below = np.nonzero(norm[r:] < threshold)[0]
            peak_end = r + int(below[0]) if len(below) else len(norm) - 1
            arrived = np.nonzero(norm[peak_end:] <= k_steady + steady_tol)[0]
            if len(arrived) == 0:
                raise ExtractionError(
                    f"temperature {t_out}, outage {dur}: trace never reaches "
                    f"steady level within horizon")
            t_steady = peak_end + int(arrived[0])
            if t_steady == peak_end:
                continue
            drop = float(norm[peak_end] - norm[t_steady])
            intervals = (t_steady - peak_end) / interval_minutes
            fits.append(drop / intervals)
        if fits:
            rates[t_out] = float(np.mean(fits))
        else:
            rates[t_out] = 1.0
            flagged.add(t_out)
    return rates, flagged


def extract_steady_state(traces: dict, window_minutes: float = 60.0):
    """Time-averaged aggregate power over the final steady window, per
    (temperature, LG, phase). Returns dict temp -> array (n_lg, 3) kW."""
    if window_minutes < 30.0:
        raise ExtractionError(
            f"steady window must be >= 30 minutes, got {window_minutes}")
    grouped = _group_by_temp(traces)
    steady: dict[float, np.ndarray] = {}
    for t_out in sorted(grouped):
        samples = []
        for dur, trace in sorted(grouped[t_out].items()):
            horizon = trace.aggregate_power.shape[2]
            tail_start = trace.outage_windows[-1][1] if trace.outage_windows else 0
            if horizon - tail_start < 120:
                raise ExtractionError(
                    f"temperature {t_out}, outage {dur}: needs >= 2 h of "
                    f"post-recovery operation")
            w = int(window_minutes)
            samples.append(trace.aggregate_power[:, :, -w:].mean(axis=2))
        steady[t_out] = np.mean(samples, axis=0)
    return steady


@dataclass
class ClpuParams:
    """Performance-based pickup model: everything the scheduler needs to
    budget restoration transients, indexed on a common temperature grid."""

    temps: np.ndarray                       # sorted grid, degC
    lg_ids: list[int]
    p_max_clpu: np.ndarray                  # (n_lg, 3) kW, synchronized peak
    peak_duration_rate: np.ndarray          # (n_temps,) minutes per outage-minute
    peak_duration_saturation: np.ndarray    # (n_temps,) minutes
    outage_saturation: np.ndarray           # (n_temps,) minutes
    decay_rate: np.ndarray                  # (n_temps,) p.u. per 30-min interval
    steady_power: np.ndarray                # (n_temps, n_lg, 3) kW
    flagged_temps: list[float] = field(default_factory=list)

    def __post_init__(self):
        self.temps = np.asarray(self.temps, dtype=float)
        self.validate()

    def validate(self) -> None:
        if len(self.temps) == 0:
            raise ValueError("empty temperature grid")
        if np.any(np.diff(self.temps) <= 0):
            raise ValueError("temperature grid must be strictly increasing")
        n_t, n_lg = len(self.temps), len(self.lg_ids)
        for name, arr, shape in (
                ("p_max_clpu", self.p_max_clpu, (n_lg, 3)),
                ("peak_duration_rate", self.peak_duration_rate, (n_t,)),
                ("peak_duration_saturation", self.peak_duration_saturation, (n_t,)),
                ("outage_saturation", self.outage_saturation, (n_t,)),
                ("decay_rate", self.decay_rate, (n_t,)),
                ("steady_power", self.steady_power, (n_t, n_lg, 3))):
            if np.asarray(arr).shape != shape:
                raise ValueError(f"{name} has shape {np.asarray(arr).shape}, expected {shape}")
        if np.any(self.decay_rate <= 0.0) or np.any(self.decay_rate > 1.0):
            raise ValueError("decay_rate must lie in (0, 1]")
        if np.any(self.peak_duration_rate < 0.0):
            raise ValueError("peak_duration_rate must be >= 0")
        if np.any(self.steady_power > self.p_max_clpu[None, :, :] + 1e-9):
            raise ValueError("steady_power must not exceed p_max_clpu")

    # -- temperature lookups (piecewise linear, clamped at grid ends) --------

    def _interp(self, series: np.ndarray, t_out) -> np.ndarray | float:
        return np.interp(t_out, self.temps, series)

    def tau(self, t_out):
        return self._interp(self.peak_duration_rate, t_out)

    def dsat(self, t_out):
        return self._interp(self.peak_duration_saturation, t_out)

    def offsat(self, t_out):
        return self._interp(self.outage_saturation, t_out)

    def gamma(self, t_out):
        return self._interp(self.decay_rate, t_out)

    def lg_row(self, lg: int) -> int:
        return self.lg_ids.index(int(lg))

    def p_max_lg(self, lg: int) -> float:
        return float(self.p_max_clpu[self.lg_row(lg)].sum())

    def steady_lg(self, lg: int, t_out):
        """Total steady HVAC power of one LG at temperature(s) t_out, kW."""
        series = self.steady_power[:, self.lg_row(lg), :].sum(axis=1)
        return self._interp(series, t_out)

    def steady_phase(self, lg: int, phase: str, t_out):
        series = self.steady_power[:, self.lg_row(lg), PHASES.index(phase)]
        return self._interp(series, t_out)

    def k_steady(self, lg: int, t_out):
        """Steady HVAC level in p.u. of the LG synchronized peak."""
        p_max = self.p_max_lg(lg)
        if p_max <= 0.0:
            return np.multiply(t_out, 0.0)
        return self.steady_lg(lg, t_out) / p_max

    def phase_share(self, lg: int) -> np.ndarray:
        """Per-phase share of the LG synchronized peak (sums to 1)."""
        row = self.p_max_clpu[self.lg_row(lg)]
        total = row.sum()
        if total <= 0.0:
            return np.full(3, 1.0 / 3.0)
        return row / total

    # -- serialization --------------------------------------------------------

    def to_json(self) -> str:
        def tkey(t: float) -> str:
            return format(float(t), "g")

        k_steady = {}
        for ti, t in enumerate(self.temps):
            k_steady[tkey(t)] = {
                str(lg): (float(self.steady_power[ti, li].sum()) / p if
                          (p := float(self.p_max_clpu[li].sum())) > 0 else 0.0)
                for li, lg in enumerate(self.lg_ids)}
        doc = {
            "p_max_clpu": {str(lg): {ph: float(self.p_max_clpu[li, pi])
                                     for pi, ph in enumerate(PHASES)}
                           for li, lg in enumerate(self.lg_ids)},
            "peak_duration_rate": {tkey(t): float(self.peak_duration_rate[i])
                                   for i, t in enumerate(self.temps)},
            "peak_duration_saturation": {tkey(t): float(self.peak_duration_saturation[i])
                                         for i, t in enumerate(self.temps)},
            "outage_saturation": {tkey(t): float(self.outage_saturation[i])
                                  for i, t in enumerate(self.temps)},
            "decay_rate": {tkey(t): float(self.decay_rate[i])
                           for i, t in enumerate(self.temps)},
            "steady_power": {tkey(t): {str(lg): {ph: float(self.steady_power[i, li, pi])
                                                 for pi, ph in enumerate(PHASES)}
                                       for li, lg in enumerate(self.lg_ids)}
                             for i, t in enumerate(self.temps)},
            "k_steady": k_steady,
            "flagged_temps": [float(t) for t in self.flagged_temps],
        }
        return json.dumps(doc, indent=2, sort_keys=True)

    @staticmethod
    def from_json(text: str) -> "ClpuParams":
        doc = json.loads(text)
        temps = sorted(float(t) for t in doc["peak_duration_rate"])
        lg_ids = sorted(int(lg) for lg in doc["p_max_clpu"])
        n_t, n_lg = len(temps), len(lg_ids)

        def tkey(t: float) -> str:
            return format(float(t), "g")

        p_max = np.zeros((n_lg, 3))
        for li, lg in enumerate(lg_ids):
            for pi, ph in enumerate(PHASES):
                p_max[li, pi] = doc["p_max_clpu"][str(lg)][ph]
        steady = np.zeros((n_t, n_lg, 3))
        for i, t in enumerate(temps):
            for li, lg in enumerate(lg_ids):
                for pi, ph in enumerate(PHASES):
                    steady[i, li, pi] = doc["steady_power"][tkey(t)][str(lg)][ph]
        return ClpuParams(
            temps=np.array(temps),
            lg_ids=lg_ids,
            p_max_clpu=p_max,
            peak_duration_rate=np.array([doc["peak_duration_rate"][tkey(t)] for t in temps]),
            peak_duration_saturation=np.array(
                [doc["peak_duration_saturation"][tkey(t)] for t in temps]),
            outage_saturation=np.array([doc["outage_saturation"][tkey(t)] for t in temps]),
            decay_rate=np.array([doc["decay_rate"][tkey(t)] for t in temps]),
            steady_power=steady,
            flagged_temps=[float(t) for t in doc.get("flagged_temps", [])],
        )

    def save(self, path) -> None:
        Path(path).write_text(self.to_json())

    @staticmethod
    def load(path) -> "ClpuParams":
        return ClpuParams.from_json(Path(path).read_text())


def build_clpu_params(units: list[HvacUnit], weather_grid, outage_grid,
                      warmup_minutes: int = 240, tail_minutes: int = 480,
                      threshold: float = PEAK_THRESHOLD) -> ClpuParams:
    """Run the simulation sweep over (temperature, outage duration) and fit
    the pickup model. The outage grid must include 0 (the no-outage baseline);
    the temperature grid must be sorted."""
    weather_grid = [float(t) for t in weather_grid]
    outage_grid = sorted(int(d) for d in outage_grid)
    if any(b <= a for a, b in zip(weather_grid, weather_grid[1:])):
        raise ValueError("temperature grid must be sorted strictly increasing")
    if 0 not in outage_grid:
        raise ValueError("outage grid must include 0")

    traces: dict[tuple[float, float], HvacTrace] = {}
    for t_out in weather_grid:
        for dur in outage_grid:
            horizon = warmup_minutes + dur + tail_minutes
            weather = np.full(horizon, t_out)
            windows = [(warmup_minutes, warmup_minutes + dur)] if dur > 0 else []
            traces[(t_out, float(dur))] = simulate_hvac_population(
                units, weather, windows, horizon)

    some_trace = next(iter(traces.values()))
    lg_ids = some_trace.lg_ids
    fleet = HvacFleet(units)
    p_max = np.zeros((len(lg_ids), 3))
    for i, lg in enumerate(lg_ids):
        for pi in range(3):
            sel = (fleet.lg_index == lg) & (fleet.phase_index == pi)
            p_max[i, pi] = fleet.rated_power[sel].sum()

    grouped = _group_by_temp(traces)
    rate, peak_sat, off_sat = {}, {}, {}
    for t_out in weather_grid:
        rate[t_out], peak_sat[t_out], off_sat[t_out] = _fit_peak_curve(
            grouped[t_out], t_out, threshold, 0.05)
    # steady levels come from the undisturbed (zero-outage) traces so the
    # decay fit is measured against a reference the outage cannot pollute
    steady = extract_steady_state({(t, 0.0): grouped[t][0.0] for t in weather_grid})
    p_max_total = p_max.sum()
    steady_levels = {t: float(steady[t].sum()) / p_max_total if p_max_total > 0 else 0.0
                     for t in weather_grid}
    decay, flagged = extract_decay_rate(traces, p_max_total, steady_levels)

    temps = np.array(weather_grid)
    steady_arr = np.stack([np.minimum(steady[t], p_max) for t in weather_grid])
    return ClpuParams(
        temps=temps,
        lg_ids=lg_ids,
        p_max_clpu=p_max,
        peak_duration_rate=np.array([rate[t] for t in weather_grid]),
        peak_duration_saturation=np.array([peak_sat[t] for t in weather_grid]),
        outage_saturation=np.array([off_sat[t] for t in weather_grid]),
        decay_rate=np.array([decay[t] for t in weather_grid]),
        steady_power=steady_arr,
        flagged_temps=sorted(flagged),
    )
