import numpy as np
import pytest

from microuc import clpu
from microuc.clpu import (
    ClpuParams,
    ExtractionError,
    HvacTrace,
    HvacUnit,
    PopulationRanges,
    build_clpu_params,
    extract_decay_rate,
    extract_peak_duration_curve,
    extract_steady_state,
    make_population,
    measure_peak_duration,
    simulate_hvac_population,
)


def single_unit(setpoint=24.0, deadband=1.0, t0=None, r=2.0, c=1.5, p=4.0, cop=3.0):
    return HvacUnit(r, c, p, cop * p, setpoint, deadband,
                    setpoint if t0 is None else t0)


def small_population(n=60, seed=7, lg_index=0):
    rng = np.random.default_rng(seed)
    return make_population(n, PopulationRanges(), rng, lg_index=lg_index)


def test_unit_validation():
    with pytest.raises(ValueError, match="thermal_resistance"):
        HvacUnit(-1.0, 1.5, 4.0, 12.0, 24.0, 1.0, 24.0)
    with pytest.raises(ValueError, match="setpoint"):
        HvacUnit(2.0, 1.5, 4.0, 12.0, 40.0, 1.0, 24.0)
    with pytest.raises(ValueError, match="deadband"):
        HvacUnit(2.0, 1.5, 4.0, 12.0, 24.0, 0.0, 24.0)


def test_weather_shorter_than_horizon_rejected():
    with pytest.raises(ValueError, match="shorter"):
        simulate_hvac_population([single_unit()], np.full(100, 30.0), [], 200)


def test_overlapping_outages_rejected():
    with pytest.raises(ValueError, match="overlap"):
        simulate_hvac_population([single_unit()], np.full(300, 30.0),
                                 [(10, 60), (50, 80)], 300)


def test_duty_cycle_average_power():
    # steady duty cycling: average electric power ~ thermal load / COP
    unit = single_unit(setpoint=24.0, deadband=1.0, t0=24.0)
    t_out = 30.0
    horizon = 24 * 60
    trace = simulate_hvac_population([unit], np.full(horizon, t_out), [], horizon)
    power = trace.total_power()
    expected = (t_out - unit.setpoint) / unit.thermal_resistance \
        / unit.cooling_capacity * unit.rated_electric_power
    avg = power[120:].mean()  # skip the settling transient
    assert avg == pytest.approx(expected, rel=0.15)
    transitions = np.count_nonzero(np.diff(trace.on_status[0].astype(int)))
    assert transitions >= 4  # on/off alternates


def test_no_thermal_load_no_power():
    unit = single_unit(setpoint=24.0, t0=24.0)
    horizon = 12 * 60
    trace = simulate_hvac_population([unit], np.full(horizon, 24.0), [], horizon)
    assert trace.total_power()[60:].max() == 0.0


def test_outage_zeroes_power_and_temps_drift_up():
    units = small_population(20)
    horizon = 8 * 60
    trace = simulate_hvac_population(units, np.full(horizon, 36.0),
                                     [(120, 240)], horizon)
    assert trace.total_power()[120:240].max() == 0.0
    # rooms coast toward outdoor temperature during the outage
    assert np.all(trace.room_temps[:, 239] > trace.room_temps[:, 121])


def test_synchronized_peak_hot_day():
    units = small_population(60)
    horizon = 10 * 60
    trace = simulate_hvac_population(units, np.full(horizon, 36.0),
                                     [(240, 360)], horizon)
    restore = trace.restore_minute()
    assert trace.total_power()[restore] == pytest.approx(trace.synchronized_peak(), abs=1e-9)


def test_peak_below_synchronized_mild_day():
    units = small_population(60)
    horizon = 10 * 60
    trace = simulate_hvac_population(units, np.full(horizon, 26.0),
                                     [(240, 360)], horizon)
    restore = trace.restore_minute()
    assert trace.total_power()[restore] < trace.synchronized_peak() - 1e-9


def test_aggregate_consistent_with_on_status():
    units = small_population(30)
    horizon = 6 * 60
    trace = simulate_hvac_population(units, np.full(horizon, 34.0),
                                     [(60, 150)], horizon)
    rated = trace.rated_power
    recomputed = (trace.on_status * rated[:, None]).sum(axis=0)
    assert np.allclose(recomputed, trace.total_power(), atol=1e-9)


def test_energy_sanity_deferred_load_recovered():
    # interrupted run's total energy over the full window >= baseline energy
    # minus what the baseline would have used during the outage window
    units = small_population(50)
    horizon = 14 * 60
    weather = np.full(horizon, 35.0)
    outage = (240, 360)
    interrupted = simulate_hvac_population(units, weather, [outage], horizon)
    baseline = simulate_hvac_population(units, weather, [], horizon)
    e_int = interrupted.total_power().sum() / 60.0
    e_base = baseline.total_power().sum() / 60.0
    e_base_outage = baseline.total_power()[outage[0]:outage[1]].sum() / 60.0
    assert e_int >= e_base - e_base_outage - 1e-6


def test_zero_outage_peak_duration_zero():
    units = small_population(30)
    horizon = 6 * 60
    trace = simulate_hvac_population(units, np.full(horizon, 36.0), [], horizon)
    assert measure_peak_duration(trace) == 0.0


def test_peak_durations_monotone_and_rates_ordered():
    units = small_population(60)
    durations = [30, 60, 120, 240, 420]
    temps = [30.0, 38.0]
    traces = {}
    for t_out in temps:
        for dur in [0] + durations:
            horizon = 240 + dur + 480
            windows = [(240, 240 + dur)] if dur else []
            traces[(t_out, float(dur))] = simulate_hvac_population(
                units, np.full(horizon, t_out), windows, horizon)
    for t_out in temps:
        peaks = [measure_peak_duration(traces[(t_out, float(d))]) for d in [0] + durations]
        assert all(b >= a - 1.0 for a, b in zip(peaks, peaks[1:]))
    rate, peak_sat, off_sat = extract_peak_duration_curve(traces)
    assert rate[30.0] <= rate[38.0] + 1e-9
    for t_out in temps:
        assert peak_sat[t_out] >= 0.0
        assert off_sat[t_out] <= max(durations)


def _piecewise_trace(levels, p_max=100.0, outage=(10, 70)):
    """Single-LG synthetic trace with total power = levels * p_max."""
    k = np.asarray(levels, dtype=float)
    horizon = len(k)
    agg = (k * p_max).reshape(1, 1, horizon).repeat(3, axis=1) / 3.0
    return HvacTrace(
        time_minutes=np.arange(horizon, dtype=float),
        lg_ids=[0],
        aggregate_power=agg,
        on_status=np.zeros((1, horizon), dtype=bool),
        room_temps=np.zeros((1, horizon)),
        rated_power=np.array([p_max]),
        outage_windows=[outage],
    )


def test_decay_rate_hand_fit():
    # plateau at 1.0 then a linear drop to 0.4 over 90 minutes: the fitted
    # per-30-minute rate must equal the true slope, (1.0 - 0.4) / 3 = 0.2
    k = [0.4] * 10 + [0.0] * 60 + [1.0] * 30 + \
        list(np.linspace(1.0, 0.4, 91)[1:]) + [0.4] * 180
    trace = _piecewise_trace(k, outage=(10, 70))
    rates, flagged = extract_decay_rate({(36.0, 60.0): trace}, p_max_clpu=100.0)
    assert rates[36.0] == pytest.approx(0.2, abs=1e-9)
    assert not flagged


def test_decay_skipped_when_already_steady():
    k = [0.4] * 10 + [0.0] * 60 + [0.41] * 300
    trace = _piecewise_trace(k, outage=(10, 70))
    rates, flagged = extract_decay_rate({(26.0, 60.0): trace}, p_max_clpu=100.0)
    assert 26.0 in flagged
    assert rates[26.0] == 1.0


def test_decay_error_when_never_steady():
    # sticks at 0.7 against a known steady level of 0.4: the decay never
    # finishes inside the horizon
    k = [0.4] * 10 + [0.0] * 60 + [1.0] * 30 + \
        list(np.linspace(1.0, 0.7, 31)[1:]) + [0.7] * 120
    trace = _piecewise_trace(k, outage=(10, 70))
    with pytest.raises(ExtractionError, match="never reaches"):
        extract_decay_rate({(36.0, 60.0): trace}, p_max_clpu=100.0,
                           steady_levels={36.0: 0.4})


def test_steady_state_extraction():
    units = small_population(50)
    traces = {}
    for t_out in (24.0, 30.0, 36.0):
        horizon = 8 * 60
        traces[(t_out, 0.0)] = simulate_hvac_population(
            units, np.full(horizon, t_out), [], horizon)
    steady = extract_steady_state(traces)
    p_max = sum(u.rated_electric_power for u in units)
    totals = [steady[t].sum() for t in (24.0, 30.0, 36.0)]
    assert totals[0] < 0.05 * p_max          # ~ no load at the setpoint range
    assert 0.0 < totals[2] < p_max           # strictly between 0 and the peak
    assert totals[0] <= totals[1] <= totals[2]  # monotone in temperature


def test_steady_state_window_too_short():
    units = small_population(10)
    horizon = 8 * 60
    traces = {(30.0, 0.0): simulate_hvac_population(
        units, np.full(horizon, 30.0), [], horizon)}
    with pytest.raises(ExtractionError, match="30 minutes"):
        extract_steady_state(traces, window_minutes=10.0)


def test_peak_curve_needs_two_temperatures():
    units = small_population(10)
    horizon = 400
    traces = {(30.0, float(d)): simulate_hvac_population(
        units, np.full(horizon, 30.0), [(100, 100 + d)] if d else [], horizon)
        for d in (0, 30, 60)}
    with pytest.raises(ExtractionError, match="2 temperatures"):
        extract_peak_duration_curve(traces)


@pytest.fixture(scope="module")
def fitted_params():
    units = small_population(60)
    return units, build_clpu_params(units, [26.0, 30.0, 34.0, 38.0],
                                    [0, 30, 60, 120, 240, 420])


def test_build_pipeline_invariants(fitted_params):
    units, params = fitted_params
    params.validate()
    p_max_total = sum(u.rated_electric_power for u in units)
    assert params.p_max_clpu.sum() == pytest.approx(p_max_total, abs=1e-9)
    ks = params.k_steady(0, params.temps)
    assert np.all(ks >= 0.0) and np.all(ks <= 1.0)
    # ratio definition: k_steady * p_max == steady power
    for t in params.temps:
        assert params.k_steady(0, t) * params.p_max_lg(0) == pytest.approx(
            params.steady_lg(0, t), abs=1e-9)


def test_lookup_interpolates_and_clamps(fitted_params):
    _, params = fitted_params
    lo, hi = params.temps[0], params.temps[-1]
    assert params.tau(lo - 10.0) == params.tau(lo)
    assert params.tau(hi + 10.0) == params.tau(hi)
    mid = 0.5 * (params.temps[0] + params.temps[1])
    expect = 0.5 * (params.peak_duration_rate[0] + params.peak_duration_rate[1])
    assert params.tau(mid) == pytest.approx(expect, abs=1e-12)


def test_single_temperature_grid_constant_maps():
    units = small_population(40)
    params = build_clpu_params(units, [34.0], [0, 60, 120, 240, 420])
    assert params.tau(20.0) == params.tau(34.0) == params.tau(45.0)
    assert params.gamma(0.0) == params.gamma(34.0)


def test_serialization_round_trip(fitted_params):
    _, params = fitted_params
    text = params.to_json()
    back = ClpuParams.from_json(text)
    assert np.allclose(back.temps, params.temps)
    assert np.allclose(back.p_max_clpu, params.p_max_clpu)
    assert np.allclose(back.peak_duration_rate, params.peak_duration_rate)
    assert np.allclose(back.peak_duration_saturation, params.peak_duration_saturation)
    assert np.allclose(back.outage_saturation, params.outage_saturation)
    assert np.allclose(back.decay_rate, params.decay_rate)
    assert np.allclose(back.steady_power, params.steady_power)
    doc_keys = set(__import__("json").loads(text))
    assert {"p_max_clpu", "peak_duration_rate", "peak_duration_saturation",
            "outage_saturation", "decay_rate", "steady_power", "k_steady"} <= doc_keys


def test_decay_slower_when_hotter(fitted_params):
    _, params = fitted_params
    assert params.gamma(38.0) <= params.gamma(30.0) + 1e-9
