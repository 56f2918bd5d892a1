import math

import numpy as np
import pytest

from builders import layout_of, nwc_config
from pwbp import ConfigError, build_network
from pwbp.fixtures import ex1_config, ex2_config, grid_config, riemann_config
from pwbp.scenarios import (IncidentSpec, SweepSpec, _majority, capacity_sweep, check_incidents,
                            incident_apply, recovery_experiment, recovery_time,
                            riemann_experiment, run_scenario, smooth, with_rates)


def test_same_seed_same_run():
    g = build_network(grid_config(n=2, horizon=300))
    a, _ = run_scenario(g, "pwbp", seed=4)
    b, _ = run_scenario(g, "pwbp", seed=4)
    c, _ = run_scenario(g, "pwbp", seed=5)
    for col in ("total_vehicles", "throughput", "lyapunov_V"):
        np.testing.assert_array_equal(getattr(a, col), getattr(b, col))
    assert a.active_phases == b.active_phases
    assert not np.array_equal(a.arrivals, c.arrivals)


@pytest.mark.parametrize("policy", ["ft", "bp", "cabp", "pwbp"])
def test_run_invariants(policy):
    g = build_network(grid_config(n=2, horizon=600))
    s, rep = run_scenario(g, policy, seed=1)
    assert np.abs(s.mass_error).max() < 1e-9
    assert s.min_density >= 0.0
    assert s.max_fill <= 1.0 + 1e-12
    assert len(s) == 600
    assert rep.verdict in ("stable", "unstable", "inconclusive")


def test_gridlock_fixture_stays_locked():
    g = build_network(ex2_config())
    for policy in ("ft", "pwbp"):
        s, _ = run_scenario(g, policy, seed=0)
        assert s.throughput.max() == 0.0
        assert np.ptp(s.lyapunov_V) < 1e-9 * s.lyapunov_V[0]


def test_gridlock_with_arrivals_grows_queue_only():
    g = build_network(ex2_config(rate=0.1, horizon=600))
    s, rep = run_scenario(g, "pwbp", seed=0)
    assert s.throughput.max() == 0.0
    assert s.source_queue_total[-1] == pytest.approx(60.0)
    assert rep.verdict == "unstable"


def test_ex1_light_and_heavy_demand():
    light, r1 = run_scenario(build_network(ex1_config(0.1, 0.1)), "pwbp", seed=0)
    heavy, r2 = run_scenario(build_network(ex1_config(0.4, 0.4)), "pwbp", seed=0)
    assert r1.verdict == "stable"
    assert r2.verdict == "unstable"
    assert light.avg_delay_per_vehicle < heavy.avg_delay_per_vehicle


def test_with_rates_keeps_proportions():
    g = build_network(grid_config())
    src = next(iter(g.arrivals))
    before = {b: g.arrivals[src].rate(b, 0.0) for b in g.arrivals[src].profiles}
    g2 = with_rates(g, {src: 1.0})
    after = {b: g2.arrivals[src].rate(b, 0.0) for b in g2.arrivals[src].profiles}
    assert sum(after.values()) == pytest.approx(1.0)
    for b in before:
        assert after[b] / 1.0 == pytest.approx(before[b] / sum(before.values()))
    with pytest.raises(ConfigError):
        with_rates(g, {"nope": 1.0})


def test_rate_profile_steps():
    g = with_rates(build_network(ex1_config()), {"1": [[0, 0.1], [100, 0.3]]})
    assert g.arrivals["1"].rate("3", 50) == pytest.approx(0.1)
    assert g.arrivals["1"].rate("3", 150) == pytest.approx(0.3)


# -- incidents --------------------------------------------------------------------


def test_incident_parameters():
    lay = layout_of(grid_config())
    inc = IncidentSpec("n11-n12", 100.0, 200.0, 2, cells=(5, 10))
    assert incident_apply(lay, [inc], 50.0) is lay.base
    assert incident_apply(lay, [inc], 200.0) is lay.base
    p = incident_apply(lay, [inc], 150.0)
    off = lay.offsets[lay.arc_index["n11-n12"]]
    np.testing.assert_allclose(p.capacity[off + 5:off + 10], lay.base.capacity[off + 5] / 3)
    np.testing.assert_allclose(p.jam[off + 5:off + 10], lay.base.jam[off + 5] / 3)
    assert p.capacity[off + 4] == lay.base.capacity[off + 4]
    assert lay.base.capacity[off + 5] == pytest.approx(3 * 0.5625)  # baseline untouched


def test_full_closure_stops_flow():
    g = build_network(nwc_config())
    lay = layout_of(nwc_config())
    inc = IncidentSpec("b", 0.0, 100.0, 1)
    s, _ = run_scenario(g, "pwbp", arrivals={"sa": 0.3, "sc": 0.0}, horizon=100.0,
                        incidents=[inc])
    assert s.throughput.max() == 0.0
    assert incident_apply(lay, [inc], 10.0).jam[lay.arc_cells("b")].max() == 0.0


@pytest.mark.parametrize("inc", [
    IncidentSpec("n11-n12", 0.0, 10.0, 4),
    IncidentSpec("n11-n12", 10.0, 5.0, 1),
    IncidentSpec("n11-n12", 0.0, 10.0, 1, cells=(10, 30)),
    IncidentSpec("s.n00.EB", 0.0, 10.0, 1),
])
def test_bad_incidents(inc):
    with pytest.raises(ConfigError):
        check_incidents(layout_of(grid_config()), [inc])


def test_overlapping_incidents_rejected():
    lay = layout_of(grid_config())
    a = IncidentSpec("n11-n12", 0.0, 100.0, 1, cells=(0, 5))
    b = IncidentSpec("n11-n12", 50.0, 150.0, 1, cells=(4, 8))
    c = IncidentSpec("n11-n12", 100.0, 150.0, 1, cells=(4, 8))
    with pytest.raises(ConfigError, match="overlapping"):
        check_incidents(lay, [a, b])
    check_incidents(lay, [a, c])


# -- recovery -----------------------------------------------------------------------


def test_smooth_is_centred_average():
    np.testing.assert_allclose(smooth(np.array([0, 0, 3, 0, 0.0]), 3), [0, 1, 1, 1, 0])


def test_recovery_time_synthetic():
    t = np.arange(1.0, 10001.0)
    delay = np.full_like(t, 10.0)
    bump = (t > 3000) & (t <= 4000)
    delay[bump] = 50.0
    tail = (t > 4000) & (t <= 6000)
    delay[tail] = 50.0 - 40.0 * (t[tail] - 4000) / 2000  # linear decay back to 10
    # smoothed delay first reaches 11 about 1950 s after clearance (window 1 s)
    r = recovery_time(t, delay, 3000.0, 4000.0, smoothing=1.0)
    assert r == pytest.approx(1950.0, abs=1.0)
    assert recovery_time(t, np.where(t > 3000, 50.0, 10.0), 3000.0, 4000.0) == math.inf


def test_no_peak_means_no_recovery_needed():
    g = build_network(ex1_config())
    res = recovery_experiment(g, ["pwbp"], 0.1, 0.1, (100.0, 200.0), horizon=300)
    assert res[0].recovery_time == 0.0


def test_recovery_after_demand_peak():
    g = build_network(ex1_config())
    res = recovery_experiment(g, ["pwbp", "ft"], 0.05, 0.35, (1800.0, 2400.0), horizon=5400)
    for r in res:
        assert 0 < r.recovery_time < math.inf
        assert r.final_queue < 5


# -- sweeps -----------------------------------------------------------------------


def test_majority_rule():
    assert _majority(["stable", "stable", "unstable"]) == "stable"
    assert _majority(["stable", "unstable"]) == "unstable"
    assert _majority(["inconclusive", "inconclusive", "stable"]) == "inconclusive"
    assert _majority(["stable", "inconclusive"]) == "inconclusive"  # retried, then flagged


@pytest.mark.parametrize("kw", [dict(tol=0.0), dict(seeds=()), dict(lo=0.5, hi=0.4)])
def test_sweep_spec_validation(kw):
    with pytest.raises(ValueError):
        SweepSpec(**kw)


def test_sweep_spec_from_mapping():
    spec = SweepSpec.from_mapping({"replications": 2, "thresholds": {"slope_stable": 2e-3}})
    assert spec.seeds == (0, 1)
    assert spec.thresholds.slope_stable == 2e-3


def test_single_source_sweep_brackets_capacity():
    g = build_network(ex1_config())
    spec = SweepSpec(rays=({"1": 1.0},), lo=0.2, hi=0.6, tol=0.05, horizon=3600, seeds=(0,))
    res = capacity_sweep(g, spec)
    lo, hi = res.frontier[0], res.upper[0]
    assert hi - lo <= 0.05
    # source capacity 0.5 veh/s bounds the frontier
    assert 0.35 <= lo <= 0.5 < hi + 0.05
    assert [p.scale for p in res.points][0] == 0.6


# -- numerics ----------------------------------------------------------------------


def test_riemann_shock_speed_and_convergence():
    coarse = riemann_experiment(build_network(riemann_config(20.0)), "R", 0.02, 0.12, 60.0)
    fine = riemann_experiment(build_network(riemann_config(10.0)), "R", 0.02, 0.12, 60.0)
    # Rankine-Hugoniot: (Q(0.12) - Q(0.02)) / 0.1 = (0.15 - 0.3) / 0.1
    assert coarse.shock_speed == pytest.approx(-1.5)
    assert 1.5 <= coarse.mean_position_error / fine.mean_position_error <= 2.5
    assert coarse.final_position_error < 20.0
