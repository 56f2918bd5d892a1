import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from builders import layout_of, nwc_config, random_state, two_node_config
from pwbp.dynamics import initial_state
from pwbp.stability import (Thresholds, build_report, drift_estimate, lyapunov, stability_verdict,
                            trend_slope, unit_kernel)


def _quadrature_V(layout, state, sub=40):
    """Independent oracle: midpoint rule on a refined grid, summed movement by movement."""
    g = layout.network
    total = 0.0
    for m in g.movements.values():
        if g.arcs[m.from_arc].is_source:
            q = state.queues[layout.queue_keys.index((m.from_arc, m.to_arc))]
            total += 0.5 * m.c * q * q
            continue
        arc = g.arcs[m.from_arc]
        i = layout.arc_index[arc.id]
        rho = state.rho[layout.commodities[i].index(m.to_arc), layout.arc_cells(arc.id)]
        fine = np.repeat(rho, sub)
        h = arc.length / fine.size
        x = (np.arange(fine.size) + 0.5) * h
        kern = np.abs(arc.length - x[:, None] - x[None, :])
        total += 0.5 * m.c / arc.length * float(fine @ kern @ fine) * h * h
    return total


def test_uniform_arc_closed_form():
    # one movement, uniform rho0 on length l: c rho0^2 l^2 / 6
    lay = layout_of(nwc_config())
    s = initial_state(lay)
    s.rho[0, lay.arc_cells("b")] = 0.1
    assert lyapunov(lay, s) == pytest.approx(0.1 ** 2 * 200.0 ** 2 / 6, rel=1e-12)


def test_source_queue_term():
    lay = layout_of(nwc_config())
    s = initial_state(lay)
    s.queues[:] = [4.0, 2.0]
    assert lyapunov(lay, s) == pytest.approx(0.5 * (16 + 4))


@settings(max_examples=15, deadline=None)
@given(seed=st.integers(0, 2**31 - 1))
def test_matches_refined_quadrature(seed):
    lay = layout_of(two_node_config())
    s = random_state(lay, np.random.default_rng(seed))
    assert lyapunov(lay, s) == pytest.approx(_quadrature_V(lay, s), rel=2e-3)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), alpha=st.floats(0.0, 1.0))
def test_nonnegative_and_quadratic(seed, alpha):
    lay = layout_of(two_node_config())
    s = random_state(lay, np.random.default_rng(seed))
    V = lyapunov(lay, s)
    assert V >= 0
    s.rho *= alpha
    s.queues *= alpha
    assert lyapunov(lay, s) == pytest.approx(alpha ** 2 * V, rel=1e-10, abs=1e-12)


def test_empty_network_has_zero_energy():
    lay = layout_of(two_node_config())
    assert lyapunov(lay, initial_state(lay)) == 0.0


def test_unit_kernel_totals():
    for n in (1, 2, 7, 20):
        assert unit_kernel(n).sum() == pytest.approx(1 / 3)
        assert np.all(unit_kernel(n) >= 0)


def test_kernel_symmetric_under_reflection():
    # |l - x - y| is unchanged by x -> l - x, y -> l - y
    lay = layout_of(nwc_config())
    a = lay.arc_cells("a")
    front, back = initial_state(lay), initial_state(lay)
    front.rho[0, a.stop - 3:a.stop] = 0.1
    back.rho[0, a.start:a.start + 3] = 0.1
    assert lyapunov(lay, front) == pytest.approx(lyapunov(lay, back))


def test_drift_estimate():
    V = np.arange(10.0) * 2.0
    assert drift_estimate(V, 5, dt=0.5) == pytest.approx(4.0)
    with pytest.raises(ValueError):
        drift_estimate([1.0], 5)
    with pytest.raises(ValueError):
        drift_estimate(V, 1)


def test_trend_slope_exact_line():
    t = np.linspace(0, 100, 51)
    assert trend_slope(t, 3.0 - 0.02 * t) == pytest.approx(-0.02)


@pytest.mark.parametrize("slope, verdict", [
    (0.0, "stable"), (5e-4, "stable"), (5e-3, "inconclusive"), (2e-2, "unstable"),
])
def test_verdict_thresholds(slope, verdict):
    t = np.arange(0, 7200.0, 10.0)
    q = 3.0 + slope * t
    assert stability_verdict(t, q)[0] == verdict


def test_verdict_uses_second_half_only():
    t = np.arange(0, 7200.0, 10.0)
    q = np.where(t < 3600, 0.05 * t, 180.0)  # warm-up growth then flat
    assert stability_verdict(t, q)[0] == "stable"


def test_mass_bound_forces_unstable():
    t = np.arange(0, 100.0)
    v, slope = stability_verdict(t, np.zeros_like(t), np.full_like(t, 500.0),
                                 Thresholds(mass_bound=100.0))
    assert v == "unstable"


def test_report_serializes():
    t = np.arange(0, 50.0)
    rep = build_report(t, np.ones_like(t), np.full_like(t, 2.0), np.zeros_like(t))
    doc = json.loads(rep.to_json())
    assert doc["verdict"] == "stable"
    assert doc["time_avg_total"] == 2.0
    assert doc["thresholds"]["slope_unstable"] == 1e-2
