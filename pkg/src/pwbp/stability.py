"""Lyapunov functional, drift estimates and empirical stability verdicts."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import TYPE_CHECKING, Sequence

import numpy as np

if TYPE_CHECKING:
    from .dynamics import Layout, NetworkState

SLOPE_STABLE = 1e-3    # veh/s
SLOPE_UNSTABLE = 1e-2  # veh/s


def _G(s: np.ndarray) -> np.ndarray:
    return np.abs(s) ** 3 / 6.0


def unit_kernel(n: int) -> np.ndarray:
    """Cell-averaged kernel of |1 - u - v| on a uniform n-cell partition of [0, 1].

    Entry (i, j) is the exact integral over cell i x cell j, so for piecewise
    constant densities the double integral is evaluated without quadrature error.
    """
    edges = np.linspace(0.0, 1.0, n + 1)
    x0, x1 = edges[:-1, None], edges[1:, None]
    y0, y1 = edges[None, :-1], edges[None, 1:]
    return _G(1 - x0 - y0) - _G(1 - x1 - y0) - _G(1 - x0 - y1) + _G(1 - x1 - y1)


class _KernelCache:
    """Groups arcs by cell count so the quadratic forms batch per group."""

    def __init__(self, layout: "Layout"):
        groups: dict[int, list[int]] = {}
        for a, n in enumerate(layout.n_cells):
            groups.setdefault(int(n), []).append(a)
        self.groups = []
        for n, arcs in groups.items():
            arcs = np.array(arcs, dtype=int)
            cells = layout.offsets[arcs][:, None] + np.arange(n)[None, :]
            self.groups.append((arcs, cells, unit_kernel(n), layout.length[arcs] ** 2))


def _physical_c(layout: "Layout", c: np.ndarray | None) -> tuple[np.ndarray, np.ndarray]:
    """Per-(slot, arc) and per-queue constants from per-movement constants."""
    c = layout.m_c if c is None else np.asarray(c, dtype=float)
    slot_c = np.zeros((layout.K, len(layout.phys)))
    p = layout.phys_mov
    slot_c[layout.m_slot[p], layout.m_from[p]] = c[p]
    queue_c = np.zeros(layout.Q)
    s = layout.src_mov
    queue_c[layout.m_queue[s]] = c[s]
    return slot_c, queue_c


def lyapunov(layout: "Layout", state: "NetworkState", c: np.ndarray | None = None) -> float:
    """Network energy: half weighted squared source queues plus arc double integrals.

    ``c`` holds one non-negative constant per movement (defaults to the
    network's movement constants). Exit arcs carry no movement and do not
    contribute.
    """
    cache = getattr(layout, "_lyap_cache", None)
    if cache is None:
        cache = layout._lyap_cache = _KernelCache(layout)
    slot_c, queue_c = _physical_c(layout, c)
    total = 0.5 * float(np.dot(queue_c, state.queues ** 2))
    for arcs, cells, kern, l2 in cache.groups:
        rho = state.rho[:, cells]                      # (K, n_arcs, n)
        quad = np.einsum("kai,ij,kaj->ka", rho, kern, rho)
        total += 0.5 * float((slot_c[:, arcs] * quad * l2[None, :]).sum())
    return total


def drift_estimate(V: Sequence[float], window: int, dt: float = 1.0) -> float:
    """Average finite-difference dV/dt over the last ``window`` samples."""
    V = np.asarray(V, dtype=float)
    if len(V) < 2:
        raise ValueError("need at least 2 samples")
    if window < 2:
        raise ValueError("window too short: need at least 2 samples")
    w = V[-min(window, len(V)):]
    return float((w[-1] - w[0]) / ((len(w) - 1) * dt))


def trend_slope(times: Sequence[float], values: Sequence[float]) -> float:
    """Least-squares slope of ``values`` against ``times``."""
    t = np.asarray(times, dtype=float)
    y = np.asarray(values, dtype=float)
    if len(t) < 2:
        return 0.0
    tc = t - t.mean()
    denom = float((tc * tc).sum())
    return float((tc * (y - y.mean())).sum() / denom) if denom > 0 else 0.0


@dataclass(frozen=True)
class Thresholds:
    slope_stable: float = SLOPE_STABLE
    slope_unstable: float = SLOPE_UNSTABLE
    mass_bound: float = math.inf


def stability_verdict(times: Sequence[float], source_queue_total: Sequence[float],
                      total_vehicles: Sequence[float] | None = None,
                      thresholds: Thresholds = Thresholds()) -> tuple[str, float]:
    """Classify a completed run from the second-half trend of total source queues.

    Returns ``(verdict, slope)`` with verdict in {"stable", "unstable",
    "inconclusive"}.
    """
    t = np.asarray(times, dtype=float)
    q = np.asarray(source_queue_total, dtype=float)
    half = t >= t[0] + 0.5 * (t[-1] - t[0]) if len(t) else np.zeros(0, dtype=bool)
    slope = trend_slope(t[half], q[half])
    bounded = True
    if total_vehicles is not None:
        mean_mass = float(np.mean(total_vehicles)) if len(total_vehicles) else 0.0
        bounded = math.isfinite(mean_mass) and mean_mass <= thresholds.mass_bound
    if slope > thresholds.slope_unstable or not bounded:
        return "unstable", slope
    if slope < thresholds.slope_stable:
        return "stable", slope
    return "inconclusive", slope


@dataclass
class StabilityReport:
    times: list[float]
    lyapunov: list[float]
    time_avg_total: float
    time_avg_source_queue: float
    slope: float
    verdict: str
    thresholds: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


def build_report(times, V, total_vehicles, source_queue_total,
                 thresholds: Thresholds = Thresholds()) -> StabilityReport:
    verdict, slope = stability_verdict(times, source_queue_total, total_vehicles, thresholds)
    return StabilityReport(
        times=[float(x) for x in times],
        lyapunov=[float(x) for x in V],
        time_avg_total=float(np.mean(total_vehicles)) if len(total_vehicles) else 0.0,
        time_avg_source_queue=float(np.mean(source_queue_total)) if len(source_queue_total) else 0.0,
        slope=slope,
        verdict=verdict,
        thresholds=asdict(thresholds),
    )
