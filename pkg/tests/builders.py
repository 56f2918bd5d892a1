"""Small networks and hand-built states shared by the test modules."""

from __future__ import annotations

import numpy as np

from pwbp.dynamics import Layout, NetworkState, initial_state
from pwbp.fixtures import FD, grid_config
from pwbp.network import build_network

JAM = FD["jam_density"]


def nwc_config() -> dict:
    """Eastbound a -> b crossing a northbound c -> d at node n.

    a is 400 m (20 cells), b is 200 m (10 cells) and drains to exit e at m.
    """
    return {
        "schema_version": 1,
        "sim": {"dt": 1.0, "horizon": 60.0, "cell_length": 20.0},
        "defaults": {"fd": FD, "lanes": 1, "cadence": 10.0},
        "nodes": [{"id": "u"}, {"id": "v"}, {"id": "n"}, {"id": "m"}],
        "arcs": [
            {"id": "a", "from": "u", "to": "n", "length": 400.0},
            {"id": "b", "from": "n", "to": "m", "length": 200.0},
            {"id": "c", "from": "v", "to": "n", "length": 200.0},
            {"id": "d", "from": "n", "to": None, "length": 200.0},
            {"id": "e", "from": "m", "to": None, "length": 200.0},
        ],
        "arrivals": [
            {"id": "sa", "node": "u", "rates": {"a": 0.0}},
            {"id": "sc", "node": "v", "rates": {"c": 0.0}},
        ],
        "movements": [
            {"id": "sa>a", "from": "sa", "to": "a"},
            {"id": "sc>c", "from": "sc", "to": "c"},
            {"id": "E", "from": "a", "to": "b"},
            {"id": "N", "from": "c", "to": "d"},
            {"id": "b>e", "from": "b", "to": "e"},
        ],
        "phases": [
            {"id": "u.go", "node": "u", "movements": ["sa>a"]},
            {"id": "v.go", "node": "v", "movements": ["sc>c"]},
            {"id": "east", "node": "n", "movements": ["E"]},
            {"id": "north", "node": "n", "movements": ["N"]},
            {"id": "m.go", "node": "m", "movements": ["b>e"]},
        ],
    }


def nwc_state(layout: Layout, case: str) -> NetworkState:
    """The three non-work-conserving configurations.

    a: queue of 14 cells at a's stop line, b completely jammed.
    b: same upstream queue, b jammed only in its first 3 cells.
    c: 14 jammed cells at a's entrance (stop line empty), b empty.
    Cross street c always has one jammed cell at its stop line.
    """
    st = initial_state(layout)
    rho = st.rho
    a, b, c = (layout.arc_cells(x) for x in "abc")
    if case in ("a", "b"):
        rho[0, a.stop - 14:a.stop] = JAM
    else:
        rho[0, a.start:a.start + 14] = JAM
    if case == "a":
        rho[0, b] = JAM
    elif case == "b":
        rho[0, b.start:b.start + 3] = JAM
    rho[0, c.stop - 1] = JAM
    return st


def two_node_config() -> dict:
    """Two adjacent signalized nodes (4 and 3 phases) for decomposition checks."""
    return {
        "schema_version": 1,
        "sim": {"dt": 1.0, "horizon": 60.0, "cell_length": 20.0},
        "defaults": {"fd": FD, "lanes": 1, "cadence": 10.0},
        "nodes": [{"id": "A"}, {"id": "B"}],
        "arcs": [
            {"id": "AB", "from": "A", "to": "B", "length": 200.0,
             "splits": {"Bx": 0.4, "By": 0.6}},
            {"id": "Ax", "from": "A", "to": None, "length": 100.0},
            {"id": "Bx", "from": "B", "to": None, "length": 100.0},
            {"id": "By", "from": "B", "to": None, "length": 100.0},
        ],
        "arrivals": [
            {"id": "s1", "node": "A", "rates": {"AB": 0.1, "Ax": 0.1}},
            {"id": "s2", "node": "A", "rates": {"AB": 0.1, "Ax": 0.1}},
            {"id": "s3", "node": "B", "rates": {"Bx": 0.1}},
        ],
        "movements": [
            {"id": "s1>AB", "from": "s1", "to": "AB"},
            {"id": "s1>Ax", "from": "s1", "to": "Ax"},
            {"id": "s2>AB", "from": "s2", "to": "AB"},
            {"id": "s2>Ax", "from": "s2", "to": "Ax"},
            {"id": "AB>Bx", "from": "AB", "to": "Bx"},
            {"id": "AB>By", "from": "AB", "to": "By"},
            {"id": "s3>Bx", "from": "s3", "to": "Bx"},
        ],
        "phases": [
            {"id": "A1", "node": "A", "movements": ["s1>AB", "s2>Ax"]},
            {"id": "A2", "node": "A", "movements": ["s1>Ax"]},
            {"id": "A3", "node": "A", "movements": ["s2>AB", "s1>Ax"]},
            {"id": "A4", "node": "A", "movements": ["s1>AB", "s2>AB"]},
            {"id": "B1", "node": "B", "movements": ["AB>Bx", "AB>By"]},
            {"id": "B2", "node": "B", "movements": ["s3>Bx"]},
            {"id": "B3", "node": "B", "movements": ["AB>By", "s3>Bx"]},
        ],
    }


def single_cell_grid_config() -> dict:
    """Grid fixture with every physical arc collapsed to one cell."""
    cfg = grid_config(phase_set=4)
    for arc in cfg["arcs"]:
        arc["cells"] = 1
    return cfg


def random_state(layout: Layout, rng: np.random.Generator, fill: float = 1.0,
                 queue_scale: float = 30.0) -> NetworkState:
    """Feasible random state: per-cell totals below jam, split among valid commodities."""
    st = initial_state(layout)
    total = rng.uniform(0.0, fill, layout.C) * layout.base.jam
    w = rng.random((layout.K, layout.C)) * layout.slot_valid
    w /= np.where(w.sum(axis=0) > 0, w.sum(axis=0), 1.0)
    st.rho[:] = w * total
    st.queues[:] = rng.uniform(0.0, queue_scale, layout.Q)
    return st


def layout_of(cfg: dict) -> Layout:
    return Layout(build_network(cfg))
