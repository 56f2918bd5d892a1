"""Config builders for the shipped fixture networks.

The JSON files under ``pwbp/fixtures/`` are generated from these builders
(``python -m pwbp.fixtures``) and are kept in sync by the test suite.
"""

from __future__ import annotations

import json
from importlib import resources
from pathlib import Path

FD = {"v_free": 15.0, "wave_speed": 5.0, "jam_density": 0.15}

# ------------------------------------------------------------------ Ex1


def ex1_config(rate1: float = 0.05, rate2: float = 0.05, process: str = "poisson",
               horizon: float = 7200.0) -> dict:
    """Isolated intersection of two one-way streets fed by source arcs 1 and 2."""
    return {
        "schema_version": 1,
        "sim": {"dt": 1.0, "horizon": horizon, "cell_length": 20.0, "startup_time": 2.0},
        "defaults": {"fd": FD, "lanes": 1, "cadence": 10.0},
        "nodes": [{"id": "A"}],
        "arcs": [
            {"id": "3", "from": "A", "to": None, "length": 200.0},
            {"id": "4", "from": "A", "to": None, "length": 200.0},
        ],
        "arrivals": [
            {"id": "1", "node": "A", "rates": {"3": rate1}, "process": process, "capacity": 0.5},
            {"id": "2", "node": "A", "rates": {"4": rate2}, "process": process, "capacity": 0.5},
        ],
        "movements": [
            {"id": "m13", "from": "1", "to": "3"},
            {"id": "m24", "from": "2", "to": "4"},
        ],
        "phases": [
            {"id": "p1", "node": "A", "movements": ["m13"]},
            {"id": "p2", "node": "A", "movements": ["m24"]},
        ],
        "controller": {"policy": "pwbp", "fixed_time": {"A": {"plan": [["p1", 20], ["p2", 20]]}}},
    }


EX1_SATURATION = (0.5, 0.5)  # saturation flow of movements 1->3 and 2->4 (veh/s)

# ------------------------------------------------------------------ Ex2


def ex2_config(rate: float = 0.0, horizon: float = 1800.0) -> dict:
    """Four-node ring in gridlock: every ring arc is jammed with vehicles bound
    for the next (also jammed) ring arc."""
    ring = ["A", "B", "C", "D"]
    arcs, movements, phases = [], [], []
    jam = FD["jam_density"]
    for i, n in enumerate(ring):
        nxt = ring[(i + 1) % 4]
        after = ring[(i + 2) % 4]
        arcs.append({
            "id": f"{n}{nxt}", "from": n, "to": nxt, "length": 100.0,
            "splits": {f"{nxt}{after}": 0.5, f"{nxt}x": 0.5},
            "initial": {f"{nxt}{after}": jam},
        })
        arcs.append({"id": f"{n}x", "from": n, "to": None, "length": 100.0})
    for i, n in enumerate(ring):
        prev = ring[i - 1]
        nxt = ring[(i + 1) % 4]
        movements.append({"id": f"{prev}{n}>{n}{nxt}", "from": f"{prev}{n}", "to": f"{n}{nxt}"})
        movements.append({"id": f"{prev}{n}>{n}x", "from": f"{prev}{n}", "to": f"{n}x"})
        phases.append({"id": f"{n}.ring", "node": n, "movements": [f"{prev}{n}>{n}{nxt}"]})
        phases.append({"id": f"{n}.exit", "node": n, "movements": [f"{prev}{n}>{n}x"]})
    movements.append({"id": "s>AB", "from": "s", "to": "AB"})
    phases.append({"id": "A.source", "node": "A", "movements": ["s>AB"]})
    return {
        "schema_version": 1,
        "sim": {"dt": 1.0, "horizon": horizon, "cell_length": 20.0, "startup_time": 2.0},
        "defaults": {"fd": FD, "lanes": 1, "cadence": 10.0},
        "nodes": [{"id": n} for n in ring],
        "arcs": arcs,
        "arrivals": [{"id": "s", "node": "A", "rates": {"AB": rate}, "process": "deterministic"}],
        "movements": movements,
        "phases": phases,
        "controller": {"policy": "pwbp"},
    }


# ------------------------------------------------------------------ 3x3 grid

DIRS = {"EB": (0, 1), "WB": (0, -1), "NB": (-1, 0), "SB": (1, 0)}
LEFT = {"EB": "NB", "NB": "WB", "WB": "SB", "SB": "EB"}
RIGHT = {"EB": "SB", "SB": "WB", "WB": "NB", "NB": "EB"}
TURN_SPLIT = {"L": 0.2, "T": 0.6, "R": 0.2}


def _node(r: int, c: int) -> str:
    return f"n{r}{c}"


def grid_config(rate: float = 0.2, n: int = 3, phase_set: int = 8, length: float = 300.0,
                lanes: int = 2, incident_lanes: int = 3, horizon: float = 3600.0,
                process: str = "poisson", cadence: float = 5.0,
                ft_green: tuple[float, float] = (12.0, 4.0)) -> dict:
    """Signalized n x n grid with 4-leg intersections and turning commodities.

    Rows grow southward, columns eastward. Boundary approaches are source
    arcs; boundary departures are exit arcs. The eastbound arc leaving the
    centre node has ``incident_lanes`` lanes (incident site).
    """
    nodes, arcs, arrivals, movements, phases = [], [], [], [], []
    centre = (n // 2, n // 2)

    def inside(r, c):
        return 0 <= r < n and 0 <= c < n

    def out_arc(r, c, d):
        dr, dc = DIRS[d]
        rr, cc = r + dr, c + dc
        return f"{_node(r, c)}-{_node(rr, cc)}" if inside(rr, cc) else f"{_node(r, c)}>{d}"

    def in_arc(r, c, d):
        """Arc arriving at (r, c) while travelling in direction d."""
        dr, dc = DIRS[d]
        pr, pc = r - dr, c - dc
        return f"{_node(pr, pc)}-{_node(r, c)}" if inside(pr, pc) else f"s.{_node(r, c)}.{d}"

    turn_dir = {"L": LEFT, "T": {d: d for d in DIRS}, "R": RIGHT}
    for r in range(n):
        for c in range(n):
            node = _node(r, c)
            nodes.append({"id": node})
            for d in DIRS:
                dr, dc = DIRS[d]
                rr, cc = r + dr, c + dc
                arc_lanes = incident_lanes if ((r, c) == centre and d == "EB") else lanes
                if inside(rr, cc):
                    nxt = _node(rr, cc)
                    splits = {out_arc(rr, cc, turn_dir[t][d]): TURN_SPLIT[t] for t in "LTR"}
                    arcs.append({"id": out_arc(r, c, d), "from": node, "to": nxt,
                                 "length": length, "lanes": arc_lanes, "splits": splits})
                else:
                    arcs.append({"id": out_arc(r, c, d), "from": node, "to": None,
                                 "length": length, "lanes": arc_lanes})
            mids: dict[tuple[str, str], str] = {}
            for d in DIRS:
                src = in_arc(r, c, d)
                if src.startswith("s."):
                    arrivals.append({
                        "id": src, "node": node, "process": process,
                        "rates": {out_arc(r, c, turn_dir[t][d]): rate * TURN_SPLIT[t]
                                  for t in "LTR"},
                    })
                for t in "LTR":
                    mid = f"{node}.{d}.{t}"
                    mids[(d, t)] = mid
                    movements.append({"id": mid, "from": src, "to": out_arc(r, c, turn_dir[t][d])})

            def ph(name, keys):
                phases.append({"id": f"{node}.{name}", "node": node,
                               "movements": [mids[k] for k in keys]})

            ph("NS-TR", [("NB", "T"), ("NB", "R"), ("SB", "T"), ("SB", "R")])
            ph("NS-L", [("NB", "L"), ("SB", "L")])
            ph("EW-TR", [("EB", "T"), ("EB", "R"), ("WB", "T"), ("WB", "R")])
            ph("EW-L", [("EB", "L"), ("WB", "L")])
            if phase_set == 8:
                for d in ("NB", "SB", "EB", "WB"):
                    ph(f"{d}-all", [(d, t) for t in "LTR"])
    tr, lt = ft_green
    fixed = {
        _node(r, c): {"plan": [[f"{_node(r, c)}.NS-TR", tr], [f"{_node(r, c)}.NS-L", lt],
                               [f"{_node(r, c)}.EW-TR", tr], [f"{_node(r, c)}.EW-L", lt]],
                      "offset": 0.0}
        for r in range(n) for c in range(n)
    }
    return {
        "schema_version": 1,
        "sim": {"dt": 1.0, "horizon": horizon, "cell_length": 20.0, "startup_time": 2.0},
        "defaults": {"fd": FD, "lanes": lanes, "cadence": cadence},
        "nodes": nodes,
        "arcs": arcs,
        "arrivals": arrivals,
        "movements": movements,
        "phases": phases,
        "controller": {"policy": "pwbp", "fixed_time": fixed},
    }


GRID_INCIDENT_ARC = "n11-n12"

# ------------------------------------------------------------------ Riemann arc


def riemann_config(cell_length: float = 20.0, length: float = 2000.0) -> dict:
    """Single long arc used for Riemann-problem checks of the interior scheme."""
    return {
        "schema_version": 1,
        "sim": {"dt": 0.9 * cell_length / FD["v_free"], "horizon": 60.0,
                "cell_length": cell_length},
        "defaults": {"fd": FD, "lanes": 1},
        "nodes": [{"id": "A"}],
        "arcs": [{"id": "R", "from": "A", "to": None, "length": length}],
        "arrivals": [{"id": "s", "node": "A", "rates": {"R": 0.0}, "process": "deterministic"}],
        "movements": [{"id": "sR", "from": "s", "to": "R"}],
        "phases": [{"id": "go", "node": "A", "movements": ["sR"]}],
    }


BUILDERS = {
    "ex1": ex1_config,
    "ex2_gridlock": ex2_config,
    "grid3x3": grid_config,
    "riemann": riemann_config,
}


def fixture_path(name: str) -> Path:
    return Path(str(resources.files("pwbp") / "fixtures" / f"{name}.json"))


def load_fixture(name: str) -> dict:
    return json.loads(fixture_path(name).read_text())


def write_fixtures(directory: Path | None = None) -> list[Path]:
    directory = directory or Path(__file__).parent / "fixtures"
    directory.mkdir(parents=True, exist_ok=True)
    out = []
    for name, build in BUILDERS.items():
        path = directory / f"{name}.json"
        path.write_text(json.dumps(build(), indent=1) + "\n")
        out.append(path)
    return out


if __name__ == "__main__":
    for p in write_fixtures():
        print(p)
