"""Config loading and deterministic metric / plot-data emission."""

from __future__ import annotations

import csv
import json
import math
import os
from pathlib import Path
from typing import Any, Iterable, Mapping, Sequence

from .control import ControlDecision
from .network import ConfigError, Network, build_network
from .scenarios import MetricsSeries, SweepResult

OUT_DIR_ENV = "PWBP_OUT_DIR"
METRIC_COLUMNS = ("time", "total_vehicles", "source_queue_total", "throughput", "delay_rate",
                  "lyapunov_V", "active_phases")


def fmt(x: Any) -> str:
    """Stable text form: shortest round-trip repr for floats."""
    if isinstance(x, str):
        return x
    if isinstance(x, bool):
        return "1" if x else "0"
    if isinstance(x, int):
        return str(x)
    x = float(x)
    if math.isnan(x):
        return "nan"
    if math.isinf(x):
        return "inf" if x > 0 else "-inf"
    if x == 0:
        return "0"
    return repr(x)


def out_dir(path: str | os.PathLike | None) -> Path:
    p = Path(path or os.environ.get(OUT_DIR_ENV) or "out")
    p.mkdir(parents=True, exist_ok=True)
    return p


def read_config(path: str | os.PathLike) -> dict:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {str(path)!r}: {exc.strerror or exc}") from exc
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {str(path)!r} is not valid JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise ConfigError("config document must be a JSON object")
    return doc


def load_config(path: str | os.PathLike, dt: float | None = None) -> Network:
    """Parse and validate a config file; ``dt`` overrides ``sim.dt``."""
    doc = read_config(path)
    if dt is not None:
        doc.setdefault("sim", {})["dt"] = float(dt)
    return build_network(doc)


def _write_rows(path: Path, header: Sequence[str], rows: Iterable[Sequence[Any]]) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([fmt(v) for v in row])
    return path


def write_metrics_csv(series: MetricsSeries, path: str | os.PathLike) -> Path:
    return _write_rows(Path(path), METRIC_COLUMNS,
                       ([r[c] for c in METRIC_COLUMNS] for r in series.rows()))


def write_json(obj: Any, path: str | os.PathLike) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(_jsonable(obj), indent=2, sort_keys=True) + "\n")
    return path


def _jsonable(obj: Any) -> Any:
    if isinstance(obj, Mapping):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if hasattr(obj, "tolist"):
        return obj.tolist()
    if isinstance(obj, float) and not math.isfinite(obj):
        return None if math.isnan(obj) else ("inf" if obj > 0 else "-inf")
    return obj


def write_audit(decisions: Sequence[ControlDecision], path: str | os.PathLike) -> Path:
    """Decision log: time, node, candidate scores, chosen phase, tie flag."""
    rows = ((d.time, d.node, " ".join(fmt(s) for s in d.scores), d.phase, d.tie)
            for d in decisions)
    return _write_rows(Path(path), ("time", "node", "scores", "phase", "tie"), rows)


def emit_plot_data(runs: MetricsSeries | Sequence[MetricsSeries] | SweepResult,
                   path: str | os.PathLike, kind: str = "metrics") -> Path:
    """Long-format CSV for plotting.

    ``kind="metrics"`` writes (run_id, t, metric, value) rows for one or more
    runs. A :class:`SweepResult` writes one row per tested point with
    (run_id=policy, t=ray, metric=verdict, value=scale), usable as a scatter.
    """
    path = Path(path)
    if isinstance(runs, SweepResult) or kind == "frontier":
        res: SweepResult = runs
        rows = ((res.policy, p.ray, p.verdict, p.scale) for p in res.points)
        return _write_rows(path, ("run_id", "t", "metric", "value"), rows)
    if isinstance(runs, MetricsSeries):
        runs = [runs]

    def gen():
        for s in runs:
            for i in range(len(s.time)):
                for m in MetricsSeries.NUMERIC:
                    yield s.run_id, s.time[i], m, getattr(s, m)[i]

    return _write_rows(path, ("run_id", "t", "metric", "value"), gen())


def write_sweep_csv(result: SweepResult, path: str | os.PathLike) -> Path:
    rows = ((p.ray, p.scale, p.verdict, p.slope, p.avg_delay, p.flagged) for p in result.points)
    return _write_rows(Path(path), ("ray", "scale", "verdict", "slope", "avg_delay", "flagged"),
                       rows)
