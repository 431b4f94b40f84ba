"""Comparison reports and plot-ready data built from persisted traces."""
from __future__ import annotations

import csv
from pathlib import Path

import numpy as np

from ..errors import ConfigError
from .traces import find_traces, format_value, read_sidecar, read_trace

ACCOUNTINGS = ("fwd_examples", "fwd_examples_fb")
METRICS = ("objective", "train_acc", "test_acc", "wall_ms")


def load_set(source) -> list[dict]:
    """Traces of one set: a directory of ``rep_*.csv`` files or a list of paths."""
    paths = find_traces(source) if isinstance(source, (str, Path)) and Path(source).is_dir() else list(source)
    if not paths:
        raise ConfigError(f"no traces found in {source}")
    return [read_trace(p) for p in paths]


def discover_sets(directory) -> dict[str, list[dict]]:
    """Group traces under ``directory`` by their parent folder name."""
    directory = Path(directory)
    groups: dict[str, list] = {}
    for p in find_traces(directory):
        label = directory.name if p.parent == directory else str(p.parent.relative_to(directory))
        groups.setdefault(label, []).append(p)
    return {label: [read_trace(p) for p in paths] for label, paths in sorted(groups.items())}


def step_interpolate(x, y, grid):
    """Value of the last record with ``x <= g`` for each grid point (first value before the start)."""
    idx = np.searchsorted(x, grid, side="right") - 1
    return y[np.clip(idx, 0, len(y) - 1)]


def median_curve(traces, x_col, y_col, grid):
    curves = [step_interpolate(t[x_col], t[y_col], grid) for t in traces]
    return np.median(np.array(curves), axis=0)


def _as_traces(source):
    if isinstance(source, list) and source and isinstance(source[0], dict):
        return source
    return load_set(source)


def _common_metrics(sets):
    metrics = []
    for m in METRICS:
        if all(m in t and not np.isnan(t[m]).all() for traces in sets.values() for t in traces):
            metrics.append(m)
    return metrics


def compare_report(sets: dict, out_dir, name: str = "report") -> tuple[Path, Path]:
    """Align median metrics of several trace sets on cumulative forward cost.

    ``sets`` maps a label to a directory or list of trace paths (or to
    already loaded traces). Writes ``<name>.csv`` (one row per accounting
    and cost value, with per-set medians and differences to the first set)
    and ``<name>.md`` (summary plus, for vanilla/memory sweeps, a per-k
    pairing table). Returns both paths.
    """
    if len(sets) < 2:
        raise ConfigError("compare needs at least two trace sets")
    loaded = {k: _as_traces(v) for k, v in sets.items()}
    columns = set.intersection(*(set(t) for traces in loaded.values() for t in traces))
    for acc in ACCOUNTINGS:
        if acc not in columns:
            raise ConfigError(f"trace sets do not share the {acc!r} column")
    metrics = _common_metrics(loaded)
    labels = list(loaded)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    csv_path, md_path = out_dir / f"{name}.csv", out_dir / f"{name}.md"

    header = ["accounting", "cost"]
    for m in metrics:
        header += [f"{lab}:{m}" for lab in labels]
        header += [f"delta:{lab}:{m}" for lab in labels[1:]]
    with open(csv_path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for acc in ACCOUNTINGS:
            grid = np.unique(np.concatenate([t[acc] for traces in loaded.values() for t in traces]))
            cols = []
            for m in metrics:
                curves = [median_curve(loaded[lab], acc, m, grid) for lab in labels]
                cols += curves
                cols += [c - curves[0] for c in curves[1:]]
            for i, g in enumerate(grid):
                w.writerow([acc, format_value(g)] + [format_value(c[i]) for c in cols])

    lines = [f"# {name}", "", "Medians over replicates at the end of each run.", ""]
    head = ["set", "replicates", "iterations", "fwd_examples", "fwd_examples_fb"] + metrics
    lines += ["| " + " | ".join(head) + " |", "|" + "---|" * len(head)]
    for lab in labels:
        traces = loaded[lab]
        row = [lab, str(len(traces)),
               format_value(np.median([t["iter"][-1] for t in traces])),
               format_value(np.median([t["fwd_examples"][-1] for t in traces])),
               format_value(np.median([t["fwd_examples_fb"][-1] for t in traces]))]
        row += [f"{np.median([t[m][-1] for t in traces]):.6g}" for m in metrics]
        lines.append("| " + " | ".join(row) + " |")
    lines += ["", "Cost accountings: `fwd_examples` counts example forward propagations; "
              "`fwd_examples_fb` counts a forward-backward pass as two forward propagations.", ""]
    pairs = pairing_table(loaded)
    if pairs:
        lines += ["## Vanilla versus memory", "",
                  "| group | vanilla final | memory final | memory iterations to vanilla final | budget |",
                  "|---|---|---|---|---|"]
        for p in pairs:
            lines.append(f"| {p['group']} | {p['vanilla_final']:.6g} | {p['memory_final']:.6g} | "
                         f"{format_value(p['memory_hit'])} | {p['budget']} |")
        lines.append("")
    md_path.write_text("\n".join(lines))
    return csv_path, md_path


def iterations_to_reach(objective, level) -> float:
    """First iteration index whose objective is ``<= level`` (inf if never)."""
    hits = np.flatnonzero(np.asarray(objective) <= level)
    return float(hits[0]) if hits.size else float("inf")


def _split_label(label):
    parts = dict(p.split("=", 1) for p in Path(label).name.split(",") if "=" in p)
    variant = parts.pop("variant", None)
    return variant, ",".join(f"{k}={v}" for k, v in parts.items())


def pairing_table(sets: dict) -> list[dict]:
    """Pair ``variant=vanilla`` and ``variant=memory`` sets that agree on all other sweep keys.

    For each pair reports the median final objectives and the median (over
    memory replicates) of the first iteration at which the memory run is at
    or below the vanilla median final objective.
    """
    groups: dict[str, dict] = {}
    for label, traces in sets.items():
        variant, rest = _split_label(label)
        if variant in ("vanilla", "memory"):
            groups.setdefault(rest, {})[variant] = traces
    rows = []
    for group, pair in groups.items():
        if len(pair) != 2:
            continue
        van = float(np.median([t["objective"][-1] for t in pair["vanilla"]]))
        mem = float(np.median([t["objective"][-1] for t in pair["memory"]]))
        hit = float(np.median([iterations_to_reach(t["objective"], van) for t in pair["memory"]]))
        budget = int(np.median([t["iter"][-1] for t in pair["vanilla"]]))
        rows.append({"group": group, "vanilla_final": van, "memory_final": mem,
                     "memory_hit": hit, "budget": budget})
    return sorted(rows, key=lambda r: [_sort_value(p) for p in r["group"].split(",")])


def _sort_value(part):
    value = part.split("=", 1)[-1]
    try:
        return (0, float(value), "")
    except ValueError:
        return (1, 0.0, value)


def plot_data(directory, out_path) -> Path:
    """Per-set, per-iteration median and quartiles of objective and distance (long CSV)."""
    sets = discover_sets(directory)
    if not sets:
        raise ConfigError(f"no traces found in {directory}")
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    with open(out_path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["set", "metric", "iter", "median", "q25", "q75", "replicates"])
        for label, traces in sets.items():
            n = min(len(t["iter"]) for t in traces)
            iters = traces[0]["iter"][:n]
            for metric in ("objective", "dist_to_opt", "train_acc", "test_acc"):
                if not all(metric in t for t in traces):
                    continue
                vals = np.array([t[metric][:n] for t in traces])
                if np.isnan(vals).all():
                    continue
                med, q25, q75 = np.percentile(vals, [50, 25, 75], axis=0)
                for i in range(n):
                    w.writerow([label, metric, int(iters[i]), format_value(med[i]),
                                format_value(q25[i]), format_value(q75[i]), len(traces)])
    return out_path


def sidecars(directory) -> list[dict]:
    return [read_sidecar(p) for p in find_traces(directory)]
