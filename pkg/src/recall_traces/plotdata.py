"""Turn run artifacts into plot-ready tables: smoothed curves, seed bands, heatmaps."""

from __future__ import annotations

import csv
import io
import re
from pathlib import Path

import numpy as np

from .orchestrator import moving_average
from .runner import atomic_write

_SEED_CSV = re.compile(r"^seed(\d+)\.csv$")


def read_metrics_csv(path) -> dict[str, np.ndarray]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    steps = np.array([int(r["env_steps"]) for r in rows], dtype=np.int64)
    returns = np.array([float(r["return"]) for r in rows], dtype=float)
    return {"env_steps": steps, "return": returns}


def read_visits_csv(path) -> np.ndarray:
    return np.loadtxt(path, delimiter=",", dtype=np.int64, ndmin=2)


def find_runs(root) -> dict[str, dict[int, Path]]:
    """``{group: {seed: csv path}}`` where a group is the directory holding the seed files."""
    root = Path(root)
    groups: dict[str, dict[int, Path]] = {}
    for p in sorted(root.rglob("seed*.csv")):
        m = _SEED_CSV.match(p.name)
        if m:
            key = str(p.parent.relative_to(root)) if p.parent != root else "."
            groups.setdefault(key, {})[int(m.group(1))] = p
    return groups


def seed_band(curves: list[tuple[np.ndarray, np.ndarray]]):
    """Mean and standard error across seeds on the union of episode end points.

    Each curve is ``(env_steps, value)``; between episode ends a curve
    holds its last value, and a seed contributes only once it has at least
    one completed episode. Returns ``(steps, mean, stderr, n)``.
    """
    grid = np.unique(np.concatenate([s for s, _ in curves])) if curves else np.zeros(0, int)
    vals = np.full((len(curves), grid.size), np.nan)
    for i, (steps, v) in enumerate(curves):
        idx = np.searchsorted(steps, grid, side="right") - 1
        ok = idx >= 0
        vals[i, ok] = v[idx[ok]]
    n = np.sum(~np.isnan(vals), axis=0)
    mean = np.nanmean(vals, axis=0) if len(curves) else np.zeros(0)
    stderr = np.zeros(grid.size)
    multi = n > 1
    if np.any(multi):
        stderr[multi] = np.nanstd(vals[:, multi], axis=0, ddof=1) / np.sqrt(n[multi])
    return grid, mean, stderr, n


def pgm_text(grid: np.ndarray, maxval: int = 255) -> str:
    """Plain (P2) greymap, counts scaled linearly so the busiest cell is ``maxval``."""
    grid = np.asarray(grid)
    top = grid.max() if grid.size else 0
    scaled = np.zeros(grid.shape, dtype=np.int64) if top <= 0 else np.rint(
        grid * (maxval / top)).astype(np.int64)
    h, w = grid.shape
    lines = ["P2", f"{w} {h}", str(maxval)]
    lines += [" ".join(str(v) for v in row) for row in scaled]
    return "\n".join(lines) + "\n"


def _table(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def write_plot_data(run_dir, out_dir=None, window: int = 10) -> list[Path]:
    """Write plot tables for every run group below ``run_dir``; returns written paths."""
    run_dir = Path(run_dir)
    groups = find_runs(run_dir)
    if not groups:
        raise FileNotFoundError(f"no seed*.csv metrics under {run_dir}")
    out_dir = run_dir / "plot-data" if out_dir is None else Path(out_dir)
    written = []
    for group, seeds in groups.items():
        if Path(group).parts[:1] == ("plot-data",):
            continue
        name = group.replace("/", "__") if group != "." else "run"
        curves = []
        for seed, path in sorted(seeds.items()):
            m = read_metrics_csv(path)
            smooth = moving_average(m["return"], window)
            curves.append((m["env_steps"], smooth))
            p = out_dir / f"{name}.seed{seed}.smoothed.csv"
            atomic_write(p, _table(["env_steps", "return", "smoothed"],
                                   [(int(s), repr(float(r)), repr(float(v)))
                                    for s, r, v in zip(m["env_steps"], m["return"], smooth)]))
            written.append(p)
            visits = path.with_name(f"seed{seed}.visits.csv")
            if visits.exists():
                grid = read_visits_csv(visits)
                p = out_dir / f"{name}.seed{seed}.heatmap.csv"
                atomic_write(p, _table([f"c{j}" for j in range(grid.shape[1])], grid.tolist()))
                q = out_dir / f"{name}.seed{seed}.heatmap.pgm"
                atomic_write(q, pgm_text(grid))
                written += [p, q]
        steps, mean, stderr, n = seed_band(curves)
        p = out_dir / f"{name}.band.csv"
        atomic_write(p, _table(["env_steps", "mean", "stderr", "lower", "upper", "n_seeds"],
                               [(int(s), repr(float(m)), repr(float(e)), repr(float(m - e)),
                                 repr(float(m + e)), int(k))
                                for s, m, e, k in zip(steps, mean, stderr, n)]))
        written.append(p)
    return written
