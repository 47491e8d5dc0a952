"""Predefined comparison grids over the four-room task."""

from __future__ import annotations

import csv
import io
import json
from pathlib import Path

import numpy as np

from .config import validate
from .runner import atomic_write, run_experiment

SUITES = ("trace_length", "update_ratio", "random_backward", "per_compare")

TRACE_LENGTHS = (1, 3, 5, 10)
UPDATE_RATIOS = ("1:1", "2:1", "5:1", "1:2", "1:5")


def suite_variants(suite: str) -> list[tuple[str, str, dict]]:
    """``[(variant label, method, loop overrides)]`` for a suite."""
    if suite == "trace_length":
        return [(f"trace_length={n}", "recall_traces", {"trace_length": n})
                for n in TRACE_LENGTHS]
    if suite == "update_ratio":
        return [(f"ratio={r}", "recall_traces", {"env_to_trace_ratio": r})
                for r in UPDATE_RATIOS]
    if suite == "random_backward":
        return [("learned", "recall_traces", {}), ("random", "random_backtrack", {})]
    if suite == "per_compare":
        return [("recall_traces", "recall_traces", {}), ("per", "per", {}),
                ("baseline_ac", "baseline_ac", {})]
    raise ValueError(f"unknown suite {suite!r}; expected one of {SUITES}")


SUMMARY_COLUMNS = ("variant", "method", "n_seeds", "median_auc", "median_steps_to_threshold",
                   "n_reached", "median_distinct_states", "median_final_return", "n_aborted")


def _median_or_none(vals):
    vals = [v for v in vals if v is not None]
    return float(np.median(vals)) if vals else None


def run_ablation(suite: str, env_size: int = 15, seeds=(0, 1, 2, 3, 4),
                 total_env_steps: int = 100_000, output_dir: str = "runs") -> list[dict]:
    """Run every variant of ``suite`` and write ``summary.csv``/``summary.json``.

    Returns one summary row per variant.
    """
    rows = []
    root = Path(output_dir) / f"ablate_{suite}_{env_size}"
    for label, method, loop in suite_variants(suite):
        cfg = validate({
            "experiment_id": label.replace("=", "_").replace(":", "-"),
            "env": {"kind": "fourroom", "size": env_size},
            "method": method, "seeds": list(seeds),
            "loop": {"total_env_steps": total_env_steps, **loop},
            "output_dir": str(root)})
        results = run_experiment(cfg)
        summaries = [json.loads(Path(r.summary_path).read_text()) for r in results]
        steps = [s["steps_to_threshold"] for s in summaries]
        # runs that never reach the threshold count as taking forever
        med_steps = float(np.median([np.inf if v is None else v for v in steps]))
        rows.append({
            "variant": label, "method": method, "n_seeds": len(summaries),
            "median_auc": _median_or_none([s["auc"] for s in summaries]),
            "median_steps_to_threshold": med_steps if np.isfinite(med_steps) else None,
            "n_reached": sum(v is not None for v in steps),
            "median_distinct_states": _median_or_none([s["distinct_states"] for s in summaries]),
            "median_final_return": _median_or_none([s["final_return"] for s in summaries]),
            "n_aborted": sum(bool(s["aborted"]) for s in summaries),
        })
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=SUMMARY_COLUMNS, lineterminator="\n")
    w.writeheader()
    w.writerows(rows)
    atomic_write(root / "summary.csv", buf.getvalue())
    atomic_write(root / "summary.json",
                 json.dumps({"suite": suite, "env_size": env_size, "seeds": list(seeds),
                             "total_env_steps": total_env_steps, "rows": rows},
                            indent=2) + "\n")
    return rows
