"""Execute (method x seed) runs for an experiment config and write artifacts.

Each run writes three files under ``<output_dir>/<experiment_id>/<method>/``:
``seed<k>.csv`` (per-episode metrics), ``seed<k>.visits.csv`` (visitation
grid, four-room only) and ``seed<k>.summary.json``. Every file is written
to a temporary name and renamed into place.
"""

from __future__ import annotations

import json
import logging
import os
import tempfile
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .agent import PolicyCritic
from .backtrack import BacktrackModel, random_backtrack_model
from .buffer import PerBuffer, ReplayBuffer
from .config import ExperimentConfig
from .env import FourRoomEnv, PointMassEnv
from .orchestrator import RunMetrics, run_training

log = logging.getLogger(__name__)

THREADS_ENV = "RECALL_RL_THREADS"


def atomic_write(path, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def make_env(env_cfg: dict):
    kw = {k: v for k, v in env_cfg.items() if k != "kind"}
    if env_cfg["kind"] == "fourroom":
        return FourRoomEnv(**kw)
    return PointMassEnv(**kw)


def build_run(cfg: ExperimentConfig, method: str, seed: int):
    """Objects for one run: ``(env, pc, model, buf, loop_cfg, per)``."""
    env = make_env(cfg.env)
    loop = cfg.loop_config()
    agent = dict(cfg.agent)
    if "hidden" in agent:
        agent["hidden"] = tuple(agent["hidden"])
    if method == "per":
        # replay-only baseline runs without entropy regularization
        agent.setdefault("entropy_coef", 0.0)
    if env.discrete:
        pc = PolicyCritic(env.obs_dim, n_actions=env.n_actions, seed=seed, **agent)
    else:
        pc = PolicyCritic(env.obs_dim, act_dim=env.act_dim, seed=seed, **agent)
    buf = ReplayBuffer(**cfg.buffer)
    model = per = None
    model_seed = seed + 1000
    if method == "recall_traces":
        model = BacktrackModel(env, seed=model_seed, **cfg.backtrack)
    elif method == "random_backtrack":
        model = random_backtrack_model(env, seed=model_seed)
        loop.train_backward = False
    else:
        loop.n_traces = 0
    if method == "per":
        ps = cfg.per_settings()
        per = PerBuffer(capacity=ps["capacity"], per_alpha=ps["per_alpha"],
                        per_beta=ps["per_beta"])
        loop.per_batch = ps["batch"]
        loop.ac_steps_per_per_step = ps["ac_steps_per_per_step"]
    return env, pc, model, buf, loop, per


@dataclass
class RunResult:
    method: str
    seed: int
    csv_path: str
    summary_path: str
    aborted: str | None


def run_paths(cfg: ExperimentConfig, method: str, seed: int) -> dict:
    base = Path(cfg.output_dir) / cfg.experiment_id / method
    return {"csv": base / f"seed{seed}.csv", "visits": base / f"seed{seed}.visits.csv",
            "summary": base / f"seed{seed}.summary.json"}


def visits_csv(visits: np.ndarray) -> str:
    return "".join(",".join(str(int(v)) for v in row) + "\n" for row in visits)


def execute_run(cfg: ExperimentConfig, method: str, seed: int) -> RunResult:
    env, pc, model, buf, loop, per = build_run(cfg, method, seed)
    metrics: RunMetrics = run_training(env, pc, model, buf, loop, seed, per=per)
    paths = run_paths(cfg, method, seed)
    atomic_write(paths["csv"], metrics.csv_text())
    if metrics.visits is not None:
        atomic_write(paths["visits"], visits_csv(metrics.visits))
    summary = {"experiment_id": cfg.experiment_id, "method": method, "seed": seed,
               "config_hash": cfg.hash(), "env": cfg.env, **metrics.summary()}
    atomic_write(paths["summary"], json.dumps(summary, indent=2, sort_keys=True) + "\n")
    if metrics.aborted:
        log.error("%s seed %d aborted: %s", method, seed, metrics.aborted)
    return RunResult(method, seed, str(paths["csv"]), str(paths["summary"]), metrics.aborted)


def _execute(args):
    return execute_run(*args)


def stale_summaries(cfg: ExperimentConfig) -> list[str]:
    """Existing summaries under this config's paths that carry a different config hash."""
    h = cfg.hash()
    stale = []
    for m in cfg.methods:
        for s in cfg.seeds:
            p = run_paths(cfg, m, s)["summary"]
            if p.exists():
                try:
                    old = json.loads(p.read_text()).get("config_hash")
                except (OSError, json.JSONDecodeError):
                    old = None
                if old != h:
                    stale.append(str(p))
    return stale


def n_workers() -> int:
    raw = os.environ.get(THREADS_ENV, "1")
    try:
        return max(1, int(raw))
    except ValueError:
        log.warning("ignoring non-integer %s=%r", THREADS_ENV, raw)
        return 1


def run_experiment(cfg: ExperimentConfig, workers: int | None = None) -> list[RunResult]:
    """Run every (method, seed) pair; results come back in config order."""
    jobs = [(cfg, m, s) for m in cfg.methods for s in cfg.seeds]
    workers = n_workers() if workers is None else workers
    if workers <= 1 or len(jobs) == 1:
        return [_execute(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=min(workers, len(jobs))) as pool:
        return list(pool.map(_execute, jobs))
