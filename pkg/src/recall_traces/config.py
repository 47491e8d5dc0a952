"""Experiment configuration: JSON schema, validation and hashing."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field

from .orchestrator import LoopConfig

METHODS = ("baseline_ac", "recall_traces", "per", "random_backtrack")
ENV_KINDS = ("fourroom", "pointmass")

# prioritized replay settings per four-room size: (batch, per_alpha, per_beta)
PER_TABLE = {11: (200, 0.8, 0.1), 13: (2000, 0.8, 0.1), 15: (1000, 0.95, 0.1)}

ENV_FIELDS = {"kind": str, "size": int, "slip": float, "max_steps": int, "noise_std": float}
ENV_KIND_FIELDS = {"fourroom": {"kind", "size", "slip", "max_steps"},
                   "pointmass": {"kind", "noise_std", "max_steps"}}
AGENT_FIELDS = {"alpha": float, "gamma": float, "lam": float, "entropy_coef": float,
                "value_coef": float, "max_grad_norm": float, "hidden": list}
BUFFER_FIELDS = {"capacity": int, "k_traj": int, "k_pct": float}
BACKTRACK_FIELDS = {"beta": float, "hidden": int}
PER_FIELDS = {"capacity": int, "per_alpha": float, "per_beta": float, "batch": int,
              "ac_steps_per_per_step": int}
LOOP_FIELDS = {f.name: f.type for f in dataclasses.fields(LoopConfig)}
TOP_FIELDS = {"experiment_id": str, "env": dict, "method": str, "methods": list, "seeds": list,
              "loop": dict, "agent": dict, "buffer": dict, "backtrack": dict, "per": dict,
              "output_dir": str}


class ConfigError(ValueError):
    """Invalid configuration; ``field`` names the offending key path."""

    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field


@dataclass
class ExperimentConfig:
    experiment_id: str
    env: dict
    methods: list
    seeds: list = field(default_factory=lambda: [0, 1, 2, 3, 4])
    loop: dict = field(default_factory=dict)
    agent: dict = field(default_factory=dict)
    buffer: dict = field(default_factory=dict)
    backtrack: dict = field(default_factory=dict)
    per: dict = field(default_factory=dict)
    output_dir: str = "runs"

    def loop_config(self) -> LoopConfig:
        return LoopConfig(**self.loop)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def hash(self) -> str:
        """SHA-256 of the canonical JSON form, excluding the output directory."""
        d = self.to_dict()
        d.pop("output_dir")
        blob = json.dumps(d, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()

    def per_settings(self) -> dict:
        """Prioritized replay settings: size table defaults, overridden by ``per``."""
        batch, alpha, beta = PER_TABLE.get(self.env.get("size"), PER_TABLE[15])
        out = {"capacity": 100_000, "per_alpha": alpha, "per_beta": beta, "batch": batch,
               "ac_steps_per_per_step": 3}
        out.update(self.per)
        return out


def _check_section(name: str, data, schema: dict) -> None:
    if not isinstance(data, dict):
        raise ConfigError(name, "must be a JSON object")
    for key, value in data.items():
        if key not in schema:
            raise ConfigError(f"{name}.{key}" if name else key, "unknown field")
        _check_type(f"{name}.{key}" if name else key, value, schema[key])


def _check_type(path: str, value, typ) -> None:
    if isinstance(typ, str):
        # dataclass annotations arrive as strings under postponed evaluation
        typ = {"int": int, "float": float, "str": str, "bool": bool,
               "float | None": (float, type(None))}.get(typ, object)
    if typ is float or typ == (float, type(None)):
        ok = (value is None and typ != float) or (
            isinstance(value, (int, float)) and not isinstance(value, bool))
    elif typ is int:
        ok = isinstance(value, int) and not isinstance(value, bool)
    else:
        ok = isinstance(value, typ)
    if not ok:
        raise ConfigError(path, f"expected {getattr(typ, '__name__', typ)}, got {value!r}")


def validate(data: dict) -> ExperimentConfig:
    """Check a decoded JSON object against the schema and build the config."""
    _check_section("", data, TOP_FIELDS)
    for required in ("experiment_id", "env"):
        if required not in data:
            raise ConfigError(required, "missing required field")
    if ("method" in data) == ("methods" in data):
        raise ConfigError("method", "give exactly one of 'method' or 'methods'")
    methods = [data["method"]] if "method" in data else list(data["methods"])
    if not methods:
        raise ConfigError("methods", "must not be empty")
    for m in methods:
        if m not in METHODS:
            raise ConfigError("method", f"unknown method {m!r}; expected one of {METHODS}")
    _check_section("env", data["env"], ENV_FIELDS)
    env = dict(data["env"])
    if env.get("kind") not in ENV_KINDS:
        raise ConfigError("env.kind", f"expected one of {ENV_KINDS}")
    for key in env:
        if key not in ENV_KIND_FIELDS[env["kind"]]:
            raise ConfigError(f"env.{key}", f"not a {env['kind']} parameter")
    if env["kind"] == "fourroom":
        size = env.get("size")
        if not isinstance(size, int) or size < 7 or size % 2 == 0:
            raise ConfigError("env.size", "four-room size must be an odd integer >= 7")
    for name, schema in (("loop", LOOP_FIELDS), ("agent", AGENT_FIELDS), ("buffer", BUFFER_FIELDS),
                         ("backtrack", BACKTRACK_FIELDS), ("per", PER_FIELDS)):
        _check_section(name, data.get(name, {}), schema)
    seeds = data.get("seeds", [0, 1, 2, 3, 4])
    if not seeds or not all(isinstance(s, int) and not isinstance(s, bool) and s >= 0
                            for s in seeds):
        raise ConfigError("seeds", "must be a nonempty list of nonnegative integers")
    cfg = ExperimentConfig(
        experiment_id=data["experiment_id"], env=env, methods=methods, seeds=list(seeds),
        loop=dict(data.get("loop", {})), agent=dict(data.get("agent", {})),
        buffer=dict(data.get("buffer", {})), backtrack=dict(data.get("backtrack", {})),
        per=dict(data.get("per", {})), output_dir=data.get("output_dir", "runs"))
    try:
        cfg.loop_config()
    except ValueError as exc:
        raise ConfigError("loop", str(exc)) from None
    return cfg


def load_config(path) -> ExperimentConfig:
    with open(path) as fh:
        text = fh.read()
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"line {exc.lineno}", f"invalid JSON: {exc.msg}") from None
    if not isinstance(data, dict):
        raise ConfigError("", "top level must be a JSON object")
    return validate(data)
