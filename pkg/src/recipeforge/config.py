"""Flat dotted-key run configuration.

Config files are plain text, one `key = value` per line with `#`
comments; values are JSON scalars or lists. Command-line flags override
file values, which override the defaults below. The resolved config is
rendered to sorted lines whose hash stamps every output file.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

from .errors import DataError

DEFAULTS: dict[str, object] = {
    "run.seed": 0,
    "run.threads": 1,
    "corpus.val_fraction": 0.1,
    "schedule.T": 100,
    "schedule.beta_start": 0.01,
    "schedule.beta_end": 0.13,
    "sde.beta_min": 0.1,
    "sde.beta_max": 20.0,
    "sde.steps": 500,
    "sde.t_eps": 0.001,
    "train.mask.steps": 60000,
    "train.mask.batch_size": 64,
    "train.mask.learning_rate": 0.001,
    "train.mask.final_learning_rate": 0.00005,
    "train.mask.ema_decay": 0.9995,
    "train.mask.hidden_width": 32,
    "train.mask.hidden_depth": 3,
    "train.mask.val_interval": 10000,
    "train.quantity.steps": 25000,
    "train.quantity.batch_size": 64,
    "train.quantity.learning_rate": 0.001,
    "train.quantity.final_learning_rate": 0.0,
    "train.quantity.ema_decay": 0.0,
    "train.quantity.hidden_width": 32,
    "train.quantity.hidden_depth": 3,
    "train.quantity.val_interval": 5000,
    "sample.count": 10000,
    "sample.chunk_size": 2048,
    "synth.count_override": 0,
    "select.min_sds": 3,
    "select.top_fraction": 0.05,
    "select.required": [],
    "select.meal_fraction": 0.3333333333333333,
    "rediscover.budget": 10000,
    "rediscover.chunk_size": 64,
    "fidelity.sample_count": 100000,
    "fidelity.top_k": 10,
    "profile.age": 30.0,
    "profile.sex": "male",
    "profile.height_cm": 175.0,
    "profile.weight_kg": 75.0,
    "profile.activity": "moderate",
    # paths are recorded so a persisted config reproduces the run
    "paths.corpus": "",
    "paths.vocabulary": "",
    "paths.spec": "",
    "paths.samples": "",
    "paths.mask_model": "",
    "paths.quantity_model": "",
    "paths.impact_table": "",
    "paths.impact_norms": "",
    "paths.nutrient_table": "",
    "paths.hei_standards": "",
    "paths.reference": "",
    "paths.out": "",
    "run.command": "",
}


def _coerce(key: str, value: object) -> object:
    default = DEFAULTS[key]
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise DataError(f"config key {key} expects a boolean")
        return value
    if isinstance(default, int) and not isinstance(default, bool):
        if isinstance(value, bool) or not isinstance(value, (int, float)) or value != int(value):
            raise DataError(f"config key {key} expects an integer, got {value!r}")
        return int(value)
    if isinstance(default, float):
        if not isinstance(value, (int, float)) or isinstance(value, bool):
            raise DataError(f"config key {key} expects a number, got {value!r}")
        return float(value)
    if isinstance(default, str):
        return str(value)
    if isinstance(default, list):
        if not isinstance(value, list):
            raise DataError(f"config key {key} expects a list, got {value!r}")
        return [str(v) for v in value]
    raise DataError(f"unsupported config type for {key}")


def parse_config_file(path: str | Path) -> dict[str, object]:
    out: dict[str, object] = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise DataError(f"{path}:{lineno}: expected 'key = value'")
        key, _, val = line.partition("=")
        key, val = key.strip(), val.strip()
        try:
            parsed = json.loads(val)
        except json.JSONDecodeError:
            parsed = val
        out[key] = parsed
    return out


def resolve_config(file_values: dict[str, object] | None = None,
                   overrides: dict[str, object] | None = None) -> dict[str, object]:
    """Defaults, then file values, then overrides; unknown keys are errors."""
    cfg = dict(DEFAULTS)
    for source in (file_values or {}, overrides or {}):
        for key, value in source.items():
            if key not in DEFAULTS:
                raise DataError(f"unknown config key {key!r}")
            cfg[key] = _coerce(key, value)
    return cfg


def render_config(cfg: dict[str, object]) -> str:
    lines = [f"{k} = {json.dumps(cfg[k])}" for k in sorted(cfg)]
    return "\n".join(lines) + "\n"


def config_hash(cfg: dict[str, object]) -> str:
    return hashlib.sha256(render_config(cfg).encode()).hexdigest()[:16]
