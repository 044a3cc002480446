"""Run configuration: JSON schema validation, overrides, hashing.

Configs are validated before any compute runs; unknown keys are rejected so
typos fail loudly. EQUIWRAP_SEED overrides the seed list with one seed.
"""

from __future__ import annotations

import copy
import hashlib
import json
import os
from dataclasses import dataclass
from pathlib import Path

import jsonschema

_SEEDS = {"type": "array", "items": {"type": "integer"}, "minItems": 1}


def _schema(kind_props: dict, required=("kind",)) -> dict:
    props = {
        "kind": {"type": "string"},
        "seeds": _SEEDS,
        "out_dir": {"type": "string"},
    }
    props.update(kind_props)
    return {"type": "object", "properties": props,
            "required": list(required), "additionalProperties": False}


SCHEMAS = {
    "vision": _schema({
        "train_n": {"type": "integer", "minimum": 8},
        "test_n": {"type": "integer", "minimum": 8},
        "steps": {"type": "integer", "minimum": 0},
        "lr": {"type": "number", "exclusiveMinimum": 0},
        "batch": {"type": "integer", "minimum": 1},
        "label_smoothing": {"type": "number", "minimum": 0, "maximum": 0.5},
        "wrapper": {"enum": ["none", "equitune", "equizero", "lambda"]},
        "proxy_loss": {"enum": ["neg_max_prob", "entropy"]},
        "checkpoint": {"type": "string"},
        "lambda_checkpoint": {"type": "string"},
        "finetune_steps": {"type": "integer", "minimum": 0},
        "finetune_lr": {"type": "number", "exclusiveMinimum": 0},
        "lambda_phase1_steps": {"type": "integer", "minimum": 0},
        "lambda_phase1_lr": {"type": "number", "exclusiveMinimum": 0},
        "lambda_phase2_steps": {"type": "integer", "minimum": 0},
        "lambda_phase2_lr": {"type": "number", "exclusiveMinimum": 0},
    }),
    "rl": _schema({
        "env": {"enum": ["gridworld", "balance"]},
        "grid_n": {"type": "integer", "minimum": 3},
        "obstacle_seed": {"type": "integer"},
        "obstacle_density": {"type": "number", "minimum": 0, "maximum": 0.5},
        "steps": {"type": "integer", "minimum": 64},
        "lr": {"type": "number", "exclusiveMinimum": 0},
        "quadrant_pretrain": {"type": "boolean"},
        "eval_episodes": {"type": "integer", "minimum": 1},
        "checkpoint": {"type": "string"},
        "buffer_size": {"type": "integer", "minimum": 64},
        "batch": {"type": "integer", "minimum": 1},
        "gamma": {"type": "number", "minimum": 0, "maximum": 1},
        "target_every": {"type": "integer", "minimum": 1},
        "warmup": {"type": "integer", "minimum": 1},
    }),
    "scan": _schema({
        "split": {"enum": ["add_jump", "around_right"]},
        "iters": {"type": "integer", "minimum": 1},
        "lr": {"type": "number", "exclusiveMinimum": 0},
        "teacher_forcing": {"type": "number", "minimum": 0, "maximum": 1},
        "test_limit": {"type": "integer", "minimum": 1},
    }),
    "fairness": _schema({
        "lm_steps": {"type": "integer", "minimum": 0},
        "lm_lr": {"type": "number", "exclusiveMinimum": 0},
        "beam_len": {"type": "integer", "minimum": 1},
        "total_tokens": {"type": "integer", "minimum": 1},
        "relaxed": {"type": "boolean"},
        "contexts": {"type": "array",
                     "items": {"type": "array", "items": {"type": "string"}}},
    }),
    "universality": _schema({
        "budgets": {"type": "array", "items": {"type": "integer", "minimum": 1},
                    "minItems": 1},
        "hidden": {"type": "array", "items": {"type": "integer", "minimum": 1}},
        "lr": {"type": "number", "exclusiveMinimum": 0},
        "grid_n": {"type": "integer", "minimum": 5},
        "target_scale": {"type": "number", "exclusiveMinimum": 0},
    }),
    "bench": _schema({
        "batch": {"type": "integer", "minimum": 1},
        "reps": {"type": "integer", "minimum": 10},
        "warmup_reps": {"type": "integer", "minimum": 1},
    }),
}

DEFAULTS = {
    "vision": {"seeds": [0], "train_n": 512, "test_n": 256, "steps": 250,
               "lr": 1e-3, "batch": 32, "label_smoothing": 0.1,
               "wrapper": "none", "proxy_loss": "neg_max_prob",
               "finetune_steps": 100, "finetune_lr": 1e-4,
               "lambda_phase1_steps": 1000, "lambda_phase1_lr": 0.3,
               "lambda_phase2_steps": 0, "lambda_phase2_lr": 5e-7},
    "rl": {"seeds": [0], "env": "gridworld", "grid_n": 7, "obstacle_seed": 0,
           "obstacle_density": 0.08, "steps": 9000, "lr": 1e-3,
           "quadrant_pretrain": True, "eval_episodes": 80,
           "buffer_size": 10_000, "batch": 64, "gamma": 0.99,
           "target_every": 500, "warmup": 200},
    "scan": {"seeds": [0], "split": "add_jump", "iters": 8000, "lr": 2e-3,
             "teacher_forcing": 0.5, "test_limit": 150},
    "fairness": {"seeds": [0], "lm_steps": 400, "lm_lr": 5e-3, "beam_len": 3,
                 "total_tokens": 9, "relaxed": False},
    "universality": {"seeds": [0], "budgets": [300, 1200, 4000],
                     "hidden": [64, 64], "lr": 1e-2, "grid_n": 21,
                     "target_scale": 0.4},
    "bench": {"seeds": [0], "batch": 32, "reps": 100, "warmup_reps": 10},
}


class ConfigError(ValueError):
    pass


def _parse_override(text: str):
    if "=" not in text:
        raise ConfigError(f"--set expects key=value, got {text!r}")
    key, raw = text.split("=", 1)
    try:
        val = json.loads(raw)
    except json.JSONDecodeError:
        val = raw
    return key.strip(), val


def apply_overrides(cfg: dict, overrides) -> dict:
    cfg = copy.deepcopy(cfg)
    for item in overrides or ():
        key, val = _parse_override(item)
        node = cfg
        parts = key.split(".")
        for p in parts[:-1]:
            node = node.setdefault(p, {})
        node[parts[-1]] = val
    return cfg


@dataclass
class RunConfig:
    kind: str
    values: dict

    def __getitem__(self, key):
        return self.values[key]

    def get(self, key, default=None):
        return self.values.get(key, default)

    @property
    def seeds(self) -> list[int]:
        return list(self.values["seeds"])


def load_config(path, overrides=(), env=None) -> RunConfig:
    """Read + override + default-fill + validate a run config."""
    env = os.environ if env is None else env
    try:
        raw = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from exc
    raw = apply_overrides(raw, overrides)
    kind = raw.get("kind")
    if kind not in SCHEMAS:
        raise ConfigError(f"unknown experiment kind {kind!r}; "
                          f"expected one of {sorted(SCHEMAS)}")
    merged = dict(DEFAULTS[kind])
    merged.update(raw)
    if "EQUIWRAP_SEED" in env:
        merged["seeds"] = [int(env["EQUIWRAP_SEED"])]
    try:
        jsonschema.validate(merged, SCHEMAS[kind])
    except jsonschema.ValidationError as exc:
        raise ConfigError(f"config invalid: {exc.message}") from exc
    return RunConfig(kind=kind, values=merged)


def config_hash(cfg: RunConfig) -> str:
    canon = json.dumps(cfg.values, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode()).hexdigest()[:16]
