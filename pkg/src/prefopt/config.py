"""Run configuration: TOML files with named presets, defaults and validation.

A config may name a ``preset``; the preset is loaded first and the file's
own keys are merged over it, table by table. The resolved config (preset
expanded, defaults filled in, seed fixed) is what every run directory
records, and it reproduces the run on its own.
"""

from __future__ import annotations

import copy
from importlib import resources
from pathlib import Path
from typing import Any, Mapping

import tomli
import tomli_w

from .errors import ConfigError
from .losses import OBJECTIVES, LossSpec

PRESETS = ("paper-grid", "fig12-dynamics", "theorem41-tabular")

DEFAULTS: dict[str, dict[str, Any]] = {
    "policy": {
        "backend": "tabular",
        "vocab_size": 4,
        "max_len": 6,
        "eos": 0,
        # tabular
        "init_scale": 0.5,
        "eos_bias": 0.0,
        "uniform_sequences": False,
        # log-bilinear
        "embed_dim": 8,
        "decay": 0.5,
        "embed_scale": 0.5,
        "weight_scale": 0.5,
        "bias_scale": 0.0,
    },
    "reward": {
        "kind": "feature_linear",
        "scale": 1.0,
        "weights": [],
        "modes": [],
        "mode_reward": 3.0,
        "default": 0.0,
    },
    "data": {
        "n": 1000,
        "overlap": 0.0,
        "prompts": [[]],
        "rejected_from": "pair",
        "path": "",
    },
    "loss": {
        "objective": "dpo",
        "beta": 0.1,
        "gamma": 0.0,
        "lambda": 1.0,
        "delta": 1.0,
        "tau": 1.0,
        "length_normalize": False,
    },
    "train": {
        "optimizer": "adam",
        "lr": 0.0,  # 0 selects the backend default
        "betas": [0.9, 0.999],
        "eps": 1e-8,
        "batch_size": 64,
        "epochs": 5,
        "warmup_frac": 0.0,
        "schedule": "constant",
        "eval_every": 1,
        "reverse_kl": "auto",
    },
    "sweep": {},
}

DEFAULT_LR = {"tabular": 1e-2, "logbilinear": 1e-3}
SWEEP_AXES = ("objective", "lr", "beta", "seed")
BACKENDS = ("tabular", "logbilinear")
REWARD_KINDS = ("feature_linear", "table", "modes")
TOP_KEYS = ("seed", "preset", "name", *DEFAULTS)


def preset_path(name: str) -> Path:
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; valid presets: {', '.join(PRESETS)}", "preset")
    return Path(str(resources.files("prefopt") / "presets" / f"{name}.toml"))


def _merge(base: dict, over: Mapping) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, Mapping) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def parse_toml(text: str, source: str = "<config>") -> dict:
    try:
        return tomli.loads(text)
    except tomli.TOMLDecodeError as exc:
        raise ConfigError(f"{source}: {exc}") from exc


def read_raw(path_or_preset: str | Path) -> dict:
    """Read a config file, or a bare preset name, without resolving it.

    Raises ``OSError`` for unreadable files and :class:`ConfigError` for
    invalid TOML.
    """
    p = Path(path_or_preset)
    if not p.exists() and str(path_or_preset) in PRESETS:
        return {"preset": str(path_or_preset)}
    return parse_toml(p.read_text(), str(p))


def expand_presets(raw: Mapping, _seen: tuple = ()) -> dict:
    name = raw.get("preset")
    if name is None:
        return dict(raw)
    if not isinstance(name, str):
        raise ConfigError("preset must be a string", "preset")
    if name in _seen:
        raise ConfigError(f"preset cycle through {name!r}", "preset")
    base = expand_presets(parse_toml(preset_path(name).read_text(), name), _seen + (name,))
    base.pop("preset", None)
    merged = _merge(base, {k: v for k, v in raw.items() if k != "preset"})
    merged["preset"] = name
    return merged


def _check_type(section: str, key: str, value, default) -> None:
    full = f"{section}.{key}"
    if isinstance(default, bool):
        ok = isinstance(value, bool)
    elif isinstance(default, int):
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif isinstance(default, float):
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
    elif isinstance(default, str):
        ok = isinstance(value, str)
    elif isinstance(default, list):
        ok = isinstance(value, list)
    else:
        ok = True
    if not ok:
        raise ConfigError(f"{full} has the wrong type ({type(value).__name__})", full)


def resolve(raw: Mapping, seed_override: int | None = None) -> dict:
    """Expand presets, fill defaults and validate. Returns a plain dict."""
    doc = expand_presets(raw)
    for k in doc:
        if k not in TOP_KEYS:
            raise ConfigError(f"unknown config key {k!r}", k)
    if seed_override is not None:
        doc["seed"] = int(seed_override)
    if "seed" not in doc:
        raise ConfigError("missing required key 'seed'", "seed")
    if not isinstance(doc["seed"], int) or isinstance(doc["seed"], bool) or doc["seed"] < 0:
        raise ConfigError("seed must be a non-negative integer", "seed")
    out: dict[str, Any] = {"seed": doc["seed"]}
    for opt in ("preset", "name"):
        if opt in doc:
            out[opt] = doc[opt]
    for section, defaults in DEFAULTS.items():
        given = doc.get(section, {})
        if not isinstance(given, Mapping):
            raise ConfigError(f"{section} must be a table", section)
        if section == "sweep":
            out[section] = _resolve_sweep(given)
            continue
        for k, v in given.items():
            if k not in defaults:
                raise ConfigError(f"unknown key {section}.{k}", f"{section}.{k}")
            _check_type(section, k, v, defaults[k])
        out[section] = _merge(defaults, given)
    _validate(out)
    return out


def _resolve_sweep(given: Mapping) -> dict:
    out = {}
    for k, v in given.items():
        if k not in SWEEP_AXES:
            raise ConfigError(f"unknown sweep axis {k!r}; valid axes: {', '.join(SWEEP_AXES)}", f"sweep.{k}")
        if k == "beta" and isinstance(v, Mapping):
            for obj, grid in v.items():
                if obj not in OBJECTIVES:
                    raise ConfigError(f"unknown objective {obj!r} in sweep.beta; valid objectives: "
                                      f"{', '.join(OBJECTIVES)}", "sweep.beta")
                if not isinstance(grid, list) or not grid:
                    raise ConfigError(f"sweep.beta.{obj} must be a non-empty list", f"sweep.beta.{obj}")
            out[k] = {obj: list(grid) for obj, grid in v.items()}
        elif isinstance(v, list) and v:
            out[k] = list(v)
        else:
            raise ConfigError(f"sweep.{k} must be a non-empty list", f"sweep.{k}")
    for obj in out.get("objective", []):
        if obj not in OBJECTIVES:
            raise ConfigError(f"unknown objective {obj!r}; valid objectives: {', '.join(OBJECTIVES)}",
                              "sweep.objective")
    return out


def _validate(cfg: dict) -> None:
    pol = cfg["policy"]
    if pol["backend"] not in BACKENDS:
        raise ConfigError(f"policy.backend must be one of {', '.join(BACKENDS)}", "policy.backend")
    if pol["vocab_size"] < 2:
        raise ConfigError("policy.vocab_size must be at least 2", "policy.vocab_size")
    if pol["max_len"] < 1:
        raise ConfigError("policy.max_len must be at least 1", "policy.max_len")
    if not 0 <= pol["eos"] < pol["vocab_size"]:
        raise ConfigError("policy.eos must be a token id", "policy.eos")
    if cfg["reward"]["kind"] not in REWARD_KINDS:
        raise ConfigError(f"reward.kind must be one of {', '.join(REWARD_KINDS)}", "reward.kind")
    data = cfg["data"]
    if data["n"] < 1:
        raise ConfigError("data.n must be at least 1", "data.n")
    if not 0.0 <= data["overlap"] <= 1.0:
        raise ConfigError("data.overlap must lie in [0, 1]", "data.overlap")
    if data["rejected_from"] not in ("pair", "reference"):
        raise ConfigError("data.rejected_from must be 'pair' or 'reference'", "data.rejected_from")
    if cfg["train"]["reverse_kl"] not in ("auto", "on", "off"):
        raise ConfigError("train.reverse_kl must be 'auto', 'on' or 'off'", "train.reverse_kl")
    loss_spec(cfg)
    train_mapping(cfg)


def loss_spec(cfg: Mapping) -> LossSpec:
    try:
        return LossSpec.from_mapping(cfg["loss"])
    except ConfigError as exc:
        key = exc.key if exc.key is not None else "loss"
        raise ConfigError(str(exc), key if key.startswith("loss") else f"loss.{key}") from exc


def train_mapping(cfg: Mapping) -> dict:
    """The ``train`` table as :class:`~prefopt.trainer.TrainConfig` keyword arguments."""
    from .trainer import TrainConfig

    t = {k: v for k, v in cfg["train"].items() if k != "reverse_kl"}
    if not t["lr"]:
        t["lr"] = DEFAULT_LR[cfg["policy"]["backend"]]
    t["seed"] = cfg["seed"]
    try:
        TrainConfig.from_mapping(t, loss_spec(cfg))
    except ConfigError as exc:
        raise ConfigError(str(exc), f"train.{exc.key}" if exc.key else "train") from exc
    return t


def load(path_or_preset: str | Path, seed_override: int | None = None) -> dict:
    return resolve(read_raw(path_or_preset), seed_override)


def dumps(cfg: Mapping) -> str:
    return tomli_w.dumps(dict(cfg))


def with_overrides(cfg: Mapping, **sections) -> dict:
    """Copy of a resolved config with per-section overrides, re-validated."""
    merged = _merge(dict(cfg), sections)
    return resolve(merged)
