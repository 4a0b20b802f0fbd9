"""Run configuration: JSON file with sections clip / sd / sampler / tuning / eval.

Precedence is CLI flag > config file > built-in default; the source of every
key is kept so it can be logged and written into run manifests.
"""

from __future__ import annotations

import copy
import json
import logging
import os
from pathlib import Path

from .exceptions import ConfigError

logger = logging.getLogger(__name__)

_NUM = (int, float)
_OPT_STR = (str, type(None))
_OPT_INT = (int, type(None))
_OPT_NUM = (int, float, type(None))

# section -> key -> (default, accepted types)
SCHEMA: dict[str, dict[str, tuple]] = {
    "clip": {
        "checkpoint": (None, _OPT_STR),
        "threshold": (0.3, _NUM),
        "kappa": (27.0, _NUM),
    },
    "sd": {
        "checkpoint": (None, _OPT_STR),
        "device": ("cpu", (str,)),
    },
    "sampler": {
        "steps": (50, (int,)),
        "guidance": (7.5, _NUM),
        "eta": (0.0, _NUM),
        "seed": (0, (int,)),
    },
    "tuning": {
        "learning_rate": (None, _OPT_NUM),
        "schedule": (None, _OPT_STR),
        "epochs_or_iters": (None, _OPT_INT),
        "use_text_regularizer": (True, (bool,)),
        "deep_prompt_tokens_per_layer": (8, (int,)),
        "ab_training": (False, (bool,)),
        "batch_size": (4, (int,)),
        "seed": (0, (int,)),
    },
    "eval": {
        "template": ("a photo of a {}", (str,)),
        "batch_size": (64, (int,)),
        "subsample": (None, _OPT_INT),
        "seed": (0, (int,)),
        "data_root": (None, _OPT_STR),
        "allow_partial": (False, (bool,)),
    },
}

ENV_CHECKPOINTS = {"clip": "IPC_CLIP_CHECKPOINT", "sd": "IPC_SD_CHECKPOINT"}


def defaults() -> dict:
    return {s: {k: copy.deepcopy(v[0]) for k, v in keys.items()} for s, keys in SCHEMA.items()}


def validate(cfg: dict, origin: str = "config") -> None:
    if not isinstance(cfg, dict):
        raise ConfigError(f"{origin}: top level must be a JSON object")
    for section, values in cfg.items():
        if section not in SCHEMA:
            raise ConfigError(f"{origin}: unknown section {section!r}; valid: {', '.join(SCHEMA)}")
        if not isinstance(values, dict):
            raise ConfigError(f"{origin}: section {section!r} must be an object")
        for key, value in values.items():
            if key not in SCHEMA[section]:
                raise ConfigError(
                    f"{origin}: unknown key {section}.{key}; valid: {', '.join(SCHEMA[section])}"
                )
            types = SCHEMA[section][key][1]
            if isinstance(value, bool) and bool not in types:
                raise ConfigError(f"{origin}: {section}.{key} must not be a boolean")
            if not isinstance(value, types):
                names = "/".join("null" if t is type(None) else t.__name__ for t in types)
                raise ConfigError(f"{origin}: {section}.{key} must be {names}, got {value!r}")


def load_file(path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        cfg = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    validate(cfg, str(path))
    return cfg


def resolve(file_cfg: dict | None = None, overrides: dict | None = None) -> tuple[dict, dict]:
    """Merge defaults, environment checkpoints, file and CLI values.

    `overrides` uses the same nested layout; ``None`` values mean "not given".
    Returns ``(config, sources)`` where sources maps ``section.key`` to one of
    default / env / file / cli.
    """
    cfg = defaults()
    sources = {f"{s}.{k}": "default" for s in SCHEMA for k in SCHEMA[s]}
    for section, var in ENV_CHECKPOINTS.items():
        if os.environ.get(var):
            cfg[section]["checkpoint"] = os.environ[var]
            sources[f"{section}.checkpoint"] = "env"
    for layer, origin in ((file_cfg or {}, "file"), (overrides or {}, "cli")):
        validate({s: {k: v for k, v in vals.items() if v is not None} for s, vals in layer.items()}, origin)
        for section, values in layer.items():
            for key, value in values.items():
                if value is None:
                    continue
                cfg[section][key] = value
                sources[f"{section}.{key}"] = origin
    for key, src in sorted(sources.items()):
        if src != "default":
            logger.info("config %s = %r (%s)", key, cfg[key.split(".")[0]][key.split(".")[1]], src)
    return cfg, sources


def cache_root() -> Path:
    return Path(os.environ.get("IPC_CACHE", Path.home() / ".cache" / "sdipc"))


def resolve_checkpoint(value: str | None, section: str) -> str:
    """Checkpoint path, ``tiny`` / ``tiny:<seed>``, or a name under ``$IPC_CACHE``."""
    if value is None:
        raise ConfigError(
            f"no {section} checkpoint configured: set {section}.checkpoint in the config file, "
            f"pass --{section}, or export {ENV_CHECKPOINTS[section]} "
            f"(use 'tiny' for the randomly initialised test models)"
        )
    if value == "tiny" or value.startswith("tiny:"):
        return value
    path = Path(value).expanduser()
    if path.exists():
        return str(path)
    cached = cache_root() / value
    if cached.exists():
        return str(cached)
    raise ConfigError(f"{section} checkpoint {value!r} not found (also looked in {cache_root()})")


def tiny_seed(value: str) -> int:
    return int(value.split(":", 1)[1]) if ":" in value else 0
