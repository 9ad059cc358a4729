"""Flat key=value run configuration with env and CLI overrides.

Precedence: command-line flag > CANLOC_SEED environment variable (seed
only) > config file > built-in default.
"""
from __future__ import annotations

import os
from typing import Optional

SEED_ENV_VAR = "CANLOC_SEED"


class ConfigError(Exception):
    pass


# key -> (type, default)
CONFIG_SCHEMA: dict[str, tuple[type, object]] = {
    "seed": (int, 0),
    "network": (str, "Nw0"),
    "frames": (int, 100),
    "sample_rate": (float, 125e6),
    "bit_time": (float, 2e-6),
    "noise_sigma": (float, 0.005),
    "dlc": (int, 2),
    "channel": (str, ""),
    "attacker": (str, "A1"),
    "attacker_active": (bool, False),
    "spoof_target": (str, ""),
    "k": (int, 20),
    "r": (int, 10),
    "sigma_scale": (float, 0.02),
    "width": (float, 0.125),
    "tp": (float, 2.0),
    "frame_gap": (float, 0.01),
    "lr": (float, 0.0),
    "epochs": (int, 0),
    "batch_size": (int, 32),
    "patience": (int, 10),
}


def _coerce(key: str, raw: str):
    typ, _ = CONFIG_SCHEMA[key]
    if typ is bool:
        low = raw.strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"{key}: expected a boolean, got {raw!r}")
    try:
        return typ(raw)
    except ValueError:
        raise ConfigError(f"{key}: expected {typ.__name__}, got {raw!r}") from None


def parse_config_file(path) -> dict:
    out = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            stripped = line.split("#", 1)[0].strip()
            if not stripped:
                continue
            if "=" not in stripped:
                raise ConfigError(f"{path}:{lineno}: expected key = value")
            key, raw = (part.strip() for part in stripped.split("=", 1))
            if key not in CONFIG_SCHEMA:
                raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
            out[key] = _coerce(key, raw)
    return out


def resolve_config(
    file_path: Optional[str] = None, overrides: Optional[dict] = None
) -> dict:
    """Defaults, then file, then CANLOC_SEED, then explicit overrides."""
    cfg = {k: default for k, (_, default) in CONFIG_SCHEMA.items()}
    if file_path:
        cfg.update(parse_config_file(file_path))
    env_seed = os.environ.get(SEED_ENV_VAR)
    if env_seed is not None:
        cfg["seed"] = _coerce("seed", env_seed)
    for key, value in (overrides or {}).items():
        if key not in CONFIG_SCHEMA:
            raise ConfigError(f"unknown config key {key!r}")
        if value is not None:
            cfg[key] = value
    return cfg
