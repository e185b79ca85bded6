"""`key = value` config files with INI sections; unknown keys are rejected.

Sections and keys mirror the CLI flags:

    [scene]      num_objects, gaussians_per_object, instance_dim, language_dim,
                 num_views, image_size, background_gaussians, seed
    [train]      steps, learning_rate, samples_per_segment, optimizer, seed
    [mapper]     kind, sigma, steps, learning_rate, min_pixels, max_pairs, seed
    [inference]  tau, similarity_threshold, seed
    [eval]       modes, acc_threshold, include_2d, seed

CLI flags override config values, which override built-in defaults.
"""

from __future__ import annotations

import configparser
from pathlib import Path
from typing import Dict, Union


class ConfigError(ValueError):
    """Malformed config file or unknown section/key."""


KNOWN_KEYS: Dict[str, set] = {
    "scene": {"num_objects", "gaussians_per_object", "instance_dim", "language_dim",
              "num_views", "image_size", "background_gaussians", "seed"},
    "train": {"steps", "learning_rate", "samples_per_segment", "optimizer", "seed"},
    "mapper": {"kind", "sigma", "steps", "learning_rate", "min_pixels", "max_pairs",
               "seed"},
    "inference": {"tau", "similarity_threshold", "seed"},
    "eval": {"modes", "acc_threshold", "include_2d", "seed"},
}


def load_config(path: Union[str, Path]) -> Dict[str, Dict[str, str]]:
    """Parse and validate; returns {section: {key: raw string value}}."""
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    try:
        parser.read_string(path.read_text(), source=str(path))
    except (configparser.Error, UnicodeDecodeError) as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from exc
    out: Dict[str, Dict[str, str]] = {}
    for section in parser.sections():
        if section not in KNOWN_KEYS:
            raise ConfigError(
                f"unknown section [{section}] in {path}; "
                f"expected one of {sorted(KNOWN_KEYS)}"
            )
        out[section] = {}
        for key, value in parser.items(section):
            if key not in KNOWN_KEYS[section]:
                raise ConfigError(
                    f"unknown key {key!r} in section [{section}] of {path}"
                )
            out[section][key] = value
    return out


_BOOL_STRINGS = {"true": True, "false": False, "1": True, "0": False,
                 "yes": True, "no": False}


def config_value(config: Dict[str, Dict[str, str]], section: str, key: str,
                 cast, default):
    """Pull one typed value out of a parsed config, falling back to `default`."""
    raw = config.get(section, {}).get(key)
    if raw is None:
        return default
    try:
        if cast is bool:
            return _BOOL_STRINGS[raw.strip().lower()]
        return cast(raw)
    except (ValueError, KeyError) as exc:
        raise ConfigError(
            f"bad value {raw!r} for [{section}] {key} (expected {cast.__name__})"
        ) from exc
