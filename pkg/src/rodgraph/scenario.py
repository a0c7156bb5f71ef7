"""Declarative scenario files for the command-line harness.

Scenarios are TOML with nested sections; every command ships built-in
defaults and a file only overrides the keys it mentions.  All physical
quantities are SI and the random seed is mandatory for reproducibility.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # Python 3.10
    import tomli as tomllib


class ScenarioError(ValueError):
    pass


def _deep_merge(base: dict, override: dict) -> dict:
    out = dict(base)
    for key, value in override.items():
        if key in out and isinstance(out[key], dict) and isinstance(value, dict):
            out[key] = _deep_merge(out[key], value)
        else:
            out[key] = value
    return out


def load_scenario(path: str | Path | None, defaults: dict) -> dict:
    merged = dict(defaults)
    if path is not None:
        try:
            with open(path, "rb") as handle:
                data = tomllib.load(handle)
        except FileNotFoundError as exc:
            raise ScenarioError(f"scenario file not found: {path}") from exc
        except tomllib.TOMLDecodeError as exc:
            raise ScenarioError(f"invalid scenario file {path}: {exc}") from exc
        merged = _deep_merge(merged, data)
    if merged.get("run", {}).get("seed") is None:
        raise ScenarioError("scenario must set run.seed for reproducibility")
    return merged


def config_hash(config: dict) -> str:
    canonical = json.dumps(config, sort_keys=True, default=str)
    return hashlib.sha256(canonical.encode()).hexdigest()[:16]


def format_value(value) -> str:
    if isinstance(value, float):
        return f"{value:.12g}"
    return str(value)


def write_csv(path: Path, rows, metadata: dict):
    """CSV with a leading comment block; byte-identical across reruns."""
    path.parent.mkdir(parents=True, exist_ok=True)
    rows = list(rows)
    if not rows:
        raise ScenarioError("refusing to write an empty CSV")
    header = list(rows[0].keys())
    lines = [f"# {key}: {format_value(value)}" for key, value in metadata.items()]
    lines.append(",".join(header))
    for row in rows:
        lines.append(",".join(format_value(row[key]) for key in header))
    path.write_text("\n".join(lines) + "\n")


def write_summary(path: Path, summary: dict):
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(summary, indent=2, sort_keys=True, default=str) + "\n")
