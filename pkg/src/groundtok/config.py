"""Run configuration, flat config files, and output manifests.

Defaults reproduce the reference constants: 448x448 input, patch 14,
2x2 token merge on, 300 proposals filtered at objectness 0.15 and NMS 0.6,
top 100 kept. Precedence is CLI flags > config file > defaults. All
randomness derives from the single ``seed`` via scoped sub-seeds.
"""

from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass
from datetime import datetime, timezone
from pathlib import Path
from typing import Any

from . import __version__
from .rng import GENERATOR_ID
from .serialization import dump_json
from .tokenizer import ENCODER_SCALES, PROPOSER_SCALES

_BOOL_TRUE = {"1", "true", "yes", "on"}
_BOOL_FALSE = {"0", "false", "no", "off"}


@dataclass
class RunConfig:
    image_size: int = 448
    channels: int = 3
    patch_size: int = 14
    merge: bool = True
    encoder_depth: int = 6
    encoder_dim: int = 64
    llm_dim: int = 128
    num_proposals: int = 300
    score_threshold: float = 0.15
    nms_threshold: float = 0.6
    max_keep: int = 100
    jitter: float = 0.05
    bins: int = 7
    samples: int = 2
    seed: int = 0

    proposer_scales: tuple[float, ...] = PROPOSER_SCALES
    encoder_scales: tuple[float, ...] = ENCODER_SCALES

    def to_dict(self) -> dict[str, Any]:
        out = dataclasses.asdict(self)
        out["proposer_scales"] = list(self.proposer_scales)
        out["encoder_scales"] = list(self.encoder_scales)
        return out

    @classmethod
    def field_names(cls) -> set[str]:
        return {f.name for f in dataclasses.fields(cls)}

    def apply(self, overrides: dict[str, Any]) -> "RunConfig":
        """Return a copy with non-None overrides applied and coerced."""
        values = dataclasses.asdict(self)
        for key, raw in overrides.items():
            if raw is None:
                continue
            if key not in values:
                raise ValueError(f"unknown config key {key!r}")
            values[key] = _coerce(key, raw, type(getattr(self, key)))
        values["proposer_scales"] = tuple(values["proposer_scales"])
        values["encoder_scales"] = tuple(values["encoder_scales"])
        return RunConfig(**values)


def _coerce(key: str, raw: Any, target: type) -> Any:
    if isinstance(raw, str):
        text = raw.strip()
        if target is bool:
            lowered = text.lower()
            if lowered in _BOOL_TRUE:
                return True
            if lowered in _BOOL_FALSE:
                return False
            raise ValueError(f"config key {key!r}: not a boolean: {text!r}")
        if target is int:
            return int(text)
        if target is float:
            return float(text)
        if target is tuple:
            return tuple(float(part) for part in text.replace(",", " ").split())
        return text
    if target is tuple and isinstance(raw, (list, tuple)):
        return tuple(float(v) for v in raw)
    return target(raw) if target in (int, float, bool) else raw


def read_config_file(path: str | Path) -> dict[str, str]:
    """Parse a flat ``key = value`` config file; '#' starts a comment."""
    values: dict[str, str] = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            stripped = line.split("#", 1)[0].strip()
            if not stripped:
                continue
            if "=" not in stripped:
                raise ValueError(f"{path!s}:{lineno}: expected 'key = value', got {line.rstrip()!r}")
            key, value = stripped.split("=", 1)
            values[key.strip()] = value.strip()
    return values


def load_config(path: str | Path | None, overrides: dict[str, Any] | None = None) -> RunConfig:
    cfg = RunConfig()
    if path is not None:
        file_values = read_config_file(path)
        unknown = set(file_values) - cfg.field_names()
        if unknown:
            raise ValueError(f"unknown config keys in {path!s}: {sorted(unknown)}")
        cfg = cfg.apply(file_values)
    if overrides:
        cfg = cfg.apply(overrides)
    return cfg


def file_sha256(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(65536), b""):
            h.update(chunk)
    return h.hexdigest()


def build_manifest(command: str, config: dict[str, Any], inputs: dict[str, str | Path]) -> dict[str, Any]:
    """Manifest carrying the config snapshot, input hashes, and versions.

    Timestamps live only here; every other output file is byte-identical
    across re-runs and references the manifest by file name.
    """
    return {
        "command": command,
        "config": config,
        "input_hashes": {name: file_sha256(path) for name, path in sorted(inputs.items())},
        "tool_version": __version__,
        "generator": GENERATOR_ID,
        "created": datetime.now(timezone.utc).isoformat(),
    }


def write_manifest(manifest: dict[str, Any], out_dir: str | Path) -> Path:
    path = Path(out_dir) / "manifest.json"
    dump_json(manifest, path)
    return path
