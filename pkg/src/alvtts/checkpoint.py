"""Versioned checkpoints with an upstream hash chain.

Each stage's checkpoint records the sha256 of the artifacts it consumed,
so running a stage against a retrained or edited upstream file fails
loudly instead of silently mixing incompatible parameter spaces.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import torch

from .errors import CheckpointError, ConfigError

FORMAT_VERSION = 1


@dataclass
class Checkpoint:
    module_id: str
    config_hash: str
    state_dict: dict[str, Any]
    upstream: dict[str, str] = field(default_factory=dict)
    extra: dict[str, Any] = field(default_factory=dict)
    format_version: int = FORMAT_VERSION


def file_hash(path: str | Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def save_checkpoint(
    path: str | Path,
    module_id: str,
    state_dict: dict[str, Any],
    config_hash: str,
    upstream: dict[str, str] | None = None,
    extra: dict[str, Any] | None = None,
) -> str:
    """Write the checkpoint and return its file hash."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "format_version": FORMAT_VERSION,
        "module_id": module_id,
        "config_hash": config_hash,
        "upstream": dict(upstream or {}),
        "extra": dict(extra or {}),
        "state_dict": state_dict,
    }
    torch.save(payload, path)
    return file_hash(path)


def load_checkpoint(
    path: str | Path, expected_module_id: str | None = None
) -> Checkpoint:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"missing checkpoint: {path}")
    try:
        payload = torch.load(path, map_location="cpu", weights_only=True)
    except Exception as exc:
        raise CheckpointError(f"{path}: unreadable checkpoint ({exc})") from exc
    if not isinstance(payload, dict):
        raise CheckpointError(f"{path}: checkpoint payload is not a mapping")
    missing = {
        "format_version",
        "module_id",
        "config_hash",
        "upstream",
        "extra",
        "state_dict",
    } - set(payload)
    if missing:
        raise CheckpointError(f"{path}: missing fields {sorted(missing)}")
    if payload["format_version"] != FORMAT_VERSION:
        raise CheckpointError(
            f"{path}: format version {payload['format_version']}, "
            f"this build reads {FORMAT_VERSION}"
        )
    if expected_module_id is not None and payload["module_id"] != expected_module_id:
        raise CheckpointError(
            f"{path}: holds module {payload['module_id']!r}, "
            f"expected {expected_module_id!r}"
        )
    return Checkpoint(
        module_id=payload["module_id"],
        config_hash=payload["config_hash"],
        state_dict=payload["state_dict"],
        upstream=payload["upstream"],
        extra=payload["extra"],
        format_version=payload["format_version"],
    )


def verify_upstream(
    checkpoint: Checkpoint, name: str, upstream_path: str | Path
) -> None:
    """Check that the named upstream file still hashes to what the
    checkpoint recorded when it was trained."""
    recorded = checkpoint.upstream.get(name)
    if recorded is None:
        raise CheckpointError(
            f"checkpoint {checkpoint.module_id!r} records no upstream {name!r}"
        )
    actual = file_hash(upstream_path)
    if actual != recorded:
        raise CheckpointError(
            f"upstream {name!r} hash mismatch: checkpoint recorded "
            f"{recorded[:12]}..., file is {actual[:12]}...; retrain this stage"
        )
