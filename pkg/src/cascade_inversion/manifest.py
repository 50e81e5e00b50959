"""Run manifests: a JSON record written next to every command's outputs.

A manifest captures everything that determines the outputs — the command
line, a hash of the effective configuration, the seeds, and the hashes of
the model files used — plus the output paths and a timestamp. Two runs whose
manifests agree on everything but the timestamp produce bit-identical
outputs.
"""

from __future__ import annotations

import hashlib
import json
import os
import tempfile
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from pathlib import Path

from .errors import DataFormatError

MANIFEST_NAME = "manifest.json"
_VERSION = 1


def file_sha256(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def config_hash(config: dict) -> str:
    """Hash of the canonical JSON form of a configuration dict."""
    canon = json.dumps(config, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode()).hexdigest()


@dataclass
class RunManifest:
    command: str
    config_sha256: str
    seeds: dict[str, int]
    model_sha256: dict[str, str]
    outputs: list[str]
    created_at: str = field(
        default_factory=lambda: datetime.now(timezone.utc).isoformat()
    )
    version: int = _VERSION

    def deterministic_core(self) -> dict:
        """Everything except the timestamp; equal cores imply equal outputs."""
        data = asdict(self)
        data.pop("created_at")
        return data


def write_manifest(manifest: RunManifest, out_dir: str | Path) -> Path:
    """Atomically write ``manifest.json`` into ``out_dir``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    target = out_dir / MANIFEST_NAME
    payload = json.dumps(asdict(manifest), indent=2, sort_keys=True) + "\n"
    fd, tmp = tempfile.mkstemp(dir=out_dir, prefix=".manifest-", suffix=".tmp")
    try:
        with os.fdopen(fd, "w") as f:
            f.write(payload)
        os.replace(tmp, target)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return target


def load_manifest(path: str | Path) -> RunManifest:
    path = Path(path)
    try:
        data = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise DataFormatError(f"{path}: not valid JSON ({exc})") from exc
    try:
        return RunManifest(
            command=data["command"],
            config_sha256=data["config_sha256"],
            seeds={k: int(v) for k, v in data["seeds"].items()},
            model_sha256=dict(data["model_sha256"]),
            outputs=list(data["outputs"]),
            created_at=data["created_at"],
            version=int(data["version"]),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise DataFormatError(f"{path}: missing or invalid manifest field ({exc})") from exc
