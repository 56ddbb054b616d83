"""Plain-text ``key = value`` config files and run manifests."""

from __future__ import annotations

import hashlib
import json
import os
from pathlib import Path

from .errors import ConfigError

VERSION_STRING = "bff-0.1.0"


def read_kv_file(path) -> dict[str, str]:
    """Parse a key=value file. ``#`` starts a comment; blank lines ignored."""
    out: dict[str, str] = {}
    text = Path(path).read_text()
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key=value, got {raw!r}")
        key, value = line.split("=", 1)
        key = key.strip()
        if not key:
            raise ConfigError(f"{path}:{lineno}: empty key")
        out[key] = value.strip()
    return out


def apply_overrides(base: dict[str, str], overrides) -> dict[str, str]:
    """Apply ``--set key=value`` style overrides on top of file values."""
    merged = dict(base)
    for item in overrides or ():
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        key, value = item.split("=", 1)
        merged[key.strip()] = value.strip()
    return merged


def _digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def resolve_out(path) -> Path:
    """Resolve an output path, honoring the BFF_OUT_ROOT env override."""
    p = Path(path)
    root = os.environ.get("BFF_OUT_ROOT")
    if root and not p.is_absolute():
        p = Path(root) / p
    p.parent.mkdir(parents=True, exist_ok=True)
    return p


def write_manifest(primary_output, command: str, seed, config: dict, inputs, outputs):
    """Record enough provenance to rerun the command: config snapshot, seed,
    version, input digests, output paths."""
    manifest = {
        "command": command,
        "version": VERSION_STRING,
        "seed": seed,
        "config": config,
        "inputs": {str(p): _digest(p) for p in inputs if Path(p).is_file()},
        "outputs": [str(p) for p in outputs],
    }
    path = Path(str(primary_output) + ".manifest.json")
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path
