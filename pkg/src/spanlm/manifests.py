"""Run manifests and atomic artifact IO for reproducible CLI commands."""

from __future__ import annotations

import hashlib
import json
import os
import time
from pathlib import Path

from .errors import InputError

TOOL_VERSION = "0.1.0"
MANIFEST_NAME = "run_manifest.json"


def atomic_write_text(path: str | Path, text: str) -> None:
    """Write via a .partial sidecar and rename, so readers never see torn files."""
    path = Path(path)
    tmp = path.with_name(path.name + ".partial")
    tmp.write_text(text, encoding="utf-8", newline="\n")
    os.replace(tmp, path)


def sha256_file(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def hash_tree(root: str | Path, skip: set[str] | None = None) -> dict[str, str]:
    """Relative path -> sha256 for every file under root (sorted, stable)."""
    root = Path(root)
    skip = skip or set()
    out = {}
    for path in sorted(root.rglob("*")):
        if path.is_file():
            rel = path.relative_to(root).as_posix()
            if rel in skip or rel == MANIFEST_NAME or rel.endswith(".partial"):
                continue
            out[rel] = sha256_file(path)
    return out


def write_run_manifest(
    out_dir: str | Path,
    command: str,
    argv: list[str],
    seed: int | None,
    inputs: dict[str, str],
    nondeterministic_outputs: list[str] | None = None,
    started: float | None = None,
) -> Path:
    """Record what produced the artifacts in out_dir and hash them.

    Timing-bearing files are listed under nondeterministic_outputs and their
    hashes are not part of the reproducibility contract; everything else must
    reproduce bitwise under the recorded argv and seed.
    """
    out_dir = Path(out_dir)
    nondet = sorted(nondeterministic_outputs or [])
    outputs = hash_tree(out_dir, skip=set(nondet))
    manifest = {
        "tool_version": TOOL_VERSION,
        "command": command,
        "argv": argv,
        "seed": seed,
        "inputs": inputs,
        "outputs": outputs,
        "nondeterministic_outputs": nondet,
        "started_unix": started,
        "finished_unix": time.time(),
    }
    path = out_dir / MANIFEST_NAME
    atomic_write_text(path, json.dumps(manifest, sort_keys=True, indent=2) + "\n")
    return path


def read_run_manifest(path: str | Path) -> dict:
    try:
        manifest = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as err:
        raise InputError(f"unreadable run manifest {path}: {err}") from err
    for key in ("command", "argv", "outputs"):
        if key not in manifest:
            raise InputError(f"run manifest {path} missing field {key!r}")
    return manifest
