"""Run manifests and config hashing.

Every CLI command writes exactly one manifest next to its primary output:
command name, config hash, input/output paths, seed, start/end timestamps,
and sha256 checksums of the artifacts it produced. Manifests carry wall
clock times and are therefore not byte-stable; logs and reports are.
"""

from __future__ import annotations

import hashlib
import json
from datetime import datetime, timezone
from pathlib import Path


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False)


def config_hash(config_dict: dict) -> str:
    return hashlib.sha256(canonical_json(config_dict).encode("utf-8")).hexdigest()[:16]


def file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(65536), b""):
            h.update(chunk)
    return h.hexdigest()


class RunManifest:
    def __init__(self, command: str, config: dict | None = None, seed: int | None = None):
        self.command = command
        self.config = config or {}
        self.seed = seed
        self.inputs: dict[str, str] = {}
        self.outputs: dict[str, str] = {}
        self.started_at = datetime.now(timezone.utc).isoformat()

    def add_input(self, name: str, path) -> None:
        self.inputs[name] = str(path)

    def add_output(self, name: str, path) -> None:
        self.outputs[name] = str(path)

    def write(self, path) -> dict:
        record = {
            "command": self.command,
            "config_hash": config_hash(self.config),
            "seed": self.seed,
            "inputs": self.inputs,
            "outputs": self.outputs,
            "checksums": {
                name: file_sha256(p)
                for name, p in sorted(self.outputs.items())
                if Path(p).is_file()
            },
            "started_at": self.started_at,
            "finished_at": datetime.now(timezone.utc).isoformat(),
        }
        with open(path, "w", encoding="utf-8") as f:
            json.dump(record, f, indent=2, sort_keys=True)
            f.write("\n")
        return record
