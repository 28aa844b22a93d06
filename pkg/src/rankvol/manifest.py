"""Run manifests: config hashing, input digests and reproducibility records."""

from __future__ import annotations

import hashlib
import json
import time
from dataclasses import dataclass, field
from pathlib import Path


def stable_hash(obj) -> str:
    """SHA-256 of the canonical JSON encoding of ``obj``."""
    text = json.dumps(obj, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(text.encode()).hexdigest()


def file_digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


@dataclass
class RunManifest:
    """Description of one command invocation, written beside its outputs.

    The timestamp documents when the run happened; reproducibility is judged
    on the command, config hash, input digests and seed alone, and repeating
    a command with those unchanged yields byte-identical outputs.
    """

    command: str
    config: dict
    input_digests: dict = field(default_factory=dict)
    seed: int | None = None
    tool_version: str = ""
    timestamp: str = ""

    def __post_init__(self):
        if not self.tool_version:
            from . import __version__

            self.tool_version = __version__
        if not self.timestamp:
            self.timestamp = time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime())

    @property
    def config_hash(self) -> str:
        return stable_hash(self.config)

    def add_input(self, path) -> None:
        self.input_digests[str(path)] = file_digest(path)

    def to_dict(self) -> dict:
        return {
            "command": self.command,
            "config": self.config,
            "config_hash": self.config_hash,
            "input_digests": self.input_digests,
            "seed": self.seed,
            "tool_version": self.tool_version,
            "timestamp": self.timestamp,
        }

    def write(self, output_path) -> Path:
        """Write the manifest next to ``output_path`` and return its path."""
        out = Path(output_path)
        target = out / "manifest.json" if out.is_dir() else out.with_suffix(out.suffix + ".manifest.json")
        target.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")
        return target
