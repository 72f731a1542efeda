"""Run manifests: config snapshot plus input/output digests per command."""

from __future__ import annotations

import hashlib
import json
import os
import time


def file_digest(path: str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


class RunManifest:
    """Collects provenance for one CLI invocation and writes a JSON record."""

    def __init__(self, command: str, config_path: str | None,
                 config: dict, seeds: list[int]):
        self.command = command
        self.config_path = config_path
        self.config = config
        self.seeds = seeds
        self.inputs: dict[str, str] = {}
        self.outputs: dict[str, str] = {}
        self._start = time.monotonic()

    def add_input(self, path: str) -> None:
        self.inputs[path] = file_digest(path)

    def add_output(self, path: str) -> None:
        self.outputs[path] = file_digest(path)

    def write(self, out_dir: str) -> str:
        record = {
            "command": self.command,
            "config_path": self.config_path,
            "config": {k: self.config[k] for k in sorted(self.config)},
            "seeds": self.seeds,
            "input_digests": self.inputs,
            "output_digests": self.outputs,
            "wall_clock_sec": round(time.monotonic() - self._start, 3),
            "artifacts": sorted(self.outputs),
        }
        os.makedirs(out_dir, exist_ok=True)
        path = os.path.join(out_dir, f"manifest_{self.command}.json")
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(record, fh, indent=2, sort_keys=True)
            fh.write("\n")
        return path
