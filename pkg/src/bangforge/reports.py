"""Deterministic report files: CSV with a header row, JSON run manifests.

Floats are written with repr (shortest round-trip form), booleans lowercase,
None as the empty string, so identical results give identical bytes.
"""

from __future__ import annotations

import csv
import hashlib
import json
import sys
from pathlib import Path

from . import __version__


def format_value(v) -> str:
    if v is None:
        return ""
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_csv(path, columns, rows) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as sink:
        writer = csv.writer(sink)
        writer.writerow(columns)
        for row in rows:
            writer.writerow([format_value(row[c]) for c in columns])


def run_id(config: dict) -> str:
    blob = json.dumps(config, sort_keys=True).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()[:12]


def write_manifest(path, command: str, config: dict) -> dict:
    manifest = {
        "command": command,
        "run_id": run_id(config),
        "package_version": __version__,
        "config": config,
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as sink:
        json.dump(manifest, sink, sort_keys=True, indent=2)
        sink.write("\n")
    return manifest


def read_manifest(path) -> dict:
    with open(path) as source:
        return json.load(source)


def stderr_logger(stream=None):
    """Line-delimited JSON event log; results never go here, only telemetry."""
    stream = stream or sys.stderr

    def log(event: dict) -> None:
        stream.write(json.dumps(event, sort_keys=True) + "\n")

    return log
