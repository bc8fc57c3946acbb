"""Run manifests and small CSV helpers shared by the CLI commands."""

import csv
import json
import platform
from pathlib import Path

import numpy as np

from . import __version__


def write_csv(path, columns, rows) -> Path:
    """Write dict rows; floats use a fixed repr so reruns are byte-identical."""
    path = Path(path)
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(columns)
        for row in rows:
            writer.writerow([format(row[c], ".10g") if isinstance(row[c], float) else row[c] for c in columns])
    return path


def write_manifest(out_dir, command: str, config, outputs: list[str], extra: dict | None = None) -> Path:
    """manifest.json: command, config hash, seed, versions and the files written. No timestamps."""
    manifest = {
        "command": command,
        "config_hash": config.config_hash(),
        "config": config.to_dict(),
        "seed": config.seed,
        "outputs": sorted(outputs),
        "versions": {
            "stoxnet": __version__,
            "python": platform.python_version(),
            "numpy": np.__version__,
        },
        **(extra or {}),
    }
    path = Path(out_dir) / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path
