"""Atomic CSV output with JSON metadata sidecars."""

import csv
import json
import logging
import os
import tempfile
from datetime import datetime, timezone
from importlib.metadata import PackageNotFoundError, version
from pathlib import Path

logger = logging.getLogger(__name__)


def package_version() -> str:
    try:
        return version("aoi-whittle")
    except PackageNotFoundError:
        return "unknown"


def _atomic_write(path: Path, fill) -> None:
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", newline="") as f:
            fill(f)
        os.replace(tmp, path)
    except BaseException:
        Path(tmp).unlink(missing_ok=True)
        raise


def write_csv(path: str | Path, header, rows) -> Path:
    """Write header plus rows as comma-separated LF-terminated text, atomically."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)

    def fill(f):
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)

    _atomic_write(path, fill)
    return path


class ResultWriter:
    """Writes one command's CSV files into an output directory."""

    def __init__(self, out_dir: str | Path, command: str, timestamp: bool = True):
        self.out_dir = Path(out_dir)
        self.command = command
        self.timestamp = timestamp
        self.written: list[Path] = []

    def write(self, name: str, header, rows, parameters: dict | None = None, **extra) -> Path:
        """Write <name>.csv and its <name>.meta.json sidecar."""
        path = write_csv(self.out_dir / f"{name}.csv", header, rows)
        meta = {
            "command": self.command,
            "file": path.name,
            "package_version": package_version(),
            "parameters": parameters or {},
            **extra,
        }
        if self.timestamp:
            meta["generated_at"] = datetime.now(timezone.utc).isoformat()

        meta_path = self.out_dir / f"{name}.meta.json"
        _atomic_write(meta_path, lambda f: f.write(json.dumps(meta, indent=2, sort_keys=True, default=str) + "\n"))
        self.written += [path, meta_path]
        logger.info("wrote %s", path)
        return path

    def write_text(self, name: str, text: str) -> Path:
        path = self.out_dir / name
        path.parent.mkdir(parents=True, exist_ok=True)
        _atomic_write(path, lambda f: f.write(text))
        self.written.append(path)
        logger.info("wrote %s", path)
        return path
