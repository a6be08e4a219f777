"""Report bundle: in-memory output files, per-step status and run metadata,
written atomically with a content-hash manifest and a Markdown summary."""

from __future__ import annotations

import hashlib
import json
import math
import os
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd

from .errors import ReportIoError

SUMMARY = "summary.md"
MANIFEST = "manifest.json"


def jsonable(obj):
    """Plain-Python copy of ``obj`` with non-finite floats as null."""
    if isinstance(obj, dict):
        return {str(k): jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [jsonable(v) for v in obj.tolist()]
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        x = float(obj)
        return x if math.isfinite(x) else None
    return obj


def json_bytes(obj) -> bytes:
    return (json.dumps(jsonable(obj), indent=2, ensure_ascii=False, allow_nan=False) + "\n").encode()


def csv_bytes(frame: pd.DataFrame) -> bytes:
    return frame.to_csv(index=False, lineterminator="\n", na_rep="NA").encode()


@dataclass
class StepStatus:
    step: str
    status: str  # ok, skipped, failed
    message: str = ""
    files: list = field(default_factory=list)
    headlines: list = field(default_factory=list)


@dataclass
class ReportBundle:
    files: dict = field(default_factory=dict)  # name -> bytes, insertion ordered
    steps: list = field(default_factory=list)
    metadata: dict = field(default_factory=dict)

    def add(self, step: StepStatus, name: str, content: bytes):
        self.files[name] = content
        step.files.append(name)

    def add_csv(self, step, name, frame):
        self.add(step, name, csv_bytes(frame))

    def add_json(self, step, name, obj):
        self.add(step, name, json_bytes(obj))


def sha256(content: bytes) -> str:
    return hashlib.sha256(content).hexdigest()


def render_summary(bundle: ReportBundle) -> str:
    lines = ["# S-DIDML report", ""]
    if not bundle.steps:
        lines.append("No steps were run.")
        return "\n".join(lines) + "\n"
    lines += ["| step | status | note |", "|---|---|---|"]
    for s in bundle.steps:
        note = s.message.replace("|", "/").replace("\n", " ")
        lines.append(f"| {s.step} | {s.status} | {note} |")
    for s in bundle.steps:
        if not (s.files or s.headlines):
            continue
        lines += ["", f"## {s.step}", ""]
        lines += [f"- {h}" for h in s.headlines]
        if s.headlines and s.files:
            lines.append("")
        lines += [f"- `{name}`" for name in s.files]
    return "\n".join(lines) + "\n"


def write_atomic(path: Path, content: bytes):
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
        try:
            with os.fdopen(fd, "wb") as fh:
                fh.write(content)
            os.replace(tmp, path)
        except BaseException:
            if os.path.exists(tmp):
                os.unlink(tmp)
            raise
    except OSError as err:
        raise ReportIoError(str(path), err.strerror or str(err)) from None


def emit_report(bundle: ReportBundle, out_dir) -> list:
    """Write every file, then summary.md, then manifest.json.

    The manifest maps each emitted file (summary included) to its sha256 and
    carries the run metadata, so the timestamp never enters a hashed file.
    """
    out = Path(out_dir)
    files = dict(bundle.files)
    files[SUMMARY] = render_summary(bundle).encode()
    for name, content in files.items():
        write_atomic(out / name, content)
    manifest = {
        "files": {name: sha256(content) for name, content in files.items()},
        "steps": [{"step": s.step, "status": s.status, "message": s.message, "files": s.files}
                  for s in bundle.steps],
        "metadata": bundle.metadata,
    }
    write_atomic(out / MANIFEST, json_bytes(manifest))
    return [out / name for name in files] + [out / MANIFEST]


def verify_manifest(out_dir) -> dict:
    """Re-hash every listed file; returns name -> True when the hash matches."""
    out = Path(out_dir)
    manifest = json.loads((out / MANIFEST).read_text())
    return {name: (out / name).exists() and sha256((out / name).read_bytes()) == digest
            for name, digest in manifest["files"].items()}
