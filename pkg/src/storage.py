"""Run directories: one manifest and one append-only JSONL trace file each."""
import json
import os
import threading
from datetime import datetime
from pathlib import Path
from typing import Optional, Union

import structlog
from pydantic import Field, ValidationError

from src.core import (
    TRACE_SCHEMA_VERSION,
    FrozenModel,
    ModelId,
    PriceSheet,
    Regime,
    TraceRecord,
)
from src.errors import ResumeError, TraceError

logger = structlog.get_logger(__name__)

MANIFEST_NAME = "manifest.json"
TRACE_NAME = "traces.jsonl"
MANIFEST_SCHEMA_VERSION = 1


class RunManifest(FrozenModel):
    schema_version: int = MANIFEST_SCHEMA_VERSION
    trace_schema_version: int = TRACE_SCHEMA_VERSION
    regime: Regime
    label: str
    models: list[ModelId]
    dataset_name: str
    dataset_path: Optional[str] = None
    dataset_hash: str
    prices: PriceSheet
    price_sheet_hash: str
    parallelism: int = Field(default=1, ge=1)
    seed: Optional[int] = None
    templates_dir: Optional[str] = None
    trace_file: str = TRACE_NAME
    item_count: int = Field(ge=0)
    traced_count: int = 0
    failed_stages: int = 0
    failed_items: int = 0
    complete: bool = False
    created_at: datetime
    updated_at: datetime


def write_manifest(run_dir: Union[str, Path], manifest: RunManifest) -> Path:
    """Write the manifest atomically (temp file, then rename)."""
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    path = run_dir / MANIFEST_NAME
    tmp = path.with_suffix(".json.tmp")
    try:
        tmp.write_text(
            json.dumps(manifest.model_dump(mode="json"), indent=2, sort_keys=True) + "\n",
            encoding="utf-8",
        )
        os.replace(tmp, path)
    except OSError as exc:
        raise TraceError(f"cannot write manifest {path}: {exc}") from exc
    return path


def read_manifest(run_dir: Union[str, Path]) -> RunManifest:
    path = Path(run_dir) / MANIFEST_NAME
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ResumeError(f"no manifest in {run_dir}") from None
    except json.JSONDecodeError as exc:
        raise ResumeError(f"{path}: corrupt manifest: {exc}") from exc
    if data.get("schema_version") != MANIFEST_SCHEMA_VERSION:
        raise ResumeError(
            f"{path}: manifest schema version {data.get('schema_version')} is not {MANIFEST_SCHEMA_VERSION}"
        )
    try:
        return RunManifest.model_validate(data)
    except ValidationError as exc:
        raise ResumeError(f"{path}: {exc}") from exc


def load_traces(path: Union[str, Path]) -> list[TraceRecord]:
    """Read a trace file; a missing file is an empty run."""
    path = Path(path)
    if not path.exists():
        return []
    traces = []
    with open(path, "r", encoding="utf-8") as f:
        for line_no, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                data = json.loads(line)
            except json.JSONDecodeError as exc:
                raise TraceError(f"{path}: corrupt trace: {exc.msg}", line=line_no) from exc
            version = data.get("schema_version") if isinstance(data, dict) else None
            if version != TRACE_SCHEMA_VERSION:
                raise TraceError(f"{path}: trace schema version {version} is not {TRACE_SCHEMA_VERSION}", line=line_no)
            try:
                traces.append(TraceRecord.model_validate(data))
            except ValidationError as exc:
                raise TraceError(f"{path}: invalid trace: {exc}", line=line_no) from exc
    return traces


def load_run(run_dir: Union[str, Path]) -> tuple[RunManifest, list[TraceRecord]]:
    manifest = read_manifest(run_dir)
    return manifest, load_traces(Path(run_dir) / manifest.trace_file)


class TraceWriter:
    """Serialized appends to a trace file; each record is flushed as written."""

    def __init__(self, path: Union[str, Path]):
        self.path = Path(path)
        self._lock = threading.Lock()
        self._file = None

    def __enter__(self) -> "TraceWriter":
        try:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self._file = open(self.path, "a", encoding="utf-8")
        except OSError as exc:
            raise TraceError(f"cannot open trace file {self.path}: {exc}") from exc
        return self

    def __exit__(self, *exc_info) -> None:
        if self._file is not None:
            self._file.close()
            self._file = None

    def append(self, trace: TraceRecord) -> None:
        with self._lock:
            try:
                self._file.write(trace.to_line() + "\n")
                self._file.flush()
            except (OSError, AttributeError) as exc:
                raise TraceError(f"cannot append to {self.path}: {exc}") from exc
