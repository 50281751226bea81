"""Artifact writing: exact float formatting, atomic output directories, run manifests."""
import json
import logging
import os
import shutil
import tempfile
from contextlib import contextmanager
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Dict, Iterator, List, Optional

import pandas as pd
from pydantic import BaseModel, Field

from abmlens import __version__

logger = logging.getLogger(__name__)

FLOAT_FORMAT = "%.17g"
MANIFEST_NAME = "manifest.json"


class RunManifest(BaseModel):
    command: str
    argv: List[str]
    config: Dict[str, Any] = Field(default_factory=dict)
    inputs: List[str] = Field(default_factory=list)
    outputs: List[str] = Field(default_factory=list)
    tool_version: str = __version__
    seeds: List[int] = Field(default_factory=list)
    started_at: str
    finished_at: Optional[str] = None
    cwd: str = Field(default_factory=os.getcwd)


def utc_timestamp() -> str:
    return datetime.now(timezone.utc).strftime("%Y-%m-%dT%H:%M:%S.%fZ")


def write_csv(frame: pd.DataFrame, path) -> None:
    frame.to_csv(path, index=False, float_format=FLOAT_FORMAT, lineterminator="\n")


def write_json(payload: Any, path) -> None:
    # json emits the shortest repr that round-trips, so floats reload exactly.
    text = json.dumps(payload, indent=2, sort_keys=True, allow_nan=False)
    Path(path).write_text(text + "\n", encoding="utf-8")


def read_json(path) -> Any:
    return json.loads(Path(path).read_text(encoding="utf-8"))


@contextmanager
def atomic_output_dir(out) -> Iterator[Path]:
    """Yield a scratch directory that replaces ``out`` only if the block succeeds."""
    out = Path(out)
    out.parent.mkdir(parents=True, exist_ok=True)
    scratch = Path(tempfile.mkdtemp(prefix=f".{out.name}.", dir=out.parent))
    try:
        yield scratch
    except BaseException:
        shutil.rmtree(scratch, ignore_errors=True)
        raise
    if out.exists():
        shutil.rmtree(out)
    os.replace(scratch, out)
    logger.info(f"Wrote artifacts to {out}")


def write_manifest(manifest: RunManifest, directory) -> None:
    directory = Path(directory)
    manifest.outputs = sorted(
        p.name for p in directory.iterdir() if p.name != MANIFEST_NAME
    )
    manifest.finished_at = utc_timestamp()
    write_json(manifest.model_dump(), directory / MANIFEST_NAME)


def load_manifest(path) -> RunManifest:
    path = Path(path)
    if path.is_dir():
        path = path / MANIFEST_NAME
    return RunManifest.model_validate(read_json(path))
