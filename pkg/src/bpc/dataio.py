"""CSV ingestion and the JSON report envelope."""

from __future__ import annotations

import hashlib
import io
import json
import math
from importlib import resources
from pathlib import Path
from typing import Any, Union

import numpy as np

from bpc.sampling import CountPairSample

SCHEMA_VERSION = "1.0"


class InputError(ValueError):
    """Malformed user input (CSV contents, flags)."""


def parse_csv(text: str, source: str = "<string>") -> CountPairSample:
    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    if not lines:
        raise InputError(f"{source}: file is empty")
    if lines[0].strip().lstrip("﻿") != "x,y":
        raise InputError(f"{source}: line 1: expected header 'x,y', got {lines[0]!r}")
    pairs = []
    for lineno, line in enumerate(lines[1:], start=2):
        fields = line.strip().split(",")
        if len(fields) != 2:
            raise InputError(f"{source}: line {lineno}: expected two fields, got {line!r}")
        try:
            x, y = (int(f) for f in fields)
        except ValueError:
            raise InputError(f"{source}: line {lineno}: non-integer value in {line!r}") from None
        if x < 0 or y < 0:
            raise InputError(f"{source}: line {lineno}: negative value in {line!r}")
        pairs.append((x, y))
    if not pairs:
        raise InputError(f"{source}: no data rows")
    return CountPairSample(np.array(pairs, dtype=np.int64))


def load_csv(path: Union[str, Path]) -> CountPairSample:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except FileNotFoundError:
        raise InputError(f"{path}: no such file") from None
    return parse_csv(text, str(path))


def format_csv(sample: CountPairSample) -> str:
    buf = io.StringIO()
    buf.write("x,y\n")
    for x, y in sample.pairs:
        buf.write(f"{x},{y}\n")
    return buf.getvalue()


def digest_bytes(data: bytes) -> str:
    return "sha256:" + hashlib.sha256(data).hexdigest()


def digest_params(obj: Any) -> str:
    return digest_bytes(json.dumps(to_jsonable(obj), sort_keys=True).encode())


def to_jsonable(obj: Any) -> Any:
    if isinstance(obj, dict):
        return {str(k): to_jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [to_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return to_jsonable(obj.tolist())
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        return v if math.isfinite(v) else None
    if hasattr(obj, "__dataclass_fields__"):
        return to_jsonable({k: getattr(obj, k) for k in obj.__dataclass_fields__})
    return obj


def envelope(command: str, digest: str, results: Any, diagnostics: Any = None,
             seed: Any = None) -> dict:
    return {
        "schema_version": SCHEMA_VERSION,
        "command": command,
        "params_or_data_digest": digest,
        "results": to_jsonable(results),
        "diagnostics": to_jsonable(diagnostics or {}),
        "seed": seed,
    }


def dumps(doc: dict) -> str:
    return json.dumps(doc, indent=2, sort_keys=True) + "\n"


def report_schema() -> dict:
    text = resources.files("bpc").joinpath("schemas/report.schema.json").read_text()
    return json.loads(text)


def bundled_sample_path():
    return resources.files("bpc").joinpath("data/synthetic_pairs.csv")
