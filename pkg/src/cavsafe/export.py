"""Log export: delimited text, JSON-lines records and the run manifest.

Both formats carry the whole audit (per-step records, per-pair barrier
values, per-vehicle plans and the violation list). Wall-clock timings go to a
separate ``timings.json`` so the other files are reproducible byte for byte.

Floats are written with ``repr``, the shortest string that parses back to the
same double. In JSON, non-finite floats are written as the strings
``"NaN"``, ``"Infinity"`` and ``"-Infinity"``.

Column schema (``steps``)::

    t, cav, path, p, v, u_plan, u_ref, u_star, active, h1, h2, z1, infeasible

``u_plan`` is the planned control, ``u_ref`` the tracking controller output
and ``u_star`` the filtered control actually applied. ``active`` lists the
binding bound sources joined by ``|``. ``z1`` is NaN without a predecessor.
"""

from __future__ import annotations

import csv
import json
import math
import os
import tempfile
from dataclasses import astuple, fields
from pathlib import Path
from typing import Iterable

from .sim import CavRecord, PairRecord, SimLog, StepRecord, Violation

TABLES = {
    "steps": StepRecord,
    "pairs": PairRecord,
    "cavs": CavRecord,
    "violations": Violation,
}
FORMATS = ("text", "records")
MANIFEST_VERSION = 1


def columns(kind: str) -> list[str]:
    return [f.name for f in fields(TABLES[kind])]


def _fmt(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _parse(type_name: str, text: str):
    if type_name == "float":
        return float(text)
    if type_name == "int":
        return int(text)
    if type_name == "bool":
        if text not in ("true", "false"):
            raise ValueError(f"bad boolean {text!r}")
        return text == "true"
    return text


def _json_value(value):
    if isinstance(value, float) and not math.isfinite(value):
        return "NaN" if math.isnan(value) else ("Infinity" if value > 0 else "-Infinity")
    return value


def _from_json(type_name: str, value):
    if type_name == "float":
        return float(value)  # float("NaN") / float("Infinity") parse as well
    return value


def _atomic_write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _rows(log: SimLog, kind: str) -> Iterable:
    return getattr(log, kind)


def write_text(log: SimLog, out_dir) -> dict[str, str]:
    """One CSV per table; empty tables produce header-only files."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = {}
    for kind in TABLES:
        path = out_dir / f"{kind}.csv"
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(columns(kind))
            for rec in _rows(log, kind):
                w.writerow([_fmt(x) for x in astuple(rec)])
        written[kind] = path.name
    return written


def read_text(out_dir) -> SimLog:
    out_dir = Path(out_dir)
    log = SimLog()
    for kind, cls in TABLES.items():
        types = [f.type for f in fields(cls)]
        with open(out_dir / f"{kind}.csv", newline="") as fh:
            r = csv.reader(fh)
            header = next(r)
            if header != columns(kind):
                raise ValueError(f"{kind}.csv: unexpected columns {header}")
            rows = getattr(log, kind)
            for row in r:
                rows.append(cls(*(_parse(t, x) for t, x in zip(types, row))))
    _read_timings(out_dir, log)
    return log


def write_records(log: SimLog, out_dir) -> dict[str, str]:
    """All tables in one JSON-lines file, one object per row tagged by its table in ``record``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / "log.jsonl"
    with open(path, "w") as fh:
        for kind in TABLES:
            for rec in _rows(log, kind):
                obj = {"record": kind}
                obj.update({f.name: _json_value(getattr(rec, f.name)) for f in fields(rec)})
                fh.write(json.dumps(obj, allow_nan=False) + "\n")
    return {"records": path.name}


def read_records(path) -> SimLog:
    path = Path(path)
    log = SimLog()
    types = {kind: {f.name: f.type for f in fields(cls)} for kind, cls in TABLES.items()}
    with open(path) as fh:
        for n, line in enumerate(fh, 1):
            obj = json.loads(line)
            kind = obj.pop("record", None)
            if kind not in TABLES:
                raise ValueError(f"{path}:{n}: unknown record kind {kind!r}")
            ft = types[kind]
            getattr(log, kind).append(TABLES[kind](**{k: _from_json(ft[k], v) for k, v in obj.items()}))
    _read_timings(path.parent, log)
    return log


def write_timings(log: SimLog, out_dir) -> str:
    path = Path(out_dir) / "timings.json"
    _atomic_write(path, json.dumps(log.timings) + "\n")
    return path.name


def _read_timings(out_dir: Path, log: SimLog) -> None:
    path = out_dir / "timings.json"
    if path.exists():
        log.timings = {k: [float(x) for x in v] for k, v in json.loads(path.read_text()).items()}


def export(log: SimLog, fmt: str, out_dir) -> dict[str, str]:
    """Write the log in ``fmt`` plus the timings file; returns file names by role."""
    if fmt == "text":
        files = write_text(log, out_dir)
    elif fmt == "records":
        files = write_records(log, out_dir)
    else:
        raise ValueError(f"unknown format {fmt!r} (expected one of {FORMATS})")
    files["timings"] = write_timings(log, out_dir)
    return files


def load_log(out_dir) -> SimLog:
    """Read whichever format a run directory holds (records preferred)."""
    out_dir = Path(out_dir)
    if (out_dir / "log.jsonl").exists():
        return read_records(out_dir / "log.jsonl")
    if (out_dir / "steps.csv").exists():
        return read_text(out_dir)
    raise FileNotFoundError(f"{out_dir}: no log.jsonl or steps.csv")


def write_manifest(out_dir, config_echo: dict, seed: int, files: dict, summary: dict, version: str) -> Path:
    """Write ``manifest.json`` atomically. ``config_echo`` reloads to the same config."""
    manifest = {
        "manifest_version": MANIFEST_VERSION,
        "artifact_version": version,
        "seed": seed,
        "config": config_echo,
        "files": files,
        "summary": summary,
    }
    path = Path(out_dir) / "manifest.json"
    _atomic_write(path, json.dumps(_clean(manifest), indent=2, sort_keys=False, allow_nan=False) + "\n")
    return path


def _clean(obj):
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    return _json_value(obj)
