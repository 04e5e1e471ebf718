"""Deterministic CSV/JSON readers and writers for profiles, trajectories and reports."""

from __future__ import annotations

import csv
import json
import os
from pathlib import Path

import numpy as np

from .exceptions import ArtifactIOError, ConfigurationError
from .mass_coords import MassProfile

FLOAT_FMT = "%.17g"


def _fmt(x) -> str:
    if isinstance(x, (int, np.integer)) and not isinstance(x, bool):
        return str(int(x))
    return FLOAT_FMT % float(x)


def write_csv(path, header, columns) -> Path:
    """Write equal-length columns with %.17g floats and LF line endings."""
    path = Path(path)
    cols = [np.asarray(c) for c in columns]
    n = {c.shape[0] for c in cols}
    if len(n) != 1:
        raise ConfigurationError("CSV columns must have equal length")
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            fh.write(",".join(header) + "\n")
            for row in zip(*cols):
                fh.write(",".join(_fmt(v) for v in row) + "\n")
    except OSError as exc:
        raise ArtifactIOError(f"cannot write {path}: {exc}") from exc
    return path


def write_rows(path, header, rows) -> Path:
    """Write dict rows (mixed types); floats use %.17g, None is empty."""
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            fh.write(",".join(header) + "\n")
            for row in rows:
                cells = []
                for key in header:
                    v = row.get(key)
                    if v is None:
                        cells.append("")
                    elif isinstance(v, (bool, np.bool_, str)):
                        cells.append(str(v))
                    else:
                        cells.append(_fmt(v))
                fh.write(",".join(cells) + "\n")
    except OSError as exc:
        raise ArtifactIOError(f"cannot write {path}: {exc}") from exc
    return path


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [_jsonable(v) for v in obj.tolist()]
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        f = float(obj)
        return f if np.isfinite(f) else None
    return obj


def write_json(path, payload) -> Path:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            json.dump(_jsonable(payload), fh, indent=2, sort_keys=True)
            fh.write("\n")
    except OSError as exc:
        raise ArtifactIOError(f"cannot write {path}: {exc}") from exc
    return path


def read_text(path) -> str:
    try:
        with open(path) as fh:
            return fh.read()
    except OSError as exc:
        raise ArtifactIOError(f"cannot read {path}: {exc}") from exc


def _sections(path):
    """Split a CSV into sections, each starting with a header row; blank lines separate them."""
    sections, current = [], None
    with open(path, newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row or all(not c.strip() for c in row):
                current = None
                continue
            cells = [c.strip() for c in row]
            if current is None or not _numeric(cells):
                if _numeric(cells):
                    raise ConfigurationError(f"{path}:{lineno}: data row before a header")
                current = {"header": cells, "rows": [], "line": lineno}
                sections.append(current)
                continue
            if len(cells) != len(current["header"]):
                raise ConfigurationError(f"{path}:{lineno}: expected {len(current['header'])} columns")
            current["rows"].append([float(c) for c in cells])
    return sections


def _numeric(cells) -> bool:
    try:
        [float(c) for c in cells]
        return True
    except ValueError:
        return False


def read_columns(path, expected=None) -> dict:
    """First section of a CSV as ``{column: array}``."""
    try:
        secs = _sections(path)
    except OSError as exc:
        raise ArtifactIOError(f"cannot read {path}: {exc}") from exc
    if not secs:
        raise ConfigurationError(f"{path}: empty CSV")
    sec = secs[0]
    data = np.array(sec["rows"], dtype=float).reshape(-1, len(sec["header"]))
    cols = {h: data[:, i] for i, h in enumerate(sec["header"])}
    if expected is not None and not set(expected) <= set(cols):
        raise ConfigurationError(f"{path}:{sec['line']}: expected columns {list(expected)}, got {sec['header']}")
    return cols


def read_cdf_csv(path) -> MassProfile:
    """``x,M`` rows (full right-continuous CDF), optionally a second ``x,jump`` section of atoms."""
    try:
        secs = _sections(path)
    except OSError as exc:
        raise ArtifactIOError(f"cannot read {path}: {exc}") from exc
    if not secs or secs[0]["header"] != ["x", "M"]:
        raise ConfigurationError(f"{path}:1: expected header x,M")
    data = np.array(secs[0]["rows"], dtype=float)
    x, M = data[:, 0], data[:, 1]
    atoms = ()
    if len(secs) > 1:
        if secs[1]["header"] != ["x", "jump"]:
            raise ConfigurationError(f"{path}:{secs[1]['line']}: expected header x,jump for the atom section")
        atoms = tuple((float(p), float(w)) for p, w in secs[1]["rows"])
    jump_below = np.zeros_like(x)
    for p, w in atoms:
        jump_below += w * (x >= p)
    return MassProfile(x, M - jump_below, atoms)


def read_density_csv(path) -> MassProfile:
    cols = read_columns(path, ("x", "rho"))
    return MassProfile.from_density(cols["x"], cols["rho"])


def write_cdf_csv(path, profile: MassProfile) -> Path:
    from .mass_coords import cdf_eval

    write_csv(path, ["x", "M"], [profile.nodes, cdf_eval(profile, profile.nodes)])
    if profile.atoms:
        with open(path, "a", newline="") as fh:
            fh.write("\nx,jump\n")
            for p, w in profile.atoms:
                fh.write(f"{_fmt(p)},{_fmt(w)}\n")
    return Path(path)


def ensure_dir(path) -> Path:
    path = Path(path)
    try:
        path.mkdir(parents=True, exist_ok=True)
        if not os.access(path, os.W_OK):
            raise ArtifactIOError(f"output directory {path} is not writable")
    except OSError as exc:
        raise ArtifactIOError(f"cannot create {path}: {exc}") from exc
    return path
