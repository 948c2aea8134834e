"""On-disk helpers: named-tensor files, CSV tables, JSON documents.

All writers are deterministic so reruns produce byte-identical files.
"""

from __future__ import annotations

import csv
import json
import zipfile
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

_ZIP_DATE = (1980, 1, 1, 0, 0, 0)


def _prepare(path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    return path


def save_named(path: str | Path, tensors: Mapping[str, np.ndarray]) -> None:
    """Write float64 arrays to an ``.npz`` archive in sorted-name order."""
    path = _prepare(path)
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
        for name in sorted(tensors):
            arr = np.ascontiguousarray(np.asarray(tensors[name], dtype=np.float64))
            info = zipfile.ZipInfo(f"{name}.npy", date_time=_ZIP_DATE)
            with zf.open(info, "w") as fh:
                np.lib.format.write_array(fh, arr, allow_pickle=False)


def load_named(path: str | Path) -> dict[str, np.ndarray]:
    with np.load(path, allow_pickle=False) as data:
        return {k: np.asarray(data[k], dtype=np.float64) for k in data.files}


def write_json(path: str | Path, doc) -> None:
    _prepare(path).write_text(json.dumps(doc, indent=2, sort_keys=True, default=_json_default) + "\n")


def read_json(path: str | Path):
    return json.loads(Path(path).read_text())


def _json_default(obj):
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.floating):
        return float(obj)
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (tuple, set)):
        return list(obj)
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def fmt(x) -> str:
    """Shortest repr that round-trips a float exactly."""
    if isinstance(x, (int, np.integer)) and not isinstance(x, bool):
        return str(int(x))
    if isinstance(x, str):
        return x
    return repr(float(x))


def write_csv(path: str | Path, header: list[str], rows: Iterable[Iterable]) -> None:
    with open(_prepare(path), "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([fmt(x) for x in row])


def read_csv(path: str | Path) -> tuple[list[str], list[list[str]]]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        return header, [row for row in reader]
