"""CSV writers for paths, excursions and experiment tables."""
from __future__ import annotations

import csv
import gzip
import json
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .excursion import ExcursionRecord
from .rbm_sim import ReflectedPath


def fmt(value) -> str:
    """Shortest round-tripping text for a number; stable across runs."""
    if isinstance(value, (bool, np.bool_)):
        return "1" if value else "0"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    return str(value)


def _open(path: Path, compress: bool):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if compress:
        # mtime=0 keeps the gzip header reproducible
        raw = open(path, "wb")
        return gzip.GzipFile(fileobj=raw, mode="wb", mtime=0), raw
    return open(path, "w", newline=""), None


def write_table(path, header: Sequence[str], rows: Iterable[Sequence], compress: bool = False) -> Path:
    path = Path(path)
    fh, raw = _open(path, compress)
    try:
        if compress:
            lines = [",".join(header)] + [",".join(fmt(v) for v in row) for row in rows]
            fh.write(("\n".join(lines) + "\n").encode())
        else:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            for row in rows:
                w.writerow([fmt(v) for v in row])
    finally:
        fh.close()
        if raw is not None:
            raw.close()
    return path


def read_table(path) -> list[dict[str, str]]:
    path = Path(path)
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "rt", newline="") as fh:
        return list(csv.DictReader(fh))


def write_path_csv(path, rp: ReflectedPath, compress: bool = False) -> Path:
    """Columns ``step,t,x1..xn,L,contact``."""
    n = rp.positions.shape[1]
    header = ["step", "t"] + [f"x{i + 1}" for i in range(n)] + ["L", "contact"]
    rows = (
        [k, k * rp.dt, *rp.positions[k], rp.local_time[k], bool(rp.contact[k])]
        for k in range(len(rp.positions))
    )
    return write_table(path, header, rows, compress)


def write_excursions_csv(path, records: Sequence[ExcursionRecord], dim: int, compress: bool = False) -> Path:
    """Columns ``k,start_idx,end_idx,ell,size,e0_1..e0_n,xk_1..xk_n``."""
    header = (
        ["k", "start_idx", "end_idx", "ell", "size"]
        + [f"e0_{i + 1}" for i in range(dim)]
        + [f"xk_{i + 1}" for i in range(dim)]
    )
    rows = (
        [k + 1, rec.start_idx, rec.end_idx, rec.ell, rec.size, *rec.e0, *rec.xk]
        for k, rec in enumerate(records)
    )
    return write_table(path, header, rows, compress)


def write_json(path, obj) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, default=_jsonable) + "\n")
    return path


def _jsonable(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if isinstance(o, np.bool_):
        return bool(o)
    if isinstance(o, Path):
        return str(o)
    raise TypeError(f"not JSON serialisable: {type(o)}")
