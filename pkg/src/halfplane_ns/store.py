"""Binary checkpoints and append-only CSV time series.

Checkpoint layout (all little-endian)::

    b"HPBVNS01"
    u32 version, u32 nx, u32 ny
    f64 lx, f64 ly, f64 t
    f64 mu, lam, gamma, A, rho_far, rho_floor
    payload: rho (nx*ny), u1 ((nx+1)*ny), u2 (nx*(ny+1)) as f64, row-major
    trailer: 8-byte blake2b digest of the payload
"""

from __future__ import annotations

import csv
import hashlib
import math
import os
import struct
import tempfile
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .core import RHO_FLOOR, FluidParams, Grid, State, ValidationError, make_grid, make_params

MAGIC = b"HPBVNS01"
VERSION = 1
_HEADER = struct.Struct("<III3d6d")


class CheckpointError(ValueError):
    pass


class SchemaError(ValueError):
    pass


def _digest(payload: bytes) -> bytes:
    return hashlib.blake2b(payload, digest_size=8).digest()


def _atomic_write(path: Path, blob: bytes):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            n = fh.write(blob)
            if n != len(blob):
                raise OSError(f"short write ({n} of {len(blob)} bytes)")
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def encode_checkpoint(state: State, params: FluidParams, rho_floor: float = RHO_FLOOR,
                      version: int = VERSION) -> bytes:
    g = state.grid
    head = _HEADER.pack(version, g.nx, g.ny, g.lx, g.ly, state.t,
                        params.mu, params.lam, params.gamma, params.capA, params.rho_far, rho_floor)
    payload = b"".join(np.ascontiguousarray(a, dtype="<f8").tobytes()
                       for a in (state.rho.data, state.u[0].data, state.u[1].data))
    return MAGIC + head + payload + _digest(payload)


def write_checkpoint(state: State, params: FluidParams, path, rho_floor: float = RHO_FLOOR):
    _atomic_write(Path(path), encode_checkpoint(state, params, rho_floor))


def decode_checkpoint(blob: bytes) -> Tuple[State, FluidParams, Dict[str, float]]:
    n0 = len(MAGIC) + _HEADER.size
    if len(blob) < n0 + 8:
        raise CheckpointError("checkpoint truncated (header incomplete)")
    if blob[:len(MAGIC)] != MAGIC:
        raise CheckpointError("bad magic: not a checkpoint file")
    version, nx, ny, lx, ly, t, mu, lam, gamma, capA, rho_far, rho_floor = \
        _HEADER.unpack_from(blob, len(MAGIC))
    if version != VERSION:
        raise CheckpointError(f"unsupported version {version} (reader handles {VERSION})")
    sizes = (nx * ny, (nx + 1) * ny, nx * (ny + 1))
    nbytes = 8 * sum(sizes)
    payload = blob[n0:n0 + nbytes]
    trailer = blob[n0 + nbytes:]
    if len(payload) != nbytes or len(trailer) != 8:
        raise CheckpointError("checksum mismatch: payload length does not match header dims")
    if _digest(payload) != trailer:
        raise CheckpointError("checksum mismatch: payload corrupted")
    flat = np.frombuffer(payload, dtype="<f8").astype(np.float64)
    a, b = sizes[0], sizes[0] + sizes[1]
    grid = make_grid(lx, ly, nx, ny)
    rho = flat[:a].reshape(nx, ny)
    u1 = flat[a:b].reshape(nx + 1, ny)
    u2 = flat[b:].reshape(nx, ny + 1)
    if np.any(rho < 0.0):
        raise ValidationError("checkpoint holds negative density")
    params = make_params(mu, lam, gamma, capA, rho_far)
    return State.from_arrays(grid, rho, u1, u2, t), params, {"rho_floor": rho_floor}


def read_checkpoint(path) -> Tuple[State, FluidParams]:
    state, params, _ = decode_checkpoint(Path(path).read_bytes())
    return state, params


def read_checkpoint_meta(path) -> Dict[str, float]:
    return decode_checkpoint(Path(path).read_bytes())[2]


def checkpoint_path(directory, t: float) -> Path:
    return Path(directory) / f"ck_t{t:016.9f}.bin"


def latest_checkpoint(directory) -> Optional[Path]:
    d = Path(directory)
    if not d.is_dir():
        return None
    files = sorted(d.glob("ck_t*.bin"))
    return files[-1] if files else None


# --- series -------------------------------------------------------------------

def _fmt(v) -> str:
    v = float(v)
    if math.isnan(v):
        return "nan"
    return "%.17g" % v


class SeriesWriter:
    """Append-only CSV with a fixed column schema; the first column is ``t``."""

    def __init__(self, path, columns: Sequence[str], units: Optional[Sequence[str]] = None):
        cols = list(columns)
        if not cols or cols[0] != "t":
            raise SchemaError("first series column must be 't'")
        if len(set(cols)) != len(cols):
            raise SchemaError("duplicate column names")
        self.path = Path(path)
        self.columns = cols
        self.units = list(units) if units is not None else [""] * len(cols)
        if len(self.units) != len(cols):
            raise SchemaError("units line length differs from the column count")
        self._last_t = -math.inf
        self._header_written = False
        if self.path.exists() and self.path.stat().st_size > 0:
            cols_found, units_found, rows = read_series(self.path)
            if cols_found != cols:
                raise SchemaError(f"existing file has columns {cols_found}, expected {cols}")
            self._header_written = True
            if rows:
                self._last_t = rows[-1]["t"]

    @property
    def last_t(self) -> float:
        """Time of the newest row (``-inf`` for an empty file)."""
        return self._last_t

    def append(self, record: Dict[str, float]):
        keys = list(record.keys())
        if set(keys) != set(self.columns):
            missing = sorted(set(self.columns) - set(keys))
            extra = sorted(set(keys) - set(self.columns))
            raise SchemaError(f"schema drift (missing {missing}, unexpected {extra})")
        t = float(record["t"])
        if not t > self._last_t:
            raise SchemaError(f"time must increase strictly ({t} after {self._last_t})")
        self.path.parent.mkdir(parents=True, exist_ok=True)
        with open(self.path, "a", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            if not self._header_written:
                w.writerow(self.columns)
                w.writerow(["#" + u if i == 0 else u for i, u in enumerate(self.units)])
                self._header_written = True
            w.writerow([_fmt(record[c]) for c in self.columns])
        self._last_t = t


def open_series(path, columns, units=None) -> SeriesWriter:
    return SeriesWriter(path, columns, units)


def append_series_row(handle: SeriesWriter, record: Dict[str, float]):
    handle.append(record)


def read_series(path) -> Tuple[List[str], List[str], List[Dict[str, float]]]:
    with open(path, newline="") as fh:
        r = csv.reader(fh)
        cols = next(r)
        units = next(r)
        units[0] = units[0][1:] if units and units[0].startswith("#") else units[0]
        rows = []
        for line in r:
            if len(line) != len(cols):
                raise SchemaError(f"row with {len(line)} fields under a {len(cols)}-column header")
            rows.append({c: float(v) for c, v in zip(cols, line)})
    return cols, units, rows
