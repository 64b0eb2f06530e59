"""CSV and binary export of profiles, fields and states.

CSV floats are written with 17 significant digits, which round-trips every
double exactly and makes output byte-identical across runs.

The binary format is::

    b"RTWV1\\n"                     magic
    uint32 little endian           length of the JSON header in bytes
    JSON header (UTF-8)            {"kind", "meta", "arrays": [...]}
    raw array bytes                C order, little endian, back to back

Every entry of ``arrays`` records ``name``, ``dtype``, ``shape``, ``offset``
(relative to the first byte after the header) and ``nbytes``.  Volume fields
store the two layers as separate arrays, so the layer offsets are explicit.
"""
from __future__ import annotations

import csv
import json
import struct
from pathlib import Path

import numpy as np

from .errors import DataError
from .spectral import Grid, SurfaceField, VolumeField

__all__ = [
    "MAGIC",
    "format_float",
    "write_csv",
    "read_csv",
    "write_profile_csv",
    "write_volume_slice_csv",
    "dump_arrays",
    "load_arrays",
    "dump_volume_field",
    "load_volume_field",
    "dump_state",
    "load_state",
]

MAGIC = b"RTWV1\n"


def format_float(x):
    """Fixed 17-significant-digit formatting."""
    return format(float(x), ".17g")


def _cell(v):
    if isinstance(v, (bool, np.bool_)):
        return "1" if v else "0"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return format_float(v)
    return str(v)


def write_csv(path, header, rows, comment=None):
    """Write ``rows`` under ``header``; an optional ``comment`` line starts with ``#``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        if comment:
            for line in str(comment).splitlines():
                fh.write(f"# {line}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_cell(v) for v in row])
    return path


def read_csv(path):
    """Return ``(header, rows)``; numeric cells become floats, comment lines are skipped."""
    with open(path, newline="") as fh:
        lines = [line for line in fh if not line.startswith("#")]
    reader = csv.reader(lines)
    header = next(reader)
    rows = []
    for raw in reader:
        row = []
        for v in raw:
            try:
                row.append(float(v))
            except ValueError:
                row.append(v)
        rows.append(row)
    return header, rows


def write_profile_csv(path, profile):
    """Equilibrium profile as ``x3, rho, layer`` rows, lower layer first."""
    return write_csv(path, ("x3", "rho", "layer"), profile.rows())


def write_volume_slice_csv(path, field, i1=0, i2=0):
    """Physical values along ``x3`` at horizontal grid point ``(i1, i2)``."""
    g = field.grid
    phys = field.physical()
    n_comp = 1 if field.rank == "scalar" else (3 if field.rank == "vector3" else 9)
    header = ["x3", "layer"] + ([f"v{k}" for k in range(n_comp)] if n_comp > 1 else ["value"])
    rows = []
    for layer, arr in (("minus", phys[1]), ("plus", phys[0])):
        vals = arr.reshape((n_comp,) + arr.shape[-3:])[:, i1, i2, :]
        for j, z in enumerate(g.z(layer)):
            rows.append([float(z), layer] + [float(v) for v in vals[:, j]])
    return write_csv(path, header, rows)


# ---------------------------------------------------------------------------
# binary
# ---------------------------------------------------------------------------
def dump_arrays(path, arrays, kind="arrays", meta=None):
    """Write named arrays in the documented binary layout."""
    entries, blobs, offset = [], [], 0
    for name, arr in arrays.items():
        a = np.ascontiguousarray(arr)
        a = a.astype(a.dtype.newbyteorder("<"), copy=False)
        entries.append({"name": name, "dtype": a.dtype.str, "shape": list(a.shape),
                        "offset": offset, "nbytes": a.nbytes})
        blobs.append(a.tobytes())
        offset += a.nbytes
    header = json.dumps({"kind": kind, "meta": meta or {}, "arrays": entries},
                        sort_keys=True).encode()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        for blob in blobs:
            fh.write(blob)
    return path


def load_arrays(path):
    """Read a binary dump; returns ``(arrays, header)``."""
    raw = Path(path).read_bytes()
    if not raw.startswith(MAGIC):
        raise DataError(f"{path}: not an rtwave binary file")
    pos = len(MAGIC)
    (n,) = struct.unpack("<I", raw[pos:pos + 4])
    pos += 4
    header = json.loads(raw[pos:pos + n].decode())
    body = raw[pos + n:]
    arrays = {}
    for e in header["arrays"]:
        chunk = body[e["offset"]:e["offset"] + e["nbytes"]]
        if len(chunk) != e["nbytes"]:
            raise DataError(f"{path}: truncated array {e['name']!r}")
        arrays[e["name"]] = np.frombuffer(chunk, dtype=np.dtype(e["dtype"])).reshape(e["shape"]).copy()
    return arrays, header


def _grid_meta(grid):
    return {"L1": grid.L1, "L2": grid.L2, "N_h": grid.N_h, "N_v_plus": grid.N_v_plus,
            "N_v_minus": grid.N_v_minus, "ell": grid.ell, "b": grid.b}


def dump_volume_field(path, field):
    """Coefficient arrays of both layers plus the grid description."""
    meta = {"grid": _grid_meta(field.grid), "rank": field.rank}
    return dump_arrays(path, {"plus": field.data_plus, "minus": field.data_minus},
                       "volume_field", meta)


def load_volume_field(path):
    arrays, header = load_arrays(path)
    if header["kind"] != "volume_field":
        raise DataError(f"{path}: expected a volume field, found {header['kind']!r}")
    meta = header["meta"]
    return VolumeField(arrays["plus"], arrays["minus"], Grid(**meta["grid"]), meta["rank"])


def dump_state(path, state, extra=None):
    """Checkpoint of a flattened state."""
    meta = {"grid": _grid_meta(state.grid), "time": float(state.time)}
    if extra:
        meta.update(extra)
    arrays = {"q_plus": state.q.data_plus, "q_minus": state.q.data_minus,
              "u_plus": state.u.data_plus, "u_minus": state.u.data_minus,
              "eta_plus": state.eta_plus.coeffs, "eta_minus": state.eta_minus.coeffs}
    return dump_arrays(path, arrays, "state", meta)


def load_state(path):
    from .simulation import FlattenedState

    arrays, header = load_arrays(path)
    if header["kind"] != "state":
        raise DataError(f"{path}: expected a state checkpoint, found {header['kind']!r}")
    meta = header["meta"]
    g = Grid(**meta["grid"])
    return FlattenedState(VolumeField(arrays["q_plus"], arrays["q_minus"], g),
                          VolumeField(arrays["u_plus"], arrays["u_minus"], g, "vector3"),
                          SurfaceField(arrays["eta_plus"], g, "plus"),
                          SurfaceField(arrays["eta_minus"], g, "minus"), meta["time"])
