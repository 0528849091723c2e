"""Report/mesh CSV writers and the binary state file.

CSV floats carry 17 significant digits so runs can be compared bit-for-bit;
the state file is a versioned flat binary (magic, version, example name, grid
size, rectangle, row-major padded u values, c) for lossless round-trips.
"""

from __future__ import annotations

import math
import struct
from pathlib import Path

import numpy as np

from .grid import GridFunction, build_grid
from .newton import NewtonState

REPORT_COLUMNS = [
    "example", "n", "h", "scheme", "status", "outer_solves", "newton_iterations",
    "wall_seconds", "map_error", "fwd_inv_max_diff", "c", "density_ratio",
    "folded_cells", "containment_max", "boundary_change",
]

STATE_MAGIC = b"MATP"
STATE_VERSION = 1


def _fmt(v) -> str:
    if isinstance(v, str):
        return v
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    fv = float(v)
    if math.isnan(fv):
        return ""
    return format(fv, ".17e")


def write_report_csv(path, rows: list):
    path = Path(path)
    with open(path, "w") as fh:
        fh.write(",".join(REPORT_COLUMNS) + "\n")
        for row in rows:
            fh.write(",".join(_fmt(row.get(c, "")) for c in REPORT_COLUMNS) + "\n")


def write_mesh_csv(path, ctx, state: NewtonState):
    """Node -> mapped point table: i, j, x1, x2, y1, y2, inside(f>0)."""
    g1, g2 = ctx.gradient_arrays(state)
    n = ctx.grid.n
    inside = (ctx.f_values.reshape(n, n) > 0).astype(int)
    with open(Path(path), "w") as fh:
        fh.write("i,j,x1,x2,y1,y2,inside\n")
        for a in range(n):
            for b in range(n):
                fh.write(
                    f"{a},{b},{_fmt(ctx.grid.X1[a, b])},{_fmt(ctx.grid.X2[a, b])},"
                    f"{_fmt(g1[a, b])},{_fmt(g2[a, b])},{inside[a, b]}\n")


def save_state(path, example_name: str, ctx, state: NewtonState):
    g = ctx.grid
    name_bytes = example_name.encode()[:32].ljust(32, b"\0")
    rect = (g.lo[0], g.hi[0], g.lo[1], g.hi[1])
    with open(Path(path), "wb") as fh:
        fh.write(STATE_MAGIC)
        fh.write(struct.pack("<I", STATE_VERSION))
        fh.write(name_bytes)
        fh.write(struct.pack("<I", g.n))
        fh.write(struct.pack("<4d", *rect))
        fh.write(np.ascontiguousarray(state.u.values, dtype="<f8").tobytes())
        fh.write(struct.pack("<d", state.c))


def load_state(path):
    """Returns (example_name, n, rect, NewtonState)."""
    with open(Path(path), "rb") as fh:
        data = fh.read()
    if data[:4] != STATE_MAGIC:
        raise ValueError("not a state file (bad magic)")
    (version,) = struct.unpack_from("<I", data, 4)
    if version != STATE_VERSION:
        raise ValueError(f"unsupported state version {version}")
    name = data[8:40].rstrip(b"\0").decode()
    (n,) = struct.unpack_from("<I", data, 40)
    rect = struct.unpack_from("<4d", data, 44)
    off = 44 + 32
    count = (n + 2) ** 2
    u = np.frombuffer(data, dtype="<f8", count=count, offset=off).reshape(n + 2, n + 2)
    (c,) = struct.unpack_from("<d", data, off + 8 * count)
    grid = build_grid(n, rect)
    return name, n, rect, NewtonState(u=GridFunction(grid, u.copy()), c=c)
