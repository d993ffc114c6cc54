"""Uniform tensor grids on boxes [-L, L]^d and vector-valued grid
functions, with second-order gradients and binary/CSV serialization.

Flat storage convention: values have shape (m, n^d) with C-order
flattening of the axes, axis 1 fastest.  For d=2 the flat index of node
(i1, i2) is i1*n + i2.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace

import numpy as np

__all__ = ["Grid", "GridFunction", "gradient", "write_kgf", "read_kgf",
           "write_csv_1d"]

_KGF_MAGIC = b"KGF1"
_HEADER_SIZE = 64


@dataclass(frozen=True)
class Grid:
    d: int
    L: float
    n: int  # points per axis, odd so that 0 is a node

    def __post_init__(self):
        if self.n < 5:
            raise ValueError("need n >= 5 points per axis")
        if self.n % 2 == 0:
            raise ValueError("n must be odd so that the origin is a node")
        if self.d not in (1, 2):
            raise ValueError("desk scale supports d in {1, 2}")
        if self.L <= 0:
            raise ValueError("L must be positive")

    @property
    def h(self):
        return 2.0 * self.L / (self.n - 1)

    @property
    def n_nodes(self):
        return self.n ** self.d

    def axis(self):
        return -self.L + self.h * np.arange(self.n)

    def points(self):
        """All node coordinates, shape (d, n^d), matching flat order."""
        ax = self.axis()
        if self.d == 1:
            return ax.reshape(1, -1)
        X1, X2 = np.meshgrid(ax, ax, indexing="ij")
        return np.stack([X1.ravel(), X2.ravel()])

    def interior_mask(self, probe_L):
        """Boolean mask of nodes with max-norm coordinate <= probe_L."""
        pts = self.points()
        return np.max(np.abs(pts), axis=0) <= probe_L + 1e-12

    def boundary_mask(self):
        pts = self.points()
        return np.max(np.abs(pts), axis=0) >= self.L - 0.5 * self.h

    def index_of(self, x):
        """Flat index of the node nearest to x (length-d array)."""
        idx = np.rint((np.asarray(x, dtype=float) + self.L) / self.h).astype(int)
        idx = np.clip(idx, 0, self.n - 1)
        flat = 0
        for i in range(self.d):
            flat = flat * self.n + idx[i]
        return int(flat)


@dataclass
class GridFunction:
    grid: Grid
    m: int
    values: np.ndarray  # (m, n^d)
    bc: str = "dirichlet"  # or "neumann"
    t: float = 0.0

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.shape != (self.m, self.grid.n_nodes):
            raise ValueError(
                f"values shape {self.values.shape} != "
                f"({self.m}, {self.grid.n_nodes})")
        if self.bc not in ("dirichlet", "neumann"):
            raise ValueError(f"unknown bc {self.bc!r}")

    @classmethod
    def from_callable(cls, grid, m, fn, bc="dirichlet", t=0.0):
        """fn maps points (d, N) to values (m, N) (or (N,) when m=1)."""
        vals = np.asarray(fn(grid.points()), dtype=float)
        if vals.ndim == 1:
            vals = vals.reshape(1, -1)
        return cls(grid, m, vals, bc=bc, t=t)

    @classmethod
    def constant(cls, grid, vec, bc="dirichlet", t=0.0):
        vec = np.atleast_1d(np.asarray(vec, dtype=float))
        vals = np.repeat(vec.reshape(-1, 1), grid.n_nodes, axis=1)
        return cls(grid, len(vec), vals, bc=bc, t=t)

    def sup_norm(self, probe_L=None):
        if probe_L is None:
            return float(np.max(np.abs(self.values)))
        mask = self.grid.interior_mask(probe_L)
        return float(np.max(np.abs(self.values[:, mask])))

    def copy(self):
        return replace(self, values=self.values.copy())

    def value_at(self, x):
        """Multilinear interpolation at x, returns length-m array."""
        return interp_multilinear(self.grid, self.values, np.asarray(
            x, dtype=float).reshape(self.grid.d, 1))[:, 0]


def _one_dim_gradient(vals, h, axis_len):
    """Second-order differences along the last axis of vals."""
    g = np.empty_like(vals)
    g[..., 1:-1] = (vals[..., 2:] - vals[..., :-2]) / (2 * h)
    g[..., 0] = (-3 * vals[..., 0] + 4 * vals[..., 1] - vals[..., 2]) / (2 * h)
    g[..., -1] = (3 * vals[..., -1] - 4 * vals[..., -2] + vals[..., -3]) / (2 * h)
    return g


def gradient(u: GridFunction):
    """Spatial gradient, shape (m, d, n^d); second-order central in the
    interior, one-sided second-order on the faces."""
    g = u.grid
    n, h = g.n, g.h
    if g.d == 1:
        out = _one_dim_gradient(u.values, h, n)
        return out.reshape(u.m, 1, n)
    vals = u.values.reshape(u.m, n, n)
    g1 = _one_dim_gradient(np.swapaxes(vals, 1, 2), h, n)
    g1 = np.swapaxes(g1, 1, 2)  # derivative along axis 1 (x1)
    g2 = _one_dim_gradient(vals, h, n)  # along axis 2 (x2)
    return np.stack([g1.reshape(u.m, -1), g2.reshape(u.m, -1)], axis=1)


def interp_multilinear(grid, values, x):
    """Multilinear interpolation of values (m, n^d) at points x (d, K).

    Points are clamped to the box.  Returns (m, K).
    """
    n, h, L = grid.n, grid.h, grid.L
    x = np.clip(x, -L, L)
    s = (x + L) / h
    i0 = np.clip(np.floor(s).astype(int), 0, n - 2)
    w = s - i0
    if grid.d == 1:
        v = values  # (m, n)
        return v[:, i0[0]] * (1 - w[0]) + v[:, i0[0] + 1] * w[0]
    v = values.reshape(-1, n, n)
    i, j = i0[0], i0[1]
    wi, wj = w[0], w[1]
    out = (v[:, i, j] * (1 - wi) * (1 - wj)
           + v[:, i + 1, j] * wi * (1 - wj)
           + v[:, i, j + 1] * (1 - wi) * wj
           + v[:, i + 1, j + 1] * wi * wj)
    return out


def restrict(u: GridFunction, target: Grid):
    """Restrict u to a smaller grid with the same spacing and nested
    nodes; raises when the node sets do not nest."""
    g = u.grid
    if abs(g.h - target.h) > 1e-12 * g.h:
        raise ValueError("grids do not share spacing")
    off = (target.axis()[0] + g.L) / g.h
    start = int(round(off))
    if abs(off - start) > 1e-9:
        raise ValueError("node sets do not nest")
    sl = slice(start, start + target.n)
    if g.d == 1:
        vals = u.values[:, sl]
    else:
        vals = u.values.reshape(u.m, g.n, g.n)[:, sl, sl].reshape(u.m, -1)
    return GridFunction(target, u.m, vals.copy(), bc=u.bc, t=u.t)


# ---------------------------------------------------------------------------
# Serialization: 64-byte header + row-major little-endian float64 payload

def write_kgf(path, u: GridFunction):
    header = struct.pack("<4siiidd", _KGF_MAGIC, u.grid.d, u.m, u.grid.n,
                         u.grid.L, u.t)
    header += bytes([1 if u.bc == "neumann" else 0])
    header += b"\x00" * (_HEADER_SIZE - len(header))
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(np.ascontiguousarray(u.values, dtype="<f8").tobytes())


def read_kgf(path):
    with open(path, "rb") as fh:
        header = fh.read(_HEADER_SIZE)
        magic, d, m, n, L, t = struct.unpack("<4siiidd", header[:32])
        if magic != _KGF_MAGIC:
            raise ValueError(f"bad magic {magic!r}")
        bc = "neumann" if header[32] == 1 else "dirichlet"
        grid = Grid(d, L, n)
        payload = fh.read(8 * m * grid.n_nodes)
        values = np.frombuffer(payload, dtype="<f8").reshape(m, grid.n_nodes)
    return GridFunction(grid, m, values.copy(), bc=bc, t=t)


def write_csv_1d(path, u: GridFunction):
    if u.grid.d != 1:
        raise ValueError("CSV export only for d=1")
    cols = [u.grid.axis()] + [u.values[k] for k in range(u.m)]
    header = "x," + ",".join(f"u{k + 1}" for k in range(u.m))
    np.savetxt(path, np.column_stack(cols), delimiter=",", header=header,
               comments="")
