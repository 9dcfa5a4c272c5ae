"""Periodic grid geometry shared by the simulation and learning modules.

All fields in this package live on a doubly periodic rectangle split into
nx*ny square cells of side h (km).  Quantities are stored at cell centers,
row index i runs along y, column index j along x.  Time is discretized into
k_steps intervals of delta hours.
"""

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class GridSpec:
    """Geometry and time discretization of a periodic domain.

    Parameters
    ----------
    nx, ny : int
        Number of cells along x and y.
    h : float
        Cell size in km (cells are square).
    delta : float
        Snapshot spacing in hours.
    k_steps : int
        Number of snapshot intervals; a run stores k_steps + 1 snapshots.
    x0, y0 : float
        Coordinates of the lower-left domain corner in km.
    """

    nx: int
    ny: int
    h: float
    delta: float
    k_steps: int
    x0: float = 0.0
    y0: float = 0.0

    def __post_init__(self):
        if self.nx < 1 or self.ny < 1:
            raise ValueError("grid needs at least one cell per axis")
        if not (self.h > 0.0):
            raise ValueError("cell size h must be positive")
        if not (self.delta > 0.0):
            raise ValueError("snapshot spacing delta must be positive")
        if self.k_steps < 1:
            raise ValueError("k_steps must be at least 1")

    @property
    def lx(self):
        return self.nx * self.h

    @property
    def ly(self):
        return self.ny * self.h

    @property
    def n_snapshots(self):
        return self.k_steps + 1

    @property
    def duration(self):
        """Total covered time span in hours."""
        return self.k_steps * self.delta

    def cell_centers_x(self):
        return self.x0 + (np.arange(self.nx) + 0.5) * self.h

    def cell_centers_y(self):
        return self.y0 + (np.arange(self.ny) + 0.5) * self.h

    def cell_of(self, pos):
        """Map a position (x, y) to the (row, col) index of its cell."""
        x, y = float(pos[0]), float(pos[1])
        col = int(np.floor(((x - self.x0) % self.lx) / self.h)) % self.nx
        row = int(np.floor(((y - self.y0) % self.ly) / self.h)) % self.ny
        return row, col

    def cell_center(self, row, col):
        return (self.x0 + (col + 0.5) * self.h, self.y0 + (row + 0.5) * self.h)

    def wrap_position(self, pos):
        """Wrap positions into [x0, x0+lx) x [y0, y0+ly).

        Accepts an array whose last axis holds (x, y); positions already in
        the domain are returned unchanged bit for bit.
        """
        pos = np.asarray(pos, dtype=np.float64)
        out = np.empty_like(pos)
        out[..., 0] = self.x0 + np.mod(pos[..., 0] - self.x0, self.lx)
        out[..., 1] = self.y0 + np.mod(pos[..., 1] - self.y0, self.ly)
        return out


def wrap_delta(d, period):
    """Minimal-image displacement on a periodic axis.

    Maps d into [-period/2, period/2]; distances between wrapped positions
    should always go through this before being squared or summed.
    """
    d = np.asarray(d, dtype=np.float64)
    return d - period * np.round(d / period)


def wrap_delta_xy(dpos, spec):
    """Minimal-image displacement for (..., 2) position differences."""
    dpos = np.asarray(dpos, dtype=np.float64)
    out = np.empty_like(dpos)
    out[..., 0] = wrap_delta(dpos[..., 0], spec.lx)
    out[..., 1] = wrap_delta(dpos[..., 1], spec.ly)
    return out


def periodic_distance(a, b, spec):
    """Euclidean distance between positions under the minimal image rule."""
    d = wrap_delta_xy(np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64), spec)
    return np.sqrt(d[..., 0] ** 2 + d[..., 1] ** 2)


def angle_tables(spec):
    """Per-column and per-row angular embeddings of cell centers.

    Returns (sin_x, cos_x, sin_y, cos_y) where the x tables have shape (nx,)
    and the y tables (ny,).  Mapping each axis onto the unit circle makes the
    weighted mean below wrap-aware.
    """
    tx = 2.0 * np.pi * (np.arange(spec.nx) + 0.5) / spec.nx
    ty = 2.0 * np.pi * (np.arange(spec.ny) + 0.5) / spec.ny
    return np.sin(tx), np.cos(tx), np.sin(ty), np.cos(ty)


# Resultants shorter than this are treated as direction-free (tie rule).
TIE_EPS = 1e-18


def circular_mean_xy(w, spec):
    """Wrap-aware center of mass of nonnegative weights on the grid.

    Parameters
    ----------
    w : ndarray, shape (..., ny, nx)
        Weight maps; they do not need to be normalized but the result is
        only meaningful when each map has positive total weight.

    Returns
    -------
    pos : ndarray, shape (..., 2)
        (x, y) in km.  Each axis is the circular mean of cell-center angles
        weighted by w, mapped back to [x0, x0+lx) x [y0, y0+ly).  A map with
        a vanishing resultant on an axis falls back to the domain origin on
        that axis (documented tie rule).
    """
    w = np.asarray(w, dtype=np.float64)
    sin_x, cos_x, sin_y, cos_y = angle_tables(spec)
    wx = w.sum(axis=-2)
    wy = w.sum(axis=-1)
    sx = wx @ sin_x
    cx = wx @ cos_x
    sy = wy @ sin_y
    cy = wy @ cos_y
    x = spec.x0 + np.mod(np.arctan2(sx, cx) / (2.0 * np.pi), 1.0) * spec.lx
    y = spec.y0 + np.mod(np.arctan2(sy, cy) / (2.0 * np.pi), 1.0) * spec.ly
    tie_x = np.hypot(sx, cx) < TIE_EPS
    tie_y = np.hypot(sy, cy) < TIE_EPS
    x = np.where(tie_x, spec.x0, x)
    y = np.where(tie_y, spec.y0, y)
    return np.stack([x, y], axis=-1)
