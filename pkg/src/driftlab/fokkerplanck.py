"""Density transport under the pure-drift continuity equation.

Propagates cell masses with a conservative first-order upwind (donor cell)
scheme on the periodic grid.  Mass moves along the same velocity snapshots
the particle oracle samples, so the density's expected position can be
compared against RK4 trajectories directly.
"""

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateDensityError, FormatError
from .field import _read_block, _read_header, _write_header
from .grid import circular_mean_xy

_DPDF_MAGIC = b"DPDF"


@dataclass
class DensityGrid:
    """Cell-mass snapshots, shape (k_steps + 1, ny, nx); each sums to one."""

    spec: object
    p: np.ndarray

    def __post_init__(self):
        want = (self.spec.n_snapshots, self.spec.ny, self.spec.nx)
        self.p = np.ascontiguousarray(self.p, dtype=np.float64)
        if self.p.shape != want:
            raise ValueError(f"density array must have shape {want}")


def init_density(spec, r0, sigma0=0.0):
    """Initial unit-mass distribution centered at r0.

    sigma0 = 0 deposits the mass onto the four cells around r0 with bilinear
    weights (a numerical point mass); sigma0 > 0 lays down an isotropic
    Gaussian of that standard deviation (km), evaluated with minimal-image
    distances (adequate while sigma0 is small against the domain) and
    normalized to unit total.
    """
    p = np.zeros((spec.ny, spec.nx))
    r0 = spec.wrap_position(np.asarray(r0, dtype=np.float64))
    if sigma0 == 0.0:
        gx = (r0[0] - spec.x0) / spec.h - 0.5
        gy = (r0[1] - spec.y0) / spec.h - 0.5
        jx, jy = int(np.floor(gx)), int(np.floor(gy))
        fx, fy = gx - jx, gy - jy
        j0, i0 = jx % spec.nx, jy % spec.ny
        j1, i1 = (j0 + 1) % spec.nx, (i0 + 1) % spec.ny
        p[i0, j0] += (1.0 - fx) * (1.0 - fy)
        p[i0, j1] += fx * (1.0 - fy)
        p[i1, j0] += (1.0 - fx) * fy
        p[i1, j1] += fx * fy
    else:
        x, y = np.meshgrid(spec.cell_centers_x(), spec.cell_centers_y())
        dx = x - r0[0]
        dy = y - r0[1]
        dx -= spec.lx * np.round(dx / spec.lx)
        dy -= spec.ly * np.round(dy / spec.ly)
        w = np.exp(-(dx ** 2 + dy ** 2) / (2.0 * sigma0 ** 2))
        p = w / w.sum()
    return p


def cfl_substeps(field):
    """Substeps per snapshot interval keeping the Courant number at or
    below one half in each direction."""
    spec = field.spec
    return max(1, int(np.ceil(2.0 * spec.delta * field.vmax / spec.h)))


def upwind_substep(p, u, v, dt, h):
    """One conservative donor-cell update of cell masses.

    Face velocities are averages of the two adjacent centers; the donor side
    supplies the mass.  The update telescopes, so total mass is preserved to
    rounding.
    """
    ue = 0.5 * (u + np.roll(u, -1, axis=1))   # face between col j and j+1
    vn = 0.5 * (v + np.roll(v, -1, axis=0))   # face between row i and i+1
    up = np.maximum(ue, 0.0)
    um = ue - up
    vp = np.maximum(vn, 0.0)
    vm = vn - vp
    fe = (dt / h) * (up * p + um * np.roll(p, -1, axis=1))
    fn = (dt / h) * (vp * p + vm * np.roll(p, -1, axis=0))
    return p - (fe - np.roll(fe, 1, axis=1)) - (fn - np.roll(fn, 1, axis=0))


def propagate_density(field, p0, substeps=None):
    """March an initial mass distribution through all snapshot intervals.

    substeps overrides the automatic Courant-limited count (mainly for
    comparisons); velocities are interpolated to the start of each substep.
    """
    spec = field.spec
    n_sub = cfl_substeps(field) if substeps is None else int(substeps)
    if n_sub < 1:
        raise ValueError("substeps must be at least 1")
    dt = spec.delta / n_sub
    p = np.array(p0, dtype=np.float64)
    if p.shape != (spec.ny, spec.nx):
        raise ValueError(f"p0 must have shape ({spec.ny}, {spec.nx})")
    out = np.empty((spec.n_snapshots, spec.ny, spec.nx))
    out[0] = p
    tmax = spec.duration
    for k in range(spec.k_steps):
        for s in range(n_sub):
            t = min(spec.delta * (k * n_sub + s) / n_sub, tmax)
            j = min(int(np.floor(t / spec.delta)), spec.k_steps - 1)
            w = t / spec.delta - j
            if w == 0.0:
                u2, v2 = field.u[j], field.v[j]
            else:
                u2 = (1.0 - w) * field.u[j] + w * field.u[j + 1]
                v2 = (1.0 - w) * field.v[j] + w * field.v[j + 1]
            p = upwind_substep(p, u2, v2, dt, spec.h)
        out[k + 1] = p
    return DensityGrid(spec, out)


def expected_position(p, spec):
    """Wrap-aware center of mass of one or more density maps.

    Accepts (..., ny, nx) and returns (..., 2) km.  Raises if any map has
    non-positive or non-finite total mass.
    """
    p = np.asarray(p, dtype=np.float64)
    total = p.sum(axis=(-2, -1))
    if not np.isfinite(total).all() or (total <= 0.0).any():
        raise DegenerateDensityError("density has non-positive or non-finite total mass")
    return circular_mean_xy(p, spec)


# ---------------------------------------------------------------------------
# formats

def write_density_dpdf(dens, path):
    with open(path, "wb") as fh:
        _write_header(fh, _DPDF_MAGIC, dens.spec)
        fh.write(np.ascontiguousarray(dens.p, dtype="<f8").tobytes())


def read_density_dpdf(path):
    with open(path, "rb") as fh:
        spec = _read_header(fh, _DPDF_MAGIC, path)
        count = spec.n_snapshots * spec.ny * spec.nx
        p = _read_block(fh, count, path).reshape(spec.n_snapshots, spec.ny, spec.nx)
    return DensityGrid(spec, p)


def write_density_csv(dens, path):
    """Rows t,row,col,mass; cells in raster order per snapshot."""
    spec = dens.spec
    with open(path, "w") as fh:
        fh.write("t,row,col,mass\n")
        for k in range(spec.n_snapshots):
            t = k * spec.delta
            for i in range(spec.ny):
                row = dens.p[k, i]
                for j in range(spec.nx):
                    fh.write(f"{t:.6f},{i},{j},{row[j]:.17g}\n")
