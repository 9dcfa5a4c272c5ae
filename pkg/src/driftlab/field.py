"""Gridded velocity fields: containers, synthetic generators, sampling, curl.

Fields hold (k_steps + 1) snapshots of (u, v) in km/h at cell centers,
indexed [time, row, col].  Sampling between centers is bilinear in space and
linear in time; both interpolations wrap periodically.
"""

import struct
from dataclasses import dataclass

import numpy as np

from .errors import FormatError, TimeRangeError
from .grid import GridSpec, wrap_delta

_DRFT_MAGIC = b"DRFT"
_FORMAT_VERSION = 1


@dataclass
class VelocityField:
    """Snapshots of a 2-D velocity field on a periodic grid.

    u, v : ndarray, shape (k_steps + 1, ny, nx), km/h
    """

    spec: GridSpec
    u: np.ndarray
    v: np.ndarray

    def __post_init__(self):
        want = (self.spec.n_snapshots, self.spec.ny, self.spec.nx)
        self.u = np.ascontiguousarray(self.u, dtype=np.float64)
        self.v = np.ascontiguousarray(self.v, dtype=np.float64)
        if self.u.shape != want or self.v.shape != want:
            raise ValueError(f"velocity arrays must have shape {want}, "
                             f"got u {self.u.shape}, v {self.v.shape}")

    @property
    def vmax(self):
        """Largest speed over all snapshots and cells."""
        return float(np.sqrt(self.u ** 2 + self.v ** 2).max())


@dataclass
class VorticityField:
    """Vertical vorticity snapshots in 1/h, same layout as VelocityField."""

    spec: GridSpec
    zeta: np.ndarray

    def __post_init__(self):
        want = (self.spec.n_snapshots, self.spec.ny, self.spec.nx)
        self.zeta = np.ascontiguousarray(self.zeta, dtype=np.float64)
        if self.zeta.shape != want:
            raise ValueError(f"vorticity array must have shape {want}")


def _snapshot_weights(spec, t):
    """Left snapshot index and interpolation weight for time t (hours)."""
    if not np.isfinite(t) or t < 0.0 or t > spec.duration:
        raise TimeRangeError(f"t={t} outside stored range [0, {spec.duration}] hours")
    s = t / spec.delta
    j = min(int(np.floor(s)), spec.k_steps - 1)
    return j, s - j


def _bilinear(a, gx, gy, nx, ny):
    """Sample array a (ny, nx) at fractional cell coordinates, periodic."""
    jx = np.floor(gx)
    jy = np.floor(gy)
    fx = gx - jx
    fy = gy - jy
    # a non-finite position yields in-range garbage indices and values here;
    # advection loops detect and report the blowup right after the step
    with np.errstate(invalid="ignore"):
        j0 = jx.astype(np.int64) % nx
        i0 = jy.astype(np.int64) % ny
        j1 = (j0 + 1) % nx
        i1 = (i0 + 1) % ny
        return ((1.0 - fy) * ((1.0 - fx) * a[i0, j0] + fx * a[i0, j1])
                + fy * ((1.0 - fx) * a[i1, j0] + fx * a[i1, j1]))


def sample_velocity_many(field, positions, t):
    """Velocity at many positions and one time.

    Parameters
    ----------
    positions : ndarray, shape (n, 2)
        (x, y) in km; any values are accepted, the periodic wrap is applied
        internally.
    t : float
        Time in hours, must lie in [0, k_steps * delta].

    Returns
    -------
    vel : ndarray, shape (n, 2), km/h
    """
    spec = field.spec
    j, w = _snapshot_weights(spec, t)
    if w == 0.0:
        u2 = field.u[j]
        v2 = field.v[j]
    else:
        u2 = (1.0 - w) * field.u[j] + w * field.u[j + 1]
        v2 = (1.0 - w) * field.v[j] + w * field.v[j + 1]
    positions = np.asarray(positions, dtype=np.float64)
    gx = (positions[..., 0] - spec.x0) / spec.h - 0.5
    gy = (positions[..., 1] - spec.y0) / spec.h - 0.5
    return np.stack([_bilinear(u2, gx, gy, spec.nx, spec.ny),
                     _bilinear(v2, gx, gy, spec.nx, spec.ny)], axis=-1)


def sample_velocity(field, pos, t):
    """Velocity (u, v) in km/h at a single position and time."""
    out = sample_velocity_many(field, np.asarray(pos, dtype=np.float64)[None, :], t)
    return out[0]


def _grids(spec):
    xc = spec.cell_centers_x()
    yc = spec.cell_centers_y()
    return np.meshgrid(xc, yc)  # each (ny, nx), row = y


def make_uniform(spec, u0, v0):
    """Constant-in-space-and-time field, handy as a reference oracle."""
    shape = (spec.n_snapshots, spec.ny, spec.nx)
    return VelocityField(spec, np.full(shape, float(u0)), np.full(shape, float(v0)))


def double_gyre_stream(spec, amplitude, eps, omega, x, y, t):
    """Stream function of the two-cell recirculation flow, km^2/h."""
    xx = 2.0 * (np.asarray(x, dtype=np.float64) - spec.x0) / spec.lx
    yy = (np.asarray(y, dtype=np.float64) - spec.y0) / spec.ly
    a = eps * np.sin(omega * t)
    b = 1.0 - 2.0 * a
    f = a * xx ** 2 + b * xx
    return (amplitude * spec.ly / np.pi) * np.sin(np.pi * f) * np.sin(np.pi * yy)


def make_double_gyre(spec, amplitude, eps=0.0, omega=0.0):
    """Two counter-rotating recirculation cells with optional time-periodic
    sloshing of the dividing line.

    The flow derives from the stream function
        psi = (A * ly / pi) * sin(pi f(X, t)) * sin(pi Y),
        f = a X^2 + b X,  a = eps sin(omega t),  b = 1 - 2 eps sin(omega t),
    with X = 2 (x - x0) / lx in [0, 2] and Y = (y - y0) / ly in [0, 1], so it
    is divergence-free analytically and steady when eps = 0.  Speeds scale
    linearly with amplitude (km/h).  omega is in rad/h.
    """
    x, y = _grids(spec)
    xx = 2.0 * (x - spec.x0) / spec.lx
    yy = (y - spec.y0) / spec.ly
    u = np.empty((spec.n_snapshots, spec.ny, spec.nx))
    v = np.empty_like(u)
    for k in range(spec.n_snapshots):
        t = k * spec.delta
        a = eps * np.sin(omega * t)
        b = 1.0 - 2.0 * a
        f = a * xx ** 2 + b * xx
        dfdx = 2.0 * a * xx + b
        u[k] = -amplitude * np.sin(np.pi * f) * np.cos(np.pi * yy)
        v[k] = amplitude * (2.0 * spec.ly / spec.lx) * np.cos(np.pi * f) * dfdx * np.sin(np.pi * yy)
    return VelocityField(spec, u, v)


def make_solid_rotation(spec, omega, center=None):
    """Rigid-body rotation about a center, u = -omega (y - yc), v = omega (x - xc).

    omega is in rad/h; the field is linear in space (the periodic seam is
    discontinuous, so orbits should stay away from the domain edges).
    """
    if center is None:
        center = (spec.x0 + 0.5 * spec.lx, spec.y0 + 0.5 * spec.ly)
    x, y = _grids(spec)
    u1 = -omega * (y - center[1])
    v1 = omega * (x - center[0])
    u = np.repeat(u1[None, :, :], spec.n_snapshots, axis=0)
    v = np.repeat(v1[None, :, :], spec.n_snapshots, axis=0)
    return VelocityField(spec, u, v)


@dataclass
class EddySet:
    """Parameters of a collection of drifting Gaussian vortices."""

    centers: np.ndarray   # (n, 2) km, position at t = 0
    radii: np.ndarray     # (n,) km
    strengths: np.ndarray # (n,) signed stream-function peak, km^2/h
    drifts: np.ndarray    # (n, 2) km/h, constant translation velocity


def sample_eddies(spec, n_eddies, seed, amplitude=1.0, radius_range=None,
                  drift_speed=0.2):
    """Draw random eddy parameters.

    amplitude sets the peak swirl speed of each vortex (km/h); radii are
    uniform in radius_range (defaults to 2h .. 4h); drift velocities are
    uniform in a disk of radius drift_speed.
    """
    rng = np.random.default_rng(seed)
    if radius_range is None:
        radius_range = (2.0 * spec.h, 4.0 * spec.h)
    centers = np.stack([
        spec.x0 + rng.uniform(0.0, spec.lx, n_eddies),
        spec.y0 + rng.uniform(0.0, spec.ly, n_eddies)], axis=-1)
    radii = rng.uniform(radius_range[0], radius_range[1], n_eddies)
    signs = np.where(rng.uniform(size=n_eddies) < 0.5, -1.0, 1.0)
    # psi = S exp(-rho^2 / 2R^2) peaks in swirl speed at rho = R with value
    # S / (R sqrt(e)); choose S so that peak speed equals amplitude.
    strengths = signs * amplitude * radii * np.sqrt(np.e)
    rr = drift_speed * np.sqrt(rng.uniform(size=n_eddies))
    th = rng.uniform(0.0, 2.0 * np.pi, n_eddies)
    drifts = np.stack([rr * np.cos(th), rr * np.sin(th)], axis=-1)
    return EddySet(centers, radii, strengths, drifts)


def eddy_field(spec, eddies):
    """Evaluate a superposition of drifting Gaussian vortices on the grid.

    Each vortex has stream function S exp(-rho^2 / (2 R^2)) with rho the
    minimal-image distance to its (moving) center, giving
        u = S (y - yc) / R^2 * exp(...),   v = -S (x - xc) / R^2 * exp(...).
    """
    x, y = _grids(spec)
    u = np.zeros((spec.n_snapshots, spec.ny, spec.nx))
    v = np.zeros_like(u)
    for k in range(spec.n_snapshots):
        t = k * spec.delta
        for c0, r, s, d in zip(eddies.centers, eddies.radii,
                               eddies.strengths, eddies.drifts):
            dx = wrap_delta(x - (c0[0] + d[0] * t), spec.lx)
            dy = wrap_delta(y - (c0[1] + d[1] * t), spec.ly)
            g = np.exp(-(dx ** 2 + dy ** 2) / (2.0 * r ** 2)) * (s / r ** 2)
            u[k] += dy * g
            v[k] += -dx * g
    return VelocityField(spec, u, v)


def make_random_eddies(spec, n_eddies, seed, **scales):
    """Random drifting-eddy field; see sample_eddies for the scale knobs."""
    return eddy_field(spec, sample_eddies(spec, n_eddies, seed, **scales))


def eddy_vorticity_extremum(radius, strength):
    """Analytic curl of a single Gaussian vortex at its center, 1/h."""
    return -2.0 * strength / radius ** 2


def vorticity(field):
    """Vertical component of the curl by centered differences, 1/h.

    Exact for fields linear in x and y away from the periodic seam.
    """
    spec = field.spec
    inv2h = 1.0 / (2.0 * spec.h)
    dvdx = (np.roll(field.v, -1, axis=2) - np.roll(field.v, 1, axis=2)) * inv2h
    dudy = (np.roll(field.u, -1, axis=1) - np.roll(field.u, 1, axis=1)) * inv2h
    return VorticityField(spec, dvdx - dudy)


def divergence(field):
    """Centered-difference divergence in 1/h, for diagnostics and tests."""
    spec = field.spec
    inv2h = 1.0 / (2.0 * spec.h)
    dudx = (np.roll(field.u, -1, axis=2) - np.roll(field.u, 1, axis=2)) * inv2h
    dvdy = (np.roll(field.v, -1, axis=1) - np.roll(field.v, 1, axis=1)) * inv2h
    return dudx + dvdy


# ---------------------------------------------------------------------------
# binary and text formats

def _write_header(fh, magic, spec):
    fh.write(magic)
    fh.write(struct.pack("<IIII", _FORMAT_VERSION, spec.nx, spec.ny, spec.n_snapshots))
    fh.write(struct.pack("<dddd", spec.h, spec.delta, spec.x0, spec.y0))


def _read_header(fh, magic, path):
    head = fh.read(4)
    if head != magic:
        raise FormatError(f"{path}: bad magic {head!r}, expected {magic!r}")
    raw = fh.read(16 + 32)
    if len(raw) != 48:
        raise FormatError(f"{path}: truncated header")
    version, nx, ny, n_snap = struct.unpack("<IIII", raw[:16])
    if version != _FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    h, delta, x0, y0 = struct.unpack("<dddd", raw[16:])
    if n_snap < 2:
        raise FormatError(f"{path}: needs at least two snapshots, got {n_snap}")
    spec = GridSpec(nx=nx, ny=ny, h=h, delta=delta, k_steps=n_snap - 1, x0=x0, y0=y0)
    return spec


def _read_block(fh, count, path):
    raw = fh.read(count * 8)
    if len(raw) != count * 8:
        raise FormatError(f"{path}: truncated data block")
    return np.frombuffer(raw, dtype="<f8").astype(np.float64)


def write_field_drft(field, path):
    """Write a velocity field as a flat little-endian binary file."""
    with open(path, "wb") as fh:
        _write_header(fh, _DRFT_MAGIC, field.spec)
        fh.write(np.ascontiguousarray(field.u, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(field.v, dtype="<f8").tobytes())


def read_field_drft(path):
    with open(path, "rb") as fh:
        spec = _read_header(fh, _DRFT_MAGIC, path)
        count = spec.n_snapshots * spec.ny * spec.nx
        u = _read_block(fh, count, path).reshape(spec.n_snapshots, spec.ny, spec.nx)
        v = _read_block(fh, count, path).reshape(spec.n_snapshots, spec.ny, spec.nx)
    return VelocityField(spec, u, v)


def write_vorticity_csv(vort, path):
    """Vorticity snapshots as rows t,row,col,zeta (t in hours)."""
    spec = vort.spec
    with open(path, "w") as fh:
        fh.write("t,row,col,zeta\n")
        for k in range(spec.n_snapshots):
            t = k * spec.delta
            for i in range(spec.ny):
                row = vort.zeta[k, i]
                for j in range(spec.nx):
                    fh.write(f"{t:.6f},{i},{j},{row[j]:.17g}\n")
