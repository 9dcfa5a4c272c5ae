"""Velocity-anomaly retrieval from a target trajectory.

Fixed-step gradient descent on a correction field du added to the base
velocities, with the trajectory mismatch differentiated either through the
frozen trained model or through a differentiable twin of the density
propagator.  The twin rebuilds the donor-cell update with the same
expression order as the reference implementation, so its forward values
match propagate_density bit for bit at equal substep counts.
"""

import os
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import driftnet as dn
from . import svgplot
from .errors import NumericalBlowupError
from .field import VelocityField, vorticity, write_field_drft
from .fokkerplanck import init_density
from .grid import GridSpec
from .lagrangian import Ensemble, write_trajectories_csv


@dataclass
class AnomalyField:
    """Additive velocity correction, shaped like the field it corrects."""

    spec: GridSpec
    du: np.ndarray
    dv: np.ndarray

    def __post_init__(self):
        want = (self.spec.n_snapshots, self.spec.ny, self.spec.nx)
        self.du = np.ascontiguousarray(self.du, dtype=np.float64)
        self.dv = np.ascontiguousarray(self.dv, dtype=np.float64)
        if self.du.shape != want or self.dv.shape != want:
            raise ValueError(f"anomaly arrays must have shape {want}")

    @classmethod
    def zeros(cls, spec):
        shape = (spec.n_snapshots, spec.ny, spec.nx)
        return cls(spec, np.zeros(shape), np.zeros(shape))

    def as_field(self):
        return VelocityField(self.spec, self.du, self.dv)

    def corrected(self, field):
        return VelocityField(self.spec, field.u + self.du, field.v + self.dv)


@dataclass
class InversionConfig:
    n_steps: int = 200
    step_size: float = 5e-2
    l2_weight: float = 0.0
    time_constant: bool = False
    oracle_substeps: int = None
    sigma0: float = None

    def __post_init__(self):
        if self.n_steps < 1:
            raise ValueError("n_steps must be at least 1")
        if not (self.step_size > 0.0):
            raise ValueError("step_size must be positive")
        if self.l2_weight < 0.0:
            raise ValueError("l2_weight must be nonnegative")


@dataclass
class InversionResult:
    anomaly: AnomalyField
    loss: np.ndarray
    warnings: list


def _mismatch_loss(pos, target_pos, spec, du_leaf, l2_weight):
    """Mean squared wrapped separation plus the optional l2 penalty.

    pos : Var (..., k, 2) predicted steps 1..k; target_pos (k, 2).
    """
    periods = np.array([spec.lx, spec.ly])
    d = ad.wrap_delta_op(pos, target_pos.reshape(pos.value.shape), periods)
    loss = ad.mean_op(ad.sum_op(ad.mul(d, d), axis=-1))
    if l2_weight > 0.0:
        loss = ad.add(loss, ad.scale(ad.sum_op(ad.mul(du_leaf, du_leaf)),
                                     l2_weight))
    return loss


def _descend(build_loss, du0, config):
    """Fixed-step descent on the anomaly array; returns the trace."""
    du_val = du0.copy()
    history = np.empty(config.n_steps)
    warnings = []
    over = 0
    initial = None
    for step in range(config.n_steps):
        tape = ad.Tape()
        du_leaf = tape.leaf(du_val, requires_grad=True)
        loss = build_loss(tape, du_leaf)
        lv = float(loss.value)
        if not np.isfinite(lv):
            raise NumericalBlowupError(f"non-finite inversion loss at step {step + 1}")
        history[step] = lv
        if initial is None:
            initial = lv
        if lv > 10.0 * initial and initial > 0.0:
            over += 1
            if over == 20:
                warnings.append(f"loss exceeded 10x its initial value for 20 "
                                f"consecutive steps at step {step + 1}")
        else:
            over = 0
        grads = ad.backward(loss)
        du_val = du_val - config.step_size * grads[du_leaf]
    return du_val, history, warnings


def _materialize(du_val, spec, k_used, time_constant):
    """Expand the descent variable into full (K+1, ny, nx) components.

    du_val is (ny, nx, 2) in time-constant mode, else (k_used, ny, nx, 2);
    snapshots the forward never touches keep a zero anomaly.
    """
    shape = (spec.n_snapshots, spec.ny, spec.nx)
    du = np.zeros(shape)
    dv = np.zeros(shape)
    if time_constant:
        du[:] = du_val[..., 0]
        dv[:] = du_val[..., 1]
    else:
        du[:k_used] = du_val[..., 0]
        dv[:k_used] = du_val[..., 1]
    return AnomalyField(spec, du, dv)


def _network_loss_builder(params, field, target, config):
    """Closure computing the descent objective through the frozen model.

    Returns (build_loss, du0) where du0 is the zero starting anomaly, shaped
    (k, ny, nx, 2) or (ny, nx, 2) in time-constant mode.
    """
    spec = field.spec
    r0 = target.positions[0]
    base = dn._field_input(field, params.norm_vmax)   # (k, ny, nx, 2)
    y0 = dn.build_y0_batch(spec, r0, params.norm_vmax)[..., None]
    target_pos = target.positions[1:]
    inv_norm = 1.0 / params.norm_vmax

    if config.time_constant:
        du0 = np.zeros((spec.ny, spec.nx, 2))
    else:
        du0 = np.zeros((spec.k_steps, spec.ny, spec.nx, 2))

    def build_loss(tape, du_leaf):
        pvars = dn.params_to_vars(tape, params)
        # normalized base plus normalized anomaly, so a zero anomaly feeds
        # the model bitwise the same input as the plain forward pass
        u5 = ad.add(tape.const(base[None]), ad.scale(du_leaf, inv_norm))
        pos = dn.forward_on_tape(tape, u5, tape.const(y0), r0[None], spec,
                                 pvars, params.temperature)
        return _mismatch_loss(pos, target_pos, spec, du_leaf, config.l2_weight)

    return build_loss, du0


def invert(params, field, target, config=None):
    """Recover an anomaly by descending through the frozen trained model.

    Model parameters are constants on every tape; only the anomaly moves.
    """
    config = config or InversionConfig()
    spec = field.spec
    if target.spec != spec:
        raise ValueError("target and field grids differ")
    build_loss, du0 = _network_loss_builder(params, field, target, config)
    du_val, history, warns = _descend(build_loss, du0, config)
    anomaly = _materialize(du_val, spec, spec.k_steps, config.time_constant)
    return InversionResult(anomaly, history, warns)


# ---------------------------------------------------------------------------
# differentiable twin of the density propagator

def _density_positions(tape, spec, u_snaps, v_snaps, p0, n_sub):
    """March a density on the tape and read out its center each interval.

    u_snaps, v_snaps are per-snapshot Vars (ny, nx).  The arithmetic mirrors
    upwind_substep and propagate_density expression by expression, so with
    equal inputs and substeps the forward values agree bitwise.
    """
    dt = spec.delta / n_sub
    dt_h = dt / spec.h
    p = tape.const(p0)
    tmax = spec.duration
    positions = []
    for k in range(spec.k_steps):
        for s in range(n_sub):
            t = min(spec.delta * (k * n_sub + s) / n_sub, tmax)
            j = min(int(np.floor(t / spec.delta)), spec.k_steps - 1)
            w = t / spec.delta - j
            if w == 0.0:
                u2, v2 = u_snaps[j], v_snaps[j]
            else:
                u2 = ad.add(ad.scale(u_snaps[j], 1.0 - w),
                            ad.scale(u_snaps[j + 1], w))
                v2 = ad.add(ad.scale(v_snaps[j], 1.0 - w),
                            ad.scale(v_snaps[j + 1], w))
            ue = ad.scale(ad.add(u2, ad.roll(u2, -1, 1)), 0.5)
            vn = ad.scale(ad.add(v2, ad.roll(v2, -1, 0)), 0.5)
            up = ad.relu(ue)
            um = ad.sub(ue, up)
            vp = ad.relu(vn)
            vm = ad.sub(vn, vp)
            fe = ad.scale(ad.add(ad.mul(up, p), ad.mul(um, ad.roll(p, -1, 1))),
                          dt_h)
            fn = ad.scale(ad.add(ad.mul(vp, p), ad.mul(vm, ad.roll(p, -1, 0))),
                          dt_h)
            p = ad.sub(ad.sub(p, ad.sub(fe, ad.roll(fe, 1, 1))),
                       ad.sub(fn, ad.roll(fn, 1, 0)))
        positions.append(ad.soft_argmax(p, spec))
    return ad.stack(positions, axis=0)


def oracle_substep_count(field):
    """Courant-limited substeps with headroom for the anomaly the descent
    will add on top of the base field."""
    spec = field.spec
    vmax = 1.5 * field.vmax + 0.5
    return max(1, int(np.ceil(2.0 * spec.delta * vmax / spec.h)))


def _oracle_loss_builder(field, target, config):
    """Closure computing the descent objective through the density twin."""
    spec = field.spec
    r0 = target.positions[0]
    sigma0 = spec.h if config.sigma0 is None else config.sigma0
    p0 = init_density(spec, r0, sigma0)
    n_sub = (oracle_substep_count(field) if config.oracle_substeps is None
             else int(config.oracle_substeps))
    target_pos = target.positions[1:]
    n_snap = spec.n_snapshots

    if config.time_constant:
        du0 = np.zeros((spec.ny, spec.nx, 2))
    else:
        du0 = np.zeros((n_snap, spec.ny, spec.nx, 2))

    def build_loss(tape, du_leaf):
        u_snaps, v_snaps = [], []
        for j in range(n_snap):
            if config.time_constant:
                du_j = ad.take_index(du_leaf, 0, -1)
                dv_j = ad.take_index(du_leaf, 1, -1)
            else:
                slab = ad.take_index(du_leaf, j, 0)
                du_j = ad.take_index(slab, 0, -1)
                dv_j = ad.take_index(slab, 1, -1)
            u_snaps.append(ad.add(tape.const(field.u[j]), du_j))
            v_snaps.append(ad.add(tape.const(field.v[j]), dv_j))
        pos = _density_positions(tape, spec, u_snaps, v_snaps, p0, n_sub)
        return _mismatch_loss(pos, target_pos, spec, du_leaf, config.l2_weight)

    return build_loss, du0


def invert_through_oracle(field, target, config=None):
    """Same contract as invert, with the density propagator as the forward.

    Validates the descent machinery without a trained model: the seed
    becomes a density blob, the blob rides u + du, and the mismatch between
    its center track and the target is differentiated back to du.  The
    substep count is frozen up front so the objective stays smooth while
    the anomaly changes.
    """
    config = config or InversionConfig()
    spec = field.spec
    if target.spec != spec:
        raise ValueError("target and field grids differ")
    build_loss, du0 = _oracle_loss_builder(field, target, config)
    du_val, history, warns = _descend(build_loss, du0, config)
    anomaly = _materialize(du_val, spec, spec.n_snapshots,
                           config.time_constant)
    return InversionResult(anomaly, history, warns)


# ---------------------------------------------------------------------------
# report

def anomaly_report(out_dir, anomaly, base_field, target=None, corrected=None,
                   loss=None):
    """Report bundle: anomaly field, vorticity panels, loss trace, tracks.

    target and corrected are optional matched trajectories; loss is the
    descent trace.  Returns the list of files written.
    """
    os.makedirs(out_dir, exist_ok=True)
    spec = anomaly.spec
    written = []

    path = os.path.join(out_dir, "anomaly.drft")
    write_field_drft(anomaly.as_field(), path)
    written.append(path)

    zeta_anom = vorticity(anomaly.as_field()).zeta[0]
    zeta_corr = vorticity(anomaly.corrected(base_field)).zeta[0]
    for name, zeta, title in (("vorticity_anomaly.svg", zeta_anom,
                               "Anomaly vorticity at t0"),
                              ("vorticity_corrected.svg", zeta_corr,
                               "Corrected-field vorticity at t0")):
        path = os.path.join(out_dir, name)
        with open(path, "w") as fh:
            fh.write(svgplot.render_heatmap(zeta, title=title) + "\n")
        written.append(path)

    if loss is not None:
        path = os.path.join(out_dir, "loss.csv")
        with open(path, "w") as fh:
            fh.write("step,loss\n")
            for i, value in enumerate(np.asarray(loss, dtype=np.float64)):
                fh.write("%d,%.17g\n" % (i, value))
        written.append(path)

    if target is not None and corrected is not None:
        pair = Ensemble(spec, np.stack([target.positions,
                                        corrected.positions]))
        path = os.path.join(out_dir, "trajectories.csv")
        write_trajectories_csv(pair, path)
        written.append(path)
    return written
