"""Trajectory prediction network over velocity snapshot sequences.

The model consumes K snapshots of (u, v), normalized by a stored reference
speed, together with a widening seed cone that marks where the particle
started and how far it could plausibly have traveled.  A small conv stack
lifts each snapshot, a convolutional LSTM carries state across time, a
second conv maps the hidden state to an 8-channel latent, and a spatial
softmax readout turns each latent channel into a wrap-aware coordinate pair.
A width-3 temporal conv head maps those 16 features per step to a position
offset from the seed.

All learnable arrays live in a name-keyed dict so the optimizer and the
parameter store can stay generic.
"""

import json
from dataclasses import dataclass, field as dc_field

import numpy as np

from . import autodiff as ad
from .grid import GridSpec, wrap_delta
from .lagrangian import Trajectory

C_IN = 3          # u, v, seed cone
C_A1 = 11
C_HID = 16        # stack A output and LSTM hidden width
C_LAT = 8         # latent channels entering the readout
N_FEAT = 2 * C_LAT

_SHAPES = {
    "a0.w": (C_A1, C_IN, 3, 3),
    "a0.b": (C_A1,),
    "a1.w": (C_HID, C_A1, 3, 3),
    "a1.b": (C_HID,),
    "lstm.w": (4 * C_HID, 2 * C_HID, 3, 3),
    "lstm.b": (4 * C_HID,),
    "bconv.w": (C_LAT, C_HID, 3, 3),
    "bconv.b": (C_LAT,),
    "head.w": (2, N_FEAT, 3),
    "head.b": (2,),
}


@dataclass
class DriftNetParams:
    """Named parameter arrays plus the two scalars the model needs at
    inference time: the velocity normalization and the softmax temperature."""

    weights: dict
    norm_vmax: float = 1.0
    temperature: float = 1.0
    n_params: int = dc_field(init=False)

    def __post_init__(self):
        for name, shape in _SHAPES.items():
            if name not in self.weights:
                raise ValueError(f"missing parameter {name}")
            if self.weights[name].shape != shape:
                raise ValueError(f"parameter {name} must have shape {shape}, "
                                 f"got {self.weights[name].shape}")
        if not (self.norm_vmax > 0.0):
            raise ValueError("norm_vmax must be positive")
        self.n_params = sum(int(np.prod(s)) for s in _SHAPES.values())


@dataclass
class LatentGrid:
    """Per-step latent maps, shape (k_steps, 8, ny, nx)."""

    spec: GridSpec
    y: np.ndarray

    def __post_init__(self):
        self.y = np.ascontiguousarray(self.y, dtype=np.float64)
        want = (self.spec.k_steps, C_LAT, self.spec.ny, self.spec.nx)
        if self.y.shape != want:
            raise ValueError(f"latent must have shape {want}")


def init_params(seed, norm_vmax=1.0, temperature=1.0):
    """Uniform +-1/sqrt(fan_in) weights and biases from a fixed seed; the
    forget-gate bias block is then set to one so early training keeps its
    cell state."""
    rng = np.random.default_rng(seed)
    weights = {}
    for name, shape in _SHAPES.items():
        if name.endswith(".w"):
            fan_in = int(np.prod(shape[1:]))
        else:
            wshape = _SHAPES[name[:-2] + ".w"]
            fan_in = int(np.prod(wshape[1:]))
        bound = 1.0 / np.sqrt(fan_in)
        weights[name] = rng.uniform(-bound, bound, size=shape)
    weights["lstm.b"][C_HID:2 * C_HID] = 1.0
    return DriftNetParams(weights, norm_vmax=norm_vmax, temperature=temperature)


def params_to_vars(tape, params, requires_grad=False):
    return {name: tape.leaf(arr, requires_grad=requires_grad)
            for name, arr in params.weights.items()}


def build_y0_batch(spec, seeds, vmax, l0=None):
    """Seed cones for a batch: (b, k_steps, ny, nx).

    Cone t is 1 at the seed and decays linearly to 0 at radius
    l0 + vmax * t * delta (km), the reach of a particle moving at the
    normalization speed.  Distances are computed in cell units first so the
    cone commutes exactly with integer-cell shifts of the seed.
    """
    if l0 is None:
        l0 = 2.0 * spec.h
    seeds = np.asarray(seeds, dtype=np.float64).reshape(-1, 2)
    gx = (seeds[:, 0] - spec.x0) / spec.h   # fractional cell coords
    gy = (seeds[:, 1] - spec.y0) / spec.h
    cols = np.arange(spec.nx) + 0.5
    rows = np.arange(spec.ny) + 0.5
    dx = wrap_delta(cols[None, :] - gx[:, None], spec.nx) * spec.h   # (b, nx)
    dy = wrap_delta(rows[None, :] - gy[:, None], spec.ny) * spec.h   # (b, ny)
    d = np.sqrt(dx[:, None, None, :] ** 2 + dy[:, None, :, None] ** 2)  # (b,1,ny,nx)
    t = np.arange(spec.k_steps, dtype=np.float64)
    radius = l0 + vmax * t * spec.delta
    return np.maximum(0.0, 1.0 - d / radius[None, :, None, None])


def build_y0(spec, r0, vmax, l0=None):
    """Seed cone stack for one trajectory, shape (k_steps, 1, ny, nx)."""
    return build_y0_batch(spec, r0, vmax, l0=l0)[0][:, None, :, :]


def encode_on_tape(tape, x5, pvars):
    """Conv stacks and recurrence: (b, k, ny, nx, 3) -> (b, k, ny, nx, 8)."""
    b, k, ny, nx, _ = x5.value.shape
    flat = ad.reshape(x5, (b * k, ny, nx, C_IN))
    a = ad.leaky_relu(ad.conv2d(flat, pvars["a0.w"], pvars["a0.b"]), 0.1)
    a = ad.leaky_relu(ad.conv2d(a, pvars["a1.w"], pvars["a1.b"]), 0.1)
    a5 = ad.reshape(a, (b, k, ny, nx, C_HID))
    h = tape.const(np.zeros((b, ny, nx, C_HID)))
    c = tape.const(np.zeros((b, ny, nx, C_HID)))
    hs = []
    for s in range(k):
        xs = ad.take_index(a5, s, 1)
        h, c = ad.conv_lstm_cell(xs, h, c, pvars["lstm.w"], pvars["lstm.b"])
        hs.append(h)
    hseq = ad.stack(hs, axis=1)
    lat = ad.conv2d(ad.reshape(hseq, (b * k, ny, nx, C_HID)),
                    pvars["bconv.w"], pvars["bconv.b"])
    return ad.reshape(lat, (b, k, ny, nx, C_LAT))


def readout_on_tape(lat5, seeds, spec, pvars, temperature):
    """Latent maps to positions: (b, k, ny, nx, 8) -> (b, k, 2).

    Each channel's softmax map is reduced to a wrap-aware coordinate pair;
    features enter the temporal head as minimal-image offsets from the seed,
    so a zero-weight head predicts persistence at the seed.
    """
    maps = ad.moveaxis(lat5, -1, 2)                      # (b, k, 8, ny, nx)
    p = ad.spatial_softmax(maps, temperature)
    coords = ad.soft_argmax(p, spec)                     # (b, k, 8, 2)
    periods = np.array([spec.lx, spec.ly])
    rel = ad.wrap_delta_op(coords, seeds[:, None, None, :], periods)
    b, k = rel.value.shape[:2]
    feats = ad.reshape(rel, (b, k, N_FEAT))
    disp = ad.conv1d_time(feats, pvars["head.w"], pvars["head.b"])
    return ad.wrap_domain_op(ad.add(disp, seeds[:, None, :]),
                             np.array([spec.x0, spec.y0]), periods)


def forward_on_tape(tape, u5, y0, seeds, spec, pvars, temperature):
    """Differentiable forward pass for a batch sharing one grid.

    u5 : Var (b, k, ny, nx, 2), velocities already divided by norm_vmax
    y0 : Var (b, k, ny, nx, 1), seed cones
    seeds : ndarray (b, 2)
    Returns positions Var (b, k, 2) for steps 1..k.
    """
    x5 = ad.concat([u5, y0], axis=-1)
    lat5 = encode_on_tape(tape, x5, pvars)
    return readout_on_tape(lat5, seeds, spec, pvars, temperature)


def _field_input(field, norm_vmax):
    """Stacked normalized snapshots 0..k-1, shape (k, ny, nx, 2)."""
    u = np.stack([field.u[:-1], field.v[:-1]], axis=-1)
    return u / norm_vmax


def encode(params, field, r0):
    """Run the conv/recurrent front end; returns the per-step latent maps."""
    spec = field.spec
    r0 = spec.wrap_position(np.asarray(r0, dtype=np.float64))
    tape = ad.Tape()
    u5 = tape.const(_field_input(field, params.norm_vmax)[None])
    y0 = tape.const(build_y0_batch(spec, r0, params.norm_vmax)[:, :, :, :, None])
    pvars = params_to_vars(tape, params)
    lat5 = encode_on_tape(tape, ad.concat([u5, y0], axis=-1), pvars)
    return LatentGrid(spec, np.ascontiguousarray(
        np.moveaxis(lat5.value[0], -1, 1)))


def decode(params, latent, r0, temperature=None):
    """Readout only: latent maps plus a seed give a trajectory.

    temperature overrides the stored softmax temperature when given."""
    if temperature is None:
        temperature = params.temperature
    spec = latent.spec
    r0 = spec.wrap_position(np.asarray(r0, dtype=np.float64))
    tape = ad.Tape()
    lat5 = tape.const(np.moveaxis(latent.y, 1, -1)[None])
    pvars = params_to_vars(tape, params)
    pos = readout_on_tape(lat5, r0[None], spec, pvars, temperature)
    return Trajectory(spec, np.vstack([r0[None], pos.value[0]]))


def forward(params, field, r0):
    """Predicted trajectory from the seed; position 0 is the seed itself."""
    spec = field.spec
    r0 = spec.wrap_position(np.asarray(r0, dtype=np.float64))
    tape = ad.Tape()
    u5 = tape.const(_field_input(field, params.norm_vmax)[None])
    y0 = tape.const(build_y0_batch(spec, r0, params.norm_vmax)[:, :, :, :, None])
    pvars = params_to_vars(tape, params)
    pos = forward_on_tape(tape, u5, y0, r0[None], spec, pvars, params.temperature)
    return Trajectory(spec, np.vstack([r0[None], pos.value[0]]))


# ---------------------------------------------------------------------------
# checkpoints

def save_checkpoint(params, spec, path):
    """Parameter store plus a JSON sidecar with the grid and model scalars."""
    path = str(path)
    ad.write_params(params.weights, path)
    meta = {
        "grid": {"nx": spec.nx, "ny": spec.ny, "h": spec.h, "delta": spec.delta,
                 "k_steps": spec.k_steps, "x0": spec.x0, "y0": spec.y0},
        "norm_vmax": params.norm_vmax,
        "temperature": params.temperature,
    }
    with open(path + ".json", "w") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_checkpoint(path):
    path = str(path)
    weights = ad.read_params(path)
    with open(path + ".json") as fh:
        meta = json.load(fh)
    g = meta["grid"]
    spec = GridSpec(nx=g["nx"], ny=g["ny"], h=g["h"], delta=g["delta"],
                    k_steps=g["k_steps"], x0=g["x0"], y0=g["y0"])
    params = DriftNetParams(weights, norm_vmax=meta["norm_vmax"],
                            temperature=meta["temperature"])
    return params, spec
