"""Dataset generation, trajectory losses, and the optimization loop.

Reference trajectories come from the particle integrator; the model is fit
with a weighted sum of a mean squared separation term and a path-normalized
separation term (the skill score of Liu and Weisberg).  Optimization is
plain Adam over the named parameter arrays, deterministic for a fixed seed.
"""

import copy
import json
import os
from dataclasses import dataclass, field as dc_field

import numpy as np

from . import autodiff as ad
from . import driftnet as dn
from .errors import NumericalBlowupError, UndefinedIndexError
from .field import VelocityField, read_field_drft, write_field_drft
from .grid import wrap_delta_xy
from .lagrangian import Ensemble, advect_ensemble, read_ensemble_dtrj, write_ensemble_dtrj


@dataclass
class TrainConfig:
    alpha: float = 0.2
    beta: float = 0.8
    learning_rate: float = 5e-3
    epochs: int = 100
    batch_size: int = 32
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    temperature: float = 0.2

    def __post_init__(self):
        if self.alpha < 0.0 or self.beta < 0.0 or self.alpha + self.beta == 0.0:
            raise ValueError("loss weights must be nonnegative and not both zero")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be at least 1")
        if not (self.learning_rate > 0.0):
            raise ValueError("learning_rate must be positive")


@dataclass
class DriftDataset:
    """A velocity field with reference trajectories and split assignments.

    trajectories has shape (n, k_steps + 1, 2); row 0 of each trajectory is
    the seed.  splits maps "train" / "val" / "test" to index arrays.
    """

    field: VelocityField
    trajectories: np.ndarray
    splits: dict
    seed: int = 0

    def __post_init__(self):
        self.trajectories = np.asarray(self.trajectories, dtype=np.float64)
        spec = self.field.spec
        n = self.trajectories.shape[0]
        if self.trajectories.shape[1:] != (spec.k_steps + 1, 2):
            raise ValueError("trajectories must have shape (n, k_steps + 1, 2)")
        seen = np.concatenate([np.asarray(v, dtype=np.intp)
                               for v in self.splits.values()]) if self.splits else []
        if len(seen) and (np.min(seen) < 0 or np.max(seen) >= n):
            raise ValueError("split indices out of range")

    @property
    def n_traj(self):
        return self.trajectories.shape[0]

    def split(self, name):
        return self.trajectories[self.splits[name]]


def split_sizes(n):
    """80/10/10 by rounding; validation and test get a tenth each and the
    training split keeps the remainder."""
    n_test = int(round(0.1 * n))
    n_val = int(round(0.1 * n))
    n_train = n - n_val - n_test
    if n_train < 1:
        raise ValueError(f"dataset of {n} trajectories leaves no training split")
    return n_train, n_val, n_test


def generate_dataset(field, n_traj, seed, substeps=6, threads=None):
    """Seed trajectories uniformly over the domain and advect them with the
    reference integrator.  The same seed always produces the same dataset."""
    spec = field.spec
    rng = np.random.default_rng(seed)
    seeds = np.empty((n_traj, 2))
    seeds[:, 0] = spec.x0 + rng.uniform(0.0, spec.lx, size=n_traj)
    seeds[:, 1] = spec.y0 + rng.uniform(0.0, spec.ly, size=n_traj)
    ens = advect_ensemble(field, seeds, substeps=substeps, threads=threads)
    n_train, n_val, n_test = split_sizes(n_traj)
    idx = np.arange(n_traj)
    splits = {"train": idx[:n_train],
              "val": idx[n_train:n_train + n_val],
              "test": idx[n_train + n_val:]}
    return DriftDataset(field, ens.positions, splits, seed=seed)


def save_dataset(dataset, out_dir):
    os.makedirs(out_dir, exist_ok=True)
    write_field_drft(dataset.field, os.path.join(out_dir, "field.drft"))
    write_ensemble_dtrj(Ensemble(dataset.field.spec, dataset.trajectories),
                        os.path.join(out_dir, "trajectories.dtrj"))
    manifest = {"seed": dataset.seed,
                "n_traj": int(dataset.n_traj),
                "splits": {k: np.asarray(v).tolist()
                           for k, v in dataset.splits.items()}}
    with open(os.path.join(out_dir, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_dataset(in_dir):
    field = read_field_drft(os.path.join(in_dir, "field.drft"))
    ens = read_ensemble_dtrj(os.path.join(in_dir, "trajectories.dtrj"))
    with open(os.path.join(in_dir, "manifest.json")) as fh:
        manifest = json.load(fh)
    splits = {k: np.asarray(v, dtype=np.intp)
              for k, v in manifest["splits"].items()}
    return DriftDataset(field, ens.positions, splits, seed=manifest["seed"])


# ---------------------------------------------------------------------------
# losses
#
# ref and sim are position batches of shape (b, k + 1, 2) whose row 0 is the
# shared seed; separations are minimal-image.  Losses average over the k
# predicted steps only.

def _check_batches(ref, sim):
    ref = np.asarray(ref, dtype=np.float64)
    sim = np.asarray(sim, dtype=np.float64)
    if ref.shape != sim.shape or ref.ndim != 3 or ref.shape[-1] != 2:
        raise ValueError("ref and sim must share a (b, k + 1, 2) shape")
    return ref, sim


def _cumulative_lengths(ref, spec):
    """l_j = reference path length through step j, shape (b, k)."""
    steps = wrap_delta_xy(ref[:, 1:] - ref[:, :-1], spec)
    return np.cumsum(np.sqrt(steps[..., 0] ** 2 + steps[..., 1] ** 2), axis=1)


def loss_mse(ref, sim, spec):
    """Mean squared separation over all trajectories and predicted steps."""
    ref, sim = _check_batches(ref, sim)
    d = wrap_delta_xy(sim[:, 1:] - ref[:, 1:], spec)
    return float(np.mean(d[..., 0] ** 2 + d[..., 1] ** 2))


def loss_liu(ref, sim, spec):
    """Cumulative separation normalized by cumulative reference path length,
    averaged over the batch.  0 is a perfect simulation; a frozen simulation
    against a steadily moving reference scores 1."""
    ref, sim = _check_batches(ref, sim)
    d = wrap_delta_xy(sim[:, 1:] - ref[:, 1:], spec)
    sep = np.sqrt(d[..., 0] ** 2 + d[..., 1] ** 2)
    lsum = _cumulative_lengths(ref, spec).sum(axis=1)
    if np.any(lsum <= 0.0):
        raise UndefinedIndexError("reference trajectory never moves; "
                                  "path-normalized score is undefined")
    return float(np.mean(sep.sum(axis=1) / lsum))


def total_loss(ref, sim, spec, alpha=0.2, beta=0.8):
    return alpha * loss_mse(ref, sim, spec) + beta * loss_liu(ref, sim, spec)


def losses_on_tape(pos, ref, spec, alpha, beta):
    """Tape-side composite loss for predicted positions pos: Var (b, k, 2).

    ref is the full (b, k + 1, 2) reference array.  Returns the scalar Var
    plus float values of the two components for logging.
    """
    periods = np.array([spec.lx, spec.ly])
    d = ad.wrap_delta_op(pos, ref[:, 1:], periods)
    sq = ad.sum_op(ad.mul(d, d), axis=-1)          # (b, k)
    mse = ad.mean_op(sq)
    sep = ad.sqrt_safe(sq)
    lsum = _cumulative_lengths(ref, spec).sum(axis=1)
    if np.any(lsum <= 0.0):
        raise UndefinedIndexError("reference trajectory never moves; "
                                  "path-normalized score is undefined")
    per_traj = ad.mul(ad.sum_op(sep, axis=-1),
                      pos.tape.const(1.0 / lsum))
    liu = ad.mean_op(per_traj)
    loss = ad.add(ad.scale(mse, alpha), ad.scale(liu, beta))
    return loss, float(mse.value), float(liu.value)


# ---------------------------------------------------------------------------
# optimization

def _forward_batch(tape, params_vars, field_input, seeds, spec, norm_vmax,
                   temperature):
    b = seeds.shape[0]
    u5 = tape.const(np.broadcast_to(field_input[None], (b,) + field_input.shape))
    y0 = tape.const(dn.build_y0_batch(spec, seeds, norm_vmax)[..., None])
    return dn.forward_on_tape(tape, u5, y0, seeds, spec, params_vars,
                              temperature)


def predict_positions(params, field, seeds, batch_size=32):
    """Forward many seeds in chunks; returns (n, k_steps + 1, 2) with the
    seed in row 0.  Chunking keeps the per-tape activation footprint small
    and does not change the results."""
    spec = field.spec
    seeds = spec.wrap_position(np.asarray(seeds, dtype=np.float64).reshape(-1, 2))
    field_input = dn._field_input(field, params.norm_vmax)
    out = np.empty((seeds.shape[0], spec.k_steps + 1, 2))
    out[:, 0] = seeds
    for start in range(0, seeds.shape[0], batch_size):
        chunk = seeds[start:start + batch_size]
        tape = ad.Tape()
        pvars = dn.params_to_vars(tape, params)
        pos = _forward_batch(tape, pvars, field_input, chunk, spec,
                             params.norm_vmax, params.temperature)
        out[start:start + batch_size, 1:] = pos.value
    return out


def evaluate_split(params, dataset, split):
    """Forward the whole split and report loss components plus the mean
    final-step separation for the model and for a frozen-at-seed baseline."""
    spec = dataset.field.spec
    ref = dataset.split(split)
    if ref.shape[0] == 0:
        raise ValueError(f"split {split!r} is empty")
    sim = predict_positions(params, dataset.field, ref[:, 0])
    dlast = wrap_delta_xy(sim[:, -1] - ref[:, -1], spec)
    dpers = wrap_delta_xy(ref[:, 0] - ref[:, -1], spec)
    return {
        "mse": loss_mse(ref, sim, spec),
        "liu": loss_liu(ref, sim, spec),
        "final_sep": float(np.mean(np.hypot(dlast[..., 0], dlast[..., 1]))),
        "persistence_final_sep": float(np.mean(np.hypot(dpers[..., 0],
                                                        dpers[..., 1]))),
    }


def train(dataset, config):
    """Fit the model to the training split; returns (params, log).

    The returned parameters are the best seen on the validation split (on
    the training loss when the dataset has no validation trajectories).  The
    log holds one dict per epoch with train/val losses and the training-side
    loss components.
    """
    spec = dataset.field.spec
    train_ref = dataset.split("train")
    if train_ref.shape[0] == 0:
        raise ValueError("training split is empty")
    has_val = "val" in dataset.splits and len(dataset.splits["val"]) > 0
    val_ref = dataset.split("val") if has_val else None

    norm_vmax = max(dataset.field.vmax, 1e-12)
    params = dn.init_params(config.seed, norm_vmax=norm_vmax,
                            temperature=config.temperature)
    field_input = dn._field_input(dataset.field, norm_vmax)

    m = {k: np.zeros_like(v) for k, v in params.weights.items()}
    v = {k: np.zeros_like(w) for k, w in params.weights.items()}
    t = 0
    best = copy.deepcopy(params.weights)
    best_loss = np.inf
    log = []

    n = train_ref.shape[0]
    for epoch in range(config.epochs):
        order = np.random.default_rng((config.seed, epoch)).permutation(n)
        ep_loss = ep_mse = ep_liu = 0.0
        for start in range(0, n, config.batch_size):
            batch = train_ref[order[start:start + config.batch_size]]
            tape = ad.Tape()
            pvars = dn.params_to_vars(tape, params, requires_grad=True)
            pos = _forward_batch(tape, pvars, field_input, batch[:, 0], spec,
                                 norm_vmax, config.temperature)
            loss, mse_val, liu_val = losses_on_tape(
                pos, batch, spec, config.alpha, config.beta)
            if not np.isfinite(loss.value):
                raise NumericalBlowupError(
                    f"non-finite loss at epoch {epoch + 1} "
                    f"batch {start // config.batch_size + 1}")
            grads = ad.backward(loss)
            t += 1
            bc1 = 1.0 - config.beta1 ** t
            bc2 = 1.0 - config.beta2 ** t
            for name in params.weights:
                g = grads[pvars[name]]
                m[name] = config.beta1 * m[name] + (1.0 - config.beta1) * g
                v[name] = config.beta2 * v[name] + (1.0 - config.beta2) * g * g
                params.weights[name] = params.weights[name] - (
                    config.learning_rate * (m[name] / bc1)
                    / (np.sqrt(v[name] / bc2) + config.epsilon))
            w = batch.shape[0] / n
            ep_loss += w * float(loss.value)
            ep_mse += w * mse_val
            ep_liu += w * liu_val

        if has_val:
            stats = evaluate_split(params, dataset, "val")
            val_loss = config.alpha * stats["mse"] + config.beta * stats["liu"]
        else:
            val_loss = ep_loss
        if val_loss < best_loss:
            best_loss = val_loss
            best = copy.deepcopy(params.weights)
        log.append({"epoch": epoch + 1, "train_loss": ep_loss,
                    "val_loss": val_loss, "mse": ep_mse, "liu": ep_liu})

    params.weights = best
    return params, log


def write_training_log(log, path):
    with open(path, "w") as fh:
        fh.write("epoch,train_loss,val_loss,mse,liu\n")
        for row in log:
            fh.write("%d,%.17g,%.17g,%.17g,%.17g\n"
                     % (row["epoch"], row["train_loss"], row["val_loss"],
                        row["mse"], row["liu"]))


def read_training_log(path):
    rows = []
    with open(path) as fh:
        header = fh.readline().strip()
        if header != "epoch,train_loss,val_loss,mse,liu":
            raise ValueError(f"unexpected training log header: {header!r}")
        for line in fh:
            e, tl, vl, ms, li = line.strip().split(",")
            rows.append({"epoch": int(e), "train_loss": float(tl),
                         "val_loss": float(vl), "mse": float(ms),
                         "liu": float(li)})
    return rows
