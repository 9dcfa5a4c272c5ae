"""Batch command-line front end for the drift pipeline.

One JSON config drives every subcommand; `--seed`, `--threads`, and `--out`
override the matching config fields.  Each run writes the fully resolved
config next to its outputs, so any result can be reproduced bit for bit by
pointing the same command at the snapshot.  Commands never write timestamps
or machine identifiers.

Exit codes: 0 success, 1 selftest failure, 2 missing file, 3 malformed
config, 4 numerical abort.
"""

import argparse
import json
import os
import sys

import numpy as np

from . import __version__
from . import driftnet as dn
from . import training as tr
from .errors import DriftlabError, FormatError, NumericalBlowupError
from .field import (make_double_gyre, make_random_eddies, make_solid_rotation,
                    make_uniform, read_field_drft, write_field_drft)
from .fokkerplanck import (expected_position, init_density, propagate_density)
from .grid import GridSpec
from .inversion import (InversionConfig, anomaly_report, invert,
                        invert_through_oracle, oracle_substep_count)
from .lagrangian import (Ensemble, Trajectory, advect_ensemble, perturb_seeds,
                         read_ensemble_dtrj, write_ensemble_dtrj,
                         write_trajectories_csv)
from .metrics import write_metrics_report


class CliError(Exception):
    def __init__(self, code, category, message):
        super().__init__(message)
        self.code = code
        self.category = category


def _missing(path):
    return CliError(2, "missing-file", f"no such file: {path}")


def _bad_config(message):
    return CliError(3, "config", message)


# ---------------------------------------------------------------------------
# config plumbing

GRID_DEFAULTS = {"x0": 0.0, "y0": 0.0}

FLOW_DEFAULTS = {
    "uniform": {"u0": 0.5, "v0": 0.0},
    "double_gyre": {"amplitude": 0.25, "eps": 0.0, "omega": 0.0},
    "solid_rotation": {"omega": 0.01, "center": None},
    "random_eddies": {"n_eddies": 8, "seed": None, "amplitude": 1.0,
                      "drift_speed": 0.2},
}

SECTION_DEFAULTS = {
    "dataset": {"n_trajectories": 200, "substeps": 6},
    "simulate": {"seeds": None, "n_seeds": 8, "radius": 0.0,
                 "integrator": "rk4", "substeps": 6},
    "train": {"alpha": 0.2, "beta": 0.8, "learning_rate": 5e-3, "epochs": 100,
              "batch_size": 32, "temperature": 0.2},
    "evaluate": {"split": "test", "max_lag": None},
    "inversion": {"n_steps": 200, "step_size": 5e-2, "l2_weight": 0.0,
                  "time_constant": False, "oracle_substeps": None,
                  "sigma0": None, "target_index": 0},
}


def load_config(path):
    if path is None:
        return {}
    if not os.path.exists(path):
        raise _missing(path)
    try:
        with open(path) as fh:
            config = json.load(fh)
    except json.JSONDecodeError as err:
        raise _bad_config(f"cannot parse {path}: {err}")
    if not isinstance(config, dict):
        raise _bad_config(f"{path}: top level must be a JSON object")
    return config


def resolve_config(args):
    """Merge file, per-section defaults, and flag overrides."""
    config = load_config(args.config)
    config.pop("version", None)
    config.pop("command", None)
    for section, defaults in SECTION_DEFAULTS.items():
        merged = dict(defaults)
        extra = config.get(section, {})
        if not isinstance(extra, dict):
            raise _bad_config(f"section '{section}' must be an object")
        merged.update(extra)
        config[section] = merged
    config.setdefault("seed", 0)
    config.setdefault("threads", None)
    config.setdefault("out", "run")
    if args.seed is not None:
        config["seed"] = args.seed
    if args.threads is not None:
        config["threads"] = args.threads
    if args.out is not None:
        config["out"] = args.out
    return config


def resolve_grid(config):
    grid = config.get("grid")
    if not isinstance(grid, dict):
        raise _bad_config("config needs a 'grid' object "
                          "(nx, ny, h, delta, k_steps)")
    merged = dict(GRID_DEFAULTS)
    merged.update(grid)
    config["grid"] = merged
    try:
        return GridSpec(nx=int(merged["nx"]), ny=int(merged["ny"]),
                        h=float(merged["h"]), delta=float(merged["delta"]),
                        k_steps=int(merged["k_steps"]),
                        x0=float(merged["x0"]), y0=float(merged["y0"]))
    except (KeyError, TypeError, ValueError) as err:
        raise _bad_config(f"bad grid: {err}")


def resolve_flow(config, spec):
    flow = config.get("flow")
    if not isinstance(flow, dict) or "family" not in flow:
        raise _bad_config("config needs a 'flow' object with a 'family'")
    family = flow["family"]
    if family not in FLOW_DEFAULTS:
        known = ", ".join(sorted(FLOW_DEFAULTS))
        raise _bad_config(f"unknown flow family '{family}' (one of {known})")
    merged = dict(FLOW_DEFAULTS[family])
    merged.update({k: v for k, v in flow.items() if k != "family"})
    merged["family"] = family
    config["flow"] = merged
    try:
        if family == "uniform":
            return make_uniform(spec, merged["u0"], merged["v0"])
        if family == "double_gyre":
            return make_double_gyre(spec, merged["amplitude"],
                                    eps=merged["eps"], omega=merged["omega"])
        if family == "solid_rotation":
            center = merged["center"]
            return make_solid_rotation(spec, merged["omega"],
                                       center=None if center is None
                                       else tuple(center))
        eddy_seed = merged["seed"]
        if eddy_seed is None:
            eddy_seed = config["seed"]
            merged["seed"] = eddy_seed
        return make_random_eddies(spec, int(merged["n_eddies"]),
                                  int(eddy_seed),
                                  amplitude=merged["amplitude"],
                                  drift_speed=merged["drift_speed"])
    except (TypeError, ValueError) as err:
        raise _bad_config(f"bad flow parameters: {err}")


def input_path(args, config, name, required=False):
    """Input file for a flag, remembered in the snapshot for replay.

    The flag wins; otherwise the path recorded by a previous run is reused,
    so a command can be rerun from its config snapshot alone.
    """
    inputs = config.setdefault("inputs", {})
    path = getattr(args, name.replace("-", "_"), None) or inputs.get(name)
    if path is None:
        if required:
            raise _bad_config(f"missing --{name} (not in config either)")
        return None
    path = os.path.abspath(path)
    inputs[name] = path
    return path


def load_field(args, config):
    """Field from --field when given, else built from the config."""
    path = input_path(args, config, "field")
    if path:
        if not os.path.exists(path):
            raise _missing(path)
        field = read_field_drft(path)
        config["grid"] = {"nx": field.spec.nx, "ny": field.spec.ny,
                          "h": field.spec.h, "delta": field.spec.delta,
                          "k_steps": field.spec.k_steps,
                          "x0": field.spec.x0, "y0": field.spec.y0}
        return field
    spec = resolve_grid(config)
    return resolve_flow(config, spec)


def write_snapshot(out_dir, config, command):
    os.makedirs(out_dir, exist_ok=True)
    snap = dict(config)
    snap["version"] = __version__
    snap["command"] = command
    path = os.path.join(out_dir, "config.json")
    with open(path, "w") as fh:
        json.dump(snap, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path


# ---------------------------------------------------------------------------
# commands

def cmd_gen_field(args):
    config = resolve_config(args)
    field = load_field(args, config)
    out = config["out"]
    write_snapshot(out, config, "gen-field")
    path = os.path.join(out, "field.drft")
    write_field_drft(field, path)
    print(f"wrote {path} (vmax {field.vmax:.6g} km/h)")
    return 0


def _simulation_seeds(config, spec):
    sim = config["simulate"]
    if sim["seeds"] is not None:
        seeds = np.asarray(sim["seeds"], dtype=np.float64)
        if seeds.ndim != 2 or seeds.shape[1] != 2:
            raise _bad_config("simulate.seeds must be a list of [x, y] pairs")
        return seeds
    center = np.array([spec.x0 + 0.5 * spec.lx, spec.y0 + 0.5 * spec.ly])
    radius = float(sim["radius"])
    n = int(sim["n_seeds"])
    if radius > 0.0:
        return perturb_seeds(center, radius, n, config["seed"])
    rng = np.random.default_rng(config["seed"])
    return np.stack([
        spec.x0 + rng.uniform(0.0, spec.lx, n),
        spec.y0 + rng.uniform(0.0, spec.ly, n)], axis=-1)


def cmd_simulate(args):
    config = resolve_config(args)
    field = load_field(args, config)
    spec = field.spec
    seeds = _simulation_seeds(config, spec)
    sim = config["simulate"]
    ens = advect_ensemble(field, seeds, integrator=sim["integrator"],
                          substeps=int(sim["substeps"]),
                          threads=config["threads"])
    out = config["out"]
    write_snapshot(out, config, "simulate")
    write_ensemble_dtrj(ens, os.path.join(out, "trajectories.dtrj"))
    write_trajectories_csv(ens, os.path.join(out, "trajectories.csv"))
    print(f"wrote {out}/trajectories.dtrj ({ens.positions.shape[0]} "
          f"trajectories, {spec.k_steps} steps)")
    return 0


def cmd_gen_dataset(args):
    config = resolve_config(args)
    field = load_field(args, config)
    ds_cfg = config["dataset"]
    dataset = tr.generate_dataset(field, int(ds_cfg["n_trajectories"]),
                                  seed=config["seed"],
                                  substeps=int(ds_cfg["substeps"]),
                                  threads=config["threads"])
    out = config["out"]
    write_snapshot(out, config, "gen-dataset")
    tr.save_dataset(dataset, out)
    sizes = {name: int(len(idx)) for name, idx in dataset.splits.items()}
    print(f"wrote dataset to {out} (splits {json.dumps(sizes, sort_keys=True)})")
    return 0


def _load_dataset_dir(path):
    if not os.path.isdir(path):
        raise _missing(path)
    try:
        return tr.load_dataset(path)
    except FileNotFoundError as err:
        raise _missing(str(err.filename or path))


def cmd_train(args):
    config = resolve_config(args)
    dataset = _load_dataset_dir(input_path(args, config, "dataset",
                                           required=True))
    t_cfg = config["train"]
    if args.epochs is not None:
        t_cfg["epochs"] = args.epochs
    try:
        train_config = tr.TrainConfig(
            alpha=float(t_cfg["alpha"]), beta=float(t_cfg["beta"]),
            learning_rate=float(t_cfg["learning_rate"]),
            epochs=int(t_cfg["epochs"]), batch_size=int(t_cfg["batch_size"]),
            seed=int(config["seed"]), temperature=float(t_cfg["temperature"]))
    except (KeyError, TypeError, ValueError) as err:
        raise _bad_config(f"bad train section: {err}")
    params, log = tr.train(dataset, train_config)
    out = config["out"]
    write_snapshot(out, config, "train")
    dn.save_checkpoint(params, dataset.field.spec,
                       os.path.join(out, "checkpoint.ckpt"))
    tr.write_training_log(log, os.path.join(out, "training_log.csv"))
    last = log[-1]
    print(f"wrote {out}/checkpoint.ckpt (epochs {len(log)}, "
          f"final train loss {last['train_loss']:.4f}, "
          f"liu {last['liu']:.4f})")
    return 0


def cmd_evaluate(args):
    config = resolve_config(args)
    sim_path = input_path(args, config, "sim")
    if sim_path is not None:
        return _evaluate_files(args, config, sim_path)
    dataset = _load_dataset_dir(input_path(args, config, "dataset",
                                           required=True))
    ckpt = input_path(args, config, "checkpoint", required=True)
    if not os.path.exists(ckpt):
        raise _missing(ckpt)
    params, _ = dn.load_checkpoint(ckpt)
    split = config["evaluate"]["split"]
    if split not in dataset.splits:
        raise _bad_config(f"dataset has no split '{split}'")
    ref_pos = dataset.split(split)
    if ref_pos.shape[0] == 0:
        raise _bad_config(f"split '{split}' is empty")
    spec = dataset.field.spec
    sim_pos = tr.predict_positions(params, dataset.field, ref_pos[:, 0])
    out = config["out"]
    write_snapshot(out, config, "evaluate")
    max_lag = config["evaluate"]["max_lag"]
    report = write_metrics_report(out, Ensemble(spec, ref_pos),
                                  Ensemble(spec, sim_pos), spec,
                                  max_lag=None if max_lag is None
                                  else int(max_lag))
    stats = tr.evaluate_split(params, dataset, split)
    print(f"split {split}: rmse {report['rmse_km']:.3f} km, "
          f"liu {stats['liu']:.4f}, final separation "
          f"{stats['final_sep']:.3f} km "
          f"(persistence {stats['persistence_final_sep']:.3f} km)")
    return 0


def _evaluate_files(args, config, sim_path):
    """Score one trajectory file against another instead of a checkpoint."""
    ref_path = input_path(args, config, "ref", required=True)
    for path in (ref_path, sim_path):
        if not os.path.exists(path):
            raise _missing(path)
    ref = read_ensemble_dtrj(ref_path)
    sim = read_ensemble_dtrj(sim_path)
    if sim.spec != ref.spec:
        raise _bad_config("ref and sim trajectories live on different grids")
    if sim.positions.shape != ref.positions.shape:
        raise _bad_config("ref and sim trajectory arrays have different "
                          "shapes")
    out = config["out"]
    write_snapshot(out, config, "evaluate")
    max_lag = config["evaluate"]["max_lag"]
    report = write_metrics_report(out, ref, sim, ref.spec,
                                  max_lag=None if max_lag is None
                                  else int(max_lag))
    print(f"ref vs sim: rmse {report['rmse_km']:.3f} km, "
          f"liu {report['liu_index']:.4f}, final separation "
          f"{report['separation_final_km']:.3f} km")
    return 0


def cmd_invert(args):
    config = resolve_config(args)
    field = load_field(args, config)
    spec = field.spec
    target_path = input_path(args, config, "target", required=True)
    if not os.path.exists(target_path):
        raise _missing(target_path)
    ens = read_ensemble_dtrj(target_path)
    if ens.spec != spec:
        raise _bad_config("target trajectories live on a different grid "
                          "than the field")
    inv_cfg = config["inversion"]
    idx = int(inv_cfg["target_index"])
    if not (0 <= idx < ens.positions.shape[0]):
        raise _bad_config(f"target_index {idx} out of range "
                          f"(file has {ens.positions.shape[0]} trajectories)")
    target = Trajectory(spec, ens.positions[idx])
    if args.n_steps is not None:
        inv_cfg["n_steps"] = args.n_steps
    try:
        icfg = InversionConfig(
            n_steps=int(inv_cfg["n_steps"]),
            step_size=float(inv_cfg["step_size"]),
            l2_weight=float(inv_cfg["l2_weight"]),
            time_constant=bool(inv_cfg["time_constant"]),
            oracle_substeps=inv_cfg["oracle_substeps"],
            sigma0=inv_cfg["sigma0"])
    except (TypeError, ValueError) as err:
        raise _bad_config(f"bad inversion section: {err}")

    r0 = target.positions[0]
    ckpt = input_path(args, config, "checkpoint")
    if ckpt:
        if not os.path.exists(ckpt):
            raise _missing(ckpt)
        params, _ = dn.load_checkpoint(ckpt)
        result = invert(params, field, target, icfg)
        corrected = dn.forward(params, result.anomaly.corrected(field), r0)
    else:
        result = invert_through_oracle(field, target, icfg)
        n_sub = (oracle_substep_count(field)
                 if icfg.oracle_substeps is None
                 else int(icfg.oracle_substeps))
        sigma0 = spec.h if icfg.sigma0 is None else icfg.sigma0
        dens = propagate_density(result.anomaly.corrected(field),
                                 init_density(spec, r0, sigma0),
                                 substeps=n_sub)
        corrected = Trajectory(spec, expected_position(dens.p, spec))
    out = config["out"]
    write_snapshot(out, config, "invert")
    anomaly_report(out, result.anomaly, field, target=target,
                   corrected=corrected, loss=result.loss)
    for warning in result.warnings:
        print(f"warning: {warning}", file=sys.stderr)
    drop = 100.0 * (1.0 - result.loss[-1] / result.loss[0]) \
        if result.loss[0] > 0 else 0.0
    print(f"wrote {out} (loss {result.loss[0]:.4g} -> {result.loss[-1]:.4g}, "
          f"{drop:.1f}% drop)")
    return 0


# ---------------------------------------------------------------------------
# selftest

def _selftest_checks():
    from . import autodiff as ad
    from .lagrangian import advect_ensemble as advect
    from .metrics import rmse_positions
    from .training import loss_liu, loss_mse, total_loss

    checks = []

    def check(name):
        def wrap(fn):
            checks.append((name, fn))
            return fn
        return wrap

    @check("rk4 conserves solid-rotation radius")
    def _rk4():
        spec = GridSpec(nx=32, ny=32, h=10.0, delta=1.0, k_steps=60)
        omega = 0.05
        field = make_solid_rotation(spec, omega)
        center = np.array([160.0, 160.0])
        r0 = center + [60.0, 0.0]
        ens = advect(field, r0[None], substeps=4, threads=1)
        radii = np.hypot(*(ens.positions[0] - center).T)
        worst = np.abs(radii / 60.0 - 1.0).max()
        assert worst < 1e-8, f"radius drift {worst:.3g}"

    @check("mass conserved through upwind transport")
    def _mass():
        spec = GridSpec(nx=16, ny=16, h=10.0, delta=6.0, k_steps=4)
        field = make_random_eddies(spec, 4, seed=1, amplitude=0.8)
        p0 = init_density(spec, [80.0, 80.0], sigma0=spec.h)
        dens = propagate_density(field, p0)
        drift = np.abs(dens.p.sum(axis=(1, 2)) - 1.0).max()
        assert drift < 1e-12, f"mass drift {drift:.3g}"

    @check("gradients match finite differences")
    def _grads():
        rng = np.random.default_rng(0)
        x = rng.standard_normal((1, 6, 6, 3))
        w = 0.5 * rng.standard_normal((4, 3, 3, 3))
        b = 0.1 * rng.standard_normal(4)

        def build(tape, xv, wv, bv):
            y = ad.leaky_relu(ad.conv2d(xv, wv, bv), 0.1)
            return ad.sum_op(ad.mul(y, y))

        worst = ad.finite_difference_check(build, [x, w, b], eps=1e-6,
                                           subsample=40, seed=0)
        assert worst < 1e-6, f"worst rel err {worst:.3g}"

    @check("loss identities hold")
    def _losses():
        spec = GridSpec(nx=16, ny=16, h=10.0, delta=6.0, k_steps=4)
        rng = np.random.default_rng(2)
        ref = np.cumsum(rng.uniform(-4.0, 4.0, (3, 5, 2)), axis=1) + 80.0
        assert total_loss(ref, ref, spec, 0.2, 0.8) == 0.0
        off = ref + [3.0, 4.0]
        rmse = rmse_positions(ref, off, spec)
        assert abs(rmse - 5.0) < 1e-12, f"rmse {rmse}"
        frozen = np.repeat(ref[:, :1], spec.k_steps + 1, axis=1)
        step = rng.uniform(1.0, 2.0, (3, 1, 2))
        line = ref[:, :1] + step * np.arange(spec.k_steps + 1)[None, :, None]
        liu = loss_liu(line, frozen, spec)
        assert abs(liu - 1.0) < 1e-9, f"liu {liu}"
        assert loss_mse(ref, ref, spec) == 0.0

    @check("zero-parameter model reduces to persistence")
    def _persistence():
        spec = GridSpec(nx=12, ny=12, h=10.0, delta=6.0, k_steps=3)
        field = make_random_eddies(spec, 3, seed=5, amplitude=0.5)
        params = dn.init_params(0, norm_vmax=field.vmax, temperature=0.2)
        for name in params.weights:
            params.weights[name][:] = 0.0
        r0 = np.array([65.0, 35.0])
        traj = dn.forward(params, field, r0)
        assert np.array_equal(traj.positions,
                              np.repeat(r0[None], spec.k_steps + 1, axis=0))

    @check("density twin tracks the propagator bitwise")
    def _twin():
        from .inversion import _density_positions
        spec = GridSpec(nx=12, ny=12, h=10.0, delta=6.0, k_steps=3)
        field = make_random_eddies(spec, 3, seed=7, amplitude=0.6)
        n_sub = oracle_substep_count(field)
        p0 = init_density(spec, [60.0, 60.0], sigma0=spec.h)
        dens = propagate_density(field, p0, substeps=n_sub)
        ref = expected_position(dens.p[1:], spec)
        tape = ad.Tape()
        us = [tape.const(field.u[j]) for j in range(spec.n_snapshots)]
        vs = [tape.const(field.v[j]) for j in range(spec.n_snapshots)]
        pos = _density_positions(tape, spec, us, vs, p0, n_sub)
        assert np.array_equal(pos.value, ref)

    return checks


def cmd_selftest(args):
    failures = 0
    for name, fn in _selftest_checks():
        try:
            fn()
        except AssertionError as err:
            print(f"FAIL {name}: {err}")
            failures += 1
        else:
            print(f"ok   {name}")
    if failures:
        print(f"{failures} check(s) failed")
        return 1
    print("all checks passed")
    return 0


# ---------------------------------------------------------------------------
# entry point

def build_parser():
    parser = argparse.ArgumentParser(
        prog="driftlab",
        description="Drift simulation, density transport, and velocity "
                    "anomaly inversion on periodic grids.")
    parser.add_argument("--version", action="version",
                        version=f"driftlab {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="JSON run configuration")
        p.add_argument("--seed", type=int, help="override config seed")
        p.add_argument("--threads", type=int, help="override worker count")
        p.add_argument("--out", help="override output directory")

    p = sub.add_parser("gen-field", help="synthesize a velocity field")
    common(p)
    p.add_argument("--field", help="copy an existing DRFT instead")
    p.set_defaults(fn=cmd_gen_field)

    p = sub.add_parser("simulate", help="advect seeds through a field")
    common(p)
    p.add_argument("--field", help="DRFT file (else built from config)")
    p.set_defaults(fn=cmd_simulate)

    p = sub.add_parser("gen-dataset", help="build a training dataset")
    common(p)
    p.add_argument("--field", help="DRFT file (else built from config)")
    p.set_defaults(fn=cmd_gen_dataset)

    p = sub.add_parser("train", help="fit the model to a dataset")
    common(p)
    p.add_argument("--dataset", help="dataset directory")
    p.add_argument("--epochs", type=int, help="override epoch count")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("evaluate", help="score a checkpoint on a split")
    common(p)
    p.add_argument("--dataset", help="dataset directory")
    p.add_argument("--checkpoint", help="model checkpoint")
    p.add_argument("--ref", help="reference trajectories (file mode)")
    p.add_argument("--sim", help="simulated trajectories to score "
                                 "against --ref instead of a checkpoint")
    p.set_defaults(fn=cmd_evaluate)

    p = sub.add_parser("invert", help="recover a velocity anomaly")
    common(p)
    p.add_argument("--field", help="DRFT file (else built from config)")
    p.add_argument("--target", help="DTRJ file with the target trajectory")
    p.add_argument("--checkpoint",
                   help="model checkpoint (omit to invert through the "
                        "density propagator)")
    p.add_argument("--n-steps", type=int, help="override descent steps")
    p.set_defaults(fn=cmd_invert)

    p = sub.add_parser("selftest", help="run the built-in invariant checks")
    common(p)
    p.set_defaults(fn=cmd_selftest)

    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except CliError as err:
        print(f"error: {err.category}: {err}", file=sys.stderr)
        return err.code
    except FormatError as err:
        print(f"error: format: {err}", file=sys.stderr)
        return 3
    except NumericalBlowupError as err:
        print(f"error: numerical: {err}", file=sys.stderr)
        return 4
    except DriftlabError as err:
        print(f"error: numerical: {err}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
