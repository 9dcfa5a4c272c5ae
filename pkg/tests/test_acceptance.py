"""Acceptance gate: the eight end-to-end behaviors this package promises.

Each test measures one behavior at its stated tolerance and runtime budget
and prints a single PASS line with the numbers; run with -rP (or -s) to see
the checklist.  The training fixture is session-scoped and shared between
the skill test and the network inversion test, which dominates the suite's
runtime.
"""

import json
import os
import time

import numpy as np
import pytest

from driftlab import autodiff as ad
from driftlab import driftnet as dn
from driftlab import training as tr
from driftlab.cli import main as cli_main
from driftlab.field import (EddySet, VelocityField, eddy_field, make_double_gyre,
                            make_random_eddies, make_solid_rotation,
                            make_uniform, vorticity)
from driftlab.fokkerplanck import (expected_position, init_density,
                                   propagate_density)
from driftlab.grid import GridSpec, wrap_delta
from driftlab.inversion import (InversionConfig, invert, invert_through_oracle,
                                oracle_substep_count)
from driftlab.lagrangian import Trajectory, advect_ensemble
from driftlab.metrics import rmse_positions
from driftlab.training import loss_liu, loss_mse, total_loss


def wrap_dist(a, b, spec):
    d = wrap_delta(np.asarray(a) - np.asarray(b),
                   np.array([spec.lx, spec.ly]))
    return np.hypot(d[..., 0], d[..., 1])


# ---------------------------------------------------------------------------
# 1. integrator fidelity on the analytic orbit

def test_rk4_orbit_radius_and_convergence():
    omega = 2.0 * np.pi / (256 * 6.0)      # one period in 256 snapshots
    radius = 100.0
    center = np.array([320.0, 320.0])
    t0 = time.perf_counter()

    spec = GridSpec(nx=64, ny=64, h=10.0, delta=6.0, k_steps=256)
    field = make_solid_rotation(spec, omega, center=center)
    seed = center + [radius, 0.0]
    pos = advect_ensemble(field, seed[None], substeps=1,
                          threads=1).positions[0]
    radii = np.hypot(pos[:, 0] - center[0], pos[:, 1] - center[1])
    drift = np.abs(radii / radius - 1.0).max()

    def orbit_error(delta, k_steps):
        s = GridSpec(nx=64, ny=64, h=10.0, delta=delta, k_steps=k_steps)
        f = make_solid_rotation(s, omega, center=center)
        p = advect_ensemble(f, seed[None], substeps=1, threads=1).positions[0]
        ang = omega * delta * np.arange(k_steps + 1)
        exact = center + radius * np.stack([np.cos(ang), np.sin(ang)], -1)
        return np.hypot(*(p - exact).T).max()

    err_full = orbit_error(6.0, 256)
    err_half = orbit_error(3.0, 512)
    ratio = err_full / err_half
    elapsed = time.perf_counter() - t0

    assert drift < 1e-8, f"radius drift {drift:.3g} over one period"
    assert 12.0 < ratio < 20.0, f"step-halving error ratio {ratio:.2f}"
    assert elapsed < 1.0, f"took {elapsed:.2f}s"
    print(f"PASS rk4 orbit: radius drift {drift:.2e} over one period, "
          f"halving improves {ratio:.1f}x, {elapsed * 1e3:.0f} ms")


# ---------------------------------------------------------------------------
# 2. density transport against the particle oracle

def test_density_mass_and_particle_tracking():
    t0 = time.perf_counter()
    spec = GridSpec(nx=64, ny=64, h=10.0, delta=6.0, k_steps=16)
    field = make_random_eddies(spec, 8, seed=42, amplitude=0.8)
    r0 = np.array([320.0, 320.0])

    dens = propagate_density(field, init_density(spec, r0, sigma0=0.0))
    track = expected_position(dens.p, spec)
    particle = advect_ensemble(field, r0[None], substeps=8,
                               threads=1).positions[0]
    elapsed = time.perf_counter() - t0

    mass = dens.p.sum(axis=(1, 2)) * spec.h * spec.h
    mass_drift = np.abs(mass / mass[0] - 1.0).max()
    offset = wrap_dist(track, particle, spec) / spec.h

    assert mass_drift < 1e-12, f"mass drift {mass_drift:.3g}"
    assert offset[-1] <= 3.0, f"final offset {offset[-1]:.2f} cells"
    assert offset.max() <= 3.0, f"max offset {offset.max():.2f} cells"
    assert elapsed < 10.0, f"took {elapsed:.2f}s"
    print(f"PASS density transport: mass drift {mass_drift:.1e}, "
          f"expected-position within {offset.max():.2f} cells of the "
          f"particle at every step, {elapsed:.1f} s")


# ---------------------------------------------------------------------------
# 3. gradient checks, per op and end to end

def conditioned_params(field, seed=0):
    """Doubled init gain plus unit forget bias; see training tests."""
    params = dn.init_params(seed, norm_vmax=field.vmax, temperature=0.2)
    for k in params.weights:
        params.weights[k] = params.weights[k] * 2.0
    params.weights["lstm.b"][16:32] = 1.0
    return params


def test_gradient_checks_all_ops_and_end_to_end():
    t0 = time.perf_counter()
    rng = np.random.default_rng(9)
    a = rng.standard_normal((3, 4))
    b = rng.standard_normal((3, 4))
    pos_in = np.abs(rng.standard_normal((3, 4))) + 0.5
    img = rng.standard_normal((2, 5, 5, 3))
    wc = 0.5 * rng.standard_normal((4, 3, 3, 3))
    bc = 0.1 * rng.standard_normal(4)
    row = rng.standard_normal((2, 6, 3))
    wr = 0.5 * rng.standard_normal((2, 3, 3))
    br = 0.1 * rng.standard_normal(2)
    gate_z = rng.standard_normal((2, 5, 5, 8))
    gate_c = rng.standard_normal((2, 5, 5, 2))
    cell_h = rng.standard_normal((2, 5, 5, 2))
    wl = 0.5 * rng.standard_normal((8, 5, 3, 3))
    bl = 0.1 * rng.standard_normal(8)
    logits = 2.0 * rng.standard_normal((2, 6, 6))
    sm_spec = GridSpec(nx=6, ny=6, h=10.0, delta=6.0, k_steps=1)
    ref_arr = 7.0 * b[:, :2]
    span = np.array([60.0, 60.0])

    def scalar(y):
        return ad.mean_op(ad.mul(y, y))

    checks = [
        ("add", lambda t, x, y: scalar(ad.add(x, y)), (a, b)),
        ("sub", lambda t, x, y: scalar(ad.sub(x, y)), (a, b)),
        ("mul", lambda t, x, y: scalar(ad.mul(x, y)), (a, b)),
        ("scale", lambda t, x: scalar(ad.scale(x, 1.7)), (a,)),
        ("neg", lambda t, x: scalar(ad.neg(x)), (a,)),
        ("sum", lambda t, x: ad.sum_op(ad.mul(x, x)), (a,)),
        ("sum axis", lambda t, x: scalar(ad.sum_op(x, axis=0)), (a,)),
        ("mean", lambda t, x: ad.mean_op(ad.mul(x, x)), (a,)),
        ("mean axis", lambda t, x: scalar(ad.mean_op(x, axis=1)), (a,)),
        ("reshape", lambda t, x: scalar(ad.reshape(x, (2, 6))), (a,)),
        ("moveaxis", lambda t, x: scalar(ad.moveaxis(x, 0, 1)), (a,)),
        ("roll", lambda t, x: scalar(ad.roll(x, 2, 1)), (a,)),
        ("concat", lambda t, x, y: scalar(ad.concat((x, y), 0)), (a, b)),
        ("stack", lambda t, x, y: scalar(ad.stack((x, y), 1)), (a, b)),
        ("take", lambda t, x: scalar(ad.take_index(x, 1, 0)), (a,)),
        ("relu", lambda t, x: scalar(ad.relu(x)), (a + 0.3,)),
        ("leaky relu", lambda t, x: scalar(ad.leaky_relu(x)), (a + 0.3,)),
        ("sigmoid", lambda t, x: scalar(ad.sigmoid(x)), (a,)),
        ("tanh", lambda t, x: scalar(ad.tanh(x)), (a,)),
        ("sqrt", lambda t, x: scalar(ad.sqrt_safe(x)), (pos_in,)),
        ("wrap delta", lambda t, x: scalar(
            ad.wrap_delta_op(x, ref_arr, span)), (7.0 * a[:, :2],)),
        ("wrap domain", lambda t, x: scalar(
            ad.wrap_domain_op(x, np.zeros(2), span)),
         (7.0 * a[:, :2] + 10.0,)),
        ("conv2d", lambda t, x, w, c: scalar(ad.conv2d(x, w, c)),
         (img, wc, bc)),
        ("conv1d time", lambda t, x, w, c: scalar(ad.conv1d_time(x, w, c)),
         (row, wr, br)),
        ("lstm gates", lambda t, z, c: scalar(
            ad.concat(ad.lstm_gates(z, c), -1)), (gate_z, gate_c)),
        ("conv lstm cell", lambda t, x, h, c, w, c2: scalar(
            ad.concat(ad.conv_lstm_cell(x, h, c, w, c2), -1)),
         (img, cell_h, gate_c, wl, bl)),
        ("spatial softmax", lambda t, x: scalar(ad.spatial_softmax(x, 0.5)),
         (logits,)),
        ("soft argmax", lambda t, x: scalar(
            ad.soft_argmax(ad.spatial_softmax(x, 0.5), sm_spec)), (logits,)),
    ]
    worst_by_op = {}
    for name, build, arrays in checks:
        worst_by_op[name] = ad.finite_difference_check(build, list(arrays),
                                                       eps=1e-6)
    worst_op = max(worst_by_op, key=worst_by_op.get)
    assert worst_by_op[worst_op] < 1e-6, \
        f"{worst_op}: rel err {worst_by_op[worst_op]:.3g}"

    spec = GridSpec(nx=16, ny=16, h=10.0, delta=6.0, k_steps=4)
    field = make_random_eddies(spec, 4, seed=3, amplitude=0.6)
    params = conditioned_params(field)
    field_input = dn._field_input(field, params.norm_vmax)
    rng = np.random.default_rng(2)
    seeds = spec.wrap_position(rng.uniform(0.0, 160.0, (2, 2)))
    ref = tr.predict_positions(params, field, seeds)
    ref = ref + 0.3 * rng.standard_normal(ref.shape)

    names = list(params.weights)

    def build_e2e(tape, *leaves):
        pvars = dict(zip(names, leaves))
        pos = tr._forward_batch(tape, pvars, field_input, ref[:, 0], spec,
                                params.norm_vmax, params.temperature)
        loss, _, _ = tr.losses_on_tape(pos, ref, spec, 0.2, 0.8)
        return loss

    worst_e2e = ad.finite_difference_check(
        build_e2e, [params.weights[n] for n in names], eps=1e-6,
        subsample=150, seed=0)
    elapsed = time.perf_counter() - t0

    assert worst_e2e < 1e-5, f"model gradient rel err {worst_e2e:.3g}"
    assert elapsed < 60.0, f"took {elapsed:.1f}s"
    print(f"PASS gradients: {len(checks)} ops worst rel "
          f"{worst_by_op[worst_op]:.1e} (tol 1e-6), end-to-end model "
          f"gradients worst rel {worst_e2e:.1e} (tol 1e-5), "
          f"{elapsed:.1f} s")


# ---------------------------------------------------------------------------
# 4. chaotic separation growth on the unsteady double gyre

def test_separation_growth_on_perturbed_gyre():
    spec = GridSpec(nx=64, ny=64, h=5.0, delta=6.0, k_steps=36)
    field = make_double_gyre(spec, amplitude=1.5, eps=0.4,
                             omega=2.0 * np.pi / 48.0)
    rng = np.random.default_rng(5)
    n = 32
    base = np.stack([rng.uniform(140.0, 180.0, n),
                     rng.uniform(20.0, 300.0, n)], -1)
    ens_a = advect_ensemble(field, base, substeps=8, threads=1)
    ens_b = advect_ensemble(field, base + [spec.h, 0.0], substeps=8,
                            threads=1)
    sep = wrap_dist(ens_a.positions, ens_b.positions, spec).mean(axis=0)
    daily = sep[1:].reshape(9, 4).mean(axis=1)

    assert np.all(np.diff(daily) > 0.0), \
        f"daily means not monotone: {np.round(daily, 2)}"
    growth = daily[-1] / daily[0]
    assert growth > 5.0, f"day-9/day-1 growth {growth:.2f}"
    print(f"PASS chaos: mean pair separation grows monotonically by day, "
          f"day 9 = {growth:.1f}x day 1 "
          f"({daily[0]:.1f} -> {daily[-1]:.1f} km)")


# ---------------------------------------------------------------------------
# 5. training beats the persistence baseline

TRAIN_SPEC = GridSpec(nx=32, ny=32, h=8.0, delta=6.0, k_steps=16)
TRAIN_EPOCHS = 3


@pytest.fixture(scope="session")
def trained_model():
    field = make_double_gyre(TRAIN_SPEC, amplitude=0.25, eps=0.25,
                             omega=2.0 * np.pi / 192.0)
    dataset = tr.generate_dataset(field, 2000, seed=11, threads=1)
    config = tr.TrainConfig(alpha=0.2, beta=0.8, learning_rate=5e-3,
                            epochs=TRAIN_EPOCHS, batch_size=16, seed=0)
    t0 = time.perf_counter()
    params, log = tr.train(dataset, config)
    elapsed = time.perf_counter() - t0
    return params, dataset, field, log, elapsed


def test_training_beats_persistence_baseline(trained_model):
    params, dataset, _, log, elapsed = trained_model
    stats = tr.evaluate_split(params, dataset, "test")
    ratio = stats["final_sep"] / stats["persistence_final_sep"]

    assert elapsed < 1800.0, f"training took {elapsed / 60:.1f} min"
    assert ratio <= 0.5, \
        (f"final separation {stats['final_sep']:.2f} km is only "
         f"{100 * (1 - ratio):.0f}% below persistence "
         f"{stats['persistence_final_sep']:.2f} km")
    assert stats["liu"] < 0.5, f"Liu index {stats['liu']:.3f}"
    print(f"PASS training: {TRAIN_EPOCHS} epochs on 2000 trajectories in "
          f"{elapsed / 60:.1f} min; test final separation "
          f"{stats['final_sep']:.2f} km = {100 * (1 - ratio):.0f}% below "
          f"persistence {stats['persistence_final_sep']:.2f} km, "
          f"Liu {stats['liu']:.3f}")


# ---------------------------------------------------------------------------
# 6. exact loss identities

def test_loss_identities_are_exact():
    spec = GridSpec(nx=16, ny=16, h=10.0, delta=6.0, k_steps=4)
    rng = np.random.default_rng(3)
    ref = spec.wrap_position(rng.uniform(0.0, 160.0, (6, 5, 2)))
    assert total_loss(ref, ref, spec) == 0.0
    assert loss_mse(ref, ref, spec) == 0.0

    line = np.array([20.0, 20.0]) + np.arange(5)[:, None] * [9.0, 6.0]
    frozen = np.tile(line[0], (5, 1))
    liu = loss_liu(line[None], frozen[None], spec)
    assert abs(liu - 1.0) <= 1e-9, f"Liu {liu!r}"

    offset = ref + [3.0, 4.0]
    rmse = rmse_positions(ref, offset, spec)
    assert rmse == 5.0, f"rmse {rmse!r}"
    print("PASS loss identities: self-comparison loss 0 exactly, "
          f"frozen-vs-line Liu {liu:.12f}, (3,4) km offset rmse "
          f"{rmse:.1f} km exactly")


# ---------------------------------------------------------------------------
# 7. recovering an injected eddy anomaly

def single_eddy(spec, center, radius, swirl):
    strength = swirl * radius * np.sqrt(np.e)
    return eddy_field(spec, EddySet(
        centers=np.asarray(center, dtype=np.float64)[None],
        radii=np.array([radius]), strengths=np.array([strength]),
        drifts=np.zeros((1, 2))))


def test_eddy_anomaly_recovery_both_routes(trained_model):
    t0 = time.perf_counter()
    spec = GridSpec(nx=32, ny=32, h=10.0, delta=6.0, k_steps=8)
    base = make_uniform(spec, 2.0, 0.0)
    center = np.array([160.0, 160.0])
    hidden = single_eddy(spec, center, 20.0, 0.8)
    truth = VelocityField(spec, base.u + hidden.u, base.v + hidden.v)
    r0 = np.array([100.0, 160.0])
    target = advect_ensemble(truth, r0[None], substeps=8,
                             threads=1).positions[0]

    config = InversionConfig(n_steps=200, step_size=5e-2, time_constant=True)
    result = invert_through_oracle(base, Trajectory(spec, target), config)

    n_sub = oracle_substep_count(base)

    def final_position(field):
        dens = propagate_density(field, init_density(spec, r0, spec.h),
                                 substeps=n_sub)
        return expected_position(dens.p, spec)[-1]

    sep_before = wrap_dist(final_position(base), target[-1], spec)
    sep_after = wrap_dist(final_position(result.anomaly.corrected(base)),
                          target[-1], spec)
    reduction = 1.0 - sep_after / sep_before

    zeta = vorticity(result.anomaly.as_field()).zeta.mean(axis=0)
    iy, ix = np.unravel_index(np.argmax(np.abs(zeta)), zeta.shape)
    found = np.array([spec.x0 + (ix + 0.5) * spec.h,
                      spec.y0 + (iy + 0.5) * spec.h])
    center_err = wrap_dist(found, center, spec) / spec.h
    oracle_elapsed = time.perf_counter() - t0

    assert reduction >= 0.8, \
        (f"final separation only reduced {100 * reduction:.0f}% "
         f"({sep_before:.2f} -> {sep_after:.2f} km)")
    assert center_err <= 3.0, \
        f"vorticity extremum {center_err:.2f} cells from the eddy center"
    assert oracle_elapsed < 300.0, f"took {oracle_elapsed:.0f}s"

    params, _, field, _, _ = trained_model
    net_center = np.array([128.0, 128.0])
    net_hidden = single_eddy(TRAIN_SPEC, net_center, 16.0, 0.5)
    net_truth = VelocityField(TRAIN_SPEC, field.u + net_hidden.u,
                              field.v + net_hidden.v)
    net_r0 = np.array([112.0, 128.0])
    net_target = advect_ensemble(net_truth, net_r0[None], substeps=8,
                                 threads=1).positions[0]
    net_result = invert(params, field, Trajectory(TRAIN_SPEC, net_target),
                        InversionConfig(n_steps=200, step_size=5e-2))
    net_reduction = 1.0 - net_result.loss[-1] / net_result.loss[0]

    assert net_reduction >= 0.5, \
        (f"network mismatch only reduced {100 * net_reduction:.0f}% "
         f"({net_result.loss[0]:.3g} -> {net_result.loss[-1]:.3g})")
    print(f"PASS anomaly recovery: oracle route cuts final separation "
          f"{100 * reduction:.0f}% ({sep_before:.1f} -> {sep_after:.2f} km) "
          f"with the vorticity extremum {float(center_err):.1f} cells from "
          f"the hidden eddy in {oracle_elapsed:.0f} s; network route cuts "
          f"trajectory mismatch {100 * net_reduction:.0f}%")


# ---------------------------------------------------------------------------
# 8. bit-identical replay of every command

def test_cli_replay_is_bit_identical(tmp_path):
    config = {
        "grid": {"nx": 16, "ny": 16, "h": 10.0, "delta": 6.0, "k_steps": 4},
        "flow": {"family": "double_gyre", "amplitude": 0.4, "eps": 0.2,
                 "omega": 0.3},
        "dataset": {"n_trajectories": 16, "substeps": 4},
        "simulate": {"n_seeds": 4, "substeps": 4},
        "train": {"epochs": 1, "batch_size": 8},
        "inversion": {"n_steps": 3},
        "seed": 13,
    }
    cfg = tmp_path / "config.json"
    cfg.write_text(json.dumps(config))
    ws = {name: tmp_path / name for name in
          ("field", "sim", "ds", "tr", "ev", "inv")}

    def run(cmd, *extra, out):
        assert cli_main([cmd, *extra, "--out", str(out)]) == 0

    run("gen-field", "--config", str(cfg), out=ws["field"])
    field = str(ws["field"] / "field.drft")
    run("simulate", "--config", str(cfg), "--field", field,
        "--threads", "1", out=ws["sim"])
    run("gen-dataset", "--config", str(cfg), "--field", field,
        "--threads", "1", out=ws["ds"])
    run("train", "--config", str(cfg), "--dataset", str(ws["ds"]),
        out=ws["tr"])
    run("evaluate", "--config", str(cfg), "--dataset", str(ws["ds"]),
        "--checkpoint", str(ws["tr"] / "checkpoint.ckpt"), out=ws["ev"])
    run("invert", "--config", str(cfg), "--field", field,
        "--target", str(ws["sim"] / "trajectories.dtrj"), out=ws["inv"])

    n_files = 0
    for name, out in ws.items():
        replay = tmp_path / f"replay_{name}"
        snap = str(out / "config.json")
        with open(snap) as fh:
            command = json.load(fh)["command"]
        assert cli_main([command, "--config", snap, "--threads", "3",
                         "--out", str(replay)]) == 0
        for artifact in sorted(os.listdir(out)):
            if artifact == "config.json":
                continue
            with open(out / artifact, "rb") as fh:
                first = fh.read()
            with open(replay / artifact, "rb") as fh:
                second = fh.read()
            assert first == second, f"{name}/{artifact} differs on replay"
            n_files += 1
    print(f"PASS replay: all 6 commands rerun from their snapshots at a "
          f"different thread count; {n_files} artifacts bit-identical")
