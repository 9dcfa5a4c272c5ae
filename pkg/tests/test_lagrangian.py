import numpy as np
import pytest

from driftlab.errors import FormatError, NumericalBlowupError
from driftlab.grid import GridSpec
from driftlab import field as fld
from driftlab import lagrangian as lag


def rotation_setup(substeps=16):
    # one full revolution in exactly k_steps * delta hours
    spec = GridSpec(nx=32, ny=32, h=8.0, delta=8.0, k_steps=16)
    omega = 2.0 * np.pi / spec.duration
    f = fld.make_solid_rotation(spec, omega=omega)
    center = np.array([128.0, 128.0])
    r0 = center + np.array([24.0, 0.0])
    return spec, omega, f, center, r0, substeps


def test_uniform_field_exact_lines(spec16):
    f = fld.make_uniform(spec16, 1.0, -0.5)
    traj = lag.advect_rk4(f, (3.0, 100.0), substeps=6)
    t = np.arange(spec16.n_snapshots) * spec16.delta
    want_x = np.mod(3.0 + 1.0 * t, spec16.lx)
    want_y = np.mod(100.0 - 0.5 * t, spec16.ly)
    assert np.allclose(traj.positions[:, 0], want_x, atol=1e-10)
    assert np.allclose(traj.positions[:, 1], want_y, atol=1e-10)
    euler = lag.advect_euler(f, (3.0, 100.0), substeps=6)
    assert np.allclose(euler.positions, traj.positions, atol=1e-10)


def test_zero_field_stays_put(spec16):
    f = fld.make_uniform(spec16, 0.0, 0.0)
    traj = lag.advect_rk4(f, (50.0, 60.0), substeps=4)
    assert np.array_equal(traj.positions,
                          np.tile(np.array([50.0, 60.0]), (spec16.n_snapshots, 1)))


def test_seed_recorded_first(spec16):
    f = fld.make_uniform(spec16, 1.0, 1.0)
    traj = lag.advect_rk4(f, (17.25, 33.5))
    assert traj.positions[0, 0] == 17.25
    assert traj.positions[0, 1] == 33.5


def test_rk4_rotation_radius_conserved():
    spec, omega, f, center, r0, substeps = rotation_setup()
    assert omega * (spec.delta / substeps) < 0.05
    traj = lag.advect_rk4(f, r0, substeps=substeps)
    radii = np.hypot(traj.positions[:, 0] - center[0], traj.positions[:, 1] - center[1])
    assert np.abs(radii - 24.0).max() / 24.0 < 1e-8
    # after one period the particle returns to its seed
    assert np.hypot(*(traj.positions[-1] - r0)) < 1e-5


def test_rk4_fourth_order_in_substep():
    spec, omega, f, center, r0, _ = rotation_setup()
    t = np.arange(spec.n_snapshots) * spec.delta
    want = np.stack([center[0] + 24.0 * np.cos(omega * t),
                     center[1] + 24.0 * np.sin(omega * t)], axis=-1)
    errs = []
    for substeps in (16, 32):
        traj = lag.advect_rk4(f, r0, substeps=substeps)
        errs.append(np.hypot(*(traj.positions[-1] - want[-1])))
    ratio = errs[0] / errs[1]
    assert 12.0 < ratio < 20.0


def test_euler_spirals_outward():
    spec, omega, f, center, r0, substeps = rotation_setup()
    traj = lag.advect_euler(f, r0, substeps=substeps)
    radii = np.hypot(traj.positions[:, 0] - center[0], traj.positions[:, 1] - center[1])
    assert np.all(np.diff(radii) > 0.0)


def test_stream_function_conserved_on_steady_gyre():
    # steady two-gyre flow: psi along an oracle trajectory moves by less than
    # 1e-4 of its domain maximum over nine days
    spec = GridSpec(nx=256, ny=256, h=1.0, delta=6.0, k_steps=36)
    amp = 1.0
    f = fld.make_double_gyre(spec, amplitude=amp, eps=0.0)
    traj = lag.advect_rk4(f, (90.0, 128.0), substeps=6)
    psi = fld.double_gyre_stream(spec, amp, 0.0, 0.0,
                                 traj.positions[:, 0], traj.positions[:, 1], 0.0)
    psi_max = amp * spec.ly / np.pi
    assert np.abs(psi - psi[0]).max() / psi_max < 1e-4


def test_ensemble_matches_single_runs(spec16, rng):
    f = fld.make_random_eddies(spec16, n_eddies=4, seed=5, amplitude=0.8)
    seeds = np.column_stack([rng.uniform(0, spec16.lx, 5), rng.uniform(0, spec16.ly, 5)])
    ens = lag.advect_ensemble(f, seeds, threads=1)
    for i in range(5):
        single = lag.advect_rk4(f, seeds[i])
        assert np.array_equal(ens.positions[i], single.positions)
    # a duplicated seed yields an identical row
    ens2 = lag.advect_ensemble(f, np.vstack([seeds, seeds[:1]]), threads=1)
    assert np.array_equal(ens2.positions[-1], ens2.positions[0])


def test_ensemble_parallel_matches_serial(spec16, rng):
    f = fld.make_random_eddies(spec16, n_eddies=4, seed=5, amplitude=0.8)
    seeds = np.column_stack([rng.uniform(0, spec16.lx, 1000),
                             rng.uniform(0, spec16.ly, 1000)])
    serial = lag.advect_ensemble(f, seeds, threads=1)
    parallel = lag.advect_ensemble(f, seeds, threads=4)
    assert np.array_equal(serial.positions, parallel.positions)


def test_threads_env_fallback(monkeypatch):
    monkeypatch.setenv("DRIFTLAB_THREADS", "3")
    assert lag.resolve_threads(None) == 3
    assert lag.resolve_threads(2) == 2
    monkeypatch.delenv("DRIFTLAB_THREADS")
    assert lag.resolve_threads(None) >= 1


def test_perturb_seeds_disk():
    r0 = (40.0, 60.0)
    seeds = lag.perturb_seeds(r0, radius=5.0, n=100000, seed=11)
    d = np.hypot(seeds[:, 0] - r0[0], seeds[:, 1] - r0[1])
    assert d.max() <= 5.0 + 1e-12
    mean = seeds.mean(axis=0)
    assert np.hypot(mean[0] - r0[0], mean[1] - r0[1]) < 0.5
    again = lag.perturb_seeds(r0, radius=5.0, n=100000, seed=11)
    assert np.array_equal(seeds, again)
    tiny = lag.perturb_seeds(r0, radius=1e-9, n=50, seed=3)
    assert np.hypot(tiny[:, 0] - r0[0], tiny[:, 1] - r0[1]).max() <= 1e-9


def test_blowup_names_step(spec16):
    u = np.ones((spec16.n_snapshots, spec16.ny, spec16.nx))
    u[1] = np.inf
    f = fld.VelocityField(spec16, u, np.zeros_like(u))
    with pytest.raises(NumericalBlowupError, match="step 1"):
        lag.advect_rk4(f, (60.0, 60.0))


def test_bad_integrator_and_substeps(spec16):
    f = fld.make_uniform(spec16, 1.0, 0.0)
    with pytest.raises(ValueError):
        lag.advect_ensemble(f, [(0.0, 0.0)], integrator="rk9")
    with pytest.raises(ValueError):
        lag.advect_rk4(f, (0.0, 0.0), substeps=0)


def test_dtrj_round_trip(tmp_path, spec16, rng):
    ens = lag.Ensemble(spec16, rng.uniform(0, 128, size=(7, spec16.n_snapshots, 2)))
    path = tmp_path / "ens.dtrj"
    lag.write_ensemble_dtrj(ens, path)
    back = lag.read_ensemble_dtrj(path)
    assert back.spec == spec16
    assert np.array_equal(back.positions, ens.positions)


def test_dtrj_bad_magic(tmp_path):
    path = tmp_path / "x.dtrj"
    path.write_bytes(b"DRFT" + b"\x00" * 60)
    with pytest.raises(FormatError):
        lag.read_ensemble_dtrj(path)


def test_dtrj_truncated(tmp_path, spec16):
    ens = lag.Ensemble(spec16, np.zeros((3, spec16.n_snapshots, 2)))
    path = tmp_path / "ens.dtrj"
    lag.write_ensemble_dtrj(ens, path)
    raw = path.read_bytes()
    path.write_bytes(raw[:-16])
    with pytest.raises(FormatError):
        lag.read_ensemble_dtrj(path)


def test_trajectory_csv_round_trip(tmp_path, spec16, rng):
    ens = lag.Ensemble(spec16, rng.uniform(0, 128, size=(3, spec16.n_snapshots, 2)))
    path = tmp_path / "traj.csv"
    lag.write_trajectories_csv(ens, path)
    lines = path.read_text().strip().split("\n")
    assert lines[0] == "traj_id,step,t_hours,x_km,y_km"
    assert len(lines) == 1 + 3 * spec16.n_snapshots
    back = lag.read_trajectories_csv(path, spec16)
    assert np.array_equal(back.positions, ens.positions)


def test_trajectory_csv_rejects_bad_header(tmp_path, spec16):
    path = tmp_path / "bad.csv"
    path.write_text("a,b\n1,2\n")
    with pytest.raises(FormatError):
        lag.read_trajectories_csv(path, spec16)
