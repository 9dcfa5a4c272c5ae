"""Trajectory evaluation: separation statistics, position RMSE, velocity
autocorrelation, and the correlation time scale.

All distances are minimal-image on the periodic domain and reported in km;
time scales come out in days.
"""

import json
import os
from dataclasses import dataclass

import numpy as np

from . import svgplot
from .grid import wrap_delta_xy
from .training import loss_liu, loss_mse


@dataclass
class SeparationCurve:
    """Ensemble separation statistics per step 0..K."""

    mean: np.ndarray
    q1: np.ndarray
    q3: np.ndarray


@dataclass
class LagrangianStats:
    """Velocity autocorrelation per lag and its integral time scales."""

    r_u: np.ndarray
    r_v: np.ndarray
    t_u_days: float
    t_v_days: float
    n_excluded: int


def _pair_distances(ref, sim, spec):
    ref = np.asarray(ref.positions if hasattr(ref, "positions") else ref,
                     dtype=np.float64)
    sim = np.asarray(sim.positions if hasattr(sim, "positions") else sim,
                     dtype=np.float64)
    if ref.shape != sim.shape or ref.ndim != 3:
        raise ValueError("ensembles must share a (n, k + 1, 2) shape")
    d = wrap_delta_xy(sim - ref, spec)
    return np.hypot(d[..., 0], d[..., 1])


def separation_curve(ref, sim, spec):
    """Mean and quartiles of the pairwise separation at every step."""
    dist = _pair_distances(ref, sim, spec)
    return SeparationCurve(mean=dist.mean(axis=0),
                           q1=np.quantile(dist, 0.25, axis=0),
                           q3=np.quantile(dist, 0.75, axis=0))


def rmse_positions(ref, sim, spec, step=None):
    """Root mean square separation, at one step or pooled over steps 1..K.

    The pooled value is the square root of the training loss's mean squared
    separation, so the two modules agree on what "position error" means.
    """
    dist = _pair_distances(ref, sim, spec)
    if step is None:
        return float(np.sqrt(np.mean(dist[:, 1:] ** 2)))
    return float(np.sqrt(np.mean(dist[:, step] ** 2)))


def velocity_autocorrelation(ens, spec, max_lag=None):
    """Per-component velocity autocorrelation averaged over trajectories.

    Velocities are finite differences of consecutive positions (minimal
    image, km/h).  Each trajectory is mean-removed and normalized by its own
    lag-0 value (the biased estimator), then averaged.  Trajectories with
    zero velocity variance carry no correlation information and are
    excluded; their count is reported.
    """
    pos = np.asarray(ens.positions if hasattr(ens, "positions") else ens,
                     dtype=np.float64)
    n, k1 = pos.shape[:2]
    k = k1 - 1
    if k < 2:
        raise ValueError("autocorrelation needs at least two steps")
    if max_lag is None:
        max_lag = k - 1
    max_lag = int(min(max_lag, k - 1))
    vel = wrap_delta_xy(pos[:, 1:] - pos[:, :-1], spec) / spec.delta  # (n, k, 2)
    vel = vel - vel.mean(axis=1, keepdims=True)
    var = np.mean(vel ** 2, axis=1)                                   # (n, 2)
    keep = np.all(var > 0.0, axis=1)
    n_excluded = int(n - keep.sum())
    if not np.any(keep):
        raise ValueError("every trajectory has zero velocity variance")
    vel = vel[keep]
    var = var[keep]
    lags = np.arange(max_lag + 1)
    r = np.empty((2, max_lag + 1))
    for lag in lags:
        c = np.mean(vel[:, : k - lag] * vel[:, lag:], axis=1) * (k - lag) / k
        r[:, lag] = np.mean(c / var, axis=0)
    return r[0], r[1], n_excluded


def lagrangian_timescale(r, delta):
    """Integral of the autocorrelation up to its first zero crossing, days.

    Trapezoidal rule over unit lags; when the curve crosses zero between
    samples the last piece is the triangle up to the interpolated crossing.
    Without a crossing the integral runs over the whole sampled range.
    """
    r = np.asarray(r, dtype=np.float64)
    total = 0.0
    for k in range(1, r.shape[0]):
        if r[k] < 0.0:
            frac = r[k - 1] / (r[k - 1] - r[k])
            total += 0.5 * r[k - 1] * frac
            break
        total += 0.5 * (r[k - 1] + r[k])
    return total * delta / 24.0


def lagrangian_stats(ens, spec, max_lag=None):
    r_u, r_v, n_excluded = velocity_autocorrelation(ens, spec, max_lag)
    return LagrangianStats(r_u=r_u, r_v=r_v,
                           t_u_days=lagrangian_timescale(r_u, spec.delta),
                           t_v_days=lagrangian_timescale(r_v, spec.delta),
                           n_excluded=n_excluded)


# ---------------------------------------------------------------------------
# report

def write_metrics_report(out_dir, ref, sim, spec, max_lag=None):
    """Full comparison report: JSON scalars, CSV curves, SVG figures.

    ref and sim are matched position arrays or ensembles (n, k + 1, 2).
    Returns the dict written to metrics.json.
    """
    os.makedirs(out_dir, exist_ok=True)
    ref_pos = np.asarray(ref.positions if hasattr(ref, "positions") else ref,
                         dtype=np.float64)
    sim_pos = np.asarray(sim.positions if hasattr(sim, "positions") else sim,
                         dtype=np.float64)
    k = ref_pos.shape[1] - 1
    curve = separation_curve(ref_pos, sim_pos, spec)
    stats_ref = lagrangian_stats(ref_pos, spec, max_lag)
    stats_sim = lagrangian_stats(sim_pos, spec, max_lag)
    t_hours = np.arange(k + 1) * spec.delta

    report = {
        "n_traj": int(ref_pos.shape[0]),
        "k_steps": int(k),
        "rmse_km": rmse_positions(ref_pos, sim_pos, spec),
        "rmse_final_km": rmse_positions(ref_pos, sim_pos, spec, step=k),
        "mse_km2": loss_mse(ref_pos, sim_pos, spec),
        "liu_index": loss_liu(ref_pos, sim_pos, spec),
        "separation_final_km": float(curve.mean[-1]),
        "timescale_ref_u_days": stats_ref.t_u_days,
        "timescale_ref_v_days": stats_ref.t_v_days,
        "timescale_sim_u_days": stats_sim.t_u_days,
        "timescale_sim_v_days": stats_sim.t_v_days,
        "timescale_abs_diff_u_days": abs(stats_ref.t_u_days - stats_sim.t_u_days),
        "timescale_abs_diff_v_days": abs(stats_ref.t_v_days - stats_sim.t_v_days),
        "autocorr_excluded_ref": stats_ref.n_excluded,
        "autocorr_excluded_sim": stats_sim.n_excluded,
    }
    with open(os.path.join(out_dir, "metrics.json"), "w") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
        fh.write("\n")

    with open(os.path.join(out_dir, "separation.csv"), "w") as fh:
        fh.write("step,t_hours,mean_km,q1_km,q3_km\n")
        for j in range(k + 1):
            fh.write("%d,%.17g,%.17g,%.17g,%.17g\n"
                     % (j, t_hours[j], curve.mean[j], curve.q1[j], curve.q3[j]))

    lags = np.arange(stats_ref.r_u.shape[0])
    with open(os.path.join(out_dir, "autocorrelation.csv"), "w") as fh:
        fh.write("lag,t_hours,ref_r_u,ref_r_v,sim_r_u,sim_r_v\n")
        for j in lags:
            fh.write("%d,%.17g,%.17g,%.17g,%.17g,%.17g\n"
                     % (j, j * spec.delta, stats_ref.r_u[j], stats_ref.r_v[j],
                        stats_sim.r_u[j], stats_sim.r_v[j]))

    days = t_hours / 24.0
    svg = svgplot.render_line_chart(
        [{"x": days, "y": curve.mean, "label": "mean separation"}],
        bands=[{"x": days, "lo": curve.q1, "hi": curve.q3}],
        title="Separation distance", xlabel="time (days)", ylabel="km")
    with open(os.path.join(out_dir, "separation.svg"), "w") as fh:
        fh.write(svg + "\n")
    lag_days = lags * spec.delta / 24.0
    svg = svgplot.render_line_chart(
        [{"x": lag_days, "y": stats_ref.r_u, "label": "reference u"},
         {"x": lag_days, "y": stats_ref.r_v, "label": "reference v"},
         {"x": lag_days, "y": stats_sim.r_u, "label": "simulated u"},
         {"x": lag_days, "y": stats_sim.r_v, "label": "simulated v"}],
        title="Velocity autocorrelation", xlabel="lag (days)", ylabel="R")
    with open(os.path.join(out_dir, "autocorrelation.svg"), "w") as fh:
        fh.write(svg + "\n")
    return report
