"""Flocking performance metrics and the scalar flocking loss.

Per-snapshot metrics (velocity correlation, nearest-neighbor spacing and its
spread, leader tracking error, flock speed) are aggregated over a trace into
a 9-entry vector m; the flocking loss is the weighted sum b . m. Lower is
better: the alignment mean enters negated, everything else is a penalty or
a variance.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from privflock.flocking import ReferenceTrajectory, SimTrace, trajectory_point

METRIC_NAMES = (
    "neg_mean_alignment", "var_alignment",
    "spacing_penalty", "var_min_spacing", "mean_spacing_variance",
    "mean_tracking_error", "var_tracking_error",
    "speed_penalty", "var_flock_speed",
)


def _default_b() -> np.ndarray:
    return np.ones(9)


@dataclass(frozen=True)
class MetricWeights:
    """Loss weights b plus the acceptable spacing band and minimum speed."""

    b: np.ndarray = field(default_factory=_default_b)
    r_lo: float = 1.0
    r_hi: float = 5.0
    v_min: float = 1.0

    def validate(self) -> None:
        b = np.asarray(self.b, dtype=float)
        if b.shape != (9,):
            raise ValueError("b must have 9 entries")
        if not np.isfinite(b).all():
            raise ValueError("b must be finite")
        if not self.r_lo < self.r_hi:
            raise ValueError("r_lo must be < r_hi")
        if not self.v_min >= 0.0:
            raise ValueError("v_min must be >= 0")


def velocity_correlation(velocities) -> float:
    """Mean pairwise cosine similarity of robot velocities, in [-1, 1].

    Zero-speed robots are dropped from both sums with the pair count
    renormalized accordingly; fewer than two moving robots gives 0.
    """
    vel = np.asarray(velocities, dtype=float)
    speeds = np.linalg.norm(vel, axis=1)
    moving = speeds > 0.0
    m = int(moving.sum())
    if m < 2:
        return 0.0
    unit = vel[moving] / speeds[moving][:, None]
    gram = unit @ unit.T
    return float((gram.sum() - np.trace(gram)) / (m * (m - 1)))


def _nearest_distances(positions) -> np.ndarray:
    pos = np.asarray(positions, dtype=float)
    diff = pos[:, None, :] - pos[None, :, :]
    d = np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))
    np.fill_diagonal(d, np.inf)
    return d.min(axis=1)


def min_spacing(positions) -> float:
    """Mean over robots of the distance to their nearest other robot."""
    return float(_nearest_distances(positions).mean())


def spacing_penalty(mean_min_spacing: float, weights: MetricWeights) -> float:
    """Distance from the spacing band; zero inside it (edges included)."""
    x = mean_min_spacing
    if weights.r_lo < x < weights.r_hi:
        return 0.0
    return float(min(abs(x - weights.r_lo), abs(x - weights.r_hi)))


def spacing_variance(positions) -> float:
    """Spread of nearest-neighbor distances around their snapshot mean."""
    nearest = _nearest_distances(positions)
    mu = nearest.mean()
    return float(((nearest - mu) ** 2).mean())


def tracking_error(positions, leader_index: int, traj: ReferenceTrajectory,
                   leader_arc: float, lookahead: float) -> float:
    """Distance from the leader to its current look-ahead target."""
    target = trajectory_point(traj, leader_arc + lookahead)
    pos = np.asarray(positions, dtype=float)
    return float(np.linalg.norm(pos[leader_index] - target))


def flock_speed(velocities) -> float:
    """Magnitude of the summed velocity divided by the team size."""
    vel = np.asarray(velocities, dtype=float)
    return float(np.linalg.norm(vel.sum(axis=0)) / vel.shape[0])


def speed_penalty(mean_speed: float, weights: MetricWeights) -> float:
    """Deficit below the minimum acceptable flock speed; zero at or above."""
    if mean_speed >= weights.v_min:
        return 0.0
    return float(abs(mean_speed - weights.v_min))


def aggregate(series) -> tuple[float, float]:
    """Population mean and variance of a per-step metric series."""
    arr = np.asarray(series, dtype=float)
    if arr.size == 0:
        raise ValueError("empty metric series")
    mean = float(arr.mean())
    var = float(((arr - mean) ** 2).mean())
    return mean, var


def flocking_loss(trace: SimTrace, traj: ReferenceTrajectory,
                  weights: MetricWeights) -> tuple[float, np.ndarray]:
    """Assemble the 9-entry metric vector over a trace and score it.

    Returns (loss, m) with loss = b . m.
    """
    q = trace.q
    corr = np.empty(q)
    minsp = np.empty(q)
    spvar = np.empty(q)
    track = np.empty(q)
    speed = np.empty(q)
    lookahead = trace.config.lookahead
    for k in range(q):
        corr[k] = velocity_correlation(trace.velocities[k])
        minsp[k] = min_spacing(trace.positions[k])
        spvar[k] = spacing_variance(trace.positions[k])
        track[k] = tracking_error(trace.positions[k], trace.leader_index,
                                  traj, trace.leader_arcs[k], lookahead)
        speed[k] = flock_speed(trace.velocities[k])
    corr_mean, corr_var = aggregate(corr)
    minsp_mean, minsp_var = aggregate(minsp)
    spvar_mean, _ = aggregate(spvar)
    track_mean, track_var = aggregate(track)
    speed_mean, speed_var = aggregate(speed)
    m = np.array([
        -corr_mean,
        corr_var,
        spacing_penalty(minsp_mean, weights),
        minsp_var,
        spvar_mean,
        track_mean,
        track_var,
        speed_penalty(speed_mean, weights),
        speed_var,
    ])
    b = np.asarray(weights.b, dtype=float)
    return float(b @ m), m
