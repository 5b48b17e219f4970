"""Leader-driven Reynolds flocking: parameters, reference paths, simulation.

A flock of N kinematic robots is steered by separation/alignment/cohesion
velocity components; one robot (the tacit leader) additionally tracks a
reference path via a look-ahead proportional term. The simulation integrates
the single-integrator model forward in time and records a trace that
downstream code scores and slices into discriminator observation windows.
"""

from __future__ import annotations

import csv
import dataclasses
import math
import struct
from dataclasses import dataclass

import numpy as np

from privflock import _kernels

TRAJECTORY_KINDS = ("line", "sine", "chevron")

N_GENES = 15
GENE_NAMES = (
    "f_alpha_sep", "f_alpha_align", "f_alpha_coh",
    "f_r_sep", "f_r_align", "f_r_coh",
    "l_alpha_sep", "l_alpha_align", "l_alpha_coh",
    "l_r_sep", "l_r_align", "l_r_coh",
    "l_omega", "l_init_x", "l_init_y",
)

TRACE_HEADER = ("t", "robot_id", "is_leader",
                "px", "py", "pz", "vx", "vy", "vz")

_TRACK_EPS = 1e-9
_COINCIDE_EPS = 1e-3


class SimulationError(RuntimeError):
    """A robot state went non-finite during integration."""

    def __init__(self, step: int, robot: int):
        super().__init__(f"non-finite state at step {step}, robot {robot}")
        self.step = step
        self.robot = robot


@dataclass(frozen=True)
class FollowerParams:
    """Reynolds gains and interaction radii of a follower robot."""

    alpha_sep: float
    alpha_align: float
    alpha_coh: float
    r_sep: float
    r_align: float
    r_coh: float

    def validate(self, sensing_range: float | None = None) -> None:
        for name in ("alpha_sep", "alpha_align", "alpha_coh"):
            if not getattr(self, name) >= 0.0:
                raise ValueError(f"{name} must be >= 0")
        for name in ("r_sep", "r_align", "r_coh"):
            r = getattr(self, name)
            if not r > 0.0:
                raise ValueError(f"{name} must be > 0")
            if sensing_range is not None and r > sensing_range:
                raise ValueError(f"{name} exceeds sensing range {sensing_range}")

    def gain_arrays(self) -> tuple[np.ndarray, np.ndarray]:
        gains = np.array([self.alpha_sep, self.alpha_align, self.alpha_coh])
        radii = np.array([self.r_sep, self.r_align, self.r_coh])
        return gains, radii


@dataclass(frozen=True)
class LeaderParams(FollowerParams):
    """Follower fields plus tracking gain and initial-offset parameters."""

    omega: float = 0.0
    init_x: float = 0.0
    init_y: float = 0.0

    def validate(self, sensing_range: float | None = None) -> None:
        super().validate(sensing_range)
        if not self.omega >= 0.0:
            raise ValueError("omega must be >= 0")
        for name in ("init_x", "init_y"):
            v = getattr(self, name)
            if not -1.0 <= v <= 1.0:
                raise ValueError(f"{name} must be in [-1, 1]")


@dataclass(frozen=True)
class Chromosome:
    """A 15-gene search point: follower params followed by leader params."""

    follower: FollowerParams
    leader: LeaderParams

    @property
    def genes(self) -> np.ndarray:
        f, l = self.follower, self.leader
        return np.array([
            f.alpha_sep, f.alpha_align, f.alpha_coh, f.r_sep, f.r_align, f.r_coh,
            l.alpha_sep, l.alpha_align, l.alpha_coh, l.r_sep, l.r_align, l.r_coh,
            l.omega, l.init_x, l.init_y,
        ])

    @classmethod
    def from_genes(cls, genes) -> "Chromosome":
        g = np.asarray(genes, dtype=float)
        if g.shape != (N_GENES,):
            raise ValueError(f"expected {N_GENES} genes, got shape {g.shape}")
        return cls(
            follower=FollowerParams(*g[:6]),
            leader=LeaderParams(*g[6:12], omega=g[12], init_x=g[13], init_y=g[14]),
        )

    def validate(self, sensing_range: float | None = None) -> None:
        self.follower.validate(sensing_range)
        self.leader.validate(sensing_range)


@dataclass(frozen=True)
class ReferenceTrajectory:
    """Reference path in the plane z = altitude.

    kind 'line' runs straight along `heading`; 'sine' adds a lateral
    sinusoidal offset of the given amplitude and wavelength (period_length);
    'chevron' zigzags in straight legs of period_length meters, alternating
    +45 and -45 degrees off the heading.
    """

    kind: str = "line"
    origin: tuple[float, float] = (0.0, 0.0)
    heading: tuple[float, float] = (1.0, 0.0)
    amplitude: float = 5.0
    period_length: float = 30.0
    altitude: float = 10.0

    def validate(self) -> None:
        if self.kind not in TRAJECTORY_KINDS:
            raise ValueError(f"kind must be one of {TRAJECTORY_KINDS}")
        if not self.amplitude >= 0.0:
            raise ValueError("amplitude must be >= 0")
        if not self.period_length > 0.0:
            raise ValueError("period_length must be > 0")
        hx, hy = self.heading
        if abs(math.hypot(hx, hy) - 1.0) > 1e-9:
            raise ValueError("heading must have unit norm")


@dataclass(frozen=True)
class SimConfig:
    """Simulation shape: team size, timing, limits, and formation layout."""

    n_robots: int = 9
    sensing_range: float = 20.0
    duration: float = 180.0
    control_rate: float = 2.0
    lookahead: float = 3.0
    v_max: float = 2.5
    formation_spacing: float = 3.0
    seed: int = 0

    def validate(self) -> None:
        if self.n_robots < 2:
            raise ValueError("n_robots must be >= 2")
        if not self.duration > 0.0:
            raise ValueError("duration must be > 0")
        if not self.control_rate > 0.0:
            raise ValueError("control_rate must be > 0")
        if not self.lookahead > 0.0:
            raise ValueError("lookahead must be > 0")
        if not self.v_max > 0.0:
            raise ValueError("v_max must be > 0")
        if not self.formation_spacing > 0.0:
            raise ValueError("formation_spacing must be > 0")

    @property
    def n_steps(self) -> int:
        return int(round(self.duration * self.control_rate))


@dataclass
class SimTrace:
    """Time-major record of one simulated flight.

    positions/velocities have shape (q, N, 3); leader_arcs (q,) holds the
    leader's monotone arc-length projection used for look-ahead tracking.
    """

    positions: np.ndarray
    velocities: np.ndarray
    leader_arcs: np.ndarray
    leader_index: int
    config: SimConfig

    @property
    def q(self) -> int:
        return self.positions.shape[0]

    @property
    def n_robots(self) -> int:
        return self.positions.shape[1]

    @property
    def times(self) -> np.ndarray:
        return np.arange(self.q) / self.config.control_rate


@dataclass(frozen=True)
class ObservationWindow:
    """Positions of the whole team over one observation span, plus the label.

    data has shape (N, 3, channels) with channels = window samples.
    """

    data: np.ndarray
    label: int


def neighborhood(positions, i: int, radius: float) -> np.ndarray:
    """Indices of all robots within `radius` of robot i, excluding i."""
    if not radius > 0.0:
        raise ValueError("radius must be > 0")
    pos = np.asarray(positions, dtype=float)
    d = np.linalg.norm(pos - pos[i], axis=1)
    mask = d <= radius
    mask[i] = False
    return np.flatnonzero(mask)


def separation_velocity(positions, i: int, r_sep: float) -> np.ndarray:
    """Mean inverse-square repulsion from neighbors within r_sep.

    Neighbors at exactly r_sep or coincident with robot i count toward the
    mean but contribute a zero vector. Empty neighborhood gives zero.
    """
    pos = np.asarray(positions, dtype=float)
    nb = neighborhood(pos, i, r_sep)
    if nb.size == 0:
        return np.zeros(3)
    diff = pos[i] - pos[nb]
    d = np.linalg.norm(diff, axis=1)
    inner = (d > 0.0) & (d < r_sep)
    total = np.zeros(3)
    if inner.any():
        total = (diff[inner] / (d[inner] ** 2)[:, None]).sum(axis=0)
    return total / nb.size


def alignment_velocity(positions, velocities, i: int, r_align: float) -> np.ndarray:
    """Mean velocity of the neighborhood; robot i's own velocity when alone."""
    pos = np.asarray(positions, dtype=float)
    vel = np.asarray(velocities, dtype=float)
    nb = neighborhood(pos, i, r_align)
    if nb.size == 0:
        return vel[i].copy()
    return vel[nb].mean(axis=0)


def cohesion_velocity(positions, i: int, r_coh: float) -> np.ndarray:
    """Mean offset toward the neighborhood center; zero when alone."""
    pos = np.asarray(positions, dtype=float)
    nb = neighborhood(pos, i, r_coh)
    if nb.size == 0:
        return np.zeros(3)
    return (pos[nb] - pos[i]).mean(axis=0)


def follower_control(positions, velocities, i: int, params: FollowerParams,
                     v_max: float) -> np.ndarray:
    """Weighted sum of the three flocking components, norm-clipped to v_max."""
    u = (params.alpha_sep * separation_velocity(positions, i, params.r_sep)
         + params.alpha_align * alignment_velocity(positions, velocities, i,
                                                   params.r_align)
         + params.alpha_coh * cohesion_velocity(positions, i, params.r_coh))
    return clip_speed(u, v_max)


def leader_control(positions, velocities, i: int, params: LeaderParams,
                   traj: ReferenceTrajectory, arc: float, lookahead: float,
                   v_max: float) -> np.ndarray:
    """Follower control with the leader's own gains plus look-ahead tracking.

    The tracking term points at the path point `lookahead` meters beyond the
    current arc projection and is dropped when the leader sits on its target.
    """
    pos = np.asarray(positions, dtype=float)
    u = (params.alpha_sep * separation_velocity(pos, i, params.r_sep)
         + params.alpha_align * alignment_velocity(pos, velocities, i,
                                                   params.r_align)
         + params.alpha_coh * cohesion_velocity(pos, i, params.r_coh))
    target = trajectory_point(traj, arc + lookahead)
    tv = target - pos[i]
    tn = np.linalg.norm(tv)
    if tn >= _TRACK_EPS:
        u = u + params.omega * tv / tn
    return clip_speed(u, v_max)


def clip_speed(u: np.ndarray, v_max: float) -> np.ndarray:
    speed = np.linalg.norm(u)
    if speed > v_max:
        return u * (v_max / speed)
    return u


def trajectory_point(traj: ReferenceTrajectory, arc):
    """Point(s) on the reference path at the given arc position(s).

    For 'line' and 'sine' the parameter runs along the base heading; for
    'chevron' it is arc length along the zigzag legs. Scalar arc gives a
    (3,) point, an array gives (len, 3).
    """
    arc_arr = np.asarray(arc, dtype=float)
    scalar = arc_arr.ndim == 0
    a = np.atleast_1d(arc_arr)
    hx, hy = traj.heading
    ox, oy = traj.origin
    if traj.kind == "line":
        x = ox + a * hx
        y = oy + a * hy
    elif traj.kind == "sine":
        lat = traj.amplitude * np.sin(2.0 * np.pi * a / traj.period_length)
        x = ox + a * hx - lat * hy
        y = oy + a * hy + lat * hx
    elif traj.kind == "chevron":
        c = math.cos(math.pi / 4)
        d0 = (c * (hx - hy), c * (hx + hy))      # heading rotated +45 deg
        d1 = (c * (hx + hy), c * (hy - hx))      # heading rotated -45 deg
        leg = np.floor(a / traj.period_length)
        within = a - leg * traj.period_length
        n_even = np.ceil(leg / 2.0)
        n_odd = np.floor(leg / 2.0)
        vx = traj.period_length * (n_even * d0[0] + n_odd * d1[0])
        vy = traj.period_length * (n_even * d0[1] + n_odd * d1[1])
        even = (leg % 2.0) == 0.0
        dx = np.where(even, d0[0], d1[0])
        dy = np.where(even, d0[1], d1[1])
        x = ox + vx + within * dx
        y = oy + vy + within * dy
    else:
        raise ValueError(f"unknown trajectory kind {traj.kind!r}")
    pts = np.stack([x, y, np.full_like(x, traj.altitude)], axis=-1)
    return pts[0] if scalar else pts


def advance_arc(traj: ReferenceTrajectory, point: np.ndarray, arc: float,
                window: float) -> float:
    """Monotone arc projection: the arc >= `arc` whose path point is nearest.

    Searches [arc, arc + window] by iterated grid refinement, so it is
    deterministic and needs no smoothness (chevron corners included).
    """
    lo = arc
    span = window
    best = arc
    for _ in range(4):
        grid = lo + np.linspace(0.0, span, 33)
        pts = trajectory_point(traj, grid)
        d2 = ((pts - point) ** 2).sum(axis=1)
        k = int(np.argmin(d2))
        best = float(grid[k])
        cell = span / 32.0
        lo = max(arc, best - cell)
        span = 2.0 * cell
    return best


def initial_placement(config: SimConfig, traj: ReferenceTrajectory,
                      init_x: float, init_y: float,
                      leader_index: int | None = None):
    """Initial positions: follower grid plus offset leader, velocities zero.

    Followers occupy a square grid (spacing formation_spacing) centered on
    the trajectory origin, minus the cell nearest the center; the leader sits
    at (init_x, init_y) times the grid half-extent from the center, nudged
    +x by a tenth of the spacing while it coincides with a follower. Robot
    slot `leader_index` (default N-1) holds the leader.

    Returns (positions (N, 3), leader_index).
    """
    n = config.n_robots
    if n < 2:
        raise ValueError("need at least 2 robots")
    if leader_index is None:
        leader_index = n - 1
    if not 0 <= leader_index < n:
        raise ValueError("leader_index out of range")
    side = math.ceil(math.sqrt(n))
    spacing = config.formation_spacing
    half = (side - 1) / 2.0
    cells = [((gx - half) * spacing, (gy - half) * spacing)
             for gy in range(side) for gx in range(side)]
    center_cell = min(range(len(cells)),
                      key=lambda k: cells[k][0] ** 2 + cells[k][1] ** 2)
    cells.pop(center_cell)
    follower_cells = cells[:n - 1]
    extent = half * spacing if side > 1 else spacing
    lx = init_x * extent
    ly = init_y * extent
    while any(math.hypot(lx - cx, ly - cy) < _COINCIDE_EPS
              for cx, cy in follower_cells):
        lx += spacing / 10.0
    ox, oy = traj.origin
    z = traj.altitude
    positions = np.empty((n, 3))
    follower_slots = [k for k in range(n) if k != leader_index]
    for slot, (cx, cy) in zip(follower_slots, follower_cells):
        positions[slot] = (ox + cx, oy + cy, z)
    positions[leader_index] = (ox + lx, oy + ly, z)
    return positions, leader_index


def simulate(chromosome: Chromosome, traj: ReferenceTrajectory,
             config: SimConfig) -> SimTrace:
    """Integrate the flock forward and record q = round(T * f_R) snapshots.

    Forward Euler with synchronous control updates: every control for one
    step is computed from the same snapshot, then positions advance by
    u * dt and velocities take the new control. Snapshot k holds the state
    at time k * dt. The leader's slot among the robot indices is drawn from
    config.seed so the label carries no positional artifact; everything else
    is deterministic.
    """
    config.validate()
    traj.validate()
    chromosome.validate(config.sensing_range)
    q = config.n_steps
    if q < 1:
        raise ValueError("duration too short for one snapshot")
    n = config.n_robots
    dt = 1.0 / config.control_rate
    rng = np.random.default_rng(config.seed)
    leader_index = int(rng.integers(n))
    pos, leader_index = initial_placement(
        config, traj, chromosome.leader.init_x, chromosome.leader.init_y,
        leader_index)
    vel = np.zeros((n, 3))

    f_gains, f_radii = chromosome.follower.gain_arrays()
    l_gains, l_radii = chromosome.leader.gain_arrays()
    omega = chromosome.leader.omega
    search_window = 2.0 * (config.lookahead + config.v_max * dt)

    positions = np.empty((q, n, 3))
    velocities = np.empty((q, n, 3))
    arcs = np.empty(q)
    arc = 0.0
    for k in range(q):
        arc = advance_arc(traj, pos[leader_index], arc, search_window)
        arcs[k] = arc
        positions[k] = pos
        velocities[k] = vel
        if k == q - 1:
            break
        target = trajectory_point(traj, arc + config.lookahead)
        u = _kernels.flock_controls(pos, vel, f_gains, f_radii,
                                    l_gains, l_radii, omega,
                                    leader_index, target, config.v_max)
        pos = pos + u * dt
        vel = u
        if not np.isfinite(pos).all():
            bad = int(np.flatnonzero(~np.isfinite(pos).all(axis=1))[0])
            raise SimulationError(k + 1, bad)
    return SimTrace(positions, velocities, arcs, leader_index, config)


def extract_windows(trace: SimTrace, window_seconds: float,
                    sample_rate: float, center: bool = True
                    ) -> list[ObservationWindow]:
    """Slice a trace into non-overlapping labeled observation windows.

    The trace is resampled at `sample_rate` (nearest snapshot) and chopped
    into consecutive windows of round(window_seconds * sample_rate) samples;
    a partial tail is dropped. With center=True each window is shifted by
    the flock centroid of its first sample, making the observation
    translation-invariant.
    """
    f_r = trace.config.control_rate
    if sample_rate > f_r:
        raise ValueError("sample_rate must not exceed the control rate")
    n_samples = int(round(window_seconds * sample_rate))
    if n_samples < 1:
        raise ValueError("window must cover at least one sample")
    stride = f_r / sample_rate
    indices = []
    m = 0
    while True:
        k = int(round(m * stride))
        if k >= trace.q:
            break
        indices.append(k)
        m += 1
    count = len(indices) // n_samples
    windows = []
    for w in range(count):
        idx = indices[w * n_samples:(w + 1) * n_samples]
        block = trace.positions[idx]                 # (samples, N, 3)
        data = np.ascontiguousarray(block.transpose(1, 2, 0))  # (N, 3, samples)
        if center:
            centroid = block[0].mean(axis=0)
            data = data - centroid[None, :, None]
        windows.append(ObservationWindow(data=data, label=trace.leader_index))
    return windows


def center_windows(windows: list[ObservationWindow]) -> list[ObservationWindow]:
    """Apply the first-sample centroid shift to raw (uncentered) windows."""
    out = []
    for w in windows:
        centroid = w.data[:, :, 0].mean(axis=0)
        out.append(ObservationWindow(data=w.data - centroid[None, :, None],
                                     label=w.label))
    return out


WINDOWS_MAGIC = b"PFWD"
WINDOWS_VERSION = 1


def save_windows(windows: list[ObservationWindow], path) -> None:
    """Binary dump of observation windows: shape header plus labeled blocks.

    Layout: magic, version, N, 3, channels, count (all little-endian),
    then per window a uint32 label and the row-major float64 payload.
    """
    if not windows:
        raise ValueError("no windows to save")
    n, three, channels = windows[0].data.shape
    with open(path, "wb") as fh:
        fh.write(WINDOWS_MAGIC)
        fh.write(struct.pack("<IIIIQ", WINDOWS_VERSION, n, three, channels,
                             len(windows)))
        for w in windows:
            if w.data.shape != (n, three, channels):
                raise ValueError(
                    f"inconsistent window shape {w.data.shape}, "
                    f"expected {(n, three, channels)}")
            fh.write(struct.pack("<I", w.label))
            fh.write(np.ascontiguousarray(w.data, dtype="<f8").tobytes())


def load_windows(path) -> list[ObservationWindow]:
    """Read a window dump written by save_windows; round-trip is bit-exact."""

    def read_exact(fh, count):
        data = fh.read(count)
        if len(data) != count:
            raise ValueError("truncated window file")
        return data

    with open(path, "rb") as fh:
        if read_exact(fh, 4) != WINDOWS_MAGIC:
            raise ValueError("bad magic bytes: not a window dump")
        version, n, three, channels, count = struct.unpack(
            "<IIIIQ", read_exact(fh, 24))
        if version != WINDOWS_VERSION:
            raise ValueError(f"unsupported window dump version {version}")
        windows = []
        block = n * three * channels * 8
        for _ in range(count):
            (label,) = struct.unpack("<I", read_exact(fh, 4))
            data = np.frombuffer(read_exact(fh, block), dtype="<f8")
            windows.append(ObservationWindow(
                data=data.reshape(n, three, channels).astype(float),
                label=int(label)))
    return windows


def trace_to_csv(trace: SimTrace, path) -> None:
    """Write one row per robot per snapshot; time printed to microseconds."""
    times = trace.times
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(TRACE_HEADER)
        for k in range(trace.q):
            t = f"{times[k]:.6f}"
            for i in range(trace.n_robots):
                p = trace.positions[k, i]
                v = trace.velocities[k, i]
                writer.writerow([t, i, int(i == trace.leader_index),
                                 repr(float(p[0])), repr(float(p[1])),
                                 repr(float(p[2])), repr(float(v[0])),
                                 repr(float(v[1])), repr(float(v[2]))])


def trace_from_csv(path, config: SimConfig | None = None) -> SimTrace:
    """Rebuild a trace from its CSV export.

    Arc positions are not stored in the CSV and come back as NaN; the config
    echo is reconstructed from the file (and `config`, when given, supplies
    the fields the CSV cannot carry).
    """
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if tuple(header) != TRACE_HEADER:
            raise ValueError(f"unexpected trace header {header!r}")
        rows = [(float(r[0]), int(r[1]), int(r[2]),
                 float(r[3]), float(r[4]), float(r[5]),
                 float(r[6]), float(r[7]), float(r[8])) for r in reader]
    if not rows:
        raise ValueError("empty trace file")
    n = max(r[1] for r in rows) + 1
    q, rem = divmod(len(rows), n)
    if rem:
        raise ValueError("row count is not a multiple of the robot count")
    positions = np.empty((q, n, 3))
    velocities = np.empty((q, n, 3))
    leader_index = 0
    for k in range(q):
        for i in range(n):
            r = rows[k * n + i]
            if r[1] != i:
                raise ValueError("robot ids out of order")
            if r[2]:
                leader_index = i
            positions[k, i] = r[3:6]
            velocities[k, i] = r[6:9]
    if config is not None:
        rate = config.control_rate
        config = dataclasses.replace(config, n_robots=n, duration=q / rate)
    else:
        rate = 1.0 / (rows[n][0] - rows[0][0]) if q > 1 else 1.0
        config = SimConfig(n_robots=n, duration=q / rate, control_rate=rate)
    return SimTrace(positions, velocities, np.full(q, np.nan),
                    leader_index, config)
