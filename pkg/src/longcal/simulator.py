"""Ground-truth longitudinal plant, scripted data generation, and tracking runs.

The plant is a point-mass vehicle: a monotone piecewise-linear pedal-to-force
map (separate throttle and brake shapes), quadratic drag, constant rolling
resistance, an actuator FIFO delay, and additive IMU noise.  It stands in
for the real vehicle both as a data source for offline training and as the
closed-loop target that scores calibration quality by speed and station
error under configurable load.
"""

from __future__ import annotations

from bisect import bisect_right
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .online import OnlineCalibrator, OnlineConfig, compute_gain
from .preprocess import MODE_AUTO, MODE_MANUAL, DriveLog, OnlinePreprocessor
from .table import CalibrationTable, default_cmd_grid, default_speed_grid, invert, lookup_acc, lookup_cmd


class Diverged(RuntimeError):
    """Sustained speed error beyond any plausible tracking failure."""


class EmptyTrace(ValueError):
    """Metrics requested over an empty trace."""


def _power_law_map(f_max: float, exponent: float = 1.2, step: float = 5.0):
    """Sample F = f_max * (cmd/100)^exponent as a piecewise-linear map."""
    breaks = np.arange(0.0, 100.0 + step / 2, step)
    force = f_max * (breaks / 100.0) ** exponent
    return breaks, force


@dataclass(frozen=True)
class PlantConfig:
    """Physical constants of the simulated vehicle."""

    mass: float
    load: float = 0.0
    throttle_breaks: np.ndarray = None
    throttle_force: np.ndarray = None  # N, monotone over throttle_breaks
    brake_breaks: np.ndarray = None
    brake_force: np.ndarray = None  # N opposing motion, monotone over |cmd|
    drag: float = 0.0  # N s^2 / m^2
    rolling: float = 0.0  # N
    delay: float = 0.2  # s, actuator FIFO
    noise_std: float = 0.05  # m/s^2 IMU noise
    sample_rate: float = 100.0  # Hz
    v_max: float = 3.0  # m/s

    def __post_init__(self):
        if self.mass <= 0 or self.load < 0:
            raise ValueError("mass must be positive and load non-negative")
        if self.delay < 0:
            raise ValueError("delay must be >= 0")
        for name in ("throttle_breaks", "throttle_force", "brake_breaks", "brake_force"):
            arr = np.asarray(getattr(self, name), dtype=float)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        for breaks, force in (
            (self.throttle_breaks, self.throttle_force),
            (self.brake_breaks, self.brake_force),
        ):
            if len(breaks) != len(force) or len(breaks) < 2:
                raise ValueError("force maps need matching breakpoints")
            if np.any(np.diff(breaks) <= 0) or np.any(np.diff(force) < 0):
                raise ValueError("force maps must be monotone")

    @property
    def total_mass(self) -> float:
        return self.mass + self.load

    def force(self, cmd: float) -> float:
        """Signed longitudinal force for a signed command."""
        if cmd > 0:
            return float(np.interp(cmd, self.throttle_breaks, self.throttle_force))
        if cmd < 0:
            return -float(np.interp(-cmd, self.brake_breaks, self.brake_force))
        return 0.0

    def steady_state_acc(self, cmd, v):
        """Analytic acceleration holding ``cmd`` at speed ``v``.

        At standstill the vehicle cannot be pushed backwards: brake or
        insufficient throttle yields zero.
        """
        cmd = np.asarray(cmd, dtype=float)
        v = np.asarray(v, dtype=float)
        force = np.where(
            cmd > 0,
            np.interp(np.abs(cmd), self.throttle_breaks, self.throttle_force),
            -np.interp(np.abs(cmd), self.brake_breaks, self.brake_force),
        )
        a = (force - self.drag * v**2 - self.rolling) / self.total_mass
        a = np.where(v > 0, a, np.maximum(a, 0.0))
        return float(a) if a.ndim == 0 else a

    def table_grids(self):
        return default_cmd_grid(), default_speed_grid(self.v_max)

    def true_table(self) -> CalibrationTable:
        """Steady-state acceleration over the default grids (the oracle)."""
        cmd_grid, speed_grid = self.table_grids()
        acc = self.steady_state_acc(cmd_grid[:, None], speed_grid[None, :])
        return CalibrationTable(speed_grid, cmd_grid, acc)


def ax1(load: float = 0.0) -> PlantConfig:
    """Small electric cargo vehicle: 300 kg curb weight, 3 m/s top speed."""
    tb, tf = _power_law_map(1200.0)
    bb, bf = _power_law_map(1800.0)
    return PlantConfig(
        mass=300.0,
        load=load,
        throttle_breaks=tb,
        throttle_force=tf,
        brake_breaks=bb,
        brake_force=bf,
        drag=18.0,
        rolling=30.0,
        v_max=3.0,
    )


def mkz(load: float = 200.0) -> PlantConfig:
    """Hybrid passenger sedan: 1769 kg curb weight, 10 m/s test ceiling."""
    tb, tf = _power_law_map(7200.0)
    bb, bf = _power_law_map(11000.0)
    return PlantConfig(
        mass=1769.0,
        load=load,
        throttle_breaks=tb,
        throttle_force=tf,
        brake_breaks=bb,
        brake_force=bf,
        drag=18.0,
        rolling=180.0,
        v_max=10.0,
    )


PRESETS = {"ax1": ax1, "mkz": mkz}


@dataclass
class PlantState:
    """Kinematic state plus the in-flight delayed commands."""

    t: float = 0.0
    v: float = 0.0
    station: float = 0.0
    acc: float = 0.0
    queue: deque = field(default_factory=deque)


class Plant:
    """Steps the vehicle one control period at a time."""

    def __init__(self, config: PlantConfig):
        self.config = config
        self.dt = 1.0 / config.sample_rate
        delay_steps = int(round(config.delay * config.sample_rate))
        self.state = PlantState(queue=deque([0.0] * delay_steps))
        # plain-float copies of the force map for the per-cycle hot path
        self._tb = config.throttle_breaks.tolist()
        self._tf = config.throttle_force.tolist()
        self._bb = config.brake_breaks.tolist()
        self._bf = config.brake_force.tolist()
        self._inv_mass = 1.0 / config.total_mass

    def _force(self, cmd: float) -> float:
        if cmd == 0.0:
            return 0.0
        breaks, force = (self._tb, self._tf) if cmd > 0 else (self._bb, self._bf)
        x = abs(cmd)
        if x >= breaks[-1]:
            f = force[-1]
        elif x <= breaks[0]:
            f = force[0]
        else:
            k = bisect_right(breaks, x) - 1
            w = (x - breaks[k]) / (breaks[k + 1] - breaks[k])
            f = force[k] + w * (force[k + 1] - force[k])
        return f if cmd > 0 else -f

    def step(self, cmd: float) -> PlantState:
        """Advance one period with ``cmd`` entering the actuator queue."""
        s = self.state
        c = self.config
        if s.queue:
            s.queue.append(cmd)
            eff = s.queue.popleft()
        else:
            eff = cmd
        v = s.v
        a = (self._force(eff) - c.drag * v * v - c.rolling) * self._inv_mass
        v_new = v + a * self.dt
        if v_new < 0.0:
            v_new = 0.0
        s.acc = (v_new - v) / self.dt
        s.v = v_new
        s.station += v_new * self.dt
        s.t += self.dt
        return s


# ---------------------------------------------------------------------------
# scripted driving for offline data generation
# ---------------------------------------------------------------------------

def generate_drive_log(
    config: PlantConfig, duration: float = 1200.0, seed: int = 0
) -> DriveLog:
    """Emulate manual driving that sweeps the command/speed envelope.

    The scripted driver alternates accelerate/brake/coast dwells with
    randomised commands and speed targets, pinning the pedals to their
    extremes now and then, so most table cells collect samples.  A few
    dwells steer (exercising the downstream steering gate); IMU noise is
    added per the config.  Deterministic for a given seed.
    """
    rng = np.random.default_rng(seed)
    plant = Plant(config)
    dt = plant.dt
    n = int(round(duration * config.sample_rate))

    t_col = np.empty(n)
    cmd_col = np.empty(n)
    v_col = np.empty(n)
    acc_col = np.empty(n)
    theta_col = np.empty(n)
    noise = rng.normal(0.0, config.noise_std, n) if config.noise_std > 0 else np.zeros(n)

    k = 0
    cmd = 0.0
    theta_target = 0.0
    while k < n:
        v = plant.state.v
        frac = v / config.v_max
        # phase choice leans on the current speed so the envelope gets swept
        r = rng.random()
        if frac < 0.07:
            kind = "throttle" if r < 0.8 else ("brake" if r < 0.9 else "coast")
        elif frac > 0.93:
            kind = "brake" if r < 0.6 else ("coast" if r < 0.9 else "throttle")
        else:
            kind = "throttle" if r < 0.45 else ("brake" if r < 0.8 else "coast")
        if kind == "throttle":
            cmd = 100.0 if rng.random() < 0.08 else rng.uniform(5.0, 100.0)
            dwell = rng.uniform(0.5, 2.0)
        elif kind == "brake":
            cmd = -100.0 if rng.random() < 0.08 else rng.uniform(-100.0, -5.0)
            dwell = rng.uniform(0.5, 1.6)
        else:
            cmd = rng.uniform(-4.0, 4.0)
            dwell = rng.uniform(0.4, 1.2)
        theta_target = rng.uniform(10.0, 30.0) * rng.choice([-1.0, 1.0]) if rng.random() < 0.04 else 0.0
        steps = max(1, int(round(dwell / dt)))
        for _ in range(steps):
            if k >= n:
                break
            s = plant.step(cmd)
            t_col[k] = k * dt
            cmd_col[k] = cmd
            v_col[k] = s.v
            acc_col[k] = s.acc + noise[k]
            theta_col[k] = theta_target + rng.normal(0.0, 0.5)
            k += 1
            if cmd > 0.0 and s.v > config.v_max:
                break  # a real driver respects the vehicle's speed limit

    mode = np.array([MODE_MANUAL] * n, dtype=object)
    return DriveLog(t_col, cmd_col, v_col, acc_col, theta_col, mode)


def coverage_report(log: DriveLog, cmd_grid=None, speed_grid=None, config: PlantConfig | None = None):
    """Fraction of grid cells visited by at least one log sample."""
    if cmd_grid is None or speed_grid is None:
        cmd_grid, speed_grid = config.table_grids()
    from .preprocess import nearest_cell_index

    ci = nearest_cell_index(np.asarray(cmd_grid, float), log.cmd)
    vi = nearest_cell_index(np.asarray(speed_grid, float), log.v)
    visited = np.zeros((len(cmd_grid), len(speed_grid)), dtype=bool)
    visited[ci, vi] = True
    return float(visited.mean()), visited


# ---------------------------------------------------------------------------
# speed profiles and the tracking loop
# ---------------------------------------------------------------------------

class SpeedProfile:
    """Piecewise-linear desired speed with its slope as desired acceleration."""

    def __init__(self, t_points, v_points):
        self.t_points = np.asarray(t_points, dtype=float)
        self.v_points = np.asarray(v_points, dtype=float)
        if len(self.t_points) != len(self.v_points) or len(self.t_points) < 2:
            raise ValueError("profile needs matching t/v breakpoints")
        if np.any(np.diff(self.t_points) <= 0):
            raise ValueError("profile times must increase")
        self._slopes = np.diff(self.v_points) / np.diff(self.t_points)
        self._t_list = self.t_points.tolist()
        self._v_list = self.v_points.tolist()
        self._s_list = self._slopes.tolist()

    @property
    def duration(self) -> float:
        return float(self.t_points[-1])

    def sample(self, t: float):
        """Desired (speed, acceleration) at time t; flat beyond the ends."""
        pts, vals, slopes = self._t_list, self._v_list, self._s_list
        if t <= pts[0]:
            return vals[0], 0.0
        if t >= pts[-1]:
            return vals[-1], 0.0
        lo, hi = 0, len(pts) - 1
        while hi - lo > 1:
            mid = (lo + hi) // 2
            if pts[mid] <= t:
                lo = mid
            else:
                hi = mid
        return vals[lo] + slopes[lo] * (t - pts[lo]), slopes[lo]


def trapezoid_profile(
    v_max: float, duration: float, accel: float | None = None, seed: int | None = None
) -> SpeedProfile:
    """Repeating accelerate/cruise/brake/stop cycles over the speed range.

    Peak speeds rotate through a spread of the usable range so every band
    of the table sees traffic.  ``accel`` is the ramp magnitude (default
    scaled to the vehicle's envelope).
    """
    if accel is None:
        accel = 0.13 * v_max  # 0.4 m/s^2 on a 3 m/s vehicle
    peaks = [0.5, 0.85, 1.0, 0.65]
    t_pts = [0.0]
    v_pts = [0.0]
    k = 0
    while t_pts[-1] < duration:
        peak = peaks[k % len(peaks)] * v_max
        ramp = peak / accel
        t_pts.append(t_pts[-1] + ramp)
        v_pts.append(peak)
        t_pts.append(t_pts[-1] + 8.0)  # cruise
        v_pts.append(peak)
        t_pts.append(t_pts[-1] + ramp)
        v_pts.append(0.0)
        t_pts.append(t_pts[-1] + 2.0)  # stand still
        v_pts.append(0.0)
        k += 1
    return SpeedProfile(t_pts, v_pts)


@dataclass
class TrackingMetrics:
    """Aggregate speed and station error for one run."""

    speed_mae: float
    speed_rmse: float
    station_mae: float
    station_rmse: float

    def as_row(self):
        return [self.speed_mae, self.speed_rmse, self.station_mae, self.station_rmse]


@dataclass
class RunTrace:
    """Per-frame record of a closed-loop run."""

    t: np.ndarray
    v_des: np.ndarray
    v: np.ndarray
    station_des: np.ndarray
    station: np.ndarray
    cmd: np.ndarray

    @property
    def speed_error(self) -> np.ndarray:
        return self.v_des - self.v

    @property
    def station_error(self) -> np.ndarray:
        return self.station_des - self.station

    def __len__(self):
        return len(self.t)


def compute_metrics(trace: RunTrace) -> TrackingMetrics:
    """MAE and RMSE of the speed and station error series."""
    if len(trace) == 0:
        raise EmptyTrace("cannot aggregate an empty trace")
    ev = trace.speed_error
    es = trace.station_error
    return TrackingMetrics(
        speed_mae=float(np.abs(ev).mean()),
        speed_rmse=float(np.sqrt((ev**2).mean())),
        station_mae=float(np.abs(es).mean()),
        station_rmse=float(np.sqrt((es**2).mean())),
    )


@dataclass
class OnlineSessionEvent:
    """One admitted feedback event and the update it caused."""

    cycle: int
    t: float
    cmd_ref: float
    v_ref: float
    acc_ref: float
    acc_k: float
    gain: float
    updated_cells: int
    revision: int


@dataclass
class RunResult:
    metrics: TrackingMetrics
    trace: RunTrace
    table: CalibrationTable  # final controller table (adapted when online)
    events: list  # OnlineSessionEvent per published update
    update_seconds: np.ndarray  # latency of update_table + publish per event
    visited_cells: np.ndarray  # bool grid of cells with admitted feedback
    snapshots: list = field(default_factory=list)  # (cycle, table) pairs


KP = 0.8  # command % per m/s of speed error
KI = 0.1


def run_closed_loop(
    config: PlantConfig,
    table: CalibrationTable,
    profile: SpeedProfile,
    duration: float | None = None,
    online: OnlineConfig | None | bool = None,
    seed: int = 0,
    diverge_limit: float = 5.0,
    snapshot_every: int | None = None,
) -> RunResult:
    """Track the profile with feedforward from the table plus PI correction.

    With ``online`` set (an OnlineConfig, or True for defaults) the table
    adapts every cycle from gated feedback; otherwise it stays frozen.  The
    controller always reads the latest published snapshot.  Raises Diverged
    when the speed error exceeds ``diverge_limit`` for a sustained second.
    """
    import time as _time

    if online is True:
        online = OnlineConfig()
    duration = profile.duration if duration is None else duration
    plant = Plant(config)
    dt = plant.dt
    n = int(round(duration * config.sample_rate))
    rng = np.random.default_rng(seed)
    noise = rng.normal(0.0, config.noise_std, n) if config.noise_std > 0 else np.zeros(n)

    cal = OnlineCalibrator(table, online) if online else None
    static_inverse = invert(table)
    pre = OnlinePreprocessor(
        sample_rate=config.sample_rate,
        delay=config.delay,
        delta_cmd_gap=(online.delta_cmd_gap if online else 10.0),
    )

    cmd_grid, speed_grid = table.cmd_grid, table.speed_grid
    visited = np.zeros((len(cmd_grid), len(speed_grid)), dtype=bool)
    events: list[OnlineSessionEvent] = []
    latencies: list[float] = []
    snapshots: list[tuple[int, CalibrationTable]] = []

    t_col = np.empty(n)
    vdes_col = np.empty(n)
    v_col = np.empty(n)
    cmd_col = np.empty(n)
    station_des = 0.0
    sdes_col = np.empty(n)
    s_col = np.empty(n)

    integral = 0.0
    diverged_since = None

    for k in range(n):
        t = k * dt
        v_des, acc_des = profile.sample(t)
        if cal is not None:
            snap_table, snap_inverse, _rev = cal.state.snapshot()
        else:
            snap_table, snap_inverse = table, static_inverse
        v = plant.state.v
        err = v_des - v
        integral += err * dt
        ff = lookup_cmd(snap_inverse, v, acc_des)
        cmd = ff + KP * err + KI * integral
        if cmd > 100.0:
            cmd = 100.0
        elif cmd < -100.0:
            cmd = -100.0
        acc_pred = lookup_acc(snap_table, cmd, v)

        s = plant.step(cmd)
        acc_meas = s.acc + noise[k]
        feedback = pre.push(
            t, cmd=cmd, v=s.v, acc_meas=acc_meas, acc_expected=acc_pred,
            v_expected=v_des, mode=MODE_AUTO,
        )
        if cal is not None:
            before_rev = cal.revision
            t0 = _time.perf_counter()
            updated = cal.step(v_des, s.v, feedback)
            elapsed = _time.perf_counter() - t0
            if updated:
                latencies.append(elapsed)
                ci = int(np.argmin(np.abs(cmd_grid - feedback.cmd_ref)))
                vi = int(np.argmin(np.abs(speed_grid - feedback.v_ref)))
                visited[ci, vi] = True
                in_win = int(
                    (np.abs(feedback.cmd_ref - cmd_grid) <= cal.cfg.delta_cmd).sum()
                    * len(speed_grid)
                    + (np.abs(feedback.v_ref - speed_grid) <= cal.cfg.delta_v).sum()
                    * len(cmd_grid)
                )
                events.append(
                    OnlineSessionEvent(
                        cycle=cal.state.cycle,
                        t=t,
                        cmd_ref=feedback.cmd_ref,
                        v_ref=feedback.v_ref,
                        acc_ref=feedback.acc_ref,
                        acc_k=feedback.acc_k,
                        gain=compute_gain(feedback.acc_ref, feedback.acc_k),
                        updated_cells=in_win,
                        revision=cal.revision,
                    )
                )
                assert cal.revision == before_rev + 1
        elif feedback is not None:
            ci = int(np.argmin(np.abs(cmd_grid - feedback.cmd_ref)))
            vi = int(np.argmin(np.abs(speed_grid - feedback.v_ref)))
            visited[ci, vi] = True

        station_des += v_des * dt
        t_col[k] = t
        vdes_col[k] = v_des
        v_col[k] = s.v
        cmd_col[k] = cmd
        sdes_col[k] = station_des
        s_col[k] = s.station

        if abs(v_des - s.v) > diverge_limit:
            if diverged_since is None:
                diverged_since = t
            elif t - diverged_since >= 1.0:
                raise Diverged(
                    f"speed error above {diverge_limit} m/s for 1 s at t={t:.2f}s"
                )
        else:
            diverged_since = None

        if snapshot_every and (k + 1) % snapshot_every == 0 and cal is not None:
            snapshots.append((k + 1, cal.table))

    trace = RunTrace(
        t=t_col, v_des=vdes_col, v=v_col, station_des=sdes_col, station=s_col, cmd=cmd_col
    )
    return RunResult(
        metrics=compute_metrics(trace),
        trace=trace,
        table=cal.table if cal is not None else table,
        events=events,
        update_seconds=np.asarray(latencies),
        visited_cells=visited,
        snapshots=snapshots,
    )
