"""Data cleaning for calibration: offline log preparation and online feedback gating.

Offline, raw drive logs pass through a fixed pipeline: steering gate, mean
filter on the IMU channel, grid binning with uniform per-cell downsampling
and per-cell outlier removal.  Online, per-cycle feedback is delay-aligned
with the actuator, low-pass filtered, and admitted only when the recent
command history is steady and the speed/acceleration errors agree in sign.
"""

from __future__ import annotations

import csv
import io
from collections import deque
from dataclasses import dataclass, field

import numpy as np
from scipy.signal import butter, group_delay, lfilter, lfilter_zi

MODE_MANUAL = "MANUAL"
MODE_AUTO = "AUTO"

LOG_HEADER = ["t", "cmd", "v", "acc", "theta", "mode"]


class WindowTooLarge(ValueError):
    """Mean filter window exceeds the series length."""


class InvalidRate(ValueError):
    """Sample rate too low for the filter cutoff."""


class NoMatch(ValueError):
    """No usable counterpart frame when aligning two streams."""


class InsufficientHistory(ValueError):
    """Command history does not cover the consistency window."""


@dataclass(frozen=True)
class DriveSample:
    """One log frame: time, signed command %, speed, IMU acceleration, steering, mode."""

    t: float
    cmd: float
    v: float
    acc: float
    theta: float
    mode: str = MODE_MANUAL


class DriveLog:
    """Column-oriented drive log with CSV round-trip.

    Columns follow the interchange header ``t,cmd,v,acc,theta,mode``;
    timestamps must be strictly increasing.
    """

    def __init__(self, t, cmd, v, acc, theta, mode):
        self.t = np.asarray(t, dtype=float)
        self.cmd = np.asarray(cmd, dtype=float)
        self.v = np.asarray(v, dtype=float)
        self.acc = np.asarray(acc, dtype=float)
        self.theta = np.asarray(theta, dtype=float)
        self.mode = np.asarray(mode, dtype=object)
        n = len(self.t)
        if not all(len(col) == n for col in (self.cmd, self.v, self.acc, self.theta, self.mode)):
            raise ValueError("all log columns must have equal length")
        if n and np.any(np.diff(self.t) <= 0):
            raise ValueError("timestamps must be strictly increasing")
        for col in (self.t, self.cmd, self.v, self.acc, self.theta):
            if not np.all(np.isfinite(col)):
                raise ValueError("log values must be finite")

    def __len__(self):
        return len(self.t)

    def samples(self):
        for i in range(len(self)):
            yield DriveSample(
                t=float(self.t[i]),
                cmd=float(self.cmd[i]),
                v=float(self.v[i]),
                acc=float(self.acc[i]),
                theta=float(self.theta[i]),
                mode=str(self.mode[i]),
            )

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(LOG_HEADER)
        for i in range(len(self)):
            writer.writerow(
                [
                    "%.9g" % self.t[i],
                    "%.9g" % self.cmd[i],
                    "%.9g" % self.v[i],
                    "%.9g" % self.acc[i],
                    "%.9g" % self.theta[i],
                    str(self.mode[i]),
                ]
            )
        return buf.getvalue()

    def save(self, path):
        with open(path, "w", newline="") as fh:
            fh.write(self.to_csv())

    @classmethod
    def from_csv(cls, text: str) -> "DriveLog":
        reader = csv.reader(io.StringIO(text))
        header = next(reader, None)
        if header != LOG_HEADER:
            raise ValueError(f"expected drive log header {LOG_HEADER}, got {header}")
        cols = {name: [] for name in LOG_HEADER}
        for row in reader:
            if not row:
                continue
            for name, value in zip(LOG_HEADER, row):
                cols[name].append(value)
        return cls(
            t=np.array(cols["t"], dtype=float),
            cmd=np.array(cols["cmd"], dtype=float),
            v=np.array(cols["v"], dtype=float),
            acc=np.array(cols["acc"], dtype=float),
            theta=np.array(cols["theta"], dtype=float),
            mode=np.array(cols["mode"], dtype=object),
        )

    @classmethod
    def load(cls, path) -> "DriveLog":
        with open(path) as fh:
            return cls.from_csv(fh.read())


# ---------------------------------------------------------------------------
# offline cleaning
# ---------------------------------------------------------------------------

def mean_filter(series, window: int) -> np.ndarray:
    """Sliding mean over ``window`` consecutive samples.

    Returns the means of every full window in order (length
    ``len(series) - window + 1``); the value at output position k summarises
    the window starting at input position k and stands in for the sample
    that follows it.  ``window=1`` reproduces the input values.
    """
    series = np.asarray(series, dtype=float)
    if window < 1:
        raise ValueError("window must be >= 1")
    if window > len(series):
        raise WindowTooLarge(f"window {window} > series length {len(series)}")
    kernel = np.full(window, 1.0 / window)
    return np.convolve(series, kernel, mode="valid")


def steering_gate(log: DriveLog, delta_steer: float) -> DriveLog:
    """Keep only frames with |steering angle| strictly below the threshold."""
    if delta_steer <= 0:
        raise ValueError("delta_steer must be positive")
    keep = np.abs(log.theta) < delta_steer
    return DriveLog(
        log.t[keep], log.cmd[keep], log.v[keep], log.acc[keep], log.theta[keep], log.mode[keep]
    )


def _outlier_mask(values: np.ndarray) -> np.ndarray:
    """Single-pass z-score mask: True where |x - mean| / std <= 1.

    Fewer than two samples, or zero spread, keeps everything.  The mean
    always survives its own cell, so a non-empty input never empties.
    """
    values = np.asarray(values, dtype=float)
    if len(values) < 2:
        return np.ones(len(values), dtype=bool)
    std = values.std()
    if std == 0.0:
        return np.ones(len(values), dtype=bool)
    return np.abs(values - values.mean()) / std <= 1.0


def remove_outliers(cell_values) -> np.ndarray:
    """Drop cell samples whose z-score exceeds one (computed once, not iterated)."""
    values = np.asarray(cell_values, dtype=float)
    return values[_outlier_mask(values)]


def nearest_cell_index(grid: np.ndarray, x) -> np.ndarray:
    """Index of the nearest grid value, clamped to the grid."""
    mids = 0.5 * (grid[1:] + grid[:-1])
    return np.searchsorted(mids, np.asarray(x, dtype=float))


@dataclass
class GridBins:
    """Per-cell acceleration samples keyed by (command index, speed index).

    ``cells[(i, j)]`` holds rows ``(cmd, v, acc)`` of every retained sample
    whose nearest grid point is ``(cmd_grid[i], speed_grid[j])``.
    """

    cmd_grid: np.ndarray
    speed_grid: np.ndarray
    cells: dict = field(default_factory=dict)

    def cell_accs(self, i: int, j: int) -> np.ndarray:
        rows = self.cells.get((i, j))
        return rows[:, 2] if rows is not None else np.empty(0)

    def counts(self) -> np.ndarray:
        out = np.zeros((len(self.cmd_grid), len(self.speed_grid)), dtype=int)
        for (i, j), rows in self.cells.items():
            out[i, j] = len(rows)
        return out

    def to_samples(self) -> np.ndarray:
        """All retained rows (cmd, v, acc) stacked in cell order."""
        if not self.cells:
            return np.empty((0, 3))
        return np.vstack([self.cells[key] for key in sorted(self.cells)])


def bin_and_uniform(
    log: DriveLog,
    cmd_grid,
    speed_grid,
    cap: int = 50,
    seed: int = 0,
    filtered_acc: np.ndarray | None = None,
) -> GridBins:
    """Assign samples to nearest grid cells, downsample, and de-outlier.

    Cells holding more than ``cap`` samples are reduced to ``cap`` by a
    seeded uniform draw without replacement, then each cell drops its
    z-score > 1 outliers.  ``filtered_acc`` substitutes a cleaned IMU
    channel (same length as the log) for the raw one.
    """
    if cap < 1:
        raise ValueError("cap must be >= 1")
    cmd_grid = np.asarray(cmd_grid, dtype=float)
    speed_grid = np.asarray(speed_grid, dtype=float)
    acc = log.acc if filtered_acc is None else np.asarray(filtered_acc, dtype=float)
    if len(acc) != len(log):
        raise ValueError("filtered_acc must match the log length")

    ci = nearest_cell_index(cmd_grid, log.cmd)
    vi = nearest_cell_index(speed_grid, log.v)
    cell_id = ci * len(speed_grid) + vi
    order = np.argsort(cell_id, kind="stable")
    sorted_ids = cell_id[order]
    bounds = np.flatnonzero(np.r_[True, np.diff(sorted_ids) != 0, True])

    rng = np.random.default_rng(seed)
    bins = GridBins(cmd_grid=cmd_grid, speed_grid=speed_grid)
    for a, b in zip(bounds[:-1], bounds[1:]):
        idx = order[a:b]
        if len(idx) > cap:
            pick = rng.choice(len(idx), size=cap, replace=False)
            idx = idx[np.sort(pick)]
        keep = _outlier_mask(acc[idx])
        idx = idx[keep]
        if len(idx) == 0:
            continue
        key = (int(ci[idx[0]]), int(vi[idx[0]]))
        bins.cells[key] = np.column_stack([log.cmd[idx], log.v[idx], acc[idx]])
    return bins


def offline_pipeline(
    log: DriveLog,
    cmd_grid,
    speed_grid,
    delta_steer: float = 10.0,
    mean_window: int = 5,
    cap: int = 50,
    seed: int = 0,
    delay: float = 0.2,
    cmd_gap: float = 10.0,
) -> GridBins:
    """Clean a raw log into binned training cells.

    Stages: the IMU channel is smoothed with the ``mean_window`` samples
    preceding each frame (on the contiguous raw stream, before any frame is
    dropped), each measurement frame is attributed to the command issued
    ``delay`` seconds earlier (the actuator is not instantaneous, and hard
    braking sweeps the speed range too fast for same-frame pairing to mean
    anything), transition frames whose issuing commands moved more than
    ``cmd_gap`` are discarded, steering frames are gated out, and the rest
    is binned with per-cell downsampling and outlier removal.
    """
    cmd_grid = np.asarray(cmd_grid, dtype=float)
    speed_grid = np.asarray(speed_grid, dtype=float)
    empty = GridBins(cmd_grid, speed_grid)
    if len(log) < 2:
        return empty
    dt = float(np.median(np.diff(log.t)))
    shift = int(round(delay / dt)) if delay > 0 else 0
    start = shift + mean_window
    if len(log) <= start:
        return empty
    smoothed = mean_filter(log.acc, mean_window)
    j = np.arange(start, len(log))
    # a frame is usable only when the commands that produced its smoothing
    # window were steady: cells visited solely mid-transition (full throttle
    # at standstill, say) cannot be measured and stay empty instead of
    # collecting smeared values
    windows = np.lib.stride_tricks.sliding_window_view(log.cmd, mean_window + 1)
    steady = np.ptp(windows, axis=1)[j - shift - mean_window] < cmd_gap
    j = j[steady]
    if len(j) == 0:
        return empty
    # braking at or near standstill pins the IMU at zero no matter the pedal:
    # those frames say nothing about the actuator, and the residual crawl
    # frames straddle the parked/rolling discontinuity, so both are dropped
    v_still = 0.5 * float(speed_grid[1] - speed_grid[0])
    informative = ~((log.cmd[j - shift] < 0.0) & (log.v[j] < v_still))
    j = j[informative]
    if len(j) == 0:
        return empty
    aligned = DriveLog(
        log.t[j],
        log.cmd[j - shift],
        log.v[j],
        smoothed[j - mean_window],
        log.theta[j],
        log.mode[j],
    )
    gated = steering_gate(aligned, delta_steer)
    if len(gated) == 0:
        return empty
    return bin_and_uniform(gated, cmd_grid, speed_grid, cap=cap, seed=seed)


# ---------------------------------------------------------------------------
# online feedback preparation
# ---------------------------------------------------------------------------

def align_delay(t_cmd, t_imu, delay: float = 0.2, max_mismatch: float | None = None):
    """Pair command frames with the IMU frame nearest ``t + delay``.

    Returns (command indices, imu indices).  Command frames whose shifted
    time falls past the end of the IMU stream produce no pair (the final
    ``delay`` seconds of a log are unusable); interior frames whose nearest
    neighbour is further than ``max_mismatch`` (default: half the median IMU
    period) raise NoMatch, since that means a hole in the log.
    """
    t_cmd = np.asarray(t_cmd, dtype=float)
    t_imu = np.asarray(t_imu, dtype=float)
    if delay < 0:
        raise ValueError("delay must be >= 0")
    if len(t_imu) < 2:
        raise NoMatch("imu stream too short to align")
    if max_mismatch is None:
        max_mismatch = 0.5 * float(np.median(np.diff(t_imu)))

    target = t_cmd + delay
    in_range = target <= t_imu[-1] + 1e-12
    cmd_idx = np.flatnonzero(in_range)
    pos = np.searchsorted(t_imu, target[cmd_idx])
    pos = np.clip(pos, 1, len(t_imu) - 1)
    left = np.abs(t_imu[pos - 1] - target[cmd_idx])
    right = np.abs(t_imu[pos] - target[cmd_idx])
    imu_idx = np.where(left <= right, pos - 1, pos)
    mism = np.abs(t_imu[imu_idx] - target[cmd_idx])
    if np.any(mism > max_mismatch + 1e-12):
        k = int(cmd_idx[np.argmax(mism)])
        raise NoMatch(f"command frame at t={t_cmd[k]:g}s has no imu frame within {max_mismatch:g}s")
    return cmd_idx, imu_idx


class ButterworthFilter:
    """Causal low-pass filter with per-stream state.

    Third order, 2 Hz cutoff by default, discretised by the bilinear
    transform.  State is primed to the steady-state response of the first
    sample, so a constant stream passes through unchanged from the start and
    the filter stays linear in its input.  One instance per stream; not
    thread-safe.
    """

    def __init__(self, sample_rate: float, cutoff_hz: float = 2.0, order: int = 3):
        if sample_rate <= 2.0 * cutoff_hz:
            raise InvalidRate(
                f"sample rate {sample_rate:g} Hz must exceed twice the "
                f"{cutoff_hz:g} Hz cutoff"
            )
        self.sample_rate = float(sample_rate)
        self.cutoff_hz = float(cutoff_hz)
        self.order = int(order)
        self._b, self._a = butter(order, cutoff_hz, fs=sample_rate, btype="low")
        self._zi_unit = lfilter_zi(self._b, self._a)
        self._bl = [float(c) for c in self._b]
        self._al = [float(c) for c in self._a]
        self._state = None

    def reset(self):
        self._state = None

    def __call__(self, x: float) -> float:
        # direct form II transposed, plain floats: called once per control
        # cycle, so this avoids the per-call cost of an lfilter round trip
        if self._state is None:
            self._state = [float(z) for z in self._zi_unit * x]
        b, a, z = self._bl, self._al, self._state
        n = len(z)
        y = b[0] * x + z[0]
        for i in range(1, n):
            z[i - 1] = b[i] * x - a[i] * y + z[i]
        z[n - 1] = b[n] * x - a[n] * y
        return y

    def apply(self, series) -> np.ndarray:
        series = np.asarray(series, dtype=float)
        if len(series) == 0:
            return series.copy()
        if self._state is None:
            self._state = [float(z) for z in self._zi_unit * series[0]]
        out, state = lfilter(self._b, self._a, series, zi=np.asarray(self._state))
        self._state = [float(z) for z in state]
        return out


def butterworth_lowpass(series, sample_rate: float, cutoff_hz: float = 2.0, order: int = 3):
    """One-shot causal Butterworth low-pass over a whole series."""
    return ButterworthFilter(sample_rate, cutoff_hz, order).apply(series)


def command_consistency_gate(
    t_hist, cmd_hist, t_ref: float, delta_cmd_gap: float, window: float = 0.1
) -> bool:
    """True when every command within +-window of t_ref stays near the reference.

    The reference command is the history value nearest ``t_ref``.  Raises
    InsufficientHistory when the history does not span the whole window.
    """
    t_hist = np.asarray(t_hist, dtype=float)
    cmd_hist = np.asarray(cmd_hist, dtype=float)
    if len(t_hist) == 0 or t_hist[0] > t_ref - window + 1e-9 or t_hist[-1] < t_ref + window - 1e-9:
        raise InsufficientHistory(
            f"history [{t_hist[0] if len(t_hist) else 'empty'}, "
            f"{t_hist[-1] if len(t_hist) else 'empty'}] does not cover "
            f"[{t_ref - window:g}, {t_ref + window:g}]"
        )
    k = int(np.argmin(np.abs(t_hist - t_ref)))
    cmd_ref = cmd_hist[k]
    sel = (t_hist >= t_ref - window - 1e-12) & (t_hist <= t_ref + window + 1e-12)
    return bool(np.all(np.abs(cmd_hist[sel] - cmd_ref) < delta_cmd_gap))


def speed_acc_consistency_gate(v_ref: float, v_k: float, a_ref: float, a_k: float) -> bool:
    """True when speed error and acceleration error share a sign.

    ``v_ref`` is the expected speed and ``v_k`` the measured one; likewise
    for the accelerations.  A zero product (either error exactly zero)
    fails: there is nothing consistent to learn from.
    """
    return (v_ref - v_k) * (a_ref - a_k) > 0.0


@dataclass(frozen=True)
class OnlineFeedback:
    """One admitted feedback event tying a past command to its measured effect.

    ``cmd_ref`` was issued ``delay`` seconds ago at speed ``v_ref``;
    ``acc_ref`` is the acceleration the table promised for it; ``acc_k`` is
    the filtered IMU acceleration now observed; ``v_k`` the current speed.
    """

    cmd_ref: float
    v_ref: float
    acc_ref: float
    acc_k: float
    v_k: float

    @property
    def a_k(self) -> float:
        return self.acc_k


class OnlinePreprocessor:
    """Stateful per-cycle gatekeeper turning raw frames into OnlineFeedback.

    Pipeline order per cycle: mode/steering gate, actuator-delay alignment
    (a FIFO of issued commands), causal Butterworth filtering of the IMU
    channel, command-consistency check over the +-window around the issue
    time, and the speed/acceleration sign-consistency check.
    """

    def __init__(
        self,
        sample_rate: float,
        delay: float = 0.2,
        delta_steer: float = 10.0,
        delta_cmd_gap: float = 10.0,
        window: float = 0.1,
    ):
        if delay < window:
            raise ValueError("delay must cover the consistency window")
        self.sample_rate = float(sample_rate)
        self.delay = float(delay)
        self.delta_steer = float(delta_steer)
        self.delta_cmd_gap = float(delta_cmd_gap)
        self.window = float(window)
        self._dt = 1.0 / float(sample_rate)
        self._filter = ButterworthFilter(sample_rate)
        # the causal low-pass delays the measured acceleration by its group
        # delay; fold that into the pairing constant so a command meets the
        # acceleration it actually caused, not a pre-command reading
        gd_samples = float(
            group_delay((self._filter._b, self._filter._a), w=[1e-9], fs=sample_rate)[1][0]
        )
        self.delay_total = self.delay + gd_samples * self._dt
        self._pending = deque()
        hist_len = int(round((self.delay_total + window) / self._dt)) + 4
        self._t_hist = deque(maxlen=hist_len)
        self._cmd_hist = deque(maxlen=hist_len)

    def push(
        self,
        t: float,
        cmd: float,
        v: float,
        acc_meas: float,
        acc_expected: float,
        v_expected: float,
        mode: str = MODE_AUTO,
        theta: float = 0.0,
    ) -> OnlineFeedback | None:
        """Feed one control-cycle frame; returns feedback once its delay matures.

        ``cmd`` is the command issued this cycle, ``acc_expected`` the
        acceleration the table predicts for it, ``v_expected`` the desired
        speed right now, and ``acc_meas`` the raw IMU reading.
        """
        acc_f = self._filter(acc_meas)
        auto = (mode == MODE_AUTO) and (abs(theta) < self.delta_steer)
        self._t_hist.append(t)
        self._cmd_hist.append(cmd)
        self._pending.append((t, cmd, v, acc_expected, auto))

        feedback = None
        while self._pending and self._pending[0][0] + self.delay_total <= t + 0.5 * self._dt:
            t_ref, cmd_ref, v_ref, acc_ref, issued_auto = self._pending.popleft()
            if not (auto and issued_auto):
                continue
            if not self._steady_history(t_ref):
                continue
            if not speed_acc_consistency_gate(v_expected, v, acc_ref, acc_f):
                continue
            feedback = OnlineFeedback(
                cmd_ref=cmd_ref, v_ref=v_ref, acc_ref=acc_ref, acc_k=acc_f, v_k=v
            )
        return feedback

    def _steady_history(self, t_ref: float) -> bool:
        # inline equivalent of command_consistency_gate over the history
        # deques (plain floats; this runs every control cycle)
        th, ch = self._t_hist, self._cmd_hist
        lo = t_ref - self.window
        hi = t_ref + self.window
        if not th or th[0] > lo + 1e-9 or th[-1] < hi - 1e-9:
            return False  # insufficient history: not usable
        best = 1e18
        cmd_ref = 0.0
        for tt, cc in zip(th, ch):
            d = tt - t_ref
            if d < 0.0:
                d = -d
            if d < best:
                best = d
                cmd_ref = cc
        for tt, cc in zip(th, ch):
            if lo - 1e-12 <= tt <= hi + 1e-12:
                gap = cc - cmd_ref
                if gap < 0.0:
                    gap = -gap
                if gap >= self.delta_cmd_gap:
                    return False
        return True
