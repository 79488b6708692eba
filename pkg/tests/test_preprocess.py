"""Offline cleaning ops, the Butterworth filter, and the online feedback gates."""

import numpy as np
import pytest

from longcal.preprocess import (
    MODE_AUTO,
    ButterworthFilter,
    DriveLog,
    GridBins,
    InsufficientHistory,
    InvalidRate,
    NoMatch,
    OnlinePreprocessor,
    WindowTooLarge,
    align_delay,
    bin_and_uniform,
    butterworth_lowpass,
    command_consistency_gate,
    mean_filter,
    nearest_cell_index,
    offline_pipeline,
    remove_outliers,
    speed_acc_consistency_gate,
    steering_gate,
)


def make_log(n=100, cmd=None, v=None, acc=None, theta=None, mode=None, dt=0.01):
    t = np.arange(n) * dt
    cmd = np.zeros(n) if cmd is None else np.asarray(cmd, float)
    v = np.zeros(n) if v is None else np.asarray(v, float)
    acc = np.zeros(n) if acc is None else np.asarray(acc, float)
    theta = np.zeros(n) if theta is None else np.asarray(theta, float)
    mode = np.array(["MANUAL"] * n, dtype=object) if mode is None else mode
    return DriveLog(t, cmd, v, acc, theta, mode)


class TestMeanFilter:
    def test_constant_series(self):
        for n in (1, 3, 7):
            out = mean_filter(np.full(20, 4.5), n)
            assert np.allclose(out, 4.5)

    def test_hand_average(self):
        out = mean_filter([1.0, 2.0, 3.0, 4.0], 2)
        assert np.allclose(out, [1.5, 2.5, 3.5])

    def test_window_one_is_identity_on_values(self):
        series = np.array([3.0, -1.0, 2.0])
        assert np.array_equal(mean_filter(series, 1), series)

    def test_window_too_large(self):
        with pytest.raises(WindowTooLarge):
            mean_filter([1.0, 2.0], 3)


class TestSteeringGate:
    def test_all_straight_retained(self):
        log = make_log(n=50, theta=np.zeros(50))
        assert len(steering_gate(log, 10.0)) == 50

    def test_threshold_is_strict(self):
        log = make_log(n=3, theta=np.array([0.0, 10.0, -10.0]))
        out = steering_gate(log, 10.0)
        assert len(out) == 1

    def test_mixed_log(self):
        log = make_log(n=3, theta=np.array([0.0, 5.0, 20.0]))
        out = steering_gate(log, 10.0)
        assert np.array_equal(out.theta, [0.0, 5.0])


class TestRemoveOutliers:
    def test_all_equal_passthrough(self):
        out = remove_outliers(np.full(6, 1.25))
        assert len(out) == 6

    def test_hand_zscores(self):
        # mean 2.5, std 4.330: the 10 sits at z=1.73 and is dropped
        out = remove_outliers([0.0, 0.0, 0.0, 10.0])
        assert np.array_equal(out, [0.0, 0.0, 0.0])

    def test_single_sample_passthrough(self):
        assert np.array_equal(remove_outliers([7.0]), [7.0])

    def test_never_empties_nonempty_input(self):
        rng = np.random.default_rng(0)
        for _ in range(300):
            cell = rng.normal(rng.uniform(-3, 3), rng.uniform(0, 2), rng.integers(1, 12))
            assert len(remove_outliers(cell)) >= 1

    def test_single_pass_not_iterated(self):
        # iterating would also kill the 4.0 on the second sweep
        cell = np.array([0.0, 0.0, 0.0, 0.0, 4.0, 100.0])
        out = remove_outliers(cell)
        assert 4.0 in out


class TestBinAndUniform:
    def test_counts_unchanged_below_cap(self):
        rng = np.random.default_rng(1)
        n = 60
        log = make_log(
            n=n,
            cmd=rng.uniform(-100, 100, n),
            v=rng.uniform(0, 3, n),
            acc=np.zeros(n),
        )
        bins = bin_and_uniform(log, np.linspace(-100, 100, 5), np.linspace(0, 3, 4), cap=100)
        assert bins.counts().sum() == n

    def test_cap_semantics(self):
        log = make_log(n=1000, cmd=np.full(1000, 20.0), v=np.full(1000, 1.0), acc=np.zeros(1000))
        bins = bin_and_uniform(log, np.linspace(-100, 100, 5), np.linspace(0, 3, 4), cap=100)
        assert bins.counts().sum() == 100

    def test_seeded_reproducible(self):
        rng = np.random.default_rng(2)
        n = 500
        log = make_log(
            n=n, cmd=rng.uniform(-100, 100, n), v=rng.uniform(0, 3, n), acc=rng.normal(0, 1, n)
        )
        grids = (np.linspace(-100, 100, 9), np.linspace(0, 3, 4))
        a = bin_and_uniform(log, *grids, cap=10, seed=42)
        b = bin_and_uniform(log, *grids, cap=10, seed=42)
        assert sorted(a.cells) == sorted(b.cells)
        for key in a.cells:
            assert np.array_equal(a.cells[key], b.cells[key])

    def test_samples_inside_cell_bounds(self):
        rng = np.random.default_rng(3)
        n = 400
        cmd_grid = np.linspace(-100, 100, 9)
        speed_grid = np.linspace(0, 3, 7)
        log = make_log(
            n=n, cmd=rng.uniform(-100, 100, n), v=rng.uniform(0, 3, n), acc=rng.normal(0, 1, n)
        )
        bins = bin_and_uniform(log, cmd_grid, speed_grid, cap=100)
        half_c = 0.5 * (cmd_grid[1] - cmd_grid[0])
        half_v = 0.5 * (speed_grid[1] - speed_grid[0])
        for (i, j), rows in bins.cells.items():
            assert np.all(np.abs(rows[:, 0] - cmd_grid[i]) <= half_c + 1e-12)
            assert np.all(np.abs(rows[:, 1] - speed_grid[j]) <= half_v + 1e-12)

    def test_nearest_cell_index(self):
        grid = np.array([0.0, 1.0, 2.0])
        assert np.array_equal(nearest_cell_index(grid, [-5.0, 0.4, 0.6, 1.4, 9.0]), [0, 0, 1, 1, 2])


class TestAlignDelay:
    def test_zero_delay_pairs_same_frames(self):
        t = np.arange(50) * 0.01
        ci, ii = align_delay(t, t, delay=0.0)
        assert np.array_equal(ci, ii)
        assert len(ci) == 50

    def test_tail_produces_no_pairs(self):
        t = np.arange(100) * 0.01
        ci, ii = align_delay(t, t, delay=0.2)
        assert len(ci) == 80
        assert np.array_equal(ii, ci + 20)

    def test_gap_raises_no_match(self):
        t_cmd = np.array([0.0, 0.01, 0.02])
        t_imu = np.array([0.0, 0.01, 0.02, 0.5])
        with pytest.raises(NoMatch):
            align_delay(t_cmd, t_imu, delay=0.2)


class TestButterworth:
    def test_rate_must_clear_cutoff(self):
        with pytest.raises(InvalidRate):
            butterworth_lowpass(np.zeros(10), sample_rate=4.0)

    def test_unity_dc_gain(self):
        out = butterworth_lowpass(np.full(500, 2.7), sample_rate=100.0)
        assert np.allclose(out, 2.7, atol=1e-9)

    @staticmethod
    def steady_gain(freq_hz, rate=100.0, seconds=6.0):
        t = np.arange(int(seconds * rate)) / rate
        x = np.sin(2 * np.pi * freq_hz * t)
        y = butterworth_lowpass(x, rate)
        tail = y[len(y) // 2 :]
        return np.sqrt(2.0) * tail.std()

    def test_cutoff_gain_is_half_power(self):
        assert self.steady_gain(2.0) == pytest.approx(1.0 / np.sqrt(2.0), abs=0.03)

    def test_decade_above_cutoff_attenuated(self):
        assert self.steady_gain(20.0) < 0.005

    def test_linearity(self):
        rng = np.random.default_rng(4)
        x = rng.normal(0, 1, 400)
        y = rng.normal(0, 1, 400)
        a, b = 1.7, -0.6
        lhs = butterworth_lowpass(a * x + b * y, 100.0)
        rhs = a * butterworth_lowpass(x, 100.0) + b * butterworth_lowpass(y, 100.0)
        assert np.allclose(lhs, rhs, atol=1e-9)

    def test_streaming_matches_batch(self):
        rng = np.random.default_rng(5)
        x = rng.normal(0, 1, 300)
        stream = ButterworthFilter(100.0)
        one_by_one = np.array([stream(xi) for xi in x])
        batch = ButterworthFilter(100.0).apply(x)
        assert np.allclose(one_by_one, batch, atol=1e-9)

    def test_causal_no_lookahead(self):
        # outputs up to k must not change when the future changes
        x = np.zeros(100)
        y1 = butterworth_lowpass(x, 100.0)
        x2 = x.copy()
        x2[60:] = 5.0
        y2 = butterworth_lowpass(x2, 100.0)
        assert np.allclose(y1[:60], y2[:60])


class TestCommandConsistencyGate:
    def make_hist(self, fn, t0=0.0, t1=1.0, dt=0.01):
        t = np.arange(t0, t1, dt)
        return t, np.array([fn(ti) for ti in t])

    def test_constant_true(self):
        t, c = self.make_hist(lambda ti: 30.0)
        assert command_consistency_gate(t, c, 0.5, delta_cmd_gap=10.0)

    def test_spike_false(self):
        t, c = self.make_hist(lambda ti: 30.0)
        c[np.argmin(np.abs(t - 0.55))] = 30.0 + 2 * 10.0
        assert not command_consistency_gate(t, c, 0.5, delta_cmd_gap=10.0)

    def test_slow_ramp_true(self):
        # slope delta/0.3s: max deviation inside +-0.1s is delta/3 < delta
        delta = 9.0
        t, c = self.make_hist(lambda ti: delta / 0.3 * ti)
        assert command_consistency_gate(t, c, 0.5, delta_cmd_gap=delta)

    def test_insufficient_history(self):
        t, c = self.make_hist(lambda ti: 0.0, t0=0.45, t1=0.55)
        with pytest.raises(InsufficientHistory):
            command_consistency_gate(t, c, 0.5, delta_cmd_gap=10.0)


class TestSpeedAccConsistencyGate:
    def test_truth_table(self):
        assert speed_acc_consistency_gate(2.0, 1.0, 0.5, 0.2) is True
        assert speed_acc_consistency_gate(1.0, 2.0, 0.2, 0.5) is True
        assert speed_acc_consistency_gate(1.0, 2.0, 0.5, 0.2) is False
        assert speed_acc_consistency_gate(2.0, 1.0, 0.2, 0.5) is False

    def test_zero_product_is_false(self):
        assert speed_acc_consistency_gate(1.0, 1.0, 0.5, 0.2) is False
        assert speed_acc_consistency_gate(2.0, 1.0, 0.3, 0.3) is False


class TestOfflinePipeline:
    def test_pipeline_applies_all_stages(self):
        rng = np.random.default_rng(6)
        n = 2000
        log = make_log(
            n=n,
            cmd=np.repeat(rng.uniform(-100, 100, n // 100), 100),
            v=rng.uniform(0, 3, n),
            acc=rng.normal(0.5, 0.05, n),
            theta=np.where(np.arange(n) % 10 == 0, 30.0, 0.0),
        )
        bins = offline_pipeline(
            log, np.linspace(-100, 100, 9), np.linspace(0, 3, 4), cap=20, seed=0
        )
        counts = bins.counts()
        assert counts.sum() > 0
        assert counts.max() <= 20

    def test_mean_filter_reduces_noise(self):
        rng = np.random.default_rng(7)
        n = 5000
        log = make_log(n=n, cmd=np.full(n, 50.0), v=np.full(n, 1.0), acc=rng.normal(1.0, 0.05, n))
        bins = offline_pipeline(log, np.array([0.0, 50.0, 100.0]), np.array([0.0, 1.0, 2.0]), cap=5000)
        accs = bins.cell_accs(1, 1)
        assert len(accs) > 100
        assert accs.std() < 0.05 / np.sqrt(5) * 1.5


class TestOnlinePreprocessor:
    def run_stream(self, pre, frames):
        out = []
        for f in frames:
            fb = pre.push(**f)
            if fb is not None:
                out.append(fb)
        return out

    def steady_frames(self, n=200, dt=0.01, cmd=20.0, v=1.0, acc=0.4, acc_exp=0.6, v_exp=1.2):
        # expected above measured both in speed and acceleration: gate passes
        return [
            dict(t=k * dt, cmd=cmd, v=v, acc_meas=acc, acc_expected=acc_exp, v_expected=v_exp)
            for k in range(n)
        ]

    def test_steady_stream_yields_feedback(self):
        pre = OnlinePreprocessor(sample_rate=100.0)
        out = self.run_stream(pre, self.steady_frames())
        assert len(out) > 100
        fb = out[-1]
        assert fb.cmd_ref == 20.0
        assert fb.v_ref == 1.0
        assert fb.acc_ref == 0.6
        assert fb.acc_k == pytest.approx(0.4, abs=1e-6)
        assert fb.a_k == fb.acc_k

    def test_inconsistent_sign_rejected(self):
        # measured acceleration above expectation while speed lags: senseless
        frames = self.steady_frames(acc=0.9, acc_exp=0.6, v_exp=1.2, v=1.0)
        # v_exp > v (under speed) but acc_k > acc_ref: product negative
        pre = OnlinePreprocessor(sample_rate=100.0)
        assert self.run_stream(pre, frames) == []

    def test_command_step_suppresses_window(self):
        frames = self.steady_frames(n=400)
        for f in frames[200:]:
            f["cmd"] = 80.0
        pre = OnlinePreprocessor(sample_rate=100.0)
        out = self.run_stream(pre, frames)
        # feedback stops around the step and resumes once history steadies
        ts = {round(fb.cmd_ref, 6) for fb in out}
        assert ts == {20.0, 80.0}

    def test_manual_mode_rejected(self):
        frames = self.steady_frames()
        for f in frames:
            f["mode"] = "MANUAL"
        pre = OnlinePreprocessor(sample_rate=100.0)
        assert self.run_stream(pre, frames) == []

    def test_steering_rejected(self):
        frames = self.steady_frames()
        for f in frames:
            f["theta"] = 25.0
        pre = OnlinePreprocessor(sample_rate=100.0)
        assert self.run_stream(pre, frames) == []

    def test_delay_alignment_pairs_cause_and_effect(self):
        # command steps at t=1.0; the effect (acc jump) appears at t=1.2 in
        # the measured channel; the matured feedback for the stepped command
        # must carry the post-step acceleration
        dt, n = 0.01, 300
        frames = []
        for k in range(n):
            t = k * dt
            cmd = 10.0 if t < 1.0 else 60.0
            acc = 0.1 if t < 1.2 else 1.1  # plant exhibits a pure 0.2 s delay
            frames.append(
                dict(t=t, cmd=cmd, v=1.0, acc_meas=acc, acc_expected=1.15 if cmd == 60 else 0.12,
                     v_expected=1.3)
            )
        pre = OnlinePreprocessor(sample_rate=100.0)
        out = self.run_stream(pre, frames)
        stepped = [fb for fb in out if fb.cmd_ref == 60.0]
        assert stepped
        late = [fb for fb in stepped if fb.acc_k > 0.9]
        assert len(late) / len(stepped) > 0.8
