"""Offline regression: fit throttle/brake acceleration models and emit a table.

Two model families cover the preprocessed ``(cmd, v) -> acc`` samples: a
small feedforward sigmoid network trained with Adam (the production choice)
and an ordinary least-squares baseline kept for comparison.  Throttle and
brake are fitted separately on the signed command axis; a ten-fold
cross-validation harness scores both families on held-out folds only.
"""

from __future__ import annotations

import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .table import CalibrationTable, project_monotone

DEADBAND_CMD = 2.0  # |cmd| below this is idle-creep ambiguity, not training data


class TooFewSamples(ValueError):
    """Not enough samples for the requested fit or fold count."""


class Singular(ValueError):
    """Rank-deficient design matrix in the least-squares baseline."""


class Degenerate(UserWarning):
    """All regression targets identical; the fit collapses to a constant."""


@dataclass(frozen=True)
class RegressionSample:
    """One training triple: signed command %, speed m/s, target acceleration."""

    cmd: float
    v: float
    acc: float


def as_sample_array(samples) -> np.ndarray:
    """Coerce RegressionSample lists or (n, 3) arrays to a float (n, 3) array."""
    if isinstance(samples, np.ndarray):
        arr = np.asarray(samples, dtype=float)
    else:
        arr = np.array([[s.cmd, s.v, s.acc] for s in samples], dtype=float)
    if arr.ndim != 2 or arr.shape[1] != 3:
        raise ValueError("samples must be (n, 3): cmd, v, acc")
    if not np.all(np.isfinite(arr)):
        raise ValueError("samples must be finite")
    return arr


@dataclass
class MlpHyper:
    """Network width and Adam settings; sized to train in well under a second."""

    hidden: int = 16
    epochs: int = 80
    lr: float = 1e-2
    batch: int = 512
    seed: int = 0


def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


@dataclass
class MlpModel:
    """Feedforward net 2 -> H -> H -> 1, sigmoid hidden units, linear output.

    Inputs and target are standardised with constants taken from the
    training split only; ``predict`` works in raw units.
    """

    weights: list = field(repr=False)
    biases: list = field(repr=False)
    x_mean: np.ndarray = field(default=None)
    x_std: np.ndarray = field(default=None)
    y_mean: float = 0.0
    y_std: float = 1.0
    first_epoch_mse: float = float("nan")
    final_mse: float = float("nan")

    def predict(self, cmd, v):
        scalar = np.isscalar(cmd) and np.isscalar(v)
        cmd, v = np.broadcast_arrays(np.asarray(cmd, dtype=float), np.asarray(v, dtype=float))
        x = (np.column_stack([cmd.ravel(), v.ravel()]) - self.x_mean) / self.x_std
        h = _sigmoid(x @ self.weights[0] + self.biases[0])
        h = _sigmoid(h @ self.weights[1] + self.biases[1])
        out = (h @ self.weights[2] + self.biases[2])[:, 0]
        out = (out * self.y_std + self.y_mean).reshape(cmd.shape)
        return out.item() if scalar else out


def train_mlp(samples, hyper: MlpHyper | None = None) -> MlpModel:
    """Fit the network by minibatch Adam on mean squared error.

    Deterministic for a given seed (initialisation, shuffling, and batch
    order all come from one generator).  Constant targets trigger a
    Degenerate warning and return the constant predictor.
    """
    hyper = hyper or MlpHyper()
    arr = as_sample_array(samples)
    if len(arr) < 50:
        raise TooFewSamples(f"need >= 50 samples to fit the network, got {len(arr)}")
    X_raw = arr[:, :2]
    y_raw = arr[:, 2:3]

    x_mean = X_raw.mean(axis=0)
    x_std = X_raw.std(axis=0)
    x_std[x_std == 0.0] = 1.0
    y_mean = float(y_raw.mean())
    y_std = float(y_raw.std())
    if np.ptp(y_raw) == 0.0:
        y_std = 0.0

    sizes = [2, hyper.hidden, hyper.hidden, 1]
    rng = np.random.default_rng(hyper.seed)
    weights = [
        rng.normal(0.0, 1.0 / np.sqrt(sizes[i]), size=(sizes[i], sizes[i + 1]))
        for i in range(3)
    ]
    biases = [np.zeros(sizes[i + 1]) for i in range(3)]
    model = MlpModel(weights, biases, x_mean, x_std, y_mean, y_std)

    if y_std == 0.0:
        warnings.warn("all targets identical; returning a constant model", Degenerate)
        for w in weights:
            w *= 0.0
        model.first_epoch_mse = model.final_mse = 0.0
        return model

    X = (X_raw - x_mean) / x_std
    y = (y_raw - y_mean) / y_std

    m_w = [np.zeros_like(w) for w in weights]
    v_w = [np.zeros_like(w) for w in weights]
    m_b = [np.zeros_like(b) for b in biases]
    v_b = [np.zeros_like(b) for b in biases]
    beta1, beta2, eps = 0.9, 0.999, 1e-8
    step = 0
    # keep at least 8 optimiser steps per epoch on small datasets, otherwise
    # the epoch budget undertrains
    batch = int(min(hyper.batch, max(64, np.ceil(len(X) / 8))))

    def full_mse():
        a1 = _sigmoid(X @ weights[0] + biases[0])
        a2 = _sigmoid(a1 @ weights[1] + biases[1])
        return float(((a2 @ weights[2] + biases[2] - y) ** 2).mean())

    for epoch in range(hyper.epochs):
        order = rng.permutation(len(X))
        for s in range(0, len(X), batch):
            idx = order[s : s + batch]
            xb, yb = X[idx], y[idx]
            a1 = _sigmoid(xb @ weights[0] + biases[0])
            a2 = _sigmoid(a1 @ weights[1] + biases[1])
            out = a2 @ weights[2] + biases[2]
            delta = 2.0 * (out - yb) / len(xb)
            grads_w = [None, None, a2.T @ delta]
            grads_b = [None, None, delta.sum(axis=0)]
            d2 = (delta @ weights[2].T) * a2 * (1.0 - a2)
            grads_w[1] = a1.T @ d2
            grads_b[1] = d2.sum(axis=0)
            d1 = (d2 @ weights[1].T) * a1 * (1.0 - a1)
            grads_w[0] = xb.T @ d1
            grads_b[0] = d1.sum(axis=0)
            step += 1
            c1 = 1.0 - beta1**step
            c2 = 1.0 - beta2**step
            for i in range(3):
                m_w[i] = beta1 * m_w[i] + (1.0 - beta1) * grads_w[i]
                v_w[i] = beta2 * v_w[i] + (1.0 - beta2) * grads_w[i] ** 2
                weights[i] -= hyper.lr * (m_w[i] / c1) / (np.sqrt(v_w[i] / c2) + eps)
                m_b[i] = beta1 * m_b[i] + (1.0 - beta1) * grads_b[i]
                v_b[i] = beta2 * v_b[i] + (1.0 - beta2) * grads_b[i] ** 2
                biases[i] -= hyper.lr * (m_b[i] / c1) / (np.sqrt(v_b[i] / c2) + eps)
        if epoch == 0:
            model.first_epoch_mse = full_mse()
    model.final_mse = full_mse()
    return model


@dataclass
class LinearModel:
    """Plane fit acc = w0 + w1 * cmd + w2 * v (ordinary least squares)."""

    w: np.ndarray

    def predict(self, cmd, v):
        scalar = np.isscalar(cmd) and np.isscalar(v)
        cmd = np.atleast_1d(np.asarray(cmd, dtype=float))
        v = np.atleast_1d(np.asarray(v, dtype=float))
        cmd, v = np.broadcast_arrays(cmd, v)
        out = self.w[0] + self.w[1] * cmd + self.w[2] * v
        return out.item(0) if scalar else out


def train_linear(samples) -> LinearModel:
    """Least-squares plane through the samples; raises Singular if degenerate."""
    arr = as_sample_array(samples)
    if len(arr) < 3:
        raise TooFewSamples(f"need >= 3 samples for a plane fit, got {len(arr)}")
    design = np.column_stack([np.ones(len(arr)), arr[:, 0], arr[:, 1]])
    if np.linalg.matrix_rank(design) < 3:
        raise Singular("design matrix is rank deficient (collinear samples)")
    w, *_ = np.linalg.lstsq(design, arr[:, 2], rcond=None)
    return LinearModel(w=w)


def predict(model, cmd, v):
    """Model-agnostic forward evaluation in raw units."""
    return model.predict(cmd, v)


def split_by_sign(arr: np.ndarray):
    """Throttle (> deadband) and brake (< -deadband) sample subsets."""
    throttle = arr[arr[:, 0] > DEADBAND_CMD]
    brake = arr[arr[:, 0] < -DEADBAND_CMD]
    return throttle, brake


def _fit_one_sign(arr: np.ndarray, kind: str, hyper: MlpHyper | None, seed: int):
    if len(arr) == 0:
        return None
    if kind == "nn":
        return train_mlp(arr, MlpHyper(**{**(hyper or MlpHyper()).__dict__, "seed": seed}))
    if kind == "linear":
        return train_linear(arr)
    raise ValueError(f"unknown model kind {kind!r}")


def _fit_both_signs(train_arr: np.ndarray, kind: str, hyper: MlpHyper | None, seed: int):
    throttle, brake = split_by_sign(train_arr)
    return (
        _fit_one_sign(throttle, kind, hyper, seed),
        _fit_one_sign(brake, kind, hyper, seed + 1),
    )


def _predict_signed(throttle_model, brake_model, arr: np.ndarray) -> np.ndarray:
    out = np.empty(len(arr))
    pos = arr[:, 0] > 0
    if pos.any():
        if throttle_model is None:
            raise TooFewSamples("held-out throttle samples but no throttle training data")
        out[pos] = predict(throttle_model, arr[pos, 0], arr[pos, 1])
    if (~pos).any():
        if brake_model is None:
            raise TooFewSamples("held-out brake samples but no brake training data")
        out[~pos] = predict(brake_model, arr[~pos, 0], arr[~pos, 1])
    return out


@dataclass
class CvReport:
    """Held-out MAE/RMSE per fold plus fold-mean aggregates, per model kind."""

    kind: str
    fold_mae: np.ndarray
    fold_rmse: np.ndarray

    @property
    def mae(self) -> float:
        return float(self.fold_mae.mean())

    @property
    def rmse(self) -> float:
        return float(self.fold_rmse.mean())

    def csv_rows(self):
        for k, (mae, rmse) in enumerate(zip(self.fold_mae, self.fold_rmse)):
            yield [self.kind, str(k), "%.9g" % mae, "%.9g" % rmse]


def _fold_metrics(args):
    train_arr, test_arr, kind, hyper, seed = args
    t_model, b_model = _fit_both_signs(train_arr, kind, hyper, seed)
    pred = _predict_signed(t_model, b_model, test_arr)
    err = pred - test_arr[:, 2]
    return float(np.abs(err).mean()), float(np.sqrt((err**2).mean()))


def cross_validate(
    samples,
    folds: int = 10,
    kind: str = "nn",
    hyper: MlpHyper | None = None,
    seed: int = 0,
    workers: int = 1,
) -> CvReport:
    """Seeded k-fold cross-validation scored on held-out folds only.

    Fold assignment shuffles once with the given seed; deadband samples are
    excluded (neither sign's model owns them).  Folds are independent, so
    ``workers > 1`` fans them out over processes with unchanged results.
    """
    arr = as_sample_array(samples)
    arr = arr[np.abs(arr[:, 0]) > DEADBAND_CMD]
    if len(arr) < folds:
        raise TooFewSamples(f"{len(arr)} usable samples cannot fill {folds} folds")
    rng = np.random.default_rng(seed)
    assignment = rng.permutation(len(arr)) % folds

    jobs = []
    for k in range(folds):
        test = arr[assignment == k]
        train = arr[assignment != k]
        jobs.append((train, test, kind, hyper, seed + 1000 * (k + 1)))

    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            metrics = list(pool.map(_fold_metrics, jobs))
    else:
        metrics = [_fold_metrics(job) for job in jobs]

    fold_mae = np.array([m[0] for m in metrics])
    fold_rmse = np.array([m[1] for m in metrics])
    return CvReport(kind=kind, fold_mae=fold_mae, fold_rmse=fold_rmse)


def build_table(throttle_model, brake_model, speed_grid, cmd_grid) -> CalibrationTable:
    """Evaluate the signed models over the grid and project to monotone.

    Positive commands come from the throttle model, negative from the brake
    model, and the zero row blends the two models' zero-command limits.
    """
    speed_grid = np.asarray(speed_grid, dtype=float)
    cmd_grid = np.asarray(cmd_grid, dtype=float)
    acc = np.empty((len(cmd_grid), len(speed_grid)))
    for i, cmd in enumerate(cmd_grid):
        if cmd > 0:
            acc[i] = predict(throttle_model, np.full_like(speed_grid, cmd), speed_grid)
        elif cmd < 0:
            acc[i] = predict(brake_model, np.full_like(speed_grid, cmd), speed_grid)
        else:
            zero = np.zeros_like(speed_grid)
            acc[i] = 0.5 * (
                predict(throttle_model, zero, speed_grid)
                + predict(brake_model, zero, speed_grid)
            )
    return project_monotone(CalibrationTable(speed_grid, cmd_grid, acc))


# ---------------------------------------------------------------------------
# model text round-trip
# ---------------------------------------------------------------------------

def save_model(model) -> str:
    """Serialise a model losslessly as text (17 significant digits)."""
    fmt = "%.17g"
    lines = []
    if isinstance(model, LinearModel):
        lines.append("linear")
        lines.append("w: " + " ".join(fmt % x for x in model.w))
        return "\n".join(lines) + "\n"
    lines.append("mlp")
    lines.append("x_mean: " + " ".join(fmt % x for x in model.x_mean))
    lines.append("x_std: " + " ".join(fmt % x for x in model.x_std))
    lines.append("y_mean: " + fmt % model.y_mean)
    lines.append("y_std: " + fmt % model.y_std)
    for w, b in zip(model.weights, model.biases):
        lines.append(f"layer {w.shape[0]} {w.shape[1]}")
        for row in w:
            lines.append(" ".join(fmt % x for x in row))
        lines.append("bias: " + " ".join(fmt % x for x in b))
    return "\n".join(lines) + "\n"


def load_model(text: str):
    """Inverse of ``save_model``."""
    lines = [ln for ln in text.splitlines() if ln.strip()]
    head = lines.pop(0).strip()
    if head == "linear":
        return LinearModel(w=np.array([float(x) for x in lines[0].split(":", 1)[1].split()]))
    if head != "mlp":
        raise ValueError(f"unknown model header {head!r}")

    def take_vector(prefix):
        line = lines.pop(0)
        if not line.startswith(prefix):
            raise ValueError(f"expected {prefix!r}, got {line!r}")
        return np.array([float(x) for x in line.split(":", 1)[1].split()])

    x_mean = take_vector("x_mean:")
    x_std = take_vector("x_std:")
    y_mean = float(take_vector("y_mean:")[0])
    y_std = float(take_vector("y_std:")[0])
    weights, biases = [], []
    while lines:
        head = lines.pop(0).split()
        if head[0] != "layer":
            raise ValueError(f"expected layer header, got {head!r}")
        rows, cols = int(head[1]), int(head[2])
        w = np.array([[float(x) for x in lines.pop(0).split()] for _ in range(rows)])
        if w.shape != (rows, cols):
            raise ValueError("layer shape mismatch")
        weights.append(w)
        biases.append(take_vector("bias:"))
    return MlpModel(weights, biases, x_mean, x_std, y_mean, y_std)
