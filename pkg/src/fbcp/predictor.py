"""Linear autoregressive obstacle predictor, rollouts, residuals and calibration scores.

The framework is agnostic to the predictor; a ridge-regularised AR(h) model on
the stacked obstacle positions keeps every quantity checkable by hand.

Histories shorter than the window (the first ``h - 1`` planning steps) are
front-padded by repeating the earliest observed state. The padding is applied
identically to test and calibration trajectories, so scores stay exchangeable.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import InvalidInput, SingularFit, SplitViolation
from .trajectories import JointObstacleTrajectory

MODEL_FORMAT = "fbcp.predictor"
MODEL_VERSION = 1


@dataclass(frozen=True)
class PredictorModel:
    """``Y_{t+1} = W [Y_{t-h+1}; ...; Y_t] + b``.

    ``coefficients`` has shape ``(d, h d)`` with column blocks ordered from the
    oldest to the newest state in the window.
    """

    window: int
    coefficients: np.ndarray
    intercept: np.ndarray
    ridge: float
    trained_on: str = "train"
    train_ids: tuple = field(default=(), repr=False)

    def __post_init__(self):
        W = np.asarray(self.coefficients, dtype=float)
        b = np.asarray(self.intercept, dtype=float).ravel()
        d = b.size
        if W.shape != (d, self.window * d):
            raise InvalidInput(f"coefficients must be ({d}, {self.window * d}), got {W.shape}")
        if self.trained_on != "train":
            raise InvalidInput("the predictor must be trained on the train split")
        W.setflags(write=False)
        b.setflags(write=False)
        object.__setattr__(self, "coefficients", W)
        object.__setattr__(self, "intercept", b)
        object.__setattr__(self, "train_ids", tuple(int(i) for i in self.train_ids))

    @property
    def dim(self) -> int:
        return self.intercept.size

    def predict_next(self, windows: np.ndarray) -> np.ndarray:
        """One-step prediction from ``(..., h, d)`` windows."""
        windows = np.asarray(windows, dtype=float)
        flat = windows.reshape(windows.shape[:-2] + (self.window * self.dim,))
        return flat @ self.coefficients.T + self.intercept

    def to_json(self) -> dict:
        return {
            "format": MODEL_FORMAT,
            "version": MODEL_VERSION,
            "window": self.window,
            "ridge": self.ridge,
            "trained_on": self.trained_on,
            "train_ids": list(self.train_ids),
            "shape": list(self.coefficients.shape),
            "coefficients": [float(v) for v in self.coefficients.ravel()],
            "intercept": [float(v) for v in self.intercept],
        }

    @classmethod
    def from_json(cls, doc: dict) -> "PredictorModel":
        if doc.get("format") != MODEL_FORMAT or doc.get("version") != MODEL_VERSION:
            raise InvalidInput("not a version-1 predictor document")
        W = np.asarray(doc["coefficients"], dtype=float).reshape(doc["shape"])
        return cls(doc["window"], W, np.asarray(doc["intercept"]), doc["ridge"],
                   doc["trained_on"], tuple(doc.get("train_ids", ())))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json()))

    @classmethod
    def load(cls, path) -> "PredictorModel":
        return cls.from_json(json.loads(Path(path).read_text()))


def _states(traj) -> np.ndarray:
    if isinstance(traj, JointObstacleTrajectory):
        return traj.states
    return np.asarray(traj, dtype=float)


def fit(train, window: int = 2, ridge: float = 1e-6) -> PredictorModel:
    """Least-squares AR(``window``) fit pooled over trajectories and times.

    The intercept is not penalised. With ``ridge == 0`` a rank-deficient
    design raises :class:`SingularFit`.
    """
    train = list(train)
    if not train:
        raise InvalidInput("empty training set")
    if window < 1 or ridge < 0:
        raise InvalidInput("window must be >= 1 and ridge >= 0")
    X, Y = [], []
    for tr in train:
        s = _states(tr)
        if s.shape[0] < window + 1:
            raise InvalidInput("trajectory shorter than window + 1")
        n = s.shape[0] - window
        idx = np.arange(window)[None, :] + np.arange(n)[:, None]
        X.append(s[idx].reshape(n, -1))
        Y.append(s[window:])
    X = np.concatenate(X)
    Y = np.concatenate(Y)
    xm, ym = X.mean(axis=0), Y.mean(axis=0)
    Xc, Yc = X - xm, Y - ym
    if ridge == 0.0:
        coef, _, rank, _ = np.linalg.lstsq(Xc, Yc, rcond=None)
        if rank < Xc.shape[1]:
            raise SingularFit(f"design rank {rank} < {Xc.shape[1]}; use ridge > 0")
    else:
        gram = Xc.T @ Xc + ridge * np.eye(Xc.shape[1])
        coef = np.linalg.solve(gram, Xc.T @ Yc)
    W = coef.T
    b = ym - W @ xm
    ids = tuple(sorted(tr.trajectory_id for tr in train if isinstance(tr, JointObstacleTrajectory)))
    return PredictorModel(window, W, b, float(ridge), "train", ids)


def pad_history(history: np.ndarray, window: int) -> np.ndarray:
    """Front-pad ``(..., n, d)`` histories to at least ``window`` states."""
    history = np.asarray(history, dtype=float)
    n = history.shape[-2]
    if n >= window:
        return history
    if n == 0:
        raise InvalidInput("history is empty")
    first = np.repeat(history[..., :1, :], window - n, axis=-2)
    return np.concatenate([first, history], axis=-2)


def rollout_batch(model: PredictorModel, histories: np.ndarray, steps: int) -> np.ndarray:
    """Autoregressive predictions for ``(n, t + 1, d)`` histories -> ``(n, steps, d)``."""
    histories = np.asarray(histories, dtype=float)
    if histories.shape[-2] < model.window:
        raise InvalidInput("history shorter than the model window")
    buf = histories[..., -model.window:, :].copy()
    out = np.empty(histories.shape[:-2] + (steps, model.dim))
    for k in range(steps):
        nxt = model.predict_next(buf)
        out[..., k, :] = nxt
        buf = np.concatenate([buf[..., 1:, :], nxt[..., None, :]], axis=-2)
    return out


def rollout(model: PredictorModel, history, horizon_end: int) -> np.ndarray:
    """Predictions ``Yhat_{t+1|t} .. Yhat_{T|t}`` from the prefix ``Y_{0:t}``.

    Returns an array of shape ``(horizon_end - t, d)``; predictions are fed
    back as inputs, no future truth is used.
    """
    history = np.asarray(history, dtype=float)
    if history.ndim != 2:
        raise InvalidInput("history must be (t + 1, d)")
    t = history.shape[0] - 1
    steps = int(horizon_end) - t
    if steps < 0:
        raise InvalidInput("horizon_end precedes the end of the history")
    return rollout_batch(model, history[None], steps)[0]


def one_step_predictions(model: PredictorModel, states: np.ndarray, start: int) -> np.ndarray:
    """``g(Y_{tau-h..tau-1})`` for ``tau = start..T`` over ``(..., T + 1, d)`` states.

    For ``tau < window`` the history is front-padded (see module docstring).
    """
    states = np.asarray(states, dtype=float)
    T = states.shape[-2] - 1
    h = model.window
    padded = pad_history(states, h + states.shape[-2]) if start < h else states
    offset = padded.shape[-2] - states.shape[-2]
    taus = np.arange(start, T + 1)
    idx = (taus + offset)[:, None] + np.arange(-h, 0)[None, :]
    return model.predict_next(padded[..., idx, :])


def residuals(model: PredictorModel, traj, pad_start: bool = False) -> np.ndarray:
    """One-step modelling errors ``w_tau = Y_tau - g(Y_{tau-h..tau-1})``.

    Rows run over ``tau = window..T`` (``T - window + 1`` rows). With
    ``pad_start=True`` they run over ``tau = 1..T`` using padded histories.
    """
    s = _states(traj)
    if s.shape[0] < model.window + 1:
        raise InvalidInput("trajectory shorter than window + 1")
    start = 1 if pad_start else model.window
    return s[start:] - one_step_predictions(model, s, start)


def residual_table(model: PredictorModel, states: np.ndarray) -> np.ndarray:
    """Padded residuals for a batch, ``(n, T + 1, d)`` with a NaN row at ``tau = 0``."""
    states = np.asarray(states, dtype=float)
    out = np.full(states.shape, np.nan)
    out[..., 1:, :] = states[..., 1:, :] - one_step_predictions(model, states, 1)
    return out


def prediction_table(model: PredictorModel, states: np.ndarray, t: int) -> np.ndarray:
    """Padded rollouts ``Yhat_{tau|t}`` for ``tau = t+1..T`` over a batch ``(n, T + 1, d)``."""
    states = np.asarray(states, dtype=float)
    T = states.shape[-2] - 1
    hist = pad_history(states[..., : t + 1, :], model.window)
    return rollout_batch(model, hist, T - t)


def calib_scores(model: PredictorModel, cal1, t: int, T: int, exclude_ids=()) -> np.ndarray:
    """Nonconformity scores ``R^{(i)}_{tau|t}``, shape ``(T - t, K)``.

    Row ``tau - t - 1`` holds ``||Y^{(i)}_tau - Yhat^{(i)}_{tau|t}||`` over the
    stacked obstacle vector for every cal1 trajectory ``i``. Raises
    :class:`SplitViolation` if any cal1 id was used for training or appears in
    ``exclude_ids`` (e.g. the cal2 ids).
    """
    cal1 = list(cal1)
    ids = {tr.trajectory_id for tr in cal1 if isinstance(tr, JointObstacleTrajectory)}
    clash = ids & (set(model.train_ids) | {int(i) for i in exclude_ids})
    if clash:
        raise SplitViolation(f"cal1 shares trajectories with other splits: {sorted(clash)[:5]}")
    if not 0 <= t < T:
        raise InvalidInput("need 0 <= t < T")
    states = np.stack([_states(tr) for tr in cal1])
    if states.shape[1] < T + 1:
        raise InvalidInput("calibration trajectories shorter than T + 1")
    states = states[:, : T + 1]
    pred = prediction_table(model, states, t)
    err = np.linalg.norm(states[:, t + 1:] - pred, axis=-1)
    return err.T
