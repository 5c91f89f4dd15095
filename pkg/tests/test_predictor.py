import json

import numpy as np
import pytest

from fbcp import predictor as pr
from fbcp.errors import InvalidInput, SingularFit, SplitViolation
from fbcp.trajectories import JointObstacleTrajectory


def cv_traj(p0, v, T=10, tid=0):
    t = np.arange(T + 1)[:, None]
    return JointObstacleTrajectory(np.asarray(p0) + t * np.asarray(v), tid)


def noisy_set(n, T=12, d=4, seed=0, offset=0):
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n):
        x = np.cumsum(rng.normal(size=(T + 1, d)), axis=0)
        out.append(JointObstacleTrajectory(x, offset + i))
    return out


def loop_residuals(model, states, start):
    """Independent loop: pad by repeating Y_0, then Y_tau - W [window] - b."""
    h = model.window
    out = []
    for tau in range(start, states.shape[0]):
        hist = [states[max(s, 0)] for s in range(tau - h, tau)]
        x = np.concatenate(hist)
        out.append(states[tau] - (model.coefficients @ x + model.intercept))
    return np.array(out)


def test_fit_constant_velocity_is_exact():
    rng = np.random.default_rng(1)
    train = [cv_traj(rng.normal(size=4), rng.normal(size=4), tid=i) for i in range(20)]
    model = pr.fit(train, window=2, ridge=0.0)
    for tr in train:
        assert np.max(np.abs(pr.residuals(model, tr))) < 1e-9
    W = model.coefficients
    # Y_{t+1} = 2 Y_t - Y_{t-1}
    assert np.allclose(W[:, :4], -np.eye(4), atol=1e-7)
    assert np.allclose(W[:, 4:], 2 * np.eye(4), atol=1e-7)


def test_fit_stationary_trajectory_predicts_constant():
    tr = JointObstacleTrajectory(np.tile([1.0, -2.0], (8, 1)), 0)
    model = pr.fit([tr], window=2, ridge=1e-6)
    assert np.allclose(pr.residuals(model, tr), 0.0, atol=1e-12)
    assert np.allclose(pr.rollout(model, tr.states[:3], 7), [1.0, -2.0])


def test_singular_fit_without_ridge():
    tr = JointObstacleTrajectory(np.tile([1.0, -2.0], (8, 1)), 0)
    with pytest.raises(SingularFit):
        pr.fit([tr], window=2, ridge=0.0)


def test_fit_recovers_linear_map_against_normal_equations():
    rng = np.random.default_rng(4)
    A = 0.9 * np.linalg.qr(rng.normal(size=(4, 4)))[0]
    trajs = []
    for i in range(15):
        x = [rng.normal(size=4)]
        for _ in range(12):
            x.append(A @ x[-1])
        trajs.append(JointObstacleTrajectory(np.array(x), i))
    model = pr.fit(trajs, window=1, ridge=0.0)
    assert np.allclose(model.coefficients, A, atol=1e-6)
    assert np.allclose(model.intercept, 0.0, atol=1e-6)
    # independent normal equations with an explicit intercept column
    X = np.vstack([np.hstack([tr.states[:-1], np.ones((12, 1))]) for tr in trajs])
    Y = np.vstack([tr.states[1:] for tr in trajs])
    beta = np.linalg.solve(X.T @ X, X.T @ Y)
    assert np.allclose(model.coefficients, beta[:4].T, atol=1e-8)


def test_fit_rejects_bad_input():
    with pytest.raises(InvalidInput):
        pr.fit([], window=2)
    with pytest.raises(InvalidInput):
        pr.fit([cv_traj([0, 0], [1, 1], T=1)], window=2)
    with pytest.raises(InvalidInput):
        pr.fit(noisy_set(2), ridge=-1.0)


def test_rollout_examples():
    rng = np.random.default_rng(7)
    train = [cv_traj(rng.normal(size=4), rng.normal(size=4), tid=i) for i in range(12)]
    model = pr.fit(train, window=2, ridge=0.0)
    truth = cv_traj([0.5, 0.5, -1, 2], [0.3, -0.2, 0.1, 0.4], T=10)
    pred = pr.rollout(model, truth.states[:4], 10)
    assert pred.shape == (7, 4)
    assert np.allclose(pred, truth.states[4:], atol=1e-9)
    assert pr.rollout(model, truth.states[:4], 3).shape == (0, 4)
    with pytest.raises(InvalidInput):
        pr.rollout(model, truth.states[:1], 10)
    with pytest.raises(InvalidInput):
        pr.rollout(model, truth.states[:4], 2)


def test_residual_examples_and_offset():
    train = noisy_set(30)
    model = pr.fit(train, window=2)
    tr = train[0]
    res = pr.residuals(model, tr)
    assert res.shape == (tr.T - 1, 4)
    assert np.allclose(res, loop_residuals(model, tr.states, 2), rtol=0, atol=1e-12)
    # data = prediction + c at every step from tau = 2
    c = np.array([0.3, -0.1, 0.2, 0.05])
    s = tr.states.copy()
    for tau in range(2, s.shape[0]):
        s[tau] = model.predict_next(s[tau - 2:tau]) + c
    assert np.allclose(pr.residuals(model, s), c, atol=1e-12)


def test_padded_residuals_match_loop():
    train = noisy_set(30, seed=2)
    model = pr.fit(train, window=3)
    for tr in train[:5]:
        got = pr.residuals(model, tr, pad_start=True)
        assert got.shape == (tr.T, 4)
        assert np.allclose(got, loop_residuals(model, tr.states, 1), atol=1e-12)
    table = pr.residual_table(model, np.stack([tr.states for tr in train[:5]]))
    assert np.all(np.isnan(table[:, 0]))
    assert np.allclose(table[0, 1:], pr.residuals(model, train[0], pad_start=True), atol=1e-12)


def test_one_step_rollout_equals_residual_prediction():
    train = noisy_set(20, seed=3)
    model = pr.fit(train, window=2)
    s = train[4].states
    for t in range(0, s.shape[0] - 1):
        hist = pr.pad_history(s[: t + 1], model.window)
        one = pr.rollout(model, hist, hist.shape[0])[0]
        assert np.allclose(s[t + 1] - one, pr.residual_table(model, s[None])[0, t + 1], atol=1e-12)


def test_calib_scores_examples():
    rng = np.random.default_rng(9)
    train = [cv_traj(rng.normal(size=2), rng.normal(size=2), tid=i) for i in range(8)]
    model = pr.fit(train, window=2, ridge=0.0)
    cal1 = [cv_traj([3, 1], [0.2, 0.1], tid=100), cv_traj([-1, 0], [0.1, 0.4], tid=101)]
    S = pr.calib_scores(model, cal1, t=2, T=10)
    assert S.shape == (8, 2)
    assert np.allclose(S, 0.0, atol=1e-9)
    # offset the future of one trajectory by a vector of norm d after the history window
    d = np.array([0.3, 0.4])
    shifted = cal1[0].states.copy()
    shifted[3:] += d
    S = pr.calib_scores(model, [JointObstacleTrajectory(shifted, 102), cal1[1]], t=2, T=10)
    assert np.allclose(S[:, 0], 0.5, atol=1e-9)
    # ordering only permutes columns
    S1 = pr.calib_scores(model, noisy_set(4, T=10, d=2, offset=200), t=1, T=10)
    S2 = pr.calib_scores(model, noisy_set(4, T=10, d=2, offset=200)[::-1], t=1, T=10)
    assert np.array_equal(S1, S2[:, ::-1])


def test_calib_scores_split_hygiene():
    train = noisy_set(10, d=2)
    model = pr.fit(train)
    with pytest.raises(SplitViolation):
        pr.calib_scores(model, train[:2], t=0, T=12)
    other = noisy_set(3, d=2, offset=50)
    with pytest.raises(SplitViolation):
        pr.calib_scores(model, other, t=0, T=12, exclude_ids=[51])
    assert pr.calib_scores(model, other, t=0, T=12).shape == (12, 3)


def test_model_roundtrip(tmp_path):
    model = pr.fit(noisy_set(10), window=2)
    path = tmp_path / "m.json"
    model.save(path)
    doc = json.loads(path.read_text())
    assert doc["format"] == "fbcp.predictor" and doc["version"] == 1 and doc["trained_on"] == "train"
    back = pr.PredictorModel.load(path)
    assert np.array_equal(back.coefficients, model.coefficients)
    assert np.array_equal(back.intercept, model.intercept)
    assert back.train_ids == model.train_ids
    with pytest.raises(InvalidInput):
        pr.PredictorModel.from_json({**doc, "version": 2})
    with pytest.raises(InvalidInput):
        pr.PredictorModel(2, model.coefficients, model.intercept, 0.0, trained_on="cal1")
