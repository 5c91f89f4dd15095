"""Ego dynamics, obstacle-world synthesis and the scenario configuration."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import InvalidInput
from .trajectories import JointObstacleTrajectory

KINEMATIC = "kinematic"
DOUBLE_INTEGRATOR = "double_integrator"
MODELS = (KINEMATIC, DOUBLE_INTEGRATOR)

VEHICLE_LENGTH = 0.2
STEER_MAX = math.pi / 6
ACCEL_MAX = 5.0

STATE_DIM = {KINEMATIC: 4, DOUBLE_INTEGRATOR: 4}
CONTROL_DIM = {KINEMATIC: 2, DOUBLE_INTEGRATOR: 2}


def control_bounds(model: str) -> tuple[np.ndarray, np.ndarray]:
    """Box ``U`` for the model: ``(steer, accel)`` or ``(a_x, a_y)``."""
    if model == KINEMATIC:
        hi = np.array([STEER_MAX, ACCEL_MAX])
    elif model == DOUBLE_INTEGRATOR:
        hi = np.array([ACCEL_MAX, ACCEL_MAX])
    else:
        raise InvalidInput(f"unknown dynamics model {model!r}")
    return -hi, hi


def wrap_angle(theta):
    """Wrap to ``(-pi, pi]``."""
    theta = np.asarray(theta, dtype=float)
    # leave in-range angles bit-identical
    inside = (theta > -np.pi) & (theta <= np.pi)
    out = np.where(inside, theta, np.pi - np.mod(np.pi - theta, 2 * np.pi))
    return float(out) if np.ndim(out) == 0 else out


def check_control(model: str, u, tol: float = 1e-9) -> np.ndarray:
    u = np.asarray(u, dtype=float)
    lo, hi = control_bounds(model)
    if u.shape[-1] != lo.size:
        raise InvalidInput("control has the wrong dimension")
    if np.any(u < lo - tol) or np.any(u > hi + tol) or not np.all(np.isfinite(u)):
        raise InvalidInput(f"control {u} outside the admissible box")
    return u


def step(model: str, x, u, dt: float) -> np.ndarray:
    """Exact discrete update ``x_{t+1} = f(x_t, u_t)``.

    kinematic: state ``(p_x, p_y, theta, v)``, control ``(steer, accel)``,
    forward-Euler bicycle with wheelbase 0.2 m.
    double_integrator: state ``(p_x, p_y, v_x, v_y)``, control ``(a_x, a_y)``.
    """
    if dt <= 0:
        raise InvalidInput("dt must be positive")
    x = np.asarray(x, dtype=float)
    u = check_control(model, u)
    if x.shape != (STATE_DIM[model],) or not np.all(np.isfinite(x)):
        raise InvalidInput("state has the wrong dimension or is not finite")
    if model == KINEMATIC:
        px, py, th, v = x
        phi, a = u
        return np.array([
            px + dt * v * math.cos(th),
            py + dt * v * math.sin(th),
            wrap_angle(th + dt * v / VEHICLE_LENGTH * math.tan(phi)),
            v + dt * a,
        ])
    px, py, vx, vy = x
    ax, ay = u
    return np.array([
        px + dt * vx + 0.5 * dt * dt * ax,
        py + dt * vy + 0.5 * dt * dt * ay,
        vx + dt * ax,
        vy + dt * ay,
    ])


def rollout_with_jacobian(model: str, x0, U: np.ndarray, dt: float):
    """States ``x_0..x_N`` under controls ``U`` (``(N, n_u)``) and ``dX/dU``.

    Returns ``X`` of shape ``(N + 1, n_x)`` and ``J`` of shape
    ``(N + 1, n_x, N * n_u)`` with ``J[k]`` the sensitivity of ``x_k`` to the
    flattened control sequence (columns ordered ``u_0, u_1, ...``).

    The kinematic recursion is unrolled into prefix sums (speed is a sum of
    accelerations, heading a sum of ``v tan(phi)`` increments, position a sum
    of ``v cos/sin(theta)`` increments), so both the states and the
    sensitivities are computed without a Python loop over time.
    """
    U = np.asarray(U, dtype=float)
    x0 = np.asarray(x0, dtype=float)
    N, nu = U.shape
    nx = STATE_DIM[model]
    X = np.empty((N + 1, nx))
    J = np.zeros((N + 1, nx, N * nu))
    if N == 0:
        X[0] = x0
        return X, J
    lower = np.tri(N + 1, N, -1)  # lower[k, j] = 1 iff j < k
    if model == KINEMATIC:
        c = dt / VEHICLE_LENGTH
        phi, a = U[:, 0], U[:, 1]
        tp = np.tan(phi)
        V = x0[3] + dt * np.concatenate([[0.0], np.cumsum(a)])
        TH = x0[2] + c * np.concatenate([[0.0], np.cumsum(V[:N] * tp)])
        ct, st = np.cos(TH[:N]), np.sin(TH[:N])
        X[:, 0] = x0[0] + dt * np.concatenate([[0.0], np.cumsum(V[:N] * ct)])
        X[:, 1] = x0[1] + dt * np.concatenate([[0.0], np.cumsum(V[:N] * st)])
        X[:, 2] = wrap_angle(TH)
        X[:, 3] = V
        dV_da = dt * lower
        dTH_dphi = lower * (c * V[:N] / np.cos(phi) ** 2)[None, :]
        S = np.concatenate([[0.0], np.cumsum(tp)])  # S[m] = sum_{i<m} tan(phi_i)
        dTH_da = c * dt * lower * (S[:, None] - S[None, 1:])
        # per-step increments of x/y, differentiated, then accumulated over time
        gx_phi = -(V[:N] * st)[:, None] * dTH_dphi[:N]
        gy_phi = (V[:N] * ct)[:, None] * dTH_dphi[:N]
        gx_a = ct[:, None] * dV_da[:N] - (V[:N] * st)[:, None] * dTH_da[:N]
        gy_a = st[:, None] * dV_da[:N] + (V[:N] * ct)[:, None] * dTH_da[:N]
        zero = np.zeros((1, N))
        J[:, 0, 0::2] = dt * np.vstack([zero, np.cumsum(gx_phi, axis=0)])
        J[:, 0, 1::2] = dt * np.vstack([zero, np.cumsum(gx_a, axis=0)])
        J[:, 1, 0::2] = dt * np.vstack([zero, np.cumsum(gy_phi, axis=0)])
        J[:, 1, 1::2] = dt * np.vstack([zero, np.cumsum(gy_a, axis=0)])
        J[:, 2, 0::2] = dTH_dphi
        J[:, 2, 1::2] = dTH_da
        J[:, 3, 1::2] = dV_da
        return X, J
    # double integrator: x_k = A^k x_0 + sum_j A^{k-1-j} B u_j, with A^m = [[I, m dt I], [0, I]]
    steps = np.arange(N + 1)
    X[:, :2] = x0[:2] + steps[:, None] * dt * x0[2:]
    X[:, 2:] = x0[2:]
    lag = (steps[:, None] - np.arange(N)[None, :] - 1) * lower  # k - 1 - j for j < k
    pos_gain = lower * (0.5 * dt * dt + lag * dt * dt)
    vel_gain = lower * dt
    for ax in range(2):
        J[:, ax, ax::2] = pos_gain
        J[:, 2 + ax, ax::2] = vel_gain
    X = X + np.einsum("knj,j->kn", J, U.ravel())
    return X, J


def simulate(model: str, x0, U: np.ndarray, dt: float) -> np.ndarray:
    """State sequence without sensitivities."""
    return rollout_with_jacobian(model, np.asarray(x0, dtype=float), U, dt)[0]


# --------------------------------------------------------------------------- scenarios


def _default_obstacle_means():
    # three pedestrians, initially at rest, crossing the ego corridor y = 0 from alternating sides
    return [[2.4, -2.6, 0.0, 0.0], [3.6, 2.8, 0.0, 0.0], [4.4, -3.2, 0.0, 0.0]]


def _default_waypoints():
    return [[2.4, 2.6], [3.6, -2.6], [4.4, 2.6]]


@dataclass
class ScenarioConfig:
    """Everything needed to synthesise one benchmark world.

    Obstacles follow the double-integrator kernel driven by a clipped PD law
    toward fixed waypoints plus Gaussian acceleration noise. Initial obstacle
    states are Gaussian with per-obstacle means ``obstacle_means`` and a shared
    diagonal standard deviation ``init_std``. In shift mode the test population
    draws its initial positions from a shifted Gaussian
    (``test_position_offset``, shared or per obstacle, and ``test_position_std``) and the noise standard
    deviation grows with speed as ``noise_std * (1 + noise_kappa * ||v||)``.
    """

    model: str = KINEMATIC
    dt: float = 0.125
    T: int = 20
    ego_init: list = field(default_factory=lambda: [0.0, 0.0, 0.0, 2.0])
    target: list = field(default_factory=lambda: [5.0, 0.0])
    target_tol: float = 0.2
    cost_weights: list = field(default_factory=lambda: [100.0, 1.0])
    obstacle_means: list = field(default_factory=_default_obstacle_means)
    init_std: list = field(default_factory=lambda: [0.25, 0.25, 0.15, 0.15])
    waypoints: list = field(default_factory=_default_waypoints)
    kp: float = 0.8
    kd: float = 0.4
    accel_limit: float = 10.0
    noise_std: float = 0.3
    noise_kappa: float = 0.0
    shift: bool = False
    test_position_offset: list = field(default_factory=lambda: [0.0, 0.0])
    test_position_std: list | None = None
    seed: int = 2025
    r_robot: float = 0.2
    r_obstacle: float = 0.2
    r_safety: float = 0.1

    def __post_init__(self):
        if self.model not in MODELS:
            raise InvalidInput(f"unknown model {self.model!r}")
        if self.dt <= 0 or self.T < 1 or self.M < 1:
            raise InvalidInput("need dt > 0, T >= 1 and at least one obstacle")
        if np.any(np.asarray(self.init_std) < 0) or np.any(np.asarray(self.test_stds) < 0):
            raise InvalidInput("standard deviations must be nonnegative")
        if np.asarray(self.waypoints).shape != (self.M, 2):
            raise InvalidInput("one 2-D waypoint per obstacle required")
        if np.asarray(self.test_position_offset).shape not in ((2,), (self.M, 2)):
            raise InvalidInput("test_position_offset must be one 2-D offset or one per obstacle")
        if len(self.cost_weights) != CONTROL_DIM[self.model]:
            raise InvalidInput("one cost weight per control channel required")

    @property
    def M(self) -> int:
        return len(self.obstacle_means)

    @property
    def test_stds(self) -> np.ndarray:
        std = self.init_std[:2] if self.test_position_std is None else self.test_position_std
        return np.asarray(std, dtype=float)

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, doc: dict) -> "ScenarioConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(doc) - known
        if unknown:
            raise InvalidInput(f"unknown scenario keys {sorted(unknown)}")
        return cls(**doc)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=2, sort_keys=True))

    @classmethod
    def load(cls, path) -> "ScenarioConfig":
        return cls.from_json(json.loads(Path(path).read_text()))


CALIBRATION = "calibration"
TEST = "test"
_POPULATION_CODE = {CALIBRATION: 0, TEST: 1}


def trajectory_rng(seed: int, population: str, trajectory_id: int) -> np.random.Generator:
    """Philox stream for one trajectory.

    The stream is keyed by ``(seed, population, id)`` through
    ``SeedSequence.spawn_key``, so trajectories can be generated in any order
    or on any worker and come out identical.
    """
    ss = np.random.SeedSequence(int(seed), spawn_key=(_POPULATION_CODE[population], int(trajectory_id)))
    return np.random.Generator(np.random.Philox(ss))


def initial_position_params(config: ScenarioConfig, population: str):
    """Mean ``(M, 2)`` and std ``(2,)`` of the initial obstacle positions."""
    means = np.asarray(config.obstacle_means, dtype=float)[:, :2]
    if population == TEST and config.shift:
        return means + np.asarray(config.test_position_offset, dtype=float), config.test_stds
    return means, np.asarray(config.init_std[:2], dtype=float)


def _obstacle_accel(config: ScenarioConfig, pos, vel, wps):
    acc = config.kp * (wps - pos) - config.kd * vel
    n = np.linalg.norm(acc, axis=-1, keepdims=True)
    scale = np.minimum(1.0, config.accel_limit / np.maximum(n, 1e-300))
    return acc * scale


def generate_obstacles(config: ScenarioConfig, count: int, population: str = CALIBRATION,
                       id_offset: int = 0) -> list[JointObstacleTrajectory]:
    """Sample ``count`` joint obstacle trajectories.

    Each obstacle starts from its Gaussian initial state and follows the
    double-integrator kernel (``p += dt v + dt^2/2 a``, ``v += dt a``) with a
    norm-clipped PD acceleration toward its waypoint plus Gaussian acceleration
    noise. Deterministic in ``(config, population, id)``.
    """
    if count < 1:
        raise InvalidInput("count must be >= 1")
    if population not in _POPULATION_CODE:
        raise InvalidInput(f"unknown population {population!r}")
    M, T, dt = config.M, config.T, config.dt
    mean_pos, std_pos = initial_position_params(config, population)
    mean_vel = np.asarray(config.obstacle_means, dtype=float)[:, 2:]
    std_vel = np.asarray(config.init_std[2:], dtype=float)
    wps = np.asarray(config.waypoints, dtype=float)
    ids = np.arange(count) + id_offset
    pos = np.empty((count, M, 2))
    vel = np.empty((count, M, 2))
    z = np.empty((count, T, M, 2))
    for n, i in enumerate(ids):
        rng = trajectory_rng(config.seed, population, i)
        pos[n] = mean_pos + std_pos * rng.standard_normal((M, 2))
        vel[n] = mean_vel + std_vel * rng.standard_normal((M, 2))
        z[n] = rng.standard_normal((T, M, 2))
    out = np.empty((count, T + 1, M, 2))
    out[:, 0] = pos
    for t in range(T):
        acc = _obstacle_accel(config, pos, vel, wps)
        sigma = config.noise_std
        if config.shift and config.noise_kappa:
            sigma = sigma * (1.0 + config.noise_kappa * np.linalg.norm(vel, axis=-1, keepdims=True))
        acc = acc + sigma * z[:, t]
        pos = pos + dt * vel + 0.5 * dt * dt * acc
        vel = vel + dt * acc
        out[:, t + 1] = pos
    flat = out.reshape(count, T + 1, 2 * M)
    return [JointObstacleTrajectory(flat[n], int(i)) for n, i in enumerate(ids)]


def _log_gauss(y, mean, std):
    z = (y - mean) / std
    return -0.5 * np.sum(z * z, axis=(-1, -2)) - np.sum(np.log(std)) * mean.shape[0]


def initial_density_ratio(config: ScenarioConfig, initial_positions) -> np.ndarray:
    """Oracle likelihood ratio ``p_test(Y_0) / p_cal(Y_0)``.

    Test and calibration populations share the velocity distribution and the
    transition kernel, so the ratio of trajectory densities reduces to the
    ratio of initial-position densities. ``initial_positions`` is
    ``(..., 2 M)``. Identical populations give exactly 1.
    """
    y = np.asarray(initial_positions, dtype=float)
    y = y.reshape(y.shape[:-1] + (config.M, 2))
    mt, st = initial_position_params(config, TEST)
    mc, sc = initial_position_params(config, CALIBRATION)
    if np.array_equal(mt, mc) and np.array_equal(st, sc):
        return np.ones(y.shape[:-2])
    return np.exp(_log_gauss(y, mt, st) - _log_gauss(y, mc, sc))
