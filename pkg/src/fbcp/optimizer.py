"""Lower-stage shrinking-horizon trajectory optimisation.

The problem at time ``t`` is single-shooting over the controls
``u_t .. u_{T-1}``: states are a deterministic function of the controls, so
the dynamics hold exactly by construction. Constraints:

* collision: ``||p_tau - Yhat_{tau,j}|| - r >= L C_tau`` for every step and obstacle
* terminal: ``||p_T - p_target|| <= target_tol``
* box on the controls.

Two backends are available. ``"slsqp"`` (default) hands the NLP with exact
forward-sensitivity Jacobians to SciPy's SLSQP. ``"scp"`` is a sequential
convex method with an l1 exact penalty and a trust region whose QPs are
solved by the Clarabel interior-point solver. Every returned plan is re-simulated and
re-checked independently of the solver.
"""
from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import clarabel
import scipy.sparse as sp
from scipy.optimize import minimize, nnls

from . import dynamics as dyn
from .constraints import ConstraintSpec, constraint_margin
from .errors import Infeasible, InvalidInput, SolverDiverged

FEAS_TOL = 1e-6
KKT_TOL = 1e-6
_SMOOTH = 1e-12


@dataclass(frozen=True)
class LowerStageProblem:
    """One instance of the lower-stage problem at time ``t``.

    ``centers`` is ``(T - t, 2 M)`` (rows ``tau = t+1..T``) and ``radii`` the
    matching conformal radii.
    """

    model: str
    x_t: np.ndarray
    t: int
    T: int
    dt: float
    centers: np.ndarray
    radii: np.ndarray
    target: np.ndarray
    target_tol: float = 0.2
    cost_weights: np.ndarray = field(default_factory=lambda: np.array([100.0, 1.0]))
    constraint: ConstraintSpec = field(default_factory=ConstraintSpec)

    def __post_init__(self):
        for name in ("x_t", "centers", "radii", "target", "cost_weights"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=float))
        if self.model not in dyn.MODELS:
            raise InvalidInput(f"unknown model {self.model!r}")
        if not 0 <= self.t < self.T:
            raise InvalidInput("need 0 <= t < T")
        if self.x_t.shape != (dyn.STATE_DIM[self.model],) or not np.all(np.isfinite(self.x_t)):
            raise InvalidInput("x_t must be a finite state vector")
        if self.centers.ndim != 2 or self.centers.shape[0] != self.horizon or self.centers.shape[1] % 2:
            raise InvalidInput("centers must be (T - t, 2 M)")
        if self.radii.shape != (self.horizon,) or np.any(self.radii < 0):
            raise InvalidInput("radii must be nonnegative, one per future step")
        if self.cost_weights.shape != (dyn.CONTROL_DIM[self.model],) or np.any(self.cost_weights < 0):
            raise InvalidInput("cost weights must be nonnegative, one per control channel")

    @property
    def horizon(self) -> int:
        return self.T - self.t

    @property
    def n_obstacles(self) -> int:
        return self.centers.shape[1] // 2

    @property
    def required_clearance(self) -> np.ndarray:
        """``r + L C_tau`` per step."""
        return self.constraint.radius + self.constraint.lipschitz * self.radii

    def cost(self, U) -> float:
        U = np.asarray(U, dtype=float)
        return float(np.sum(U * U * self.cost_weights))

    def with_radii(self, radii) -> "LowerStageProblem":
        return LowerStageProblem(self.model, self.x_t, self.t, self.T, self.dt, self.centers,
                                 np.asarray(radii, dtype=float), self.target, self.target_tol,
                                 self.cost_weights, self.constraint)


@dataclass(frozen=True)
class EgoTrajectoryPlan:
    """Planned controls ``u_t..u_{T-1}`` and the states ``x_{t+1}..x_T`` they produce."""

    t: int
    x_t: np.ndarray
    states: np.ndarray
    controls: np.ndarray
    cost: float
    feasible: bool
    iterations: int
    clearances: np.ndarray
    converged: bool = True
    backend: str = "slsqp"

    @property
    def positions(self) -> np.ndarray:
        return self.states[:, :2]

    def shifted(self) -> np.ndarray:
        """Controls for a warm start one step later."""
        return np.array(self.controls[1:])


@dataclass(frozen=True)
class ActiveSetPartition:
    active: frozenset
    inactive: frozenset

    def __post_init__(self):
        if self.active & self.inactive:
            raise InvalidInput("active and inactive sets overlap")

    @property
    def n_active(self) -> int:
        return len(self.active)


def inflated_clearances(problem: LowerStageProblem, positions: np.ndarray) -> np.ndarray:
    """``c(p_tau, Yhat_tau) - L C_tau`` per future step (``-inf`` for infinite radii)."""
    raw = constraint_margin(problem.constraint, positions, problem.centers)
    return np.atleast_1d(raw) - problem.constraint.lipschitz * problem.radii


def _simulate_checked(problem: LowerStageProblem, U: np.ndarray) -> np.ndarray:
    """Independent re-simulation through :func:`fbcp.dynamics.step`."""
    x = problem.x_t
    out = np.empty((U.shape[0], x.size))
    for k in range(U.shape[0]):
        x = dyn.step(problem.model, x, U[k], problem.dt)
        out[k] = x
    return out


def make_plan(problem: LowerStageProblem, U, iterations: int = 0, converged: bool = True,
              backend: str = "slsqp") -> EgoTrajectoryPlan:
    """Build a plan from controls and certify it by re-evaluating every constraint."""
    lo, hi = dyn.control_bounds(problem.model)
    U = np.clip(np.asarray(U, dtype=float).reshape(problem.horizon, lo.size), lo, hi)
    if not np.all(np.isfinite(U)):
        raise SolverDiverged("non-finite controls")
    X = _simulate_checked(problem, U)
    clear = inflated_clearances(problem, X[:, :2])
    term = float(np.linalg.norm(X[-1, :2] - problem.target))
    feasible = bool(np.all(clear >= -FEAS_TOL) and term <= problem.target_tol + FEAS_TOL)
    U.setflags(write=False)
    X.setflags(write=False)
    clear.setflags(write=False)
    return EgoTrajectoryPlan(problem.t, problem.x_t, X, U, problem.cost(U), feasible, int(iterations),
                             clear, converged, backend)


def verify_plan(problem: LowerStageProblem, plan: EgoTrajectoryPlan) -> bool:
    """Re-check dynamics (1e-8), control box, inflated collision and terminal constraints."""
    lo, hi = dyn.control_bounds(problem.model)
    U = np.asarray(plan.controls)
    if U.shape != (problem.horizon, lo.size) or np.any(U < lo - 1e-12) or np.any(U > hi + 1e-12):
        return False
    X = _simulate_checked(problem, U)
    resid = X - plan.states
    if problem.model == dyn.KINEMATIC:
        resid[:, 2] = dyn.wrap_angle(resid[:, 2])
    if np.max(np.abs(resid), initial=0.0) > 1e-8:
        return False
    if np.any(inflated_clearances(problem, X[:, :2]) < -FEAS_TOL):
        return False
    return bool(np.linalg.norm(X[-1, :2] - problem.target) <= problem.target_tol + FEAS_TOL)


def identify_active_set(plan: EgoTrajectoryPlan, problem: LowerStageProblem,
                        tol_act: float | None = None) -> ActiveSetPartition:
    """Steps whose inflated collision constraint holds within ``tol_act`` of equality."""
    if not plan.feasible:
        raise InvalidInput("active-set identification needs a feasible plan")
    if tol_act is None:
        tol_act = default_activity_tolerance(problem)
    clear = inflated_clearances(problem, plan.positions)
    taus = np.arange(problem.t + 1, problem.T + 1)
    act = frozenset(int(k) for k in taus[clear <= tol_act])
    return ActiveSetPartition(act, frozenset(int(k) for k in taus) - act)


def default_activity_tolerance(problem: LowerStageProblem) -> float:
    finite = problem.required_clearance[np.isfinite(problem.required_clearance)]
    scale = float(np.mean(finite)) if finite.size else problem.constraint.radius
    return 1e-5 * scale


# --------------------------------------------------------------------------- SLSQP backend


class _Shooting:
    """Memoised rollout and Jacobian for the SciPy callbacks.

    The decision vector is ``z = sqrt(w) * u`` (unit scale for zero weights),
    which turns the cost into ``||z||^2`` and keeps SLSQP's quasi-Newton model
    well conditioned.
    """

    def __init__(self, problem: LowerStageProblem):
        self.p = problem
        self._key = None
        self.n_u = dyn.CONTROL_DIM[problem.model]
        self.req = problem.required_clearance
        w = np.tile(problem.cost_weights, problem.horizon)
        self.scale = np.where(w > 0, np.sqrt(w), 1.0)
        self.cw = w / self.scale ** 2

    def controls(self, z):
        return (z / self.scale).reshape(self.p.horizon, self.n_u)

    def _eval(self, z):
        key = z.tobytes()
        if key != self._key:
            X, J = dyn.rollout_with_jacobian(self.p.model, self.p.x_t, self.controls(z), self.p.dt)
            self._P, self._JP = X[1:, :2], J[1:, :2, :] / self.scale
            self._key = key
        return self._P, self._JP

    def cost(self, z):
        return float(np.sum(self.cw * z * z))

    def cost_grad(self, z):
        return 2.0 * self.cw * z

    def collision(self, z):
        P, _ = self._eval(z)
        diff = P[:, None, :] - self.p.centers.reshape(self.p.horizon, -1, 2)
        d = np.sqrt(np.sum(diff * diff, axis=-1) + _SMOOTH)
        return (d - self.req[:, None]).ravel()

    def collision_jac(self, z):
        P, JP = self._eval(z)
        diff = P[:, None, :] - self.p.centers.reshape(self.p.horizon, -1, 2)
        d = np.sqrt(np.sum(diff * diff, axis=-1) + _SMOOTH)
        n = diff / d[..., None]
        return np.einsum("kjc,kcn->kjn", n, JP).reshape(-1, z.size)

    def terminal(self, z):
        P, _ = self._eval(z)
        e = P[-1] - self.p.target
        return np.array([self.p.target_tol ** 2 - e @ e])

    def terminal_jac(self, z):
        P, JP = self._eval(z)
        e = P[-1] - self.p.target
        return (-2.0 * e @ JP[-1])[None, :]


def _slsqp(problem: LowerStageProblem, U0: np.ndarray, max_iter: int):
    sh = _Shooting(problem)
    lo, hi = dyn.control_bounds(problem.model)
    lo_z, hi_z = np.tile(lo, problem.horizon) * sh.scale, np.tile(hi, problem.horizon) * sh.scale
    cons = [{"type": "ineq", "fun": sh.terminal, "jac": sh.terminal_jac}]
    if problem.n_obstacles:
        cons.append({"type": "ineq", "fun": sh.collision, "jac": sh.collision_jac})
    z0 = np.clip(np.asarray(U0, dtype=float).ravel() * sh.scale, lo_z, hi_z)
    with np.errstate(all="ignore"), warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        res = minimize(sh.cost, z0, jac=sh.cost_grad, method="SLSQP", bounds=list(zip(lo_z, hi_z)),
                       constraints=cons, options={"maxiter": max_iter, "ftol": 1e-10})
    if not np.all(np.isfinite(res.x)):
        raise SolverDiverged("SLSQP produced non-finite iterates")
    return sh.controls(res.x).ravel(), int(res.nit), bool(res.success)


def kkt_residual(problem: LowerStageProblem, U, act_tol: float = 1e-7) -> float:
    """Relative stationarity residual of a feasible control sequence.

    Works in the scaled variables of the SLSQP backend: finds the
    nonnegative multipliers on the (nearly) active collision, terminal and
    box constraints that best cancel the cost gradient and returns
    ``||grad - A lam|| / max(1, ||grad||)``. Zero means a KKT point.
    """
    sh = _Shooting(problem)
    lo, hi = dyn.control_bounds(problem.model)
    z = np.asarray(U, dtype=float).ravel() * sh.scale
    g = sh.cost_grad(z)
    cols = []
    if problem.n_obstacles:
        act = sh.collision(z) <= act_tol
        cols.append(sh.collision_jac(z)[act])
    if sh.terminal(z)[0] <= act_tol * max(1.0, problem.target_tol):
        cols.append(sh.terminal_jac(z))
    eye = np.eye(z.size)
    lo_z, hi_z = np.tile(lo, problem.horizon) * sh.scale, np.tile(hi, problem.horizon) * sh.scale
    cols.append(eye[z - lo_z <= 1e-9])
    cols.append(-eye[hi_z - z <= 1e-9])
    A = np.vstack(cols).T if cols else np.zeros((z.size, 0))
    if A.shape[1] == 0:
        r = float(np.linalg.norm(g))
    else:
        _, r = nnls(A, g)
    return float(r) / max(1.0, float(np.linalg.norm(g)))


# --------------------------------------------------------------------------- SCP backend

_N_TERMINAL_FACES = 16
_MU_MAX = 1e9


def _terminal_polygon(problem):
    faces = np.array([[math.cos(a), math.sin(a)]
                      for a in 2 * math.pi * np.arange(_N_TERMINAL_FACES) / _N_TERMINAL_FACES])
    return faces, problem.target_tol * math.cos(math.pi / _N_TERMINAL_FACES)


def _penalty_violation(problem, P):
    """l1 collision violation plus the terminal polygon's largest face violation."""
    v = 0.0
    if problem.n_obstacles:
        d = np.linalg.norm(P[:, None, :] - problem.centers.reshape(problem.horizon, -1, 2), axis=-1)
        v += float(np.sum(np.maximum(0.0, problem.required_clearance[:, None] - d)))
    faces, h = _terminal_polygon(problem)
    return v + max(0.0, float(np.max(faces @ (P[-1] - problem.target))) - h)


def _scp(problem: LowerStageProblem, U0: np.ndarray, max_iter: int, trace: list | None,
         mu: float = 10.0, radius0: float = 1.0):
    """Sequential convex programming with an l1 penalty merit and a box trust region.

    Collision constraints are replaced by supporting half-planes of the
    distance function (an inner approximation, since the norm is convex) and
    the terminal disc by an inscribed polygon.
    """
    lo, hi = dyn.control_bounds(problem.model)
    N, nu = problem.horizon, lo.size
    n = N * nu
    w = np.tile(problem.cost_weights, N)
    U = np.clip(U0, lo, hi).ravel()
    faces, h_term = _terminal_polygon(problem)
    M = problem.n_obstacles
    centers = problem.centers.reshape(N, M, 2)
    req = problem.required_clearance
    tr = radius0
    converged = False
    it = 0

    def evaluate(z):
        X, J = dyn.rollout_with_jacobian(problem.model, problem.x_t, z.reshape(N, nu), problem.dt)
        P = X[1:, :2]
        return P, J[1:, :2, :], float(z @ (w * z)) + mu * _penalty_violation(problem, P)

    P, JP, merit = evaluate(U)
    for it in range(1, max_iter + 1):
        rows, lows = [], []
        if M:
            diff = P[:, None, :] - centers
            d = np.sqrt(np.sum(diff * diff, axis=-1) + _SMOOTH)
            nrm = diff / d[..., None]
            rows.append(np.einsum("kjc,kcn->kjn", nrm, JP).reshape(-1, n))
            lows.append((req[:, None] - d).ravel())  # g dz + s_j >= req - d
        n_col = N * M
        # all polygon faces share one slack: h - f.(p + J dz - target) + s_T >= 0
        rows.append(-(faces @ JP[-1]))
        lows.append(faces @ (P[-1] - problem.target) - h_term)
        G = np.vstack(rows)
        b = np.concatenate(lows)
        m = n_col + 1
        S = sp.vstack([sp.hstack([sp.eye(n_col), sp.csc_matrix((n_col, 1))]),
                       sp.hstack([sp.csc_matrix((_N_TERMINAL_FACES, n_col)),
                                  sp.csc_matrix(np.ones((_N_TERMINAL_FACES, 1)))])])
        # variables [dz (n), s (m)]
        Pq = sp.block_diag([sp.diags(2.0 * w), sp.csc_matrix((m, m))], format="csc")
        q = np.concatenate([2.0 * w * U, np.full(m, mu)])
        A = sp.bmat([[sp.csc_matrix(G), S], [sp.eye(n), None], [None, sp.eye(m)]], format="csc")
        lb_u = np.minimum(np.maximum(np.tile(lo, N) - U, -tr), 0.0)
        ub_u = np.maximum(np.minimum(np.tile(hi, N) - U, tr), 0.0)
        low = np.concatenate([b, lb_u, np.zeros(m)])
        up = np.concatenate([np.full(G.shape[0], np.inf), ub_u, np.full(m, np.inf)])
        res = _solve_qp(Pq, q, A, low, up)
        dz, s = res[:n], np.maximum(res[n:], 0.0)
        model_merit = float((U + dz) @ (w * (U + dz))) + mu * float(np.sum(s))
        predicted = merit - model_merit
        if predicted <= 1e-9 * max(1.0, abs(merit)):
            # stationary for this penalty weight: done if feasible, otherwise raise the weight
            if _penalty_violation(problem, P) <= 1e-9 or mu >= _MU_MAX:
                converged = True
                break
            mu *= 10.0
            merit = float(U @ (w * U)) + mu * _penalty_violation(problem, P)
            continue
        cand = np.clip(U + dz, np.tile(lo, N), np.tile(hi, N))
        Pn, JPn, merit_n = evaluate(cand)
        ratio = (merit - merit_n) / predicted
        if trace is not None:
            trace.append({"iteration": it, "trust_radius": tr, "merit": merit, "candidate_merit": merit_n,
                          "ratio": ratio, "violation": _penalty_violation(problem, P)})
        if ratio > 0.1:
            U, P, JP, merit = cand, Pn, JPn, merit_n
        if ratio > 0.75:
            tr = min(2.0 * tr, 10.0)
        elif ratio < 0.25:
            tr *= 0.3
        if tr < 1e-7:
            converged = _penalty_violation(problem, P) <= 1e-9
            break
    return U, it, converged


def _solve_qp(P, q, A, low, up) -> np.ndarray:
    """``min 1/2 x'Px + q'x`` subject to ``low <= Ax <= up`` (infinite bounds dropped)."""
    fl, fu = np.isfinite(low), np.isfinite(up)
    Ac = sp.vstack([-A[fl], A[fu]], format="csc")
    b = np.concatenate([-low[fl], up[fu]])
    settings = clarabel.DefaultSettings()
    settings.verbose = False
    solver = clarabel.DefaultSolver(sp.csc_matrix(P), q, Ac, b, [clarabel.NonnegativeConeT(b.size)], settings)
    sol = solver.solve()
    status = str(sol.status)
    if "Infeasible" in status and "Dual" not in status:
        raise Infeasible("convex subproblem infeasible")
    x = np.asarray(sol.x)
    if not np.all(np.isfinite(x)) or x.size != q.size:
        raise SolverDiverged(f"QP subproblem failed ({status})")
    return x


# --------------------------------------------------------------------------- driver


def straight_line_init(problem: LowerStageProblem) -> np.ndarray:
    """Controls that steer toward the target and match the speed needed to arrive at ``T``.

    This is the dynamics-projected version of a straight-line state
    interpolation: a proportional heading/speed tracker rolled through the
    true dynamics.
    """
    lo, hi = dyn.control_bounds(problem.model)
    N, dt = problem.horizon, problem.dt
    x = problem.x_t.copy()
    U = np.zeros((N, lo.size))
    for k in range(N):
        remaining = (N - k) * dt
        to_go = problem.target - x[:2]
        if problem.model == dyn.KINEMATIC:
            want_v = np.linalg.norm(to_go) / remaining
            heading = math.atan2(to_go[1], to_go[0])
            err = dyn.wrap_angle(heading - x[2])
            phi = math.atan(err * dyn.VEHICLE_LENGTH / max(abs(x[3]) * dt, 1e-6)) if x[3] > 1e-6 else 0.0
            u = np.array([phi, (want_v - x[3]) / dt])
        else:
            u = 2.0 * (to_go - x[2:] * remaining) / remaining ** 2
        U[k] = np.clip(u, lo, hi)
        x = dyn.step(problem.model, x, U[k], dt)
    return U


def _swerve_inits(problem: LowerStageProblem):
    lo, hi = dyn.control_bounds(problem.model)
    N = problem.horizon
    out = []
    for sign in (1.0, -1.0):
        U = np.zeros((N, lo.size))
        k = max(1, N // 4)
        if problem.model == dyn.KINEMATIC:
            U[:k, 0] = sign * 0.25 * hi[0]
            U[k:2 * k, 0] = -sign * 0.25 * hi[0]
        else:
            U[:k, 1] = sign * 0.5 * hi[1]
            U[k:2 * k, 1] = -sign * 0.5 * hi[1]
        out.append(U)
    return out


def solve_lower_stage(problem: LowerStageProblem, warm_start=None, backend: str = "slsqp",
                      max_iter: int = 200, multistart: bool | None = None,
                      trace_path=None) -> EgoTrajectoryPlan:
    """Solve the lower-stage problem and return a certified plan.

    Starts from ``warm_start`` (controls ``(T - t, n_u)``) when given; without
    one, or when the warm start fails, the straight-line initialisation and
    two swerving initialisations are tried. With ``multistart`` (default: only
    when no warm start is given) all starts run and the cheapest certified
    plan wins, which removes most left/right homotopy ambiguity.

    Raises :class:`Infeasible` when a radius is infinite or no start yields a
    certified feasible plan.
    """
    if np.any(~np.isfinite(problem.radii)):
        raise Infeasible("infinite prediction-region radius")
    if backend not in ("slsqp", "scp"):
        raise InvalidInput(f"unknown backend {backend!r}")
    nu = dyn.CONTROL_DIM[problem.model]
    inits = []
    if warm_start is not None:
        ws = np.asarray(warm_start, dtype=float)
        if ws.shape != (problem.horizon, nu):
            raise InvalidInput("warm start has the wrong shape")
        # a warm start that is already a certified KKT point is returned as is
        plan = make_plan(problem, ws, 0, True, backend)
        if plan.feasible and kkt_residual(problem, plan.controls) <= KKT_TOL:
            return plan
        inits.append(ws)
    if multistart is None:
        multistart = warm_start is None
    fallbacks = [straight_line_init(problem), np.zeros((problem.horizon, nu))] + _swerve_inits(problem)
    trace = [] if trace_path is not None else None
    best = None
    tried = 0
    for U0 in inits + fallbacks:
        if best is not None and not multistart:
            break
        tried += 1
        if backend == "slsqp":
            z, nit, ok = _slsqp(problem, U0, max_iter)
        else:
            z, nit, ok = _scp(problem, U0, max_iter, trace)
        plan = make_plan(problem, z, nit, ok, backend)
        if trace is not None and backend == "slsqp":
            trace.append({"start": tried, "iterations": nit, "success": ok, "cost": plan.cost,
                          "min_clearance": float(np.min(plan.clearances, initial=np.inf))})
        if plan.feasible and (best is None or plan.cost < best.cost - 1e-12):
            best = plan
    if trace_path is not None:
        Path(trace_path).write_text(json.dumps({"t": problem.t, "backend": backend, "iterates": trace}, indent=1))
    if best is None:
        raise Infeasible(f"no feasible plan from {tried} starts")
    return best
