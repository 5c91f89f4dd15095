"""Shrinking-horizon episodes, Monte Carlo campaigns, audits and reporting."""
from __future__ import annotations

import csv
import io
import json
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import conformal as cp
from . import dynamics as dyn
from .constraints import ConstraintSpec, constraint_margin
from .errors import (BudgetExhausted, Infeasible, InvalidInput, InvariantViolation, SolverDiverged)
from .optimizer import (LowerStageProblem, identify_active_set, solve_lower_stage, verify_plan)
from .predictor import PredictorModel, fit, pad_history, prediction_table, residual_table, rollout_batch
from .risk import IRAConfig, allocate_ara, floor_allocation, RiskAllocation, run_ira
from .trajectories import TrajectoryDataset, merge_datasets, split_dataset

S_CP = "S-CP"
FB_ARA = "Fb-CP-ARA"
FB_IRA = "Fb-CP-IRA"
WFB_ARA = "WFb-CP-ARA"
WFB_IRA = "WFb-CP-IRA"
HYBRID = "Fb-CP-hybrid"
METHODS = (S_CP, FB_ARA, FB_IRA, WFB_ARA, WFB_IRA, HYBRID)
WEIGHTED = (WFB_ARA, WFB_IRA)


# --------------------------------------------------------------------------- configuration


@dataclass
class CampaignConfig:
    """A full Monte Carlo study: scenario, dataset sizes, methods and risk budgets."""

    scenario: dyn.ScenarioConfig = field(default_factory=dyn.ScenarioConfig)
    methods: list = field(default_factory=lambda: [S_CP, FB_ARA, FB_IRA])
    alphas: list = field(default_factory=lambda: [0.1, 0.2])
    n_episodes: int = 500
    n_train: int = 500
    n_cal1: int = 1000
    n_cal2: int = 1000
    n_test: int = 1000
    t_s: int | None = None
    ira: IRAConfig = field(default_factory=IRAConfig)
    window: int = 2
    ridge: float = 1e-6
    scp_calibration: str = "cal1"
    backend: str = "slsqp"

    def __post_init__(self):
        if isinstance(self.scenario, dict):
            self.scenario = dyn.ScenarioConfig.from_json(self.scenario)
        if isinstance(self.ira, dict):
            self.ira = IRAConfig(**self.ira)
        unknown = set(self.methods) - set(METHODS)
        if unknown or not self.methods:
            raise InvalidInput(f"unknown or empty method list {sorted(unknown)}")
        if HYBRID in self.methods and (self.t_s is None or not 0 <= self.t_s <= self.scenario.T):
            raise InvalidInput("the hybrid method needs 0 <= t_s <= T")
        if any(not 0.0 < a < 1.0 for a in self.alphas) or not self.alphas:
            raise InvalidInput("alphas must lie in (0, 1)")
        if self.n_episodes < 1 or self.n_episodes > self.n_test:
            raise InvalidInput("need 1 <= n_episodes <= n_test")
        if min(self.n_train, self.n_cal1, self.n_cal2) < 1:
            raise InvalidInput("train, cal1 and cal2 splits must be nonempty")
        if self.scp_calibration not in ("cal1", "full"):
            raise InvalidInput("scp_calibration must be 'cal1' or 'full'")
        if self.backend not in ("slsqp", "scp"):
            raise InvalidInput("backend must be 'slsqp' or 'scp'")

    @property
    def n_cal(self) -> int:
        return self.n_cal1 + self.n_cal2

    def to_json(self) -> dict:
        doc = asdict(self)
        doc["scenario"] = self.scenario.to_json()
        doc["ira"] = asdict(self.ira)
        return doc

    @classmethod
    def from_json(cls, doc: dict) -> "CampaignConfig":
        unknown = set(doc) - set(cls.__dataclass_fields__)
        if unknown:
            raise InvalidInput(f"unknown campaign keys {sorted(unknown)}")
        return cls(**doc)

    @classmethod
    def load(cls, path) -> "CampaignConfig":
        return cls.from_json(json.loads(Path(path).read_text()))


# --------------------------------------------------------------------------- data and calibration


def generate_dataset(config: CampaignConfig) -> TrajectoryDataset:
    """Calibration-population draws split into train/cal1/cal2 plus a test-population draw."""
    sc = config.scenario
    n_pool = config.n_train + config.n_cal
    pool = dyn.generate_obstacles(sc, n_pool, dyn.CALIBRATION, id_offset=0)
    part = split_dataset(pool, (config.n_train, config.n_cal1, config.n_cal2, 0), seed=sc.seed)
    test = dyn.generate_obstacles(sc, config.n_test, dyn.TEST, id_offset=n_pool)
    test_part = TrajectoryDataset({tr.trajectory_id: tr for tr in test},
                                  {tr.trajectory_id: "test" for tr in test})
    return merge_datasets(part, test_part)


@dataclass
class CalibrationTables:
    """Everything an episode needs from the calibration splits, computed once.

    ``scores[t]`` is ``(T - t, K)`` with the cal1 prediction-error scores for
    rows ``tau = t+1..T``; ``sorted_scores[t]`` is the same, row-sorted, and
    ``order[t]`` the stable sorting permutation. ``full_sorted`` holds the
    sorted scores over cal1 and cal2 together (for S-CP with full
    calibration). ``cal2_residuals`` is ``(L, T + 1, d)``.
    """

    T: int
    scores: list
    sorted_scores: list
    order: list
    full_sorted: list
    cal2_residuals: np.ndarray
    cal1_initial: np.ndarray
    cal2_initial: np.ndarray

    @property
    def K(self) -> int:
        return self.scores[0].shape[1]

    @property
    def L(self) -> int:
        return self.cal2_residuals.shape[0]


def _score_table(model: PredictorModel, states: np.ndarray, t: int) -> np.ndarray:
    pred = prediction_table(model, states, t)
    return np.linalg.norm(states[:, t + 1:] - pred, axis=-1).T


def build_calibration(model: PredictorModel, dataset: TrajectoryDataset) -> CalibrationTables:
    cal1_ids = set(int(i) for i in dataset.ids("cal1"))
    cal2_ids = set(int(i) for i in dataset.ids("cal2"))
    from .errors import SplitViolation
    if cal1_ids & set(model.train_ids) or cal2_ids & set(model.train_ids) or cal1_ids & cal2_ids:
        raise SplitViolation("calibration splits overlap the training split or each other")
    s1 = dataset.states("cal1")
    s2 = dataset.states("cal2")
    T = s1.shape[1] - 1
    scores, sorted_, order, full = [], [], [], []
    for t in range(T):
        r1 = _score_table(model, s1, t)
        r2 = _score_table(model, s2, t)
        o = np.argsort(r1, axis=1, kind="stable")
        scores.append(r1)
        order.append(o)
        sorted_.append(np.take_along_axis(r1, o, axis=1))
        full.append(np.sort(np.concatenate([r1, r2], axis=1), axis=1))
    return CalibrationTables(T, scores, sorted_, order, full, residual_table(model, s2), s1[:, 0], s2[:, 0])


class EpisodeRegions:
    """Radii, tightening bounds and posterior risks for one test trajectory.

    ``weights1`` / ``weights2`` are likelihood weights over cal1 / cal2 (or
    ``None`` for plain exchangeable calibration). Uniform weights use the
    unweighted formulas, so they reproduce them bit for bit.
    """

    def __init__(self, tables: CalibrationTables, constraint: ConstraintSpec,
                 weights1: cp.LikelihoodWeights | None = None,
                 weights2: cp.LikelihoodWeights | None = None, full: bool = False):
        self.tables = tables
        self.constraint = constraint
        self.w1 = None if weights1 is None or weights1.is_uniform else weights1
        self.w2 = None if weights2 is None or weights2.is_uniform else weights2
        self.full = full
        self._cum = {}

    @property
    def floor(self) -> float:
        """Smallest risk with a finite radius, plus a hair."""
        if self.w1 is not None:
            return self.w1.test_weight + 1e-9
        K = self.tables.full_sorted[0].shape[1] if self.full else self.tables.K
        return 1.0 / (K + 1) + 1e-9

    def radii(self, t: int, alphas) -> np.ndarray:
        alphas = np.asarray(alphas, dtype=float)
        if self.full:
            return cp.radii_from_sorted(self.tables.full_sorted[t], alphas)
        if self.w1 is None:
            return cp.radii_from_sorted(self.tables.sorted_scores[t], alphas)
        if t not in self._cum:
            self._cum[t] = np.cumsum(self.w1.calib_weights[self.tables.order[t]], axis=1)
        cum = self._cum[t]
        srt = self.tables.sorted_scores[t]
        out = np.full(alphas.size, np.inf)
        for r, a in enumerate(alphas):
            idx = int(np.searchsorted(cum[r], 1.0 - a, side="left"))
            if idx < srt.shape[1]:
                out[r] = srt[r, idx]
        return out

    def lower_bounds(self, t: int, raw_clearance) -> np.ndarray:
        """Tightest risk per step that keeps a plan with ``raw_clearance`` feasible."""
        c = np.asarray(raw_clearance, dtype=float)[:, None]
        hit = c < self.constraint.lipschitz * self.tables.scores[t]
        if self.w1 is None:
            return (1.0 + hit.sum(axis=1)) / (1.0 + self.tables.K)
        return np.minimum(self.w1.test_weight + hit.astype(float) @ self.w1.calib_weights, 1.0)

    def beta(self, t: int, ego_pos, one_step_center) -> float:
        errs = self.tables.cal2_residuals[:, t]
        if self.w2 is None:
            return cp.posterior_risk(ego_pos, one_step_center, errs, self.constraint)
        return cp.weighted_posterior_risk(ego_pos, one_step_center, errs, self.constraint, self.w2)


@dataclass
class World:
    """Dataset, predictor, calibration tables and (in shift mode) likelihood ratios."""

    config: CampaignConfig
    dataset: TrajectoryDataset
    model: PredictorModel
    tables: CalibrationTables

    @property
    def constraint(self) -> ConstraintSpec:
        sc = self.config.scenario
        return ConstraintSpec(sc.r_robot, sc.r_obstacle, sc.r_safety)

    def ratios(self, initial_states) -> np.ndarray:
        return dyn.initial_density_ratio(self.config.scenario, initial_states)

    def weights_for(self, test_initial):
        """Likelihood weights over cal1 and cal2 for one test trajectory."""
        v_test = float(self.ratios(test_initial))
        w1 = cp.likelihood_weights(self.ratios(self.tables.cal1_initial), v_test)
        w2 = cp.likelihood_weights(self.ratios(self.tables.cal2_initial), v_test)
        return w1, w2


def build_world(config: CampaignConfig, dataset: TrajectoryDataset | None = None,
                model: PredictorModel | None = None) -> World:
    if dataset is None:
        dataset = generate_dataset(config)
    if model is None:
        model = fit(dataset.split("train"), window=config.window, ridge=config.ridge)
    return World(config, dataset, model, build_calibration(model, dataset))


# --------------------------------------------------------------------------- episodes


@dataclass
class EpisodeRecord:
    """One closed-loop run of one method on one test trajectory."""

    method: str
    seed: int
    alpha: float
    ego_states: np.ndarray
    controls: np.ndarray
    obstacle_states: np.ndarray
    step_costs: np.ndarray
    plan_costs: np.ndarray
    betas: np.ndarray
    allocations: np.ndarray
    radii: np.ndarray
    ira_iterations: np.ndarray
    ira_traces: list
    infeasible_steps: list
    budget_exhausted: bool
    invariant_events: int
    wall_clock: np.ndarray
    constraint: ConstraintSpec = field(default_factory=ConstraintSpec)

    @property
    def cost(self) -> float:
        return math.fsum(self.step_costs)

    @property
    def realized_clearance(self) -> np.ndarray:
        """``c(p_tau, Y_tau)`` for ``tau = 1..T`` on realized states."""
        return constraint_margin(self.constraint, self.ego_states[1:, :2], self.obstacle_states[1:])

    @property
    def collision(self) -> bool:
        return bool(np.any(self.realized_clearance < 0))

    @property
    def infeasible(self) -> bool:
        return bool(self.infeasible_steps)

    def to_json(self) -> dict:
        return {
            "method": self.method, "seed": self.seed, "alpha": self.alpha,
            "cost": self.cost, "collision": self.collision, "infeasible": self.infeasible,
            "infeasible_steps": list(self.infeasible_steps), "budget_exhausted": self.budget_exhausted,
            "invariant_events": self.invariant_events,
            "ego_states": json_array(self.ego_states), "controls": json_array(self.controls),
            "step_costs": json_array(self.step_costs), "plan_costs": json_array(self.plan_costs),
            "betas": json_array(self.betas), "allocations": json_array(self.allocations),
            "radii": json_array(self.radii), "ira_iterations": self.ira_iterations.tolist(),
            "mean_ira_iterations": float(np.mean(self.ira_iterations)),
            "min_realized_clearance": float(np.min(self.realized_clearance)),
        }


def json_array(a) -> list:
    """Nested lists with NaN as null and infinities as the strings "inf" / "-inf"."""
    a = np.asarray(a, dtype=float)
    out = a.astype(object)
    out[np.isnan(a)] = None
    out[np.isposinf(a)] = "inf"
    out[np.isneginf(a)] = "-inf"
    return out.tolist()


def _solve_cached(problem: LowerStageProblem, warm, backend, cache):
    if cache is None:
        return solve_lower_stage(problem, warm_start=warm, backend=backend)
    key = (problem.t, problem.x_t.tobytes(), problem.radii.tobytes(), problem.centers.tobytes(),
           None if warm is None else np.asarray(warm).tobytes())
    if key not in cache:
        try:
            cache[key] = solve_lower_stage(problem, warm_start=warm, backend=backend)
        except Infeasible as exc:
            cache[key] = exc
    hit = cache[key]
    if isinstance(hit, Exception):
        raise hit
    return hit


def _brake(model: str, x, dt: float) -> np.ndarray:
    """Strongest admissible deceleration toward standstill."""
    lo, hi = dyn.control_bounds(model)
    if model == dyn.KINEMATIC:
        return np.array([0.0, float(np.clip(-x[3] / dt, lo[1], hi[1]))])
    return np.clip(-np.asarray(x[2:]) / dt, lo, hi)


def run_episode(method: str, world: World, alpha: float, seed: int, cache: dict | None = None,
                t_s: int | None = None) -> EpisodeRecord:
    """Closed-loop shrinking-horizon run on the test trajectory with id ``seed``.

    At each ``t`` the ego observes ``x_t`` and ``Y_0..Y_t``, predicts the
    remaining obstacle path, computes ``beta_t`` (feedback methods, ``t >= 1``),
    allocates risk, solves the lower stage and applies only ``u_t``. S-CP
    keeps ``alpha / T`` at every future step. When the lower stage is
    infeasible the next control of the last plan is applied (or the vehicle
    brakes if there is none) and the step is recorded.
    """
    if method not in METHODS:
        raise InvalidInput(f"unknown method {method!r}")
    cfg = world.config
    sc = cfg.scenario
    T, dt, model_id = sc.T, sc.dt, sc.model
    if method == HYBRID:
        t_s = cfg.t_s if t_s is None else t_s
        if t_s is None:
            raise InvalidInput("hybrid method needs t_s")
    traj = world.dataset.trajectories[int(seed)]
    if world.dataset.roles[int(seed)] != "test":
        raise InvalidInput("episodes run on test trajectories only")
    Y = traj.states
    constraint = world.constraint
    w1 = w2 = None
    if method in WEIGHTED:
        w1, w2 = world.weights_for(Y[0])
    regions = EpisodeRegions(world.tables, constraint, w1, w2,
                             full=(method == S_CP and cfg.scp_calibration == "full"))
    feedback = method != S_CP
    target = np.asarray(sc.target, dtype=float)
    cw = np.asarray(sc.cost_weights, dtype=float)
    model = world.model

    nx, nu = dyn.STATE_DIM[model_id], dyn.CONTROL_DIM[model_id]
    X = np.empty((T + 1, nx))
    X[0] = sc.ego_init
    U = np.empty((T, nu))
    plan_costs = np.full(T, np.nan)
    betas = np.zeros(T)
    allocs = np.full((T, T), np.nan)
    radii_tab = np.full((T, T), np.nan)
    ira_its = np.zeros(T, dtype=int)
    traces, infeasible_steps, clock = [], [], np.zeros(T)
    exhausted = False
    invariant_events = 0
    prev_plan = None
    prev_alloc = None
    # padded one-step and multi-step predictions for the whole test trajectory
    for t in range(T):
        t0 = time.perf_counter()
        hist = pad_history(Y[None, : t + 1], model.window)
        centers = rollout_batch(model, hist, T - t)[0]
        if feedback and t >= 1:
            prev_hist = pad_history(Y[None, :t], model.window)
            one_step = model.predict_next(prev_hist[:, -model.window:])[0]
            betas[t] = regions.beta(t, X[t, :2], one_step)
        # allocation
        use_ira = method in (FB_IRA, WFB_IRA) or (method == HYBRID and t < t_s)
        if not feedback:
            alloc = RiskAllocation(alpha, t, np.full(T - t, alpha / T), np.zeros(t + 1))
        else:
            try:
                alloc = allocate_ara(alpha, betas[: t + 1], t, T)
            except BudgetExhausted:
                exhausted = True
                alloc = floor_allocation(alpha, betas[: t + 1], t, T, regions.floor)
            carried = None
            if use_ira and prev_alloc is not None and not exhausted:
                # previous allocation with the unused slack spread evenly
                tail = prev_alloc.future[1:]
                slack = alloc.remaining - math.fsum(tail)
                if slack >= 0:
                    carried = RiskAllocation(alpha, t, tail + slack / tail.size, betas[: t + 1])

        def problem_for(future, _t=t, _x=X[t].copy(), _c=centers):
            return LowerStageProblem(model_id, _x, _t, T, dt, _c, regions.radii(_t, future), target,
                                     sc.target_tol, cw, constraint)

        warm = prev_plan.shifted() if prev_plan is not None and prev_plan.controls.shape[0] > 1 else None

        def solve(future, warm_plan, _warm=warm):
            ws = warm_plan.controls if warm_plan is not None else _warm
            return _solve_cached(problem_for(future), ws, cfg.backend, cache)

        plan = None
        try:
            if use_ira and not exhausted:
                alloc, start = _ira_start(alloc, carried, solve)
                res = _ira_step(alloc, start, solve, problem_for, regions, t, constraint, centers, cfg.ira)
                plan, alloc = res.plan, res.allocation
                ira_its[t] = res.iterations
                traces.append({"t": t, "reason": res.reason, "costs": res.costs})
            else:
                plan = solve(alloc.future, None)
        except InvariantViolation:
            invariant_events += 1
            try:
                plan = solve(alloc.future, None)
            except Infeasible:
                plan = None
        except (Infeasible, SolverDiverged):
            plan = None
        allocs[t, t:] = alloc.future
        radii_tab[t, t:] = regions.radii(t, alloc.future)
        if plan is not None:
            u = np.asarray(plan.controls[0])
            plan_costs[t] = plan.cost
            prev_plan, prev_alloc = plan, alloc
        else:
            infeasible_steps.append(t)
            if prev_plan is not None and prev_plan.controls.shape[0] > 1:
                u = np.asarray(prev_plan.controls[1])
                prev_plan = _drop_first(prev_plan)
            else:
                u = _brake(model_id, X[t], dt)
                prev_plan = None
            prev_alloc = None
        U[t] = u
        X[t + 1] = dyn.step(model_id, X[t], u, dt)
        clock[t] = time.perf_counter() - t0
    step_costs = np.sum(U * U * cw, axis=1)
    return EpisodeRecord(method, int(seed), float(alpha), X, U, Y, step_costs, plan_costs, betas, allocs,
                         radii_tab, ira_its, traces, infeasible_steps, exhausted, invariant_events, clock,
                         constraint)


def _drop_first(plan):
    from .optimizer import EgoTrajectoryPlan
    return EgoTrajectoryPlan(plan.t + 1, plan.states[0], plan.states[1:], plan.controls[1:], plan.cost,
                             plan.feasible, plan.iterations, plan.clearances[1:], plan.converged, plan.backend)


def _ira_start(uniform, carried, solve):
    """Start the descent from whichever of the even split and the carried allocation plans cheaper."""
    best, plan = uniform, None
    try:
        plan = solve(uniform.future, None)
    except Infeasible:
        pass
    if carried is not None:
        try:
            alt = solve(carried.future, None)
            if plan is None or alt.cost < plan.cost:
                best, plan = carried, alt
        except Infeasible:
            pass
    if plan is None:
        raise Infeasible("no feasible starting allocation")
    return best, plan


def _ira_step(alloc, start, solve, problem_for, regions, t, constraint, centers, ira_cfg):
    def active_set(plan, future):
        return identify_active_set(plan, problem_for(future))

    def lower_bounds(plan):
        raw = constraint_margin(constraint, plan.positions, centers)
        return regions.lower_bounds(t, np.atleast_1d(raw))

    def still_feasible(plan, future):
        return verify_plan(problem_for(future), plan)

    return run_ira(alloc, solve, active_set, lower_bounds, still_feasible, ira_cfg, floor=regions.floor,
                   initial_plan=start)


# --------------------------------------------------------------------------- campaigns

_WORKER_WORLD: World | None = None


def _init_worker(world: World):
    global _WORKER_WORLD
    _WORKER_WORLD = world


def _run_group(args):
    seed, alpha, methods, t_s = args
    cache = {}
    return [run_episode(m, _WORKER_WORLD, alpha, seed, cache=cache, t_s=t_s) for m in methods]


def run_records(world: World, methods=None, alphas=None, seeds=None, workers: int = 1,
                t_s: int | None = None) -> list:
    """Run every (seed, alpha, method) combination; result order is canonical."""
    cfg = world.config
    methods = list(cfg.methods if methods is None else methods)
    alphas = list(cfg.alphas if alphas is None else alphas)
    if seeds is None:
        seeds = world.dataset.ids("test")[: cfg.n_episodes]
    jobs = [(int(s), float(a), methods, t_s) for a in alphas for s in seeds]
    if workers <= 1:
        _init_worker(world)
        groups = [_run_group(j) for j in jobs]
    else:
        with ProcessPoolExecutor(max_workers=workers, initializer=_init_worker, initargs=(world,)) as ex:
            groups = list(ex.map(_run_group, jobs, chunksize=max(1, len(jobs) // (4 * workers))))
    records = [r for g in groups for r in g]
    records.sort(key=lambda r: (r.alpha, methods.index(r.method), r.seed))
    return records


@dataclass(frozen=True)
class CellSummary:
    method: str
    alpha: float
    n_episodes: int
    n_infeasible: int
    n_collisions: int
    avoidance_rate: float
    avoidance_se: float
    mean_cost: float
    std_cost: float
    mean_ira_iterations: float


def _cell_summaries(rows) -> list:
    """``rows`` are ``(method, alpha, cost, collision, infeasible, mean_ira_iterations)``."""
    if not rows:
        raise InvalidInput("no records to summarise")
    cells = {}
    for row in rows:
        cells.setdefault((row[0], row[1]), []).append(row)
    out = []
    for (m, a), rs in cells.items():
        n = len(rs)
        coll = sum(bool(r[3]) for r in rs)
        costs = np.array([r[2] for r in rs if not r[4]])
        rate = 1.0 - coll / n
        out.append(CellSummary(
            m, a, n, sum(bool(r[4]) for r in rs), coll, rate, math.sqrt(max(rate * (1 - rate), 0.0) / n),
            float(np.mean(costs)) if costs.size else math.nan,
            float(np.std(costs, ddof=1)) if costs.size > 1 else 0.0,
            float(np.mean([r[5] for r in rs]))))
    order = {m: i for i, m in enumerate(METHODS)}
    out.sort(key=lambda c: (c.alpha, order[c.method]))
    return out


def summarize(records) -> list:
    """Per (method, alpha): avoidance over all episodes, cost over feasible ones."""
    return _cell_summaries([(r.method, r.alpha, r.cost, r.collision, r.infeasible,
                             float(np.mean(r.ira_iterations))) for r in records])


def paired_cost_difference(records, worse: str, better: str, alpha: float, z: float = 1.645):
    """Mean of ``cost(worse) - cost(better)`` over seeds where both episodes were feasible.

    Returns ``(mean, one-sided lower confidence bound, n_pairs)``.
    """
    a = {r.seed: r.cost for r in records if r.method == worse and r.alpha == alpha and not r.infeasible}
    b = {r.seed: r.cost for r in records if r.method == better and r.alpha == alpha and not r.infeasible}
    seeds = sorted(set(a) & set(b))
    if len(seeds) < 2:
        raise InvalidInput("fewer than two paired episodes")
    d = np.array([a[s] - b[s] for s in seeds])
    se = float(np.std(d, ddof=1) / math.sqrt(d.size))
    return float(np.mean(d)), float(np.mean(d) - z * se), len(seeds)


# --------------------------------------------------------------------------- audits


def coverage_audit(model: PredictorModel, dataset: TrajectoryDataset, alphas, t_grid) -> list:
    """Empirical test coverage of the cal1 regions for each (alpha, t, tau).

    Rows hold ``alpha, t, tau, radius, coverage, se`` where ``se`` is the
    binomial standard error ``sqrt(alpha (1 - alpha) / n_test)``.
    """
    test_ids = set(int(i) for i in dataset.ids("test"))
    cal_ids = set(int(i) for i in dataset.ids("cal1")) | set(int(i) for i in dataset.ids("cal2"))
    if test_ids & cal_ids or not test_ids:
        raise InvalidInput("test split must be nonempty and disjoint from calibration")
    s1 = dataset.states("cal1")
    st = dataset.states("test")
    n = st.shape[0]
    rows = []
    for t in t_grid:
        srt = np.sort(_score_table(model, s1, t), axis=1)
        err = _score_table(model, st, t)
        for a in alphas:
            rad = cp.radii_from_sorted(srt, np.full(srt.shape[0], a))
            cov = np.mean(err <= rad[:, None], axis=1)
            for k in range(srt.shape[0]):
                rows.append({"alpha": float(a), "t": int(t), "tau": int(t + 1 + k), "radius": float(rad[k]),
                             "coverage": float(cov[k]), "se": math.sqrt(a * (1 - a) / n)})
    return rows


def pooled_coverage(rows) -> dict:
    """Mean coverage per alpha over all (t, tau) cells."""
    out = {}
    for a in sorted({r["alpha"] for r in rows}):
        cells = [r for r in rows if r["alpha"] == a]
        out[a] = float(np.mean([r["coverage"] for r in cells]))
    return out


def region_radius_audit(records, reference: str = S_CP, method: str = FB_ARA) -> dict:
    """Per (t, tau) mean ratio of ``method`` radii to ``reference`` radii over shared seeds.

    Returns ``{"ratio": (T, T) array (NaN where undefined), "t0_ratio": float,
    "late_mean": mean ratio over t >= T/2 per seed, "late_ratios": per-seed
    values}``.
    """
    if not records:
        raise InvalidInput("no records")
    ref = {(r.seed, r.alpha): r for r in records if r.method == reference}
    oth = {(r.seed, r.alpha): r for r in records if r.method == method}
    if not ref or not oth or set(ref) != set(oth):
        raise InvalidInput("reference and method must cover the same seeds")
    keys = sorted(ref)
    ratios = []
    for k in keys:
        a, b = ref[k].radii, oth[k].radii
        with np.errstate(invalid="ignore", divide="ignore"):
            ratios.append(np.where(np.isfinite(a) & np.isfinite(b) & (a > 0), b / a, np.nan))
    ratios = np.array(ratios)
    T = ratios.shape[1]
    late = np.array([_finite_mean(r[T // 2:]) for r in ratios])
    mean = np.array([[_finite_mean(ratios[:, i, j]) for j in range(T)] for i in range(T)])
    return {"ratio": mean, "t0_ratio": _finite_mean(ratios[:, 0]),
            "late_ratios": late, "late_mean": _finite_mean(late)}


def _finite_mean(a) -> float:
    a = np.asarray(a, dtype=float)
    a = a[np.isfinite(a)]
    return float(np.mean(a)) if a.size else math.nan


def shift_experiment(config: CampaignConfig, methods=(S_CP, FB_ARA, WFB_ARA), alpha: float = 0.2,
                     workers: int = 1, world: World | None = None) -> dict:
    """Weighted vs unweighted feedback CP under a covariate shift of the obstacle starts.

    Returns the records, their summary and, when both methods ran and at
    least two seeds were feasible for both, the paired
    ``WFb-CP-ARA - Fb-CP-ARA`` cost difference.
    """
    if not config.scenario.shift:
        raise InvalidInput("shift experiment needs scenario.shift = true")
    world = world or build_world(config)
    records = run_records(world, methods=list(methods), alphas=[alpha], workers=workers)
    out = {"records": records, "summary": summarize(records)}
    if FB_ARA in methods and WFB_ARA in methods:
        try:
            out["paired_cost_difference"] = paired_cost_difference(records, WFB_ARA, FB_ARA, alpha)
        except InvalidInput:
            pass  # too few jointly feasible episodes
    return out


def shift_scenario(shifted: bool = True, **overrides) -> dyn.ScenarioConfig:
    """Default covariate-shift world.

    Calibration starts are spread wider than usual. Test obstacles start
    0.3 m farther from their waypoints, so they cross faster and, with
    speed-dependent noise, less predictably. ``shifted=False`` keeps every
    other setting but makes the two populations identical.
    """
    doc = dict(shift=True, init_std=[0.35, 0.35, 0.15, 0.15], noise_std=0.2, noise_kappa=2.5,
               test_position_offset=[[0.0, -0.3], [0.0, 0.3], [0.0, -0.3]] if shifted else [0.0, 0.0],
               test_position_std=[0.25, 0.25] if shifted else None)
    doc.update(overrides)
    return dyn.ScenarioConfig(**doc)


def shift_campaign(shifted: bool = True, **overrides) -> CampaignConfig:
    """Campaign for :func:`shift_experiment`.

    Weighted calibration pays for the shift in effective sample size, so both
    calibration splits are larger than in the default campaign.
    """
    doc = dict(scenario=shift_scenario(shifted), methods=[FB_ARA, WFB_ARA], alphas=[0.2],
               n_cal1=4000, n_cal2=4000)
    doc.update(overrides)
    return CampaignConfig(**doc)


# --------------------------------------------------------------------------- reporting

SUMMARY_FIELDS = [f for f in CellSummary.__dataclass_fields__]


def summary_csv(summary) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SUMMARY_FIELDS)
    for c in summary:
        w.writerow([_fmt(getattr(c, f)) for f in SUMMARY_FIELDS])
    return buf.getvalue()


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return str(v)


def read_summary_csv(path) -> list:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    out = []
    for r in rows:
        out.append(CellSummary(r["method"], float(r["alpha"]), int(r["n_episodes"]), int(r["n_infeasible"]),
                               int(r["n_collisions"]), float(r["avoidance_rate"]), float(r["avoidance_se"]),
                               float(r["mean_cost"]), float(r["std_cost"]), float(r["mean_ira_iterations"])))
    return out


def report(records, out_dir, config: CampaignConfig | None = None, extra: dict | None = None) -> dict:
    """Write ``summary.csv``, ``records.json`` and ``timing.csv``.

    The first two are a pure function of the records (no wall-clock, no
    timestamps), so identical runs give byte-identical files. Timing goes to
    its own file.
    """
    if not records:
        raise InvalidInput("no records to report")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    summary = summarize(records)
    (out / "summary.csv").write_text(summary_csv(summary))
    bundle = {"config": config.to_json() if config is not None else None,
              "records": [r.to_json() for r in records]}
    if extra:
        bundle["extra"] = extra
    (out / "records.json").write_text(json.dumps(bundle, sort_keys=True))
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["method", "alpha", "seed", "mean_step_seconds", "total_seconds"])
    for r in records:
        w.writerow([r.method, r.alpha, r.seed, float(np.mean(r.wall_clock)), float(np.sum(r.wall_clock))])
    (out / "timing.csv").write_text(buf.getvalue())
    return {"summary": out / "summary.csv", "records": out / "records.json", "timing": out / "timing.csv"}


def load_records_summary(path) -> list:
    """Rebuild the summary table from a ``records.json`` bundle."""
    doc = json.loads(Path(path).read_text())
    return _cell_summaries([(r["method"], r["alpha"], r["cost"], r["collision"], r["infeasible"],
                             r["mean_ira_iterations"]) for r in doc["records"]])


def default_workers() -> int:
    return max(1, (os.cpu_count() or 1))
