"""Risk budgeting over the remaining horizon: average and iterative allocation."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .errors import (BudgetExhausted, Infeasible, InvalidInput, InvariantViolation,
                     NoActiveConstraints)
from .optimizer import ActiveSetPartition, EgoTrajectoryPlan

BUDGET_TOL = 1e-12


@dataclass(frozen=True)
class RiskAllocation:
    """Future per-step risks ``alpha_{t+1..T}`` and realized posterior risks ``beta_{0..t}``.

    ``exhausted`` marks the fallback allocation used once the realized risks
    have consumed the whole budget; only then may the total exceed ``alpha``.
    """

    total_budget: float
    t: int
    future: np.ndarray
    realized: np.ndarray = field(default_factory=lambda: np.zeros(1))
    exhausted: bool = False

    def __post_init__(self):
        f = np.array(self.future, dtype=float).ravel()
        r = np.array(self.realized, dtype=float).ravel()
        f.setflags(write=False)
        r.setflags(write=False)
        object.__setattr__(self, "future", f)
        object.__setattr__(self, "realized", r)
        if not 0.0 < self.total_budget < 1.0:
            raise InvalidInput("total budget must lie in (0, 1)")
        if r.size != self.t + 1:
            raise InvalidInput("realized risks must cover tau = 0..t")
        if np.any(f <= 0) or not np.all(np.isfinite(f)):
            raise InvalidInput("future risks must be positive")
        if not self.exhausted and self.spent > self.total_budget + BUDGET_TOL:
            raise InvalidInput(f"allocation spends {self.spent!r} > budget {self.total_budget!r}")

    @property
    def T(self) -> int:
        return self.t + self.future.size

    @property
    def remaining(self) -> float:
        """``alpha - sum(beta)``."""
        return self.total_budget - math.fsum(self.realized)

    @property
    def spent(self) -> float:
        return math.fsum(self.future) + math.fsum(self.realized)

    def alpha_at(self, tau: int) -> float:
        return float(self.future[tau - self.t - 1])

    def with_future(self, future) -> "RiskAllocation":
        return RiskAllocation(self.total_budget, self.t, future, self.realized, self.exhausted)


@dataclass(frozen=True)
class IRAConfig:
    """Step size ``eta``; ``epsilon`` absolute, or ``None`` for ``rel_epsilon * |J^0|``."""

    eta: float = 0.7
    epsilon: float | None = None
    rel_epsilon: float = 1e-3
    max_iter: int = 30

    def __post_init__(self):
        if not 0.0 < self.eta < 1.0:
            raise InvalidInput("eta must lie strictly inside (0, 1)")
        if self.epsilon is not None and self.epsilon <= 0:
            raise InvalidInput("epsilon must be positive")
        if self.rel_epsilon <= 0 or self.max_iter < 0:
            raise InvalidInput("rel_epsilon must be positive and max_iter nonnegative")

    def tolerance(self, initial_cost: float) -> float:
        if self.epsilon is not None:
            return self.epsilon
        return max(self.rel_epsilon * abs(initial_cost), 1e-9)


def allocate_ara(alpha: float, betas, t: int, T: int) -> RiskAllocation:
    """Split the remaining budget evenly over ``tau = t+1..T``.

    ``betas`` lists ``beta_0..beta_t``; an empty list means no feedback yet
    (all zeros).
    """
    if not 0 <= t < T:
        raise InvalidInput("need 0 <= t < T")
    b = np.zeros(t + 1) if betas is None or len(betas) == 0 else np.asarray(betas, dtype=float)
    if b.size != t + 1:
        raise InvalidInput("betas must cover tau = 0..t")
    remaining = alpha - math.fsum(b)
    if remaining <= 0:
        raise BudgetExhausted(f"realized risk {math.fsum(b)!r} exhausts budget {alpha!r}")
    return RiskAllocation(alpha, t, np.full(T - t, remaining / (T - t)), b)


def floor_allocation(alpha: float, betas, t: int, T: int, floor: float) -> RiskAllocation:
    """Fallback once the budget is gone: every future step pinned to ``floor``."""
    b = np.asarray(betas, dtype=float)
    return RiskAllocation(alpha, t, np.full(T - t, floor), b, exhausted=True)


def tighten_inactive(alloc: RiskAllocation, partition: ActiveSetPartition, bounds,
                     eta: float, floor: float = 0.0) -> RiskAllocation:
    """``(1 - eta) alpha_tau + eta * lower_tau`` on inactive steps; active steps untouched.

    ``bounds`` is indexable by ``tau - t - 1`` (array) or a mapping keyed by
    ``tau``. Results are clamped to at least ``floor`` but never raised above
    the incoming value, so the total never increases.
    """
    if not 0.0 < eta <= 1.0:
        raise InvalidInput("eta must lie in (0, 1]")
    out = alloc.future.copy()
    for tau in partition.inactive:
        k = tau - alloc.t - 1
        if not 0 <= k < out.size:
            raise InvalidInput(f"step {tau} outside the allocation horizon")
        lb = float(bounds[tau] if isinstance(bounds, dict) else bounds[k])
        if lb > out[k]:
            raise InvariantViolation(f"lower bound {lb!r} exceeds current risk {out[k]!r} at step {tau}")
        new = (1.0 - eta) * out[k] + eta * lb
        out[k] = min(out[k], max(new, floor))
    return alloc.with_future(out)


def redistribute_to_active(tightened: RiskAllocation, partition: ActiveSetPartition) -> RiskAllocation:
    """Hand the unallocated budget to the active steps in equal shares."""
    if partition.n_active == 0:
        raise NoActiveConstraints("no active constraint to relax")
    slack = tightened.remaining - math.fsum(tightened.future)
    if slack < -BUDGET_TOL:
        raise InvalidInput("tightened allocation already exceeds the budget")
    slack = max(slack, 0.0)
    out = tightened.future.copy()
    idx = np.array(sorted(partition.active)) - tightened.t - 1
    out[idx] += slack / partition.n_active
    # absorb summation rounding so the total matches the remaining budget
    excess = math.fsum(out) - tightened.remaining
    if excess > 0:
        out[idx[-1]] -= excess
    return tightened.with_future(out)


@dataclass
class IRAResult:
    allocation: RiskAllocation
    plan: EgoTrajectoryPlan
    trace: list
    reason: str

    @property
    def iterations(self) -> int:
        return len(self.trace) - 1

    @property
    def costs(self) -> list:
        return [rec["cost"] for rec in self.trace]

    def save_trace(self, path) -> None:
        Path(path).write_text(json.dumps({"reason": self.reason, "iterations": self.trace}, indent=1))


def run_ira(initial: RiskAllocation,
            solve: Callable[[np.ndarray, EgoTrajectoryPlan | None], EgoTrajectoryPlan],
            active_set: Callable[[EgoTrajectoryPlan, np.ndarray], ActiveSetPartition],
            lower_bounds: Callable[[EgoTrajectoryPlan], np.ndarray],
            still_feasible: Callable[[EgoTrajectoryPlan, np.ndarray], bool],
            config: IRAConfig = IRAConfig(), floor: float = 0.0,
            initial_plan: EgoTrajectoryPlan | None = None) -> IRAResult:
    """Iterative risk allocation at one planning step.

    Parameters are callables so the loop is independent of how regions and
    plans are built:

    * ``solve(future, warm)`` solves the lower stage for an allocation and
      raises :class:`Infeasible` when none exists.
    * ``active_set(plan, future)`` partitions the horizon.
    * ``lower_bounds(plan)`` returns the tightening bound for every step.
    * ``still_feasible(plan, future)`` re-checks a plan under a new allocation.

    Each round solves, tightens the inactive steps, hands the freed budget to
    the active ones and re-solves. Whenever the re-solve is no better than the
    incumbent (possible with a local solver) the incumbent is kept; it is
    feasible for the new allocation because tightening only touches steps
    with spare clearance and relaxing only shrinks radii. The cost trace is
    therefore non-increasing. The loop stops when two consecutive costs differ
    by less than the tolerance, when no constraint is active, or after
    ``max_iter`` reallocations.
    """
    plan = initial_plan if initial_plan is not None else solve(initial.future, None)
    alloc = initial
    eps = config.tolerance(plan.cost)
    trace = [_trace_record(0, alloc, plan, None)]
    reason = "max_iter"
    for n in range(1, config.max_iter + 1):
        part = active_set(plan, alloc.future)
        if part.n_active == 0:
            reason = "no_active_constraints"
            break
        bounds = lower_bounds(plan)
        try:
            nxt = redistribute_to_active(tighten_inactive(alloc, part, bounds, config.eta, floor), part)
        except NoActiveConstraints:
            reason = "no_active_constraints"
            break
        if np.array_equal(nxt.future, alloc.future):
            reason = "stationary_allocation"
            break
        if not still_feasible(plan, nxt.future):
            raise InvariantViolation("incumbent plan lost feasibility under the reallocated risks")
        try:
            cand = solve(nxt.future, plan)
        except Infeasible:
            cand = None
        kept = cand is None or cand.cost > plan.cost
        new_plan = plan if kept else cand
        delta = abs(plan.cost - new_plan.cost)
        alloc, plan = nxt, new_plan
        trace.append(_trace_record(n, alloc, plan, part, kept))
        if delta < eps:
            reason = "converged"
            break
    return IRAResult(alloc, plan, trace, reason)


def _trace_record(n, alloc, plan, part, kept=False):
    return {
        "iteration": n,
        "cost": float(plan.cost),
        "allocation": [float(a) for a in alloc.future],
        "active": sorted(part.active) if part is not None else None,
        "incumbent_kept": bool(kept),
    }
