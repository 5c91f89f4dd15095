"""Feedback-based conformal prediction for shrinking-horizon trajectory optimization."""
from .constraints import ConstraintSpec, constraint_margin
from .dynamics import ScenarioConfig
from .errors import (BudgetExhausted, FbcpError, Infeasible, InvalidInput, InvariantViolation,
                     NoActiveConstraints, SingularFit, SolverDiverged, SplitViolation)
from .harness import CampaignConfig, EpisodeRecord, build_world, run_episode, run_records, summarize
from .optimizer import EgoTrajectoryPlan, LowerStageProblem, solve_lower_stage
from .predictor import PredictorModel
from .risk import IRAConfig, RiskAllocation, allocate_ara, run_ira

__version__ = "0.1.0"

__all__ = [
    "BudgetExhausted", "CampaignConfig", "ConstraintSpec", "EgoTrajectoryPlan", "EpisodeRecord", "FbcpError",
    "IRAConfig", "Infeasible", "InvalidInput", "InvariantViolation", "LowerStageProblem", "NoActiveConstraints",
    "PredictorModel", "RiskAllocation", "ScenarioConfig", "SingularFit", "SolverDiverged", "SplitViolation",
    "allocate_ara", "build_world", "constraint_margin", "run_episode", "run_ira", "run_records",
    "solve_lower_stage", "summarize",
]
