"""Prediction regions from split conformal calibration.

Builds the default obstacle world, fits the linear autoregressive predictor
on the training split and looks at the regions it produces: how the radius
grows along the horizon and how it responds to the per-step risk. The last
block checks empirical coverage on held-out test trajectories.
"""
import numpy as np

from fbcp import harness as H

config = H.CampaignConfig(n_train=500, n_cal1=300, n_cal2=300, n_test=1000, n_episodes=1)
world = H.build_world(config)
print(f"cal1 holds K={world.tables.K} trajectories, cal2 holds L={world.tables.L}")

# Radii at t=0 for each future step, at three per-step risks. Below 1/(K+1)
# no calibration score is large enough and the radius is infinite.
regions = H.EpisodeRegions(world.tables, world.constraint)
T = config.scenario.T
for a in (0.0025, 0.005, 0.01):
    r = regions.radii(0, np.full(T, a))
    print(f"alpha_tau={a:<7g} radius at tau=1: {r[0]:.3f} m, tau=10: {r[9]:.3f} m, tau=20: {r[-1]:.3f} m")

# Later in the episode more of the obstacle path is observed and regions shrink.
for t in (0, 5, 10, 15):
    r = regions.radii(t, np.full(T - t, 0.005))
    print(f"t={t:2d}: radius one step ahead {r[0]:.3f} m, at the horizon end {r[-1]:.3f} m")

rows = H.coverage_audit(world.model, world.dataset, [0.05, 0.1, 0.2], range(T))
for a, cov in H.pooled_coverage(rows).items():
    worst = min(r["coverage"] for r in rows if r["alpha"] == a)
    print(f"alpha={a}: pooled coverage {cov:.4f}, worst single (t, tau) cell {worst:.3f}")
