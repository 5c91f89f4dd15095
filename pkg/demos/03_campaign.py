"""A small Monte Carlo comparison of the three planners.

Runs 50 paired episodes at two risk budgets, prints the summary table,
the paired cost gaps and the radius audit, then writes the report files.
The acceptance suite runs the same study at 500 episodes.
"""
import sys
from pathlib import Path

from fbcp import harness as H

out = Path(sys.argv[1]) if len(sys.argv) > 1 else Path("demo-campaign")
config = H.CampaignConfig(n_episodes=50)
world = H.build_world(config)
records = H.run_records(world, workers=H.default_workers())

for c in H.summarize(records):
    print(f"{c.method:10s} alpha={c.alpha}: avoidance {c.avoidance_rate:.3f}, mean cost {c.mean_cost:.3f}, "
          f"{c.n_infeasible} episodes with an infeasible step")

for a in config.alphas:
    for worse, better in ((H.S_CP, H.FB_ARA), (H.FB_ARA, H.FB_IRA)):
        mean, lcb, n = H.paired_cost_difference(records, worse, better, a)
        print(f"alpha={a}: {worse} minus {better} = {mean:.3f} (95% lower bound {lcb:.3f}, {n} pairs)")
    audit = H.region_radius_audit([r for r in records if r.alpha == a])
    print(f"alpha={a}: feedback/static radius ratio {audit['t0_ratio']:.3f} at t=0, "
          f"{audit['late_mean']:.3f} over the second half")

paths = H.report(records, out, config)
print("wrote", ", ".join(str(p) for p in paths.values()))
