"""Command-line entry point: ``fbcp <subcommand> [--config PATH] [--seed N] [--workers N] [--out DIR]``.

Every subcommand works inside the ``--out`` directory. ``gen-data`` writes
``dataset.jsonl`` there, ``fit`` adds ``model.json``, and the campaign
commands reuse both when present (otherwise they build them from the config).

Exit codes: 0 success, 2 configuration error, 3 every episode infeasible.
"""
from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

from . import harness as H
from .errors import FbcpError, InvalidInput
from .predictor import PredictorModel, fit
from .trajectories import load_jsonl, save_jsonl

EXIT_OK, EXIT_CONFIG, EXIT_INFEASIBLE = 0, 2, 3


class ConfigError(Exception):
    pass


def load_config(path, seed: int | None, shift: bool = False) -> H.CampaignConfig:
    """Campaign config from JSON (defaults when ``path`` is None), with the seed override applied."""
    try:
        if path is None:
            doc = H.shift_campaign().to_json() if shift else H.CampaignConfig().to_json()
        else:
            doc = json.loads(Path(path).read_text())
            if not isinstance(doc, dict):
                raise ConfigError("config must be a JSON object")
        if seed is not None:
            if not 0 <= seed < 2 ** 64:
                raise ConfigError("--seed must fit in an unsigned 64-bit integer")
            doc = {**doc, "scenario": {**doc.get("scenario", {}), "seed": seed}}
        return H.CampaignConfig.from_json(doc)
    except (OSError, json.JSONDecodeError, TypeError, InvalidInput) as exc:
        raise ConfigError(str(exc)) from exc


def _world(config: H.CampaignConfig, out: Path) -> H.World:
    data_path, model_path = out / "dataset.jsonl", out / "model.json"
    dataset = load_jsonl(data_path) if data_path.exists() else None
    model = PredictorModel.load(model_path) if model_path.exists() and dataset is not None else None
    return H.build_world(config, dataset, model)


def _all_infeasible(records) -> bool:
    return bool(records) and all(r.infeasible for r in records)


def _print_summary(summary) -> None:
    for c in summary:
        print(f"{c.method:14s} alpha={c.alpha:<5g} avoid={c.avoidance_rate:.3f} "
              f"cost={c.mean_cost:.3f} infeasible={c.n_infeasible}/{c.n_episodes}")


def cmd_gen_data(args, config, out):
    dataset = H.generate_dataset(config)
    save_jsonl(dataset, out / "dataset.jsonl")
    (out / "campaign.json").write_text(json.dumps(config.to_json(), indent=2, sort_keys=True))
    print(f"wrote {len(dataset.trajectories)} trajectories to {out / 'dataset.jsonl'}")
    return EXIT_OK


def cmd_fit(args, config, out):
    data_path = out / "dataset.jsonl"
    dataset = load_jsonl(data_path) if data_path.exists() else H.generate_dataset(config)
    model = fit(dataset.split("train"), window=config.window, ridge=config.ridge)
    model.save(out / "model.json")
    print(f"fitted window-{model.window} predictor on {len(model.train_ids)} trajectories")
    return EXIT_OK


def cmd_run(args, config, out):
    world = _world(config, out)
    records = H.run_records(world, workers=args.workers, t_s=config.t_s)
    H.report(records, out, config)
    _print_summary(H.summarize(records))
    return EXIT_INFEASIBLE if _all_infeasible(records) else EXIT_OK


def cmd_audit_coverage(args, config, out):
    world = _world(config, out)
    alphas = sorted(set(config.alphas) | {0.05, 0.1, 0.2})
    rows = H.coverage_audit(world.model, world.dataset, alphas, range(config.scenario.T))
    with open(out / "coverage.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
    for a, cov in H.pooled_coverage(rows).items():
        print(f"alpha={a:<5g} pooled coverage={cov:.4f} (target {1 - a:.2f})")
    return EXIT_OK


def cmd_audit_regions(args, config, out):
    world = _world(config, out)
    records = H.run_records(world, methods=[H.S_CP, H.FB_ARA], workers=args.workers)
    doc = {}
    for a in config.alphas:
        audit = H.region_radius_audit([r for r in records if r.alpha == a])
        doc[repr(float(a))] = {"t0_ratio": audit["t0_ratio"], "late_mean": audit["late_mean"],
                               "ratio": H.json_array(audit["ratio"])}
        print(f"alpha={a:<5g} ratio at t=0 {audit['t0_ratio']:.3f}, over t>=T/2 {audit['late_mean']:.3f}")
    (out / "regions.json").write_text(json.dumps(doc, sort_keys=True))
    return EXIT_INFEASIBLE if _all_infeasible(records) else EXIT_OK


def cmd_shift(args, config, out):
    if not config.scenario.shift:
        raise ConfigError("the shift command needs scenario.shift = true")
    world = _world(config, out)
    alpha = config.alphas[0]
    res = H.shift_experiment(config, methods=config.methods, alpha=alpha, workers=args.workers, world=world)
    extra = {}
    if "paired_cost_difference" in res:
        mean, lcb, n = res["paired_cost_difference"]
        extra = {"paired_cost_difference": {"mean": mean, "lower_bound": lcb, "pairs": n}}
        print(f"weighted minus unweighted cost: {mean:.3f} over {n} paired episodes")
    H.report(res["records"], out, config, extra)
    _print_summary(res["summary"])
    return EXIT_INFEASIBLE if _all_infeasible(res["records"]) else EXIT_OK


def cmd_report(args, config, out):
    path = out / "records.json"
    if not path.exists():
        raise ConfigError(f"{path} not found; run a campaign first")
    summary = H.load_records_summary(path)
    (out / "summary.csv").write_text(H.summary_csv(summary))
    _print_summary(summary)
    return EXIT_OK


COMMANDS = {
    "gen-data": cmd_gen_data, "fit": cmd_fit, "run": cmd_run, "audit-coverage": cmd_audit_coverage,
    "audit-regions": cmd_audit_regions, "shift": cmd_shift, "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fbcp", description="Feedback conformal planning benchmarks.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", type=Path, help="campaign config (JSON)")
        p.add_argument("--seed", type=int, help="override the scenario seed")
        p.add_argument("--workers", type=int, default=1)
        p.add_argument("--out", type=Path, default=Path("fbcp-out"))
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.workers < 1:
            raise ConfigError("--workers must be at least 1")
        config = load_config(args.config, args.seed, shift=args.command == "shift")
        args.out.mkdir(parents=True, exist_ok=True)
        return COMMANDS[args.command](args, config, args.out)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except FbcpError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG if isinstance(exc, InvalidInput) else 1


if __name__ == "__main__":
    sys.exit(main())
