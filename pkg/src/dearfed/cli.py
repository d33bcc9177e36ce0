"""Command-line entry points for the experiment harness.

Verbs: `run` (one scenario, all configured policies), `sweep` (one axis),
`pretrain-qeen`, `train-agent`, `gen-data`, `validate-config`. All verbs
accept --config (JSON) plus --seed/--out-dir/--policy/--scenario overrides;
DEARFED_THREADS caps intra-run parallelism.
"""

from __future__ import annotations

import argparse
import json
import sys

from . import scenarios


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="JSON scenario config")
    parser.add_argument("--seed", type=int, help="base seed override")
    parser.add_argument("--out-dir", help="output directory override")
    parser.add_argument("--policy", choices=scenarios.POLICIES,
                        help="restrict to one aggregation policy")
    parser.add_argument("--scenario", choices=sorted(scenarios.SCENARIO_DEFECT_KIND),
                        help="scenario override")


def _load_config(args) -> scenarios.ScenarioConfig:
    overrides = {
        "seed": args.seed,
        "out_dir": args.out_dir,
        "policy": args.policy,
        "scenario": args.scenario,
    }
    return scenarios.parse_config(args.config, overrides)


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="dearfed",
        description="Defect-aware federated load-forecasting experiments",
    )
    sub = parser.add_subparsers(dest="verb", required=True)

    for verb, desc in (
        ("run", "run the configured scenario and write metric files"),
        ("pretrain-qeen", "build the snapshot corpus and train the embedding network"),
        ("train-agent", "train the aggregation agent on the configured scenario"),
        ("gen-data", "write the synthetic fleet CSV and holiday calendar"),
        ("validate-config", "parse, validate, and echo the effective config"),
    ):
        _add_common(sub.add_parser(verb, help=desc))

    sweep = sub.add_parser("sweep", help="run one scenario per value of one axis")
    _add_common(sweep)
    sweep.add_argument("--axis", required=True, choices=sorted(scenarios.SWEEP_AXES))
    sweep.add_argument("--values", required=True,
                       help="comma-separated axis values, e.g. 0.2,0.5,0.8")

    args = parser.parse_args(argv)
    try:
        cfg = _load_config(args)
    except (scenarios.ConfigError, ValueError, OSError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2

    if args.verb == "validate-config":
        print(json.dumps(scenarios.config_to_dict(cfg), indent=2))
        return 0

    if args.verb == "gen-data":
        csv_path, holiday_path = scenarios.generate_data_files(cfg)
        print(f"wrote {csv_path} and {holiday_path}")
        return 0

    if args.verb == "pretrain-qeen":
        qeen = scenarios.ensure_qeen(cfg, retrain=True)
        path = scenarios.artifact_paths(cfg)["qeen"]
        print(f"wrote {path} (d={qeen.d}, e_dim={qeen.e_dim})")
        return 0

    if args.verb == "train-agent":
        policies = [p for p in cfg.policies if p in ("dearfsac", "sac_without_qeen")]
        if not policies:
            print("no learning policy configured; nothing to train", file=sys.stderr)
            return 2
        qeen = scenarios.ensure_qeen(cfg) if "dearfsac" in policies else None
        for policy in policies:
            scenarios.ensure_agent(cfg, policy, qeen, retrain=True)
            print(f"wrote {scenarios.artifact_paths(cfg)[policy]}")
        return 0

    if args.verb == "run":
        results = scenarios.run_scenario(cfg)
        for r in results:
            print(f"{r.policy}: MAPE {r.mape_mean:.2f} +/- {r.mape_std:.2f} %  "
                  f"RMSE {r.rmse_mean:.2f} +/- {r.rmse_std:.2f} kW  "
                  f"({r.wall_clock:.1f}s)")
        return 0

    if args.verb == "sweep":
        values = [float(v) for v in args.values.split(",") if v != ""]
        rows = scenarios.run_sweep(cfg, args.axis, values)
        for axis, value, r in rows:
            print(f"{axis}={value} {r.policy}: MAPE {r.mape_mean:.2f} +/- {r.mape_std:.2f} %")
        return 0

    return 2


if __name__ == "__main__":
    sys.exit(main())
