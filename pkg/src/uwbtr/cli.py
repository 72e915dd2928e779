"""Command-line front end: run campaigns and recompute metrics from artifacts."""

import argparse
import json
import os
import sys

from .config import TrialConfig, load_config
from .harness import recompute_metrics, run_monte_carlo


def _cmd_run(args):
    cfg = load_config(args.config) if args.config else TrialConfig()
    if args.seed is not None:
        cfg.master_seed = args.seed
    summary, rows = run_monte_carlo(
        cfg, out_dir=args.out, jobs=args.jobs, trials=args.trials
    )
    ok = [r for r in rows if r["status"] == "ok"]
    for r in rows:
        if r["status"] == "ok":
            print(
                f"trial {r['trial']:4d}  tracking {r['tracking_rmse']:.3f} m  "
                f"estimation {r['estimation_rmse']:.3f} m  "
                f"fallback {100 * r['fallback_fraction']:.1f}%"
            )
        else:
            print(f"trial {r['trial']:4d}  FAILED  {r['reason']}")
    if ok:
        print(
            f"\n{len(ok)}/{summary['trials']} trials ok | tracking RMSE "
            f"mean {summary['tracking_rmse']['mean']:.3f} m "
            f"(max {summary['tracking_rmse']['max']:.3f}) | estimation RMSE "
            f"mean {summary['estimation_rmse']['mean']:.3f} m"
        )
    return 0 if ok else 1


def _cmd_metrics(args):
    dirs = []
    if os.path.exists(os.path.join(args.dir, "teach_truth.csv")):
        dirs = [args.dir]
    else:
        dirs = sorted(
            os.path.join(args.dir, d)
            for d in os.listdir(args.dir)
            if d.startswith("trial_")
        )
    if not dirs:
        print(f"no trial artifacts under {args.dir}", file=sys.stderr)
        return 1
    for d in dirs:
        m = recompute_metrics(d)
        print(
            f"{d}: tracking {m['tracking_rmse']:.3f} m, "
            f"estimation {m['estimation_rmse']:.3f} m, "
            f"max position error {m['max_position_error']:.3f} m"
        )
        if args.write:
            out = {k: v for k, v in m.items() if not hasattr(v, "__len__")}
            with open(os.path.join(d, "metrics_recomputed.json"), "w") as fh:
                json.dump(out, fh, indent=2)
    return 0


def main(argv=None):
    parser = argparse.ArgumentParser(
        prog="uwbtr", description="UWB teach-and-repeat simulation campaigns"
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run teach-and-repeat trials")
    p_run.add_argument("--config", help="JSON trial configuration")
    p_run.add_argument("--seed", type=int, default=None, help="master seed override")
    p_run.add_argument("--trials", type=int, default=None, help="trial count override")
    p_run.add_argument("--jobs", type=int, default=1, help="parallel trial workers")
    p_run.add_argument("--out", default=None, help="artifact output directory")
    p_run.set_defaults(func=_cmd_run)

    p_met = sub.add_parser("metrics", help="recompute metrics from exported CSVs")
    p_met.add_argument("--dir", required=True, help="trial or campaign directory")
    p_met.add_argument("--write", action="store_true",
                       help="write metrics_recomputed.json next to the CSVs")
    p_met.set_defaults(func=_cmd_metrics)

    args = parser.parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
