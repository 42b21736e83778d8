"""Command-line entry point: ``hamsmc <subcommand> ...``.

Results go to stdout as JSON; failures print ``{"error": ..., "message": ...}``
to stderr and exit with status 1. Usage errors exit with status 2.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path


def _dump(obj, out=None) -> None:
    text = json.dumps(obj, indent=2, sort_keys=True) + "\n"
    if out:
        Path(out).write_text(text, encoding="utf-8")
    sys.stdout.write(text)


def cmd_generate(args) -> int:
    from hamsmc.ssm import SyntheticConfig, gen_synthetic

    cfg = SyntheticConfig(args.x_dim, args.y_dim, args.length, args.num_sequences, args.noise_var)
    data = gen_synthetic(args.seed, cfg)
    data.batch.to_jsonl(args.out)
    _dump({"out": args.out, "num_sequences": len(data.batch), "length": args.length, "y_dim": args.y_dim})
    return 0


def cmd_train(args) -> int:
    from hamsmc.harness import ExperimentConfig, train
    from hamsmc.report import plot_training

    cfg = ExperimentConfig.from_json(args.config)
    result = train(cfg, record_wall_clock=not args.no_wall_clock)
    out = Path(cfg.out_dir)
    plot_training(out / "metrics.csv", out / "training.png")
    last = result.history[-1]
    _dump({"checkpoints": result.checkpoints, "final": last, "figure": str(out / "training.png")})
    return 0


def cmd_eval(args) -> int:
    from hamsmc.harness import evaluate, load_checkpoint, write_eval
    from hamsmc.report import plot_eval
    from hamsmc.ssm import TrajectoryBatch

    ckpt = load_checkpoint(args.checkpoint)
    batch = TrajectoryBatch.from_jsonl(args.dataset)
    rows = evaluate(ckpt, batch, args.K, args.S, args.runs, args.seed)
    meta = {"checkpoint_step": ckpt.step, "num_runs": args.runs, "seed": args.seed}
    payload = write_eval(rows, args.out, meta)
    plot_eval(rows, Path(args.out) / "eval.png")
    _dump(payload)
    return 0


def _filter_model(args, batch):
    from hamsmc.harness import Dims, ExperimentConfig, build_model, init_params, load_checkpoint

    if args.checkpoint:
        ckpt = load_checkpoint(args.checkpoint)
        return ckpt.model, ckpt.params, ckpt.field, ckpt.phi
    cfg = ExperimentConfig(args.dataset, ".", model=args.model, inference="hsmc", x_dim=args.x_dim,
                           seed=args.model_seed, metric=args.metric)
    model, field = build_model(cfg, Dims(args.x_dim, batch.y_dim, batch.u_dim))
    params, phi = init_params(cfg, model, field)
    return model, params, field, phi


def cmd_filter(args) -> int:
    from hamsmc.hsmc import HsmcConfig, hsmc_filter, hsmc_result_json
    from hamsmc.smc import smc_filter
    from hamsmc.ssm import TrajectoryBatch

    batch = TrajectoryBatch.from_jsonl(args.dataset)
    if not 0 <= args.index < len(batch):
        raise IndexError(f"sequence index {args.index} out of range (dataset has {len(batch)})")
    model, params, field, phi = _filter_model(args, batch)
    ys, us = batch.ys[args.index], batch.us[args.index]
    if args.method == "smc":
        res = smc_filter(model, params, ys, us, args.seed, args.K, args.scheme)
        out = res.to_json()
    else:
        cfg = HsmcConfig(args.K, args.S, args.step_size, args.variant, scheme=args.scheme)
        out = hsmc_result_json(hsmc_filter(model, params, field, phi, ys, us, args.seed, cfg))
    out["id"] = batch.ids[args.index]
    _dump(out, args.out)
    return 0


def cmd_check_grad(args) -> int:
    from hamsmc.harness import gradient_check

    report = gradient_check(args.model, args.seed, args.S, args.step_size)
    report["tolerance"] = args.tol
    report["passed"] = report["max_rel_error"] < args.tol
    _dump(report)
    return 0 if report["passed"] else 1


def cmd_ingest(args) -> int:
    from hamsmc.bike import IngestRules, ingest_bike_csv, write_ingest

    rules = IngestRules(args.min_span_days, args.min_rate, args.start_time_col, args.stop_time_col,
                        args.start_station_col, args.end_station_col)
    result = ingest_bike_csv(args.csv, rules)
    side = write_ingest(result, args.out)
    _dump({
        "out": args.out,
        "stations_file": str(side),
        "num_stations": len(result.stations),
        "hours": int(result.batch.lengths[0]),
        "skipped_rows": result.skipped_rows,
    })
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hamsmc", description="Hamiltonian SMC for state-space models")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="simulate a synthetic dataset (JSONL)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--num-sequences", type=int, default=10)
    p.add_argument("--length", type=int, default=100)
    p.add_argument("--x-dim", type=int, default=10)
    p.add_argument("--y-dim", type=int, default=30)
    p.add_argument("--noise-var", type=float, default=0.2)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", help="train a model from a JSON experiment config")
    p.add_argument("--config", required=True)
    p.add_argument("--no-wall-clock", action="store_true", help="write 0 in the wall_clock column")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="ELBO grid over K and S from a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--K", type=int, nargs="+", default=[5, 10])
    p.add_argument("--S", type=int, nargs="+", default=[5, 10])
    p.add_argument("--runs", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="output directory for eval.json, eval.csv, eval.png")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("filter", help="run one filter on one sequence")
    p.add_argument("--dataset", required=True)
    p.add_argument("--index", type=int, default=0)
    p.add_argument("--method", choices=["smc", "hsmc"], default="hsmc")
    p.add_argument("--K", type=int, default=10)
    p.add_argument("--S", type=int, default=5)
    p.add_argument("--step-size", type=float, default=0.05)
    p.add_argument("--variant", default="generalized-implicit")
    p.add_argument("--scheme", choices=["multinomial", "systematic"], default="multinomial")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--checkpoint")
    p.add_argument("--model", choices=["lgssm", "nn-gssm", "gpssm"], default="nn-gssm")
    p.add_argument("--x-dim", type=int, default=2)
    p.add_argument("--model-seed", type=int, default=0)
    p.add_argument("--metric", choices=["learned", "identity"], default="learned")
    p.add_argument("--out")
    p.set_defaults(func=cmd_filter)

    p = sub.add_parser("check-grad", help="pathwise gradient vs central finite differences")
    p.add_argument("--model", choices=["lgssm", "nn-gssm", "gpssm"], default="nn-gssm")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--S", type=int, default=3)
    p.add_argument("--step-size", type=float, default=0.1)
    p.add_argument("--tol", type=float, default=1e-4)
    p.set_defaults(func=cmd_check_grad)

    p = sub.add_parser("ingest", help="hourly station demand from a bike-share trip CSV")
    p.add_argument("--csv", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--min-span-days", type=float, default=730.0)
    p.add_argument("--min-rate", type=float, default=1.0, help="minimum mean checkouts per hour")
    p.add_argument("--start-time-col", default="starttime")
    p.add_argument("--stop-time-col", default="stoptime")
    p.add_argument("--start-station-col", default="start station name")
    p.add_argument("--end-station-col", default="end station name")
    p.set_defaults(func=cmd_ingest)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except Exception as exc:  # reported as structured error
        sys.stderr.write(json.dumps({"error": type(exc).__name__, "message": str(exc)}) + "\n")
        return 1


if __name__ == "__main__":
    sys.exit(main())
