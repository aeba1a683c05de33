"""Command line entry point.

    advshift train --config cfg.json [--seed N] [--out-dir D] [--resume CKPT]
    advshift eval --checkpoint D/checkpoint.json --domain unseen [--no-fisl]
    advshift reproduce-table1 --out-dir D [--iterations N] [--seeds 0 1 2]
    advshift reproduce-blobs --out-dir D [--iterations N] [--seeds 0 1 2]

Failures exit non-zero and print a JSON error document on stderr.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from advshift.config import ConfigError, parse_config
from advshift.eval import result_row, write_results_csv, write_summary_json
from advshift.experiments import evaluate_domain, reproduce_blobs, reproduce_table1
from advshift.trainer import CONFIG, load_checkpoint, train


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="advshift", description=__doc__.split("\n")[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train one configuration")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--out-dir")
    p.add_argument("--resume", help="checkpoint to resume from")

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--domain", choices=("source", "unseen"), default="unseen")
    p.add_argument("--no-fisl", action="store_true", help="skip the shift layer at test time")
    p.add_argument("--config", help="resolved config (default: config.json next to the checkpoint)")
    p.add_argument("--n-tasks", type=int)
    p.add_argument("--out-dir", help="where to write results (default: checkpoint directory)")

    for name, default_iters in (("reproduce-table1", 20000), ("reproduce-blobs", 5000)):
        p = sub.add_parser(name)
        p.add_argument("--out-dir", required=True)
        p.add_argument("--iterations", type=int, default=default_iters)
        p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
        p.add_argument("--jobs", type=int, default=1)
    return parser


def _train(args) -> dict:
    config = parse_config(args.config)
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.out_dir is not None:
        overrides["out_dir"] = args.out_dir
    if overrides:
        config = config.replace(**overrides)
    state = train(config, config.out_dir, resume=args.resume)
    return {"out_dir": config.out_dir, "iteration": state.iteration}


def _eval(args) -> dict:
    ckpt = Path(args.checkpoint)
    config_path = Path(args.config) if args.config else ckpt.parent / CONFIG
    config = parse_config(config_path)
    if args.no_fisl:
        config = config.replace(mode="baseline")
    state = load_checkpoint(ckpt)
    record, _ = evaluate_domain(config, state, args.domain, args.n_tasks)
    out = Path(args.out_dir) if args.out_dir else ckpt.parent
    out.mkdir(parents=True, exist_ok=True)
    stem = f"eval_{args.domain}_{'nofisl' if args.no_fisl else 'fisl'}"
    write_results_csv(out / f"{stem}.csv", [result_row(record, config.shots.support, config.seed)])
    write_summary_json(out / f"{stem}.json", [record])
    return {"metric": record.metric_name, "mean": record.mean, "ci95": record.ci95_halfwidth, "n_tasks": record.n_tasks}


def _reproduce(args, fn, table: str) -> dict:
    fn(args.out_dir, args.iterations, tuple(args.seeds), args.jobs)
    text = (Path(args.out_dir) / table).read_text()
    print(text)
    return {"out_dir": args.out_dir, "table": str(Path(args.out_dir) / table)}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    try:
        if args.command == "train":
            result = _train(args)
        elif args.command == "eval":
            result = _eval(args)
        elif args.command == "reproduce-table1":
            result = _reproduce(args, reproduce_table1, "table1.md")
        else:
            result = _reproduce(args, reproduce_blobs, "blobs.md")
    except ConfigError as exc:
        print(json.dumps({"error": "config", "field": exc.path, "message": str(exc)}), file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - every failure becomes a JSON error document
        doc = {"error": type(exc).__name__, "message": str(exc)}
        if getattr(exc, "iteration", None) is not None:
            doc["iteration"] = exc.iteration
        print(json.dumps(doc), file=sys.stderr)
        return 1
    print(json.dumps(result))
    return 0


if __name__ == "__main__":
    sys.exit(main())
