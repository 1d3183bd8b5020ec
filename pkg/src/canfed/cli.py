"""Command-line entry point: ``canfed <command> [--config FILE] [options]``."""

from __future__ import annotations

import argparse
import logging
import os
import sys

from .config import load_config
from .errors import CanFedError

TOKEN_ENV = "CANFED_BROKER_TOKEN"
EXIT_USAGE = 2


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="canfed", description="Federated CAN intrusion detection experiments.")
    p.add_argument("-v", "--verbose", action="count", default=0, help="log progress (repeat for debug)")
    sub = p.add_subparsers(dest="command", required=True)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML experiment file")
    common.add_argument("--seed", type=int, help="global seed (overrides the config)")
    common.add_argument("--out", help="output directory (overrides the config)")
    common.add_argument("--transport", choices=["loopback", "tcp"], help="federation transport")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override any config key, e.g. --set federation.vehicles=10")

    sub.add_parser("segment", parents=[common], help="derive signal layouts and write one file per ID")
    sub.add_parser("attack", parents=[common], help="write attacked validation/test logs with label files")
    sub.add_parser("train", parents=[common], help="train centralized and/or federated models")
    sub.add_parser("evaluate", parents=[common], help="score trained models and write reports")
    sub.add_parser("run", parents=[common], help="train then evaluate")

    b = sub.add_parser("broker", help="run the publish/subscribe broker")
    b.add_argument("--bind", default="127.0.0.1:1883", help="host:port to listen on")
    b.add_argument("--token", help=f"shared connection secret (default: ${TOKEN_ENV})")
    b.add_argument("--timeout", type=float, default=1.0, help="retransmission timeout in seconds")
    b.add_argument("--max-retries", type=int, default=10)
    return p


def _config(args):
    overrides = list(args.set)
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    if args.out is not None:
        overrides.append(f"out={args.out}")
    if args.transport is not None:
        overrides.append(f"transport.kind={args.transport}")
    return load_config(args.config, overrides)


def _broker(args) -> int:
    from .pubsub.tcp import BrokerServer

    token = args.token if args.token is not None else os.environ.get(TOKEN_ENV, "")
    server = BrokerServer(args.bind, token, args.timeout, args.max_retries)
    server.start()
    host, port = server.address
    print(f"broker listening on {host}:{port}", file=sys.stderr, flush=True)
    server.serve_forever()
    return 0


def _run(args) -> int:
    from . import experiment

    cfg = _config(args)
    if args.command == "segment":
        paths = experiment.cmd_segment(cfg)
    elif args.command == "attack":
        paths = experiment.cmd_attack(cfg)
    elif args.command == "train":
        experiment.cmd_train(cfg)
        paths = sorted((cfg.out_dir / "models").glob("*.fcw"))
    else:
        if args.command == "run":
            experiment.cmd_train(cfg)
        experiment.cmd_evaluate(cfg)
        report = cfg.out_dir / "reports" / "detection.txt"
        sys.stdout.write(report.read_text())
        overhead = cfg.out_dir / "reports" / "overhead.txt"
        if overhead.exists():
            sys.stdout.write("\n" + overhead.read_text())
        return 0
    for p in paths:
        print(p)
    return 0


def main(argv: list[str] | None = None) -> int:
    args = _parser().parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "broker":
            return _broker(args)
        return _run(args)
    except FileNotFoundError as exc:
        print(f"canfed: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except CanFedError as exc:
        print(f"canfed: error: {exc}", file=sys.stderr)
        return 1
    except KeyboardInterrupt:
        return 130


if __name__ == "__main__":
    sys.exit(main())
