"""Command-line entry point: ``qrange train | cost-table | sweep | make-idx``."""

from __future__ import annotations

import argparse
import json
import logging
import sys

from .. import cost_model
from ..estimators import EstimatorKind

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="qrange", description="Quantized-training range estimation simulator")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    t = sub.add_parser("train", help="train one configuration")
    t.add_argument("--config", required=True)
    t.add_argument("--seed", type=int)
    t.add_argument("--out", help="metrics JSONL path")
    t.add_argument("--checkpoint", help="write final parameters here")

    c = sub.add_parser("cost-table", help="static vs dynamic memory-movement table")
    c.add_argument("--network", help="layer JSON file (default: bundled ResNet18/MobileNetV2 layers)")
    c.add_argument("--bw", type=int, default=8)
    c.add_argument("--ba", type=int, default=8)
    c.add_argument("--bacc", type=int, default=32)
    c.add_argument("--batch", type=int, default=1)
    c.add_argument("--format", choices=["table", "csv"], default="table")

    s = sub.add_parser("sweep", help="train every estimator over several seeds")
    s.add_argument("--config", required=True)
    s.add_argument("--vary", choices=["estimator"], default="estimator")
    s.add_argument("--seeds", type=int, default=3)
    s.add_argument("--out-dir", default="sweep_out")
    s.add_argument("--momentum", type=float, help="EMA momentum for running/in-hindsight")
    s.add_argument("--interval", type=int, help="DSGC update interval")

    m = sub.add_parser("make-idx", help="write the 28x28 digits IDX dataset")
    m.add_argument("--out-dir", required=True)
    m.add_argument("--train", type=int, default=5000)
    m.add_argument("--test", type=int, default=1000)
    m.add_argument("--seed", type=int, default=0)
    return p


def _cmd_train(args) -> int:
    from .config import load_config
    from .runner import JsonlSink, run_training

    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = cfg.with_overrides(seed=args.seed)
    sinks = []
    sink = JsonlSink(args.out) if args.out else None
    if sink:
        sinks.append(sink)
    try:
        final = run_training(cfg, sinks, checkpoint=args.checkpoint)
    finally:
        if sink:
            sink.close()
    print(final.to_json())
    return EXIT_OK


def _cmd_cost_table(args) -> int:
    layers = cost_model.load_network(args.network)
    bits = cost_model.BitWidths(args.bw, args.ba, args.bacc)
    sys.stdout.write(cost_model.format_table(layers, bits, args.format, args.batch))
    return EXIT_OK


def _cmd_sweep(args) -> int:
    from .config import load_config
    from .runner import run_sweep

    cfg = load_config(args.config)
    summary = run_sweep(cfg, args.out_dir, args.seeds, args.momentum, args.interval)
    for kind in EstimatorKind:
        s = summary[kind.value]
        print(f"{kind.value:16s} {kind.static_flag:8s} val_acc {100 * s['mean']:.2f} +- {100 * s['std']:.2f}")
    return EXIT_OK


def _cmd_make_idx(args) -> int:
    from .data import make_digits_idx

    paths = make_digits_idx(args.out_dir, args.train, args.test, args.seed)
    print(json.dumps({k: str(v) for k, v in paths.items()}, indent=1))
    return EXIT_OK


COMMANDS = {"train": _cmd_train, "cost-table": _cmd_cost_table, "sweep": _cmd_sweep, "make-idx": _cmd_make_idx}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return COMMANDS[args.command](args)
    except Exception as e:  # noqa: BLE001
        print(f"qrange {args.command}: error: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
