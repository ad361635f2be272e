"""Command line entry point.

    htr train CONFIG --seed S [--out DIR] [--section.key VALUE ...]
    htr eval CHECKPOINT CONFIG [--episodes N] [--seed S] [--section.key VALUE ...]
    htr sweep CONFIG --key KEY --values V [V ...] --seed S [S ...] [--out DIR]
    htr plot DIR [--out DIR]

CONFIG is a config file path or a shipped profile name (``desk``, ``full``).
Any config key can be overridden with ``--key value`` or ``--key=value``.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

from htr.errors import InvalidArgumentError
from htr.harness.config import RunConfig, apply_overrides, known_keys, load_config

USAGE_ERROR = 2


class UsageError(Exception):
    pass


def _parse_overrides(extra: Sequence[str]) -> dict[str, str]:
    keys = known_keys()
    out: dict[str, str] = {}
    i = 0
    while i < len(extra):
        tok = extra[i]
        if not tok.startswith("--"):
            raise UsageError(f"unexpected argument {tok!r}")
        if "=" in tok:
            key, value = tok[2:].split("=", 1)
            i += 1
        else:
            if i + 1 >= len(extra):
                raise UsageError(f"missing value for {tok}")
            key, value = tok[2:], extra[i + 1]
            i += 2
        if key not in keys:
            raise UsageError(f"unknown option or config key {tok!r}")
        out[key] = value
    return out


def _build_config(source: str, extra: Sequence[str], seed: Optional[int] = None) -> RunConfig:
    try:
        cfg = load_config(source)
    except FileNotFoundError:
        raise UsageError(f"config {source!r} not found (not a file or profile name)") from None
    overrides = _parse_overrides(extra)
    if seed is not None:
        overrides["seed"] = str(seed)
    cfg = apply_overrides(cfg, overrides)
    cfg.validate()
    return cfg


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="htr", description="Hindsight task relabeling for off-policy meta-RL")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="meta-train from a config")
    t.add_argument("config")
    t.add_argument("--seed", type=int, required=True)
    t.add_argument("--out", default=None, help="run directory (default runs/<config>-seed<S>)")

    e = sub.add_parser("eval", help="meta-test a checkpoint")
    e.add_argument("checkpoint")
    e.add_argument("config")
    e.add_argument("--episodes", type=int, default=None)
    e.add_argument("--seed", type=int, default=None)

    s = sub.add_parser("sweep", help="train once per value of one config key")
    s.add_argument("config")
    s.add_argument("--key", required=True)
    s.add_argument("--values", nargs="+", required=True)
    s.add_argument("--seed", type=int, nargs="+", required=True)
    s.add_argument("--out", default="runs/sweep")

    pl = sub.add_parser("plot", help="render SVG figures from run directories")
    pl.add_argument("dir")
    pl.add_argument("--out", default=None)
    return p


def _cmd_train(args, extra) -> int:
    from htr.harness.train import meta_train

    cfg = _build_config(args.config, extra, args.seed)
    out = args.out or f"runs/{Path(args.config).stem}-seed{args.seed}"
    log = meta_train(cfg, out)
    last = log[-1] if log else None
    print(json.dumps({"out": str(out), "iters": len(log),
                      "final_test_return": last.avg_test_adaptation_return if last else None}))
    return 0


def _cmd_eval(args, extra) -> int:
    from htr.harness.train import Trainer, meta_test

    cfg = _build_config(args.config, extra, args.seed)
    trainer = Trainer(cfg)
    trainer.load(args.checkpoint)
    episodes = args.episodes or cfg.eval_episodes
    curve = meta_test(trainer.agent, trainer.test_tasks, cfg.env, episodes, trainer.rngs["eval"])
    print(json.dumps({"adaptation_curve": curve.tolist(), "avg_test_adaptation_return": float(curve.mean())}))
    return 0


def _cmd_sweep(args, extra) -> int:
    from htr.harness.train import meta_train

    if args.key not in known_keys():
        raise UsageError(f"unknown sweep key {args.key!r}")
    base = _build_config(args.config, extra)
    configs = []
    for value in args.values:
        for seed in args.seed:
            cfg = apply_overrides(base, {args.key: value, "seed": str(seed)})
            cfg.validate()
            configs.append((Path(args.out) / f"{args.key}={value}-seed{seed}", cfg))
    for out, cfg in configs:
        log = meta_train(cfg, out)
        final = log[-1].avg_test_adaptation_return if log else None
        print(json.dumps({"out": str(out), "final_test_return": final}), flush=True)
    return 0


def _cmd_plot(args, extra) -> int:
    from htr.harness.plots import emit_plots

    if extra:
        raise UsageError(f"unexpected arguments {extra}")
    for path in emit_plots(args.dir, args.out):
        print(path)
    return 0


COMMANDS = {"train": _cmd_train, "eval": _cmd_eval, "sweep": _cmd_sweep, "plot": _cmd_plot}


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = _parser()
    args, extra = parser.parse_known_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return COMMANDS[args.command](args, extra)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"htr {args.command}: error: {exc}", file=sys.stderr)
        return USAGE_ERROR
    except InvalidArgumentError as exc:
        print(f"htr {args.command}: invalid configuration: {exc}", file=sys.stderr)
        return USAGE_ERROR
    except OSError as exc:
        print(f"htr {args.command}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
