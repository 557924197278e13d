"""Command-line entry point: ``softalign <subcommand> [options]``."""

from __future__ import annotations

import argparse
import dataclasses
import logging
import sys

from . import experiments
from .config import ExperimentConfig, coerce, load_config
from .errors import ConfigError, SoftAlignError
from .robustness import ATTACKS

DEFAULT_EPSILONS = "0,0.01,0.02,0.03,0.04,0.05"


def _add_config_flags(p: argparse.ArgumentParser):
    p.add_argument("--config", help="key=value config file")
    p.add_argument("--preset", help="bundled preset name (mnist_smoke, cifar10_subset)")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override any config key; repeatable")
    group = p.add_argument_group("config fields")
    for f in dataclasses.fields(ExperimentConfig):
        group.add_argument("--" + f.name.replace("_", "-"), dest="cfg_" + f.name, metavar="VALUE")


def _config_from(args) -> ExperimentConfig:
    overrides = {}
    for item in args.set:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        key, value = item.split("=", 1)
        overrides[key.strip()] = value
    for f in dataclasses.fields(ExperimentConfig):
        value = getattr(args, "cfg_" + f.name)
        if value is not None:
            coerce(f.name, value)
            overrides[f.name] = value
    return load_config(args.config, args.preset, overrides)


def _epsilons(text: str) -> list[float]:
    try:
        return [float(t) for t in text.split(",") if t.strip()]
    except ValueError as exc:
        raise ConfigError(f"bad epsilon list {text!r}") from exc


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="softalign", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train networks with bp / fa / ifa")
    _add_config_flags(p)

    p = sub.add_parser("sweep", help="trainability sweep over init variance, depth or data size")
    _add_config_flags(p)
    p.add_argument("--axis", required=True, choices=experiments.SWEEP_AXES)

    p = sub.add_parser("spectrum", help="Hessian eigenvalue, trace, density and landscape")
    _add_config_flags(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--trial", type=int, default=0)
    p.add_argument("--no-landscape", action="store_true")

    p = sub.add_parser("landscape", help="PCA projection of a training trajectory")
    _add_config_flags(p)
    p.add_argument("--run-dir", required=True, help="trial directory holding checkpoints/")
    p.add_argument("--trial", type=int, default=0)

    p = sub.add_parser("attack", help="accuracy under FGSM / BIM / PGD")
    _add_config_flags(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--method", choices=ATTACKS, default="fgsm")
    p.add_argument("--eps", default=DEFAULT_EPSILONS, help="comma-separated, ascending")
    p.add_argument("--trial", type=int, default=0)

    p = sub.add_parser("corrupt", help="accuracy on CIFAR-10-C at one severity")
    _add_config_flags(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--severity", type=int, choices=range(1, 6), default=1)
    p.add_argument("--trial", type=int, default=0)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        cfg = _config_from(args)
        if args.command == "train":
            results = experiments.run_train(cfg)
            for t, r in enumerate(results):
                print(f"trial {t}: final test acc {r.final_test_acc:.4f} "
                      f"max train acc {r.max_train_acc:.4f}")
        elif args.command == "sweep":
            print(experiments.run_sweep(cfg, args.axis))
        elif args.command == "spectrum":
            paths = experiments.run_spectrum(cfg, args.checkpoint, args.trial, not args.no_landscape)
            print("\n".join(paths.values()))
        elif args.command == "landscape":
            print("\n".join(experiments.run_landscape(cfg, args.run_dir, args.trial).values()))
        elif args.command == "attack":
            print(experiments.run_attack(cfg, args.checkpoint, args.method, _epsilons(args.eps), args.trial))
        elif args.command == "corrupt":
            path, mean = experiments.run_corruption(cfg, args.checkpoint, args.severity, args.trial)
            print(path)
            print(f"mean corruption accuracy {mean:.4f}")
    except SoftAlignError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
