"""Command-line entry point: ``irwri {inclusion,layered,landscape,forward,validate}``."""

from __future__ import annotations

import argparse
import logging
import os
import sys

from . import config as cfgmod
from . import experiments
from .survey import write_dataset


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="irwri", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)
    for name, help_ in [("inclusion", "circular-inclusion inversion"),
                        ("layered", "layered-model analog inversions (mono and joint)"),
                        ("landscape", "FWI and WRI misfit surfaces"),
                        ("forward", "synthesize data only"),
                        ("validate", "run the property test suite on tiny grids")]:
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("--config", metavar="PATH", help="experiment config file")
        sp.add_argument("--out", metavar="DIR", help="output directory")
        sp.add_argument("--seed", type=int, help="noise seed")
        sp.add_argument("--noise-snr", type=float, metavar="DB", help="add noise at this SNR")
        sp.add_argument("--regularization", choices=["dmp", "dmp+tv"])
        sp.add_argument("--active", nargs="+", choices=["v0", "eps", "delta"])
        sp.add_argument("-v", "--verbose", action="store_true")
    return p


def resolve_config(args) -> cfgmod.ExperimentConfig:
    if args.config:
        cfg = cfgmod.load(args.config)
    elif args.command in ("layered", "landscape"):
        cfg = cfgmod.layered_defaults()
    else:
        cfg = cfgmod.ExperimentConfig()
    if args.out:
        cfg.output.directory = args.out
    if args.seed is not None:
        cfg.noise.seed = args.seed
    if args.noise_snr is not None:
        cfg.noise.snr_db = args.noise_snr
    if args.regularization:
        cfg.inversion.regularization = args.regularization
    if args.active:
        cfg.inversion.active = tuple(args.active)
    return cfg


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command == "validate":
        import pytest
        here = os.path.dirname(os.path.abspath(__file__))
        tests = os.path.normpath(os.path.join(here, "..", "..", "tests"))
        return int(pytest.main([tests, "-q", "-m", "not slow"]))
    cfg = resolve_config(args)
    out = cfg.output.directory
    if args.command == "inclusion":
        report = experiments.run_inclusion(cfg)
    elif args.command == "layered":
        actives = [tuple(args.active)] if args.active else None
        report = experiments.run_layered(cfg, actives)
    elif args.command == "landscape":
        scape = experiments.run_landscape_scan(cfg)
        report = experiments.landscape_report(cfg, scape)
    else:
        grid, true, acq, data = experiments.run_forward(cfg)
        os.makedirs(out, exist_ok=True)
        write_dataset(os.path.join(out, "data"), data)
        cfgmod.save(cfg, os.path.join(out, "config.ini"))
        print(f"wrote {data.values.shape} samples to {out}")
        return 0
    paths = experiments.emit_outputs(report, out)
    for k in sorted(report.metrics):
        print(f"{k} = {report.metrics[k]}")
    print(f"wrote {len(paths)} files to {out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
