"""Misfit surfaces of reduced FWI and WRI over the (alpha, beta) model family.

By default scans the full grid of the layered analog; ``--line`` evaluates
only the ``beta = beta_line`` cut and ``--frequency`` overrides the 3 Hz
default, which is useful to see where cycle skipping sets in.
"""

import argparse
import dataclasses

import numpy as np

from irwri import config as cfgmod
from irwri.experiments import emit_outputs, landscape_report, run_landscape_scan, spurious_minima_along_alpha


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--coarse", action="store_true")
    p.add_argument("--line", action="store_true")
    p.add_argument("--frequency", type=float)
    p.add_argument("--passive-delta", choices=["smoothed", "true"])
    p.add_argument("--out", default="out/landscape")
    args = p.parse_args(argv)
    cfg = cfgmod.layered_coarse() if args.coarse else cfgmod.layered_defaults()
    if args.frequency:
        cfg.landscape = dataclasses.replace(cfg.landscape, frequency=args.frequency)
    if args.passive_delta:
        cfg.landscape = dataclasses.replace(cfg.landscape, passive_delta=args.passive_delta)
    betas = [cfg.landscape.beta_line] if args.line else None
    scape = run_landscape_scan(cfg, betas=betas)
    emit_outputs(landscape_report(cfg, scape), args.out)
    for name in ("fwi", "wri"):
        n = spurious_minima_along_alpha(scape, getattr(scape, name), cfg.landscape.beta_line)
        line = getattr(scape, name)[int(np.argmin(np.abs(scape.beta - cfg.landscape.beta_line)))]
        print(f"{name}: {n} spurious minima along alpha at beta={cfg.landscape.beta_line:g}")
        print("  " + " ".join(f"{v:.3f}" for v in line / line.max()))


if __name__ == "__main__":
    main()
