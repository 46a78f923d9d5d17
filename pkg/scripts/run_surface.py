#!/usr/bin/env python3
"""Log-likelihood surface over (alpha, tau) on one simulated dataset.

Reproduces the flat-ridge picture around the true kernel parameters.
Emits surface.csv (alpha, tau, loglik) ready for any contour plotter.
"""

import argparse
import json
import sys
import tempfile
from pathlib import Path

from ioulme.cli import main as cli_main

from run_table_study import REFERENCE_THETA


def run(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    design = {
        "kind": args.design,
        "n_subjects": args.n_subjects,
        "n_points": 20,
        "design_seed": args.design_seed,
    }
    with tempfile.NamedTemporaryFile("w", suffix=".json", delete=False) as fh:
        json.dump(design, fh)
        design_path = fh.name
    with tempfile.NamedTemporaryFile("w", suffix=".json", delete=False) as fh:
        json.dump(REFERENCE_THETA, fh)
        theta_path = fh.name
    return cli_main([
        "surface",
        "--design", design_path,
        "--theta", theta_path,
        "--noise-seed", str(args.noise_seed),
        "--alpha-min", "0.3", "--alpha-max", "3.3", "--alpha-steps", str(args.steps),
        "--tau-min", "0.1", "--tau-max", "0.9", "--tau-steps", str(args.steps),
        "--out", str(out),
    ])


if __name__ == "__main__":
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--design", choices=["balanced", "unbalanced"], default="unbalanced")
    parser.add_argument("--n-subjects", type=int, default=500)
    parser.add_argument("--steps", type=int, default=41)
    parser.add_argument("--design-seed", type=int, default=20250808)
    parser.add_argument("--noise-seed", type=int, default=515)
    parser.add_argument("--out", default="out/surface")
    sys.exit(run(parser.parse_args()))
