#!/usr/bin/env python3
"""Desk-scale asymptotic diagnostics: expansion remainder, score CLT,
information stabilization, and third-derivative decay. Writes one JSON
per check."""

import argparse
import json
import sys
from pathlib import Path

from ioulme.covariance import CovParams, KernelSpec
from ioulme.diagnostics import (
    information_limit_check,
    lan_expansion_check,
    score_clt_check,
    third_derivative_bound_check,
)
from ioulme.likelihood import ParamVector
from ioulme.simulate import DesignConfig, DesignKind, generate_design, simulate_responses

THETA = ParamVector(beta=[-0.25, 0.50], cov=CovParams.iou([1.25, 1.00, 1.50], 1.30, 0.40, 1.25**2))
SPEC = KernelSpec()


def run(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    design = DesignConfig(kind=DesignKind.UNBALANCED, n_subjects=100, design_seed=args.design_seed)

    lan = lan_expansion_check(THETA, SPEC, design, n_values=args.lan_n, replications=args.replications,
                              noise_seed=args.noise_seed)
    (out / "lan.json").write_text(json.dumps(lan.to_json_dict(), indent=2))
    print("expansion remainder, coordinate direction means per N:")
    for j, label in enumerate(lan.direction_labels[: THETA.p]):
        print(f"  {label}: " + " -> ".join(f"{v:.4g}" for v in lan.mean_abs_residual[:, j]))

    clt = score_clt_check(THETA, SPEC, design, n=args.clt_n, replications=args.replications,
                          noise_seed=args.noise_seed)
    (out / "clt.json").write_text(json.dumps(clt.to_json_dict(), indent=2))
    print(f"score CLT: max |emp cov - info| = {clt.max_abs_dev:.4g} ({clt.max_dev_units:.2f} mcse units)")

    info = information_limit_check(SPEC, design, THETA, n_values=[100, 200, 400, 800])
    (out / "information.json").write_text(json.dumps(info.to_json_dict(), indent=2))
    print(f"information stabilization: A changes {info.a_consecutive_change}, "
          f"min eigs {['%.3g' % v for v in info.a_min_eigenvalues]}")

    third = {}
    for n in (100, 400):
        sk = generate_design(DesignConfig(kind=DesignKind.UNBALANCED, n_subjects=n, design_seed=args.design_seed))
        ds = simulate_responses(sk, THETA, SPEC, args.noise_seed)
        third[str(n)] = third_derivative_bound_check(ds, THETA, SPEC, radius=1.0, n_points=5)
    (out / "third_derivative.json").write_text(json.dumps(third, indent=2))
    print("third-derivative scaled norms:",
          {n: f"{v['max_scaled_norm']:.4g}" for n, v in third.items()})
    print(f"outputs in {out}")
    return 0


if __name__ == "__main__":
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--replications", type=int, default=200)
    parser.add_argument("--lan-n", type=int, nargs="+", default=[100, 400, 1600])
    parser.add_argument("--clt-n", type=int, default=500)
    parser.add_argument("--design-seed", type=int, default=20250808)
    parser.add_argument("--noise-seed", type=int, default=515)
    parser.add_argument("--out", default="out/asymptotics")
    sys.exit(run(parser.parse_args()))
