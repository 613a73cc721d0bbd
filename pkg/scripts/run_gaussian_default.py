#!/usr/bin/env python3
"""Four-way cross-validation on the Gaussian default benchmark.

Runs, on the matched Gaussian configuration (delta=2, sigma2=1, lam=1,
gamma=0.01, T=2, d=400):

  1. closed-form kernels vs the deterministic DMFT engine,
  2. Monte Carlo DMFT vs the deterministic engine,
  3. direct high-dimensional simulation vs the closed forms,

and prints per-kernel max-abs discrepancies. Artifacts land under --out.
"""

import argparse
import json
from pathlib import Path

import numpy as np

from dmft_lab import cli, dmft, mp_oracle, simulator
from dmft_lab.kernels import compare_tables, restrict_to_times
from dmft_lab.model import ModelParams, sample_instance
from dmft_lab.priors import GaussianFixed, PriorSpec

GRID = [0.25 * k for k in range(9)]


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", default="out/gaussian_default")
    ap.add_argument("--seed", type=int, default=7)
    ap.add_argument("--paths", type=int, default=20000)
    ap.add_argument("--replicas", type=int, default=20)
    args = ap.parse_args()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    params = ModelParams(n=800, d=400, sigma2=1.0, beta=1.0, gamma_step=0.01, horizon=2.0)
    prior = PriorSpec(GaussianFixed(1.0))
    oracle = mp_oracle.OracleParams(lam=1.0, sigma2=1.0, delta=2.0, tau_star2=1.0)
    law = mp_oracle.mp_quadrature(2.0, 400)

    print("== oracle vs deterministic DMFT (pure step bias) ==")
    oracle_tab = mp_oracle.oracle_table(np.asarray(GRID), oracle, law)
    linear_tab = restrict_to_times(dmft.linear_gaussian_dmft(params, 1.0, 1.0), GRID)
    rep = compare_tables(oracle_tab, linear_tab)
    for d in rep.discrepancies:
        print(f"  {d.kernel:>13s}: max {d.max_abs:.5f}  rms {d.rms:.5f}")

    print("== Monte Carlo DMFT vs deterministic DMFT ==")
    mc = dmft.solve_dmft(params, prior, n_paths=args.paths, seed=5)
    rep = compare_tables(
        restrict_to_times(mc.table, GRID),
        restrict_to_times(dmft.linear_gaussian_dmft(params, 1.0, 1.0), GRID),
    )
    for d in rep.discrepancies:
        print(f"  {d.kernel:>13s}: max {d.max_abs:.5f}  rms {d.rms:.5f}")

    print("== simulation vs oracle ==")
    grid5 = np.array([0.0, 0.5, 1.0, 1.5, 2.0])
    steps = (grid5 / params.gamma_step + 0.5).astype(int)
    instances, trajs, traces = [], [], []
    for r in range(args.replicas):
        inst = sample_instance(params, prior, seed=args.seed * 1000 + r)
        instances.append(inst)
        trajs.append(simulator.evolve(inst, prior, params, seed=args.seed * 1000 + r, retain_every=10))
        traces.append(simulator.response_traces(None, inst, prior, params, steps))
    table = simulator.empirical_kernels(trajs, instances, params)
    simulator.attach_response(table, simulator.average_response_traces(traces))
    rep = compare_tables(
        restrict_to_times(table, grid5), mp_oracle.oracle_table(grid5, oracle, law)
    )
    for d in rep.discrepancies:
        print(f"  {d.kernel:>13s}: max {d.max_abs:.5f}  rms {d.rms:.5f}")

    print("== CLI compare pipeline (writes artifacts) ==")
    with open(Path(__file__).parent.parent / "configs" / "gaussian_default.json") as fh:
        cfg = json.load(fh)
    cfg["out"] = str(out / "compare")
    status = cli.run(cfg)
    print(f"  report at {out / 'compare' / 'report.json'} (exit {status})")


if __name__ == "__main__":
    main()
