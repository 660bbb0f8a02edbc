#!/usr/bin/env python3
"""Surrogate-vs-simulator timing on 1,000 identical inputs.

Needs a trained surrogate checkpoint (see desk_pipeline.py) and the
matching dataset file for input states.
"""

import argparse
import sys
import time

import numpy as np

from redispatch import datasets, grid, powerflow, surrogate, transient


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out-dir", default="out")
    ap.add_argument("--count", type=int, default=1000)
    args = ap.parse_args()

    case = grid.load_case(grid.shipped_case_path())
    model = surrogate.SurrogateModel.load(f"{args.out_dir}/surrogate.ckpt", case)
    records = datasets.read_records(f"{args.out_dir}/dataset.txt", case)
    rng = np.random.default_rng(0)
    picks = [records[i] for i in rng.choice(len(records), args.count)]

    graphs = [surrogate.graph_from_record(model.template, r, model.norm)
              for r in picks]
    batch = surrogate.batch_graphs(graphs)
    model.predict_curves_batch(batch)          # warm-up
    t0 = time.perf_counter()
    model.predict_curves_batch(batch)
    t_pred = time.perf_counter() - t0

    t0 = time.perf_counter()
    done = 0
    while done < args.count:
        state = grid.sample_base_state(case, 1.1, rng)
        sol = powerflow.solve(case, state)
        if not sol.converged:
            continue
        for branch in case.faultable_branch_ids:
            transient.simulate(case, sol, case.contingency(branch),
                               pv_p=state.pv_p)
            done += 1
            if done >= args.count:
                break
    t_sim = time.perf_counter() - t0

    print(f"{args.count} surrogate predictions: {t_pred:.3f} s")
    print(f"{args.count} time-domain simulations: {t_sim:.1f} s")
    print(f"speedup: {t_sim / t_pred:.0f}x")
    return 0


if __name__ == "__main__":
    sys.exit(main())
