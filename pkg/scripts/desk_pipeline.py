#!/usr/bin/env python3
"""End-to-end desk-scale experiment: dataset -> surrogate -> agent -> report.

Writes everything under --out-dir (default out/).  Expect roughly an hour
on a laptop-class CPU; pass --quick for a toy-sized sanity run.
"""

import argparse
import os
import sys
import time

import numpy as np

from redispatch import datasets, evaluate, grid, surrogate, training


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out-dir", default="out")
    ap.add_argument("--seed", type=int, default=42)
    ap.add_argument("--quick", action="store_true",
                    help="toy sizes for a fast smoke run")
    args = ap.parse_args()
    os.makedirs(args.out_dir, exist_ok=True)
    say = lambda m: print(f"[{time.strftime('%H:%M:%S')}] {m}", flush=True)

    case = grid.load_case(grid.shipped_case_path())
    per_level = 2 if args.quick else 10
    say(f"generating dataset ({per_level} states/level x 9 levels x 33 faults)")
    records = datasets.generate_dataset(case, np.random.default_rng(args.seed),
                                        samples_per_level=per_level)
    datasets.write_records(os.path.join(args.out_dir, "dataset.txt"), case,
                           records)
    say(f"{len(records)} records")

    say("training surrogate")
    model, report = surrogate.train_surrogate(
        case, records, np.random.default_rng(args.seed + 1),
        batch_size=128, lr=0.005, lr_decay_every=200,
        max_epochs=60 if args.quick else 400,
        patience=60)
    model.save(os.path.join(args.out_dir, "surrogate.ckpt"))
    say(f"surrogate test metrics: {report.metrics['test']}")

    say("training agent")
    config = training.TrainConfig(
        episodes=40 if args.quick else 600,
        warmup_episodes=10 if args.quick else 50,
        n_workers=2 if args.quick else 4,
        m_samples=8 if args.quick else 50,
        noise_sigma=10.0, validation_scenarios=4 if args.quick else 12,
        checkpoint_every=20 if args.quick else 100, seed=args.seed + 2)
    nets, result = training.run_training(case, model, config,
                                         out_dir=args.out_dir, log=say)
    say(f"best validation return {result.best_val_return:.4f}")

    say("evaluating on a held-out pool (true simulator)")
    pool, pre_vals = evaluate.build_eval_pool(
        case, 5 if args.quick else 20, m=10 if args.quick else 50,
        seed=args.seed + 3, level_low=1.0, level_high=1.2,
        max_pre_confidence=0.6)
    rep = evaluate.evaluate_pool(case, pool, pre_vals, model, nets,
                                 steps=config.steps_per_episode, mu=config.mu)
    text = evaluate.format_report(rep)
    with open(os.path.join(args.out_dir, "evaluation_report.txt"), "w") as fh:
        fh.write(text + "\n")
    say(f"pre-control confidence {rep.mean_pre_confidence:.3f} -> "
        f"post-control {rep.mean_post_confidence:.3f}; "
        f"mean cost {rep.mean_cost:.0f} $")
    return 0


if __name__ == "__main__":
    sys.exit(main())
