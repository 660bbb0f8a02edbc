"""Command-line entry point.

Subcommands: gen-dataset, train-surrogate, eval-surrogate, train-agent,
redispatch, evaluate, pso, compare-rl.  Global flags: --case, --config,
--seed, --out-dir, --desk-scale / --paper-scale.  Exit status 0 on
success, 1 on runtime failure, 2 on usage errors (argparse default).

Outputs land under --out-dir with fixed names:
  dataset.txt              gen-dataset
  surrogate.ckpt           train-surrogate
  surrogate_metrics.txt    train-surrogate / eval-surrogate
  agent_ep*.ckpt, agent_best.ckpt, train_log.txt     train-agent
  redispatch_histograms.txt, redispatch_action.txt   redispatch
  evaluation_report.txt    evaluate
  pso_result.txt           pso
  rl_comparison.txt        compare-rl
"""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from . import datasets, evaluate, pso, surrogate, training
from .distrl import AgentNets
from .grid import load_case, shipped_case_path
from .training import TrainConfig, load_train_config


def _add_common(p):
    p.add_argument("--case", default=None, help="case file (default: shipped 39-bus)")
    p.add_argument("--config", default=None,
                   help="key = value training config file")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-dir", default="out")
    scale = p.add_mutually_exclusive_group()
    scale.add_argument("--desk-scale", action="store_true", default=True,
                       help="desk-sized protocol (default)")
    scale.add_argument("--paper-scale", dest="desk_scale", action="store_false",
                       help="full published protocol sizes")


def build_parser():
    ap = argparse.ArgumentParser(
        prog="redispatch",
        description="transient-stability-constrained preventive redispatch "
                    "under photovoltaic uncertainty")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-dataset", help="generate the curve-label dataset")
    _add_common(p)
    p.add_argument("--samples-per-level", type=int, default=None,
                   help="states per level (desk default 10, paper 500)")
    p.add_argument("--yes", action="store_true",
                   help="skip the paper-scale confirmation prompt")

    p = sub.add_parser("train-surrogate", help="train the curve predictor")
    _add_common(p)
    p.add_argument("--dataset", default=None, help="dataset file "
                   "(default: <out-dir>/dataset.txt)")
    p.add_argument("--max-epochs", type=int, default=None,
                   help="default 400 desk / 80 paper scale")
    p.add_argument("--patience", type=int, default=None)

    p = sub.add_parser("eval-surrogate", help="metrics report on a dataset split")
    _add_common(p)
    p.add_argument("--dataset", default=None)
    p.add_argument("--surrogate", default=None,
                   help="checkpoint (default: <out-dir>/surrogate.ckpt)")

    p = sub.add_parser("train-agent", help="train the redispatch agent")
    _add_common(p)
    p.add_argument("--surrogate", default=None)
    p.add_argument("--episodes", type=int, default=None)
    p.add_argument("--warmup-episodes", type=int, default=None)
    p.add_argument("--n-workers", type=int, default=None)
    p.add_argument("--m-samples", type=int, default=None)

    p = sub.add_parser("redispatch", help="one scenario: action + histograms")
    _add_common(p)
    p.add_argument("--surrogate", default=None)
    p.add_argument("--agent", default=None,
                   help="checkpoint (default: <out-dir>/agent_best.ckpt)")
    p.add_argument("--fault", type=int, required=True, help="faulted branch id")
    p.add_argument("--level", type=float, default=1.1)
    p.add_argument("--m-samples", type=int, default=50)

    p = sub.add_parser("evaluate", help="control confidence over a seeded pool")
    _add_common(p)
    p.add_argument("--surrogate", default=None)
    p.add_argument("--agent", default=None)
    p.add_argument("--scenarios", type=int, default=20)
    p.add_argument("--m-samples", type=int, default=50)
    p.add_argument("--zero-action", action="store_true",
                   help="evaluate the no-control baseline instead")

    p = sub.add_parser("pso", help="swarm baseline on one scenario")
    _add_common(p)
    p.add_argument("--surrogate", default=None)
    p.add_argument("--fault", type=int, required=True)
    p.add_argument("--level", type=float, default=1.1)
    p.add_argument("--m-samples", type=int, default=20)
    p.add_argument("--particles", type=int, default=30)
    p.add_argument("--iterations", type=int, default=50)
    p.add_argument("--backend", choices=("true-sim", "surrogate"),
                   default="true-sim")

    p = sub.add_parser("compare-rl", help="distributional vs scalar agents "
                       "under equal sample budgets")
    _add_common(p)
    p.add_argument("--surrogate", default=None)
    p.add_argument("--budgets", type=int, nargs="+",
                   default=[4000, 12000, 36000])
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    p.add_argument("--m-dist", type=int, default=20)
    return ap


def _load_case(args):
    return load_case(args.case or shipped_case_path())


def _out(args, name):
    os.makedirs(args.out_dir, exist_ok=True)
    return os.path.join(args.out_dir, name)


def _load_surrogate(args, case):
    path = args.surrogate or os.path.join(args.out_dir, "surrogate.ckpt")
    if not os.path.exists(path):
        raise FileNotFoundError(f"surrogate checkpoint not found: {path}")
    return surrogate.SurrogateModel.load(path, case)


def _load_agent(args, default_name="agent_best.ckpt"):
    path = args.agent or os.path.join(args.out_dir, default_name)
    if not os.path.exists(path):
        raise FileNotFoundError(f"agent checkpoint not found: {path}")
    return AgentNets.load(path)


def _say(msg):
    print(msg, flush=True)


def cmd_gen_dataset(args):
    case = _load_case(args)
    per_level = args.samples_per_level
    if per_level is None:
        per_level = 10 if args.desk_scale else 500
    total = 9 * per_level * len(case.faultable_branch_ids)
    _say(f"target record count: {total}")
    if not args.desk_scale and not args.yes:
        reply = input(f"generate {total} records at paper scale? [y/N] ")
        if reply.strip().lower() not in ("y", "yes"):
            _say("aborted")
            return 1
    rng = np.random.default_rng(args.seed)
    records = datasets.generate_dataset(case, rng, samples_per_level=per_level,
                                        log=_say)
    path = _out(args, "dataset.txt")
    datasets.write_records(path, case, records)
    _say(f"wrote {len(records)} records to {path}")
    return 0


def _metrics_text(metrics: dict) -> str:
    lines = []
    for split, m in metrics.items():
        if not m:
            continue
        lines.append(f"[{split}]")
        lines.append(f"MPEC {m['mpec']:.2f}%")
        lines.append(f"F1 {m['f1']:.2f}%")
        lines.append(f"Acc {m['acc']:.2f}%")
        lines.append(f"TNR {m['tnr']:.2f}%")
        lines.append(f"TPR {m['tpr']:.2f}%")
        c = m["counts"]
        lines.append(f"counts tp={c['tp']} tn={c['tn']} fp={c['fp']} fn={c['fn']}")
        lines.append("")
    return "\n".join(lines)


def cmd_train_surrogate(args):
    case = _load_case(args)
    dataset_path = args.dataset or os.path.join(args.out_dir, "dataset.txt")
    records = datasets.read_records(dataset_path, case)
    rng = np.random.default_rng(args.seed)
    if args.desk_scale:
        # small-dataset schedule: fewer records per epoch needs a longer
        # decay interval and smaller batches than the published recipe
        kw = dict(batch_size=128, lr=0.005, lr_decay_every=200,
                  max_epochs=args.max_epochs or 400,
                  patience=args.patience or 60)
    else:
        kw = dict(max_epochs=args.max_epochs or 80,
                  patience=args.patience or 5)
    model, report = surrogate.train_surrogate(case, records, rng, log=_say,
                                              **kw)
    model.save(_out(args, "surrogate.ckpt"))
    text = _metrics_text(report.metrics)
    with open(_out(args, "surrogate_metrics.txt"), "w") as fh:
        fh.write(text + "\n")
    _say(text)
    return 0


def cmd_eval_surrogate(args):
    case = _load_case(args)
    dataset_path = args.dataset or os.path.join(args.out_dir, "dataset.txt")
    records = datasets.read_records(dataset_path, case)
    model = _load_surrogate(args, case)
    metrics = surrogate.surrogate_metrics(model, records)
    text = _metrics_text({"dataset": metrics})
    with open(_out(args, "surrogate_metrics.txt"), "w") as fh:
        fh.write(text + "\n")
    _say(text)
    return 0


def cmd_train_agent(args):
    case = _load_case(args)
    model = _load_surrogate(args, case)
    overrides = {"seed": args.seed, "episodes": args.episodes,
                 "warmup_episodes": args.warmup_episodes,
                 "n_workers": args.n_workers, "m_samples": args.m_samples}
    if args.config:
        config = load_train_config(args.config, **overrides)
    else:
        base = TrainConfig() if not args.desk_scale else TrainConfig(
            episodes=600, warmup_episodes=50, n_workers=4, m_samples=50,
            validation_scenarios=12)
        config = _replace_config(base, overrides)
    _say(f"training for {config.episodes} episodes "
         f"({config.n_workers} workers, m={config.m_samples})")
    nets, result = training.run_training(case, model, config,
                                         out_dir=args.out_dir, log=_say)
    _say(f"best checkpoint: {result.best_path} "
         f"(validation return {result.best_val_return:.4f})")
    return 0


def _replace_config(base: TrainConfig, overrides: dict) -> TrainConfig:
    from dataclasses import replace
    usable = {k: v for k, v in overrides.items() if v is not None}
    return replace(base, **usable).validate()


def cmd_redispatch(args):
    case = _load_case(args)
    model = _load_surrogate(args, case)
    nets = _load_agent(args)
    rng = np.random.default_rng(args.seed)
    from .grid import sample_base_state, sample_scenario
    base = sample_base_state(case, args.level, rng)
    scenario = sample_scenario(case, base, case.contingency(args.fault),
                               args.m_samples, rng)
    result = evaluate.evaluate_scenario(case, scenario, model, nets)
    hist_path = _out(args, "redispatch_histograms.txt")
    evaluate.write_histograms(hist_path, result.pre_hist, result.critic_hist,
                              result.post_hist)
    action_path = _out(args, "redispatch_action.txt")
    with open(action_path, "w") as fh:
        fh.write("gen_index action_mw\n")
        for i, gi in enumerate(case.adjustable_indices):
            fh.write(f"{gi} {result.action[i]:.3f}\n")
    _say(f"pre-control confidence {result.pre_confidence:.3f}; "
         f"post-control {result.post_confidence:.3f} "
         f"(critic predicted {result.critic_confidence:.3f}); "
         f"cost {result.cost:.2f} $")
    _say(f"wrote {hist_path} and {action_path}")
    return 0


def cmd_evaluate(args):
    case = _load_case(args)
    model = _load_surrogate(args, case)
    nets = None if args.zero_action else _load_agent(args)
    pool, pre_vals = evaluate.build_eval_pool(
        case, args.scenarios, args.m_samples, args.seed,
        level_low=1.0, level_high=1.2)
    report = evaluate.evaluate_pool(case, pool, pre_vals, model, nets)
    text = evaluate.format_report(report)
    with open(_out(args, "evaluation_report.txt"), "w") as fh:
        fh.write(text + "\n")
    _say(text)
    return 0


def cmd_pso(args):
    case = _load_case(args)
    model = None
    if args.backend == "surrogate":
        model = _load_surrogate(args, case)
    rng = np.random.default_rng(args.seed)
    from .grid import sample_base_state, sample_scenario
    base = sample_base_state(case, args.level, rng)
    scenario = sample_scenario(case, base, case.contingency(args.fault),
                               args.m_samples, rng)
    config = pso.PsoConfig(particles=args.particles,
                           iterations=args.iterations)
    result = pso.pso_redispatch(case, scenario, config, rng,
                                backend=args.backend, model=model)
    path = _out(args, "pso_result.txt")
    with open(path, "w") as fh:
        fh.write("gen_index action_mw\n")
        for i, gi in enumerate(case.adjustable_indices):
            fh.write(f"{gi} {result['action'][i]:.3f}\n")
        fh.write(f"# cost {result['cost']:.2f} $, confidence "
                 f"{result['confidence']:.3f}, wall {result['wall_time']:.1f} s\n")
    _say(f"PSO confidence {result['confidence']:.3f}, cost {result['cost']:.2f} $, "
         f"wall {result['wall_time']:.1f} s -> {path}")
    return 0


def cmd_compare_rl(args):
    case = _load_case(args)
    model = _load_surrogate(args, case)
    base_config = TrainConfig(n_workers=2, steps_per_episode=5,
                              warmup_episodes=30, batch_size=32,
                              noise_sigma=10.0, level_low=1.0,
                              level_high=1.2, seed=args.seed)
    rows = evaluate.compare_rl(case, model, args.budgets, args.seeds,
                               base_config, m_dist=args.m_dist, log=_say)
    path = _out(args, "rl_comparison.txt")
    evaluate.write_comparison(path, rows)
    _say(f"wrote {path}")
    return 0


COMMANDS = {
    "gen-dataset": cmd_gen_dataset,
    "train-surrogate": cmd_train_surrogate,
    "eval-surrogate": cmd_eval_surrogate,
    "train-agent": cmd_train_agent,
    "redispatch": cmd_redispatch,
    "evaluate": cmd_evaluate,
    "pso": cmd_pso,
    "compare-rl": cmd_compare_rl,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except (FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
