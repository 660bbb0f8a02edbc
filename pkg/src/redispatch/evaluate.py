"""Evaluation harness: control confidence, cost, stability-index
distributions, and the distributional-vs-scalar agent comparison.

Control confidence is always validated with the ground-truth simulator:
every Monte-Carlo sample of a scenario is re-simulated after the agent's
redispatch, and the confidence is the stable fraction.  The surrogate
only drives the rollout itself, exactly as during training.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import distrl, powerflow, transient
from .distrl import AgentConfig, AgentNets, ATOMS, N_ATOMS
from .grid import NetworkCase, ScenarioDistribution, apply_redispatch
from .surrogate import SurrogateModel
from .training import (TrainConfig, make_scenario, redispatch_cost, rollout,
                       run_training)

__all__ = ["ScenarioResult", "EvaluationReport", "true_tsi_values",
           "evaluate_scenario", "build_eval_pool", "evaluate_pool",
           "predicted_post_distribution", "write_histograms",
           "read_histograms", "compare_rl", "write_comparison",
           "format_report"]


def true_tsi_values(case: NetworkCase, scenario: ScenarioDistribution,
                    action=None,
                    sim_config: transient.SimConfig = transient.SimConfig()):
    """Ground-truth per-sample stability values (diverged power flows count
    as fully unstable)."""
    out = np.full(len(scenario.samples), -1.0)
    for k, s in enumerate(scenario.samples):
        if action is not None:
            s = apply_redispatch(case, s, action)
        sol = powerflow.solve(case, s)
        if not sol.converged:
            continue
        curves = transient.simulate(case, sol, scenario.contingency,
                                    sim_config, pv_p=s.pv_p)
        out[k] = transient.tsi(curves)
    return out


def predicted_post_distribution(pre_tsi_values: np.ndarray,
                                critic_probs: np.ndarray) -> np.ndarray:
    """Post-control stability distribution implied by the critic: shift the
    pre-control per-sample values by the critic's return distribution and
    project back onto the atom grid."""
    return distrl.categorical_target(pre_tsi_values, critic_probs,
                                     gamma=1.0, terminal=False)


@dataclass
class ScenarioResult:
    fault_branch_id: int
    pre_confidence: float          # stable fraction before control (true sim)
    post_confidence: float         # stable fraction after control (true sim)
    critic_confidence: float       # stable mass of the critic's prediction
    cost: float                    # dollars
    action: np.ndarray             # cumulative MW redispatch
    pre_hist: np.ndarray           # (N_ATOMS,) true pre-control distribution
    critic_hist: np.ndarray        # critic-predicted post-control
    post_hist: np.ndarray          # true post-control distribution
    wall_time: float


def evaluate_scenario(case: NetworkCase, scenario: ScenarioDistribution,
                      model: SurrogateModel, nets: AgentNets | None,
                      steps: int = 5, mu: float = 0.1,
                      sim_config: transient.SimConfig = transient.SimConfig(),
                      pre_tsi: np.ndarray | None = None) -> ScenarioResult:
    """Roll the actor out (nets=None means the zero-action baseline),
    validate every sample with the true simulator, and collect the three
    stability histograms."""
    t0 = time.perf_counter()
    if pre_tsi is None:
        pre_tsi = true_tsi_values(case, scenario, sim_config=sim_config)
    if nets is not None:
        transitions, final_env, actions, _, first_env = rollout(
            case, scenario, model, nets, steps, mu)
        total_action = actions.sum(axis=0)
        critic_probs = _critic_return_distribution(nets, first_env.state_array,
                                                   actions[0])
    else:
        total_action = np.zeros(len(case.adjustable_indices))
        critic_probs = distrl.two_hot(np.zeros(1))[0]
    post_tsi = true_tsi_values(case, scenario, action=total_action,
                               sim_config=sim_config)
    pre_hist = distrl.empirical_tsi_distribution(pre_tsi)
    post_hist = distrl.empirical_tsi_distribution(post_tsi)
    critic_hist = predicted_post_distribution(pre_tsi, critic_probs)
    stable_mass = lambda h: float(h[ATOMS > 0.0].sum())
    return ScenarioResult(
        fault_branch_id=scenario.contingency.branch_id,
        pre_confidence=float(np.mean(pre_tsi > 0.0)),
        post_confidence=float(np.mean(post_tsi > 0.0)),
        critic_confidence=stable_mass(critic_hist),
        cost=redispatch_cost(case, total_action),
        action=total_action,
        pre_hist=pre_hist, critic_hist=critic_hist, post_hist=post_hist,
        wall_time=time.perf_counter() - t0)


def _critic_return_distribution(nets: AgentNets, state_array, action):
    pf, tsi_head = distrl.critic_forward(nets, state_array[None], action[None])
    if nets.config.distributional:
        return tsi_head.data[0]
    return distrl.two_hot(np.clip(tsi_head.data[0:1], -1, 1))[0]


@dataclass
class EvaluationReport:
    results: list = field(default_factory=list)
    mean_pre_confidence: float = 0.0
    mean_post_confidence: float = 0.0
    mean_cost: float = 0.0
    per_fault: dict = field(default_factory=dict)

    @classmethod
    def from_results(cls, results: list) -> "EvaluationReport":
        rep = cls(results=results)
        if results:
            rep.mean_pre_confidence = float(np.mean([r.pre_confidence for r in results]))
            rep.mean_post_confidence = float(np.mean([r.post_confidence for r in results]))
            rep.mean_cost = float(np.mean([r.cost for r in results]))
            faults = sorted({r.fault_branch_id for r in results})
            rep.per_fault = {
                f: float(np.mean([r.post_confidence for r in results
                                  if r.fault_branch_id == f]))
                for f in faults}
        return rep


def build_eval_pool(case: NetworkCase, n_scenarios: int, m: int, seed: int,
                    level_low: float = 1.0, level_high: float = 1.2,
                    fault_ids=None, max_pre_confidence: float | None = None,
                    sim_config: transient.SimConfig = transient.SimConfig()):
    """Seeded held-out scenario pool at high loading levels.  With
    max_pre_confidence set, scenarios whose pre-control stable fraction
    (true simulator) exceeds it are skipped, so the pool holds scenarios
    that actually need control.  Returns (scenarios, pre_tsi_values)."""
    scenarios, pre_vals = [], []
    draw = 0
    while len(scenarios) < n_scenarios:
        rng = np.random.default_rng([seed, draw])
        draw += 1
        branch = None
        if fault_ids is not None:
            branch = int(fault_ids[int(rng.integers(len(fault_ids)))])
        sc = make_scenario(case, rng, m, level_low, level_high,
                           branch_id=branch)
        if max_pre_confidence is not None and max_pre_confidence < 1.0:
            # cheap screen: a scenario whose base state rides out the fault
            # comfortably will not clear a tight pre-confidence filter
            sol = powerflow.solve(case, sc.base)
            if sol.converged:
                base_tsi = transient.tsi(
                    transient.simulate(case, sol, sc.contingency, sim_config,
                                       pv_p=sc.base.pv_p))
                if base_tsi > 0.3:
                    continue
        pre = true_tsi_values(case, sc, sim_config=sim_config)
        if (max_pre_confidence is not None
                and float(np.mean(pre > 0)) > max_pre_confidence):
            continue
        scenarios.append(sc)
        pre_vals.append(pre)
        if draw > 300 * n_scenarios:
            raise RuntimeError("pool construction not converging; "
                               "relax max_pre_confidence")
    return scenarios, pre_vals


def evaluate_pool(case: NetworkCase, pool, pre_vals, model: SurrogateModel,
                  nets: AgentNets | None, steps: int = 5, mu: float = 0.1,
                  sim_config: transient.SimConfig = transient.SimConfig()
                  ) -> EvaluationReport:
    results = [evaluate_scenario(case, sc, model, nets, steps, mu, sim_config,
                                 pre_tsi=pre)
               for sc, pre in zip(pool, pre_vals)]
    return EvaluationReport.from_results(results)


def format_report(report: EvaluationReport) -> str:
    lines = ["scenario fault pre_conf post_conf critic_conf cost_dollars"]
    for i, r in enumerate(report.results):
        lines.append(f"{i} {r.fault_branch_id} {r.pre_confidence:.4f} "
                     f"{r.post_confidence:.4f} {r.critic_confidence:.4f} "
                     f"{r.cost:.2f}")
    lines.append("")
    lines.append("per-fault mean post-control confidence:")
    lines.append("fault mean_confidence")
    for f, c in report.per_fault.items():
        lines.append(f"{f} {c:.4f}")
    lines.append("")
    lines.append(f"mean_pre_confidence {report.mean_pre_confidence:.4f}")
    lines.append(f"mean_post_confidence {report.mean_post_confidence:.4f}")
    lines.append(f"mean_cost {report.mean_cost:.2f}")
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# histogram files

def write_histograms(path, pre_hist, critic_hist, post_hist):
    """Self-describing 51-bin histogram triple (atom grid in column 1)."""
    with open(path, "w") as fh:
        fh.write("atom pre_true post_critic post_true\n")
        for i in range(N_ATOMS):
            fh.write(f"{ATOMS[i]:.2f} {pre_hist[i]:.9g} {critic_hist[i]:.9g} "
                     f"{post_hist[i]:.9g}\n")


def read_histograms(path):
    with open(path) as fh:
        header = fh.readline().split()
        if header != ["atom", "pre_true", "post_critic", "post_true"]:
            raise ValueError(f"{path}: unexpected histogram header")
        rows = np.array([[float(t) for t in line.split()] for line in fh])
    return rows[:, 1], rows[:, 2], rows[:, 3]


# ---------------------------------------------------------------------------
# distributional vs scalar-expectation comparison

def compare_rl(case: NetworkCase, model: SurrogateModel, budgets, seeds,
               base_config: TrainConfig, m_dist: int,
               eval_pool_size: int = 10, eval_m: int = 20,
               eval_seed: int = 97,
               sim_config: transient.SimConfig = transient.SimConfig(),
               log=None):
    """Train the distributional agent and the scalar-expectation ablation
    under equal deterministic-sample budgets and measure true-simulator
    control confidence on a shared held-out pool.

    The ablation sees one Monte-Carlo sample per step (the classic setup),
    so a budget buys it more episodes; the distributional agent spends the
    same budget on m-sample scenarios.  Returns rows of
    (method, budget, seed, confidence).
    """
    pool, pre_vals = build_eval_pool(case, eval_pool_size, eval_m, eval_seed,
                                     level_low=1.0, level_high=1.2,
                                     max_pre_confidence=0.9,
                                     sim_config=sim_config)
    rows = []
    per_episode = base_config.n_workers * base_config.steps_per_episode
    for budget in budgets:
        for seed in seeds:
            for method, m in (("distrl", m_dist), ("rl", 1)):
                episodes = max(2, int(budget // (per_episode * m)))
                cfg = TrainConfig(
                    batch_size=base_config.batch_size,
                    n_workers=base_config.n_workers,
                    target_rate=base_config.target_rate,
                    episodes=episodes,
                    warmup_episodes=max(1, min(base_config.warmup_episodes,
                                               episodes // 4)),
                    steps_per_episode=base_config.steps_per_episode,
                    gamma=base_config.gamma, lr=base_config.lr,
                    mu=base_config.mu, m_samples=m,
                    buffer_capacity=base_config.buffer_capacity,
                    noise_sigma=base_config.noise_sigma,
                    noise_decay=base_config.noise_decay,
                    checkpoint_every=10 ** 9,
                    validation_scenarios=0,
                    level_low=base_config.level_low,
                    level_high=base_config.level_high,
                    seed=seed)
                agent_cfg = AgentConfig(
                    state_dim=model.config.state_dim,
                    n_actions=len(case.adjustable_indices),
                    distributional=(method == "distrl"))
                nets, _ = run_training(case, model, cfg,
                                       agent_config=agent_cfg)
                report = evaluate_pool(case, pool, pre_vals, model, nets,
                                       steps=base_config.steps_per_episode,
                                       mu=base_config.mu,
                                       sim_config=sim_config)
                rows.append({"method": method, "budget": int(budget),
                             "seed": int(seed),
                             "confidence": report.mean_post_confidence})
                if log is not None:
                    log(f"{method} budget={budget} seed={seed} "
                        f"episodes={episodes} "
                        f"confidence={report.mean_post_confidence:.4f}")
    return rows


def write_comparison(path, rows):
    with open(path, "w") as fh:
        fh.write("method budget seed confidence\n")
        for r in rows:
            fh.write(f"{r['method']} {r['budget']} {r['seed']} "
                     f"{r['confidence']:.6f}\n")


def read_comparison(path):
    rows = []
    with open(path) as fh:
        header = fh.readline().split()
        if header != ["method", "budget", "seed", "confidence"]:
            raise ValueError(f"{path}: unexpected comparison header")
        for line in fh:
            m, b, s, c = line.split()
            rows.append({"method": m, "budget": int(b), "seed": int(s),
                         "confidence": float(c)})
    return rows
