"""Global-best particle swarm optimization and the redispatch baseline.

The swarm optimizes the cumulative redispatch vector directly (one shot,
bounds at the episode envelope of per-step limits) against the same
post-control objective the agent maximizes; fitness evaluation can use
the ground-truth simulator or the surrogate.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import powerflow, transient
from .grid import NetworkCase, ScenarioDistribution, apply_redispatch

__all__ = ["PsoConfig", "pso_minimize", "pso_redispatch", "scenario_objective"]


@dataclass(frozen=True)
class PsoConfig:
    particles: int = 30
    iterations: int = 50
    inertia: float = 0.72            # constriction-style coefficients
    cognitive: float = 1.49
    social: float = 1.49
    bound: float = 250.0             # +- MW per generator (T * per-step limit)
    velocity_clamp: float = 0.2      # fraction of the position range

    def validate(self):
        if self.particles < 2:
            raise ValueError("particles must be >= 2")
        return self


def pso_minimize(fn, dim: int, config: PsoConfig, rng: np.random.Generator,
                 bound: float | None = None, seed_points=()):
    """Global-best PSO over [-bound, bound]^dim; returns (x_best, f_best,
    history of best fitness per iteration).  seed_points replace the first
    particles (e.g. the zero vector for redispatch, where no action is a
    strong candidate)."""
    config.validate()
    b = config.bound if bound is None else bound
    n = config.particles
    x = rng.uniform(-b, b, size=(n, dim))
    for i, pt in enumerate(seed_points):
        x[i] = np.asarray(pt, dtype=float)
    v = np.zeros((n, dim))
    v_max = config.velocity_clamp * 2.0 * b
    p_best = x.copy()
    p_val = np.array([fn(xi) for xi in x])
    g_idx = int(np.argmin(p_val))
    g_best, g_val = p_best[g_idx].copy(), float(p_val[g_idx])
    history = [g_val]
    for _ in range(config.iterations):
        # asynchronous global best: each particle sees improvements from the
        # ones updated earlier in the same sweep
        for i in range(n):
            r1 = rng.uniform(size=dim)
            r2 = rng.uniform(size=dim)
            v[i] = (config.inertia * v[i]
                    + config.cognitive * r1 * (p_best[i] - x[i])
                    + config.social * r2 * (g_best - x[i]))
            v[i] = np.clip(v[i], -v_max, v_max)
            x[i] = np.clip(x[i] + v[i], -b, b)
            val = fn(x[i])
            if val < p_val[i]:
                p_val[i] = val
                p_best[i] = x[i].copy()
                if val < g_val:
                    g_val = val
                    g_best = x[i].copy()
        history.append(g_val)
    return g_best, g_val, history


def scenario_objective(case: NetworkCase, scenario: ScenarioDistribution,
                       action: np.ndarray, mu: float,
                       backend: str = "true-sim", model=None,
                       sim_config: transient.SimConfig = transient.SimConfig()):
    """Post-control episode objective for one cumulative action: expected
    final stability value plus expected power-flow value minus the
    mu-weighted per-unit cost.  Returns (objective, tsi values, pf values).
    """
    tsi_vals = np.full(len(scenario.samples), -1.0)
    pf_vals = np.full(len(scenario.samples), powerflow.PSI_MIN)
    states = [apply_redispatch(case, s, action) for s in scenario.samples]
    solutions = [powerflow.solve(case, s) for s in states]
    if backend == "true-sim":
        for k, (s, sol) in enumerate(zip(states, solutions)):
            pf_vals[k] = powerflow.pf_value(case, s, sol)
            if sol.converged:
                curves = transient.simulate(case, sol, scenario.contingency,
                                            sim_config, pv_p=s.pv_p)
                tsi_vals[k] = transient.tsi(curves)
    elif backend == "surrogate":
        if model is None:
            raise ValueError("surrogate backend needs a model")
        from .surrogate import batch_graphs, build_graph
        from .training import tsi_batch
        ok = []
        graphs = []
        for k, (s, sol) in enumerate(zip(states, solutions)):
            pf_vals[k] = powerflow.pf_value(case, s, sol)
            if sol.converged:
                ok.append(k)
                graphs.append(build_graph(case, s, sol, scenario.contingency,
                                          model.norm, template=model.template))
        if graphs:
            curves = model.predict_curves_batch(batch_graphs(graphs))
            tsi_vals[np.array(ok)] = tsi_batch(curves)
    else:
        raise ValueError(f"unknown backend {backend!r}")
    costs = np.array([case.generators[i].cost for i in case.adjustable_indices])
    cost_pu = float(np.abs(action) @ costs) / case.base_mva
    objective = float(tsi_vals.mean() + pf_vals.mean() - mu * cost_pu)
    return objective, tsi_vals, pf_vals


def pso_redispatch(case: NetworkCase, scenario: ScenarioDistribution,
                   config: PsoConfig, rng: np.random.Generator,
                   mu: float = 0.1, backend: str = "true-sim", model=None,
                   sim_config: transient.SimConfig = transient.SimConfig()):
    """Optimize the cumulative redispatch for one scenario.  Returns a dict
    with the best action, its cost, the backend stability values, the
    confidence under the fitness backend, and wall time."""
    dim = len(case.adjustable_indices)

    def fitness(x):
        obj, _, _ = scenario_objective(case, scenario, x, mu, backend=backend,
                                       model=model, sim_config=sim_config)
        return -obj

    t0 = time.perf_counter()
    best_x, best_f, history = pso_minimize(fitness, dim, config, rng,
                                           seed_points=(np.zeros(dim),))
    wall = time.perf_counter() - t0
    _, tsi_vals, pf_vals = scenario_objective(case, scenario, best_x, mu,
                                              backend=backend, model=model,
                                              sim_config=sim_config)
    costs = np.array([case.generators[i].cost for i in case.adjustable_indices])
    return {
        "action": best_x,
        "objective": -best_f,
        "cost": float(np.abs(best_x) @ costs),
        "confidence": float(np.mean(tsi_vals > 0.0)),
        "tsi_values": tsi_vals,
        "pf_values": pf_vals,
        "wall_time": wall,
        "history": history,
    }
