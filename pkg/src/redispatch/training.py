"""Training orchestration: surrogate-backed environment, exploration
workers, the single learner, target networks, and checkpoints.

Workers are logical: each owns an independent rng stream and a scenario,
and they are stepped round-robin inside the episode loop, so a fixed
master seed reproduces the run exactly while the transition distribution
matches what concurrent workers would produce.
"""

from __future__ import annotations

import os
import time
from dataclasses import dataclass, field, fields

import numpy as np

from . import distrl, powerflow
from .distrl import (AgentConfig, AgentNets, ReplayBuffer, Transition,
                     actor_forward, actor_loss, critic_loss, mixed_sample)
from .grid import (NetworkCase, ScenarioDistribution, apply_redispatch,
                   sample_base_state, sample_scenario)
from .surrogate import SurrogateModel, build_graph, batch_graphs
from . import autodiff as ad

__all__ = ["TrainConfig", "EnvState", "env_reset", "env_step", "tsi_batch",
           "episode_return", "rollout", "run_training", "TrainResult",
           "load_train_config", "make_scenario", "redispatch_cost"]

TRAIN_LEVELS = tuple(np.round(np.linspace(0.8, 1.2, 9), 4))


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 64          # M
    n_workers: int = 10           # n
    target_rate: float = 0.001    # soft-update epsilon
    episodes: int = 10_000        # E
    warmup_episodes: int = 500    # R: random actions while episode < R
    steps_per_episode: int = 5    # T
    gamma: float = 0.99
    lr: float = 0.001             # both networks
    mu: float = 0.1               # redispatch-cost weight
    m_samples: int = 200          # Monte-Carlo samples per scenario
    buffer_capacity: int = 50_000
    noise_sigma: float = 5.0      # MW, exploration noise after warmup
    noise_decay: float = 0.999    # per episode
    updates_per_episode: int = 1  # learner update pairs per episode
    checkpoint_every: int = 100
    validation_scenarios: int = 50
    level_low: float = 0.8
    level_high: float = 1.2
    seed: int = 0

    def validate(self):
        if not self.warmup_episodes < self.episodes:
            raise ValueError("warmup_episodes must be < episodes")
        if self.steps_per_episode < 1:
            raise ValueError("steps_per_episode must be >= 1")
        if not 0.0 < self.target_rate <= 1.0:
            raise ValueError("target_rate must be in (0, 1]")
        return self


def load_train_config(path, **overrides) -> TrainConfig:
    """key = value text file mirroring TrainConfig fields; '#' comments.
    Explicit overrides (CLI flags) win over file values."""
    values: dict = {}
    names = {f.name: f.type for f in fields(TrainConfig)}
    with open(path) as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected 'key = value'")
            key, _, val = line.partition("=")
            key = key.strip()
            if key not in names:
                raise ValueError(f"{path}:{lineno}: unknown key {key!r}")
            caster = int if names[key] == "int" else float
            values[key] = caster(val.strip())
    values.update({k: v for k, v in overrides.items() if v is not None})
    return TrainConfig(**values).validate()


# ---------------------------------------------------------------------------
# surrogate-backed environment

def tsi_batch(curves: np.ndarray) -> np.ndarray:
    """Stability index per curve set: (B, n_gen, T) -> (B,)."""
    sep = (curves.max(axis=1) - curves.min(axis=1)).max(axis=1)
    return (360.0 - sep) / (360.0 + sep)


@dataclass(frozen=True)
class EnvState:
    scenario: ScenarioDistribution
    solutions: tuple
    ok: np.ndarray            # converged mask per sample
    v_pf: np.ndarray          # power-flow values per sample
    v_ts: np.ndarray          # predicted stability values per sample
    state_array: np.ndarray   # (m, state_dim) feature-extractor rows


def _evaluate_samples(case: NetworkCase, scenario: ScenarioDistribution,
                      model: SurrogateModel, prev: EnvState | None = None):
    """Solve every sample, embed the converged ones, and predict their
    stability values.  Diverged samples keep their previous stability value
    (their increments are excluded from the statistics) and carry a zero
    embedding row."""
    warm = prev.solutions if prev is not None else [None] * len(scenario.samples)
    solutions = [powerflow.solve(case, s, warm_start=w)
                 for s, w in zip(scenario.samples, warm)]
    ok = np.array([sol.converged for sol in solutions])
    m = len(scenario.samples)
    v_pf = np.array([powerflow.pf_value(case, s, sol)
                     for s, sol in zip(scenario.samples, solutions)])
    state = np.zeros((m, model.config.state_dim))
    v_ts = (prev.v_ts.copy() if prev is not None else np.full(m, -1.0))
    if ok.any():
        graphs = [build_graph(case, s, sol, scenario.contingency, model.norm,
                              template=model.template)
                  for s, sol, good in zip(scenario.samples, solutions, ok) if good]
        emb, gen_h = model.embed(batch_graphs(graphs))
        curves = model.curves_from_embedding(emb, gen_h).data
        from .transient import inverse_transform
        v_ts[ok] = tsi_batch(inverse_transform(curves))
        state[ok] = emb.data
    return EnvState(scenario=scenario, solutions=tuple(solutions), ok=ok,
                    v_pf=v_pf, v_ts=v_ts, state_array=state)


def env_reset(case: NetworkCase, scenario: ScenarioDistribution,
              model: SurrogateModel) -> EnvState:
    return _evaluate_samples(case, scenario, model)


def env_step(case: NetworkCase, env: EnvState, action: np.ndarray,
             model: SurrogateModel):
    """Apply the action to every deterministic sample, re-solve, re-predict;
    returns (next EnvState, pf_reward, tsi_rewards)."""
    sc = env.scenario
    new_base = apply_redispatch(case, sc.base, action)
    new_samples = tuple(apply_redispatch(case, s, action) for s in sc.samples)
    new_scenario = ScenarioDistribution(base=new_base,
                                        contingency=sc.contingency,
                                        samples=new_samples)
    nxt = _evaluate_samples(case, new_scenario, model, prev=env)
    pf_reward, tsi_rewards = distrl.step_rewards(env.v_pf, nxt.v_pf,
                                                 env.v_ts, nxt.v_ts)
    return nxt, pf_reward, tsi_rewards


def redispatch_cost(case: NetworkCase, actions) -> float:
    """Dollar cost of a sequence (or single vector) of MW adjustments."""
    costs = np.array([case.generators[i].cost for i in case.adjustable_indices])
    actions = np.atleast_2d(np.asarray(actions, dtype=float))
    return float(np.sum(np.abs(actions) @ costs))


def episode_return(case: NetworkCase, final: EnvState, actions, mu: float) -> float:
    """Post-control objective: expected final stability value plus expected
    final power-flow value minus the mu-weighted per-unit redispatch cost."""
    cost_pu = redispatch_cost(case, actions) / case.base_mva
    return float(final.v_ts.mean() + final.v_pf.mean() - mu * cost_pu)


def make_scenario(case: NetworkCase, rng: np.random.Generator, m: int,
                  level_low: float = 0.8, level_high: float = 1.2,
                  branch_id: int | None = None,
                  levels=TRAIN_LEVELS) -> ScenarioDistribution:
    """Random scenario: base state at a random level, uniform faultable
    contingency, m Monte-Carlo photovoltaic realizations."""
    usable = [lv for lv in levels if level_low - 1e-9 <= lv <= level_high + 1e-9]
    level = usable[rng.integers(len(usable))]
    if branch_id is None:
        ids = case.faultable_branch_ids
        branch_id = ids[rng.integers(len(ids))]
    base = sample_base_state(case, float(level), rng)
    return sample_scenario(case, base, case.contingency(branch_id), m, rng)


def rollout(case: NetworkCase, scenario: ScenarioDistribution,
            model: SurrogateModel, nets: AgentNets, steps: int,
            mu: float, noise_rng=None, noise_sigma: float = 0.0,
            random_rng=None):
    """Run one episode; returns (transitions, final EnvState, actions,
    return).  random_rng switches to random warm-up actions: each episode
    draws a persistent direction plus per-step jitter, so cumulative
    redispatch covers the whole action envelope instead of random-walking
    around zero."""
    env = env_reset(case, scenario, model)
    first = env
    transitions = []
    actions = []
    limit = nets.config.action_limit
    if random_rng is not None:
        drift = random_rng.uniform(-limit, limit, size=nets.config.n_actions)
    for t in range(steps):
        if random_rng is not None:
            action = np.clip(
                drift + random_rng.uniform(-0.5 * limit, 0.5 * limit,
                                           size=nets.config.n_actions),
                -limit, limit)
        else:
            action = actor_forward(nets, env.state_array[None]).data[0]
            if noise_sigma > 0.0 and noise_rng is not None:
                action = action + noise_rng.normal(0.0, noise_sigma,
                                                   size=action.shape)
            action = np.clip(action, -limit, limit)
        nxt, pf_r, tsi_r = env_step(case, env, action, model)
        transitions.append(Transition(
            state=env.state_array, action=action, pf_reward=pf_r,
            tsi_rewards=tsi_r, next_state=nxt.state_array,
            terminal=(t == steps - 1)))
        actions.append(action)
        env = nxt
    ret = episode_return(case, env, np.array(actions), mu)
    return transitions, env, np.array(actions), ret, first


@dataclass
class TrainResult:
    log_rows: list = field(default_factory=list)
    checkpoint_paths: list = field(default_factory=list)
    best_path: str | None = None
    best_val_return: float = -np.inf
    val_history: list = field(default_factory=list)

    def actor_losses(self):
        return [r["actor_loss"] for r in self.log_rows if r["actor_loss"] is not None]


LOG_COLUMNS = ("episode", "return", "critic_loss", "actor_loss",
               "buffer_size", "wall_time")


def _log_line(row: dict) -> str:
    def fmt(key):
        v = row[key]
        if v is None:
            return "nan"
        if key in ("episode", "buffer_size"):
            return str(int(v))
        return f"{v:.6f}"
    return " ".join(fmt(k) for k in LOG_COLUMNS)


def run_training(case: NetworkCase, model: SurrogateModel, config: TrainConfig,
                 out_dir=None, log=None,
                 agent_config: AgentConfig | None = None,
                 transition_log: bool = False) -> tuple[AgentNets, TrainResult]:
    """The full training loop: n exploration workers over the
    surrogate-backed environment, one learner, soft target updates, and a
    validation-selected checkpoint series.

    The training log (one row per episode: episode, return, critic loss,
    actor loss, buffer size, wall time) is written to out_dir/train_log.txt
    when out_dir is given; everything except wall time is deterministic for
    a fixed config seed.
    """
    config.validate()
    master = np.random.SeedSequence(config.seed)
    seeds = master.spawn(config.n_workers + 3)
    worker_rngs = [np.random.default_rng(s) for s in seeds[:config.n_workers]]
    learner_rng = np.random.default_rng(seeds[config.n_workers])
    noise_rng = np.random.default_rng(seeds[config.n_workers + 1])
    val_seed = seeds[config.n_workers + 2].generate_state(1)[0]
    transition_fh = None
    if out_dir is not None and transition_log:
        os.makedirs(out_dir, exist_ok=True)
        transition_fh = open(os.path.join(out_dir, "transitions.txt"), "w")
        transition_fh.write("episode worker step terminal pf_reward "
                            "mean_tsi_reward "
                            + " ".join(f"a{i}" for i in range(9)) + "\n")

    if agent_config is None:
        agent_config = AgentConfig(state_dim=model.config.state_dim,
                                   n_actions=len(case.adjustable_indices))
    nets = AgentNets(agent_config, rng=learner_rng)
    targets = AgentNets(agent_config, rng=np.random.default_rng(0))
    targets.copy_from(nets)

    buffer = ReplayBuffer(config.buffer_capacity)
    costs = np.array([case.generators[i].cost for i in case.adjustable_indices])
    result = TrainResult()
    log_fh = None
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        log_fh = open(os.path.join(out_dir, "train_log.txt"), "w")
        log_fh.write(" ".join(LOG_COLUMNS) + "\n")

    val_pool = [make_scenario(case, np.random.default_rng([val_seed, k]),
                              config.m_samples, config.level_low,
                              config.level_high)
                for k in range(config.validation_scenarios)]

    sigma = config.noise_sigma
    learner_step = 0
    t_start = time.perf_counter()
    try:
        for episode in range(1, config.episodes + 1):
            returns = []
            for w, rng in enumerate(worker_rngs):
                scenario = make_scenario(case, rng, config.m_samples,
                                         config.level_low, config.level_high)
                warmup = episode < config.warmup_episodes
                transitions, _, _, ret, _ = rollout(
                    case, scenario, model, nets, config.steps_per_episode,
                    config.mu,
                    noise_rng=noise_rng, noise_sigma=0.0 if warmup else sigma,
                    random_rng=rng if warmup else None)
                buffer.add_episode(transitions, ret)
                returns.append(ret)
                if transition_fh is not None:
                    for t_idx, tr in enumerate(transitions):
                        transition_fh.write(
                            f"{episode} {w} {t_idx} {int(tr.terminal)} "
                            f"{tr.pf_reward:.9g} "
                            f"{tr.tsi_rewards.mean():.9g} "
                            + " ".join(f"{a:.9g}" for a in tr.action) + "\n")
            sigma *= config.noise_decay

            c_loss = a_loss = None
            if episode >= config.warmup_episodes and len(buffer) >= config.batch_size:
                for _ in range(config.updates_per_episode):
                    batch = mixed_sample(buffer, config.batch_size,
                                         learner_step, learner_rng)
                    learner_step += 1
                    nets.zero_grad()
                    closs = critic_loss(nets, targets, batch, config.gamma)
                    closs.backward()
                    ad.adam_step(nets.conv, lr=config.lr)
                    ad.adam_step(nets.critic, lr=config.lr)
                    nets.zero_grad()
                    aloss = actor_loss(nets, batch, costs, config.mu,
                                       case.base_mva)
                    aloss.backward()
                    ad.adam_step(nets.actor, lr=config.lr)
                    targets.soft_update_from(nets, config.target_rate)
                    c_loss, a_loss = closs.item(), aloss.item()

            row = {"episode": episode, "return": float(np.mean(returns)),
                   "critic_loss": c_loss, "actor_loss": a_loss,
                   "buffer_size": len(buffer),
                   "wall_time": time.perf_counter() - t_start}
            result.log_rows.append(row)
            if log_fh is not None:
                log_fh.write(_log_line(row) + "\n")
                log_fh.flush()
            if log is not None and (episode % 20 == 0 or episode == 1):
                log(f"episode {episode} return {row['return']:.4f} "
                    f"critic {c_loss} actor {a_loss}")

            if out_dir is not None and episode % config.checkpoint_every == 0:
                val_ret = _validate(case, val_pool, model, nets, config)
                result.val_history.append((episode, val_ret))
                path = os.path.join(out_dir, f"agent_ep{episode:06d}.ckpt")
                nets.save(path)
                result.checkpoint_paths.append(path)
                if val_ret > result.best_val_return:
                    result.best_val_return = val_ret
                    result.best_path = os.path.join(out_dir, "agent_best.ckpt")
                    nets.save(result.best_path)
                if log is not None:
                    log(f"episode {episode} validation return {val_ret:.4f}")
    finally:
        if log_fh is not None:
            log_fh.close()
        if transition_fh is not None:
            transition_fh.close()
    return nets, result


def _validate(case, pool, model, nets, config) -> float:
    rets = []
    for scenario in pool:
        _, _, _, ret, _ = rollout(case, scenario, model, nets,
                                  config.steps_per_episode, config.mu)
        rets.append(ret)
    return float(np.mean(rets))
