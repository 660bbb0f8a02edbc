"""Categorical value distributions, rewards, agent networks, losses, replay.

The stability value lives on 51 atoms spanning [-1, 1].  Monte-Carlo
per-sample stability values become categorical distributions by two-hot
assignment (each value splits its mass linearly between the neighboring
atoms, which preserves the mean exactly); Bellman targets shift each
sample's reward by the discounted next-state atoms and project back onto
the canonical support.

The actor maps a sample-by-embedding state array to one deterministic
redispatch vector; the critic maps (state array, action) to an expected
power-flow value and the categorical stability distribution.  Both share
a convolutional front end that is invariant to the number and order of
the Monte-Carlo samples (kernel-1 convolutions followed by mean/std
pooling across samples).
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import autodiff as ad
from . import powerflow
from .grid import NetworkCase, ScenarioDistribution
from .surrogate import SurrogateModel, build_graph, batch_graphs

N_ATOMS = 51
ATOMS = np.linspace(-1.0, 1.0, N_ATOMS)
DELTA_Z = 2.0 / (N_ATOMS - 1)
ACTION_LIMIT = 50.0          # MW per generator per step

__all__ = [
    "N_ATOMS", "ATOMS", "DELTA_Z", "ACTION_LIMIT",
    "two_hot", "empirical_tsi_distribution", "distribution_mean",
    "step_rewards", "categorical_target", "categorical_target_batch",
    "Transition", "ReplayBuffer", "mixed_sample", "rank_weights",
    "AgentConfig", "AgentNets", "actor_forward", "critic_forward",
    "critic_loss", "actor_loss", "build_state_array",
]


# ---------------------------------------------------------------------------
# categorical machinery

def two_hot(values: np.ndarray) -> np.ndarray:
    """Project scalars in [-1, 1] onto the atom grid: each value puts linear
    weights on its two neighboring atoms (exact-atom hits get full mass).
    Returns (..., N_ATOMS); the projection preserves the mean exactly."""
    v = np.clip(np.asarray(values, dtype=float), -1.0, 1.0)
    pos = (v + 1.0) / DELTA_Z
    lo = np.floor(pos).astype(int)
    hi = np.minimum(lo + 1, N_ATOMS - 1)
    w_hi = pos - lo
    out = np.zeros(v.shape + (N_ATOMS,))
    out_flat = out.reshape(-1, N_ATOMS)
    rows = np.arange(out_flat.shape[0])
    np.add.at(out_flat, (rows, lo.reshape(-1)), 1.0 - w_hi.reshape(-1))
    np.add.at(out_flat, (rows, hi.reshape(-1)), w_hi.reshape(-1))
    return out


def empirical_tsi_distribution(values: np.ndarray) -> np.ndarray:
    """Categorical distribution of Monte-Carlo stability values (mean of
    the per-value two-hot assignments)."""
    values = np.asarray(values, dtype=float)
    if values.ndim != 1 or values.size == 0:
        raise ValueError("expected a non-empty 1-d value array")
    return two_hot(values).mean(axis=0)


def distribution_mean(probs: np.ndarray) -> np.ndarray:
    return np.asarray(probs) @ ATOMS


def step_rewards(prev_pf_values, next_pf_values, prev_tsi, next_tsi):
    """Step rewards under sample pairing: the power-flow reward is the
    change of the mean power-flow value, the stability rewards are the
    per-sample stability-value increments."""
    pf_reward = float(np.mean(next_pf_values) - np.mean(prev_pf_values))
    tsi_rewards = np.asarray(next_tsi, dtype=float) - np.asarray(prev_tsi, dtype=float)
    return pf_reward, tsi_rewards


def categorical_target(tsi_rewards: np.ndarray, next_probs: np.ndarray,
                       gamma: float, terminal: bool) -> np.ndarray:
    """Distributional Bellman target: mix r_k + gamma * z_j over samples k
    (uniform 1/m) and next atoms j (weight p_j), clip to the support, and
    two-hot project.  Terminal transitions omit the bootstrap term."""
    r = np.asarray(tsi_rewards, dtype=float)
    m = r.size
    if terminal:
        return two_hot(r).mean(axis=0)
    vals = r[:, None] + gamma * ATOMS[None, :]          # (m, A)
    hot = two_hot(vals)                                 # (m, A, A)
    w = np.asarray(next_probs, dtype=float)[None, :, None] / m
    return (hot * w).sum(axis=(0, 1))


def categorical_target_batch(tsi_rewards: np.ndarray, next_probs: np.ndarray,
                             gamma: float, terminal: np.ndarray) -> np.ndarray:
    """Vectorized categorical_target over a batch: rewards (B, m), next
    distributions (B, A), terminal flags (B,) -> targets (B, A)."""
    b, m = tsi_rewards.shape
    out = np.zeros((b, N_ATOMS))
    for i in range(b):
        out[i] = categorical_target(tsi_rewards[i], next_probs[i], gamma,
                                    bool(terminal[i]))
    return out


# ---------------------------------------------------------------------------
# replay

@dataclass(frozen=True)
class Transition:
    state: np.ndarray          # (m, state_dim)
    action: np.ndarray         # (n_adjustable,) MW
    pf_reward: float
    tsi_rewards: np.ndarray    # (m,)
    next_state: np.ndarray
    terminal: bool
    priority: float = 0.0      # episode-return key for importance sampling


class ReplayBuffer:
    """Fixed-capacity ring of transitions with mixed uniform / rank-based
    sampling (lower episode return ranks first and is sampled more)."""

    def __init__(self, capacity: int = 50_000):
        self.capacity = capacity
        self._items: list[Transition] = []
        self._next = 0

    def __len__(self):
        return len(self._items)

    def add(self, transition: Transition):
        if len(self._items) < self.capacity:
            self._items.append(transition)
        else:
            self._items[self._next] = transition
        self._next = (self._next + 1) % self.capacity

    def add_episode(self, transitions: list[Transition], episode_return: float):
        for t in transitions:
            self.add(replace(t, priority=float(episode_return)))

    def get(self, indices) -> list[Transition]:
        return [self._items[i] for i in indices]

    def priorities(self) -> np.ndarray:
        return np.array([t.priority for t in self._items])


def rank_weights(priorities: np.ndarray) -> np.ndarray:
    """Normalized 1/rank weights; the worst (lowest) priority has rank 1."""
    order = np.argsort(priorities, kind="stable")
    ranks = np.empty(len(priorities))
    ranks[order] = np.arange(1, len(priorities) + 1)
    w = 1.0 / ranks
    return w / w.sum()


def mixed_sample(buffer: ReplayBuffer, m_batch: int, learner_step: int,
                 rng: np.random.Generator) -> list[Transition]:
    """Uniform sampling on even learner steps, rank-based importance
    sampling (favouring low-return episodes) on odd ones."""
    if m_batch > len(buffer):
        raise ValueError(f"batch size {m_batch} exceeds buffer size {len(buffer)}")
    if learner_step % 2 == 0:
        idx = rng.choice(len(buffer), size=m_batch, replace=False)
    else:
        idx = rng.choice(len(buffer), size=m_batch, replace=False,
                         p=rank_weights(buffer.priorities()))
    return buffer.get(idx)


# ---------------------------------------------------------------------------
# actor / critic networks

@dataclass(frozen=True)
class AgentConfig:
    state_dim: int = 60
    n_actions: int = 9
    conv_channels: tuple = (128, 128)
    task_hidden: tuple = (500, 500)
    action_limit: float = ACTION_LIMIT
    distributional: bool = True       # False: scalar-expectation ablation

    @property
    def pooled_dim(self) -> int:
        return 2 * self.conv_channels[-1]

    @property
    def critic_out(self) -> int:
        return 1 + (N_ATOMS if self.distributional else 1)


class AgentNets:
    """Shared convolutional front end plus actor and critic task nets.

    The three groups live in separate parameter sets so each optimizer
    step (critic: conv+critic, actor: actor only) keeps clean Adam state.
    """

    def __init__(self, config: AgentConfig = AgentConfig(),
                 rng: np.random.Generator | None = None):
        self.config = config
        rng = rng or np.random.default_rng(0)
        self.conv = ad.ParameterSet()
        self.actor = ad.ParameterSet()
        self.critic = ad.ParameterSet()
        c1, c2 = config.conv_channels
        self._conv_layer("conv/l1", config.state_dim, c1, rng)
        self._conv_layer("conv/l2", c1, c2, rng)
        h1, h2 = config.task_hidden
        self._dense(self.actor, "actor/l1", config.pooled_dim, h1, rng)
        self._dense(self.actor, "actor/l2", h1, h2, rng)
        self._dense(self.actor, "actor/out", h2, config.n_actions, rng, scale=0.01)
        self._dense(self.critic, "critic/l1", config.pooled_dim + config.n_actions,
                    h1, rng)
        self._dense(self.critic, "critic/l2", h1, h2, rng)
        self._dense(self.critic, "critic/out", h2, config.critic_out, rng, scale=0.01)

    def _conv_layer(self, name, c_in, c_out, rng):
        bound = np.sqrt(6.0 / (c_in + c_out))
        self.conv.add(f"{name}/w", rng.uniform(-bound, bound, size=(1, c_in, c_out)))
        self.conv.add(f"{name}/b", np.zeros(c_out))

    @staticmethod
    def _dense(ps, name, fan_in, fan_out, rng, scale=1.0):
        bound = scale * np.sqrt(6.0 / (fan_in + fan_out))
        ps.add(f"{name}/w", rng.uniform(-bound, bound, size=(fan_in, fan_out)))
        ps.add(f"{name}/b", np.zeros(fan_out))

    def groups(self):
        return {"conv": self.conv, "actor": self.actor, "critic": self.critic}

    def zero_grad(self):
        for ps in self.groups().values():
            ps.zero_grad()

    def copy_from(self, other: "AgentNets"):
        for name, ps in self.groups().items():
            ps.copy_from(other.groups()[name])

    def soft_update_from(self, other: "AgentNets", rate: float):
        for name, ps in self.groups().items():
            ps.soft_update_from(other.groups()[name], rate)

    def to_arrays(self) -> dict:
        arrays = {}
        for ps in self.groups().values():
            arrays.update(ps.state_arrays())
        arrays["config/state_dim"] = np.array([self.config.state_dim], dtype=float)
        arrays["config/n_actions"] = np.array([self.config.n_actions], dtype=float)
        arrays["config/conv_channels"] = np.array(self.config.conv_channels, dtype=float)
        arrays["config/task_hidden"] = np.array(self.config.task_hidden, dtype=float)
        arrays["config/action_limit"] = np.array([self.config.action_limit], dtype=float)
        arrays["config/distributional"] = np.array(
            [1.0 if self.config.distributional else 0.0])
        return arrays

    def save(self, path):
        ad.save_checkpoint(path, self.to_arrays())

    @classmethod
    def load(cls, path) -> "AgentNets":
        arrays = ad.load_checkpoint(path)
        config = AgentConfig(
            state_dim=int(arrays["config/state_dim"][0]),
            n_actions=int(arrays["config/n_actions"][0]),
            conv_channels=tuple(int(v) for v in arrays["config/conv_channels"]),
            task_hidden=tuple(int(v) for v in arrays["config/task_hidden"]),
            action_limit=float(arrays["config/action_limit"][0]),
            distributional=bool(arrays["config/distributional"][0]))
        nets = cls(config)
        for ps in nets.groups().values():
            ps.load_state_arrays({k: v for k, v in arrays.items() if k in ps})
        return nets


def _pooled_features(nets: AgentNets, states: ad.Tensor) -> ad.Tensor:
    """Kernel-1 convolutions along the sample axis, then mean/std pooling
    across samples: (B, m, state_dim) -> (B, 2 * channels)."""
    h = ad.relu(ad.conv1d(states, nets.conv["conv/l1/w"], nets.conv["conv/l1/b"]))
    h = ad.relu(ad.conv1d(h, nets.conv["conv/l2/w"], nets.conv["conv/l2/b"]))
    mean = ad.t_mean(h, axis=-2)
    centered = h - mean[:, None, :]
    var = ad.t_mean(ad.square(centered), axis=-2)
    std = ad.sqrt(var + ad.constant(1e-8))
    return ad.concat([mean, std], axis=-1)


def actor_forward(nets: AgentNets, states) -> ad.Tensor:
    """Deterministic action per scenario: (B, m, state_dim) -> (B, n) MW in
    [-action_limit, action_limit]."""
    x = states if isinstance(states, ad.Tensor) else ad.constant(states)
    pooled = _pooled_features(nets, x)
    a = nets.actor
    h = ad.relu(pooled @ a["actor/l1/w"] + a["actor/l1/b"])
    h = ad.relu(h @ a["actor/l2/w"] + a["actor/l2/b"])
    out = ad.tanh(h @ a["actor/out/w"] + a["actor/out/b"])
    return ad.scale(out, nets.config.action_limit)


def critic_forward(nets: AgentNets, states, actions):
    """(pf_value (B,), tsi head) with the stability head a row-softmax
    categorical distribution (B, N_ATOMS), or a scalar expected value for
    the ablation configuration.  Actions enter normalized to [-1, 1] so the
    joint layer sees commensurate feature scales."""
    x = states if isinstance(states, ad.Tensor) else ad.constant(states)
    act = actions if isinstance(actions, ad.Tensor) else ad.constant(actions)
    act = ad.scale(act, 1.0 / nets.config.action_limit)
    pooled = _pooled_features(nets, x)
    joined = ad.concat([pooled, act], axis=-1)
    c = nets.critic
    h = ad.relu(joined @ c["critic/l1/w"] + c["critic/l1/b"])
    h = ad.relu(h @ c["critic/l2/w"] + c["critic/l2/b"])
    out = h @ c["critic/out/w"] + c["critic/out/b"]
    pf = out[:, 0]
    if nets.config.distributional:
        return pf, ad.softmax(out[:, 1:])
    return pf, out[:, 1]


# ---------------------------------------------------------------------------
# losses

def _batch_arrays(batch: list[Transition]):
    states = np.stack([t.state for t in batch])
    actions = np.stack([t.action for t in batch])
    pf_rewards = np.array([t.pf_reward for t in batch])
    tsi_rewards = np.stack([t.tsi_rewards for t in batch])
    next_states = np.stack([t.next_state for t in batch])
    terminal = np.array([t.terminal for t in batch])
    return states, actions, pf_rewards, tsi_rewards, next_states, terminal


def critic_loss(nets: AgentNets, target_nets: AgentNets,
                batch: list[Transition], gamma: float) -> ad.Tensor:
    """KL(projected target || critic distribution) plus the squared Bellman
    error of the power-flow head (no bootstrap at terminal transitions)."""
    states, actions, pf_r, tsi_r, next_states, terminal = _batch_arrays(batch)
    # targets carry no gradient: evaluate target nets on raw arrays
    next_actions = actor_forward(target_nets, next_states).data
    pf_next, tsi_next = critic_forward(target_nets, next_states, next_actions)
    pf_target = pf_r + gamma * pf_next.data * (~terminal)

    pf_pred, tsi_pred = critic_forward(nets, states, actions)
    pf_err = pf_pred - ad.constant(pf_target)
    loss = ad.t_mean(ad.square(pf_err))

    if nets.config.distributional:
        target_probs = categorical_target_batch(tsi_r, tsi_next.data, gamma, terminal)
        with np.errstate(divide="ignore"):
            t_log_t = np.where(target_probs > 0.0,
                               target_probs * np.log(np.maximum(target_probs, 1e-300)),
                               0.0).sum(axis=1)
        cross = ad.t_sum(
            ad.mul(ad.constant(target_probs),
                   ad.log(ad.clip(tsi_pred, 1e-12, 1.0))), axis=1)
        kl = ad.t_mean(ad.constant(t_log_t) - cross)
        loss = loss + kl
    else:
        tsi_target = tsi_r.mean(axis=1) + gamma * tsi_next.data * (~terminal)
        loss = loss + ad.t_mean(ad.square(tsi_pred - ad.constant(tsi_target)))
    return loss


def actor_loss(nets: AgentNets, batch: list[Transition], costs: np.ndarray,
               mu: float, base_mva: float = 100.0) -> ad.Tensor:
    """mu-weighted redispatch cost (per-unit action magnitudes times $/MW
    costs) minus the critic's expected value of the proposed actions."""
    states = np.stack([t.state for t in batch])
    a = actor_forward(nets, states)
    cost_vec = ad.constant(np.asarray(costs, dtype=float)[:, None])
    cost = ad.t_mean(ad.scale(ad.t_abs(a), 1.0 / base_mva) @ cost_vec)
    pf_pred, tsi_pred = critic_forward(nets, states, a)
    if nets.config.distributional:
        expected_tsi = tsi_pred @ ad.constant(ATOMS[:, None])
        value = ad.t_mean(expected_tsi[:, 0] + pf_pred)
    else:
        value = ad.t_mean(tsi_pred + pf_pred)
    return ad.scale(cost, mu) - value


# ---------------------------------------------------------------------------
# state construction

def build_state_array(case: NetworkCase, scenario: ScenarioDistribution,
                      model: SurrogateModel,
                      solutions: list[powerflow.PowerFlowSolution] | None = None):
    """One feature-extractor embedding row per deterministic sample.

    Diverged samples contribute a zero row; the returned mask flags the
    converged ones.  Row order follows the scenario's sample order.
    """
    if solutions is None:
        solutions = [powerflow.solve(case, s) for s in scenario.samples]
    m = len(scenario.samples)
    state = np.zeros((m, model.config.state_dim))
    ok = np.array([sol.converged for sol in solutions])
    graphs = [build_graph(case, s, sol, scenario.contingency, model.norm,
                          template=model.template)
              for s, sol, good in zip(scenario.samples, solutions, ok) if good]
    if graphs:
        emb, _ = model.embed(batch_graphs(graphs))
        state[ok] = emb.data
    return state, ok
