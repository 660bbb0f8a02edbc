import numpy as np
import pytest
from hypothesis import given, settings
import hypothesis.strategies as st

from redispatch import autodiff as ad
from redispatch import distrl
from redispatch.distrl import (ATOMS, DELTA_Z, N_ATOMS, AgentConfig,
                               AgentNets, ReplayBuffer, Transition,
                               actor_forward, actor_loss, categorical_target,
                               critic_forward, critic_loss,
                               distribution_mean, empirical_tsi_distribution,
                               mixed_sample, rank_weights, step_rewards,
                               two_hot)


def test_atom_grid():
    assert N_ATOMS == 51
    assert ATOMS[0] == -1.0 and ATOMS[-1] == 1.0
    assert DELTA_Z == pytest.approx(0.04)
    np.testing.assert_allclose(np.diff(ATOMS), DELTA_Z)


def test_two_hot_examples():
    d = two_hot(np.array([1.0]))[0]
    assert d[50] == 1.0 and d.sum() == 1.0
    d = two_hot(np.array([0.02]))[0]
    assert d[25] == pytest.approx(0.5) and d[26] == pytest.approx(0.5)
    d = two_hot(np.array([-1.0]))[0]
    assert d[0] == 1.0


@settings(max_examples=200, deadline=None)
@given(v=st.floats(-1.0, 1.0))
def test_two_hot_preserves_mean(v):
    d = two_hot(np.array([v]))[0]
    assert d.sum() == pytest.approx(1.0, abs=1e-12)
    assert np.all(d >= 0)
    assert distribution_mean(d) == pytest.approx(v, abs=1e-12)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-1.0, 1.0), min_size=1, max_size=10))
def test_empirical_distribution_mean(vals):
    d = empirical_tsi_distribution(np.array(vals))
    assert d.sum() == pytest.approx(1.0, abs=1e-9)
    assert distribution_mean(d) == pytest.approx(np.mean(vals), abs=1e-12)


def test_step_rewards_zero_and_telescoping():
    pf0, tsi0 = np.array([-0.1, 0.0]), np.array([0.2, -0.4])
    r_pf, r_ts = step_rewards(pf0, pf0, tsi0, tsi0)
    assert r_pf == 0.0 and np.all(r_ts == 0.0)
    # telescoping over an episode
    rng = np.random.default_rng(0)
    series = [tsi0]
    acc = np.zeros(2)
    for _ in range(5):
        nxt = np.clip(series[-1] + rng.uniform(-0.3, 0.3, 2), -1, 1)
        _, r = step_rewards(pf0, pf0, series[-1], nxt)
        acc += r
        series.append(nxt)
    np.testing.assert_allclose(acc, series[-1] - series[0], atol=1e-12)


def test_single_sample_stabilization_reward():
    _, r = step_rewards([0.0], [0.0], [-0.2], [0.3])
    assert r[0] == pytest.approx(0.5)


def test_categorical_target_identity_fixed_point():
    rng = np.random.default_rng(1)
    probs = rng.dirichlet(np.ones(N_ATOMS))
    out = categorical_target(np.zeros(4), probs, 1.0, False)
    np.testing.assert_allclose(out, probs, atol=1e-12)


def test_categorical_target_terminal():
    probs = np.full(N_ATOMS, 1.0 / N_ATOMS)
    out = categorical_target(np.full(3, 0.5), probs, 0.99, True)
    nz = np.nonzero(out)[0]
    np.testing.assert_array_equal(ATOMS[nz], [0.48, 0.52])
    assert distribution_mean(out) == pytest.approx(0.5)


@settings(max_examples=40, deadline=None)
@given(
    m=st.integers(1, 5),
    gamma=st.sampled_from([0.0, 0.5, 0.9, 0.99, 1.0]),
    terminal=st.booleans(),
    seed=st.integers(0, 10 ** 6),
)
def test_categorical_target_mean_and_normalization_bruteforce(m, gamma,
                                                              terminal, seed):
    rng = np.random.default_rng(seed)
    rewards = rng.uniform(-1.5, 1.5, size=m)
    probs = rng.dirichlet(np.ones(N_ATOMS))
    out = categorical_target(rewards, probs, gamma, terminal)
    assert out.sum() == pytest.approx(1.0, abs=1e-9)
    assert np.all(out >= -1e-15)
    if terminal:
        expected = np.mean(np.clip(rewards, -1, 1))
    else:
        expected = np.mean([
            np.sum(probs * np.clip(r + gamma * ATOMS, -1, 1)) for r in rewards])
    assert distribution_mean(out) == pytest.approx(expected, abs=1e-12)


# ---------------------------------------------------------------------------
# replay buffer

def _transition(i, ret=0.0, m=3):
    return Transition(state=np.zeros((m, 60)) + i, action=np.zeros(9),
                      pf_reward=0.0, tsi_rewards=np.zeros(m),
                      next_state=np.zeros((m, 60)), terminal=False,
                      priority=ret)


def test_buffer_ring_capacity():
    buf = ReplayBuffer(capacity=5)
    for i in range(8):
        buf.add(_transition(i))
    assert len(buf) == 5
    kept = {t.state[0, 0] for t in buf.get(range(5))}
    assert kept == {3.0, 4.0, 5.0, 6.0, 7.0}


def test_mixed_sample_underfull_error():
    buf = ReplayBuffer()
    buf.add(_transition(0))
    with pytest.raises(ValueError, match="exceeds"):
        mixed_sample(buf, 2, 0, np.random.default_rng(0))


def test_rank_weights_example():
    w = rank_weights(np.array([-1.0, 0.0, 1.0]))
    np.testing.assert_allclose(w, [6 / 11, 3 / 11, 2 / 11])
    assert np.all(w > 0)


def test_uniform_mode_statistics():
    buf = ReplayBuffer()
    n = 20
    for i in range(n):
        buf.add(_transition(i, ret=float(i)))
    rng = np.random.default_rng(2)
    counts = np.zeros(n)
    draws = 20000
    for k in range(draws):
        batch = mixed_sample(buf, 4, learner_step=0, rng=rng)
        for t in batch:
            counts[int(t.state[0, 0])] += 1
    expected = draws * 4 / n
    chi2 = np.sum((counts - expected) ** 2 / expected)
    # 19 dof; 43.8 is the 0.1% tail
    assert chi2 < 43.8


def test_importance_mode_favours_low_returns():
    buf = ReplayBuffer()
    n = 10
    for i in range(n):
        buf.add(_transition(i, ret=float(i)))
    rng = np.random.default_rng(3)
    counts = np.zeros(n)
    for k in range(8000):
        batch = mixed_sample(buf, 2, learner_step=1, rng=rng)
        for t in batch:
            counts[int(t.state[0, 0])] += 1
    assert counts[0] > counts[-1] * 2.0


# ---------------------------------------------------------------------------
# networks and losses

@pytest.fixture(scope="module")
def nets():
    cfg = AgentConfig(conv_channels=(16, 16), task_hidden=(24, 24))
    return AgentNets(cfg, rng=np.random.default_rng(5))


def test_action_bounds(nets):
    states = np.random.default_rng(6).normal(size=(4, 5, 60)) * 5
    a = actor_forward(nets, states)
    assert a.shape == (4, 9)
    assert np.all(np.abs(a.data) <= 50.0)


def test_state_row_permutation_invariance(nets):
    rng = np.random.default_rng(7)
    states = rng.normal(size=(2, 6, 60))
    perm = rng.permutation(6)
    a1 = actor_forward(nets, states).data
    a2 = actor_forward(nets, states[:, perm]).data
    np.testing.assert_allclose(a1, a2, atol=1e-12)
    act = np.zeros((2, 9))
    q1 = critic_forward(nets, states, act)[1].data
    q2 = critic_forward(nets, states[:, perm], act)[1].data
    np.testing.assert_allclose(q1, q2, atol=1e-12)


def test_critic_output_contract(nets):
    states = np.random.default_rng(8).normal(size=(3, 4, 60))
    actions = np.random.default_rng(9).uniform(-50, 50, size=(3, 9))
    pf, probs = critic_forward(nets, states, actions)
    assert pf.shape == (3,)
    assert probs.shape == (3, N_ATOMS)
    np.testing.assert_allclose(probs.data.sum(axis=-1), 1.0, atol=1e-9)
    means = probs.data @ ATOMS
    assert np.all(means >= -1.0) and np.all(means <= 1.0)
    # total output width is 1 + 51
    assert nets.config.critic_out == 52


def test_ablation_critic_width():
    cfg = AgentConfig(conv_channels=(8, 8), task_hidden=(16, 16),
                      distributional=False)
    nets2 = AgentNets(cfg, rng=np.random.default_rng(1))
    assert nets2.config.critic_out == 2
    states = np.zeros((2, 3, 60))
    pf, tsi_mean = critic_forward(nets2, states, np.zeros((2, 9)))
    assert pf.shape == (2,) and tsi_mean.shape == (2,)


def _batch(nets, m=4, n=3, seed=10):
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n):
        out.append(Transition(
            state=rng.normal(size=(m, 60)),
            action=rng.uniform(-50, 50, size=9),
            pf_reward=rng.uniform(-0.2, 0.2),
            tsi_rewards=rng.uniform(-0.3, 0.3, size=m),
            next_state=rng.normal(size=(m, 60)),
            terminal=(i == n - 1)))
    return out


def test_critic_loss_zero_at_target(nets):
    # when the critic equals the projected target, the KL term vanishes
    rng = np.random.default_rng(11)
    target = distrl.categorical_target(rng.uniform(-0.2, 0.2, 4),
                                       rng.dirichlet(np.ones(N_ATOMS)), 0.99,
                                       False)
    logp = ad.constant(np.log(np.maximum(target[None], 1e-12)))
    pred = ad.softmax(logp)
    t_log_t = np.where(target > 0, target * np.log(np.maximum(target, 1e-300)),
                       0.0).sum()
    cross = ad.t_sum(ad.mul(ad.constant(target[None]),
                            ad.log(ad.clip(pred, 1e-12, 1.0))), axis=1)
    kl = ad.t_mean(ad.constant(np.array([t_log_t])) - cross)
    assert kl.item() == pytest.approx(0.0, abs=1e-9)
    assert kl.item() >= -1e-12


def test_kl_nonnegative_random(nets):
    rng = np.random.default_rng(12)
    for _ in range(10):
        t = rng.dirichlet(np.ones(N_ATOMS))
        p = rng.dirichlet(np.ones(N_ATOMS))
        kl = np.sum(np.where(t > 0, t * (np.log(t) - np.log(np.maximum(p, 1e-12))),
                             0.0))
        assert kl >= 0.0


def test_critic_loss_gradient(nets):
    batch = _batch(nets)
    tnets = AgentNets(nets.config, rng=np.random.default_rng(13))

    def fn():
        return critic_loss(nets, tnets, batch, 0.99)

    params = ([nets.critic[n] for n in nets.critic.names()]
              + [nets.conv[n] for n in nets.conv.names()])
    err = ad.gradient_check(fn, params, eps=1e-6, n_probe=2,
                            rng=np.random.default_rng(14))
    assert err < 1e-4


def test_actor_loss_gradient_and_signs(nets):
    batch = _batch(nets)
    costs = np.array([6.0, 4.5, 9.0, 9.0, 6.0, 1.0, 5.0, 6.0, 2.0])

    def fn():
        return actor_loss(nets, batch, costs, mu=0.1)

    params = [nets.actor[n] for n in nets.actor.names()]
    err = ad.gradient_check(fn, params, eps=1e-6, n_probe=2,
                            rng=np.random.default_rng(15))
    assert err < 1e-4


def test_actor_loss_cost_term_zero_for_zero_actions(nets, monkeypatch):
    batch = _batch(nets)
    costs = np.ones(9)

    def zero_actor(n, s):
        return ad.constant(np.zeros((len(batch), 9)))

    monkeypatch.setattr(distrl, "actor_forward", zero_actor)
    loss_zero_cost = distrl.actor_loss(nets, batch, costs, mu=0.1)
    loss_no_mu = distrl.actor_loss(nets, batch, costs, mu=0.0)
    assert loss_zero_cost.item() == pytest.approx(loss_no_mu.item(), abs=1e-12)


def test_actor_loss_decreases_with_better_critic(nets):
    # raising the critic's expected value lowers the actor loss
    batch = _batch(nets)
    costs = np.zeros(9)
    base = actor_loss(nets, batch, costs, mu=0.1).item()
    bumped = AgentNets(nets.config, rng=np.random.default_rng(5))
    bumped.copy_from(nets)
    bumped.critic["critic/out/b"].data[0] += 1.0     # pf head up by 1
    better = actor_loss(bumped, batch, costs, mu=0.1).item()
    assert better == pytest.approx(base - 1.0, abs=1e-9)


def test_agent_checkpoint_roundtrip(nets, tmp_path):
    states = np.random.default_rng(16).normal(size=(2, 4, 60))
    before = actor_forward(nets, states).data
    path = tmp_path / "agent.ckpt"
    nets.save(path)
    back = AgentNets.load(path)
    after = actor_forward(back, states).data
    np.testing.assert_array_equal(before, after)
    assert back.config == nets.config


def test_soft_update_boundary(nets):
    other = AgentNets(nets.config, rng=np.random.default_rng(17))
    other.soft_update_from(nets, 1.0)
    for group, ps in other.groups().items():
        for name, t in ps.items():
            np.testing.assert_array_equal(t.data, nets.groups()[group][name].data)


def test_soft_update_convex_combination(nets):
    a = AgentNets(nets.config, rng=np.random.default_rng(18))
    b = AgentNets(nets.config, rng=np.random.default_rng(19))
    lo = np.minimum(a.actor["actor/l1/w"].data, b.actor["actor/l1/w"].data)
    hi = np.maximum(a.actor["actor/l1/w"].data, b.actor["actor/l1/w"].data)
    for _ in range(5):
        a.soft_update_from(b, 0.1)
    w = a.actor["actor/l1/w"].data
    assert np.all(w >= lo - 1e-12) and np.all(w <= hi + 1e-12)
