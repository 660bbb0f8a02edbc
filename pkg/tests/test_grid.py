import numpy as np
import pytest
from hypothesis import given, settings
import hypothesis.strategies as st

from redispatch import grid
from redispatch.grid import (CaseParseError, CaseValidationError,
                             apply_redispatch, load_case, sample_base_state,
                             sample_scenario, shipped_case_path)


def test_shipped_case_shape(case):
    assert case.n_bus == 39
    assert case.n_gen == 10
    assert len(case.pv_units) == 2
    lines = [br for br in case.branches if br.id <= 34]
    assert len(lines) == 34
    assert len(case.faultable_branch_ids) == 33
    assert 22 not in case.faultable_branch_ids


def test_slack_is_bus_31(case):
    slack = [b for b in case.buses if b.kind == "slack"]
    assert [b.id for b in slack] == [31]
    slack_gen = case.generators[case.slack_gen_index]
    assert slack_gen.bus == 31 and not slack_gen.adjustable


def test_table_costs(case):
    costs = {g.bus: g.cost for g in case.generators}
    assert costs[36] == 1.0          # G7
    assert costs[30] == 2.0          # G10
    assert costs[32] == 4.5          # G3
    assert costs[39] == 6.0          # G1


def test_pv_units_at_37_38(case):
    assert [pv.bus for pv in case.pv_units] == [37, 38]
    assert [pv.sigma for pv in case.pv_units] == [30.0, 15.0]


def test_two_slack_buses_rejected(tmp_path):
    src = open(shipped_case_path()).read().replace("39  pv ", "39  slack ", 1)
    bad = tmp_path / "bad.txt"
    bad.write_text(src)
    with pytest.raises(CaseValidationError, match="slack"):
        load_case(bad)


def test_malformed_file_names_record(tmp_path):
    bad = tmp_path / "bad.txt"
    bad.write_text("[bus]\n1 pq 1.0 frog 0 0.9 1.1\n")
    with pytest.raises(CaseParseError, match="bus record 1"):
        load_case(bad)


def test_zero_perturbation_identity(case):
    rng = np.random.default_rng(0)
    st_ = sample_base_state(case, 1.0, rng, load_jitter=0.0, v_jitter=0.0)
    nom = grid.nominal_state(case)
    np.testing.assert_allclose(st_.load_p, nom.load_p, rtol=1e-12)
    np.testing.assert_allclose(st_.gen_p, nom.gen_p, rtol=1e-9)
    np.testing.assert_allclose(st_.gen_v, nom.gen_v, rtol=1e-12)
    np.testing.assert_allclose(st_.pv_p, nom.pv_p, rtol=1e-12)


def test_level_12_load_band(case):
    rng = np.random.default_rng(1)
    nom = grid.nominal_state(case)
    loaded = nom.load_p > 0
    for _ in range(20):
        st_ = sample_base_state(case, 1.2, rng)
        ratio = st_.load_p[loaded] / nom.load_p[loaded]
        assert np.all(ratio >= 1.08 - 1e-12) and np.all(ratio <= 1.32 + 1e-12)


def test_load_perturbation_mean_unbiased(case):
    # law-of-large-numbers check on the sampler
    rng = np.random.default_rng(2)
    nom = grid.nominal_state(case)
    loaded = nom.load_p > 0
    ratios = []
    for _ in range(1000):
        st_ = sample_base_state(case, 1.0, rng)
        ratios.append(st_.load_p[loaded] / nom.load_p[loaded] - 1.0)
    assert abs(np.mean(ratios)) < 0.01


def test_scenario_sigma_zero_degenerate(case):
    rng = np.random.default_rng(3)
    base = sample_base_state(case, 1.0, rng)
    zero_sigma = grid.NetworkCase(
        buses=case.buses, branches=case.branches, generators=case.generators,
        pv_units=tuple(grid.PvRecord(p.bus, p.p_mean, 0.0, p.p_cap)
                       for p in case.pv_units))
    sc = sample_scenario(zero_sigma, base, case.contingency(1), 5, rng)
    for s in sc.samples:
        np.testing.assert_allclose(s.pv_p, base.pv_p)
        np.testing.assert_allclose(s.gen_p, base.gen_p)


def test_scenario_count_and_order(case):
    rng = np.random.default_rng(4)
    base = sample_base_state(case, 1.0, rng)
    sc = sample_scenario(case, base, case.contingency(5), 200, rng)
    assert sc.m == 200


def test_proportional_rebalance_arithmetic(case):
    # +30 MW of extra photovoltaic output, adjustable outputs (100, 200)
    # -> shares (-10, -20)
    share = np.array([100.0, 200.0])
    imbalance = 30.0
    expected = -share / share.sum() * imbalance
    np.testing.assert_allclose(expected, [-10.0, -20.0])


def test_scenario_preserves_net_balance(case):
    rng = np.random.default_rng(5)
    base = sample_base_state(case, 1.1, rng)
    sc = sample_scenario(case, base, case.contingency(3), 50, rng)
    base_total = base.gen_p.sum() + base.pv_p.sum()
    for s in sc.samples:
        assert abs(s.gen_p.sum() + s.pv_p.sum() - base_total) < 1e-6


def test_truncated_draws_within_caps(case):
    rng = np.random.default_rng(6)
    base = sample_base_state(case, 1.2, rng)
    sc = sample_scenario(case, base, case.contingency(3), 500, rng)
    caps = np.array([p.p_cap for p in case.pv_units])
    pv = np.stack([s.pv_p for s in sc.samples])
    assert np.all(pv >= 0.0) and np.all(pv <= caps)


def test_scenario_bit_reproducible(case):
    base = sample_base_state(case, 1.0, np.random.default_rng(7))
    a = sample_scenario(case, base, case.contingency(2), 20, np.random.default_rng(9))
    b = sample_scenario(case, base, case.contingency(2), 20, np.random.default_rng(9))
    for sa, sb in zip(a.samples, b.samples):
        assert np.array_equal(sa.pv_p, sb.pv_p)
        assert np.array_equal(sa.gen_p, sb.gen_p)


def test_apply_redispatch_zero_identity(case):
    rng = np.random.default_rng(8)
    st_ = sample_base_state(case, 1.0, rng)
    out = apply_redispatch(case, st_, np.zeros(9))
    np.testing.assert_array_equal(out.gen_p, st_.gen_p)


def test_apply_redispatch_slack_and_clamp(case):
    st_ = grid.nominal_state(case)
    action = np.full(9, 1e6)
    out = apply_redispatch(case, st_, action)
    adj = list(case.adjustable_indices)
    p_max = np.array([case.generators[i].p_max for i in adj])
    np.testing.assert_array_equal(out.gen_p[adj], p_max)
    slack = case.slack_gen_index
    assert out.gen_p[slack] == st_.gen_p[slack]


def test_apply_redispatch_wrong_length(case):
    with pytest.raises(ValueError, match="shape"):
        apply_redispatch(case, grid.nominal_state(case), np.zeros(3))


@settings(max_examples=25, deadline=None)
@given(delta=st.floats(-400.0, 400.0), gen=st.integers(0, 8))
def test_apply_redispatch_monotone_until_clamp(delta, gen):
    case = grid.load_case(shipped_case_path())
    st_ = grid.nominal_state(case)
    action = np.zeros(9)
    action[gen] = delta
    out = apply_redispatch(case, st_, action)
    gi = case.adjustable_indices[gen]
    g = case.generators[gi]
    assert out.gen_p[gi] == pytest.approx(
        np.clip(st_.gen_p[gi] + delta, g.p_min, g.p_max))
