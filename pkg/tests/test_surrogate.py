import numpy as np
import pytest

from redispatch import autodiff as ad
from redispatch import grid, surrogate
from redispatch.surrogate import (EDGE_TYPES, GraphTemplate, NormStats,
                                  SurrogateModel, batch_graphs,
                                  graph_from_record, mpec, split_records,
                                  surrogate_metrics, train_surrogate)


@pytest.fixture(scope="module")
def norm(tiny_records):
    return NormStats.fit(tiny_records)


@pytest.fixture(scope="module")
def model(case, norm):
    return SurrogateModel(case, rng=np.random.default_rng(1), norm=norm)


def test_node_partition(case):
    tpl = GraphTemplate(case)
    assert tpl.n_gen == 10 and tpl.n_other == 29
    counts = {t: len(tpl.edges_by_type[t]) for t in EDGE_TYPES}
    assert sum(counts.values()) == 2 * len(case.branches)
    # every physical branch yields two directed edges and the reverse types
    # mirror the forward ones
    assert counts["other2gen"] == counts["reverse_other2gen"]
    assert counts["gen2other"] == counts["reverse_gen2other"]


def test_fault_flag_on_both_directions(case, tiny_records, norm):
    tpl = GraphTemplate(case)
    r = tiny_records[5]
    g = graph_from_record(tpl, r, norm)
    flags = np.concatenate([g.edge_x[t][:, 2] for t in EDGE_TYPES])
    assert flags.sum() == 2.0
    # a no-fault probe graph carries no flag
    g0 = surrogate.graph_from_features(tpl, r.gen_feats, r.other_feats,
                                       r.branch_flows, -1, norm)
    assert all(g0.edge_x[t][:, 2].sum() == 0.0 for t in EDGE_TYPES)


def test_other_other_branch_typing(case):
    tpl = GraphTemplate(case)
    by_branch = {}
    for t in EDGE_TYPES:
        for e in tpl.edges_by_type[t]:
            by_branch.setdefault(e[5], []).append(t)
    br_12_13 = next(i for i, br in enumerate(case.branches)
                    if br.from_bus == 12 and br.to_bus == 13)
    assert by_branch[br_12_13] == ["other2other", "other2other"]


def test_embedding_widths(case, model, tiny_records, norm):
    g = graph_from_record(model.template, tiny_records[0], norm)
    state, gen_h = model.embed(batch_graphs([g]))
    assert state.shape == (1, 60)
    assert gen_h.shape == (1, 10, 30)


def test_permutation_invariance(case, tiny_records, norm):
    model = SurrogateModel(case, rng=np.random.default_rng(2), norm=norm)
    tpl = model.template
    r = tiny_records[3]
    g = graph_from_record(tpl, r, norm)
    state, _ = model.embed(batch_graphs([g]))
    perm = list(np.random.default_rng(5).permutation(tpl.other_bus_rows))
    tpl2 = GraphTemplate(case, other_order=perm)
    pos = {bi: k for k, bi in enumerate(tpl.other_bus_rows)}
    reorder = [pos[bi] for bi in perm]
    edge_x = tpl2.edge_features(r.branch_flows, r.fault_branch_id)
    for t in edge_x:
        edge_x[t][:, 0:2] = ad.zscore_apply(edge_x[t][:, 0:2], norm.edge_mean,
                                            norm.edge_std)
    g2 = surrogate.HeteroGraph(gen_x=g.gen_x, other_x=g.other_x[reorder],
                               edge_x=edge_x)
    model.template = tpl2
    state2, _ = model.embed(batch_graphs([g2]))
    model.template = tpl
    assert np.max(np.abs(state.data - state2.data)) < 1e-10


def test_fault_location_changes_embedding(case, model, tiny_records, norm):
    same_state = [r for r in tiny_records if r.scenario_id == 0]
    g1 = graph_from_record(model.template, same_state[0], norm)
    g2 = graph_from_record(model.template, same_state[1], norm)
    s1, _ = model.embed(batch_graphs([g1]))
    s2, _ = model.embed(batch_graphs([g2]))
    assert np.max(np.abs(s1.data - s2.data)) > 1e-8


def test_prediction_shape_and_clamp(case, model, tiny_records, norm):
    g = graph_from_record(model.template, tiny_records[0], norm)
    curves = model.predict_curves(g)
    assert curves.angles.shape == (10, 100)
    assert curves.origin == "predicted"
    assert np.all(np.isfinite(curves.angles))
    assert np.max(np.abs(curves.angles)) <= np.exp(12.0)


def test_predicted_tsi_from_curves(case, model, tiny_records, norm):
    from redispatch.transient import tsi
    g = graph_from_record(model.template, tiny_records[0], norm)
    curves = model.predict_curves(g)
    value = tsi(curves)
    assert -1.0 < value <= 1.0


def test_gen_gen_branch_rejected():
    buses = (grid.BusRecord(1, "slack", 1.0, 0, 0, 0.9, 1.1),
             grid.BusRecord(2, "pv", 1.0, 0, 0, 0.9, 1.1))
    branches = (grid.BranchRecord(1, 1, 2, 0.0, 0.5, 0.0, True),)
    gens = (grid.GeneratorRecord(1, 0, -1e4, 1e4, 10, 0.1, 0, 0, False),
            grid.GeneratorRecord(2, 50, 0, 1e4, 5, 0.2, 0, 1, True))
    case2 = grid.NetworkCase(buses=buses, branches=branches, generators=gens,
                             pv_units=())
    with pytest.raises(ValueError, match="no edge type"):
        GraphTemplate(case2)


def test_split_fractions(tiny_records):
    train, val, test = split_records(tiny_records, np.random.default_rng(0))
    assert len(train) + len(val) + len(test) == len(tiny_records)
    assert len(train) == round(0.5 * len(tiny_records))
    assert len(val) == round(0.3 * len(tiny_records))
    ids = lambda rs: {id(r) for r in rs}
    assert not (ids(train) & ids(val)) and not (ids(val) & ids(test))


def test_training_loss_decreases(case, tiny_records):
    _, report = train_surrogate(case, tiny_records, np.random.default_rng(3),
                                max_epochs=6)
    assert report.train_mse[-1] < report.train_mse[0]


def test_checkpoint_round_trip_same_outputs(case, tiny_records, norm, tmp_path):
    model = SurrogateModel(case, rng=np.random.default_rng(4), norm=norm)
    g = graph_from_record(model.template, tiny_records[0], norm)
    before = model.predict_curves(g).angles
    path = tmp_path / "model.ckpt"
    model.save(path)
    back = SurrogateModel.load(path, case)
    after = back.predict_curves(g).angles
    np.testing.assert_array_equal(before, after)


def test_metrics_perfect_prediction(case, model, tiny_records, monkeypatch):
    recs = tiny_records[:40]

    def perfect_batch(batch, chunk=256):
        return np.stack([surrogate.inverse_transform(r.labels) for r in recs])

    monkeypatch.setattr(model, "predict_curves_batch", perfect_batch)
    m = surrogate_metrics(model, recs, batch_size=len(recs))
    assert m["mpec"] == 0.0
    assert m["acc"] == 100.0
    assert m["tnr"] == 100.0
    # the slice holds both classes, so the positive-class rates are defined
    assert m["counts"]["tp"] + m["counts"]["fn"] >= 1
    assert m["tpr"] == 100.0 and m["f1"] == 100.0


def test_confusion_arithmetic():
    # TP=2 TN=6 FP=1 FN=1 -> Acc 80, F1 66.7, TNR 85.7, TPR 66.7
    tp, tn, fp, fn = 2, 6, 1, 1
    acc = 100.0 * (tp + tn) / (tp + tn + fp + fn)
    f1 = 100.0 * 2 * tp / (2 * tp + fp + fn)
    tnr = 100.0 * tn / (tn + fp)
    tpr = 100.0 * tp / (tp + fn)
    assert acc == pytest.approx(80.0)
    assert f1 == pytest.approx(66.7, abs=0.05)
    assert tnr == pytest.approx(85.7, abs=0.05)
    assert tpr == pytest.approx(66.7, abs=0.05)


def test_mpec_denominator_guard():
    true = np.array([[0.1, 2.0]])
    pred = np.array([[0.6, 2.0]])
    # |0.1 - 0.6| / max(|0.1|, 1) = 0.5 -> 25% over two points
    assert mpec(true, pred) == pytest.approx(25.0)
