"""Heterogeneous message-passing network over the bus graph.

Buses with machines become gen-nodes (features P_g, P_L, Q_g, Q_L, V,
theta), the rest other-nodes (P_L, Q_L, V, theta); every physical branch
contributes a directed edge per direction (features P_e, Q_e, F) typed by
its endpoints.  Per-type feature transforms produce 30-wide embeddings,
two message-passing rounds mix them, mean pooling per node class yields a
60-wide state embedding, and one curve head per machine maps
[state embedding || that machine's node embedding] to 100 transformed
angle values.

The same network doubles as the feature extractor for the control agent:
``embed`` is the mid-level output, ``predict`` the full curve output.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .datasets import CurveRecord, extract_features
from .grid import Contingency, NetworkCase, OperatingState
from .powerflow import PowerFlowSolution
from .transient import AngleCurveSet, inverse_transform, tsi

EDGE_TYPES = ("gen2other", "other2gen", "other2other",
              "reverse_gen2other", "reverse_other2gen")

__all__ = ["EDGE_TYPES", "GraphTemplate", "HeteroGraph", "GraphBatch",
           "NormStats", "SurrogateConfig", "SurrogateModel", "build_graph",
           "batch_graphs", "train_surrogate", "surrogate_metrics",
           "TrainReport", "mpec"]


class GraphTemplate:
    """Static topology shared by every graph built from one case: node
    partition, per-type directed edge lists, and the constant gather /
    mean-aggregation matrices the message passing uses."""

    def __init__(self, case: NetworkCase, other_order: list[int] | None = None):
        self.case = case
        gen_buses = [case.bus_index(g.bus) for g in case.generators]
        if len(set(gen_buses)) != len(gen_buses):
            raise ValueError("one machine per bus expected")
        self.gen_bus_rows = gen_buses                  # bus index per gen node
        gen_set = set(gen_buses)
        others = [bi for bi in range(case.n_bus) if bi not in gen_set]
        if other_order is not None:
            if sorted(other_order) != sorted(others):
                raise ValueError("other_order must permute the non-machine buses")
            others = list(other_order)
        self.other_bus_rows = others
        self.n_gen = len(gen_buses)
        self.n_other = len(others)
        gen_pos = {bi: k for k, bi in enumerate(gen_buses)}
        other_pos = {bi: k for k, bi in enumerate(others)}

        # directed edges: (type, src_kind, src_pos, dst_kind, dst_pos,
        #                  branch_row, end) with end 0 = from side, 1 = to side
        edges = []
        for br_row, br in enumerate(case.branches):
            i = case.bus_index(br.from_bus)
            j = case.bus_index(br.to_bus)
            i_gen, j_gen = i in gen_pos, j in gen_pos
            if i_gen and j_gen:
                raise ValueError(
                    f"branch {br.id} joins two machine buses; no edge type covers it")
            if i_gen:
                fwd, rev = "gen2other", "reverse_gen2other"
            elif j_gen:
                fwd, rev = "other2gen", "reverse_other2gen"
            else:
                fwd = rev = "other2other"
            src_kind, src = ("gen", gen_pos[i]) if i_gen else ("other", other_pos[i])
            dst_kind, dst = ("gen", gen_pos[j]) if j_gen else ("other", other_pos[j])
            edges.append((fwd, src_kind, src, dst_kind, dst, br_row, 0))
            edges.append((rev, dst_kind, dst, src_kind, src, br_row, 1))

        self.edges_by_type = {t: [e for e in edges if e[0] == t] for t in EDGE_TYPES}
        self.edge_order = [e for t in EDGE_TYPES for e in self.edges_by_type[t]]
        n_edges = len(self.edge_order)

        # constant matrices: per-type source gather, global mean aggregation
        self.gather = {}
        for t in EDGE_TYPES:
            es = self.edges_by_type[t]
            g_gen = np.zeros((len(es), self.n_gen))
            g_other = np.zeros((len(es), self.n_other))
            for r, e in enumerate(es):
                (g_gen if e[1] == "gen" else g_other)[r, e[2]] = 1.0
            self.gather[t] = (ad.constant(g_gen), ad.constant(g_other))
        a_gen = np.zeros((self.n_gen, n_edges))
        a_other = np.zeros((self.n_other, n_edges))
        for col, e in enumerate(self.edge_order):
            (a_gen if e[3] == "gen" else a_other)[e[4], col] = 1.0
        a_gen /= np.maximum(a_gen.sum(axis=1, keepdims=True), 1.0)
        a_other /= np.maximum(a_other.sum(axis=1, keepdims=True), 1.0)
        self.agg_gen = ad.constant(a_gen)
        self.agg_other = ad.constant(a_other)

    def edge_features(self, branch_flows: np.ndarray, fault_branch_id: int):
        """Per-type (E_t, 3) arrays [P_e, Q_e, F] from per-branch end flows."""
        fault_row = None
        for r, br in enumerate(self.case.branches):
            if br.id == fault_branch_id:
                fault_row = r
        out = {}
        for t in EDGE_TYPES:
            es = self.edges_by_type[t]
            feats = np.zeros((len(es), 3))
            for r, e in enumerate(es):
                br_row, end = e[5], e[6]
                p, q = branch_flows[br_row, 2 * end], branch_flows[br_row, 2 * end + 1]
                feats[r] = (p, q, 1.0 if br_row == fault_row else 0.0)
            out[t] = feats
        return out


@dataclass(frozen=True)
class HeteroGraph:
    gen_x: np.ndarray                 # (n_gen, 6), normalized
    other_x: np.ndarray               # (n_other, 4), normalized
    edge_x: dict                      # type -> (E_t, 3); F column raw 0/1


@dataclass(frozen=True)
class GraphBatch:
    gen_x: np.ndarray                 # (B, n_gen, 6)
    other_x: np.ndarray               # (B, n_other, 4)
    edge_x: dict                      # type -> (B, E_t, 3)

    @property
    def size(self) -> int:
        return self.gen_x.shape[0]


def batch_graphs(graphs: list[HeteroGraph]) -> GraphBatch:
    return GraphBatch(
        gen_x=np.stack([g.gen_x for g in graphs]),
        other_x=np.stack([g.other_x for g in graphs]),
        edge_x={t: np.stack([g.edge_x[t] for g in graphs]) for t in EDGE_TYPES})


@dataclass
class NormStats:
    """Z-score statistics fit on the training split; the fault flag F is
    exempt from normalization."""
    gen_mean: np.ndarray
    gen_std: np.ndarray
    other_mean: np.ndarray
    other_std: np.ndarray
    edge_mean: np.ndarray            # over (P_e, Q_e)
    edge_std: np.ndarray

    @classmethod
    def identity(cls, n_gen_feat=6, n_other_feat=4):
        return cls(np.zeros(n_gen_feat), np.ones(n_gen_feat),
                   np.zeros(n_other_feat), np.ones(n_other_feat),
                   np.zeros(2), np.ones(2))

    @classmethod
    def fit(cls, records: list[CurveRecord]):
        gen = np.concatenate([r.gen_feats for r in records], axis=0)
        other = np.concatenate([r.other_feats for r in records], axis=0)
        flows = np.concatenate([r.branch_flows for r in records], axis=0)
        pq = np.concatenate([flows[:, 0:2], flows[:, 2:4]], axis=0)
        gm, gs = ad.zscore_fit(gen)
        om, os_ = ad.zscore_fit(other)
        em, es = ad.zscore_fit(pq)
        return cls(gm, gs, om, os_, em, es)

    def to_arrays(self) -> dict:
        return {"norm/gen_mean": self.gen_mean, "norm/gen_std": self.gen_std,
                "norm/other_mean": self.other_mean, "norm/other_std": self.other_std,
                "norm/edge_mean": self.edge_mean, "norm/edge_std": self.edge_std}

    @classmethod
    def from_arrays(cls, arrays: dict):
        return cls(arrays["norm/gen_mean"], arrays["norm/gen_std"],
                   arrays["norm/other_mean"], arrays["norm/other_std"],
                   arrays["norm/edge_mean"], arrays["norm/edge_std"])


def graph_from_features(template: GraphTemplate, gen_feats, other_feats,
                        branch_flows, fault_branch_id: int,
                        norm: NormStats) -> HeteroGraph:
    gen_x = ad.zscore_apply(gen_feats, norm.gen_mean, norm.gen_std)
    other_x = ad.zscore_apply(other_feats, norm.other_mean, norm.other_std)
    edge_x = template.edge_features(branch_flows, fault_branch_id)
    normed = {}
    for t, feats in edge_x.items():
        f = feats.copy()
        f[:, 0:2] = ad.zscore_apply(f[:, 0:2], norm.edge_mean, norm.edge_std)
        normed[t] = f
    return HeteroGraph(gen_x=gen_x, other_x=other_x, edge_x=normed)


def build_graph(case: NetworkCase, state: OperatingState,
                solution: PowerFlowSolution, contingency: Contingency | None,
                norm: NormStats, template: GraphTemplate | None = None) -> HeteroGraph:
    """Feature extraction + normalization for one solved operating state.
    contingency=None builds a no-fault probe graph (all F = 0)."""
    template = template or GraphTemplate(case)
    gen_f, other_f, flows = extract_features(case, state, solution)
    fault_id = contingency.branch_id if contingency is not None else -1
    return graph_from_features(template, gen_f, other_f, flows, fault_id, norm)


def graph_from_record(template: GraphTemplate, record: CurveRecord,
                      norm: NormStats) -> HeteroGraph:
    return graph_from_features(template, record.gen_feats, record.other_feats,
                               record.branch_flows, record.fault_branch_id, norm)


@dataclass(frozen=True)
class SurrogateConfig:
    embed_dim: int = 30
    k_rounds: int = 2
    head_hidden: tuple = (200, 150)
    n_curve_points: int = 100
    head_clamp: float = 12.0          # pre-inverse-transform output bound

    @property
    def state_dim(self) -> int:
        return 2 * self.embed_dim


class SurrogateModel:
    """Message-passing curve predictor bound to one case topology."""

    def __init__(self, case: NetworkCase, config: SurrogateConfig = SurrogateConfig(),
                 rng: np.random.Generator | None = None,
                 norm: NormStats | None = None):
        self.case = case
        self.config = config
        self.template = GraphTemplate(case)
        self.norm = norm or NormStats.identity()
        self.params = ad.ParameterSet()
        rng = rng or np.random.default_rng(0)
        e = config.embed_dim
        self._dense("ft/gen", 6, e, rng)
        self._dense("ft/gen2", e, e, rng)
        self._dense("ft/other", 4, e, rng)
        self._dense("ft/other2", e, e, rng)
        for t in EDGE_TYPES:
            self._dense(f"ft/edge/{t}", 3, e, rng)
            self._dense(f"ft/edge2/{t}", e, e, rng)
        for r in range(config.k_rounds):
            for t in EDGE_TYPES:
                self._dense(f"round{r}/msg/{t}", 2 * e, e, rng)
            self._dense(f"round{r}/upd/gen", 2 * e, e, rng)
            self._dense(f"round{r}/upd/other", 2 * e, e, rng)
        h1, h2 = config.head_hidden
        head_in = config.state_dim + e
        for g in range(case.n_gen):
            self._dense(f"head{g}/l1", head_in, h1, rng)
            self._dense(f"head{g}/l2", h1, h2, rng)
            self._dense(f"head{g}/l3", h2, config.n_curve_points, rng)

    def _dense(self, name: str, fan_in: int, fan_out: int, rng):
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        self.params.add(f"{name}/w", rng.uniform(-bound, bound, size=(fan_in, fan_out)))
        self.params.add(f"{name}/b", np.zeros(fan_out))

    def _apply(self, name: str, x: ad.Tensor, act=ad.tanh) -> ad.Tensor:
        out = x @ self.params[f"{name}/w"] + self.params[f"{name}/b"]
        return act(out) if act is not None else out

    def _apply2(self, name: str, x1: ad.Tensor, x2: ad.Tensor,
                act=ad.tanh) -> ad.Tensor:
        """Dense layer on [x1 || x2] without materializing the concat."""
        w = self.params[f"{name}/w"]
        d1 = x1.shape[-1]
        out = x1 @ w[:d1] + x2 @ w[d1:] + self.params[f"{name}/b"]
        return act(out) if act is not None else out

    def embed(self, batch: GraphBatch):
        """(state_embedding (B, 60), gen_embeddings (B, n_gen, 30)) tensors."""
        tpl = self.template
        gen_h = self._apply("ft/gen2", self._apply("ft/gen", ad.constant(batch.gen_x)))
        other_h = self._apply("ft/other2",
                              self._apply("ft/other", ad.constant(batch.other_x)))
        edge_h = {}
        for t in EDGE_TYPES:
            ex = batch.edge_x[t]
            if ex.shape[1] == 0:
                edge_h[t] = None
                continue
            edge_h[t] = self._apply(f"ft/edge2/{t}",
                                    self._apply(f"ft/edge/{t}", ad.constant(ex)))
        for r in range(self.config.k_rounds):
            messages = []
            for t in EDGE_TYPES:
                if edge_h[t] is None:
                    continue
                g_gen, g_other = tpl.gather[t]
                es = tpl.edges_by_type[t]
                src_h = (g_gen @ gen_h) if es[0][1] == "gen" else (g_other @ other_h)
                messages.append(self._apply2(f"round{r}/msg/{t}", src_h, edge_h[t]))
            all_msgs = ad.concat(messages, axis=-2) if len(messages) > 1 else messages[0]
            agg_gen = tpl.agg_gen @ all_msgs
            agg_other = tpl.agg_other @ all_msgs
            gen_h = self._apply2(f"round{r}/upd/gen", gen_h, agg_gen)
            other_h = self._apply2(f"round{r}/upd/other", other_h, agg_other)
        state = ad.concat([ad.t_mean(gen_h, axis=-2), ad.t_mean(other_h, axis=-2)],
                          axis=-1)
        return state, gen_h

    def curves_from_embedding(self, state: ad.Tensor, gen_h: ad.Tensor) -> ad.Tensor:
        """Curve heads on precomputed embeddings: (B, n_gen, 100), clamped."""
        rows = []
        for g in range(self.case.n_gen):
            h = self._apply2(f"head{g}/l1", state, gen_h[:, g, :], act=ad.relu)
            h = self._apply(f"head{g}/l2", h, act=ad.relu)
            h = self._apply(f"head{g}/l3", h, act=None)
            rows.append(h)
        stacked = ad.concat([r[:, None, :] for r in rows], axis=-2)
        return ad.clip(stacked, -self.config.head_clamp, self.config.head_clamp)

    def predict_transformed(self, batch: GraphBatch) -> ad.Tensor:
        """Curve-head outputs, (B, n_gen, 100), clamped to the head bound."""
        state, gen_h = self.embed(batch)
        return self.curves_from_embedding(state, gen_h)

    def predict_curves(self, graph: HeteroGraph) -> AngleCurveSet:
        """Inverse-transformed angle curves for one graph."""
        yhat = self.predict_transformed(batch_graphs([graph])).data[0]
        return AngleCurveSet(angles=inverse_transform(yhat), origin="predicted")

    def predict_curves_batch(self, batch: GraphBatch, chunk: int = 256) -> np.ndarray:
        """(B, n_gen, 100) inverse-transformed angle curves; evaluated in
        chunks to keep the intermediates cache-friendly."""
        outs = []
        for start in range(0, batch.size, chunk):
            sub = GraphBatch(
                gen_x=batch.gen_x[start:start + chunk],
                other_x=batch.other_x[start:start + chunk],
                edge_x={t: batch.edge_x[t][start:start + chunk] for t in EDGE_TYPES})
            outs.append(inverse_transform(self.predict_transformed(sub).data))
        return np.concatenate(outs, axis=0)

    # persistence -----------------------------------------------------------
    def to_arrays(self) -> dict:
        arrays = self.params.state_arrays()
        arrays.update(self.norm.to_arrays())
        arrays["config/embed_dim"] = np.array([self.config.embed_dim], dtype=float)
        arrays["config/k_rounds"] = np.array([self.config.k_rounds], dtype=float)
        arrays["config/head_hidden"] = np.array(self.config.head_hidden, dtype=float)
        arrays["config/head_clamp"] = np.array([self.config.head_clamp], dtype=float)
        return arrays

    def save(self, path):
        ad.save_checkpoint(path, self.to_arrays())

    @classmethod
    def load(cls, path, case: NetworkCase) -> "SurrogateModel":
        arrays = ad.load_checkpoint(path)
        config = SurrogateConfig(
            embed_dim=int(arrays["config/embed_dim"][0]),
            k_rounds=int(arrays["config/k_rounds"][0]),
            head_hidden=tuple(int(v) for v in arrays["config/head_hidden"]),
            head_clamp=float(arrays["config/head_clamp"][0]))
        model = cls(case, config, norm=NormStats.from_arrays(arrays))
        model.params.load_state_arrays(
            {k: v for k, v in arrays.items() if k in model.params})
        return model


# ---------------------------------------------------------------------------
# training and evaluation

@dataclass
class TrainReport:
    train_mse: list = field(default_factory=list)
    val_mse: list = field(default_factory=list)
    best_epoch: int = -1
    metrics: dict = field(default_factory=dict)


def split_records(records, rng: np.random.Generator, fractions=(0.5, 0.3, 0.2)):
    """Shuffled 5:3:2 split into train / validation / test."""
    order = rng.permutation(len(records))
    n_train = int(round(fractions[0] * len(records)))
    n_val = int(round(fractions[1] * len(records)))
    take = lambda idx: [records[i] for i in idx]
    return (take(order[:n_train]), take(order[n_train:n_train + n_val]),
            take(order[n_train + n_val:]))


def _record_batch(template, records, norm) -> GraphBatch:
    return batch_graphs([graph_from_record(template, r, norm) for r in records])


def train_surrogate(case: NetworkCase, records: list[CurveRecord],
                    rng: np.random.Generator,
                    config: SurrogateConfig = SurrogateConfig(),
                    lr: float = 0.01, lr_decay: float = 0.1,
                    lr_decay_every: int = 10, batch_size: int = 512,
                    max_epochs: int = 80, patience: int = 5,
                    weight_decay: float = 0.0,
                    log=None) -> tuple[SurrogateModel, TrainReport]:
    """MSE training on the transformed labels with step-decayed Adam and
    early stopping on validation MSE; returns the best-validation weights."""
    if not records:
        raise ValueError("empty dataset")
    train, val, test = split_records(records, rng)
    norm = NormStats.fit(train)
    model = SurrogateModel(case, config, rng=rng, norm=norm)
    tpl = model.template

    batch_size = min(batch_size, len(train))
    val_batch = _record_batch(tpl, val, norm) if val else None
    val_labels = np.stack([r.labels for r in val]) if val else None
    report = TrainReport()
    best_val = np.inf
    best_arrays = model.params.state_arrays()
    bad_epochs = 0

    # graphs are topology-shared, so features can be pre-batched once
    train_batch_all = _record_batch(tpl, train, norm)
    train_labels_all = np.stack([r.labels for r in train])

    for epoch in range(max_epochs):
        cur_lr = lr * (lr_decay ** (epoch // lr_decay_every))
        order = rng.permutation(len(train))
        epoch_losses = []
        for start in range(0, len(train), batch_size):
            idx = order[start:start + batch_size]
            batch = GraphBatch(
                gen_x=train_batch_all.gen_x[idx],
                other_x=train_batch_all.other_x[idx],
                edge_x={t: train_batch_all.edge_x[t][idx] for t in EDGE_TYPES})
            labels = ad.constant(train_labels_all[idx])
            model.params.zero_grad()
            pred = model.predict_transformed(batch)
            loss = ad.t_mean(ad.square(pred - labels))
            loss.backward()
            ad.adam_step(model.params, lr=cur_lr, weight_decay=weight_decay)
            epoch_losses.append(loss.item())
        train_mse = float(np.mean(epoch_losses))
        report.train_mse.append(train_mse)
        if val_batch is not None:
            v_pred = model.predict_transformed(val_batch).data
            val_mse = float(np.mean((v_pred - val_labels) ** 2))
        else:
            val_mse = train_mse
        report.val_mse.append(val_mse)
        if log is not None:
            log(f"epoch {epoch} lr {cur_lr:.5f} train_mse {train_mse:.6f} "
                f"val_mse {val_mse:.6f}")
        if val_mse < best_val - 1e-12:
            best_val = val_mse
            best_arrays = model.params.state_arrays()
            report.best_epoch = epoch
            bad_epochs = 0
        else:
            bad_epochs += 1
            if bad_epochs >= patience:
                break
    model.params.load_state_arrays(best_arrays)
    report.metrics = {
        "val": surrogate_metrics(model, val) if val else {},
        "test": surrogate_metrics(model, test) if test else {},
    }
    return model, report


def mpec(true_curves: np.ndarray, pred_curves: np.ndarray,
         denom_floor: float = 1.0) -> float:
    """Mean relative prediction error (%) across curves and time points,
    with the denominator floored (the label crosses zero)."""
    denom = np.maximum(np.abs(true_curves), denom_floor)
    return float(np.mean(np.abs(true_curves - pred_curves) / denom) * 100.0)


def surrogate_metrics(model: SurrogateModel, records: list[CurveRecord],
                      batch_size: int = 512) -> dict:
    """MPEC plus confusion metrics with unstable as the positive class."""
    if not records:
        return {}
    tpl = model.template
    mpecs = []
    tp = tn = fp = fn = 0
    for start in range(0, len(records), batch_size):
        chunk = records[start:start + batch_size]
        batch = _record_batch(tpl, chunk, model.norm)
        pred = model.predict_curves_batch(batch)
        for r, pc in zip(chunk, pred):
            true_curves = inverse_transform(r.labels)
            mpecs.append(mpec(true_curves, pc))
            pred_stable = tsi(AngleCurveSet(angles=pc, origin="predicted")) > 0.0
            if r.stable and pred_stable:
                tn += 1
            elif r.stable and not pred_stable:
                fp += 1
            elif not r.stable and not pred_stable:
                tp += 1
            else:
                fn += 1
    total = tp + tn + fp + fn
    pct = lambda num, den: 100.0 * num / den if den else float("nan")
    return {
        "mpec": float(np.mean(mpecs)),
        "acc": pct(tp + tn, total),
        "f1": pct(2 * tp, 2 * tp + fp + fn),
        "tnr": pct(tn, tn + fp),
        "tpr": pct(tp, tp + fn),
        "counts": {"tp": tp, "tn": tn, "fp": fp, "fn": fn},
    }
