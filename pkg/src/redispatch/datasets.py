"""Dataset generation and the line-oriented record format.

One record per line: scenario id, level, fault branch id, raw steady-state
features (generator-bus features, other-bus features, per-branch end
flows), the 10 x 100 log-transformed angle labels, the stability index and
the stability bit.  A header row names every field; floats are written
with 9 significant digits, which makes the file bit-reproducible for a
fixed seed.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import powerflow, transient
from .grid import NetworkCase, OperatingState, sample_base_state

__all__ = ["CurveRecord", "generate_dataset", "write_records", "read_records",
           "extract_features", "dataset_header", "DATASET_LEVELS"]

DATASET_LEVELS = tuple(np.round(np.linspace(0.8, 1.2, 9), 4))


@dataclass(frozen=True)
class CurveRecord:
    scenario_id: int
    level: float
    fault_branch_id: int
    gen_feats: np.ndarray      # (n_gen, 6): P_g, P_L, Q_g, Q_L, V, theta  (pu/rad)
    other_feats: np.ndarray    # (n_other, 4): P_L, Q_L, V, theta
    branch_flows: np.ndarray   # (n_branch, 4): P_from, Q_from, P_to, Q_to (pu)
    labels: np.ndarray         # (n_gen, 100) transformed angle curves
    tsi: float
    stable: bool


def extract_features(case: NetworkCase, state: OperatingState,
                     solution: powerflow.PowerFlowSolution):
    """Raw (un-normalized) node features and branch end flows from a solved
    state.  Generator-bus active power includes photovoltaic injection at
    the same bus; reactive power is the machine's."""
    base = case.base_mva
    gen_buses = [case.bus_index(g.bus) for g in case.generators]
    gen_feats = np.zeros((case.n_gen, 6))
    for gi, g in enumerate(case.generators):
        bi = case.bus_index(g.bus)
        bus = case.buses[bi]
        # P_g is the bus's total generation injection, photovoltaic included
        p_g = (solution.p_inj[bi] + bus.p_load) / base
        q_g = (solution.q_inj[bi] + bus.q_load) / base
        gen_feats[gi] = (p_g, state.load_p[bi] / base, q_g,
                         state.load_q[bi] / base,
                         solution.v_mag[bi], solution.v_ang[bi])
    other_idx = [bi for bi in range(case.n_bus) if bi not in set(gen_buses)]
    other_feats = np.zeros((len(other_idx), 4))
    for row, bi in enumerate(other_idx):
        other_feats[row] = (state.load_p[bi] / base, state.load_q[bi] / base,
                            solution.v_mag[bi], solution.v_ang[bi])
    return gen_feats, other_feats, solution.branch_pq / base


def generate_dataset(case: NetworkCase, rng: np.random.Generator,
                     samples_per_level: int = 10,
                     levels=DATASET_LEVELS,
                     sim_config: transient.SimConfig = transient.SimConfig(),
                     log=None) -> list[CurveRecord]:
    """Solve, simulate and label every (level, drawn state, faultable line)
    combination.  Diverged power-flow draws are skipped and logged."""
    records: list[CurveRecord] = []
    scenario_id = 0
    for level in levels:
        for _ in range(samples_per_level):
            state = sample_base_state(case, float(level), rng)
            solution = powerflow.solve(case, state)
            if not solution.converged:
                if log is not None:
                    log(f"skipping diverged draw at level {level}")
                continue
            gen_f, other_f, flows = extract_features(case, state, solution)
            for branch_id in case.faultable_branch_ids:
                curves = transient.simulate(case, solution,
                                            case.contingency(branch_id),
                                            sim_config, pv_p=state.pv_p)
                value = transient.tsi(curves)
                records.append(CurveRecord(
                    scenario_id=scenario_id, level=float(level),
                    fault_branch_id=branch_id,
                    gen_feats=gen_f, other_feats=other_f, branch_flows=flows,
                    labels=transient.forward_transform(curves.angles),
                    tsi=value, stable=value > 0.0))
            scenario_id += 1
    return records


def dataset_header(case: NetworkCase) -> list[str]:
    gen_buses = {case.bus_index(g.bus) for g in case.generators}
    cols = ["scenario_id", "level", "fault_branch_id"]
    for gi, g in enumerate(case.generators):
        for f in ("pg", "pl", "qg", "ql", "v", "theta"):
            cols.append(f"gen{gi}_bus{g.bus}_{f}")
    for bi in range(case.n_bus):
        if bi in gen_buses:
            continue
        for f in ("pl", "ql", "v", "theta"):
            cols.append(f"bus{case.buses[bi].id}_{f}")
    for br in case.branches:
        for f in ("pf", "qf", "pt", "qt"):
            cols.append(f"br{br.id}_{f}")
    for gi in range(case.n_gen):
        for t in range(100):
            cols.append(f"y{gi}_{t}")
    cols += ["tsi", "stable"]
    return cols


def _fmt(x: float) -> str:
    return f"{x:.9g}"


def write_records(path, case: NetworkCase, records) -> None:
    header = dataset_header(case)
    with open(path, "w") as fh:
        fh.write(" ".join(header) + "\n")
        for r in records:
            parts = [str(r.scenario_id), _fmt(r.level), str(r.fault_branch_id)]
            parts += [_fmt(v) for v in r.gen_feats.ravel()]
            parts += [_fmt(v) for v in r.other_feats.ravel()]
            parts += [_fmt(v) for v in r.branch_flows.ravel()]
            parts += [_fmt(v) for v in r.labels.ravel()]
            parts.append(_fmt(r.tsi))
            parts.append("1" if r.stable else "0")
            fh.write(" ".join(parts) + "\n")


def read_records(path, case: NetworkCase) -> list[CurveRecord]:
    n_gen = case.n_gen
    n_other = case.n_bus - n_gen
    n_br = len(case.branches)
    expected = dataset_header(case)
    records = []
    with open(path) as fh:
        header = fh.readline().split()
        if header != expected:
            raise ValueError(f"{path}: header does not match the case layout")
        for line in fh:
            toks = line.split()
            if not toks:
                continue
            vals = np.array([float(t) for t in toks[3:]])
            ofs = 0
            gen_f = vals[ofs:ofs + n_gen * 6].reshape(n_gen, 6); ofs += n_gen * 6
            oth_f = vals[ofs:ofs + n_other * 4].reshape(n_other, 4); ofs += n_other * 4
            flows = vals[ofs:ofs + n_br * 4].reshape(n_br, 4); ofs += n_br * 4
            labels = vals[ofs:ofs + n_gen * 100].reshape(n_gen, 100); ofs += n_gen * 100
            records.append(CurveRecord(
                scenario_id=int(toks[0]), level=float(toks[1]),
                fault_branch_id=int(toks[2]), gen_feats=gen_f,
                other_feats=oth_f, branch_flows=flows, labels=labels,
                tsi=float(vals[ofs]), stable=bool(int(toks[-1]))))
    return records
