"""Newton-Raphson AC power flow and the post-control power-flow value.

Polar mismatch formulation with an analytic Jacobian.  Voltage-controlled
buses stay voltage-controlled (no reactive-limit switching), transformers
are modeled at nominal tap, and the single slack machine absorbs the
system imbalance.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .grid import NetworkCase, OperatingState

PSI_MIN = -1.0          # floor of the power-flow penalty value
TOLERANCE = 1e-8        # per-unit max mismatch
MAX_ITER = 20

__all__ = ["PowerFlowSolution", "build_ybus", "solve", "compute_mismatch",
           "compute_jacobian", "violation_penalty", "pf_value",
           "PSI_MIN", "TOLERANCE", "MAX_ITER"]


@dataclass(frozen=True)
class PowerFlowSolution:
    v_mag: np.ndarray          # per-unit per bus
    v_ang: np.ndarray          # radians per bus, slack-referenced
    p_inj: np.ndarray          # MW net injection per bus
    q_inj: np.ndarray          # MVAr net injection per bus
    p_slack: np.ndarray        # MW, slack machine output (0-d array for immutability symmetry)
    converged: bool
    iterations: int
    branch_pq: np.ndarray      # (n_branch, 4): P_from, Q_from, P_to, Q_to in MW/MVAr

    @property
    def v_complex(self) -> np.ndarray:
        return self.v_mag * np.exp(1j * self.v_ang)


def build_ybus(case: NetworkCase, removed_branch_id: int | None = None) -> np.ndarray:
    """Dense bus admittance matrix; optionally with one branch removed."""
    n = case.n_bus
    y = np.zeros((n, n), dtype=complex)
    for br in case.branches:
        if br.id == removed_branch_id:
            continue
        i = case.bus_index(br.from_bus)
        j = case.bus_index(br.to_bus)
        ys = 1.0 / complex(br.r, br.x)
        ysh = 1j * br.b / 2.0
        y[i, i] += ys + ysh
        y[j, j] += ys + ysh
        y[i, j] -= ys
        y[j, i] -= ys
    return y


def _bus_injections(case: NetworkCase, state: OperatingState):
    """Specified net injections (pu) and per-bus generation bookkeeping."""
    n = case.n_bus
    p = -state.load_p.copy()
    q = -state.load_q.copy()
    for gi, g in enumerate(case.generators):
        p[case.bus_index(g.bus)] += state.gen_p[gi]
    for pi, pv in enumerate(case.pv_units):
        p[case.bus_index(pv.bus)] += state.pv_p[pi]
    return p / case.base_mva, q / case.base_mva


def _calc_pq(ybus, v_mag, v_ang):
    v = v_mag * np.exp(1j * v_ang)
    s = v * np.conj(ybus @ v)
    return s.real, s.imag


def compute_mismatch(case: NetworkCase, ybus, v_mag, v_ang, p_spec, q_spec,
                     pvpq, pq):
    """Active mismatch on non-slack buses, reactive mismatch on PQ buses (pu)."""
    p_calc, q_calc = _calc_pq(ybus, v_mag, v_ang)
    return np.concatenate([(p_spec - p_calc)[pvpq], (q_spec - q_calc)[pq]])


def compute_jacobian(ybus, v_mag, v_ang, pvpq, pq):
    """Analytic polar Jacobian of the calculated injections.

    Rows follow the mismatch layout [P(pvpq); Q(pq)], columns the unknown
    layout [theta(pvpq); V(pq)].  Returned as d(calc)/dx, i.e. the negated
    mismatch sensitivity.
    """
    v = v_mag * np.exp(1j * v_ang)
    i_inj = ybus @ v
    diag_v = np.diag(v)
    diag_i = np.diag(i_inj)
    diag_vnorm = np.diag(v / v_mag)
    # complex power sensitivities (standard polar derivation)
    ds_dang = 1j * diag_v @ np.conj(diag_i - ybus @ diag_v)
    ds_dvm = diag_v @ np.conj(ybus @ diag_vnorm) + np.conj(diag_i) @ diag_vnorm
    j11 = ds_dang[np.ix_(pvpq, pvpq)].real
    j12 = ds_dvm[np.ix_(pvpq, pq)].real
    j21 = ds_dang[np.ix_(pq, pvpq)].imag
    j22 = ds_dvm[np.ix_(pq, pq)].imag
    return np.block([[j11, j12], [j21, j22]])


def _branch_flows(case: NetworkCase, v) -> np.ndarray:
    flows = np.zeros((len(case.branches), 4))
    for k, br in enumerate(case.branches):
        i = case.bus_index(br.from_bus)
        j = case.bus_index(br.to_bus)
        ys = 1.0 / complex(br.r, br.x)
        ysh = 1j * br.b / 2.0
        s_from = v[i] * np.conj(ys * (v[i] - v[j]) + ysh * v[i])
        s_to = v[j] * np.conj(ys * (v[j] - v[i]) + ysh * v[j])
        flows[k] = (s_from.real, s_from.imag, s_to.real, s_to.imag)
    return flows * case.base_mva


def solve(case: NetworkCase, state: OperatingState,
          warm_start: PowerFlowSolution | None = None,
          tol: float = TOLERANCE, max_iter: int = MAX_ITER) -> PowerFlowSolution:
    """Full Newton iterations on the polar mismatch equations.

    Returns converged=False on iteration-limit or a singular Jacobian; the
    caller decides what a failed solve is worth (see pf_value).
    """
    n = case.n_bus
    kinds = [b.kind for b in case.buses]
    slack = kinds.index("slack")
    pvpq = np.array([i for i, k in enumerate(kinds) if k != "slack"], dtype=int)
    pq = np.array([i for i, k in enumerate(kinds) if k == "pq"], dtype=int)
    npvpq, npq = len(pvpq), len(pq)

    v_mag = np.ones(n)
    v_ang = np.zeros(n)
    vset = {case.bus_index(g.bus): state.gen_v[gi] for gi, g in enumerate(case.generators)}
    if warm_start is not None and warm_start.converged:
        v_mag = warm_start.v_mag.copy()
        v_ang = warm_start.v_ang.copy()
    for idx, v in vset.items():
        v_mag[idx] = v           # controlled magnitudes are pinned, warm or cold

    ybus = build_ybus(case)
    p_spec, q_spec = _bus_injections(case, state)

    converged = False
    iterations = 0
    for it in range(1, max_iter + 1):
        iterations = it
        mis = compute_mismatch(case, ybus, v_mag, v_ang, p_spec, q_spec, pvpq, pq)
        if np.max(np.abs(mis)) < tol:
            converged = True
            iterations = it - 1
            break
        jac = compute_jacobian(ybus, v_mag, v_ang, pvpq, pq)
        try:
            dx = np.linalg.solve(jac, mis)
        except np.linalg.LinAlgError:
            break
        if not np.all(np.isfinite(dx)):
            break
        v_ang[pvpq] += dx[:npvpq]
        v_mag[pq] += dx[npvpq:npvpq + npq]
        if np.any(v_mag <= 0):
            break
    else:
        # one final residual check after the last correction
        mis = compute_mismatch(case, ybus, v_mag, v_ang, p_spec, q_spec, pvpq, pq)
        converged = bool(np.max(np.abs(mis)) < tol)

    p_calc, q_calc = _calc_pq(ybus, v_mag, v_ang)
    v = v_mag * np.exp(1j * v_ang)
    p_inj = p_calc * case.base_mva
    q_inj = q_calc * case.base_mva
    slack_bus_rec = case.buses[slack]
    pv_at_slack = sum(state.pv_p[pi] for pi, pv in enumerate(case.pv_units)
                      if pv.bus == slack_bus_rec.id)
    p_slack = p_inj[slack] + slack_bus_rec.p_load - pv_at_slack
    return PowerFlowSolution(
        v_mag=_ro(v_mag), v_ang=_ro(v_ang), p_inj=_ro(p_inj), q_inj=_ro(q_inj),
        p_slack=_ro(np.float64(p_slack)), converged=converged,
        iterations=iterations,
        branch_pq=_ro(_branch_flows(case, v) if converged else np.zeros((len(case.branches), 4))))


def _ro(a):
    a = np.asarray(a)
    a.setflags(write=False)
    return a


def violation_penalty(solution: PowerFlowSolution, case: NetworkCase,
                      state: OperatingState) -> float:
    """Negative per-unit sum of generator-P and bus-V limit overshoots; zero
    when everything is inside limits."""
    if not solution.converged:
        raise ValueError("violation_penalty requires a converged solution")
    r_p = 0.0
    for gi, g in enumerate(case.generators):
        p = float(solution.p_slack) if gi == case.slack_gen_index else state.gen_p[gi]
        p_pu = p / case.base_mva
        r_p -= max(0.0, g.p_min / case.base_mva - p_pu)
        r_p -= max(0.0, p_pu - g.p_max / case.base_mva)
    r_v = 0.0
    for bi, bus in enumerate(case.buses):
        v = solution.v_mag[bi]
        r_v -= max(0.0, bus.v_min - v)
        r_v -= max(0.0, v - bus.v_max)
    return r_p + r_v


def pf_value(case: NetworkCase, state: OperatingState,
             solution: PowerFlowSolution) -> float:
    """Power-flow value in [-1, 0]: the floor value for a diverged solve,
    otherwise the violation penalty floored at that same value."""
    if not solution.converged:
        return PSI_MIN
    return max(violation_penalty(solution, case, state), PSI_MIN)
