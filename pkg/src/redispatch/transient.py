"""Classical-model time-domain simulation, stability index, and curve transforms.

Machines are second-order classical models (constant EMF behind transient
reactance), loads become constant admittances at the solved voltages, and
the network is Kron-reduced onto the machine internal nodes for each fault
stage.  A three-phase fault is a near-zero impedance to ground at a point
along a line; clearing removes the line permanently.  Integration is
fixed-step RK4 on the swing equations

    (2 H / w_s) * delta'' = P_m - P_e(delta) - D * delta'

with rotor angles reported in degrees relative to the stiffest machine
(the frame shift leaves every pairwise separation, and therefore the
stability index, untouched), 100 output points over (0, 10] s.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .grid import Contingency, NetworkCase, _connected
from .powerflow import PowerFlowSolution, build_ybus

OMEGA_S = 2.0 * np.pi * 60.0

__all__ = [
    "AngleCurveSet", "SimConfig", "KronReductionError", "ReducedNetwork",
    "machine_init", "kron_reduce", "swing_rk4", "simulate", "tsi",
    "forward_transform", "inverse_transform", "OMEGA_S",
]


class KronReductionError(RuntimeError):
    """Raised when network reduction is impossible (islanded network)."""


@dataclass(frozen=True)
class AngleCurveSet:
    """Per-generator rotor-angle trajectories: (n_gen, 100) in degrees,
    sampled every 0.1 s over (0, 10]."""
    angles: np.ndarray
    dt_out: float = 0.1
    origin: str = "simulated"    # "simulated" | "predicted"

    def __post_init__(self):
        a = np.asarray(self.angles, dtype=float).copy()
        a.setflags(write=False)
        object.__setattr__(self, "angles", a)

    @property
    def times(self) -> np.ndarray:
        return self.dt_out * np.arange(1, self.angles.shape[1] + 1)


@dataclass(frozen=True)
class SimConfig:
    h_step: float = 0.0025             # s; must divide the 0.1 s output interval
    t_end: float = 10.0                # s
    fault_impedance: float = 1e-6      # pu shunt impedance at the fault point
    instability_angle_cap: float = 20000.0   # degrees, integration guard only

    def __post_init__(self):
        if abs(self.dt_out_every * self.h_step - 0.1) > 1e-9:
            raise ValueError("h_step must divide the 0.1 s output interval")
        if self.t_end != 10.0:
            raise ValueError("t_end is fixed at 10 s")

    @property
    def dt_out_every(self) -> int:
        return int(round(0.1 / self.h_step))


@dataclass(frozen=True)
class ReducedNetwork:
    """Admittance matrix over machine internal nodes plus machine constants."""
    y_red: np.ndarray        # (n_gen, n_gen) complex
    emag: np.ndarray         # internal EMF magnitudes, pu
    delta0: np.ndarray       # initial rotor angles, rad
    pm: np.ndarray           # mechanical powers, pu
    h: np.ndarray            # inertia constants, s
    d: np.ndarray            # damping coefficients

    def electrical_power(self, delta: np.ndarray) -> np.ndarray:
        e = self.emag * np.exp(1j * delta)
        return (e * np.conj(self.y_red @ e)).real


def machine_init(case: NetworkCase, solution: PowerFlowSolution,
                 pv_p: np.ndarray | None = None):
    """Internal EMF magnitude/angle and mechanical power per machine from
    the solved terminal conditions.  Photovoltaic output at a machine bus
    (pass the state's pv_p) is netted out of the machine's share."""
    v = solution.v_complex
    n_gen = case.n_gen
    emag = np.zeros(n_gen)
    delta0 = np.zeros(n_gen)
    pm = np.zeros(n_gen)
    for gi, g in enumerate(case.generators):
        bi = case.bus_index(g.bus)
        bus = case.buses[bi]
        pv_here = 0.0
        if pv_p is not None:
            for pi, pv in enumerate(case.pv_units):
                if pv.bus == g.bus:
                    pv_here += pv_p[pi]
        p_gen = (solution.p_inj[bi] + bus.p_load - pv_here) / case.base_mva
        q_gen = (solution.q_inj[bi] + bus.q_load) / case.base_mva
        i_term = np.conj(complex(p_gen, q_gen) / v[bi])
        e = v[bi] + 1j * g.xdp * i_term
        emag[gi] = abs(e)
        delta0[gi] = np.angle(e)
        pm[gi] = p_gen
    return emag, delta0, pm


def kron_reduce(case: NetworkCase, solution: PowerFlowSolution, stage: str,
                contingency: Contingency | None = None,
                pv_p: np.ndarray | None = None,
                fault_impedance: float = 1e-6) -> ReducedNetwork:
    """Reduce the network to machine internal nodes for one fault stage.

    stage: "prefault" (intact network), "fault" (near-zero impedance to
    ground at the fault location, realized by splitting the faulted line at
    that point), or "postfault" (faulted line removed).  Loads, and
    photovoltaic units as negative loads, become constant admittances at
    the solved voltages.
    """
    if stage not in ("prefault", "fault", "postfault"):
        raise ValueError(f"unknown stage {stage!r}")
    if stage != "prefault" and contingency is None:
        raise ValueError("fault/postfault stages need a contingency")
    if stage == "postfault" and not _connected(case, removed_branch_id=contingency.branch_id):
        raise KronReductionError(
            f"removing branch {contingency.branch_id} islands the network")

    n = case.n_bus
    if stage == "postfault":
        ybus = build_ybus(case, removed_branch_id=contingency.branch_id)
    else:
        ybus = build_ybus(case)

    extra = 0
    if stage == "fault":
        br = case.branch_by_id(contingency.branch_id)
        i = case.bus_index(br.from_bus)
        j = case.bus_index(br.to_bus)
        z = complex(br.r, br.x)
        ys = 1.0 / z
        ysh = 1j * br.b / 2.0
        # swap the intact line for two half-lines around a new fault node
        ybus[i, i] -= ys + ysh
        ybus[j, j] -= ys + ysh
        ybus[i, j] += ys
        ybus[j, i] += ys
        lam = contingency.location
        y1 = 1.0 / (lam * z)
        y2 = 1.0 / ((1.0 - lam) * z)
        yf = 1.0 / complex(fault_impedance, 0.0)
        extra = 1
        aug = np.zeros((n + 1, n + 1), dtype=complex)
        aug[:n, :n] = ybus
        f = n
        aug[i, i] += y1 + 1j * br.b * lam / 2.0
        aug[j, j] += y2 + 1j * br.b * (1.0 - lam) / 2.0
        aug[f, f] += y1 + y2 + yf
        aug[i, f] -= y1
        aug[f, i] -= y1
        aug[j, f] -= y2
        aug[f, j] -= y2
        ybus = aug

    # constant-admittance loads (photovoltaic units enter as negative load)
    v = solution.v_complex
    load_p = np.array([b.p_load for b in case.buses]) / case.base_mva
    load_q = np.array([b.q_load for b in case.buses]) / case.base_mva
    if pv_p is not None:
        for pi, pv in enumerate(case.pv_units):
            load_p[case.bus_index(pv.bus)] -= pv_p[pi] / case.base_mva
    y_load = (load_p - 1j * load_q) / np.abs(v) ** 2
    n_aug = n + extra
    for bi in range(n):
        ybus[bi, bi] += y_load[bi]

    # machines behind transient reactance
    n_gen = case.n_gen
    full = np.zeros((n_aug + n_gen, n_aug + n_gen), dtype=complex)
    full[:n_aug, :n_aug] = ybus
    for gi, g in enumerate(case.generators):
        bi = case.bus_index(g.bus)
        ym = 1.0 / complex(0.0, g.xdp)
        k = n_aug + gi
        full[k, k] += ym
        full[bi, bi] += ym
        full[k, bi] -= ym
        full[bi, k] -= ym

    gen_nodes = np.arange(n_aug, n_aug + n_gen)
    other = np.arange(0, n_aug)
    y_gg = full[np.ix_(gen_nodes, gen_nodes)]
    y_gl = full[np.ix_(gen_nodes, other)]
    y_lg = full[np.ix_(other, gen_nodes)]
    y_ll = full[np.ix_(other, other)]
    try:
        y_red = y_gg - y_gl @ np.linalg.solve(y_ll, y_lg)
    except np.linalg.LinAlgError as exc:
        raise KronReductionError(f"singular reduction ({exc})") from exc

    emag, delta0, pm = machine_init(case, solution, pv_p)
    return ReducedNetwork(
        y_red=y_red, emag=emag, delta0=delta0, pm=pm,
        h=np.array([g.h for g in case.generators]),
        d=np.array([g.d for g in case.generators]))


def swing_rk4(delta0: np.ndarray, omega0: np.ndarray, net: ReducedNetwork,
              h_step: float, n_steps: int):
    """Fixed-step RK4 on the swing equations over one network stage;
    returns (delta, omega) after n_steps.  Angles in radians, speed
    deviations in rad/s."""
    delta = delta0.astype(float).copy()
    omega = omega0.astype(float).copy()
    inv_m = OMEGA_S / (2.0 * net.h)
    pm, d = net.pm, net.d
    pe = net.electrical_power
    for _ in range(n_steps):
        k1d = omega
        k1w = inv_m * (pm - pe(delta) - d * omega)
        d2 = delta + 0.5 * h_step * k1d
        w2 = omega + 0.5 * h_step * k1w
        k2w = inv_m * (pm - pe(d2) - d * w2)
        d3 = delta + 0.5 * h_step * w2
        w3 = omega + 0.5 * h_step * k2w
        k3w = inv_m * (pm - pe(d3) - d * w3)
        d4 = delta + h_step * w3
        w4 = omega + h_step * k3w
        k4w = inv_m * (pm - pe(d4) - d * w4)
        delta = delta + (h_step / 6.0) * (k1d + 2 * w2 + 2 * w3 + w4)
        omega = omega + (h_step / 6.0) * (k1w + 2 * k2w + 2 * k3w + k4w)
    return delta, omega


def simulate(case: NetworkCase, solution: PowerFlowSolution,
             contingency: Contingency, config: SimConfig = SimConfig(),
             pv_p: np.ndarray | None = None) -> AngleCurveSet:
    """Three-stage fault simulation; samples rotor angles every 0.1 s.

    pv_p carries the operating state's photovoltaic outputs so they are
    netted out of machine initialization (pass state.pv_p whenever the
    case has photovoltaic units).  If any angle passes the instability cap
    the integration stops and the last values are held.
    """
    if not solution.converged:
        raise ValueError("simulate requires a converged power-flow solution")
    net_fault = kron_reduce(case, solution, "fault", contingency,
                            pv_p=pv_p, fault_impedance=config.fault_impedance)
    net_post = kron_reduce(case, solution, "postfault", contingency, pv_p=pv_p)

    h = config.h_step
    n_out = int(round(config.t_end / 0.1))
    per_out = config.dt_out_every
    clear_step = int(round(contingency.t_clear / h))
    cap_rad = np.deg2rad(config.instability_angle_cap)

    delta = net_fault.delta0.copy()
    omega = np.zeros(case.n_gen)
    out = np.zeros((case.n_gen, n_out))
    reference = int(np.argmax(net_fault.h))
    frozen = False
    steps_done = 0
    for out_idx in range(n_out):
        target = (out_idx + 1) * per_out
        while steps_done < target:
            if frozen:
                steps_done = target
                break
            if steps_done < clear_step:
                n = min(clear_step, target) - steps_done
                net = net_fault
            else:
                n = target - steps_done
                net = net_post
            delta, omega = swing_rk4(delta, omega, net, h, n)
            steps_done += n
            if np.max(np.abs(delta)) > cap_rad:
                frozen = True
        # report relative to the stiffest machine: the synchronous-frame
        # drift carries no stability information, and any common shift
        # leaves pairwise separations (hence the stability index) untouched
        out[:, out_idx] = np.rad2deg(delta - delta[reference])
    return AngleCurveSet(angles=out, origin="simulated")


def tsi(curves: AngleCurveSet) -> float:
    """Transient stability index from the maximum pairwise rotor-angle
    separation over the whole window: (360 - sep) / (360 + sep)."""
    a = curves.angles
    if a.size == 0:
        raise ValueError("empty curve set")
    sep = float(np.max(a.max(axis=0) - a.min(axis=0)))
    return (360.0 - sep) / (360.0 + sep)


def forward_transform(y):
    """Log compression of angle labels: ln(y) above 1, -ln(-y) below -1,
    and the constant 1 on [-1, 1] (lossy there by construction)."""
    y = np.asarray(y, dtype=float)
    out = np.ones_like(y)
    pos = y > 1.0
    neg = y < -1.0
    out[pos] = np.log(y[pos])
    out[neg] = -np.log(-y[neg])
    return out if out.ndim else float(out)


def inverse_transform(yhat):
    """Inverse of the log compression: e^y for y >= 0, -e^{-y} for y < 0."""
    yhat = np.asarray(yhat, dtype=float)
    out = np.where(yhat >= 0.0, 1.0, -1.0) * np.exp(np.abs(yhat))
    return out if out.ndim else float(out)
