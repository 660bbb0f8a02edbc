"""Static network model, case file parsing, and stochastic operating-state sampling.

The shipped case is a modified New England 39-bus system: 10 synchronous
machines (the unit at bus 31 balances the system and is not adjustable),
two photovoltaic units at buses 37 and 38, and 34 AC lines of which all
but line 22 may carry a simulated fault (removing line 22 would split the
network).  All impedances are per-unit on a 100 MVA base; powers in the
case file and in ``OperatingState`` are MW / MVAr.
"""

from __future__ import annotations

import importlib.resources
from dataclasses import dataclass, replace

import numpy as np

BASE_MVA = 100.0

__all__ = [
    "BusRecord", "GeneratorRecord", "PvRecord", "BranchRecord", "NetworkCase",
    "Contingency", "OperatingState", "ScenarioDistribution",
    "CaseParseError", "CaseValidationError",
    "load_case", "shipped_case_path", "sample_base_state", "sample_scenario",
    "apply_redispatch",
]


class CaseParseError(ValueError):
    """Raised when a case file cannot be parsed."""


class CaseValidationError(ValueError):
    """Raised when parsed case data breaks a structural invariant."""


@dataclass(frozen=True)
class BusRecord:
    id: int
    kind: str                 # "slack" | "pv" | "pq"
    v_setpoint: float         # per-unit, meaningful for slack/pv buses
    p_load: float             # MW
    q_load: float             # MVAr
    v_min: float
    v_max: float


@dataclass(frozen=True)
class GeneratorRecord:
    bus: int
    p_out: float              # MW
    p_min: float
    p_max: float
    h: float                  # inertia constant, s (100 MVA base)
    xdp: float                # transient reactance, per-unit
    d: float                  # damping coefficient (pu power per rad/s)
    cost: float               # $/MW redispatch cost
    adjustable: bool


@dataclass(frozen=True)
class PvRecord:
    bus: int
    p_mean: float             # MW
    sigma: float              # MW
    p_cap: float              # MW


@dataclass(frozen=True)
class BranchRecord:
    id: int
    from_bus: int
    to_bus: int
    r: float
    x: float
    b: float                  # total line charging, per-unit
    faultable: bool


@dataclass(frozen=True)
class Contingency:
    branch_id: int
    location: float = 0.5     # fraction along the line
    t_clear: float = 0.1      # seconds


@dataclass(frozen=True)
class NetworkCase:
    buses: tuple[BusRecord, ...]
    branches: tuple[BranchRecord, ...]
    generators: tuple[GeneratorRecord, ...]
    pv_units: tuple[PvRecord, ...]
    base_mva: float = BASE_MVA

    def __post_init__(self):
        object.__setattr__(self, "_bus_index",
                           {b.id: i for i, b in enumerate(self.buses)})

    @property
    def n_bus(self) -> int:
        return len(self.buses)

    @property
    def n_gen(self) -> int:
        return len(self.generators)

    def bus_index(self, bus_id: int) -> int:
        return self._bus_index[bus_id]

    @property
    def slack_gen_index(self) -> int:
        slack_bus = next(b.id for b in self.buses if b.kind == "slack")
        return next(i for i, g in enumerate(self.generators) if g.bus == slack_bus)

    @property
    def adjustable_indices(self) -> tuple[int, ...]:
        return tuple(i for i, g in enumerate(self.generators) if g.adjustable)

    @property
    def faultable_branch_ids(self) -> tuple[int, ...]:
        return tuple(br.id for br in self.branches if br.faultable)

    def branch_by_id(self, branch_id: int) -> BranchRecord:
        for br in self.branches:
            if br.id == branch_id:
                return br
        raise KeyError(f"no branch with id {branch_id}")

    def contingency(self, branch_id: int) -> Contingency:
        br = self.branch_by_id(branch_id)
        if not br.faultable:
            raise CaseValidationError(f"branch {branch_id} is not faultable")
        return Contingency(branch_id=branch_id)


def _frozen(a) -> np.ndarray:
    arr = np.asarray(a, dtype=float).copy()
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class OperatingState:
    """One deterministic injection profile.  Arrays are read-only after construction.

    gen_p / gen_v follow the case generator order, load_p / load_q the bus
    order, pv_p the photovoltaic-unit order.
    """
    gen_p: np.ndarray         # MW per generator
    gen_v: np.ndarray         # per-unit per generator bus
    load_p: np.ndarray        # MW per bus
    load_q: np.ndarray        # MVAr per bus
    pv_p: np.ndarray          # MW per photovoltaic unit

    def __post_init__(self):
        for name in ("gen_p", "gen_v", "load_p", "load_q", "pv_p"):
            object.__setattr__(self, name, _frozen(getattr(self, name)))
        for name in ("gen_p", "gen_v", "load_p", "load_q", "pv_p"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise ValueError(f"non-finite values in {name}")


@dataclass(frozen=True)
class ScenarioDistribution:
    """An uncertain operating scenario: base state plus m Monte-Carlo realizations.

    Sample order is stable: sample k of a successor scenario descends from
    sample k of this one.
    """
    base: OperatingState
    contingency: Contingency
    samples: tuple[OperatingState, ...]

    @property
    def m(self) -> int:
        return len(self.samples)


# ---------------------------------------------------------------------------
# case file parsing

_SECTIONS = ("bus", "branch", "generator", "pv")


def _parse_kind(token: str, ctx: str) -> str:
    if token not in ("slack", "pv", "pq"):
        raise CaseParseError(f"{ctx}: unknown bus kind {token!r}")
    return token


def load_case(path) -> NetworkCase:
    """Parse and validate a sectioned case file.

    Raises CaseParseError on malformed input and CaseValidationError when a
    structural invariant is broken; both name the offending record.
    """
    sections: dict[str, list[list[str]]] = {s: [] for s in _SECTIONS}
    current = None
    with open(path) as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if line.startswith("[") and line.endswith("]"):
                name = line[1:-1].strip().lower()
                if name not in _SECTIONS:
                    raise CaseParseError(f"line {lineno}: unknown section [{name}]")
                current = name
                continue
            if current is None:
                raise CaseParseError(f"line {lineno}: data before any section header")
            sections[current].append(line.split())

    def _num(tok, lineno_ctx):
        try:
            return float(tok)
        except ValueError:
            raise CaseParseError(f"{lineno_ctx}: bad number {tok!r}") from None

    buses = []
    for row in sections["bus"]:
        ctx = f"bus record {row[0] if row else '?'}"
        if len(row) != 7:
            raise CaseParseError(f"{ctx}: expected 7 fields, got {len(row)}")
        buses.append(BusRecord(
            id=int(row[0]), kind=_parse_kind(row[1], ctx),
            v_setpoint=_num(row[2], ctx), p_load=_num(row[3], ctx),
            q_load=_num(row[4], ctx), v_min=_num(row[5], ctx),
            v_max=_num(row[6], ctx)))

    branches = []
    for row in sections["branch"]:
        ctx = f"branch record {row[0] if row else '?'}"
        if len(row) != 7:
            raise CaseParseError(f"{ctx}: expected 7 fields, got {len(row)}")
        branches.append(BranchRecord(
            id=int(row[0]), from_bus=int(row[1]), to_bus=int(row[2]),
            r=_num(row[3], ctx), x=_num(row[4], ctx), b=_num(row[5], ctx),
            faultable=bool(int(row[6]))))

    gens = []
    for row in sections["generator"]:
        ctx = f"generator record at bus {row[0] if row else '?'}"
        if len(row) != 9:
            raise CaseParseError(f"{ctx}: expected 9 fields, got {len(row)}")
        gens.append(GeneratorRecord(
            bus=int(row[0]), p_out=_num(row[1], ctx), p_min=_num(row[2], ctx),
            p_max=_num(row[3], ctx), h=_num(row[4], ctx), xdp=_num(row[5], ctx),
            d=_num(row[6], ctx), cost=_num(row[7], ctx),
            adjustable=bool(int(row[8]))))

    pv_units = []
    for row in sections["pv"]:
        ctx = f"pv record at bus {row[0] if row else '?'}"
        if len(row) != 4:
            raise CaseParseError(f"{ctx}: expected 4 fields, got {len(row)}")
        pv_units.append(PvRecord(
            bus=int(row[0]), p_mean=_num(row[1], ctx), sigma=_num(row[2], ctx),
            p_cap=_num(row[3], ctx)))

    case = NetworkCase(buses=tuple(buses), branches=tuple(branches),
                       generators=tuple(gens), pv_units=tuple(pv_units))
    _validate(case)
    return case


def _validate(case: NetworkCase) -> None:
    ids = [b.id for b in case.buses]
    if len(set(ids)) != len(ids):
        raise CaseValidationError("duplicate bus ids")
    slacks = [b.id for b in case.buses if b.kind == "slack"]
    if len(slacks) != 1:
        raise CaseValidationError(f"expected exactly one slack bus, found {slacks}")
    for b in case.buses:
        if not b.v_min < b.v_max:
            raise CaseValidationError(f"bus {b.id}: v_min >= v_max")
        if not (np.isfinite(b.p_load) and np.isfinite(b.q_load)):
            raise CaseValidationError(f"bus {b.id}: non-finite load")
    bus_set = set(ids)
    branch_ids = [br.id for br in case.branches]
    if len(set(branch_ids)) != len(branch_ids):
        raise CaseValidationError("duplicate branch ids")
    for br in case.branches:
        if br.x == 0:
            raise CaseValidationError(f"branch {br.id}: zero reactance")
        if br.from_bus not in bus_set or br.to_bus not in bus_set:
            raise CaseValidationError(f"branch {br.id}: endpoint not a known bus")
    for g in case.generators:
        if g.bus not in bus_set:
            raise CaseValidationError(f"generator at bus {g.bus}: unknown bus")
        if not g.p_min <= g.p_out <= g.p_max:
            raise CaseValidationError(f"generator at bus {g.bus}: p_out outside limits")
        if g.h <= 0 or g.xdp <= 0:
            raise CaseValidationError(f"generator at bus {g.bus}: h and xdp must be positive")
    slack_bus = slacks[0]
    slack_gens = [g for g in case.generators if g.bus == slack_bus]
    if len(slack_gens) != 1:
        raise CaseValidationError("slack bus must host exactly one generator")
    if slack_gens[0].adjustable:
        raise CaseValidationError("slack generator must not be adjustable")
    for pv in case.pv_units:
        if pv.bus not in bus_set:
            raise CaseValidationError(f"pv unit at bus {pv.bus}: unknown bus")
        if not 0 <= pv.p_mean <= pv.p_cap:
            raise CaseValidationError(f"pv unit at bus {pv.bus}: p_mean outside [0, cap]")
        if pv.sigma < 0:
            raise CaseValidationError(f"pv unit at bus {pv.bus}: negative sigma")
    if not _connected(case):
        raise CaseValidationError("network graph is not connected")


def _connected(case: NetworkCase, removed_branch_id: int | None = None) -> bool:
    adj: dict[int, set[int]] = {b.id: set() for b in case.buses}
    for br in case.branches:
        if br.id == removed_branch_id:
            continue
        adj[br.from_bus].add(br.to_bus)
        adj[br.to_bus].add(br.from_bus)
    start = case.buses[0].id
    seen = {start}
    stack = [start]
    while stack:
        for nxt in adj[stack.pop()]:
            if nxt not in seen:
                seen.add(nxt)
                stack.append(nxt)
    return len(seen) == len(case.buses)


def shipped_case_path(standard: bool = False) -> str:
    """Path of the bundled case file (the modified 39-bus system by default)."""
    name = "case39_standard.txt" if standard else "case39.txt"
    return str(importlib.resources.files("redispatch.data") / name)


# ---------------------------------------------------------------------------
# stochastic state generation

def nominal_state(case: NetworkCase) -> OperatingState:
    """The case file's own dispatch as an OperatingState."""
    vset = {b.id: b.v_setpoint for b in case.buses}
    return OperatingState(
        gen_p=[g.p_out for g in case.generators],
        gen_v=[vset[g.bus] for g in case.generators],
        load_p=[b.p_load for b in case.buses],
        load_q=[b.q_load for b in case.buses],
        pv_p=[pv.p_mean for pv in case.pv_units])


def sample_base_state(case: NetworkCase, level: float, rng: np.random.Generator,
                      load_jitter: float = 0.10, v_jitter: float = 0.05,
                      loss_allowance: float = 0.03) -> OperatingState:
    """Draw a deterministic base state at a generation/load level in [0.8, 1.2].

    Loads and generator outputs are scaled by ``level`` and independently
    perturbed within +-load_jitter, generator voltage setpoints within
    +-v_jitter; conventional generation is then rescaled so that total
    generation meets total load plus a loss allowance (the slack absorbs
    the remaining mismatch at power-flow time).  Outputs are clamped into
    machine limits.
    """
    if not 0.8 <= level <= 1.2:
        raise ValueError(f"level {level} outside [0.8, 1.2]")
    nom = nominal_state(case)

    load_f = level * (1.0 + load_jitter * rng.uniform(-1.0, 1.0, size=case.n_bus))
    load_p = nom.load_p * load_f
    load_q = nom.load_q * load_f

    gen_f = level * (1.0 + load_jitter * rng.uniform(-1.0, 1.0, size=case.n_gen))
    gen_p = nom.gen_p * gen_f
    pv_f = level * (1.0 + load_jitter * rng.uniform(-1.0, 1.0, size=len(case.pv_units)))
    caps = np.array([pv.p_cap for pv in case.pv_units])
    pv_p = np.clip(nom.pv_p * pv_f, 0.0, caps)

    gen_v = nom.gen_v * (1.0 + v_jitter * rng.uniform(-1.0, 1.0, size=case.n_gen))

    target = (1.0 + loss_allowance) * load_p.sum() - pv_p.sum()
    total = gen_p.sum()
    if total > 0:
        gen_p = gen_p * (target / total)
    p_min = np.array([g.p_min for g in case.generators])
    p_max = np.array([g.p_max for g in case.generators])
    gen_p = np.clip(gen_p, p_min, p_max)

    return OperatingState(gen_p=gen_p, gen_v=gen_v, load_p=load_p,
                          load_q=load_q, pv_p=pv_p)


def sample_scenario(case: NetworkCase, base: OperatingState,
                    contingency: Contingency, m: int,
                    rng: np.random.Generator) -> ScenarioDistribution:
    """Draw m photovoltaic realizations around the base state.

    Each realization is a truncated-normal draw per unit (truncated to
    [0, p_cap]); the resulting power imbalance is spread over the adjustable
    generators in proportion to their base outputs, clamped to machine
    limits, with any clamp residue assigned to the slack machine.
    """
    if m < 1:
        raise ValueError("m must be >= 1")
    adj = list(case.adjustable_indices)
    slack = case.slack_gen_index
    p_min = np.array([g.p_min for g in case.generators])
    p_max = np.array([g.p_max for g in case.generators])
    caps = np.array([pv.p_cap for pv in case.pv_units])
    sigmas = np.array([pv.sigma for pv in case.pv_units])

    base_adj = base.gen_p[adj]
    share = base_adj / base_adj.sum() if base_adj.sum() > 0 else np.full(len(adj), 1.0 / len(adj))

    samples = []
    for _ in range(m):
        pv_p = _truncated_normal(base.pv_p, sigmas, 0.0, caps, rng)
        imbalance = pv_p.sum() - base.pv_p.sum()
        gen_p = base.gen_p.copy()
        desired = base_adj - share * imbalance
        clamped = np.clip(desired, p_min[adj], p_max[adj])
        gen_p[adj] = clamped
        residual = (desired - clamped).sum()
        gen_p[slack] = np.clip(gen_p[slack] + residual, p_min[slack], p_max[slack])
        samples.append(replace(base, gen_p=gen_p, pv_p=pv_p))
    return ScenarioDistribution(base=base, contingency=contingency,
                                samples=tuple(samples))


def _truncated_normal(mean, sigma, lo, hi, rng, max_tries: int = 64):
    """Per-component rejection sampling; falls back to clipping if a
    component's acceptance region is tiny."""
    mean = np.asarray(mean, dtype=float)
    out = mean + sigma * rng.standard_normal(mean.shape)
    bad = (out < lo) | (out > hi)
    tries = 0
    while bad.any() and tries < max_tries:
        redraw = mean + sigma * rng.standard_normal(mean.shape)
        out = np.where(bad, redraw, out)
        bad = (out < lo) | (out > hi)
        tries += 1
    return np.clip(out, lo, hi)


def apply_redispatch(case: NetworkCase, state: OperatingState,
                     action: np.ndarray) -> OperatingState:
    """Add an MW adjustment vector over the adjustable generators, clamped
    into machine limits.  The slack output is untouched; it absorbs the
    imbalance when the power flow is solved."""
    adj = list(case.adjustable_indices)
    action = np.asarray(action, dtype=float)
    if action.shape != (len(adj),):
        raise ValueError(f"action must have shape ({len(adj)},), got {action.shape}")
    p_min = np.array([g.p_min for g in case.generators])
    p_max = np.array([g.p_max for g in case.generators])
    gen_p = state.gen_p.copy()
    gen_p[adj] = np.clip(gen_p[adj] + action, p_min[adj], p_max[adj])
    return replace(state, gen_p=gen_p)
