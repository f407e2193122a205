"""Second-order (METANET-style) freeway model with one metered on-ramp.

Units
-----
Internal arithmetic follows the METANET convention:

* time in hours (``T``, ``tau``, ``t_s``)
* length in km, densities in veh/km/lane, speeds in km/h
* flows in veh/h summed over all lanes, queues in vehicles

Configuration files are written in seconds; :func:`hours` converts.

The mainline is a chain of segments. Upstream demand enters through an
origin queue that behaves like the on-ramp queue (unmetered, r = 1); the
downstream end is a ghost segment whose density only enters the
anticipation term (free outflow, ``min(rho_last, rho_c)``, unless set).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

SECONDS_PER_HOUR = 3600.0
RATIO_EPS = 1e-9


def hours(seconds: float) -> float:
    return seconds / SECONDS_PER_HOUR


class SimulationInstability(RuntimeError):
    """Raised when a density leaves [0, rho_max] by more than the tolerance."""


@dataclass(frozen=True)
class FundamentalDiagram:
    """May's equilibrium speed law ``V(rho) = v_f exp(-(rho/rho_c)^a / a)``."""

    v_f: float = 110.0
    rho_c: float = 30.0
    a: float = 2.0

    def __post_init__(self) -> None:
        if not (self.v_f > 0 and self.rho_c > 0 and self.a > 0):
            raise ValueError(f"diagram parameters must be positive, got {self}")

    @property
    def K(self) -> float:
        return 1.0 / (self.a * self.rho_c**self.a)

    def speed(self, rho):
        return equilibrium_speed(self, rho)

    def flow(self, rho, lanes: int = 1):
        return lanes * np.asarray(rho) * equilibrium_speed(self, rho)

    def capacity(self, lanes: int = 1) -> float:
        """Maximum of lanes * rho * V(rho), reached at rho = rho_c."""
        return lanes * self.rho_c * self.v_f * math.exp(-1.0 / self.a)


@dataclass(frozen=True)
class SegmentParams:
    length: float = 0.5  # km
    lanes: int = 2
    tau: float = hours(18.0)  # h
    nu_anticip: float = 60.0  # km^2/h
    kappa: float = 40.0  # veh/km/lane
    rho_max: float = 180.0  # veh/km/lane

    def __post_init__(self) -> None:
        for name in ("length", "lanes", "tau", "nu_anticip", "kappa", "rho_max"):
            if not getattr(self, name) > 0:
                raise ValueError(f"segment {name} must be positive")


@dataclass(frozen=True)
class RampParams:
    q_sat: float = 1800.0  # veh/h
    r_min: float = 0.0
    r_max: float = 1.0
    t_s: float = hours(20.0)  # h

    def __post_init__(self) -> None:
        if not 0.0 <= self.r_min < self.r_max <= 1.0:
            raise ValueError("need 0 <= r_min < r_max <= 1")
        if self.q_sat <= 0 or self.t_s <= 0:
            raise ValueError("q_sat and t_s must be positive")


@dataclass(frozen=True)
class BoundaryInput:
    upstream_demand: float = 0.0  # veh/h
    ramp_demand: float = 0.0  # veh/h
    # None means free outflow: ghost density min(rho_last, rho_c)
    downstream_density: Optional[float] = None

    def __post_init__(self) -> None:
        if self.upstream_demand < 0 or self.ramp_demand < 0:
            raise ValueError("demands must be non-negative")
        if self.downstream_density is not None and self.downstream_density < 0:
            raise ValueError("downstream density must be non-negative")


@dataclass(frozen=True)
class FreewayState:
    rho: np.ndarray
    v: np.ndarray
    w: float = 0.0  # on-ramp queue (veh)
    w_origin: float = 0.0  # upstream demand queue (veh)
    t: float = 0.0  # h

    def __post_init__(self) -> None:
        object.__setattr__(self, "rho", np.asarray(self.rho, dtype=float))
        object.__setattr__(self, "v", np.asarray(self.v, dtype=float))
        if self.rho.shape != self.v.shape or self.rho.ndim != 1:
            raise ValueError("rho and v must be 1-D arrays of equal length")

    def vehicles(self, road: "Freeway") -> float:
        """Mainline vehicles plus both queues."""
        return float(np.dot(self.rho, road._capacity_weights)) + self.w + self.w_origin


@dataclass(frozen=True)
class Freeway:
    """Static description of the simulated stretch."""

    segments: Sequence[SegmentParams]
    fd: FundamentalDiagram = field(default_factory=FundamentalDiagram)
    ramp: RampParams = field(default_factory=RampParams)
    merge_index: int = 3
    ramp_supply_formula: str = "metanet"
    instability_tol: float = 1e-6

    def __post_init__(self) -> None:
        segs = tuple(self.segments)
        if not segs:
            raise ValueError("at least one segment is required")
        object.__setattr__(self, "segments", segs)
        if not 0 <= self.merge_index < len(segs):
            raise ValueError(f"merge_index {self.merge_index} out of range")
        if self.ramp_supply_formula not in ("literal", "metanet"):
            raise ValueError("ramp_supply_formula must be 'literal' or 'metanet'")
        for s in segs:
            if s.rho_max <= self.fd.rho_c:
                raise ValueError("rho_max must exceed the critical density")
        # per-segment arrays used on every step
        for name, attr in (
            ("_length", "length"), ("_lanes", "lanes"), ("_tau", "tau"),
            ("_nu", "nu_anticip"), ("_kappa", "kappa"), ("_rho_max", "rho_max"),
        ):
            arr = np.array([getattr(s, attr) for s in segs], dtype=float)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        object.__setattr__(self, "_capacity_weights", self._length * self._lanes)
        object.__setattr__(
            self,
            "_params",
            tuple((s.length, float(s.lanes), s.tau, s.nu_anticip, s.kappa, s.rho_max) for s in segs),
        )

    @classmethod
    def uniform(cls, n: int = 6, seg: SegmentParams | None = None, **kw) -> "Freeway":
        return cls(segments=[seg or SegmentParams()] * n, **kw)

    @property
    def n(self) -> int:
        return len(self.segments)

    @property
    def length(self) -> np.ndarray:
        return self._length

    @property
    def lanes(self) -> np.ndarray:
        return self._lanes

    def equilibrium_state(self, rho: float, w: float = 0.0) -> FreewayState:
        rho_arr = np.full(self.n, float(rho))
        return FreewayState(rho=rho_arr, v=equilibrium_speed(self.fd, rho_arr), w=w)


def equilibrium_speed(fd: FundamentalDiagram, rho):
    """May's fundamental diagram; accepts scalars or arrays."""
    r = np.asarray(rho, dtype=float)
    if np.any(r < 0):
        raise ValueError("density must be non-negative")
    out = fd.v_f * np.exp(-((r / fd.rho_c) ** fd.a) / fd.a)
    return float(out) if out.ndim == 0 else out


def supply_ratio(rho_s: float, rho_c: float, rho_max: float, formula: str = "metanet") -> float:
    """Density-dependent fraction of the ramp capacity, clamped to [0, 1].

    ``metanet``: (rho_max - rho_s) / (rho_max - rho_c)
    ``literal``: (rho_max - rho_s) / (rho_s - rho_c), guarded near rho_s = rho_c
    """
    if formula == "metanet":
        ratio = (rho_max - rho_s) / (rho_max - rho_c)
    elif formula == "literal":
        denom = rho_s - rho_c
        if abs(denom) < RATIO_EPS:
            return 1.0
        ratio = (rho_max - rho_s) / denom
        # below critical the literal expression is negative although supply is ample
        if denom < 0:
            return 1.0
    else:
        raise ValueError(f"unknown ramp supply formula {formula!r}")
    return min(1.0, max(0.0, ratio))


def ramp_flow(
    r: float,
    inp: BoundaryInput,
    state: FreewayState,
    ramp: RampParams,
    fd: FundamentalDiagram,
    seg: SegmentParams,
    merge_index: int = 3,
    formula: str = "metanet",
) -> float:
    """Admitted on-ramp flow ``q_r = r * min(d + w/T_s, Q_sat * min(r, ratio))``."""
    if not ramp.r_min - 1e-12 <= r <= ramp.r_max + 1e-12:
        raise ValueError(f"control {r} outside [{ramp.r_min}, {ramp.r_max}]")
    rho_s = float(state.rho[merge_index])
    available = inp.ramp_demand + state.w / ramp.t_s
    ratio = supply_ratio(rho_s, fd.rho_c, seg.rho_max, formula)
    q_hat = min(available, ramp.q_sat * min(r, ratio))
    return max(0.0, r * q_hat)


def queue_step(w: float, d: float, q_r: float, T: float) -> float:
    if w < 0 or T <= 0:
        raise ValueError("need w >= 0 and T > 0")
    return max(0.0, w + T * (d - q_r))


@dataclass(frozen=True)
class StepReport:
    """Flows over one step and the bookkeeping needed for the vehicle balance."""

    state: FreewayState
    inflow: float  # veh/h entering segment 0 from the origin queue
    outflow: float  # veh/h leaving the last segment
    q_r: float  # veh/h admitted from the ramp
    flows: np.ndarray  # veh/h leaving each segment
    clamped_vehicles: float = 0.0  # vehicles added (+) or removed (-) by clamping
    density_clamps: int = 0
    speed_clamps: int = 0


def advance(
    state: FreewayState, inp: BoundaryInput, r: float, road: Freeway, T: float
) -> StepReport:
    """One explicit-Euler METANET step of length ``T`` hours."""
    if T <= 0 or T > road.ramp.t_s + 1e-12:
        raise ValueError("step length must satisfy 0 < T <= t_s")
    fd = road.fd
    m = road.merge_index
    n = road.n
    # plain floats: for a handful of segments this beats small-array numpy
    rho = state.rho.tolist()
    v = state.v.tolist()
    params = road._params
    v_f, rho_c, a = fd.v_f, fd.rho_c, fd.a

    q = [params[i][1] * rho[i] * v[i] for i in range(n)]

    # origin: an unmetered queue feeding segment 0 within its supply
    origin_cap = fd.capacity(road.segments[0].lanes)
    ratio0 = supply_ratio(rho[0], rho_c, params[0][5], "metanet")
    q_in = min(inp.upstream_demand + state.w_origin / T, origin_cap * ratio0)

    q_r = ramp_flow(r, inp, state, road.ramp, fd, road.segments[m], m, road.ramp_supply_formula)
    # never drain more than is stored plus what arrives within this step
    q_r = min(q_r, inp.ramp_demand + state.w / T)

    if inp.downstream_density is None:
        ghost = min(rho[-1], rho_c)
    else:
        ghost = inp.downstream_density

    rho_new = [0.0] * n
    v_new = [0.0] * n
    clamped_vehicles = 0.0
    density_clamps = speed_clamps = 0
    tol = road.instability_tol
    for i in range(n):
        L, lam, tau, nu, kappa, rho_max = params[i]
        r_i, v_i = rho[i], v[i]
        inflow = (q_in if i == 0 else q[i - 1]) + (q_r if i == m else 0.0)
        rn = r_i + (T / (L * lam)) * (inflow - q[i])
        v_up = v[i - 1] if i > 0 else v_i
        r_down = rho[i + 1] if i < n - 1 else ghost
        ve = v_f * math.exp(-((r_i / rho_c) ** a) / a)
        vn = (
            v_i
            + (T / tau) * (ve - v_i)
            + (T / L) * v_i * (v_up - v_i)
            - (nu * T / (tau * L)) * (r_down - r_i) / (r_i + kappa)
        )
        if rn > rho_max + tol * rho_max or rn < -tol * rho_max:
            raise SimulationInstability(
                f"density left [0, rho_max] at t={state.t + T:.6f} h in segment {i}: {rn}; "
                "reduce the step length"
            )
        rc = min(max(rn, 0.0), rho_max)
        if rc != rn:
            density_clamps += 1
            clamped_vehicles += (rc - rn) * L * lam
        vc = min(max(vn, 0.0), v_f)
        if vc != vn:
            speed_clamps += 1
        rho_new[i] = rc
        v_new[i] = vc

    w_new = queue_step(state.w, inp.ramp_demand, q_r, T)
    w_origin_new = queue_step(state.w_origin, inp.upstream_demand, q_in, T)

    new_state = FreewayState(
        rho=np.array(rho_new), v=np.array(v_new), w=w_new, w_origin=w_origin_new, t=state.t + T
    )
    return StepReport(
        state=new_state,
        inflow=q_in,
        outflow=q[-1],
        q_r=q_r,
        flows=np.array(q),
        clamped_vehicles=clamped_vehicles,
        density_clamps=density_clamps,
        speed_clamps=speed_clamps,
    )


def step(state: FreewayState, inp: BoundaryInput, r: float, road: Freeway, T: float) -> FreewayState:
    return advance(state, inp, r, road, T).state

