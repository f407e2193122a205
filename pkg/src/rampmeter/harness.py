"""Closed-loop experiments: scenarios, controller runs, metrics and synthetic data."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Iterable, NamedTuple, Optional, Sequence

import numpy as np

from . import mfc
from .traffic_model import (
    BoundaryInput,
    Freeway,
    FreewayState,
    FundamentalDiagram,
    RampParams,
    SegmentParams,
    advance,
    equilibrium_speed,
    hours,
)

CONTROLLERS = ("ipi", "ip", "alinea", "none")


@dataclass(frozen=True)
class Profile:
    """Piecewise-linear demand (veh/h) over breakpoints in hours, held at the ends."""

    times: tuple[float, ...]
    values: tuple[float, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "times", tuple(float(x) for x in self.times))
        object.__setattr__(self, "values", tuple(float(x) for x in self.values))
        if len(self.times) != len(self.values) or not self.times:
            raise ValueError("profile needs matching, non-empty times and values")
        if any(b <= a for a, b in zip(self.times, self.times[1:])):
            raise ValueError("profile times must increase")
        if any(v < 0 for v in self.values):
            raise ValueError("demand values must be non-negative")
        object.__setattr__(self, "_xp", np.array(self.times))
        object.__setattr__(self, "_fp", np.array(self.values))

    @classmethod
    def constant(cls, value: float) -> "Profile":
        return cls((0.0,), (value,))

    @classmethod
    def trapezoid(cls, base: float, peak: float, rise: float, hold_start: float, hold_end: float, fall: float) -> "Profile":
        return cls((0.0, rise, hold_start, hold_end, fall), (base, base, peak, peak, base))

    def __call__(self, t: float) -> float:
        return float(np.interp(t, self._xp, self._fp))


@dataclass(frozen=True)
class ControllerConfig:
    kind: str = "ipi"
    alpha: Optional[float] = None  # default: q_sat / (L * lanes) of the merge segment
    kp: float = 20.0
    ki: float = 100.0
    reference: mfc.ReferenceConfig = field(default_factory=lambda: mfc.ReferenceConfig(rho_d0=27.0))
    fixed_reference: Optional[float] = None
    derivative_mode: str = "difference"
    derivative_ema: float = 1.0
    derivative_window: float = 300.0  # s
    f_window: float = 300.0  # s
    alinea_gain: float = 70.0  # veh/h per veh/km/lane
    alinea_target: Optional[float] = None  # default: reference.high

    def __post_init__(self) -> None:
        if self.kind not in CONTROLLERS:
            raise ValueError(f"controller must be one of {CONTROLLERS}, got {self.kind!r}")


@dataclass(frozen=True)
class NoiseModel:
    speed_sigma: float = 0.0  # multiplicative
    density_sigma: float = 0.0  # additive, veh/km/lane
    seed: int = 0


def default_freeway() -> Freeway:
    return Freeway.uniform(
        6,
        SegmentParams(length=0.5, lanes=2),
        fd=FundamentalDiagram(v_f=110.0, rho_c=33.5, a=2.0),
        ramp=RampParams(q_sat=1800.0, r_min=0.0, r_max=1.0, t_s=hours(20.0)),
        merge_index=3,
    )


@dataclass(frozen=True)
class Scenario:
    road: Freeway = field(default_factory=default_freeway)
    upstream: Profile = field(
        default_factory=lambda: Profile.trapezoid(2500.0, 4200.0, 0.75, 1.25, 2.25, 2.75)
    )
    ramp_demand: Profile = field(
        default_factory=lambda: Profile.trapezoid(300.0, 900.0, 0.75, 1.25, 2.25, 2.75)
    )
    downstream_density: Optional[float] = None
    duration: float = 4.0  # h
    dt: float = hours(10.0)  # h
    controller: ControllerConfig = field(default_factory=ControllerConfig)
    noise: NoiseModel = field(default_factory=NoiseModel)
    initial: Optional[FreewayState] = None  # default: equilibrium at the initial upstream demand
    name: str = "surge"

    def __post_init__(self) -> None:
        if self.duration <= 0 or self.dt <= 0:
            raise ValueError("duration and dt must be positive")
        ratio = self.road.ramp.t_s / self.dt
        if abs(ratio - round(ratio)) > 1e-9 or round(ratio) < 1:
            raise ValueError("control period must be an integer multiple of the step")

    @property
    def steps(self) -> int:
        return int(round(self.duration / self.dt))

    @property
    def control_every(self) -> int:
        return int(round(self.road.ramp.t_s / self.dt))

    def with_controller(self, kind: str, **kw) -> "Scenario":
        return replace(self, controller=replace(self.controller, kind=kind, **kw))


def free_flow_density(fd: FundamentalDiagram, flow: float, lanes: int) -> float:
    """Density on the uncongested branch carrying ``flow`` (capped at rho_c)."""
    if flow <= 0:
        return 0.0
    if flow >= fd.capacity(lanes):
        return fd.rho_c
    lo, hi = 0.0, fd.rho_c
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if lanes * mid * equilibrium_speed(fd, mid) < flow:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def initial_state(sc: Scenario) -> FreewayState:
    if sc.initial is not None:
        return sc.initial
    road = sc.road
    q0 = sc.upstream(0.0)
    rho = np.array(
        [
            free_flow_density(road.fd, q0 + (sc.ramp_demand(0.0) if i >= road.merge_index else 0.0), s.lanes)
            for i, s in enumerate(road.segments)
        ]
    )
    return FreewayState(rho=rho, v=equilibrium_speed(road.fd, rho))


def alinea_control(r_prev: float, rho_target: float, rho_measured: float, k_r: float, ramp: RampParams) -> float:
    """``r(k) = r(k-1) + k_r (rho_target - rho_measured)`` clamped to the ramp bounds.

    The clamp acts on the state itself, so saturation never winds up.
    """
    return mfc.clamp_control(r_prev + k_r * (rho_target - rho_measured), ramp)


@dataclass
class RunMetrics:
    tts: float  # veh.h, mainline plus queues
    peak_density: float
    peak_metered_density: float
    time_above_critical: float  # h with any segment above rho_c
    max_queue: float  # veh, on-ramp
    max_origin_queue: float
    min_speed: float
    r_min: float
    r_max: float
    r_mean: float
    max_balance_error: float  # relative per-step vehicle balance residual
    cumulative_drift: float  # relative to total throughput
    density_clamps: int
    steps: int

    def to_text(self) -> str:
        return "".join(f"{k}={_fmt(v)}\n" for k, v in self.__dict__.items())


def _fmt(v) -> str:
    return repr(float(v)) if isinstance(v, float) else str(v)


COLUMNS_STATIC = ("t", "w", "w_origin", "q_in", "q_r", "q_out", "d_up", "d_ramp", "r", "r_raw", "rho_star", "e", "f_est", "f_integral")


@dataclass
class Trajectory:
    """Per-step records: the state at the start of each step and the step's flows."""

    t: np.ndarray
    rho: np.ndarray  # (steps, segments)
    v: np.ndarray
    w: np.ndarray
    w_origin: np.ndarray
    q_in: np.ndarray
    q_r: np.ndarray
    q_out: np.ndarray
    d_up: np.ndarray
    d_ramp: np.ndarray
    r: np.ndarray
    r_raw: np.ndarray
    rho_star: np.ndarray
    e: np.ndarray
    f_est: np.ndarray
    f_integral: np.ndarray
    dt: float
    length: np.ndarray
    lanes: np.ndarray
    rho_c: float
    merge_index: int
    balance: np.ndarray  # per-step absolute residual (veh)
    vehicles_before: np.ndarray
    density_clamps: int = 0

    def header(self) -> list[str]:
        n = self.rho.shape[1]
        return (
            ["t"]
            + [f"rho_{i}" for i in range(n)]
            + [f"v_{i}" for i in range(n)]
            + list(COLUMNS_STATIC[1:])
        )

    def rows(self) -> Iterable[list[float]]:
        cols = [getattr(self, c) for c in COLUMNS_STATIC[1:]]
        for k in range(len(self.t)):
            yield [self.t[k], *self.rho[k], *self.v[k], *(c[k] for c in cols)]

    def concat(self, other: "Trajectory") -> "Trajectory":
        arrays = {}
        for name in (
            "t", "rho", "v", "w", "w_origin", "q_in", "q_r", "q_out", "d_up", "d_ramp", "r",
            "r_raw", "rho_star", "e", "f_est", "f_integral", "balance", "vehicles_before",
        ):
            arrays[name] = np.concatenate([getattr(self, name), getattr(other, name)])
        return replace(self, **arrays, density_clamps=self.density_clamps + other.density_clamps)


def compute_metrics(tr: Trajectory) -> RunMetrics:
    T = tr.dt
    if len(tr.t) == 0:
        nan = float("nan")
        return RunMetrics(0.0, 0.0, 0.0, 0.0, 0.0, 0.0, nan, nan, nan, nan, 0.0, 0.0, 0, 0)
    mainline = tr.rho @ (tr.length * tr.lanes)
    tts = float(T * np.sum(mainline + tr.w + tr.w_origin))
    above = np.any(tr.rho > tr.rho_c, axis=1)
    throughput = float(T * np.sum(tr.q_in + tr.q_r)) + float(tr.vehicles_before[0])
    drift = float(abs(np.sum(tr.balance)))
    return RunMetrics(
        tts=tts,
        peak_density=float(tr.rho.max()),
        peak_metered_density=float(tr.rho[:, tr.merge_index].max()),
        time_above_critical=float(T * np.count_nonzero(above)),
        max_queue=float(tr.w.max()),
        max_origin_queue=float(tr.w_origin.max()),
        min_speed=float(tr.v.min()),
        r_min=float(tr.r.min()),
        r_max=float(tr.r.max()),
        r_mean=float(tr.r.mean()),
        max_balance_error=float(np.max(np.abs(tr.balance) / np.maximum(tr.vehicles_before, 1.0))),
        cumulative_drift=drift / max(throughput, 1.0),
        density_clamps=int(tr.density_clamps),
        steps=len(tr.t),
    )


class RunResult(NamedTuple):
    trajectory: Trajectory
    metrics: RunMetrics
    controls: list


def build_controller(sc: Scenario) -> Optional[mfc.IpiController]:
    cc = sc.controller
    if cc.kind not in ("ipi", "ip"):
        return None
    road = sc.road
    seg = road.segments[road.merge_index]
    alpha = cc.alpha if cc.alpha is not None else road.ramp.q_sat / (seg.length * seg.lanes)
    period_s = road.ramp.t_s * 3600.0
    return mfc.IpiController(
        model=mfc.UltraLocalModel(alpha=alpha),
        gains=mfc.IpiGains(kp=cc.kp, ki=0.0 if cc.kind == "ip" else cc.ki),
        ramp=road.ramp,
        reference=cc.reference,
        derivative=mfc.OutputDerivative(period_s, cc.derivative_mode, cc.derivative_ema, cc.derivative_window),
        f_window=mfc.FWindow(cc.f_window, period_s),
        fixed_reference=cc.fixed_reference,
        r_prev=road.ramp.r_max,
    )


def run(sc: Scenario) -> RunResult:
    """Simulate the scenario under its controller; deterministic for a given seed."""
    road = sc.road
    K = sc.steps
    n = road.n
    m = road.merge_index
    cc = sc.controller
    rng = np.random.default_rng(sc.noise.seed)
    ctrl = build_controller(sc)
    k_r = cc.alinea_gain / road.ramp.q_sat
    alinea_target = cc.alinea_target if cc.alinea_target is not None else cc.reference.high

    out = {name: np.zeros(K) for name in COLUMNS_STATIC}
    rho_tr = np.zeros((K, n))
    v_tr = np.zeros((K, n))
    balance = np.zeros(K)
    before = np.zeros(K)
    clamps = 0

    state = initial_state(sc)
    r = road.ramp.r_max
    r_raw = r
    rec = None
    controls = []
    for k in range(K):
        t = k * sc.dt
        inp = BoundaryInput(sc.upstream(t), sc.ramp_demand(t), sc.downstream_density)
        if k % sc.control_every == 0:
            # measurement noise is drawn every control period so seeds align across controllers
            z_v, z_rho = rng.standard_normal(2)
            rho_meas = float(state.rho[m]) + sc.noise.density_sigma * z_rho
            v_meas = float(state.v[m]) * (1.0 + sc.noise.speed_sigma * z_v)
            if ctrl is not None:
                rec = ctrl.step(t, rho_meas, v_meas)
                controls.append(rec)
                r, r_raw = rec.r, rec.r_raw
            elif cc.kind == "alinea":
                r = alinea_control(r, alinea_target, rho_meas, k_r, road.ramp)
                r_raw = r
        rep = advance(state, inp, r, road, sc.dt)

        rho_tr[k] = state.rho
        v_tr[k] = state.v
        out["t"][k] = t
        out["w"][k] = state.w
        out["w_origin"][k] = state.w_origin
        out["q_in"][k] = rep.inflow
        out["q_r"][k] = rep.q_r
        out["q_out"][k] = rep.outflow
        out["d_up"][k] = inp.upstream_demand
        out["d_ramp"][k] = inp.ramp_demand
        out["r"][k] = r
        out["r_raw"][k] = r_raw
        if rec is not None:
            out["rho_star"][k] = rec.rho_star
            out["e"][k] = rec.e
            out["f_est"][k] = rec.f_est
            out["f_integral"][k] = rec.f_integral
        else:
            for name in ("rho_star", "e", "f_est", "f_integral"):
                out[name][k] = math.nan
        vb = vehicles if k else state.vehicles(road)
        va = vehicles = rep.state.vehicles(road)
        before[k] = vb
        balance[k] = (va - vb) - (
            sc.dt * (inp.upstream_demand + inp.ramp_demand - rep.outflow) + rep.clamped_vehicles
        )
        clamps += rep.density_clamps
        state = rep.state

    tr = Trajectory(
        rho=rho_tr, v=v_tr, dt=sc.dt, length=road.length, lanes=road.lanes, rho_c=road.fd.rho_c,
        merge_index=m, balance=balance, vehicles_before=before, density_clamps=clamps, **out,
    )
    return RunResult(tr, compute_metrics(tr), controls)


def alinea_grid(sc: Scenario, gains: Sequence[float] = (20.0, 40.0, 70.0)) -> dict[float, RunMetrics]:
    return {g: run(sc.with_controller("alinea", alinea_gain=g)).metrics for g in gains}


def closed_loop_ultra_local(
    F,
    alpha: float,
    kp: float,
    ki: float,
    rho_star: float,
    rho0: float,
    duration: float,
    period: float,
    substeps: int = 20,
    exact_f: bool = True,
) -> tuple[np.ndarray, np.ndarray]:
    """Drive the plant ``y' = F(t) + alpha u`` with an unclamped iPI loop.

    Times are in hours.  With ``exact_f`` the controller receives F(t_k);
    otherwise it estimates F from a backward difference of y.  Returns the
    control-instant times and tracking errors.
    """
    ramp = RampParams(q_sat=1.0, r_min=0.0, r_max=1.0, t_s=period)
    ctrl = mfc.IpiController(
        model=mfc.UltraLocalModel(alpha=alpha),
        gains=mfc.IpiGains(kp=kp, ki=ki),
        ramp=ramp,
        fixed_reference=rho_star,
        r_prev=0.0,
    )
    n = int(round(duration / period))
    h = period / substeps
    y = rho0
    ts, es = np.zeros(n + 1), np.zeros(n + 1)
    for k in range(n + 1):
        t = k * period
        f_k = F(t) if exact_f else None
        # no saturation in this loop: use the raw law directly
        e = y - rho_star
        if f_k is not None:
            ctrl.model.f_est = f_k
        else:
            rd = ctrl.derivative.push(y)
            if rd is not None:
                ctrl.model.f_est = mfc.estimate_f_from_derivative(rd, alpha, ctrl.r_prev)
        ctrl.gains.integral_state += e * period
        u = mfc.ipi_control(ctrl.model, 0.0, e, ctrl.gains)
        ctrl.r_prev = u
        ts[k], es[k] = t, e
        for j in range(substeps):
            tj = t + j * h
            # midpoint rule for the known F(t)
            y += h * (F(tj + 0.5 * h) + alpha * u)
    return ts, es


def synthetic_detector_stream(
    fd: FundamentalDiagram,
    duration: float,
    period: float = 20.0,
    mean: float = 20.0,
    amplitude: float = 10.0,
    cycle: float = 3600.0,
    speed_noise: float = 0.0,
    density_noise: float = 0.0,
    seed: int = 0,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Sinusoidal density excitation pushed through the equilibrium diagram.

    Times in seconds. Speed noise is multiplicative, density noise additive.
    """
    rng = np.random.default_rng(seed)
    t = np.arange(0.0, duration, period)
    rho = mean + amplitude * np.sin(2.0 * np.pi * t / cycle)
    v = equilibrium_speed(fd, rho)
    if speed_noise:
        v = v * (1.0 + speed_noise * rng.standard_normal(len(t)))
    if density_noise:
        rho = rho + density_noise * rng.standard_normal(len(t))
    return t, rho, v
