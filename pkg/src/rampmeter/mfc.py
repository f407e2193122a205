"""Model-free control: ultra-local model, iP/iPI laws, F estimation, reference density.

Convention throughout: ``y' = F + alpha * u`` with ``y`` the metered-segment
density and ``u`` the metering rate ``r``.  Admitting vehicles raises the
density, so a physically consistent ``alpha`` is positive.  The tracking
error is ``e = y - y*``.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field
from typing import NamedTuple, Optional, Sequence

import numpy as np

from .algediff import DerivativeEstimator, DiffConfig
from .traffic_model import RampParams


@dataclass
class UltraLocalModel:
    alpha: float
    nu: int = 1
    f_est: float = 0.0

    def __post_init__(self) -> None:
        if self.alpha == 0 or not math.isfinite(self.alpha):
            raise ValueError("alpha must be finite and non-zero")
        if self.nu != 1:
            raise ValueError("only first-order ultra-local models are supported")


@dataclass
class IpiGains:
    kp: float = 20.0  # 1/h
    ki: float = 100.0  # 1/h^2
    integral_state: float = 0.0  # veh.h/km/lane

    def __post_init__(self) -> None:
        if not self.kp > 0 or self.ki < 0:
            raise ValueError("need kp > 0 and ki >= 0")


@dataclass(frozen=True)
class ReferenceConfig:
    v_threshold: float = 55.0  # km/h
    rho_d0: float = 28.0
    rho_inc: float = 4.0
    rho_dec: float = 6.0
    speed_filter_constant: float = 1.0 - math.exp(-20.0 / 60.0)  # 60 s EMA at a 20 s period

    def __post_init__(self) -> None:
        if self.rho_inc < 0 or self.rho_dec < 0:
            raise ValueError("rho_inc and rho_dec must be non-negative")
        if not 0 < self.speed_filter_constant <= 1:
            raise ValueError("speed_filter_constant must lie in (0, 1]")
        if self.rho_d0 - self.rho_dec < 0:
            raise ValueError("rho_d0 - rho_dec must be non-negative")

    @property
    def high(self) -> float:
        return self.rho_d0 + self.rho_inc

    @property
    def low(self) -> float:
        return self.rho_d0 - self.rho_dec


def estimate_f_from_derivative(rho_dot_est: float, alpha: float, r_prev: float) -> float:
    """[F]_e = [y']_e - alpha * u(k-1)."""
    return rho_dot_est - alpha * r_prev


def ipi_control(model: UltraLocalModel, rho_star_dot: float, e: float, gains: IpiGains) -> float:
    """Unclamped iPI output ``-(F_e - y*' + kp e + ki int e) / alpha``."""
    return -(model.f_est - rho_star_dot + gains.kp * e + gains.ki * gains.integral_state) / model.alpha


def ip_control(model: UltraLocalModel, rho_star_dot: float, e: float, kp: float) -> float:
    return -(model.f_est - rho_star_dot + kp * e) / model.alpha


def clamp_control(u: float, ramp: RampParams) -> float:
    return min(ramp.r_max, max(ramp.r_min, u))


def reference_update(
    cfg: ReferenceConfig,
    v_measured: float,
    rho_star_prev: float,
    v_filtered_prev: Optional[float] = None,
) -> tuple[float, float]:
    """Filter the measured speed, then pick the high or low desired density.

    A filtered speed exactly at the threshold keeps the previous reference.
    """
    if v_filtered_prev is None:
        v_f = float(v_measured)
    else:
        beta = cfg.speed_filter_constant
        v_f = v_filtered_prev + beta * (v_measured - v_filtered_prev)
    if v_f > cfg.v_threshold:
        rho_star = cfg.high
    elif v_f < cfg.v_threshold:
        rho_star = cfg.low
    else:
        rho_star = rho_star_prev
    return max(0.0, rho_star), v_f


class FWindow:
    """Samples of (u, y*', e, int e) over the last ``delta`` seconds."""

    def __init__(self, delta: float, period: float):
        if delta < period:
            raise ValueError("delta must span at least two samples")
        self.delta = float(delta)
        self.period = float(period)
        self.size = int(round(delta / period)) + 1
        self.buffer: deque[tuple[float, float, float, float]] = deque(maxlen=self.size)

    @property
    def full(self) -> bool:
        return len(self.buffer) == self.size

    def push(self, u: float, rho_star_dot: float, e: float, int_e: float) -> None:
        self.buffer.append((u, rho_star_dot, e, int_e))


class WarmingUp(RuntimeError):
    pass


def estimate_f_integral(win: FWindow, alpha: float, gains: IpiGains) -> float:
    """Window average (trapezoid) of ``-alpha u + y*' - kp e - ki int e``."""
    if not win.full:
        raise WarmingUp(f"{len(win.buffer)}/{win.size} samples")
    kp, ki = gains.kp, gains.ki
    g = [-alpha * u + yd - kp * e + -ki * ie for u, yd, e, ie in win.buffer]
    inner = sum(g) - 0.5 * (g[0] + g[-1])
    return inner / (len(g) - 1)


class OutputDerivative:
    """Derivative of the controlled output.

    ``difference``: backward difference of an EMA-filtered signal.
    ``algebraic``: degree-1 algebraic differentiator over ``window`` seconds.
    Rates are per hour; sample times are in seconds.
    """

    def __init__(self, period: float, mode: str = "difference", ema: float = 1.0, window: float = 300.0):
        if mode not in ("difference", "algebraic"):
            raise ValueError(f"unknown derivative mode {mode!r}")
        if not 0 < ema <= 1:
            raise ValueError("ema factor must lie in (0, 1]")
        self.period = float(period)
        self.mode = mode
        self.ema = ema
        self._filtered: Optional[float] = None
        self._prev: Optional[float] = None
        self._t = 0.0
        self._alg = (
            DerivativeEstimator(DiffConfig(1, window, eval_point="delay"), period)
            if mode == "algebraic"
            else None
        )

    def push(self, y: float) -> Optional[float]:
        self._t += self.period
        if self._alg is not None:
            est = self._alg.push(self._t, y)
            return None if est is None else est.d1 * 3600.0
        if self._filtered is None:
            self._filtered = float(y)
            return None
        self._prev = self._filtered
        self._filtered = self._filtered + self.ema * (y - self._filtered)
        return (self._filtered - self._prev) / (self.period / 3600.0)


def estimate_output_derivative(samples: Sequence[float], t_s: float, ema: float = 1.0) -> float:
    """Backward difference of the EMA-filtered series; ``t_s`` in seconds."""
    if len(samples) < 2:
        raise ValueError("need at least two samples")
    od = OutputDerivative(t_s, "difference", ema)
    out = None
    for y in samples:
        out = od.push(y)
    return float(out)


class ControlRecord(NamedTuple):
    t: float  # h
    rho_s: float
    rho_star: float
    e: float
    f_est: float
    f_integral: float
    r_raw: float
    r: float
    v_filtered: float


@dataclass
class IpiController:
    """iPI (or iP when ki = 0) ramp-metering loop, stepped once per control period."""

    model: UltraLocalModel
    gains: IpiGains
    ramp: RampParams
    reference: ReferenceConfig = field(default_factory=ReferenceConfig)
    derivative: Optional[OutputDerivative] = None
    f_window: Optional[FWindow] = None
    fixed_reference: Optional[float] = None
    r_prev: float = 1.0
    rho_star: float = float("nan")
    v_filtered: Optional[float] = None

    def __post_init__(self) -> None:
        period_s = self.ramp.t_s * 3600.0
        if self.derivative is None:
            self.derivative = OutputDerivative(period_s)
        if self.f_window is None:
            self.f_window = FWindow(300.0, period_s)
        if math.isnan(self.rho_star):
            self.rho_star = self.fixed_reference if self.fixed_reference is not None else self.reference.high

    def step(self, t: float, rho_s: float, v_s: float, f_exact: Optional[float] = None) -> ControlRecord:
        T = self.ramp.t_s
        if self.fixed_reference is None:
            self.rho_star, self.v_filtered = reference_update(
                self.reference, v_s, self.rho_star, self.v_filtered
            )
        rho_dot = self.derivative.push(rho_s)
        if f_exact is not None:
            self.model.f_est = f_exact
        elif rho_dot is not None:
            self.model.f_est = estimate_f_from_derivative(rho_dot, self.model.alpha, self.r_prev)

        e = rho_s - self.rho_star
        held = self.gains.integral_state
        self.gains.integral_state = held + e * T
        # reference is piecewise constant: y*' = 0 between switches
        r_raw = ipi_control(self.model, 0.0, e, self.gains)
        r = clamp_control(r_raw, self.ramp)
        if r != r_raw:
            self.gains.integral_state = held
            r_raw = ipi_control(self.model, 0.0, e, self.gains)

        self.f_window.push(r, 0.0, e, self.gains.integral_state)
        try:
            f_int = estimate_f_integral(self.f_window, self.model.alpha, self.gains)
        except WarmingUp:
            f_int = float("nan")
        self.r_prev = r
        return ControlRecord(
            t, rho_s, self.rho_star, e, self.model.f_est, f_int, r_raw, r,
            float("nan") if self.v_filtered is None else self.v_filtered,
        )

