"""Algebraic (operational-calculus) differentiation of sampled signals.

A window of samples is modelled by a truncated Taylor polynomial
``p(tau) = sum_j c_j tau**j`` in window-local time ``tau`` (0 at the window
start).  In the Laplace domain ``s**(N+1) P(s)`` is a polynomial in ``s``;
differentiating that identity ``m`` times in ``s`` annihilates the
coefficients ``c_j`` with ``j > N - m``, which gives a triangular system.
Multiplying every equation by ``s**-nu`` turns all terms into iterated
integrals over the window:

    s**-k G(s)        <->  int_0^T (T - tau)**(k-1) / (k-1)! g(tau) dtau
    d^i/ds^i P(s)     <->  (-tau)**i p(tau)

The exponent is ``nu = n + N - 1`` so that ``n = 2`` is the smallest order
that removes every time derivative (for N = 1 that is ``s**-2`` applied to
``s**2 P``).  The integrals are evaluated with the trapezoidal rule, and the
same rule is applied to the monomials when forming the system matrix, so
polynomials of degree <= N are recovered to rounding error.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass
from functools import lru_cache
from typing import Iterable, NamedTuple, Optional, Sequence

import numpy as np

JITTER_TOL = 0.01
COND_LIMIT = 1e10


class DegenerateWindow(ValueError):
    """The annihilator system for this window is numerically singular."""


class IrregularSampling(ValueError):
    """Sample spacing deviates from the nominal period by more than 1%."""


@dataclass(frozen=True)
class DiffConfig:
    degree: int = 1
    window: float = 300.0  # same time unit as the samples (s)
    n: int = 3
    eval_point: str = "delay"  # or "window_end"

    def __post_init__(self) -> None:
        if self.degree not in (1, 2):
            raise ValueError("degree must be 1 or 2")
        if self.n < 2:
            raise ValueError("n >= 2 is needed to eliminate every time derivative")
        if self.window <= 0:
            raise ValueError("window must be positive")
        if self.eval_point not in ("window_end", "delay"):
            raise ValueError("eval_point must be 'window_end' or 'delay'")

    def samples(self, dt: float) -> int:
        m = int(round(self.window / dt)) + 1
        if m < self.degree + 3:
            raise ValueError(
                f"a {self.window} window at period {dt} holds {m} samples; "
                f"degree {self.degree} needs at least {self.degree + 3}"
            )
        return m


@lru_cache(maxsize=64)
def _unit_weights(num: int, degree: int, n: int) -> np.ndarray:
    """Rows map samples on [0, 1] to Taylor coefficients c_0..c_N on [0, 1]."""
    N = degree
    u = np.linspace(0.0, 1.0, num)
    quad = np.full(num, 1.0 / (num - 1))
    quad[0] = quad[-1] = 0.5 / (num - 1)
    shift = n - 2  # integration order of the least-integrated term
    G = np.zeros((N + 1, num))
    for m in range(N + 1):
        for i in range(m + 1):
            coef = math.comb(m, i) * math.factorial(N + 1) / math.factorial(N + 1 - m + i)
            k = m - i + shift
            if k == 0:
                G[m, -1] += coef * (-1.0) ** i  # point value at u = 1
            else:
                kernel = (1.0 - u) ** (k - 1) / math.factorial(k - 1) * (-u) ** i
                G[m] += coef * kernel * quad
    A = G @ (u[:, None] ** np.arange(N + 1))
    if np.linalg.cond(A) > COND_LIMIT:
        raise DegenerateWindow(f"annihilator system singular for {num} samples")
    W = np.linalg.solve(A, G)
    W.setflags(write=False)
    return W


def coefficient_weights(num: int, span: float, degree: int, n: int = 3) -> np.ndarray:
    """Linear weights giving Taylor coefficients (window-start expansion) in physical time."""
    scale = span ** -np.arange(degree + 1, dtype=float)
    return _unit_weights(num, degree, n) * scale[:, None]


def estimate_coeffs(values: Sequence[float], span: float, degree: int, n: int = 3) -> np.ndarray:
    y = np.asarray(values, dtype=float)
    if y.ndim != 1 or len(y) < degree + 3:
        raise DegenerateWindow("too few samples in window")
    return coefficient_weights(len(y), span, degree, n) @ y


def delay_fraction(num: int, degree: int, n: int = 3) -> float:
    """Fraction of the window (from its start) where the derivative estimate is centred.

    For degree N this is the point xi at which the estimated derivative of
    ``tau**(N+1)`` equals its true derivative, i.e. the estimator's delay.
    """
    W = _unit_weights(num, degree, n)
    u = np.linspace(0.0, 1.0, num)
    c = W @ u ** (degree + 1)
    # solve sum_j j c_j xi^(j-1) = (N+1) xi^N on [0, 1]
    poly = np.zeros(degree + 1)  # ascending powers of xi
    for j in range(1, degree + 1):
        poly[j - 1] += j * c[j]
    poly[degree] -= degree + 1
    roots = np.roots(poly[::-1])
    real = [r.real for r in roots if abs(r.imag) < 1e-9 and -1e-9 <= r.real <= 1 + 1e-9]
    if not real:
        return 1.0
    return float(min(max(real[0], 0.0), 1.0)) if len(real) == 1 else float(max(real))


class Estimate(NamedTuple):
    t: float  # time of the newest sample in the window
    t_ref: float  # time the value/derivatives refer to
    value: float
    d1: float
    d2: float


class DerivativeWindow:
    """Ring of uniformly spaced (t, value) samples spanning a fixed duration."""

    def __init__(self, window: float, period: float, degree: int = 1, max_fill: int = 3):
        self.period = float(period)
        self.size = DiffConfig(degree=degree, window=window).samples(period)
        self.max_fill = max_fill
        self._t: deque[float] = deque(maxlen=self.size)
        self._y: deque[float] = deque(maxlen=self.size)
        self.filled = 0
        self.resets = 0

    def __len__(self) -> int:
        return len(self._y)

    @property
    def full(self) -> bool:
        return len(self._y) == self.size

    @property
    def span(self) -> float:
        return (self.size - 1) * self.period

    @property
    def start(self) -> float:
        return self._t[0]

    @property
    def end(self) -> float:
        return self._t[-1]

    def values(self) -> np.ndarray:
        return np.fromiter(self._y, dtype=float, count=len(self._y))

    def reset(self) -> None:
        if self._y:
            self.resets += 1
        self._t.clear()
        self._y.clear()

    def push(self, t: float, y: float) -> None:
        if not math.isfinite(y):
            self.reset()
            return
        if self._t:
            gap = t - self._t[-1]
            if gap <= 0:
                raise IrregularSampling(f"timestamps must increase (got {t} after {self._t[-1]})")
            steps = gap / self.period
            k = int(round(steps))
            if abs(steps - k) > JITTER_TOL or k < 1:
                self.reset()
            elif k > 1:
                if k - 1 > self.max_fill:
                    self.reset()
                else:
                    t0, y0 = self._t[-1], self._y[-1]
                    for j in range(1, k):
                        self._t.append(t0 + j * self.period)
                        self._y.append(y0 + (y - y0) * j / k)
                    self.filled += k - 1
        self._t.append(float(t))
        self._y.append(float(y))


def estimate_coeffs_deg1(win: DerivativeWindow, cfg: DiffConfig) -> tuple[float, float]:
    """(a0, a1) of ``a0 + a1 (t - t_start)`` fitted over the window."""
    if not win.full:
        raise DegenerateWindow("window not full")
    a0, a1 = estimate_coeffs(win.values(), win.span, 1, cfg.n)
    return float(a0), float(a1)


def estimate_coeffs_deg2(win: DerivativeWindow, cfg: DiffConfig) -> tuple[float, float, float]:
    """(a0, a1, a2) of ``a0 + a1 tau + a2 tau**2``; the second derivative is 2 a2."""
    if not win.full:
        raise DegenerateWindow("window not full")
    a0, a1, a2 = estimate_coeffs(win.values(), win.span, 2, cfg.n)
    return float(a0), float(a1), float(a2)


def evaluate(coeffs: Sequence[float], tau: float) -> tuple[float, float, float]:
    c = list(coeffs) + [0.0] * (3 - len(coeffs))
    return (
        c[0] + c[1] * tau + c[2] * tau * tau,
        c[1] + 2.0 * c[2] * tau,
        2.0 * c[2],
    )


class DerivativeEstimator:
    """Streaming differentiator: one estimate per incoming sample once warm."""

    def __init__(self, cfg: DiffConfig, period: float):
        self.cfg = cfg
        self.win = DerivativeWindow(cfg.window, period, cfg.degree)
        self._weights = coefficient_weights(self.win.size, self.win.span, cfg.degree, cfg.n)
        if cfg.eval_point == "delay":
            self.lag = delay_fraction(self.win.size, cfg.degree, cfg.n) * self.win.span
        else:
            self.lag = self.win.span

    @property
    def latency(self) -> float:
        """Time between the newest sample and the instant the estimate refers to."""
        return self.win.span - self.lag

    def push(self, t: float, y: float) -> Optional[Estimate]:
        self.win.push(t, y)
        if not self.win.full:
            return None
        coeffs = self._weights @ self.win.values()
        value, d1, d2 = evaluate(coeffs, self.lag)
        return Estimate(self.win.end, self.win.start + self.lag, value, d1, d2)

    def reset(self) -> None:
        self.win.reset()


def derivative_stream(
    t: Iterable[float], y: Iterable[float], cfg: DiffConfig, period: Optional[float] = None
) -> list[Optional[Estimate]]:
    """Run a sliding-window estimator over a whole series (None while warming up)."""
    t = np.asarray(list(t), dtype=float)
    y = np.asarray(list(y), dtype=float)
    if len(t) != len(y):
        raise ValueError("t and y lengths differ")
    if period is None:
        if len(t) < 2:
            raise ValueError("need at least two samples to infer the period")
        period = float(np.median(np.diff(t)))
    est = DerivativeEstimator(cfg, period)
    return [est.push(ti, yi) for ti, yi in zip(t, y)]
