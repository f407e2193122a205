"""Online identification of May's fundamental diagram from density/speed streams.

With ``V = v_f exp(-K rho**a)`` and ``K = 1 / (a rho_c**a)``:

* ``W = V_rho / V = -K a rho**(a-1)`` (logarithmic derivative)
* ``W_rho / W = (a - 1) / rho`` identifies ``a``
* ``W`` then gives ``K``, ``K`` and ``a`` give ``rho_c``, and ``V`` gives ``v_f``.

Density derivatives are never measured directly: both ``V`` and ``rho`` are
differentiated in time and ``V_rho = dV/dt / drho/dt``.  The same trick
gives ``W_rho`` from the time series of ``W``.  Every time derivative comes
from :mod:`rampmeter.algediff`, evaluated at the estimator's delay point so
that the numerator, denominator and the smoothed values line up in time.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass
from typing import Iterable, NamedTuple, Optional

import numpy as np

from .algediff import DerivativeEstimator, DiffConfig

PER_HOUR = 3600.0  # rates in the stream are per second


class SampleRejected(ValueError):
    def __init__(self, reason: str, detail: str = ""):
        super().__init__(f"{reason}: {detail}" if detail else reason)
        self.reason = reason


def chain_rule_derivative(v_dot: float, rho_dot: float, eps_rho_dot: float = 0.5) -> float:
    """dV/drho from time derivatives; rejects near-stationary density."""
    if not abs(rho_dot) > eps_rho_dot:
        raise SampleRejected("rho_dot_small", f"|{rho_dot:.4g}| <= {eps_rho_dot}")
    return v_dot / rho_dot


def log_derivative(V: float, V_rho: float) -> float:
    if not V > 0:
        raise SampleRejected("speed_nonpositive", f"V={V}")
    W = V_rho / V
    if not W < 0:
        raise SampleRejected("w_nonnegative", f"W={W:.4g}")
    return W


def estimate_a(
    rho: float, W: float, W_rho: float, eps_w: float = 1e-4, bounds: tuple[float, float] = (0.5, 8.0)
) -> float:
    if not abs(W) > eps_w:
        raise SampleRejected("w_small", f"|W|={abs(W):.3g}")
    if not rho > 0:
        raise SampleRejected("rho_nonpositive", f"rho={rho}")
    a = 1.0 + rho * W_rho / W
    if not bounds[0] <= a <= bounds[1]:
        raise SampleRejected("a_out_of_band", f"a={a:.4g}")
    return a


def estimate_K(rho: float, W: float, a: float) -> float:
    return -W / (a * rho ** (a - 1.0))


def estimate_rho_c(K: float, a: float) -> float:
    # inverse of K = 1 / (a rho_c**a)
    return (a * K) ** (-1.0 / a)


def estimate_vf(V: float, rho: float, K: float, a: float) -> float:
    return V * math.exp(K * rho**a)


@dataclass(frozen=True)
class EstimatorConfig:
    period: float = 20.0  # s
    window: float = 300.0  # s, first derivatives of rho and V
    window_w: float = 600.0  # s, derivative of the W series
    n: int = 3
    eps_rho_dot: float = 0.5  # veh/km/lane/h
    eps_w: float = 1e-4
    a_min: float = 0.5
    a_max: float = 8.0
    median_len: int = 50
    uninformative_after: int = 90  # consecutive rejected samples

    def __post_init__(self) -> None:
        if self.median_len < 1 or self.period <= 0:
            raise ValueError("median_len and period must be positive")
        if not 0 < self.a_min < self.a_max:
            raise ValueError("need 0 < a_min < a_max")


class EstimateRecord(NamedTuple):
    t: float
    a_raw: float
    a_pub: float
    K_pub: float
    rho_c_pub: float
    v_f_pub: float
    rejected: bool
    reason: str
    uninformative: bool = False


NAN = float("nan")


class FDEstimator:
    """Streaming estimator for one detector station."""

    def __init__(self, cfg: EstimatorConfig | None = None):
        self.cfg = cfg = cfg or EstimatorConfig()
        d1 = DiffConfig(degree=1, window=cfg.window, n=cfg.n, eval_point="delay")
        d2 = DiffConfig(degree=1, window=cfg.window_w, n=cfg.n, eval_point="delay")
        self._rho1 = DerivativeEstimator(d1, cfg.period)
        self._v1 = DerivativeEstimator(d1, cfg.period)
        self._rho2 = DerivativeEstimator(d2, cfg.period)
        self._v2 = DerivativeEstimator(d2, cfg.period)
        self._w2 = DerivativeEstimator(d2, cfg.period)
        self._a = deque(maxlen=cfg.median_len)
        self._K = deque(maxlen=cfg.median_len)
        self._rho_c = deque(maxlen=cfg.median_len)
        self._v_f = deque(maxlen=cfg.median_len)
        self.published = (NAN, NAN, NAN, NAN)
        self.accepted = 0
        self.rejections: dict[str, int] = {}
        self._streak = 0

    def _reject(self, t: float, reason: str, a_raw: float = NAN) -> EstimateRecord:
        self.rejections[reason] = self.rejections.get(reason, 0) + 1
        if reason != "warmup":
            self._streak += 1
        return EstimateRecord(
            t, a_raw, *self.published, True, reason, self._streak >= self.cfg.uninformative_after
        )

    def push(self, t: float, rho: float, v: float) -> EstimateRecord:
        cfg = self.cfg
        if not (math.isfinite(rho) and math.isfinite(v)):
            for est in (self._rho1, self._v1, self._rho2, self._v2, self._w2):
                est.reset()
            return self._reject(t, "missing")

        r1 = self._rho1.push(t, rho)
        s1 = self._v1.push(t, v)
        if r1 is None or s1 is None:
            return self._reject(t, "warmup")
        try:
            V_rho = chain_rule_derivative(s1.d1 * PER_HOUR, r1.d1 * PER_HOUR, cfg.eps_rho_dot)
            W1 = log_derivative(s1.value, V_rho)
        except SampleRejected as exc:
            # a hole in the W series restarts the second stage
            self._w2.push(r1.t_ref, NAN)
            self._rho2.reset()
            self._v2.reset()
            return self._reject(t, exc.reason)

        r2 = self._rho2.push(r1.t_ref, r1.value)
        s2 = self._v2.push(r1.t_ref, s1.value)
        w2 = self._w2.push(r1.t_ref, W1)
        if r2 is None or s2 is None or w2 is None:
            return self._reject(t, "warmup")

        a_raw = NAN
        try:
            W_rho = chain_rule_derivative(w2.d1 * PER_HOUR, r2.d1 * PER_HOUR, cfg.eps_rho_dot)
            W = w2.value
            if not W < 0:
                raise SampleRejected("w_nonnegative", f"W={W:.4g}")
            a_raw = 1.0 + r2.value * W_rho / W if W != 0 else NAN
            a = estimate_a(r2.value, W, W_rho, cfg.eps_w, (cfg.a_min, cfg.a_max))
        except SampleRejected as exc:
            return self._reject(t, exc.reason, a_raw)

        self._a.append(a)
        a_pub = float(np.median(self._a))
        K = estimate_K(r2.value, W, a_pub)
        rho_c = estimate_rho_c(K, a_pub)
        v_f = estimate_vf(s2.value, r2.value, K, a_pub)
        self._K.append(K)
        self._rho_c.append(rho_c)
        self._v_f.append(v_f)
        self.published = (
            a_pub,
            float(np.median(self._K)),
            float(np.median(self._rho_c)),
            float(np.median(self._v_f)),
        )
        self.accepted += 1
        self._streak = 0
        return EstimateRecord(t, a, *self.published, False, "")


@dataclass
class EstimationResult:
    records: list[EstimateRecord]
    accepted: int
    rejections: dict[str, int]

    @property
    def published(self) -> np.ndarray:
        """Rows (t, a, K, rho_c, v_f) of samples carrying a published estimate."""
        rows = [(r.t, r.a_pub, r.K_pub, r.rho_c_pub, r.v_f_pub) for r in self.records]
        arr = np.array(rows, dtype=float).reshape(-1, 5)
        return arr[np.isfinite(arr[:, 1])]

    def final(self) -> Optional[tuple[float, float, float, float]]:
        pub = self.published
        return None if len(pub) == 0 else tuple(float(x) for x in pub[-1, 1:])

    @property
    def rejection_rate(self) -> float:
        n = len(self.records)
        return 0.0 if n == 0 else 1.0 - self.accepted / n


def run_estimator(
    t: Iterable[float], rho: Iterable[float], v: Iterable[float], cfg: EstimatorConfig | None = None
) -> EstimationResult:
    est = FDEstimator(cfg)
    records = [est.push(float(ti), float(ri), float(vi)) for ti, ri, vi in zip(t, rho, v)]
    return EstimationResult(records, est.accepted, dict(est.rejections))
