"""Scenario and estimator configuration files (TOML, schema version 1).

Times in files are in seconds; they are converted to hours for the model.
Every section is optional and falls back to the defaults of the default
surge scenario.
"""

from __future__ import annotations

import math
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .fd_estim import EstimatorConfig
from .harness import ControllerConfig, NoiseModel, Profile, Scenario
from .mfc import ReferenceConfig
from .traffic_model import Freeway, FundamentalDiagram, RampParams, SegmentParams, hours

SCHEMA_VERSION = 1


class ConfigError(ValueError):
    def __init__(self, msg: str, file: str = "", where: str = ""):
        super().__init__(msg)
        self.msg = msg
        self.file = file
        self.where = where

    def __str__(self) -> str:
        loc = f"{self.file}:{self.where}" if self.where else self.file
        return f"{loc}: {self.msg}" if loc else self.msg


@dataclass(frozen=True)
class DetectorConfig:
    l_eff: float = 7.0  # m
    lanes_divisor: float = 1.0
    station_segment: int = 1
    period: float = 20.0  # s


@dataclass(frozen=True)
class Config:
    scenario: Scenario = field(default_factory=Scenario)
    estimator: EstimatorConfig = field(default_factory=EstimatorConfig)
    detector: DetectorConfig = field(default_factory=DetectorConfig)


class _Section:
    """Typed access to a TOML table that remembers its dotted path."""

    def __init__(self, data: dict, path: str, file: str):
        self.data = data
        self.path = path
        self.file = file
        self.used: set[str] = set()

    def where(self, key: str) -> str:
        return f"{self.path}.{key}" if self.path else key

    def sub(self, key: str) -> "_Section":
        val = self.data.get(key, {})
        self.used.add(key)
        if not isinstance(val, dict):
            raise ConfigError("expected a table", self.file, self.where(key))
        return _Section(val, self.where(key), self.file)

    def get(self, key: str, default: Any, kind=float) -> Any:
        self.used.add(key)
        if key not in self.data:
            return default
        val = self.data[key]
        try:
            if kind is float:
                if isinstance(val, bool) or not isinstance(val, (int, float)):
                    raise TypeError
                return float(val)
            if kind is int:
                if isinstance(val, bool) or not isinstance(val, int):
                    raise TypeError
                return val
            if kind is str:
                if not isinstance(val, str):
                    raise TypeError
                return val
            if kind is list:
                if not isinstance(val, list):
                    raise TypeError
                return [float(x) for x in val]
        except (TypeError, ValueError):
            raise ConfigError(f"expected {kind.__name__}, got {val!r}", self.file, self.where(key)) from None
        raise AssertionError(kind)

    def check_unknown(self) -> None:
        for key in self.data:
            if key not in self.used:
                raise ConfigError("unknown key", self.file, self.where(key))


def _profile(sec: _Section, default: Profile) -> Profile:
    if not sec.data:
        return default
    kind = sec.get("kind", "points", str)
    if kind == "points":
        times = sec.get("times_s", None, list)
        values = sec.get("values", None, list)
        if times is None or values is None:
            raise ConfigError("points profile needs times_s and values", sec.file, sec.path)
        prof = Profile(tuple(hours(x) for x in times), tuple(values))
    elif kind == "constant":
        prof = Profile.constant(sec.get("value", 0.0))
    elif kind == "sine":
        mean = sec.get("mean", 0.0)
        amp = sec.get("amplitude", 0.0)
        period = sec.get("period_s", 3600.0)
        duration = sec.get("duration_s", 86400.0)
        step = sec.get("resolution_s", 60.0)
        ts = np.arange(0.0, duration + step, step)
        prof = Profile(tuple(hours(ts)), tuple(np.maximum(0.0, mean + amp * np.sin(2 * np.pi * ts / period))))
    else:
        raise ConfigError(f"unknown profile kind {kind!r}", sec.file, sec.where("kind"))
    sec.check_unknown()
    return prof


def parse_config(data: dict, file: str = "<config>") -> Config:
    root = _Section(data, "", file)
    version = root.get("schema_version", SCHEMA_VERSION, int)
    if version != SCHEMA_VERSION:
        raise ConfigError(f"unsupported schema_version {version}", file, "schema_version")
    name = root.get("name", "scenario", str)
    base = Scenario()
    try:
        sim = root.sub("simulation")
        duration = hours(sim.get("duration_s", base.duration * 3600.0))
        dt = hours(sim.get("step_s", base.dt * 3600.0))
        sim.check_unknown()

        dia = root.sub("diagram")
        fd0 = base.road.fd
        fd = FundamentalDiagram(dia.get("v_f", fd0.v_f), dia.get("rho_c", fd0.rho_c), dia.get("a", fd0.a))
        dia.check_unknown()

        geo = root.sub("geometry")
        seg0 = base.road.segments[0]
        seg = SegmentParams(
            length=geo.get("length_km", seg0.length),
            lanes=geo.get("lanes", seg0.lanes, int),
            tau=hours(geo.get("tau_s", seg0.tau * 3600.0)),
            nu_anticip=geo.get("nu_anticip", seg0.nu_anticip),
            kappa=geo.get("kappa", seg0.kappa),
            rho_max=geo.get("rho_max", seg0.rho_max),
        )
        n_seg = geo.get("segments", base.road.n, int)
        merge = geo.get("merge_segment", base.road.merge_index, int)
        formula = geo.get("ramp_supply_formula", base.road.ramp_supply_formula, str)
        downstream = geo.get("downstream_density", None)
        geo.check_unknown()

        rp = root.sub("ramp")
        r0 = base.road.ramp
        ramp = RampParams(
            q_sat=rp.get("q_sat", r0.q_sat),
            r_min=rp.get("r_min", r0.r_min),
            r_max=rp.get("r_max", r0.r_max),
            t_s=hours(rp.get("control_period_s", r0.t_s * 3600.0)),
        )
        rp.check_unknown()
        road = Freeway.uniform(n_seg, seg, fd=fd, ramp=ramp, merge_index=merge, ramp_supply_formula=formula)

        dem = root.sub("demand")
        upstream = _profile(dem.sub("upstream"), base.upstream)
        ramp_demand = _profile(dem.sub("ramp"), base.ramp_demand)
        dem.check_unknown()

        cs = root.sub("controller")
        c0 = ControllerConfig()
        refs = cs.sub("reference")
        rf0 = c0.reference
        period_s = ramp.t_s * 3600.0
        filt_tau = refs.get("speed_filter_tau_s", 60.0)
        reference = ReferenceConfig(
            v_threshold=refs.get("v_threshold", rf0.v_threshold),
            rho_d0=refs.get("rho_d0", rf0.rho_d0),
            rho_inc=refs.get("rho_inc", rf0.rho_inc),
            rho_dec=refs.get("rho_dec", rf0.rho_dec),
            speed_filter_constant=1.0 if filt_tau <= 0 else 1.0 - math.exp(-period_s / filt_tau),
        )
        refs.check_unknown()
        al = cs.sub("alinea")
        controller = ControllerConfig(
            kind=cs.get("kind", c0.kind, str),
            alpha=cs.get("alpha", c0.alpha),
            kp=cs.get("kp", c0.kp),
            ki=cs.get("ki", c0.ki),
            reference=reference,
            fixed_reference=cs.get("fixed_reference", c0.fixed_reference),
            derivative_mode=cs.get("derivative", c0.derivative_mode, str),
            derivative_ema=cs.get("derivative_ema", c0.derivative_ema),
            derivative_window=cs.get("derivative_window_s", c0.derivative_window),
            f_window=cs.get("f_window_s", c0.f_window),
            alinea_gain=al.get("gain", c0.alinea_gain),
            alinea_target=al.get("target", c0.alinea_target),
        )
        al.check_unknown()
        cs.check_unknown()

        ns = root.sub("noise")
        noise = NoiseModel(
            speed_sigma=ns.get("speed_sigma", 0.0),
            density_sigma=ns.get("density_sigma", 0.0),
            seed=ns.get("seed", 0, int),
        )
        ns.check_unknown()

        es = root.sub("estimator")
        e0 = EstimatorConfig()
        estimator = EstimatorConfig(
            period=es.get("period_s", e0.period),
            window=es.get("window_s", e0.window),
            window_w=es.get("window_w_s", e0.window_w),
            n=es.get("n", e0.n, int),
            eps_rho_dot=es.get("eps_rho_dot", e0.eps_rho_dot),
            eps_w=es.get("eps_w", e0.eps_w),
            a_min=es.get("a_min", e0.a_min),
            a_max=es.get("a_max", e0.a_max),
            median_len=es.get("median_len", e0.median_len, int),
            uninformative_after=es.get("uninformative_after", e0.uninformative_after, int),
        )
        es.check_unknown()

        ds = root.sub("detector")
        d0 = DetectorConfig()
        detector = DetectorConfig(
            l_eff=ds.get("l_eff_m", d0.l_eff),
            lanes_divisor=ds.get("lanes_divisor", d0.lanes_divisor),
            station_segment=ds.get("station_segment", d0.station_segment, int),
            period=ds.get("period_s", d0.period),
        )
        ds.check_unknown()
        if not 0 <= detector.station_segment < road.n:
            raise ConfigError("station_segment out of range", file, "detector.station_segment")
        root.check_unknown()

        scenario = Scenario(
            road=road,
            upstream=upstream,
            ramp_demand=ramp_demand,
            downstream_density=downstream,
            duration=duration,
            dt=dt,
            controller=controller,
            noise=noise,
            name=name,
        )
    except ConfigError:
        raise
    except ValueError as exc:
        raise ConfigError(str(exc), file) from None
    return Config(scenario=scenario, estimator=estimator, detector=detector)


def load_config(path: str | Path) -> Config:
    path = Path(path)
    try:
        with open(path, "rb") as fh:
            data = tomllib.load(fh)
    except FileNotFoundError:
        raise ConfigError("file not found", str(path)) from None
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"TOML syntax: {exc}", str(path)) from None
    return parse_config(data, str(path))


def load_scenario(path: str | Path) -> Scenario:
    return load_config(path).scenario
