"""Scenario configuration: the single source of truth for a closed-loop run.

Configs load from TOML files with sections [plant], [schedule], [controller],
[backup], [weather] and [run]; :func:`default_config` carries the built-in
single-zone winter scenario.  Builders turn the plain data into the live
plant/schedule/weather/backup objects used by the harness.
"""
from __future__ import annotations

import sys
from dataclasses import dataclass, field, fields

import numpy as np

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover - exercised only on 3.10
    import tomli as tomllib

from .plant import (BackupThermostat, ColdSnap, ComfortSchedule, RcModel,
                    WeatherSource)
from .rbdpc import CostSpec, InputSet
from .supervisor import BackupContract


@dataclass
class PlantConfig:
    """Two-node thermal network (zone air tightly coupled to a storage mass),
    discretized exactly at 15 minutes.  The default coefficients give a
    dominant open-loop time constant of about 8 h, and 12 kW of heating holds
    21 degC at a -10 degC design outdoor temperature."""

    a: list = field(default_factory=lambda: [
        [0.23917088, 0.71275243], [0.23877206, 0.73690966]])
    b_u: list = field(default_factory=lambda: [[0.14423006], [0.07295481]])
    b_w: list = field(default_factory=lambda: [
        [0.04807669, 0.43269017], [0.02431827, 0.21886444]])
    c: list = field(default_factory=lambda: [[1.0, 0.0]])
    x0: list = field(default_factory=lambda: [22.0, 22.0])
    process_noise_std: float = 0.05
    meas_noise_std: float = 0.1
    dt_minutes: float = 15.0
    u_min: list = field(default_factory=lambda: [0.0])
    u_max: list = field(default_factory=lambda: [12.0])
    input_saturation_kw: float | None = None


@dataclass
class ScheduleRuleConfig:
    days: list
    start_minute: int
    end_minute: int
    lb: list
    ub: list


@dataclass
class ScheduleConfig:
    """Comfort bands: 21-25 degC on weekdays 08:00-18:00, 19-27 otherwise."""

    default_lb: list = field(default_factory=lambda: [19.0])
    default_ub: list = field(default_factory=lambda: [27.0])
    rules: list = field(default_factory=lambda: [
        ScheduleRuleConfig(days=[0, 1, 2, 3, 4], start_minute=480,
                           end_minute=1080, lb=[21.0], ub=[25.0])])


@dataclass
class ControllerConfig:
    n_pred: int = 96
    t_init: int = 12
    q_g: float = 0.01
    q_delta: float = 10.0
    eta: float = 0.5
    alpha: float = 0.05
    alpha_0: float = 0.0
    hankel_len: int = 672
    calib_len: int = 672
    window_cap: int | None = None
    rebuild_period: int = 96
    residual_update: bool = False
    linear_u: float = 1.0


@dataclass
class BackupConfig:
    setpoint: float = 23.2
    deadband: float = 1.0
    mode: str = "heat"
    y_lim: list = field(default_factory=lambda: [15.0, 30.0])
    delta_bar: int = 96
    epsilon: float | None = None  # defaults to alpha


@dataclass
class WeatherConfig:
    mode: str = "synthetic"
    mean_temp_c: float = -2.0
    diurnal_amplitude_c: float = 4.0
    noise_std_c: float = 1.0
    noise_ar: float = 0.95
    peak_minute: int = 900
    solar_peak_kw_m2: float = 0.25
    solar_noise_kw_m2: float = 0.03
    daylight_start_minute: int = 480
    daylight_end_minute: int = 1020
    forecast_noise_std: list = field(default_factory=lambda: [0.5, 0.02])
    csv_path: str | None = None
    cold_snap: dict | None = None  # {start_step, length, delta_c}


@dataclass
class RunConfig:
    horizon_steps: int = 1344
    seed: int = 0
    baseline: bool = True


@dataclass
class ScenarioConfig:
    plant: PlantConfig = field(default_factory=PlantConfig)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    controller: ControllerConfig = field(default_factory=ControllerConfig)
    backup: BackupConfig = field(default_factory=BackupConfig)
    weather: WeatherConfig = field(default_factory=WeatherConfig)
    run: RunConfig = field(default_factory=RunConfig)

    # -- validation -----------------------------------------------------------

    def validate(self) -> "ScenarioConfig":
        c = self.controller
        if not 0.0 < c.alpha <= 1.0:
            raise ValueError("controller.alpha must lie in (0, 1]")
        if c.alpha_0 < 0:
            raise ValueError("controller.alpha_0 must be nonnegative")
        if c.eta <= 0:
            raise ValueError("controller.eta must be positive")
        if c.n_pred < 1 or c.t_init < 1:
            raise ValueError("n_pred and t_init must be >= 1")
        if self.run.horizon_steps < 1:
            raise ValueError("run.horizon_steps must be >= 1")
        if self.backup.epsilon is not None and self.backup.epsilon > c.alpha:
            raise ValueError("backup.epsilon must not exceed controller.alpha")
        lo, hi = self.backup.y_lim
        bands = [(self.schedule.default_lb, self.schedule.default_ub)]
        bands += [(r.lb, r.ub) for r in self.schedule.rules]
        for lb, ub in bands:
            if np.any(np.asarray(lb) < lo) or np.any(np.asarray(ub) > hi):
                raise ValueError(
                    f"comfort band [{lb}, {ub}] not contained in y_lim [{lo}, {hi}]")
        self.build_plant()  # dimension / stability checks
        return self

    # -- builders -------------------------------------------------------------

    def build_plant(self) -> RcModel:
        p = self.plant
        return RcModel(A=np.array(p.a), B_u=np.array(p.b_u), B_w=np.array(p.b_w),
                       C=np.array(p.c), process_noise_std=p.process_noise_std,
                       meas_noise_std=p.meas_noise_std, x0=np.array(p.x0),
                       dt_minutes=p.dt_minutes,
                       input_saturation_kw=p.input_saturation_kw)

    def build_schedule(self, n_y: int) -> ComfortSchedule:
        s = ComfortSchedule(n_y=n_y, dt_minutes=self.plant.dt_minutes)
        s.set_default(np.asarray(self.schedule.default_lb, dtype=float),
                      np.asarray(self.schedule.default_ub, dtype=float))
        for r in self.schedule.rules:
            s.add_rule(r.days, r.start_minute, r.end_minute,
                       np.asarray(r.lb, dtype=float), np.asarray(r.ub, dtype=float))
        return s

    def build_weather(self, forecast_seed: int | None = None) -> WeatherSource:
        w = self.weather
        snap = None
        if w.cold_snap is not None:
            snap = ColdSnap(start_step=int(w.cold_snap["start_step"]),
                            length=int(w.cold_snap["length"]),
                            delta_c=float(w.cold_snap["delta_c"]))
        if w.mode == "csv":
            if not w.csv_path:
                raise ValueError("weather.mode = 'csv' requires weather.csv_path")
            return WeatherSource.from_csv(w.csv_path, seed=self.run.seed,
                                          forecast_seed=forecast_seed,
                                          forecast_noise_std=w.forecast_noise_std,
                                          dt_minutes=self.plant.dt_minutes)
        return WeatherSource(mode="synthetic", seed=self.run.seed,
                             forecast_seed=forecast_seed,
                             mean_temp_c=w.mean_temp_c,
                             diurnal_amplitude_c=w.diurnal_amplitude_c,
                             noise_std_c=w.noise_std_c, noise_ar=w.noise_ar,
                             peak_minute=w.peak_minute,
                             solar_peak_kw_m2=w.solar_peak_kw_m2,
                             solar_noise_kw_m2=w.solar_noise_kw_m2,
                             daylight_start_minute=w.daylight_start_minute,
                             daylight_end_minute=w.daylight_end_minute,
                             forecast_noise_std=w.forecast_noise_std,
                             dt_minutes=self.plant.dt_minutes, cold_snap=snap)

    def build_backup(self, n_u: int) -> BackupThermostat:
        b = self.backup
        return BackupThermostat(setpoint=b.setpoint, deadband=b.deadband,
                                u_max=np.asarray(self.plant.u_max, dtype=float),
                                mode=b.mode, n_u=n_u)

    def contract(self, n_y: int) -> BackupContract:
        b = self.backup
        eps = self.controller.alpha if b.epsilon is None else b.epsilon
        return BackupContract(delta_bar=b.delta_bar, epsilon=eps,
                              y_lim_lower=np.full(n_y, float(b.y_lim[0])),
                              y_lim_upper=np.full(n_y, float(b.y_lim[1])))

    def cost_spec(self) -> CostSpec:
        return CostSpec(linear_u=self.controller.linear_u,
                        q_delta=self.controller.q_delta)

    def input_set(self) -> InputSet:
        return InputSet(u_min=np.asarray(self.plant.u_min, dtype=float),
                        u_max=np.asarray(self.plant.u_max, dtype=float))


def _build_section(cls, data: dict, name: str):
    known = {f.name for f in fields(cls)}
    unknown = set(data) - known
    if unknown:
        raise ValueError(f"unknown keys in [{name}]: {sorted(unknown)}")
    return cls(**data)


def load_config(path) -> ScenarioConfig:
    with open(path, "rb") as fh:
        raw = tomllib.load(fh)
    known = {"plant", "schedule", "controller", "backup", "weather", "run"}
    unknown = set(raw) - known
    if unknown:
        raise ValueError(f"unknown config sections: {sorted(unknown)}")
    sched_raw = dict(raw.get("schedule", {}))
    sched_kwargs = {}
    if "rules" in sched_raw:
        sched_kwargs["rules"] = [
            _build_section(ScheduleRuleConfig, r, "schedule.rules")
            for r in sched_raw.pop("rules")]
    bad = set(sched_raw) - {"default_lb", "default_ub"}
    if bad:
        raise ValueError(f"unknown keys in [schedule]: {sorted(bad)}")
    sched_kwargs.update(sched_raw)
    cfg = ScenarioConfig(
        plant=_build_section(PlantConfig, raw.get("plant", {}), "plant"),
        schedule=ScheduleConfig(**sched_kwargs),
        controller=_build_section(ControllerConfig, raw.get("controller", {}), "controller"),
        backup=_build_section(BackupConfig, raw.get("backup", {}), "backup"),
        weather=_build_section(WeatherConfig, raw.get("weather", {}), "weather"),
        run=_build_section(RunConfig, raw.get("run", {}), "run"),
    )
    return cfg.validate()


def default_config() -> ScenarioConfig:
    """Built-in single-zone winter scenario (the dataclass defaults)."""
    return ScenarioConfig().validate()


def stress_config() -> ScenarioConfig:
    """Cold-snap stress variant of the default scenario (backup exercised)."""
    cfg = default_config()
    cfg.weather.forecast_noise_std = [1.5, 0.05]
    cfg.weather.cold_snap = {"start_step": 1824, "length": 192, "delta_c": -7.0}
    return cfg.validate()
