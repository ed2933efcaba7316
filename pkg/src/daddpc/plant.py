"""Simulated building: discrete-time RC thermal model, occupancy-scheduled
comfort bands, synthetic/CSV weather with imperfect forecasts, and a
rule-based hysteresis backup controller."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np


class NonFiniteState(FloatingPointError):
    """Plant state diverged (configuration error)."""


class ScheduleGap(LookupError):
    """No comfort band defined for the requested time."""


class CsvExhausted(IndexError):
    """Weather CSV does not cover the requested horizon."""


MINUTES_PER_DAY = 1440
MINUTES_PER_WEEK = 7 * MINUTES_PER_DAY


@dataclass
class RcModel:
    """Linear thermal network x+ = A x + B_u u + B_w w with noisy output.

    The measurement returned by :func:`simulate_step` is taken after the
    state update, i.e. it is the reading at the end of the sampling period
    during which u and w acted.  ``input_saturation_kw`` optionally caps the
    delivered heat B_u u elementwise (mild nonlinearity probe, off by default).
    """

    A: np.ndarray
    B_u: np.ndarray
    B_w: np.ndarray
    C: np.ndarray
    process_noise_std: float = 0.0
    meas_noise_std: float = 0.0
    x0: np.ndarray = field(default_factory=lambda: np.zeros(2))
    dt_minutes: float = 15.0
    input_saturation_kw: float | None = None

    def __post_init__(self):
        self.A = np.asarray(self.A, dtype=float)
        self.B_u = np.asarray(self.B_u, dtype=float)
        self.B_w = np.asarray(self.B_w, dtype=float)
        self.C = np.asarray(self.C, dtype=float)
        self.x0 = np.asarray(self.x0, dtype=float).ravel()
        n_x = self.A.shape[0]
        if self.A.shape != (n_x, n_x):
            raise ValueError("A must be square")
        if self.B_u.shape[0] != n_x or self.B_w.shape[0] != n_x:
            raise ValueError("B_u/B_w row count must match A")
        if self.C.shape[1] != n_x:
            raise ValueError("C column count must match A")
        if self.x0.size != n_x:
            raise ValueError("x0 length must match A")
        if self.dt_minutes <= 0:
            raise ValueError("dt must be positive")
        rho = max(abs(np.linalg.eigvals(self.A)))
        if rho >= 1.0:
            raise ValueError(f"A must be Schur stable, spectral radius {rho:.4f}")

    @property
    def n_x(self) -> int:
        return self.A.shape[0]

    @property
    def n_u(self) -> int:
        return self.B_u.shape[1]

    @property
    def n_y(self) -> int:
        return self.C.shape[0]

    @property
    def n_w(self) -> int:
        return self.B_w.shape[1]


def simulate_step(m: RcModel, x, u, w, rng: np.random.Generator):
    """Advance one sampling period; returns (x_next, measured y)."""
    x = np.asarray(x, dtype=float).ravel()
    u = np.atleast_1d(np.asarray(u, dtype=float))
    w = np.atleast_1d(np.asarray(w, dtype=float))
    drive = m.B_u @ u
    if m.input_saturation_kw is not None:
        drive = np.minimum(drive, m.input_saturation_kw)
    x_next = m.A @ x + drive + m.B_w @ w
    if m.process_noise_std > 0:
        x_next = x_next + rng.normal(0.0, m.process_noise_std, size=m.n_x)
    if not np.all(np.isfinite(x_next)):
        raise NonFiniteState(f"plant state diverged: {x_next}")
    y = m.C @ x_next
    if m.meas_noise_std > 0:
        y = y + rng.normal(0.0, m.meas_noise_std, size=m.n_y)
    return x_next, y


# -- Backup thermostat --------------------------------------------------------

def backup_policy(setpoint: float, deadband: float, y_t, mode: str,
                  prev_u: float = 0.0, u_max: float = 1.0) -> float:
    """Hysteresis rule mapping a temperature reading to a power level.

    Heat mode: full power below setpoint - deadband, off at/above setpoint,
    previous output inside the band.  Cool mode mirrored.  Multi-output
    readings are reduced to the coldest zone for heating and the hottest for
    cooling.
    """
    if deadband <= 0:
        raise ValueError("deadband must be positive")
    y = np.atleast_1d(np.asarray(y_t, dtype=float))
    if mode == "heat":
        ref = float(y.min())
        if ref < setpoint - deadband:
            return u_max
        if ref >= setpoint:
            return 0.0
        return prev_u
    if mode == "cool":
        ref = float(y.max())
        if ref > setpoint + deadband:
            return u_max
        if ref <= setpoint:
            return 0.0
        return prev_u
    raise ValueError(f"unknown mode {mode!r}")


class BackupThermostat:
    """Stateful wrapper around :func:`backup_policy` producing input vectors."""

    def __init__(self, setpoint: float, deadband: float, u_max, mode: str = "heat",
                 n_u: int = 1):
        self.setpoint = setpoint
        self.deadband = deadband
        self.u_max = np.broadcast_to(np.asarray(u_max, dtype=float), (n_u,)).copy()
        self.mode = mode
        self.n_u = n_u
        self._level = 0.0  # fraction of u_max currently commanded

    def reset(self) -> None:
        self._level = 0.0

    def __call__(self, y_t) -> np.ndarray:
        self._level = backup_policy(self.setpoint, self.deadband, y_t, self.mode,
                                    prev_u=self._level, u_max=1.0)
        return self._level * self.u_max


# -- Comfort schedule ---------------------------------------------------------

@dataclass
class ScheduleRule:
    days: frozenset[int]  # 0 = Monday
    start_minute: int
    end_minute: int
    lb: np.ndarray
    ub: np.ndarray


@dataclass
class ComfortSchedule:
    """Weekly comfort bands: first matching rule wins, else the default band."""

    n_y: int
    dt_minutes: float = 15.0
    default_lb: np.ndarray | None = None
    default_ub: np.ndarray | None = None
    rules: list[ScheduleRule] = field(default_factory=list)

    def _vec(self, v) -> np.ndarray:
        return np.broadcast_to(np.asarray(v, dtype=float), (self.n_y,)).copy()

    def add_rule(self, days, start_minute: int, end_minute: int, lb, ub) -> None:
        lb = self._vec(lb)
        ub = self._vec(ub)
        if np.any(lb > ub):
            raise ValueError("rule has lb > ub")
        self.rules.append(ScheduleRule(days=frozenset(days), start_minute=start_minute,
                                       end_minute=end_minute, lb=lb, ub=ub))

    def set_default(self, lb, ub) -> None:
        lb = self._vec(lb)
        ub = self._vec(ub)
        if np.any(lb > ub):
            raise ValueError("default band has lb > ub")
        self.default_lb, self.default_ub = lb, ub


def comfort_at(s: ComfortSchedule, t: int) -> tuple[np.ndarray, np.ndarray]:
    """Comfort band (lb, ub) applying at step ``t`` (minute-of-week lookup)."""
    minute = int(t * s.dt_minutes) % MINUTES_PER_WEEK
    day, mod = divmod(minute, MINUTES_PER_DAY)
    for rule in s.rules:
        if day in rule.days and rule.start_minute <= mod < rule.end_minute:
            return rule.lb, rule.ub
    if s.default_lb is None:
        raise ScheduleGap(f"no comfort band for day {day} minute {mod}")
    return s.default_lb, s.default_ub


# -- Weather ------------------------------------------------------------------

@dataclass
class ColdSnap:
    start_step: int
    length: int
    delta_c: float
    ramp_steps: int = 8

    def offset(self, t: int) -> float:
        if t < self.start_step or t >= self.start_step + self.length:
            return 0.0
        into = t - self.start_step
        left = self.start_step + self.length - t
        ramp = min(1.0, into / self.ramp_steps, left / self.ramp_steps)
        return self.delta_c * ramp


class WeatherSource:
    """Outdoor (temperature, solar) trace plus noisy forecasts of it.

    The realization and the forecast share one underlying trace; forecast
    error is additive i.i.d. noise drawn from a stream separate from the trace
    noise, so backup-only and controlled runs on the same seed see identical
    weather.
    """

    N_W = 2  # temperature [degC], solar [kW/m^2]

    def __init__(self, mode: str = "synthetic", *, seed: int = 0,
                 forecast_seed: int | None = None,
                 mean_temp_c: float = -2.0, diurnal_amplitude_c: float = 4.0,
                 noise_std_c: float = 1.0, noise_ar: float = 0.95,
                 peak_minute: int = 900, solar_peak_kw_m2: float = 0.25,
                 solar_noise_kw_m2: float = 0.0,
                 daylight_start_minute: int = 480, daylight_end_minute: int = 1020,
                 forecast_noise_std=(0.0, 0.0), dt_minutes: float = 15.0,
                 csv_rows: np.ndarray | None = None,
                 cold_snap: ColdSnap | None = None):
        if mode not in ("synthetic", "csv"):
            raise ValueError(f"unknown weather mode {mode!r}")
        self.mode = mode
        self.dt_minutes = dt_minutes
        self.mean_temp_c = mean_temp_c
        self.diurnal_amplitude_c = diurnal_amplitude_c
        self.noise_std_c = noise_std_c
        self.noise_ar = noise_ar
        self.peak_minute = peak_minute
        self.solar_peak_kw_m2 = solar_peak_kw_m2
        self.solar_noise_kw_m2 = solar_noise_kw_m2
        self.daylight = (daylight_start_minute, daylight_end_minute)
        self.forecast_noise_std = np.broadcast_to(
            np.asarray(forecast_noise_std, dtype=float), (self.N_W,)).copy()
        self.cold_snap = cold_snap
        # the trace is a function of `seed` alone so paired runs share weather;
        # forecast errors draw from a separate (per-replicate) stream
        self._trace_rng = np.random.default_rng(np.random.SeedSequence([seed, 11]))
        fseed = seed if forecast_seed is None else forecast_seed
        self._forecast_rng = np.random.default_rng(np.random.SeedSequence([fseed, 13]))
        self._trace: list[np.ndarray] = []
        self._ar_state = 0.0
        self._csv = csv_rows

    @classmethod
    def from_csv(cls, path, *, seed: int = 0, forecast_seed: int | None = None,
                 forecast_noise_std=(0.0, 0.0),
                 dt_minutes: float = 15.0) -> "WeatherSource":
        rows = []
        with open(path, newline="", encoding="utf-8") as fh:
            rd = csv.reader(fh)
            header = next(rd)
            if [c.strip() for c in header] != ["step", "temp_c", "solar_kw_m2"]:
                raise ValueError(f"unexpected weather CSV header: {header}")
            for row in rd:
                rows.append([float(row[1]), float(row[2])])
        return cls(mode="csv", seed=seed, forecast_seed=forecast_seed,
                   forecast_noise_std=forecast_noise_std,
                   dt_minutes=dt_minutes, csv_rows=np.asarray(rows, dtype=float))

    def _synth_step(self, t: int) -> np.ndarray:
        minute = int(t * self.dt_minutes) % MINUTES_PER_DAY
        temp = self.mean_temp_c + self.diurnal_amplitude_c * math.cos(
            2.0 * math.pi * (minute - self.peak_minute) / MINUTES_PER_DAY)
        if self.noise_std_c > 0:
            innov = self._trace_rng.normal(
                0.0, self.noise_std_c * math.sqrt(1.0 - self.noise_ar ** 2))
            self._ar_state = self.noise_ar * self._ar_state + innov
            temp += self._ar_state
        if self.cold_snap is not None:
            temp += self.cold_snap.offset(t)
        d0, d1 = self.daylight
        if d0 <= minute < d1:
            solar = self.solar_peak_kw_m2 * math.sin(math.pi * (minute - d0) / (d1 - d0))
            if self.solar_noise_kw_m2 > 0:  # cloud variability; keeps solar aperiodic
                solar = max(0.0, solar + self._trace_rng.normal(0.0, self.solar_noise_kw_m2))
        else:
            solar = 0.0
        return np.array([temp, solar])

    def _ensure(self, upto: int) -> None:
        if self.mode == "csv":
            if upto > len(self._csv):
                raise CsvExhausted(
                    f"weather CSV has {len(self._csv)} rows, need {upto}")
            return
        while len(self._trace) < upto:
            self._trace.append(self._synth_step(len(self._trace)))

    def realized(self, t: int) -> np.ndarray:
        self._ensure(t + 1)
        if self.mode == "csv":
            return self._csv[t].copy()
        return self._trace[t].copy()

    def weather_horizon(self, t: int, n_pred: int):
        """True w at step ``t`` plus an ``n_pred``-step forecast from ``t``.

        Forecast entry i targets step t + i; with zero forecast noise it
        equals the future realization exactly.
        """
        self._ensure(t + max(n_pred, 1))
        if self.mode == "csv":
            future = self._csv[t:t + n_pred].copy()
        else:
            future = np.array(self._trace[t:t + n_pred])
        if n_pred and np.any(self.forecast_noise_std > 0):
            future = future + self._forecast_rng.normal(
                0.0, 1.0, size=future.shape) * self.forecast_noise_std
        return self.realized(t), future


def weather_horizon(src: WeatherSource, t: int, n_pred: int):
    return src.weather_horizon(t, n_pred)
