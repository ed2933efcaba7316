"""Closed-loop orchestration: data collection, calibration, supervised runs,
parameter sweeps, Monte Carlo replication, KPIs and certificate checks."""
from __future__ import annotations

import csv
import json
import logging
import math
from collections import deque
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from . import conformal, predictor, qpsolve, rbdpc, supervisor, trajdata
from .config import ScenarioConfig
from .plant import comfort_at, simulate_step
from .supervisor import StepRecord, SupervisorState

_LOG = logging.getLogger(__name__)


class MalformedLog(ValueError):
    """Step log is missing columns or carries invalid values."""


@dataclass
class KpiReport:
    violation_ratio: float
    violation_magnitude_kh: float
    energy_kwh: float
    relative_energy_pct: float | None
    backup_activation_steps: int
    mean_solve_time: float | None


@dataclass
class RunMeta:
    """Everything the certificate checker needs to replay a log."""

    alpha: float
    eta: float
    alpha_0: float
    seed: int
    replicate: int
    dt_minutes: float
    t_offset: int  # absolute plant step of supervised step 0
    n_steps: int
    delta_bar: int | None = None
    epsilon: float | None = None
    y_lim: list | None = None


@dataclass
class RunResult:
    records: list
    kpi: KpiReport
    meta: RunMeta
    diagnostics: list = field(default_factory=list)


def _noise_rng(seed: int, replicate: int, stream: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, replicate, stream]))


def _collect(cfg: ScenarioConfig, plant, weather, backup, rng, n_steps: int,
             store: trajdata.TrajectoryStore):
    """Run the backup rule for ``n_steps`` and log records; returns final
    (state, measurement)."""
    x = plant.x0.copy()
    y = plant.C @ x
    if plant.meas_noise_std > 0:
        y = y + rng.normal(0.0, plant.meas_noise_std, size=plant.n_y)
    for t_abs in range(n_steps):
        u = backup(y)
        w = weather.realized(t_abs)
        x, y = simulate_step(plant, x, u, w, rng)
        store.append(u, y, w, t=t_abs)
    return x, y


def run_closed_loop(cfg: ScenarioConfig, replicate: int = 0,
                    with_baseline: bool | None = None) -> RunResult:
    """Offline phase (data collection, Hankel/predictor/quantile build) then
    the supervised online phase; returns the step log and KPIs."""
    cfg.validate()
    c = cfg.controller
    plant = cfg.build_plant()
    n_u, n_y, n_w = plant.n_u, plant.n_y, plant.n_w
    schedule = cfg.build_schedule(n_y)
    weather = cfg.build_weather(forecast_seed=cfg.run.seed * 7919 + replicate)
    backup = cfg.build_backup(n_u)
    contract = cfg.contract(n_y)
    cost = cfg.cost_spec()
    inputs = cfg.input_set()
    rng = _noise_rng(cfg.run.seed, replicate, 2)
    qp_cfg = qpsolve.QpConfig()
    T, Tc, N, t_init = c.hankel_len, c.calib_len, c.n_pred, c.t_init
    offline = T + Tc
    horizon = cfg.run.horizon_steps

    store = trajdata.TrajectoryStore(n_u, n_y, n_w, max_records=offline)
    x, y_meas = _collect(cfg, plant, weather, backup, rng, offline, store)
    if not contract.contains(y_meas):
        raise ValueError(f"initial output {y_meas} outside operating range; "
                         "the supervised phase requires y in Y_lim at start")

    bundle = trajdata.build_mosaic(store.slice(0, T), t_init, N)
    pred = predictor.assemble(bundle, c.q_g)
    table = conformal.calibrate(store, pred, t_init, N, window_cap=c.window_cap,
                                pred_start_after=T)

    sup = SupervisorState.fresh(c.alpha, c.eta, c.alpha_0)
    records: list[StepRecord] = []
    diagnostics: list[dict] = []
    warm = None
    pending: deque = deque()  # (issued step, predicted outputs) for table updates
    energy = 0.0
    viol_mag = 0.0
    dt_h = plant.dt_minutes / 60.0

    for k in range(horizon):
        t_abs = offline + k
        band = comfort_at(schedule, t_abs)
        w_t, w_fore = weather.weather_horizon(t_abs, N)
        z = store.init_window(t_init)
        holder: dict = {}

        def dpc_policy(z_, alpha_bar, _t=t_abs, _w=w_fore, _h=holder):
            res = rbdpc.policy(pred, table, alpha_bar, schedule, _t + 1, z_,
                               _w.ravel(), cost, inputs, qp_cfg, warm_start=warm)
            _h["res"] = res
            return res

        u, sup, rec = supervisor.step(sup, y_meas, z, band, contract,
                                      dpc_policy, backup)
        if rec.policy == "dpc":
            res = holder["res"]
            warm = np.concatenate([res.u_plan, res.slacks])
            diagnostics.append({"t": k, "objective": res.objective,
                                "slack_norm": float(np.linalg.norm(res.slacks)),
                                "active_set_size": res.active_set_size,
                                "solve_time": res.solve_time,
                                "iterations": res.iterations})
            if c.residual_update:
                pending.append((k, res.y_plan.reshape(N, n_y)))

        x, y_next = simulate_step(plant, x, u, w_t, rng)
        store.append(u, y_next, w_t, t=t_abs)
        rec.w = w_t
        records.append(rec)
        energy += float(np.sum(u)) * dt_h
        if k >= 1:
            lb, ub = band
            viol_mag += float(np.sum(np.maximum(lb - rec.y, 0.0)
                                     + np.maximum(rec.y - ub, 0.0))) * dt_h

        if c.residual_update:
            while pending and k + 1 - pending[0][0] > N:
                pending.popleft()
            for k0, y_hat in pending:
                i = k - k0
                if 0 <= i < N:
                    for j in range(n_y):
                        table.push_residual(i, j, abs(float(y_next[j] - y_hat[i, j])),
                                            policy="dpc")

        if c.rebuild_period and (k + 1) % c.rebuild_period == 0 and k + 1 < horizon:
            try:
                new_bundle = trajdata.build_mosaic(store.tail(T), t_init, N)
                pred = predictor.assemble(new_bundle, c.q_g)
            except (trajdata.NoUsableSegment, predictor.SingularKKT) as exc:
                _LOG.warning("keeping previous predictor at step %d: %s", k, exc)

        y_meas = y_next

    counted = max(1, len(records) - 1)
    solve_times = [r.solve_time for r in records if r.solve_time is not None]
    kpi = KpiReport(
        violation_ratio=sup.violation_count / counted,
        violation_magnitude_kh=viol_mag,
        energy_kwh=energy,
        relative_energy_pct=None,
        backup_activation_steps=sum(r.policy != "dpc" for r in records),
        mean_solve_time=float(np.mean(solve_times)) if solve_times else None,
    )
    meta = RunMeta(alpha=c.alpha, eta=c.eta, alpha_0=c.alpha_0, seed=cfg.run.seed,
                   replicate=replicate, dt_minutes=plant.dt_minutes,
                   t_offset=offline, n_steps=horizon,
                   delta_bar=cfg.backup.delta_bar,
                   epsilon=cfg.backup.epsilon if cfg.backup.epsilon is not None else c.alpha,
                   y_lim=list(cfg.backup.y_lim))
    result = RunResult(records=records, kpi=kpi, meta=meta, diagnostics=diagnostics)

    if with_baseline is None:
        with_baseline = cfg.run.baseline
    if with_baseline:
        base = run_baseline(cfg, replicate)
        if base.kpi.energy_kwh > 0:
            kpi.relative_energy_pct = 100.0 * energy / base.kpi.energy_kwh
    return result


def run_baseline(cfg: ScenarioConfig, replicate: int = 0) -> RunResult:
    """Backup-only run over the same timeline, for the relative-energy KPI."""
    cfg.validate()
    c = cfg.controller
    plant = cfg.build_plant()
    n_u, n_y, n_w = plant.n_u, plant.n_y, plant.n_w
    schedule = cfg.build_schedule(n_y)
    weather = cfg.build_weather(forecast_seed=cfg.run.seed * 7919 + replicate)
    backup = cfg.build_backup(n_u)
    rng = _noise_rng(cfg.run.seed, replicate, 2)
    offline = c.hankel_len + c.calib_len
    horizon = cfg.run.horizon_steps
    store = trajdata.TrajectoryStore(n_u, n_y, n_w, max_records=offline)
    x, y = _collect(cfg, plant, weather, backup, rng, offline, store)

    dt_h = plant.dt_minutes / 60.0
    records = []
    energy = 0.0
    viol = 0
    viol_mag = 0.0
    for k in range(horizon):
        t_abs = offline + k
        lb, ub = comfort_at(schedule, t_abs)
        v = supervisor.violation_indicator(y, (lb, ub))
        u = backup(y)
        rec = StepRecord(t=k, y=np.atleast_1d(y).copy(), u=np.atleast_1d(u).copy(),
                         v=v, alpha=0.0, alpha_bar=0.0, policy="backup")
        w_t = weather.realized(t_abs)
        x, y = simulate_step(plant, x, u, w_t, rng)
        rec.w = w_t
        records.append(rec)
        energy += float(np.sum(u)) * dt_h
        if k >= 1:
            viol += v
            viol_mag += float(np.sum(np.maximum(lb - rec.y, 0.0)
                                     + np.maximum(rec.y - ub, 0.0))) * dt_h
    kpi = KpiReport(violation_ratio=viol / max(1, horizon - 1),
                    violation_magnitude_kh=viol_mag, energy_kwh=energy,
                    relative_energy_pct=None, backup_activation_steps=horizon,
                    mean_solve_time=None)
    meta = RunMeta(alpha=c.alpha, eta=c.eta, alpha_0=c.alpha_0, seed=cfg.run.seed,
                   replicate=replicate, dt_minutes=plant.dt_minutes,
                   t_offset=offline, n_steps=horizon)
    return RunResult(records=records, kpi=kpi, meta=meta)


# -- Step-log serialization ----------------------------------------------------

def write_step_log(path, records: list, dims: tuple[int, int, int] | None = None) -> None:
    """CSV schema: t,y...,u...,w...,v,alpha,alpha_bar,policy,objective,slack_norm."""
    if not records:
        raise ValueError("no records to write")
    r0 = records[0]
    n_y = r0.y.size
    n_u = r0.u.size
    n_w = r0.w.size if r0.w is not None else 0
    header = (["t"] + [f"y{i}" for i in range(n_y)] + [f"u{i}" for i in range(n_u)]
              + [f"w{i}" for i in range(n_w)]
              + ["v", "alpha", "alpha_bar", "policy", "objective", "slack_norm"])
    with open(path, "w", newline="", encoding="utf-8") as fh:
        wr = csv.writer(fh)
        wr.writerow(header)
        for r in records:
            w_vals = [repr(float(v)) for v in (r.w if r.w is not None else [])]
            wr.writerow([r.t] + [repr(float(v)) for v in r.y]
                        + [repr(float(v)) for v in r.u] + w_vals
                        + [r.v, repr(float(r.alpha)), repr(float(r.alpha_bar)),
                           r.policy,
                           "" if r.objective is None else repr(float(r.objective)),
                           "" if r.slack_norm is None else repr(float(r.slack_norm))])


def read_step_log(path) -> dict:
    """Parse a step log back into arrays for certificate verification."""
    with open(path, newline="", encoding="utf-8") as fh:
        rd = csv.reader(fh)
        header = next(rd)
        try:
            i_v = header.index("v")
            i_alpha = header.index("alpha")
            i_abar = header.index("alpha_bar")
            i_pol = header.index("policy")
        except ValueError as exc:
            raise MalformedLog(f"missing column: {exc}") from exc
        t, v, alpha, abar, pol = [], [], [], [], []
        for row in rd:
            t.append(int(row[0]))
            if row[i_v] not in ("0", "1"):
                raise MalformedLog(f"non-binary v at t={row[0]}: {row[i_v]!r}")
            v.append(int(row[i_v]))
            a = float(row[i_alpha])
            if not math.isfinite(a):
                raise MalformedLog(f"non-finite alpha at t={row[0]}")
            alpha.append(a)
            abar.append(float(row[i_abar]))
            pol.append(row[i_pol])
    if not t or t != list(range(len(t))):
        raise MalformedLog("step index column must be 0..n-1")
    return {"t": np.array(t), "v": np.array(v), "alpha": np.array(alpha),
            "alpha_bar": np.array(abar), "policy": pol}


def write_meta(path, meta: RunMeta) -> None:
    Path(path).write_text(json.dumps(asdict(meta), indent=2, sort_keys=True))


def read_meta(path) -> RunMeta:
    return RunMeta(**json.loads(Path(path).read_text()))


def write_kpi(path, kpi: KpiReport) -> None:
    Path(path).write_text(json.dumps(asdict(kpi), indent=2, sort_keys=True))


# -- Certificate verification ---------------------------------------------------

@dataclass
class CertificateResult:
    name: str
    passed: bool
    applicable: bool = True
    first_violation_t: int | None = None
    detail: str = ""


@dataclass
class CertificateReport:
    results: list

    @property
    def all_passed(self) -> bool:
        return all(r.passed for r in self.results if r.applicable)

    def __str__(self) -> str:
        lines = []
        for r in self.results:
            if not r.applicable:
                lines.append(f"[skip] {r.name}: {r.detail}")
            else:
                mark = "PASS" if r.passed else "FAIL"
                at = "" if r.first_violation_t is None else f" (first at t={r.first_violation_t})"
                lines.append(f"[{mark}] {r.name}{at} {r.detail}")
        return "\n".join(lines)


_IDENTITY_TOL = 1e-12


def verify_certificates(log: dict | list, meta: RunMeta) -> CertificateReport:
    """Replay the violation sequence and check the closed-loop guarantees.

    Checks, per log:
      * the adaptation recursion holds step by step,
      * the two-sided running-average bound derived from it holds at every t,
      * the strict bound whenever its hypothesis (alpha never dips below the
        initial value) holds on the log,
      * with a declared backup contract: the worst-case lower bound on alpha
        and boundedness (< 2 * delta_bar) of every backup activation interval.
    """
    if isinstance(log, list):
        pol = [r.policy for r in log]
        v = np.array([r.v for r in log])
        alpha = np.array([r.alpha for r in log])
    else:
        pol = log["policy"]
        v = np.asarray(log["v"])
        alpha = np.asarray(log["alpha"])
    n = len(v)
    if n == 0:
        raise MalformedLog("empty log")
    a, eta, a0 = meta.alpha, meta.eta, meta.alpha_0
    results = []

    # recursion replay (v at t=0 is logged but not folded into the recursion)
    first_bad = None
    prev = a0
    for t in range(n):
        expect = prev if t == 0 else prev + eta * (a - v[t])
        if abs(alpha[t] - expect) > _IDENTITY_TOL * max(1.0, abs(expect)):
            first_bad = t
            break
        prev = alpha[t]
    results.append(CertificateResult(
        name="recursion_identity", passed=first_bad is None,
        first_violation_t=first_bad))

    if first_bad is None:
        # two-sided bound on the running average
        csum = np.cumsum(v[1:], dtype=float)
        amin = np.minimum.accumulate(np.concatenate([[a0], alpha[1:]]))[1:]
        amax = np.maximum.accumulate(np.concatenate([[a0], alpha[1:]]))[1:]
        ts = np.arange(1, n, dtype=float)
        mean = csum / ts
        lower = a + (a0 - amax) / (ts * eta)
        upper = a + (a0 - amin) / (ts * eta)
        bad = np.where((mean < lower - _IDENTITY_TOL) | (mean > upper + _IDENTITY_TOL))[0]
        results.append(CertificateResult(
            name="two_sided_average_bound", passed=bad.size == 0,
            first_violation_t=int(bad[0] + 1) if bad.size else None))

        # strict bound under its hypothesis
        hypothesis = bool(np.all(alpha[1:] >= a0 - 1e-12)) if n > 1 else True
        if hypothesis:
            bad = np.where(mean > a + _IDENTITY_TOL)[0]
            results.append(CertificateResult(
                name="strict_average_bound", passed=bad.size == 0,
                first_violation_t=int(bad[0] + 1) if bad.size else None))
        else:
            results.append(CertificateResult(
                name="strict_average_bound", passed=True, applicable=False,
                detail="hypothesis min alpha_t >= alpha_0 not met on this log"))
    else:
        results.append(CertificateResult(
            name="two_sided_average_bound", passed=False,
            first_violation_t=first_bad, detail="recursion identity broken"))
        results.append(CertificateResult(
            name="strict_average_bound", passed=False, applicable=False,
            detail="recursion identity broken"))

    # worst-case lower bound and backup interval boundedness
    if meta.delta_bar is not None and meta.epsilon is not None and meta.epsilon > 0:
        A = -eta * (1.0 - a) * (meta.delta_bar + 1)
        bad = np.where(alpha < A - _IDENTITY_TOL)[0]
        results.append(CertificateResult(
            name="alpha_lower_bound", passed=bad.size == 0,
            first_violation_t=int(bad[0]) if bad.size else None,
            detail=f"bound {A:.4f}"))
        runs = []
        start = None
        for t in range(n):
            on_backup = pol[t] != "dpc"
            if on_backup and start is None:
                start = t
            if not on_backup and start is not None:
                runs.append((start, t - start))
                start = None
        if start is not None:
            runs.append((start, n - start))
        # an activation ends once the adaptation climbs back above zero; with
        # recovery rate eta*epsilon that takes about (1 - alpha) / epsilon
        # steps on top of the backup's own recovery horizon
        limit = 2 * (meta.delta_bar + math.ceil((1.0 - a) / meta.epsilon) + 1)
        too_long = [r for r in runs if r[1] >= limit]
        results.append(CertificateResult(
            name="backup_intervals_bounded", passed=not too_long,
            first_violation_t=too_long[0][0] if too_long else None,
            detail=f"{len(runs)} activation(s), longest "
                   f"{max((r[1] for r in runs), default=0)} step(s), limit {limit}"))
    else:
        results.append(CertificateResult(
            name="alpha_lower_bound", passed=True, applicable=False,
            detail="no backup contract with epsilon > 0 declared"))
    return CertificateReport(results=results)


# -- Sweeps and Monte Carlo ------------------------------------------------------

def _clone_with(cfg: ScenarioConfig, alpha: float | None = None) -> ScenarioConfig:
    import copy

    out = copy.deepcopy(cfg)
    if alpha is not None:
        out.controller.alpha = alpha
    return out


def sweep_alpha(cfg: ScenarioConfig, alphas: list, n_seeds: int = 1,
                jobs: int | None = None) -> list[dict]:
    """Closed-loop runs per (alpha, replicate) with shared weather; returns
    one row per run plus per-alpha aggregate rows."""
    tasks = [(a, r) for a in alphas for r in range(n_seeds)]
    baselines: dict[int, float] = {}

    def one_baseline(r):
        return run_baseline(cfg, replicate=r).kpi.energy_kwh

    def one(task):
        a, r = task
        res = run_closed_loop(_clone_with(cfg, alpha=a), replicate=r,
                              with_baseline=False)
        return task, res

    workers = jobs or 1
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as ex:
            base_list = list(ex.map(one_baseline, range(n_seeds)))
            results = list(ex.map(one, tasks))
    else:
        base_list = [one_baseline(r) for r in range(n_seeds)]
        results = [one(t) for t in tasks]
    baselines = dict(enumerate(base_list))

    rows = []
    for (a, r), res in results:
        k = res.kpi
        rel = 100.0 * k.energy_kwh / baselines[r] if baselines[r] > 0 else float("nan")
        rows.append({"alpha": a, "replicate": r, "energy_kwh": k.energy_kwh,
                     "violation_ratio": k.violation_ratio,
                     "violation_magnitude_kh": k.violation_magnitude_kh,
                     "relative_energy_pct": rel,
                     "backup_activation_steps": k.backup_activation_steps})
    for a in alphas:
        sub = [row for row in rows
               if row["alpha"] == a and isinstance(row["replicate"], int)]
        rows.append({"alpha": a, "replicate": "mean",
                     "energy_kwh": float(np.mean([r["energy_kwh"] for r in sub])),
                     "violation_ratio": float(np.mean([r["violation_ratio"] for r in sub])),
                     "violation_magnitude_kh": float(
                         np.mean([r["violation_magnitude_kh"] for r in sub])),
                     "relative_energy_pct": float(
                         np.mean([r["relative_energy_pct"] for r in sub])),
                     "backup_activation_steps": float(
                         np.mean([r["backup_activation_steps"] for r in sub]))})
    return rows


def write_sweep_csv(path, rows: list) -> None:
    cols = ["alpha", "replicate", "energy_kwh", "violation_ratio",
            "violation_magnitude_kh", "relative_energy_pct",
            "backup_activation_steps"]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        wr = csv.writer(fh)
        wr.writerow(cols)
        for row in rows:
            out = []
            for c in cols:
                v = row[c]
                out.append(repr(float(v)) if isinstance(v, float) else v)
            wr.writerow(out)


def monte_carlo(cfg: ScenarioConfig, n_seeds: int, jobs: int | None = None):
    """Replicated runs with independent noise; returns (aggregate, kpis)."""
    def one(r):
        return run_closed_loop(cfg, replicate=r).kpi

    workers = jobs or 1
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as ex:
            kpis = list(ex.map(one, range(n_seeds)))
    else:
        kpis = [one(r) for r in range(n_seeds)]
    agg = {}
    for name in ("violation_ratio", "violation_magnitude_kh", "energy_kwh",
                 "relative_energy_pct", "backup_activation_steps"):
        vals = [getattr(k, name) for k in kpis]
        if any(v is None for v in vals):
            continue
        agg[name] = {"mean": float(np.mean(vals)), "std": float(np.std(vals))}
    return agg, kpis
