import json

import numpy as np
import pytest

from daddpc import harness
from daddpc.config import default_config, load_config
from daddpc.harness import (MalformedLog, RunMeta, read_step_log,
                            verify_certificates, write_step_log)
from daddpc.supervisor import StepRecord


def small_config(horizon=120, alpha=0.1):
    # reduced dimensions keep harness-level tests fast
    cfg = default_config()
    cfg.controller.n_pred = 12
    cfg.controller.t_init = 6
    cfg.controller.hankel_len = 220
    cfg.controller.calib_len = 220
    cfg.controller.alpha = alpha
    cfg.run.horizon_steps = horizon
    cfg.run.baseline = False
    return cfg


def synthetic_log(vs, alpha, eta, alpha_0, policies=None):
    records = []
    a = alpha_0
    for t, v in enumerate(vs):
        if t > 0:
            a = a + eta * (alpha - v)
        records.append(StepRecord(
            t=t, y=np.array([22.0]), u=np.array([1.0]), v=int(v), alpha=a,
            alpha_bar=min(max(a, 0.0), 1.0),
            policy=(policies[t] if policies else "dpc"),
            w=np.array([0.0, 0.0])))
    return records


def test_certificates_pass_on_valid_log():
    rng = np.random.default_rng(0)
    vs = rng.integers(0, 2, size=400)
    meta = RunMeta(alpha=0.3, eta=0.4, alpha_0=0.2, seed=0, replicate=0,
                   dt_minutes=15.0, t_offset=0, n_steps=400)
    rep = verify_certificates(synthetic_log(vs, 0.3, 0.4, 0.2), meta)
    assert rep.all_passed


def test_adversarial_log_fails_with_exact_index():
    vs = [0] * 50
    records = synthetic_log(vs, 0.1, 0.5, 0.0)
    records[23].alpha += 1e-6  # break the recursion at t = 23
    meta = RunMeta(alpha=0.1, eta=0.5, alpha_0=0.0, seed=0, replicate=0,
                   dt_minutes=15.0, t_offset=0, n_steps=50)
    rep = verify_certificates(records, meta)
    res = {r.name: r for r in rep.results}
    assert not res["recursion_identity"].passed
    assert res["recursion_identity"].first_violation_t == 23


def test_strict_bound_certified_when_alpha_never_dips():
    # alpha_0 = 0 and no violations: alpha_t climbs, hypothesis holds
    vs = [0] * 200
    meta = RunMeta(alpha=0.05, eta=0.5, alpha_0=0.0, seed=0, replicate=0,
                   dt_minutes=15.0, t_offset=0, n_steps=200)
    rep = verify_certificates(synthetic_log(vs, 0.05, 0.5, 0.0), meta)
    res = {r.name: r for r in rep.results}
    assert res["strict_average_bound"].applicable
    assert res["strict_average_bound"].passed


def test_theorem_bound_and_intervals_on_declared_contract():
    vs = [0, 1, 1] + [0] * 80
    policies = ["dpc"] * 3 + ["backup"] * 10 + ["dpc"] * 70
    meta = RunMeta(alpha=0.2, eta=0.5, alpha_0=0.0, seed=0, replicate=0,
                   dt_minutes=15.0, t_offset=0, n_steps=83,
                   delta_bar=8, epsilon=0.2, y_lim=[15.0, 30.0])
    rep = verify_certificates(synthetic_log(vs, 0.2, 0.5, 0.0, policies), meta)
    res = {r.name: r for r in rep.results}
    assert res["alpha_lower_bound"].applicable and res["alpha_lower_bound"].passed
    assert res["backup_intervals_bounded"].passed


def test_interval_check_flags_overlong_activation():
    n = 400
    vs = [0] * n
    policies = ["dpc"] * 10 + ["backup"] * 320 + ["dpc"] * (n - 330)
    meta = RunMeta(alpha=0.5, eta=0.5, alpha_0=0.0, seed=0, replicate=0,
                   dt_minutes=15.0, t_offset=0, n_steps=n,
                   delta_bar=4, epsilon=0.5, y_lim=[15.0, 30.0])
    rep = verify_certificates(synthetic_log(vs, 0.5, 0.5, 0.0, policies), meta)
    res = {r.name: r for r in rep.results}
    assert not res["backup_intervals_bounded"].passed
    assert res["backup_intervals_bounded"].first_violation_t == 10


def test_step_log_round_trip(tmp_path):
    vs = [0, 1, 0, 0, 1]
    records = synthetic_log(vs, 0.2, 0.5, 0.1)
    records[2].objective = 3.25
    records[2].slack_norm = 0.5
    path = tmp_path / "steps.csv"
    write_step_log(path, records)
    header = open(path).readline().strip()
    assert header == "t,y0,u0,w0,w1,v,alpha,alpha_bar,policy,objective,slack_norm"
    log = read_step_log(path)
    np.testing.assert_array_equal(log["v"], vs)
    np.testing.assert_allclose(log["alpha"], [r.alpha for r in records])
    assert log["policy"] == ["dpc"] * 5
    meta = RunMeta(alpha=0.2, eta=0.5, alpha_0=0.1, seed=0, replicate=0,
                   dt_minutes=15.0, t_offset=0, n_steps=5)
    assert verify_certificates(log, meta).all_passed


def test_malformed_log_detected(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("t,y0,u0,v,alpha,alpha_bar,policy,objective,slack_norm\n"
                    "0,22.0,1.0,2,0.0,0.0,dpc,,\n")
    with pytest.raises(MalformedLog):
        read_step_log(path)
    path.write_text("t,y0,u0,alpha,alpha_bar,policy\n0,22.0,1.0,0.0,0.0,dpc\n")
    with pytest.raises(MalformedLog):
        read_step_log(path)


def test_closed_loop_kpis_match_log():
    cfg = small_config()
    res = harness.run_closed_loop(cfg)
    vs = np.array([r.v for r in res.records])
    assert res.kpi.violation_ratio == pytest.approx(vs[1:].mean())
    # energy equals the hand-summed oracle
    dt_h = cfg.plant.dt_minutes / 60.0
    energy = sum(float(np.sum(r.u)) * dt_h for r in res.records)
    assert res.kpi.energy_kwh == pytest.approx(energy, abs=1e-9)
    assert res.kpi.backup_activation_steps == sum(
        r.policy != "dpc" for r in res.records)


def test_violation_magnitude_matches_band_excess():
    cfg = small_config()
    res = harness.run_closed_loop(cfg)
    plant = cfg.build_plant()
    schedule = cfg.build_schedule(plant.n_y)
    dt_h = cfg.plant.dt_minutes / 60.0
    total = 0.0
    from daddpc.plant import comfort_at
    for r in res.records:
        if r.t == 0:
            continue
        lb, ub = comfort_at(schedule, res.meta.t_offset + r.t)
        total += float(np.sum(np.maximum(lb - r.y, 0.0)
                              + np.maximum(r.y - ub, 0.0))) * dt_h
    assert res.kpi.violation_magnitude_kh == pytest.approx(total, abs=1e-9)


def test_closed_loop_certificates_and_baseline_pairing():
    cfg = small_config()
    cfg.run.baseline = True
    res = harness.run_closed_loop(cfg)
    assert verify_certificates(res.records, res.meta).all_passed
    assert res.kpi.relative_energy_pct is not None
    base = harness.run_baseline(cfg)
    assert res.kpi.relative_energy_pct == pytest.approx(
        100.0 * res.kpi.energy_kwh / base.kpi.energy_kwh)
    # paired runs share the weather trace
    np.testing.assert_array_equal(res.records[0].w, base.records[0].w)


def test_alpha_one_becomes_nominal_after_warmup():
    cfg = small_config(alpha=1.0)
    res = harness.run_closed_loop(cfg)
    # target 1 keeps the adaptation saturated at its ceiling after warm-up
    for r in res.records[3:]:
        assert r.alpha_bar == 1.0
        assert r.policy == "dpc"


def test_run_is_reproducible_byte_for_byte(tmp_path):
    cfg = small_config()
    a = harness.run_closed_loop(cfg)
    b = harness.run_closed_loop(cfg)
    pa, pb = tmp_path / "a.csv", tmp_path / "b.csv"
    write_step_log(pa, a.records)
    write_step_log(pb, b.records)
    assert pa.read_bytes() == pb.read_bytes()


def test_monte_carlo_aggregates():
    cfg = small_config(horizon=60)
    agg, kpis = harness.monte_carlo(cfg, 3)
    assert len(kpis) == 3
    assert set(agg) >= {"violation_ratio", "energy_kwh"}
    ratios = [k.violation_ratio for k in kpis]
    assert agg["violation_ratio"]["mean"] == pytest.approx(np.mean(ratios))


def test_sweep_rows_and_csv(tmp_path):
    cfg = small_config(horizon=60)
    rows = harness.sweep_alpha(cfg, [0.1, 0.3], n_seeds=2)
    per_run = [r for r in rows if isinstance(r["replicate"], int)]
    means = [r for r in rows if r["replicate"] == "mean"]
    assert len(per_run) == 4 and len(means) == 2
    path = tmp_path / "sweep.csv"
    harness.write_sweep_csv(path, rows)
    rows2 = harness.sweep_alpha(cfg, [0.1, 0.3], n_seeds=2)
    path2 = tmp_path / "sweep2.csv"
    harness.write_sweep_csv(path2, rows2)
    assert path.read_bytes() == path2.read_bytes()


def test_meta_round_trip(tmp_path):
    meta = RunMeta(alpha=0.05, eta=0.5, alpha_0=0.0, seed=3, replicate=1,
                   dt_minutes=15.0, t_offset=1344, n_steps=100,
                   delta_bar=96, epsilon=0.05, y_lim=[15.0, 30.0])
    path = tmp_path / "meta.json"
    harness.write_meta(path, meta)
    assert harness.read_meta(path) == meta


# -- configuration ----------------------------------------------------------------

EXAMPLE_TOML = """
[plant]
a = [[0.5, 0.1], [0.0, 0.6]]
b_u = [[0.3], [0.0]]
b_w = [[0.1, 0.2], [0.0, 0.0]]
c = [[1.0, 0.0]]
x0 = [21.0, 21.0]
meas_noise_std = 0.1
u_min = [0.0]
u_max = [8.0]

[schedule]
default_lb = [19.0]
default_ub = [27.0]

[[schedule.rules]]
days = [0, 1, 2, 3, 4]
start_minute = 480
end_minute = 1080
lb = [21.0]
ub = [25.0]

[controller]
n_pred = 8
t_init = 4
alpha = 0.1

[backup]
setpoint = 22.5
y_lim = [15.0, 30.0]

[weather]
mean_temp_c = -1.0

[run]
horizon_steps = 50
seed = 7
"""


def test_load_config_from_toml(tmp_path):
    path = tmp_path / "scenario.toml"
    path.write_text(EXAMPLE_TOML)
    cfg = load_config(path)
    assert cfg.controller.alpha == 0.1
    assert cfg.run.seed == 7
    assert cfg.schedule.rules[0].lb == [21.0]
    assert cfg.backup.setpoint == 22.5
    plant = cfg.build_plant()
    assert plant.n_x == 2 and plant.n_u == 1 and plant.n_w == 2


def test_load_config_rejects_unknown_keys(tmp_path):
    path = tmp_path / "bad.toml"
    path.write_text(EXAMPLE_TOML + "\n[controller2]\nfoo = 1\n")
    with pytest.raises(ValueError):
        load_config(path)
    path.write_text(EXAMPLE_TOML.replace("alpha = 0.1", "alpha = 0.1\nbogus = 2"))
    with pytest.raises(ValueError):
        load_config(path)


def test_config_validation_errors():
    cfg = default_config()
    cfg.controller.alpha = 0.0
    with pytest.raises(ValueError):
        cfg.validate()
    cfg = default_config()
    cfg.backup.y_lim = [20.0, 24.0]  # does not contain the comfort bands
    with pytest.raises(ValueError):
        cfg.validate()
    cfg = default_config()
    cfg.backup.epsilon = 0.2  # exceeds alpha
    with pytest.raises(ValueError):
        cfg.validate()
