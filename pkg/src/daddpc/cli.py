"""Command-line entry points.

Subcommands: simulate, calibrate, sweep, montecarlo, verify.
Exit codes: 0 on success, 2 on certificate failure, 1 on error.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import conformal, harness, predictor, trajdata
from .config import ScenarioConfig, default_config, load_config


def _load(args) -> ScenarioConfig:
    cfg = load_config(args.config) if args.config else default_config()
    if getattr(args, "seed", None) is not None:
        cfg.run.seed = args.seed
    return cfg


def _cmd_simulate(args) -> int:
    cfg = _load(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    res = harness.run_closed_loop(cfg)
    harness.write_step_log(out / "steps.csv", res.records)
    harness.write_meta(out / "meta.json", res.meta)
    harness.write_kpi(out / "kpi.json", res.kpi)
    with open(out / "diagnostics.jsonl", "w", encoding="utf-8") as fh:
        for d in res.diagnostics:
            fh.write(json.dumps(d, sort_keys=True) + "\n")
    report = harness.verify_certificates(res.records, res.meta)
    print(report)
    print(f"violation_ratio={res.kpi.violation_ratio:.4f} "
          f"energy_kwh={res.kpi.energy_kwh:.2f} "
          f"relative_energy_pct={res.kpi.relative_energy_pct}")
    return 0 if report.all_passed else 2


def _cmd_calibrate(args) -> int:
    cfg = _load(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    c = cfg.controller
    plant = cfg.build_plant()
    weather = cfg.build_weather()
    backup = cfg.build_backup(plant.n_u)
    rng = harness._noise_rng(cfg.run.seed, 0, 2)
    offline = c.hankel_len + c.calib_len
    store = trajdata.TrajectoryStore(plant.n_u, plant.n_y, plant.n_w,
                                     max_records=offline)
    harness._collect(cfg, plant, weather, backup, rng, offline, store)
    bundle = trajdata.build_mosaic(store.slice(0, c.hankel_len), c.t_init, c.n_pred)
    pred = predictor.assemble(bundle, c.q_g)
    table = conformal.calibrate(store, pred, c.t_init, c.n_pred,
                                window_cap=c.window_cap,
                                pred_start_after=c.hankel_len)
    store.to_csv(out / "collection.csv")
    predictor.save_phi(pred, out / "predictor.bin")
    table.to_csv(out / "quantiles.csv")
    print(f"calibrated: n_cal={table.n_cal}, hankel columns={bundle.column_count}")
    return 0


def _cmd_sweep(args) -> int:
    cfg = _load(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    alphas = [float(a) for a in args.alphas.split(",")]
    rows = harness.sweep_alpha(cfg, alphas, n_seeds=args.seeds, jobs=args.jobs)
    harness.write_sweep_csv(out / "sweep.csv", rows)
    for row in rows:
        if row["replicate"] == "mean":
            print(f"alpha={row['alpha']}: energy={row['energy_kwh']:.2f} kWh, "
                  f"violation_ratio={row['violation_ratio']:.4f}, "
                  f"magnitude={row['violation_magnitude_kh']:.3f} Kh")
    return 0


def _cmd_montecarlo(args) -> int:
    cfg = _load(args)
    agg, _ = harness.monte_carlo(cfg, args.seeds, jobs=args.jobs)
    print(json.dumps(agg, indent=2, sort_keys=True))
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "montecarlo.json").write_text(json.dumps(agg, indent=2, sort_keys=True))
    return 0


def _cmd_verify(args) -> int:
    log = harness.read_step_log(args.log)
    meta_path = args.meta or Path(args.log).with_name("meta.json")
    meta = harness.read_meta(meta_path)
    report = harness.verify_certificates(log, meta)
    print(report)
    return 0 if report.all_passed else 2


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(prog="daddpc",
                                 description="Disturbance-adaptive data-driven "
                                             "predictive control harness")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="cmd", required=True)

    p = sub.add_parser("simulate", help="closed-loop run with KPIs and certificates")
    p.add_argument("--config", help="TOML scenario file (omit for the default)")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.set_defaults(fn=_cmd_simulate)

    p = sub.add_parser("calibrate", help="data collection and conformal calibration")
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.set_defaults(fn=_cmd_calibrate)

    p = sub.add_parser("sweep", help="trade-off table over violation targets")
    p.add_argument("--config")
    p.add_argument("--alphas", required=True, help="comma-separated list")
    p.add_argument("--out", required=True)
    p.add_argument("--seeds", type=int, default=1)
    p.add_argument("--jobs", type=int, default=1)
    p.set_defaults(fn=_cmd_sweep)

    p = sub.add_parser("montecarlo", help="replicated runs with independent noise")
    p.add_argument("--config")
    p.add_argument("--seeds", type=int, required=True)
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--out")
    p.set_defaults(fn=_cmd_montecarlo)

    p = sub.add_parser("verify", help="check certificates on a step log")
    p.add_argument("--log", required=True)
    p.add_argument("--meta", help="meta.json (defaults to sibling of --log)")
    p.set_defaults(fn=_cmd_verify)

    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.fn(args)
    except Exception as exc:  # CLI boundary: fail loudly with exit code 1
        logging.getLogger("daddpc").error("%s: %s", type(exc).__name__, exc)
        return 1


if __name__ == "__main__":
    sys.exit(main())
