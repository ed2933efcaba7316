"""Disturbance-adaptive data-driven predictive control.

A receding-horizon controller whose constraint tightening adapts online from
observed violations so the closed-loop average violation meets a user-chosen
bound, together with a simulated thermal plant and a harness that checks the
closed-loop guarantees.
"""
# The package works on many small dense factorizations (a few hundred rows);
# multi-threaded BLAS is counterproductive at that size and parallelism here
# comes from running scenarios concurrently instead.
try:
    from threadpoolctl import ThreadpoolController as _TpC

    _blas_controller = _TpC()
    _blas_controller.limit(limits=1, user_api="blas")
except Exception:  # pragma: no cover - threadpoolctl is a soft dependency
    _blas_controller = None

from .conformal import QuantileTable, calibrate, half_width, push_residual
from .config import ScenarioConfig, default_config, load_config, stress_config
from .harness import (KpiReport, RunMeta, RunResult, monte_carlo,
                      run_baseline, run_closed_loop, sweep_alpha,
                      verify_certificates)
from .plant import (BackupThermostat, ComfortSchedule, RcModel, WeatherSource,
                    backup_policy, comfort_at, simulate_step, weather_horizon)
from .predictor import AffinePredictor, assemble, predict, solve_inner_direct
from .qpsolve import QpConfig, QpProblem, QpSolution, solve
from .rbdpc import CostSpec, InputSet, OcpResult, build_ocp, policy
from .supervisor import (BackupContract, StepRecord, SupervisorState,
                         select_input, step, update_alpha, violation_indicator)
from .trajdata import (HankelBundle, TrajectoryStore, build_hankel,
                       build_mosaic, is_persistently_exciting)

__version__ = "0.1.0"
