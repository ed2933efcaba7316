"""Robust data-driven predictive control: the outer optimal-control QP.

Decision variables are the stacked input plan and one nonnegative slack
vector per prediction step.  Predicted outputs are eliminated through the
affine predictor, so the comfort constraints become linear rows in the input
plan whose right-hand sides carry the conformal tightening: at confidence
parameter ``sigma`` each output row is shifted inward by
``half_width(tab, i, j, sigma)``.  ``sigma = 1`` therefore reproduces the
nominal controller and smaller values tighten.  Box tightening only moves
right-hand sides, so the robust and nominal QPs share identical structure.
"""
from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import qpsolve
from .conformal import QuantileTable
from .plant import ComfortSchedule, comfort_at
from .predictor import AffinePredictor


class SigmaOutOfRange(ValueError):
    """Tightening parameter outside (0, 1]."""


@dataclass
class CostSpec:
    """Stage cost: linear input price plus quadratic slack penalty."""

    linear_u: float | np.ndarray = 1.0
    quad_u: float | np.ndarray | None = None
    q_delta: float = 10.0

    def __post_init__(self):
        if self.q_delta <= 0:
            raise ValueError("q_delta must be positive")
        if self.quad_u is not None and np.any(np.asarray(self.quad_u) < 0):
            raise ValueError("quad_u must be PSD (nonnegative diagonal)")


@dataclass
class InputSet:
    u_min: np.ndarray
    u_max: np.ndarray

    def __post_init__(self):
        self.u_min = np.atleast_1d(np.asarray(self.u_min, dtype=float))
        self.u_max = np.atleast_1d(np.asarray(self.u_max, dtype=float))
        if self.u_min.shape != self.u_max.shape:
            raise ValueError("u_min/u_max shapes differ")
        if np.any(self.u_min > self.u_max):
            raise ValueError("empty input set: u_min > u_max")


@dataclass
class OcpResult:
    u_first: np.ndarray
    u_plan: np.ndarray
    y_plan: np.ndarray
    slacks: np.ndarray
    objective: float
    qp_status: str
    solve_time: float
    iterations: int
    kkt_residual: float
    active_set_size: int


def _assemble(pred: AffinePredictor, tab: QuantileTable, sigma: float,
              schedule: ComfortSchedule, t: int, z, w_pred, cost: CostSpec,
              inputs: InputSet):
    if not 0.0 < sigma <= 1.0:
        raise SigmaOutOfRange(f"sigma must lie in (0, 1], got {sigma}")
    n_u, n_y, n_w = pred.dims
    N = pred.n_pred
    n_uv = N * n_u
    n_dv = N * n_y
    n = n_uv + n_dv  # variables: [u_plan; slacks]

    z = np.asarray(z, dtype=float).ravel()
    w_pred = np.asarray(w_pred, dtype=float).ravel()
    offset = pred.Phi_z @ z + pred.Phi_w @ w_pred  # constant part of y_pred

    lin = np.broadcast_to(np.asarray(cost.linear_u, dtype=float), (N, n_u)).ravel()
    q = np.concatenate([lin, np.zeros(n_dv)])
    P_diag = np.zeros(n)
    if cost.quad_u is not None:
        P_diag[:n_uv] = 2.0 * np.broadcast_to(
            np.asarray(cost.quad_u, dtype=float), (N, n_u)).ravel()
    P_diag[n_uv:] = 2.0 * cost.q_delta
    P = np.diag(P_diag)

    u_lo = np.broadcast_to(inputs.u_min, (N, n_u)).ravel()
    u_hi = np.broadcast_to(inputs.u_max, (N, n_u)).ravel()

    half = np.zeros((N, n_y))
    bands_lb = np.zeros((N, n_y))
    bands_ub = np.zeros((N, n_y))
    for i in range(N):
        lb, ub = comfort_at(schedule, t + i)
        bands_lb[i], bands_ub[i] = lb, ub
        for j in range(n_y):
            half[i, j] = tab.half_width(i, j, sigma)

    rows_G = []
    rows_h = []
    # lower comfort rows: y_hat - half >= lb - slack
    for i in range(N):
        for j in range(n_y):
            r = i * n_y + j
            row = np.zeros(n)
            row[:n_uv] = -pred.Phi_u[r]
            row[n_uv + r] = -1.0
            rows_G.append(row)
            rows_h.append(offset[r] - half[i, j] - bands_lb[i, j])
    # upper comfort rows (finite bounds only): y_hat + half <= ub + slack
    for i in range(N):
        for j in range(n_y):
            if not np.isfinite(bands_ub[i, j]):
                continue
            r = i * n_y + j
            row = np.zeros(n)
            row[:n_uv] = pred.Phi_u[r]
            row[n_uv + r] = -1.0
            rows_G.append(row)
            rows_h.append(bands_ub[i, j] - half[i, j] - offset[r])
    # input box
    eye_u = np.eye(n_uv, n)
    G_box = np.vstack([eye_u, -eye_u])
    h_box = np.concatenate([u_hi, -u_lo])
    # slack nonnegativity
    G_slk = np.zeros((n_dv, n))
    G_slk[:, n_uv:] = -np.eye(n_dv)
    G = np.vstack([np.asarray(rows_G), G_box, G_slk])
    h = np.concatenate([np.asarray(rows_h), h_box, np.zeros(n_dv)])
    qp = qpsolve.QpProblem(P=P, q=q, G=G, h=h)
    return qp, offset


def build_ocp(pred: AffinePredictor, tab: QuantileTable, sigma: float,
              schedule: ComfortSchedule, t: int, z, w_pred, cost: CostSpec,
              inputs: InputSet) -> qpsolve.QpProblem:
    """Assemble the tightened QP.  ``t`` is the step of the first predicted
    output, so prediction step i is checked against the band at t + i."""
    qp, _ = _assemble(pred, tab, sigma, schedule, t, z, w_pred, cost, inputs)
    return qp


def policy(pred: AffinePredictor, tab: QuantileTable, sigma: float,
           schedule: ComfortSchedule, t: int, z, w_pred, cost: CostSpec,
           inputs: InputSet, qp_cfg: qpsolve.QpConfig | None = None,
           warm_start: np.ndarray | None = None) -> OcpResult:
    """Solve the tightened QP and return the first input of the plan."""
    qp, offset = _assemble(pred, tab, sigma, schedule, t, z, w_pred, cost, inputs)
    n_u = pred.dims[0]
    N = pred.n_pred
    n_uv = N * n_u
    t0 = time.perf_counter()
    sol = qpsolve.solve(qp, qp_cfg, x0=warm_start)
    dt = time.perf_counter() - t0
    u_plan = sol.x[:n_uv]
    slacks = sol.x[n_uv:]
    tol = (qp_cfg or qpsolve.QpConfig()).tol_feas
    u_first = u_plan[:n_u].copy()
    lo = np.broadcast_to(inputs.u_min, (N, n_u))[0]
    hi = np.broadcast_to(inputs.u_max, (N, n_u))[0]
    if np.any(u_first < lo - tol) or np.any(u_first > hi + tol):
        raise qpsolve.DimensionMismatch(
            f"applied input {u_first} violates bounds beyond solver tolerance")
    u_first = np.clip(u_first, lo, hi)
    y_plan = offset + pred.Phi_u @ u_plan
    return OcpResult(u_first=u_first, u_plan=u_plan, y_plan=y_plan, slacks=slacks,
                     objective=sol.objective, qp_status=sol.status, solve_time=dt,
                     iterations=sol.iterations, kkt_residual=sol.kkt_residual,
                     active_set_size=int(np.count_nonzero(sol.lambda_ineq > 1e-8)))
