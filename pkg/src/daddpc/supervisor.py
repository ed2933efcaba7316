"""Online supervision: violation indicator, adaptation of the tightening
parameter, and switching between the predictive controller and the backup.

At every step the supervisor measures the output, scores the violation
indicator v against the current comfort band, updates

    alpha_t = alpha_{t-1} + eta * (alpha_target - v_t),

clamps it to [0, 1], and dispatches either the predictive policy evaluated at
the clamped value or the backup rule when the output has left the operating
range or the clamped value hit zero.  The very first call (t = 0) scores and
logs v for the inherited initial output but does not fold it into the
recursion or the running average; counting starts at t = 1, which keeps the
recursion identity alpha_t = alpha_0 + eta * sum_{i=1..t}(alpha_target - v_i)
exact and makes the first decision see the configured alpha_0.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

_LOG = logging.getLogger(__name__)


class NonFiniteOutput(ValueError):
    """Measured output contains NaN or infinity."""


@dataclass
class SupervisorState:
    alpha_target: float
    eta: float
    alpha_0: float
    alpha_t: float = 0.0
    alpha_bar: float = 0.0
    violation_count: int = 0
    step_count: int = 0
    alpha_min_seen: float = 0.0
    alpha_max_seen: float = 0.0
    active_policy: str = "dpc"
    backup_run_length: int = 0

    @classmethod
    def fresh(cls, alpha_target: float, eta: float, alpha_0: float) -> "SupervisorState":
        if not 0.0 < alpha_target <= 1.0:
            raise ValueError("alpha_target must lie in (0, 1]")
        if eta <= 0:
            raise ValueError("eta must be positive")
        if alpha_0 < 0:
            raise ValueError("alpha_0 must be nonnegative")
        s = cls(alpha_target=alpha_target, eta=eta, alpha_0=alpha_0)
        s.alpha_t = alpha_0
        s.alpha_bar = min(max(alpha_0, 0.0), 1.0)
        s.alpha_min_seen = alpha_0
        s.alpha_max_seen = alpha_0
        return s


@dataclass
class BackupContract:
    """Recovery guarantee of the backup rule inside the operating range."""

    delta_bar: int
    epsilon: float
    y_lim_lower: np.ndarray
    y_lim_upper: np.ndarray

    def __post_init__(self):
        self.y_lim_lower = np.atleast_1d(np.asarray(self.y_lim_lower, dtype=float))
        self.y_lim_upper = np.atleast_1d(np.asarray(self.y_lim_upper, dtype=float))
        if self.delta_bar < 1:
            raise ValueError("delta_bar must be a positive integer")
        if self.epsilon < 0:
            raise ValueError("epsilon must be nonnegative")

    def contains(self, y) -> bool:
        y = np.atleast_1d(np.asarray(y, dtype=float))
        return bool(np.all(y >= self.y_lim_lower) and np.all(y <= self.y_lim_upper))


@dataclass
class StepRecord:
    """Audit record of one supervised step."""

    t: int
    y: np.ndarray
    u: np.ndarray | None
    v: int
    alpha: float
    alpha_bar: float
    policy: str  # dpc | backup | backup_fallback
    w: np.ndarray | None = None
    objective: float | None = None
    slack_norm: float | None = None
    solve_time: float | None = None
    qp_status: str | None = None
    incident: str | None = None


def violation_indicator(y_t, band) -> int:
    """1 iff any output component lies strictly outside the closed band."""
    y = np.atleast_1d(np.asarray(y_t, dtype=float))
    if not np.all(np.isfinite(y)):
        raise NonFiniteOutput(f"non-finite output {y}")
    lb, ub = band
    lb = np.broadcast_to(np.asarray(lb, dtype=float), y.shape)
    ub = np.broadcast_to(np.asarray(ub, dtype=float), y.shape)
    if np.any(lb > ub):
        raise ValueError("band has lb > ub")
    return int(np.any(y < lb) or np.any(y > ub))


def update_alpha(s: SupervisorState, v_t: int) -> SupervisorState:
    """Apply the recursion and truncation; update extrema and counters."""
    if v_t not in (0, 1):
        raise ValueError(f"v_t must be 0 or 1, got {v_t}")
    s.alpha_t = s.alpha_t + s.eta * (s.alpha_target - v_t)
    s.alpha_bar = min(max(s.alpha_t, 0.0), 1.0)
    s.alpha_min_seen = min(s.alpha_min_seen, s.alpha_t)
    s.alpha_max_seen = max(s.alpha_max_seen, s.alpha_t)
    s.violation_count += v_t
    return s


@dataclass
class InputChoice:
    use_backup: bool
    alpha_bar: float


def select_input(s: SupervisorState, y_t, contract: BackupContract) -> InputChoice:
    """Backup iff the output left the operating range or alpha_bar hit zero."""
    use_backup = (not contract.contains(y_t)) or s.alpha_bar == 0.0
    if use_backup:
        s.active_policy = "backup"
        s.backup_run_length += 1
    else:
        s.active_policy = "dpc"
        s.backup_run_length = 0
    return InputChoice(use_backup=use_backup, alpha_bar=s.alpha_bar)


def step(s: SupervisorState, y_t, z_t, band, contract: BackupContract,
         dpc_policy, backup_policy) -> tuple[np.ndarray, SupervisorState, StepRecord]:
    """One supervised step: measure, adapt, select, evaluate, record.

    ``dpc_policy(z_t, alpha_bar)`` must return an object with ``u_first``,
    ``objective``, ``slacks``, ``solve_time`` and ``qp_status`` attributes;
    ``backup_policy(y_t)`` returns the input vector directly.  A predictive-
    policy failure falls back to the backup rule for that step and is logged.
    """
    y = np.atleast_1d(np.asarray(y_t, dtype=float))
    t = s.step_count
    v = violation_indicator(y, band)
    if t > 0:
        update_alpha(s, v)
    choice = select_input(s, y, contract)
    incident = None
    objective = slack_norm = solve_time = None
    qp_status = None
    if choice.use_backup:
        u = np.atleast_1d(np.asarray(backup_policy(y), dtype=float))
        policy_name = "backup"
    else:
        try:
            res = dpc_policy(z_t, choice.alpha_bar)
            u = np.atleast_1d(np.asarray(res.u_first, dtype=float))
            objective = res.objective
            slack_norm = float(np.linalg.norm(res.slacks))
            solve_time = res.solve_time
            qp_status = res.qp_status
            policy_name = "dpc"
        except Exception as exc:  # solver failure: safety-first fallback
            _LOG.warning("predictive policy failed at t=%d (%s); using backup", t, exc)
            u = np.atleast_1d(np.asarray(backup_policy(y), dtype=float))
            policy_name = "backup_fallback"
            incident = f"{type(exc).__name__}: {exc}"
            s.active_policy = "backup"
            s.backup_run_length += 1
    s.step_count = t + 1
    rec = StepRecord(t=t, y=y.copy(), u=u.copy(), v=v, alpha=s.alpha_t,
                     alpha_bar=s.alpha_bar, policy=policy_name, objective=objective,
                     slack_norm=slack_norm, solve_time=solve_time,
                     qp_status=qp_status, incident=incident)
    return u, s, rec
