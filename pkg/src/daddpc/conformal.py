"""Split-conformal quantification of per-step output disturbance bounds.

Absolute prediction residuals are collected per prediction step i and output
dimension j.  The half-width of the symmetric disturbance box at confidence
parameter ``sigma`` is the ceil(n_cal * (1 - sigma))-th smallest calibration
residual; ``sigma = 1`` returns the degenerate zero box.  Residual arrays can
be updated online with FIFO eviction once a window cap is reached.
"""
from __future__ import annotations

import bisect
import csv
import math
from collections import deque

import numpy as np

from .predictor import AffinePredictor
from .trajdata import TrajectoryStore

MIN_ANCHORS = 20  # below this, calibration quantiles are statistically meaningless


class InsufficientData(ValueError):
    """Too few calibration anchors for meaningful quantiles."""


class EmptyTable(LookupError):
    """Requested half-width from an empty residual array."""


class NonFiniteResidual(ValueError):
    """Residual pushed into the table is NaN or infinite."""


class QuantileTable:
    """Sorted residuals per (prediction step, output dimension).

    ``n_cal`` is the anchor count recorded at calibration time and fixes the
    quantile index; later pushes change the arrays but not ``n_cal``.
    Eviction is FIFO by insertion age, tracked separately from sort order.
    """

    def __init__(self, n_pred: int, n_y: int, n_cal: int, window_cap: int,
                 source_policy: str = "backup"):
        if window_cap < 1:
            raise ValueError("window_cap must be positive")
        self.n_pred = n_pred
        self.n_y = n_y
        self.n_cal = n_cal
        self.window_cap = window_cap
        self.source_counts: dict[str, int] = {}
        self._sorted: list[list[list[float]]] = [
            [[] for _ in range(n_y)] for _ in range(n_pred)]
        self._fifo: list[list[deque[float]]] = [
            [deque() for _ in range(n_y)] for _ in range(n_pred)]
        self._source_policy = source_policy

    def residuals(self, i: int, j: int) -> np.ndarray:
        return np.asarray(self._sorted[i][j])

    def push_residual(self, i: int, j: int, r: float, policy: str | None = None) -> None:
        """Insert a residual keeping sort order; evict the oldest at the cap."""
        r = float(r)
        if not math.isfinite(r) or r < 0:
            raise NonFiniteResidual(f"residual must be finite and >= 0, got {r}")
        srt, fifo = self._sorted[i][j], self._fifo[i][j]
        bisect.insort(srt, r)
        fifo.append(r)
        if len(fifo) > self.window_cap:
            old = fifo.popleft()
            del srt[bisect.bisect_left(srt, old)]
        tag = policy or self._source_policy
        self.source_counts[tag] = self.source_counts.get(tag, 0) + 1

    def half_width(self, i: int, j: int, sigma: float) -> float:
        """Disturbance box half-width at confidence parameter ``sigma``.

        ``sigma = 1`` yields 0 (the nominal zero box).  Otherwise the
        ceil(n_cal * (1 - sigma))-th smallest residual; if that index exceeds
        the current array length (possible after windowed updates) the largest
        residual is returned.
        """
        if not 0.0 <= sigma <= 1.0:
            raise ValueError(f"sigma must be within [0, 1], got {sigma}")
        if sigma == 1.0:
            return 0.0
        srt = self._sorted[i][j]
        if not srt:
            raise EmptyTable(f"no residuals recorded for step {i}, output {j}")
        k = math.ceil(self.n_cal * (1.0 - sigma))
        k = max(k, 1)
        if k > len(srt):
            return srt[-1]
        return srt[k - 1]

    def max_half_widths(self) -> np.ndarray:
        """(n_pred, n_y) array of the largest stored residuals."""
        out = np.zeros((self.n_pred, self.n_y))
        for i in range(self.n_pred):
            for j in range(self.n_y):
                srt = self._sorted[i][j]
                out[i, j] = srt[-1] if srt else 0.0
        return out

    def to_csv(self, path) -> None:
        """Audit export: one row (i, j, sorted residuals...) per table cell."""
        with open(path, "w", newline="", encoding="utf-8") as fh:
            wr = csv.writer(fh)
            for i in range(self.n_pred):
                for j in range(self.n_y):
                    wr.writerow([i, j] + [repr(float(v)) for v in self._sorted[i][j]])


def half_width(tab: QuantileTable, i: int, j: int, sigma: float) -> float:
    return tab.half_width(i, j, sigma)


def push_residual(tab: QuantileTable, i: int, j: int, r: float,
                  policy: str | None = None) -> QuantileTable:
    tab.push_residual(i, j, r, policy=policy)
    return tab


def calibrate(store: TrajectoryStore, pred: AffinePredictor, t_init: int,
              n_pred: int, window_cap: int | None = None,
              pred_start_after: int | None = None,
              source_policy: str = "backup") -> QuantileTable:
    """Build a quantile table from recorded closed-loop data.

    For every anchor window (a contiguous run of ``t_init + n_pred`` records
    within one segment), the predictor is evaluated with the actual recorded
    inputs and exogenous signals over the horizon, and the absolute
    per-step/per-output prediction errors against the recorded outputs enter
    the table.  ``pred_start_after`` restricts anchors to those whose first
    predicted record has timestamp >= the given value, which keeps calibration
    residuals out of the data that trained the predictor.
    """
    n_u, n_y, n_w = store.dims
    if (t_init, n_pred) != (pred.t_init, pred.n_pred) or store.dims != pred.dims:
        raise ValueError("store/predictor dimensions disagree")
    L = t_init + n_pred
    anchors = []
    for seg_id, start, stop in store.segments():
        if stop - start < L:
            continue
        U, Y, W, ts = store.arrays(start, stop)
        for s in range(stop - start - L + 1):
            if pred_start_after is not None and ts[s + t_init] < pred_start_after:
                continue
            anchors.append((U, Y, W, s))
    n_cal = len(anchors)
    if n_cal < MIN_ANCHORS:
        raise InsufficientData(f"{n_cal} anchors < required {MIN_ANCHORS}")
    cap = n_cal if window_cap is None else window_cap
    tab = QuantileTable(n_pred=n_pred, n_y=n_y, n_cal=n_cal, window_cap=cap,
                        source_policy=source_policy)
    for U, Y, W, s in anchors:
        z = np.concatenate([Y[s:s + t_init].ravel(), U[s:s + t_init].ravel(),
                            W[s:s + t_init].ravel()])
        u_pred = U[s + t_init:s + L].ravel()
        w_pred = W[s + t_init:s + L].ravel()
        y_hat = pred.predict(z, u_pred, w_pred).reshape(n_pred, n_y)
        err = np.abs(Y[s + t_init:s + L] - y_hat)
        for i in range(n_pred):
            for j in range(n_y):
                tab.push_residual(i, j, float(err[i, j]), policy=source_policy)
    return tab
