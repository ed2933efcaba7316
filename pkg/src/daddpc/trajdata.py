"""Trajectory storage and (mosaic-)Hankel matrix construction.

A :class:`TrajectoryStore` holds time-indexed input/output/exogenous records
grouped into contiguous segments.  Depth-``L`` Hankel matrices are built per
segment and concatenated horizontally (the mosaic construction), so data
gathered in disjoint runs can feed a single predictor.  A segment contributes
columns only if it is at least ``L`` records long.
"""
from __future__ import annotations

import csv
from collections import deque
from dataclasses import dataclass

import numpy as np


class SequenceTooShort(ValueError):
    """Sequence shorter than the requested Hankel depth."""


class NoUsableSegment(ValueError):
    """No stored segment is long enough to contribute Hankel columns."""


def _as_matrix(seq) -> np.ndarray:
    """Coerce a sequence of samples into a (T, d) float array."""
    arr = np.asarray(seq, dtype=float)
    if arr.ndim == 1:
        arr = arr[:, None]
    if arr.ndim != 2:
        raise ValueError(f"expected 1-D or 2-D sample sequence, got shape {arr.shape}")
    return arr


def build_hankel(seq, depth: int) -> np.ndarray:
    """Build the depth-``depth`` block Hankel matrix of a sample sequence.

    ``seq`` is a length-T sequence of d-dimensional samples (scalars allowed).
    The result has ``depth`` block rows of height d and ``T - depth + 1``
    columns; block row ``i`` of column ``j`` equals ``seq[i + j]``.
    """
    arr = _as_matrix(seq)
    T, d = arr.shape
    if depth < 1:
        raise ValueError("depth must be a positive integer")
    if T < depth:
        raise SequenceTooShort(f"sequence length {T} < depth {depth}")
    win = np.lib.stride_tricks.sliding_window_view(arr, depth, axis=0)
    # win[j, k, i] = arr[j + i, k]; want H[i*d + k, j]
    return np.ascontiguousarray(win.transpose(2, 1, 0).reshape(depth * d, T - depth + 1))


@dataclass
class PeReport:
    """Rank diagnostics attached to a persistency-of-excitation check."""

    order: int
    rank: int
    required_rank: int
    singular_values: np.ndarray
    threshold: float

    @property
    def is_pe(self) -> bool:
        return self.rank == self.required_rank

    def __bool__(self) -> bool:
        return self.is_pe


# Singular values below RANK_RTOL * s_max count as zero when computing
# numeric rank (keeps PE checks robust to round-off).
RANK_RTOL = 1e-9


def is_persistently_exciting(u_seq, order: int) -> PeReport:
    """Check persistency of excitation of the given order.

    True iff the depth-``order`` Hankel matrix of the sequence has full row
    rank, with rank computed from singular values relative to ``RANK_RTOL``.
    """
    H = build_hankel(u_seq, order)
    sv = np.linalg.svd(H, compute_uv=False)
    smax = sv[0] if sv.size else 0.0
    tau = RANK_RTOL * smax
    rank = int(np.count_nonzero(sv > tau))
    return PeReport(order=order, rank=rank, required_rank=H.shape[0],
                    singular_values=sv, threshold=tau)


@dataclass
class HankelBundle:
    """Aligned Hankel matrices for inputs, outputs and exogenous signals.

    All three matrices share depth ``t_init + N`` (in block rows) and the
    same column count; column ``j`` of every matrix covers the same record
    window of the same segment.
    """

    H_u: np.ndarray
    H_y: np.ndarray
    H_w: np.ndarray
    t_init: int
    n_pred: int
    dims: tuple[int, int, int]  # (n_u, n_y, n_w)
    column_count: int
    stamp: str

    @property
    def depth(self) -> int:
        return self.t_init + self.n_pred

    # Split views: first t_init block rows condition the predictor, the last
    # n_pred block rows are predicted.
    @property
    def u_init(self) -> np.ndarray:
        return self.H_u[: self.t_init * self.dims[0]]

    @property
    def u_pred(self) -> np.ndarray:
        return self.H_u[self.t_init * self.dims[0]:]

    @property
    def y_init(self) -> np.ndarray:
        return self.H_y[: self.t_init * self.dims[1]]

    @property
    def y_pred(self) -> np.ndarray:
        return self.H_y[self.t_init * self.dims[1]:]

    @property
    def w_init(self) -> np.ndarray:
        return self.H_w[: self.t_init * self.dims[2]]

    @property
    def w_pred(self) -> np.ndarray:
        return self.H_w[self.t_init * self.dims[2]:]


class TrajectoryStore:
    """Ordered (u, y, w) records with segment bookkeeping.

    Records live in insertion order; ``break_segment`` starts a new contiguous
    run.  When ``max_records`` is set the store behaves as a ring buffer and
    silently drops its oldest records.  Records containing non-finite entries
    are rejected at insertion.
    """

    def __init__(self, n_u: int, n_y: int, n_w: int, max_records: int | None = None):
        if min(n_u, n_y, n_w) < 1:
            raise ValueError("all signal dimensions must be positive")
        self.dims = (n_u, n_y, n_w)
        self.max_records = max_records
        self._u: deque[np.ndarray] = deque()
        self._y: deque[np.ndarray] = deque()
        self._w: deque[np.ndarray] = deque()
        self._t: deque[int] = deque()
        self._seg: deque[int] = deque()
        self._next_t = 0
        self._seg_id = 0

    def __len__(self) -> int:
        return len(self._t)

    def _check(self, name: str, v, dim: int) -> np.ndarray:
        arr = np.atleast_1d(np.asarray(v, dtype=float))
        if arr.shape != (dim,):
            raise ValueError(f"{name} has shape {arr.shape}, expected ({dim},)")
        if not np.all(np.isfinite(arr)):
            raise ValueError(f"non-finite entry in {name}: {arr}")
        return arr

    def append(self, u, y, w, t: int | None = None) -> None:
        n_u, n_y, n_w = self.dims
        u = self._check("u", u, n_u)
        y = self._check("y", y, n_y)
        w = self._check("w", w, n_w)
        if t is None:
            t = self._next_t
        elif self._t and self._seg[-1] == self._seg_id and t <= self._t[-1]:
            raise ValueError(
                f"timestamp {t} does not increase within segment {self._seg_id}")
        self._u.append(u)
        self._y.append(y)
        self._w.append(w)
        self._t.append(int(t))
        self._seg.append(self._seg_id)
        self._next_t = int(t) + 1
        if self.max_records is not None:
            while len(self._t) > self.max_records:
                for q in (self._u, self._y, self._w, self._t, self._seg):
                    q.popleft()

    def break_segment(self) -> None:
        self._seg_id += 1

    def segments(self) -> list[tuple[int, int, int]]:
        """Return (segment_id, start, stop) index ranges in insertion order."""
        out = []
        seg = list(self._seg)
        i = 0
        while i < len(seg):
            j = i
            while j < len(seg) and seg[j] == seg[i]:
                j += 1
            out.append((seg[i], i, j))
            i = j
        return out

    def arrays(self, start: int = 0, stop: int | None = None):
        """Dense (U, Y, W, t) arrays over the given record index range."""
        stop = len(self) if stop is None else stop
        sl = slice(start, stop)
        U = np.array(list(self._u)[sl]).reshape(stop - start, self.dims[0])
        Y = np.array(list(self._y)[sl]).reshape(stop - start, self.dims[1])
        W = np.array(list(self._w)[sl]).reshape(stop - start, self.dims[2])
        t = np.array(list(self._t)[sl], dtype=int)
        return U, Y, W, t

    def slice(self, start: int, stop: int | None = None) -> "TrajectoryStore":
        """A new store holding copies of records [start, stop)."""
        stop = len(self) if stop is None else min(stop, len(self))
        start = max(start, 0)
        sub = TrajectoryStore(*self.dims)
        if stop <= start:
            return sub
        U, Y, W, t = self.arrays(start, stop)
        seg = list(self._seg)[start:stop]
        prev = None
        for k in range(stop - start):
            if prev is not None and seg[k] != prev:
                sub.break_segment()
            sub.append(U[k], Y[k], W[k], t=int(t[k]))
            prev = seg[k]
        return sub

    def tail(self, n: int) -> "TrajectoryStore":
        """A new store holding the most recent ``n`` records."""
        return self.slice(len(self) - min(n, len(self)))

    def init_window(self, t_init: int) -> np.ndarray:
        """Stacked [y_init; u_init; w_init] over the most recent ``t_init`` records.

        The window must lie inside the current segment.
        """
        if len(self) < t_init:
            raise SequenceTooShort(f"store holds {len(self)} records, need {t_init}")
        seg_tail = list(self._seg)[-t_init:]
        if len(set(seg_tail)) != 1:
            raise NoUsableSegment("most recent records span a segment break")
        U, Y, W, _ = self.arrays(len(self) - t_init)
        return np.concatenate([Y.ravel(), U.ravel(), W.ravel()])

    # -- CSV interchange ----------------------------------------------------

    def to_csv(self, path) -> None:
        n_u, n_y, n_w = self.dims
        header = (["step", "seg"] + [f"u{i}" for i in range(n_u)]
                  + [f"y{i}" for i in range(n_y)] + [f"w{i}" for i in range(n_w)])
        with open(path, "w", newline="", encoding="utf-8") as fh:
            wr = csv.writer(fh)
            wr.writerow(header)
            for t, s, u, y, w in zip(self._t, self._seg, self._u, self._y, self._w):
                wr.writerow([t, s] + [repr(float(v)) for v in u]
                            + [repr(float(v)) for v in y]
                            + [repr(float(v)) for v in w])

    @classmethod
    def from_csv(cls, path, n_u: int, n_y: int, n_w: int) -> "TrajectoryStore":
        store = cls(n_u, n_y, n_w)
        with open(path, newline="", encoding="utf-8") as fh:
            rd = csv.reader(fh)
            header = next(rd)
            if len(header) != 2 + n_u + n_y + n_w:
                raise ValueError(f"CSV header has {len(header)} columns, "
                                 f"expected {2 + n_u + n_y + n_w}")
            prev_seg = None
            for row in rd:
                t, seg = int(row[0]), int(row[1])
                vals = [float(v) for v in row[2:]]
                if prev_seg is not None and seg != prev_seg:
                    store.break_segment()
                store.append(vals[:n_u], vals[n_u:n_u + n_y], vals[n_u + n_y:], t=t)
                prev_seg = seg
        return store


def build_mosaic(store: TrajectoryStore, t_init: int, n_pred: int) -> HankelBundle:
    """Concatenate per-segment Hankel matrices of depth ``t_init + n_pred``.

    Segments shorter than the depth contribute no columns; raises
    :class:`NoUsableSegment` if none qualifies.
    """
    L = t_init + n_pred
    blocks_u, blocks_y, blocks_w = [], [], []
    first_t = None
    for seg_id, start, stop in store.segments():
        if stop - start < L:
            continue
        U, Y, W, t = store.arrays(start, stop)
        if first_t is None:
            first_t = int(t[0])
        blocks_u.append(build_hankel(U, L))
        blocks_y.append(build_hankel(Y, L))
        blocks_w.append(build_hankel(W, L))
    if not blocks_u:
        raise NoUsableSegment(f"no segment of length >= {L} in store of {len(store)}")
    H_u = np.hstack(blocks_u)
    H_y = np.hstack(blocks_y)
    H_w = np.hstack(blocks_w)
    stamp = f"t0={first_t},cols={H_u.shape[1]},L={L}"
    return HankelBundle(H_u=H_u, H_y=H_y, H_w=H_w, t_init=t_init, n_pred=n_pred,
                        dims=store.dims, column_count=H_u.shape[1], stamp=stamp)
