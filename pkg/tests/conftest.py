"""Shared fixtures and brute-force oracles for the test suite."""
from __future__ import annotations

import numpy as np
import pytest

from daddpc import trajdata


def random_lti(rng: np.random.Generator, n_x: int, n_u: int = 1, n_w: int = 1,
               n_y: int = 1, radius: float = 0.9, min_cond: float = 0.02):
    """Random stable LTI system (A, B_u, B_w, C).

    Draws are redrawn (from the same stream, hence deterministic) until the
    controllability and observability matrices are well conditioned; nearly
    unobservable modes would make exact trajectory matching numerically
    hopeless at double precision regardless of the method.
    """
    while True:
        A = rng.normal(size=(n_x, n_x))
        ev = np.abs(np.linalg.eigvals(A)).max()
        A = A * (radius / max(ev, 1e-9))
        B_u = rng.normal(size=(n_x, n_u))
        B_w = rng.normal(size=(n_x, n_w))
        C = rng.normal(size=(n_y, n_x))
        B = np.hstack([B_u, B_w])
        ctrb = np.hstack([np.linalg.matrix_power(A, k) @ B for k in range(n_x)])
        obsv = np.vstack([C @ np.linalg.matrix_power(A, k) for k in range(n_x)])
        sc = np.linalg.svd(ctrb, compute_uv=False)
        so = np.linalg.svd(obsv, compute_uv=False)
        if sc[-1] >= min_cond * sc[0] and so[-1] >= min_cond * so[0]:
            return A, B_u, B_w, C


def simulate_records(sys, u_seq, w_seq, x0=None):
    """Simulate x+ = Ax + B_u u + B_w w; record y measured after each step.

    Returns the (T, n_y) array of end-of-step measurements, matching the
    store convention where record t holds the measurement produced by the
    inputs of step t.
    """
    A, B_u, B_w, C = sys
    x = np.zeros(A.shape[0]) if x0 is None else np.asarray(x0, dtype=float)
    ys = []
    for u, w in zip(u_seq, w_seq):
        x = A @ x + B_u @ np.atleast_1d(u) + B_w @ np.atleast_1d(w)
        ys.append(C @ x)
    return np.asarray(ys)


def store_from_arrays(u, y, w) -> trajdata.TrajectoryStore:
    u = np.atleast_2d(np.asarray(u, dtype=float).T).T if np.ndim(u) == 1 else np.asarray(u)
    y = np.atleast_2d(np.asarray(y, dtype=float).T).T if np.ndim(y) == 1 else np.asarray(y)
    w = np.atleast_2d(np.asarray(w, dtype=float).T).T if np.ndim(w) == 1 else np.asarray(w)
    if u.ndim == 1:
        u = u[:, None]
    if y.ndim == 1:
        y = y[:, None]
    if w.ndim == 1:
        w = w[:, None]
    store = trajdata.TrajectoryStore(u.shape[1], y.shape[1], w.shape[1])
    for t in range(u.shape[0]):
        store.append(u[t], y[t], w[t])
    return store


def make_bundle(rng: np.random.Generator, n_x: int = 3, t_init: int = 4,
                n_pred: int = 8, T: int = 120, noise: float = 0.0):
    """Hankel bundle from a random stable LTI driven by white noise.

    Returns (bundle, sys, (t_init, n_pred)); with ``noise`` > 0 the recorded
    outputs carry additive measurement noise.
    """
    sys = random_lti(rng, n_x)
    u = rng.normal(size=(T, 1))
    w = rng.normal(size=(T, 1))
    y = simulate_records(sys, u, w)
    if noise > 0:
        y = y + rng.normal(scale=noise, size=y.shape)
    store = store_from_arrays(u, y, w)
    bundle = trajdata.build_mosaic(store, t_init, n_pred)
    return bundle, sys, (t_init, n_pred)


def fresh_window(rng: np.random.Generator, sys, t_init: int, n_pred: int):
    """A fresh trajectory split into (z, u_pred, w_pred, y_true_pred)."""
    L = t_init + n_pred
    u = rng.normal(size=(L, 1))
    w = rng.normal(size=(L, 1))
    x0 = rng.normal(size=sys[0].shape[0])
    y = simulate_records(sys, u, w, x0=x0)
    z = np.concatenate([y[:t_init].ravel(), u[:t_init].ravel(), w[:t_init].ravel()])
    return z, u[t_init:].ravel(), w[t_init:].ravel(), y[t_init:].ravel()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
