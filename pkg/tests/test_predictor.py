import numpy as np
import pytest

from daddpc import predictor, trajdata
from daddpc.predictor import (AffinePredictor, DimensionMismatch, SingularKKT,
                              assemble, load_phi, save_phi, solve_inner_direct)

from conftest import (fresh_window, make_bundle, random_lti, simulate_records,
                      store_from_arrays)


def scalar_system_bundle(rng, a=0.8, b_u=0.5, b_w=0.3, T=120, t_init=4, n_pred=10):
    sys = (np.array([[a]]), np.array([[b_u]]), np.array([[b_w]]), np.array([[1.0]]))
    u = rng.normal(size=(T, 1))
    w = rng.normal(size=(T, 1))
    y = simulate_records(sys, u, w)
    store = store_from_arrays(u, y, w)
    return trajdata.build_mosaic(store, t_init, n_pred), sys


def test_exact_on_scalar_lti(rng):
    bundle, sys = scalar_system_bundle(rng)
    p = assemble(bundle, 0.0)
    z, u_pred, w_pred, y_true = fresh_window(rng, sys, 4, 10)
    y_hat = p.predict(z, u_pred, w_pred)
    assert np.abs(y_hat - y_true).max() <= 1e-6


def test_zero_inputs_give_zero_prediction(rng):
    bundle, _ = scalar_system_bundle(rng)
    p = assemble(bundle, 0.0)
    y = p.predict(np.zeros(p.z_dim), np.zeros(10), np.zeros(10))
    np.testing.assert_allclose(y, 0.0, atol=1e-9)


def test_predict_is_linear(rng):
    bundle, sys = scalar_system_bundle(rng)
    p = assemble(bundle, 0.01)
    z1, u1, w1, _ = fresh_window(rng, sys, 4, 10)
    z2, u2, w2, _ = fresh_window(rng, sys, 4, 10)
    lhs = p.predict(z1, u1, w1) + p.predict(z2, u2, w2)
    rhs = p.predict(z1 + z2, u1 + u2, w1 + w2)
    np.testing.assert_allclose(lhs, rhs, atol=1e-9)


def test_exactness_over_random_systems():
    # noise-free data, persistently exciting inputs, no regularization
    for seed in range(8):
        rng = np.random.default_rng(seed)
        n_x = int(rng.integers(1, 5))
        sys = random_lti(rng, n_x)
        t_init, n_pred, T = 4, 10, 140
        u = rng.normal(size=(T, 1))
        w = rng.normal(size=(T, 1))
        y = simulate_records(sys, u, w)
        bundle = trajdata.build_mosaic(store_from_arrays(u, y, w), t_init, n_pred)
        p = assemble(bundle, 0.0)
        z, u_pred, w_pred, y_true = fresh_window(rng, sys, t_init, n_pred)
        assert np.abs(p.predict(z, u_pred, w_pred) - y_true).max() <= 1e-6


def test_oracle_equivalence_clean_and_noisy(rng):
    for noise in (0.0, 0.05):
        for k in range(10):
            local = np.random.default_rng(100 * k + int(noise * 100))
            bundle, sys, (t_init, n_pred) = make_bundle(local, noise=noise)
            p = assemble(bundle, 0.01)
            z, u_pred, w_pred, _ = fresh_window(local, sys, t_init, n_pred)
            inner = solve_inner_direct(bundle, 0.01, z, u_pred, w_pred)
            y_hat = p.predict(z, u_pred, w_pred)
            assert np.abs(y_hat - inner.y_pred).max() <= 1e-8


def test_inner_solution_kkt_optimality(rng):
    bundle, sys, (t_init, n_pred) = make_bundle(rng, noise=0.05)
    qg = 0.01
    z, u_pred, w_pred, _ = fresh_window(rng, sys, t_init, n_pred)
    inner = solve_inner_direct(bundle, qg, z, u_pred, w_pred)
    p_y = t_init * bundle.dims[1]
    y_init = z[:p_y]
    E = np.vstack([bundle.u_init, bundle.w_init, bundle.u_pred, bundle.w_pred])
    e = np.concatenate([z[p_y:], u_pred, w_pred])
    # primal feasibility of the equality system
    scale = max(1.0, np.abs(e).max(), np.abs(inner.g).max())
    assert np.abs(E @ inner.g - e).max() <= 1e-8 * scale
    assert np.abs(bundle.y_init @ inner.g - y_init - inner.delta_y).max() <= 1e-8 * scale
    # stationarity projected onto the feasible directions
    grad = qg * inner.g + bundle.y_init.T @ inner.delta_y
    ns = np.linalg.svd(E)[2][np.linalg.matrix_rank(E):].T  # nullspace basis
    if ns.size:
        assert np.abs(ns.T @ grad).max() <= 1e-8 * max(1.0, np.abs(grad).max())


def test_inner_beats_random_feasible_perturbations(rng):
    bundle, sys, (t_init, n_pred) = make_bundle(rng, noise=0.05)
    qg = 0.01
    z, u_pred, w_pred, _ = fresh_window(rng, sys, t_init, n_pred)
    inner = solve_inner_direct(bundle, qg, z, u_pred, w_pred)

    def objective(g, dy):
        return 0.5 * dy @ dy + 0.5 * qg * g @ g

    E = np.vstack([bundle.u_init, bundle.w_init, bundle.u_pred, bundle.w_pred])
    ns = np.linalg.svd(E)[2][np.linalg.matrix_rank(E):].T
    base = objective(inner.g, inner.delta_y)
    p_y = t_init * bundle.dims[1]
    for _ in range(100):
        d = ns @ rng.normal(scale=0.3, size=ns.shape[1]) if ns.size else 0.0
        g = inner.g + d
        dy = bundle.y_init @ g - z[:p_y]
        assert objective(g, dy) >= base - 1e-10


def test_clean_data_zero_residual(rng):
    bundle, sys, (t_init, n_pred) = make_bundle(rng, noise=0.0)
    z, u_pred, w_pred, _ = fresh_window(rng, sys, t_init, n_pred)
    inner = solve_inner_direct(bundle, 0.0, z, u_pred, w_pred)
    assert np.abs(inner.delta_y).max() <= 1e-7


def test_singular_kkt_reported():
    # duplicated u/w signals make the equality rows dependent; an
    # inconsistent right-hand side cannot be met
    rng = np.random.default_rng(0)
    u = rng.normal(size=(40, 1))
    y = rng.normal(size=(40, 1))
    store = store_from_arrays(u, y, u)  # w identical to u
    bundle = trajdata.build_mosaic(store, 3, 4)
    z = np.zeros(3 * 3)
    with pytest.raises(SingularKKT):
        solve_inner_direct(bundle, 0.0, z, np.ones(4), -np.ones(4))


def test_assemble_rejects_mismatched_split(rng):
    bundle, _, _ = make_bundle(rng)
    with pytest.raises(DimensionMismatch):
        assemble(bundle, 0.0, t_init=5, n_pred=8)


def test_predict_rejects_bad_lengths(rng):
    bundle, _, _ = make_bundle(rng)
    p = assemble(bundle, 0.01)
    with pytest.raises(DimensionMismatch):
        p.predict(np.zeros(p.z_dim + 1), np.zeros(8), np.zeros(8))
    with pytest.raises(DimensionMismatch):
        p.predict(np.zeros(p.z_dim), np.zeros(7), np.zeros(8))


def test_phi_dump_round_trip(tmp_path, rng):
    bundle, sys, (t_init, n_pred) = make_bundle(rng, noise=0.02)
    p = assemble(bundle, 0.01)
    path = tmp_path / "phi.bin"
    save_phi(p, path)
    q = load_phi(path)
    np.testing.assert_array_equal(p.Phi_z, q.Phi_z)
    np.testing.assert_array_equal(p.Phi_u, q.Phi_u)
    np.testing.assert_array_equal(p.Phi_w, q.Phi_w)
    assert (q.t_init, q.n_pred, q.dims) == (p.t_init, p.n_pred, p.dims)
    z, u_pred, w_pred, _ = fresh_window(rng, sys, t_init, n_pred)
    np.testing.assert_array_equal(p.predict(z, u_pred, w_pred),
                                  q.predict(z, u_pred, w_pred))


def test_phi_load_rejects_corrupt_files(tmp_path):
    path = tmp_path / "bad.bin"
    path.write_bytes(b"NOPE" + b"\x00" * 12)
    with pytest.raises(ValueError):
        load_phi(path)
    path.write_bytes(b"")
    with pytest.raises(ValueError):
        load_phi(path)
