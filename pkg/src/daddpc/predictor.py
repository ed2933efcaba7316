"""Affine multi-step output predictor built from Hankel data.

The prediction map comes from a regularized trajectory-matching problem over
the Hankel column weights g:

    min_g  0.5 ||H_y_init g - y_init||^2 + 0.5 g' Q_g g
    s.t.   [H_u_init; H_w_init; H_u_pred; H_w_pred] g
               = [u_init; w_init; u_pred; w_pred]

with the output-history residual playing the role of a slack on y_init.  The
problem is an equality-constrained convex QP, so its minimizer is linear in
the right-hand side; we factor the KKT system once and extract the three
prediction matrices by pushing basis right-hand sides through the
factorization.  Every online prediction is then a single affine evaluation

    y_pred = Phi_z z + Phi_u u_pred + Phi_w w_pred,

where z stacks [y_init; u_init; w_init].  ``solve_inner_direct`` solves the
same problem from scratch for one right-hand side and serves as the
equivalence oracle for the precomputed map.
"""
from __future__ import annotations

import logging
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.linalg
from scipy.linalg import lapack

from .trajdata import HankelBundle

_LOG = logging.getLogger(__name__)

_MAGIC = b"APHI"
_RIDGE = 1e-10  # fallback ridge on the g-block when Q_g = 0 leaves the KKT singular
_RCOND_MIN = 1e-14


class SingularKKT(np.linalg.LinAlgError):
    """The predictor KKT system is numerically singular."""

    def __init__(self, msg: str, cond_estimate: float = np.inf):
        super().__init__(f"{msg} (condition estimate {cond_estimate:.3e})")
        self.cond_estimate = cond_estimate


class DimensionMismatch(ValueError):
    """Predictor inputs do not match the trained dimensions."""


def _qg_diag(q_g, m: int) -> np.ndarray:
    qg = np.asarray(q_g, dtype=float)
    if qg.ndim == 0:
        qg = np.full(m, float(qg))
    if qg.shape != (m,):
        raise DimensionMismatch(f"Q_g diagonal has shape {qg.shape}, expected ({m},)")
    if np.any(qg < 0):
        raise ValueError("Q_g must be nonnegative")
    return qg


@dataclass
class AffinePredictor:
    """Precomputed affine map from (z, u_pred, w_pred) to y_pred."""

    Phi_z: np.ndarray
    Phi_u: np.ndarray
    Phi_w: np.ndarray
    t_init: int
    n_pred: int
    dims: tuple[int, int, int]  # (n_u, n_y, n_w)
    q_g_weight: np.ndarray | None
    bundle_stamp: str

    @property
    def z_dim(self) -> int:
        n_u, n_y, n_w = self.dims
        return self.t_init * (n_y + n_u + n_w)

    def predict(self, z, u_pred, w_pred) -> np.ndarray:
        """Evaluate the affine predictor; all inputs are flat stacked vectors."""
        z = np.asarray(z, dtype=float).ravel()
        u = np.asarray(u_pred, dtype=float).ravel()
        w = np.asarray(w_pred, dtype=float).ravel()
        n_u, n_y, n_w = self.dims
        if z.size != self.z_dim:
            raise DimensionMismatch(f"z has length {z.size}, expected {self.z_dim}")
        if u.size != self.n_pred * n_u:
            raise DimensionMismatch(f"u_pred has length {u.size}, expected {self.n_pred * n_u}")
        if w.size != self.n_pred * n_w:
            raise DimensionMismatch(f"w_pred has length {w.size}, expected {self.n_pred * n_w}")
        return self.Phi_z @ z + self.Phi_u @ u + self.Phi_w @ w


def predict(p: AffinePredictor, z, u_pred, w_pred) -> np.ndarray:
    return p.predict(z, u_pred, w_pred)


def _kkt_factor(hess: np.ndarray, E: np.ndarray):
    m = hess.shape[0]
    m_e = E.shape[0]
    K = np.zeros((m + m_e, m + m_e))
    K[:m, :m] = hess
    K[:m, m:] = E.T
    K[m:, :m] = E
    anorm = float(np.abs(K).sum(axis=0).max())
    lu = scipy.linalg.lu_factor(K, check_finite=False)
    rcond = lapack.dgecon(lu[0], anorm, norm="1")[0]
    return K, lu, rcond


def assemble(bundle: HankelBundle, q_g, t_init: int | None = None,
             n_pred: int | None = None) -> AffinePredictor:
    """Factor the inner problem once and extract Phi_z, Phi_u, Phi_w.

    ``q_g`` is a nonnegative scalar or per-column diagonal.  If ``q_g`` is
    identically zero and the KKT system is singular (over-rich column space on
    clean data), a ridge of 1e-10 is added to the g-block with a warning.
    """
    t_init = bundle.t_init if t_init is None else t_init
    n_pred = bundle.n_pred if n_pred is None else n_pred
    if t_init != bundle.t_init or n_pred != bundle.n_pred:
        raise DimensionMismatch("bundle depth split does not match requested t_init/N")
    n_u, n_y, n_w = bundle.dims
    M = bundle.column_count
    qg = _qg_diag(q_g, M)

    Hyi = bundle.y_init
    Hyp = bundle.y_pred
    E = np.vstack([bundle.u_init, bundle.w_init, bundle.u_pred, bundle.w_pred])

    hess = Hyi.T @ Hyi
    hess[np.diag_indices(M)] += qg
    K0 = None
    K, lu, rcond = _kkt_factor(hess, E)
    if rcond < _RCOND_MIN:
        if np.all(qg == 0.0):
            # ridge scaled to the Hessian magnitude so large data ranges get
            # the same relative regularization; the bias it introduces is
            # removed below by refining against the unridged system
            K0 = K.copy()
            ridge = _RIDGE * max(1.0, float(np.abs(hess).max()))
            _LOG.warning(
                "singular KKT with zero g-regularization; adding %.2e ridge", ridge)
            hess[np.diag_indices(M)] += ridge
            K, lu, rcond = _kkt_factor(hess, E)
        if rcond < _RCOND_MIN:
            raise SingularKKT("predictor KKT factorization failed",
                              cond_estimate=1.0 / max(rcond, 1e-300))

    # Basis right-hand sides for (y_init, u_init, w_init, u_pred, w_pred).
    p_y, p_u, p_w = t_init * n_y, t_init * n_u, t_init * n_w
    f_u, f_w = n_pred * n_u, n_pred * n_w
    m_e = E.shape[0]
    n_rhs = p_y + p_u + p_w + f_u + f_w
    R = np.zeros((M + m_e, n_rhs))
    R[:M, :p_y] = Hyi.T
    R[M:, p_y:] = np.eye(m_e)  # e-block order matches E stacking
    X = scipy.linalg.lu_solve(lu, R, check_finite=False)
    if K0 is not None:
        # the basis systems are consistent on clean data, so refinement
        # against the singular unridged matrix restores the prediction map
        for _ in range(2):
            X = X + scipy.linalg.lu_solve(lu, R - K0 @ X, check_finite=False)
    G_map = X[:M]
    Y_map = Hyp @ G_map

    Phi_z = Y_map[:, : p_y + p_u + p_w]
    Phi_u = Y_map[:, p_y + p_u + p_w: p_y + p_u + p_w + f_u]
    Phi_w = Y_map[:, p_y + p_u + p_w + f_u:]
    return AffinePredictor(Phi_z=Phi_z, Phi_u=Phi_u, Phi_w=Phi_w, t_init=t_init,
                           n_pred=n_pred, dims=bundle.dims, q_g_weight=qg,
                           bundle_stamp=bundle.stamp)


@dataclass
class InnerSolution:
    g: np.ndarray
    delta_y: np.ndarray
    y_pred: np.ndarray


def solve_inner_direct(bundle: HankelBundle, q_g, z, u_pred, w_pred) -> InnerSolution:
    """Solve the inner problem from scratch for one right-hand side.

    Assembles the full KKT system in the variables (g, delta_y) without the
    elimination used by :func:`assemble`; the minimum-norm solution is taken
    when the system is rank deficient, which leaves y_pred unchanged.  Used as
    the equivalence oracle for assemble/predict.
    """
    n_u, n_y, n_w = bundle.dims
    t_init, n_pred = bundle.t_init, bundle.n_pred
    M = bundle.column_count
    qg = _qg_diag(q_g, M)
    p_y = t_init * n_y
    z = np.asarray(z, dtype=float).ravel()
    if z.size != t_init * (n_y + n_u + n_w):
        raise DimensionMismatch("z has wrong length")
    y_init = z[:p_y]
    e = np.concatenate([z[p_y:], np.asarray(u_pred, float).ravel(),
                        np.asarray(w_pred, float).ravel()])

    Hyi = bundle.y_init
    E = np.vstack([bundle.u_init, bundle.w_init, bundle.u_pred, bundle.w_pred])
    m_e = E.shape[0]
    if e.size != m_e:
        raise DimensionMismatch("u_pred/w_pred have wrong lengths")

    # Variables: [g (M); delta_y (p_y); mu (p_y); nu (m_e)]
    dim = M + p_y + p_y + m_e
    K = np.zeros((dim, dim))
    K[:M, :M] = np.diag(qg)
    K[:M, M + p_y: M + 2 * p_y] = Hyi.T
    K[:M, M + 2 * p_y:] = E.T
    K[M: M + p_y, M: M + p_y] = np.eye(p_y)
    K[M: M + p_y, M + p_y: M + 2 * p_y] = -np.eye(p_y)
    K[M + p_y: M + 2 * p_y, :M] = Hyi
    K[M + p_y: M + 2 * p_y, M: M + p_y] = -np.eye(p_y)
    K[M + 2 * p_y:, :M] = E
    rhs = np.concatenate([np.zeros(M + p_y), y_init, e])

    sol, *_ = np.linalg.lstsq(K, rhs, rcond=None)
    scale = max(1.0, float(np.abs(rhs).max()), float(np.abs(sol).max()))
    if float(np.abs(K @ sol - rhs).max()) > 1e-7 * scale:
        raise SingularKKT("inner KKT system is inconsistent")
    g = sol[:M]
    delta_y = sol[M: M + p_y]
    return InnerSolution(g=g, delta_y=delta_y, y_pred=bundle.y_pred @ g)


# -- Binary interchange of the Phi matrices ----------------------------------
# 16-byte header: 4-byte magic + five little-endian uint16 dims + 2 pad bytes,
# followed by Phi_z, Phi_u, Phi_w as row-major little-endian float64.

def save_phi(p: AffinePredictor, path) -> None:
    n_u, n_y, n_w = p.dims
    header = _MAGIC + struct.pack("<5H", p.n_pred, n_y, p.t_init, n_u, n_w) + b"\x00\x00"
    with open(path, "wb") as fh:
        fh.write(header)
        for mat in (p.Phi_z, p.Phi_u, p.Phi_w):
            fh.write(np.ascontiguousarray(mat, dtype="<f8").tobytes())


def load_phi(path) -> AffinePredictor:
    raw = Path(path).read_bytes()
    if len(raw) < 16 or raw[:4] != _MAGIC:
        raise ValueError(f"{path} is not a predictor dump")
    n_pred, n_y, t_init, n_u, n_w = struct.unpack("<5H", raw[4:14])
    rows = n_pred * n_y
    cols = (t_init * (n_y + n_u + n_w), n_pred * n_u, n_pred * n_w)
    need = 16 + 8 * rows * sum(cols)
    if len(raw) != need:
        raise ValueError(f"{path} truncated: {len(raw)} bytes, expected {need}")
    mats = []
    off = 16
    for c in cols:
        mats.append(np.frombuffer(raw, dtype="<f8", count=rows * c,
                                  offset=off).reshape(rows, c).copy())
        off += 8 * rows * c
    return AffinePredictor(Phi_z=mats[0], Phi_u=mats[1], Phi_w=mats[2],
                           t_init=t_init, n_pred=n_pred, dims=(n_u, n_y, n_w),
                           q_g_weight=None, bundle_stamp=f"file:{Path(path).name}")
