"""Dense convex quadratic programming.

Solves  min 0.5 x'Px + q'x  s.t.  Gx <= h,  Ax = b  with P symmetric PSD.

The solver is a Mehrotra predictor-corrector interior-point iteration on the
perturbed KKT conditions, finished by an active-set "polish": an equality-
constrained KKT solve on the rows identified as active, accepted only when
the independently recomputed KKT residual meets tolerance.  When a starting
point is supplied, the polish is attempted first with the active set read off
that point, which makes receding-horizon resolves cheap.  Primal
infeasibility is reported through a Farkas-ray check on the dual iterates.
All arithmetic is fixed-order numpy, so identical inputs produce bit-identical
results.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import scipy.linalg

_LOG = logging.getLogger(__name__)


class DimensionMismatch(ValueError):
    """Problem matrices/vectors have inconsistent shapes."""


class NonSymmetricP(ValueError):
    """Quadratic cost matrix is not symmetric within tolerance."""


@dataclass
class QpProblem:
    """Data of a dense convex QP.  Missing constraint blocks may be None."""

    P: np.ndarray
    q: np.ndarray
    G: np.ndarray | None = None
    h: np.ndarray | None = None
    A: np.ndarray | None = None
    b: np.ndarray | None = None

    def __post_init__(self):
        self.P = np.asarray(self.P, dtype=float)
        self.q = np.asarray(self.q, dtype=float).ravel()
        n = self.q.size
        if self.P.shape != (n, n):
            raise DimensionMismatch(f"P is {self.P.shape}, q has length {n}")
        scale = max(1.0, float(np.abs(self.P).max()) if self.P.size else 1.0)
        if float(np.abs(self.P - self.P.T).max()) > 1e-12 * scale:
            raise NonSymmetricP("P must be symmetric within 1e-12 (relative)")
        for M_name, v_name in (("G", "h"), ("A", "b")):
            M = getattr(self, M_name)
            v = getattr(self, v_name)
            if (M is None) != (v is None):
                raise DimensionMismatch(f"{M_name} and {v_name} must appear together")
            if M is not None:
                M = np.asarray(M, dtype=float)
                v = np.asarray(v, dtype=float).ravel()
                if M.ndim != 2 or M.shape[1] != n or M.shape[0] != v.size:
                    raise DimensionMismatch(
                        f"{M_name} is {M.shape}, {v_name} has length {v.size}, n={n}")
                setattr(self, M_name, M)
                setattr(self, v_name, v)

    @property
    def n(self) -> int:
        return self.q.size

    @property
    def m_ineq(self) -> int:
        return 0 if self.G is None else self.G.shape[0]

    @property
    def m_eq(self) -> int:
        return 0 if self.A is None else self.A.shape[0]

    def objective(self, x: np.ndarray) -> float:
        return float(0.5 * x @ self.P @ x + self.q @ x)


@dataclass
class QpConfig:
    tol_kkt: float = 1e-7
    tol_feas: float = 1e-7
    max_iter: int = 20000


@dataclass
class QpSolution:
    x: np.ndarray
    lambda_ineq: np.ndarray
    nu_eq: np.ndarray
    status: str  # "Optimal" | "MaxIter" | "Infeasible"
    kkt_residual: float
    iterations: int
    objective: float


def kkt_errors(p: QpProblem, x, lam, nu) -> dict[str, float]:
    """Scaled KKT error components; the overall residual is their max."""
    Px = p.P @ x
    terms = [Px, p.q]
    stat = Px + p.q
    if p.m_ineq:
        Gl = p.G.T @ lam
        stat = stat + Gl
        terms.append(Gl)
    if p.m_eq:
        An = p.A.T @ nu
        stat = stat + An
        terms.append(An)
    s_d = max(1.0, *(float(np.abs(t).max()) if t.size else 0.0 for t in terms))
    out = {"stationarity": float(np.abs(stat).max()) / s_d if stat.size else 0.0}
    if p.m_ineq:
        Gx = p.G @ x
        slack = p.h - Gx
        s_p = max(1.0, float(np.abs(Gx).max()), float(np.abs(p.h).max()))
        out["primal_ineq"] = max(0.0, float((-slack).max())) / s_p
        out["dual_sign"] = max(0.0, -float(lam.min())) if lam.size else 0.0
        s_c = max(1.0, float(np.abs(lam).max()), float(np.abs(slack).max()))
        out["complementarity"] = float(np.abs(lam * np.maximum(slack, 0.0)).max()) / s_c
    if p.m_eq:
        Ax = p.A @ x
        s_e = max(1.0, float(np.abs(Ax).max()), float(np.abs(p.b).max()))
        out["primal_eq"] = float(np.abs(Ax - p.b).max()) / s_e
    return out


def kkt_residual(p: QpProblem, x, lam, nu) -> float:
    return max(kkt_errors(p, x, lam, nu).values())


def _stack(p: QpProblem):
    """Constraint rows as l <= Cx <= u (inequalities first, then equalities)."""
    blocks, lo, up, eq = [], [], [], []
    if p.m_ineq:
        blocks.append(p.G)
        lo.append(np.full(p.m_ineq, -np.inf))
        up.append(p.h)
        eq.append(np.zeros(p.m_ineq, dtype=bool))
    if p.m_eq:
        blocks.append(p.A)
        lo.append(p.b)
        up.append(p.b)
        eq.append(np.ones(p.m_eq, dtype=bool))
    C = np.vstack(blocks)
    return C, np.concatenate(lo), np.concatenate(up), np.concatenate(eq)


def _is_diagonal(P: np.ndarray) -> bool:
    return P.size and np.count_nonzero(P - np.diag(np.diagonal(P))) == 0


def _active_kkt_solve(p: QpProblem, C, u, is_eq, active):
    """Solve the equality-constrained QP fixing ``active`` rows at their bounds.

    Returns (x, full-dual-vector) or None if the reduced KKT is hopeless.
    Uses a lightly regularized factorization plus iterative refinement; for
    diagonal P the dual Schur complement replaces the full KKT factorization.
    """
    n = p.n
    D = C[active]
    d = u[active]
    k = D.shape[0]
    reg = 1e-11 * max(1.0, float(np.abs(p.P).max()) if p.P.size else 1.0)

    if _is_diagonal(p.P):
        pi = 1.0 / (np.diagonal(p.P) + reg)
        S = (D * pi) @ D.T
        S[np.diag_indices(k)] += reg
        try:
            fac = scipy.linalg.cho_factor(S, check_finite=False)
        except (ValueError, scipy.linalg.LinAlgError):
            return None

        def solve_pair(r1, r2):
            mu = scipy.linalg.cho_solve(fac, (D * pi) @ r1 - r2, check_finite=False)
            return pi * (r1 - D.T @ mu), mu

        x, mu = solve_pair(-p.q, d)
        for _ in range(2):  # refine against the exact (unregularized) system
            r1 = -p.q - p.P @ x - D.T @ mu
            r2 = d - D @ x
            dx, dmu = solve_pair(r1, r2)
            x = x + dx
            mu = mu + dmu
        sol = np.concatenate([x, mu])
    else:
        K = np.zeros((n + k, n + k))
        K[:n, :n] = p.P
        K[:n, n:] = D.T
        K[n:, :n] = D
        rhs = np.concatenate([-p.q, d])
        K_reg = K.copy()
        K_reg[:n, :n] += reg * np.eye(n)
        K_reg[n:, n:] -= reg * np.eye(k)
        try:
            lu = scipy.linalg.lu_factor(K_reg, check_finite=False)
        except (ValueError, scipy.linalg.LinAlgError):
            return None
        sol = scipy.linalg.lu_solve(lu, rhs, check_finite=False)
        if not np.all(np.isfinite(sol)):
            return None
        for _ in range(2):
            r = rhs - K @ sol
            sol = sol + scipy.linalg.lu_solve(lu, r, check_finite=False)
    if not np.all(np.isfinite(sol)):
        return None
    x = sol[:n]
    mu = sol[n:]
    duals = np.zeros(C.shape[0])
    duals[active] = mu
    return x, duals


def _try_polish(p: QpProblem, C, u, is_eq, active, tol):
    """Single-shot polish: pin the guessed active rows, solve the reduced KKT
    and verify via the independently computed KKT residual.

    Returns (verified, x, lam, nu, residual) or None when the reduced solve is
    hopeless.
    """
    act = active.copy()
    act[is_eq] = True
    res = _active_kkt_solve(p, C, u, is_eq, act)
    if res is None:
        return None
    x, duals = res
    m_ineq = int((~is_eq).sum())
    lam = duals[:m_ineq]
    nu = duals[m_ineq:]
    resid = kkt_residual(p, x, lam, nu)
    return resid <= tol, x, lam, nu, resid


def _farkas_infeasible(p: QpProblem, lam, nu, eps: float = 1e-7) -> bool:
    """Primal infeasibility certificate: a dual ray with G'lam + A'nu ~ 0,
    lam >= 0 and h'lam + b'nu < 0."""
    nrm = float(np.abs(lam).max()) if lam.size else 0.0
    if p.m_eq:
        nrm = max(nrm, float(np.abs(nu).max()))
    if nrm < 1e-8:
        return False
    lam_n = lam / nrm
    ray = p.G.T @ lam_n if p.m_ineq else 0.0
    support = float(p.h @ lam_n) if p.m_ineq else 0.0
    if p.m_eq:
        nu_n = nu / nrm
        ray = ray + p.A.T @ nu_n
        support += float(p.b @ nu_n)
    return float(np.abs(ray).max()) <= eps and support <= -eps


def solve(p: QpProblem, cfg: QpConfig | None = None, x0: np.ndarray | None = None) -> QpSolution:
    """Solve the QP to the configured tolerances.

    ``x0`` optionally warm-starts the solver; it does not need to be feasible.
    """
    cfg = cfg or QpConfig()
    n = p.n
    tol = min(cfg.tol_kkt, cfg.tol_feas)

    if p.m_ineq + p.m_eq == 0:
        try:
            x = np.linalg.solve(p.P, -p.q)
        except np.linalg.LinAlgError:
            x = np.linalg.lstsq(p.P, -p.q, rcond=None)[0]
        resid = kkt_residual(p, x, np.zeros(0), np.zeros(0))
        status = "Optimal" if resid <= cfg.tol_kkt else "MaxIter"
        return QpSolution(x=x, lambda_ineq=np.zeros(0), nu_eq=np.zeros(0),
                          status=status, kkt_residual=resid, iterations=0,
                          objective=p.objective(x))

    C, lo, up, is_eq = _stack(p)

    def finish(x, lam, nu, resid, iters, status):
        return QpSolution(x=x, lambda_ineq=lam, nu_eq=nu, status=status,
                          kkt_residual=resid, iterations=iters,
                          objective=p.objective(x))

    # Warm-start fast path: if the active set read off x0 is already the
    # optimal one, a single reduced KKT solve finishes the job.
    if x0 is not None:
        x0 = np.asarray(x0, dtype=float).ravel()
        if x0.size != n:
            raise DimensionMismatch(f"x0 has length {x0.size}, expected {n}")
        act = (up - C @ x0) <= 1e-7 * np.maximum(1.0, np.abs(up))
        polished = _try_polish(p, C, up, is_eq, act, tol)
        if polished is not None and polished[0]:
            _, xp, lam, nu, resid = polished
            return finish(xp, lam, nu, resid, 0, "Optimal")

    # Mehrotra predictor-corrector interior point.
    m_i, m_e = p.m_ineq, p.m_eq
    G = p.G if m_i else np.zeros((0, n))
    h = p.h if m_i else np.zeros(0)
    A = p.A if m_e else np.zeros((0, n))
    b = p.b if m_e else np.zeros(0)

    x = x0.copy() if x0 is not None else np.zeros(n)
    s = np.maximum(h - G @ x, 1.0)
    lam = np.ones(m_i)
    nu = np.zeros(m_e)
    reg = 1e-12 * max(1.0, float(np.abs(p.P).max()) if p.P.size else 1.0)
    max_ipm = min(cfg.max_iter, 100)
    best = None  # (resid, x, lam, nu)

    # split constraint rows: single-nonzero rows contribute diagonally to
    # G'DG, so only the remaining dense rows need a matrix product
    if m_i:
        nnz = np.count_nonzero(G, axis=1)
        single = nnz == 1
        G_dense = G[~single]
        dense_idx = np.where(~single)[0]
        single_idx = np.where(single)[0]
        single_col = np.argmax(np.abs(G[single]), axis=1) if single.any() else np.zeros(0, int)
        single_val2 = (G[single_idx, single_col] ** 2) if single.any() else np.zeros(0)

    def newton_solve(lu_or_chol, use_eq, rhs_x, rhs_e):
        if use_eq:
            return scipy.linalg.lu_solve(lu_or_chol, np.concatenate([rhs_x, rhs_e]),
                                         check_finite=False)
        return scipy.linalg.cho_solve(lu_or_chol, rhs_x, check_finite=False)

    it = 0
    while it < max_ipm:
        it += 1
        r_d = p.P @ x + p.q + G.T @ lam + A.T @ nu
        r_p = G @ x + s - h
        r_e = A @ x - b
        mu = float(s @ lam) / m_i if m_i else 0.0

        # polish once the barrier is nearly resolved; verification guards it
        if mu <= 1e-6 * max(1.0, float(np.abs(h).max()) if m_i else 1.0):
            act = np.zeros(C.shape[0], dtype=bool)
            if m_i:
                act[:m_i] = lam > s
            polished = _try_polish(p, C, up, is_eq, act, tol)
            if polished is not None and polished[0]:
                _, xp, lam_p, nu_p, resid = polished
                return finish(xp, lam_p, nu_p, resid, it, "Optimal")

        resid = kkt_residual(p, x, lam, nu)
        if resid <= cfg.tol_kkt:
            return finish(x, lam, nu, resid, it, "Optimal")
        if best is None or resid < best[0]:
            best = (resid, x.copy(), lam.copy(), nu.copy())

        if _farkas_infeasible(p, lam, nu):
            return finish(x, lam, nu, resid, it, "Infeasible")

        d = lam / s if m_i else np.zeros(0)
        M = p.P + reg * np.eye(n)
        if m_i:
            if single_idx.size:
                diag_add = np.zeros(n)
                np.add.at(diag_add, single_col, d[single_idx] * single_val2)
                M[np.diag_indices(n)] += diag_add
            if dense_idx.size:
                M = M + (G_dense.T * d[dense_idx]) @ G_dense
        if m_e:
            K = np.zeros((n + m_e, n + m_e))
            K[:n, :n] = M
            K[:n, n:] = A.T
            K[n:, :n] = A
            K[n:, n:] = -reg * np.eye(m_e)
            try:
                fac = scipy.linalg.lu_factor(K, check_finite=False)
            except scipy.linalg.LinAlgError:
                break
        else:
            try:
                fac = scipy.linalg.cho_factor(M, check_finite=False)
            except (scipy.linalg.LinAlgError, np.linalg.LinAlgError):
                break

        def direction(r_c):
            # eliminate (ds, dlam) and solve for (dx, dnu)
            rhs_x = -r_d
            if m_i:
                rhs_x = rhs_x - G.T @ ((r_c + lam * r_p) / s)
            sol = newton_solve(fac, m_e > 0, rhs_x, -r_e)
            dx = sol[:n]
            dnu = sol[n:] if m_e else np.zeros(0)
            ds = -r_p - G @ dx if m_i else np.zeros(0)
            dlam = (r_c - lam * ds) / s if m_i else np.zeros(0)
            return dx, ds, dlam, dnu

        def max_step(v, dv):
            neg = dv < 0
            if not np.any(neg):
                return 1.0
            return min(1.0, float(np.min(-v[neg] / dv[neg])))

        # predictor (affine scaling)
        r_c_aff = -(s * lam) if m_i else np.zeros(0)
        dx_a, ds_a, dl_a, dn_a = direction(r_c_aff)
        if m_i:
            a_p = max_step(s, ds_a)
            a_d = max_step(lam, dl_a)
            mu_aff = float((s + a_p * ds_a) @ (lam + a_d * dl_a)) / m_i
            sigma_c = (max(mu_aff, 0.0) / max(mu, 1e-300)) ** 3
            # corrector with centering
            r_c = -(s * lam) - ds_a * dl_a + sigma_c * mu
            dx, ds, dlam, dnu = direction(r_c)
            a_p = 0.995 * max_step(s, ds)
            a_d = 0.995 * max_step(lam, dlam)
        else:
            dx, ds, dlam, dnu = dx_a, ds_a, dl_a, dn_a
            a_p = a_d = 1.0
        x = x + a_p * dx
        s = s + a_p * ds
        lam = lam + a_d * dlam
        nu = nu + a_d * dnu
        if m_i and (float(np.abs(lam).max()) > 1e12 or float(np.abs(x).max()) > 1e12):
            break  # diverging iterates: fall through to best-so-far reporting

    resid = kkt_residual(p, x, lam, nu)
    if best is not None and best[0] < resid:
        resid, x, lam, nu = best
    # last polish attempt from the best iterate
    act = np.zeros(C.shape[0], dtype=bool)
    if m_i:
        act[:m_i] = lam > np.maximum(h - G @ x, 1e-300)
    polished = _try_polish(p, C, up, is_eq, act, tol)
    if polished is not None and polished[0]:
        _, xp, lam_p, nu_p, res_p = polished
        return finish(xp, lam_p, nu_p, res_p, it, "Optimal")
    if _farkas_infeasible(p, lam, nu):
        return finish(x, lam, nu, resid, it, "Infeasible")
    if resid <= cfg.tol_kkt:
        return finish(x, lam, nu, resid, it, "Optimal")
    _LOG.warning("QP solver stopped after %d iterations with residual %.3e", it, resid)
    return finish(x, lam, nu, resid, it, "MaxIter")
