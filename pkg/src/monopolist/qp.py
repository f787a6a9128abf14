"""Sparse QP ``min 1/2 x'Px + q'x  s.t.  A x >= 0``.

Two engines share the problem data.  ``ipm`` is a Mehrotra predictor-corrector
primal-dual interior point method: every iteration factors the sparse matrix
``P + A' W A`` once.  ``admm`` is an over-relaxed ADMM splitting in which the
primal step is a linear solve and the constraint step is a pointwise clamp.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

log = logging.getLogger(__name__)


@dataclass
class QPResult:
    x: np.ndarray
    lam: np.ndarray  # multipliers for A x >= 0, nonnegative at optimum
    iterations: int
    converged: bool
    trace: list = field(default_factory=list)


def _row_normalize(A: sp.spmatrix):
    A = sp.csr_matrix(A)
    norms = np.sqrt(np.asarray(A.multiply(A).sum(axis=1)).ravel())
    norms[norms == 0] = 1.0
    return sp.csr_matrix(sp.diags(1.0 / norms) @ A), norms


def _factor(M):
    return spla.splu(sp.csc_matrix(M), permc_spec="COLAMD")


def solve_qp(P, q, A, x0=None, method: str = "ipm", **kw) -> QPResult:
    if method == "ipm":
        return solve_qp_ipm(P, q, A, x0=x0, **kw)
    if method == "admm":
        return solve_qp_admm(P, q, A, x0=x0, **kw)
    raise ValueError(f"unknown QP method {method!r}")


def solve_qp_ipm(
    P,
    q: np.ndarray,
    A,
    x0: np.ndarray | None = None,
    tol: float = 1e-10,
    max_iter: int = 200,
    callback=None,
) -> QPResult:
    P = sp.csr_matrix(P)
    An, row_norm = _row_normalize(A)
    AnT = sp.csr_matrix(An.T)
    m, nx = An.shape
    x = np.zeros(nx) if x0 is None else np.array(x0, dtype=float)
    Ax = An @ x
    s = np.maximum(Ax, 1.0)
    lam = np.ones(m)
    qscale = 1.0 + np.max(np.abs(q))
    trace = []
    converged = False
    it = 0
    best = (np.inf, x.copy(), lam.copy())

    def max_step(v, dv):
        neg = dv < 0
        if not neg.any():
            return 1.0
        return min(1.0, float(np.min(-v[neg] / dv[neg])))

    for it in range(1, max_iter + 1):
        r_d = P @ x + q - AnT @ lam
        r_p = Ax - s
        mu = float(s @ lam) / m
        xscale = 1.0 + np.max(np.abs(x))
        rp_n = np.max(np.abs(r_p))
        rd_n = np.max(np.abs(r_d))
        trace.append((it - 1, rp_n, rd_n, mu))
        if callback is not None:
            callback(it - 1, x)
        if rp_n <= tol * xscale and rd_n <= tol * qscale and mu <= tol * tol * xscale * qscale * 1e2:
            converged = True
            break
        # degenerate problems can lose the dual residual while mu keeps shrinking; keep the best point
        merit = max(rp_n / xscale, rd_n / qscale, mu / (xscale * qscale))
        if merit < best[0]:
            best = (merit, x.copy(), lam.copy())
        w = lam / np.maximum(s, 1e-300)
        if not np.all(np.isfinite(w)):
            break
        try:
            lu = _factor(P + AnT @ sp.diags(w) @ An)
        except RuntimeError:
            # complementarity has collapsed below the factorization's resolution
            log.debug("ipm stopped at iteration %d: singular system", it)
            break

        def direction(r_c):
            rhs = -r_d - AnT @ ((r_c + lam * r_p) / s)
            dx = lu.solve(rhs)
            ds = An @ dx + r_p
            dl = -(r_c + lam * ds) / s
            return dx, ds, dl

        # predictor
        dx_a, ds_a, dl_a = direction(s * lam)
        a_p = max_step(s, ds_a)
        a_d = max_step(lam, dl_a)
        mu_aff = float((s + a_p * ds_a) @ (lam + a_d * dl_a)) / m
        sig = (mu_aff / mu) ** 3
        # corrector
        dx, ds, dl = direction(s * lam + ds_a * dl_a - sig * mu)
        a = 0.995 * min(max_step(s, ds), max_step(lam, dl))
        x = x + a * dx
        s = s + a * ds
        lam = lam + a * dl
        Ax = An @ x
    if not converged:
        merit, x, lam = best
        converged = merit <= tol
    return QPResult(x, lam / row_norm, it, converged, trace)


def solve_qp_admm(
    P,
    q: np.ndarray,
    A,
    x0: np.ndarray | None = None,
    rho: float = 1.0,
    sigma: float = 1e-8,
    alpha: float = 1.6,
    max_iter: int = 20000,
    tol: float = 1e-9,
    check_every: int = 25,
    callback=None,
) -> QPResult:
    P = sp.csc_matrix(P)
    An, row_norm = _row_normalize(A)
    AnT = sp.csr_matrix(An.T)
    nx = P.shape[0]
    x = np.zeros(nx) if x0 is None else np.array(x0, dtype=float)
    z = np.maximum(An @ x, 0.0)
    y = np.zeros(An.shape[0])  # y <= 0 on active rows
    I = sp.identity(nx, format="csc")
    AtA = sp.csc_matrix(AnT @ An)
    lu = _factor(P + sigma * I + rho * AtA)
    converged = False
    trace = []
    it = 0
    for it in range(1, max_iter + 1):
        x_t = lu.solve(sigma * x - q + AnT @ (rho * z - y))
        Ax_r = alpha * (An @ x_t) + (1 - alpha) * z
        x = alpha * x_t + (1 - alpha) * x
        z_new = np.maximum(Ax_r + y / rho, 0.0)
        y = y + rho * (Ax_r - z_new)
        z = z_new
        if it % check_every and it != max_iter:
            continue
        Ax = An @ x
        Px = P @ x
        Aty = AnT @ y
        r_prim = np.max(np.abs(Ax - z), initial=0.0)
        r_dual = np.max(np.abs(Px + q + Aty), initial=0.0)
        e_prim = tol * (1 + max(np.max(np.abs(Ax), initial=0), np.max(np.abs(z), initial=0)))
        e_dual = tol * (1 + max(np.max(np.abs(Px)), np.max(np.abs(q)), np.max(np.abs(Aty), initial=0)))
        trace.append((it, r_prim, r_dual))
        if callback is not None:
            callback(it, x)
        if r_prim <= e_prim and r_dual <= e_dual:
            converged = True
            break
        # rebalance the penalty when the residuals drift apart
        ratio = np.sqrt((r_prim / e_prim) / max(r_dual / e_dual, 1e-300))
        if ratio > 5 or ratio < 0.2:
            new_rho = float(np.clip(rho * ratio, 1e-6, 1e6))
            if new_rho != rho:
                rho = new_rho
                lu = _factor(P + sigma * I + rho * AtA)
    return QPResult(x, -y / row_norm, it, converged, trace)
