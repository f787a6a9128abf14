"""Direct minimization of the discretized monopolist energy over the convex cone.

The energy ``L[u] = int 1/2 |Du - x|^2 + u`` is discretized with piecewise-linear
gradients on the right-triangulated lattice (each cell split along its (1, 1)
diagonal), which is exact for affine ``u`` and has no checkerboard null space.
The ``u`` term uses trapezoid weights.  Convexity is relaxed to nonnegative
second differences along the stencil directions.
"""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass, field
from math import gcd

import numpy as np
import scipy.sparse as sp

from .grid import Grid, ScalarField
from .qp import solve_qp

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class ConvexityStencil:
    directions: tuple[tuple[int, int], ...]
    scales: tuple[float, ...]

    def __post_init__(self):
        d = np.array(self.directions, dtype=float)
        for i in range(len(d)):
            for j in range(i + 1, len(d)):
                if abs(d[i, 0] * d[j, 1] - d[i, 1] * d[j, 0]) == 0:
                    raise ValueError(f"directions {self.directions[i]} and {self.directions[j]} are parallel")
        if len(self.scales) != len(self.directions):
            raise ValueError("one scale per direction")

    @property
    def K(self) -> int:
        return len(self.directions)

    def fits(self, grid: Grid) -> bool:
        return all(max(abs(p), abs(q)) <= (grid.n - 1) // 2 for p, q in self.directions)


def default_stencil(K: int = 4) -> ConvexityStencil:
    """Axis pair and diagonals for K=4; further primitive directions for K=8, 16."""
    if K not in (4, 8, 16):
        raise ValueError("K must be 4, 8 or 16")
    dirs = [(1, 0), (0, 1), (1, 1), (1, -1)]
    extra = [(2, 1), (1, 2), (2, -1), (1, -2), (3, 1), (1, 3), (3, -1), (1, -3),
             (3, 2), (2, 3), (3, -2), (2, -3)]
    dirs += extra[: K - 4]
    assert all(gcd(abs(p), abs(q)) == 1 for p, q in dirs)
    return ConvexityStencil(tuple(dirs), tuple(1.0 / (p * p + q * q) for p, q in dirs))


@dataclass
class SolveOptions:
    """``method='ipm'`` (default) or ``'admm'``; ``rho``/``sigma`` only steer ADMM."""

    max_iters: int = 200
    method: str = "ipm"
    rho: float = 1.0
    sigma: float = 1e-8
    tol: float = 1e-10  # KKT tolerance handed to the QP engine
    tol_energy: float = 1e-9
    tol_feas: float = 1e-8
    deterministic: bool = True
    telemetry_path: str | None = None

    def __post_init__(self):
        if self.rho <= 0 or self.sigma <= 0:
            raise ValueError("step sizes must be positive")
        if self.method not in ("ipm", "admm"):
            raise ValueError(f"unknown method {self.method!r}")
        if self.max_iters < 1:
            raise ValueError("max_iters must be positive")


@dataclass
class SolveResult:
    u: ScalarField
    energy: float
    iterations: int
    min_second_difference: float  # scaled, i.e. directional second derivative
    min_u: float
    converged: bool
    history: list = field(default_factory=list)
    seconds: float = 0.0


@dataclass
class QuadraticObjective:
    """``energy(u) = 1/2 u'Qu + c'u + const`` on flattened fields."""

    Q: sp.csr_matrix
    c: np.ndarray
    const: float

    def __call__(self, v: np.ndarray) -> float:
        return float(0.5 * v @ (self.Q @ v) + self.c @ v + self.const)


def _triangle_gradients(grid: Grid):
    """Sparse map from nodal values to per-triangle gradients, plus centroids."""
    n, h = grid.n, grid.h
    idx = np.arange(n * n).reshape(n, n)
    i, j = np.meshgrid(np.arange(n - 1), np.arange(n - 1), indexing="ij")
    i, j = i.ravel(), j.ravel()
    m = len(i)
    p00, p10, p01, p11 = idx[i, j], idx[i + 1, j], idx[i, j + 1], idx[i + 1, j + 1]
    rows = np.arange(m)

    def block(plus, minus):
        r = np.concatenate([rows, rows])
        c = np.concatenate([plus, minus])
        v = np.concatenate([np.full(m, 1.0 / h), np.full(m, -1.0 / h)])
        return sp.csr_matrix((v, (r, c)), shape=(m, n * n))

    # lower triangle {(i,j),(i+1,j),(i+1,j+1)} and upper {(i,j),(i,j+1),(i+1,j+1)}
    G1 = sp.vstack([block(p10, p00), block(p11, p01)])
    G2 = sp.vstack([block(p11, p10), block(p01, p00)])
    xc1 = grid.a + h * np.concatenate([i + 2 / 3, i + 1 / 3])
    xc2 = grid.a + h * np.concatenate([j + 1 / 3, j + 2 / 3])
    return sp.csr_matrix(G1), sp.csr_matrix(G2), xc1, xc2


def _half_square_moment(a: float) -> float:
    """Exact ``int 1/2 |x|^2`` over (a, a+1)^2."""
    return a * a + a + 1.0 / 3.0


def assemble_objective(grid: Grid) -> QuadraticObjective:
    G1, G2, xc1, xc2 = _triangle_gradients(grid)
    area = grid.h**2 / 2
    Q = area * (G1.T @ G1 + G2.T @ G2)
    c = -area * (G1.T @ xc1 + G2.T @ xc2) + grid.trapezoid_weights().ravel()
    return QuadraticObjective(sp.csr_matrix(Q), np.asarray(c).ravel(), _half_square_moment(grid.a))


def energy(u: ScalarField) -> float:
    """Discrete ``int 1/2|Du - x|^2 + u`` evaluated directly per triangle."""
    grid = u.grid
    G1, G2, xc1, xc2 = _triangle_gradients(grid)
    v = u.flat()
    g1, g2 = G1 @ v, G2 @ v
    area = grid.h**2 / 2
    # int_T |g - x|^2 = area |g - x_c|^2 + int_T |x - x_c|^2, and the last
    # term summed over triangles is int |x|^2 - sum area |x_c|^2
    quad = area * np.sum((g1 - xc1) ** 2 + (g2 - xc2) ** 2)
    spread = 2 * _half_square_moment(grid.a) - area * np.sum(xc1**2 + xc2**2)
    return float(0.5 * (quad + spread) + grid.integrate(u.values))


def second_difference_operator(grid: Grid, stencil: ConvexityStencil, scaled: bool = True):
    """Rows ``u(p+e) - 2u(p) + u(p-e)`` for every node p with both neighbours inside.

    With ``scaled`` each row is divided by ``|e|^2 h^2`` (directional second derivative).
    Returns the sparse matrix and an ``(m, 3)`` array of ``(i, j, direction index)``.
    """
    n, h = grid.n, grid.h
    idx = np.arange(n * n).reshape(n, n)
    blocks, meta = [], []
    for k, (p, q) in enumerate(stencil.directions):
        i, j = np.meshgrid(np.arange(n), np.arange(n), indexing="ij")
        ok = (i - p >= 0) & (i + p < n) & (j - q >= 0) & (j + q < n) & (i + p >= 0) & (j + q >= 0)
        ok &= (i - p < n) & (j - q < n)
        i, j = i[ok], j[ok]
        m = len(i)
        s = 1.0 / ((p * p + q * q) * h * h) if scaled else 1.0
        r = np.repeat(np.arange(m), 3)
        c = np.column_stack([idx[i + p, j + q], idx[i, j], idx[i - p, j - q]]).ravel()
        v = np.tile([s, -2 * s, s], m)
        blocks.append(sp.csr_matrix((v, (r, c)), shape=(m, n * n)))
        meta.append(np.column_stack([i, j, np.full(m, k)]))
    return sp.csr_matrix(sp.vstack(blocks)), np.vstack(meta)


def feasibility(u: ScalarField, stencil: ConvexityStencil | None = None) -> tuple[float, float]:
    """(min directional second derivative, min u)."""
    stencil = stencil or default_stencil()
    D, _ = second_difference_operator(u.grid, stencil)
    d = D @ u.flat()
    return float(np.min(d)) if len(d) else 0.0, float(np.min(u.values))


def _write_telemetry(path, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["iter", "energy", "feas_convex", "feas_nonneg"])
        for r in rows:
            w.writerow([r[0], f"{r[1]:.17g}", f"{r[2]:.17g}", f"{r[3]:.17g}"])


def minimize(
    grid: Grid,
    stencil: ConvexityStencil | None = None,
    opts: SolveOptions | None = None,
    init: ScalarField | None = None,
) -> SolveResult:
    """Minimize the discrete energy over ``{u >= 0, second differences >= 0}``.

    ``history`` holds ``(iter, energy, feas_convex, feas_nonneg)`` of accepted
    iterates: snapshots that are feasible within tolerance and whose energy does
    not exceed the last accepted one.  An iterate that ends infeasible is
    returned with ``converged=False``.
    """
    stencil = stencil or default_stencil()
    opts = opts or SolveOptions()
    if not stencil.fits(grid):
        raise ValueError("stencil offsets do not fit inside the grid")
    if init is not None and init.grid != grid:
        raise ValueError("init lives on a different grid")
    t0 = time.perf_counter()
    obj = assemble_objective(grid)
    D, _ = second_difference_operator(grid, stencil)
    N = grid.n**2
    A = sp.vstack([D, sp.identity(N)], format="csr")
    x0 = np.zeros(N) if init is None else init.flat().copy()
    h2 = grid.h**2
    history = []

    def is_feasible(x):
        dmin = float(np.min(D @ x))
        umin = float(np.min(x))
        return dmin >= -opts.tol_feas / h2 and umin >= -opts.tol_feas, dmin, umin

    def accept(it, x):
        ok, dmin, umin = is_feasible(x)
        if not ok:
            return
        e = obj(x)
        if history and e > history[-1][1]:
            return
        history.append((it, e, dmin, umin))

    accept(0, x0)
    if opts.method == "ipm":
        res = solve_qp(obj.Q, obj.c, A, x0=x0, method="ipm", tol=opts.tol,
                       max_iter=opts.max_iters, callback=accept)
    else:
        res = solve_qp(obj.Q, obj.c, A, x0=x0, method="admm", rho=opts.rho, sigma=opts.sigma,
                       max_iter=opts.max_iters, tol=opts.tol, callback=accept)
    x = res.x
    feasible, _, _ = is_feasible(x)
    if feasible:
        accept(res.iterations, x)
    converged = bool(res.converged and feasible)
    if opts.telemetry_path:
        _write_telemetry(opts.telemetry_path, history)
    u = ScalarField(grid, x)
    fmin, umin = feasibility(u, stencil)
    e = energy(u)
    log.info("minimize a=%g n=%d: E=%.12f iters=%d conv=%s", grid.a, grid.n, e, res.iterations, converged)
    return SolveResult(u, e, res.iterations, fmin, umin, converged, history, time.perf_counter() - t0)


def project_onto_cone(v: np.ndarray, D, max_iter: int = 100) -> np.ndarray:
    """Euclidean projection of ``v`` onto ``{x : D x >= 0}``."""
    v = np.asarray(v, dtype=float)
    P = sp.identity(len(v), format="csr")
    res = solve_qp(P, -v, D, x0=v, method="ipm", tol=1e-11, max_iter=max_iter)
    return res.x


def project_convex_cone(u: ScalarField, stencil: ConvexityStencil | None = None, iters: int = 100) -> ScalarField:
    """Projection onto nonnegative directional second differences (no sign constraint on u)."""
    stencil = stencil or default_stencil()
    D, _ = second_difference_operator(u.grid, stencil, scaled=False)
    v = u.flat()
    if len(v) == 0 or np.min(D @ v) >= 0:
        return ScalarField(u.grid, v.copy())
    return ScalarField(u.grid, project_onto_cone(v, D, iters))
