"""Obstacle problem ``v >= psi``, ``Delta v = f`` where ``v > psi``, by projected SOR.

The discrete complementarity system is

    min(v - psi, f - Delta_h v) = 0

with the five-point Laplacian.  Neumann sides prescribe the outward normal
derivative and are eliminated with a ghost node ``v_ghost = v_inner + 2h g``.
Sweeps are lexicographic, so runs are bit-reproducible.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numba
import numpy as np

from .grid import Grid, ScalarField

log = logging.getLogger(__name__)

SIDES = ("south", "east", "north", "west")


@dataclass
class ObstacleProblem:
    """Square ``[x0, x0+L] x [y0, y0+L]`` with ``n`` nodes per side.

    ``bc`` maps each side to ``("dirichlet", values)`` or ``("neumann", values)``
    where values run along the side in increasing coordinate order and Neumann
    values are outward normal derivatives.  ``f`` and ``psi`` are ``(n, n)``.
    """

    n: int
    lower: tuple[float, float]
    length: float
    f: np.ndarray
    bc: dict
    psi: np.ndarray | None = None

    def __post_init__(self):
        n = self.n
        self.f = np.broadcast_to(np.asarray(self.f, dtype=float), (n, n)).copy()
        if not np.all(np.isfinite(self.f)):
            raise ValueError("f must be finite")
        self.psi = np.zeros((n, n)) if self.psi is None else np.broadcast_to(
            np.asarray(self.psi, dtype=float), (n, n)).copy()
        missing = [s for s in SIDES if s not in self.bc]
        if missing:
            raise ValueError(f"no boundary condition on {missing}")
        for side, (kind, vals) in self.bc.items():
            if kind not in ("dirichlet", "neumann"):
                raise ValueError(f"unknown boundary kind {kind!r}")
            self.bc[side] = (kind, np.broadcast_to(np.asarray(vals, dtype=float), (n,)).copy())

    @property
    def h(self) -> float:
        return self.length / (self.n - 1)

    def mesh(self):
        c1 = self.lower[0] + self.h * np.arange(self.n)
        c2 = self.lower[1] + self.h * np.arange(self.n)
        return np.meshgrid(c1, c2, indexing="ij")


@dataclass
class ObstacleOptions:
    omega: float = 1.7
    tol: float = 1e-8
    max_iters: int = 500_000
    check_every: int = 50
    record_every: int = 0  # store iterates this often for monotonicity checks (0: never)


@dataclass
class ObstacleSolution:
    v: np.ndarray
    contact: np.ndarray
    residual: float
    iterations: int
    converged: bool
    h: float
    snapshots: list = field(default_factory=list)


def _side_arrays(problem: ObstacleProblem):
    """Per side: kind code (0 Dirichlet, 1 Neumann) and values."""
    kinds = np.array([0 if problem.bc[s][0] == "dirichlet" else 1 for s in SIDES], dtype=np.int64)
    vals = np.stack([problem.bc[s][1] for s in SIDES])
    return kinds, vals


@numba.njit(cache=True)
def _neighbour(v, i, j, di, dj, n, h, kinds, vals):
    """Value at (i+di, j+dj), using a ghost node across Neumann sides."""
    ii, jj = i + di, j + dj
    if 0 <= ii < n and 0 <= jj < n:
        return v[ii, jj]
    # leaving through: south dj<0, east di>0, north dj>0, west di<0
    if dj < 0:
        g = vals[0, i]
    elif di > 0:
        g = vals[1, j]
    elif dj > 0:
        g = vals[2, i]
    else:
        g = vals[3, j]
    return v[i - di, j - dj] + 2.0 * h * g


@numba.njit(cache=True)
def _is_fixed(i, j, n, kinds):
    return (j == 0 and kinds[0] == 0) or (i == n - 1 and kinds[1] == 0) or \
        (j == n - 1 and kinds[2] == 0) or (i == 0 and kinds[3] == 0)


@numba.njit(cache=True)
def _sweep(v, f, psi, n, h, kinds, vals, omega):
    change = 0.0
    for i in range(n):
        for j in range(n):
            if _is_fixed(i, j, n, kinds):
                continue
            s = (_neighbour(v, i, j, 1, 0, n, h, kinds, vals) + _neighbour(v, i, j, -1, 0, n, h, kinds, vals)
                 + _neighbour(v, i, j, 0, 1, n, h, kinds, vals) + _neighbour(v, i, j, 0, -1, n, h, kinds, vals))
            gs = 0.25 * (s - h * h * f[i, j])
            new = v[i, j] + omega * (gs - v[i, j])
            if new < psi[i, j]:
                new = psi[i, j]
            d = abs(new - v[i, j])
            if d > change:
                change = d
            v[i, j] = new
    return change


@numba.njit(cache=True)
def _laplacian(v, n, h, kinds, vals):
    out = np.zeros((n, n))
    for i in range(n):
        for j in range(n):
            s = (_neighbour(v, i, j, 1, 0, n, h, kinds, vals) + _neighbour(v, i, j, -1, 0, n, h, kinds, vals)
                 + _neighbour(v, i, j, 0, 1, n, h, kinds, vals) + _neighbour(v, i, j, 0, -1, n, h, kinds, vals))
            out[i, j] = (s - 4.0 * v[i, j]) / (h * h)
    return out


def discrete_laplacian(problem: ObstacleProblem, v: np.ndarray) -> np.ndarray:
    kinds, vals = _side_arrays(problem)
    return _laplacian(np.ascontiguousarray(v, dtype=float), problem.n, problem.h, kinds, vals)


def complementarity(problem: ObstacleProblem, v: np.ndarray) -> np.ndarray:
    """``min(v - psi, f - Delta_h v)`` on unknown (non-Dirichlet) nodes, zero elsewhere."""
    kinds, _ = _side_arrays(problem)
    lap = discrete_laplacian(problem, v)
    r = np.minimum(v - problem.psi, problem.f - lap)
    n = problem.n
    free = np.ones((n, n), dtype=bool)
    if kinds[0] == 0:
        free[:, 0] = False
    if kinds[1] == 0:
        free[-1, :] = False
    if kinds[2] == 0:
        free[:, -1] = False
    if kinds[3] == 0:
        free[0, :] = False
    return np.where(free, r, 0.0)


def contact_tolerance(v: np.ndarray, h: float) -> float:
    return 1e-8 * float(np.max(np.abs(v))) + h**3


def solve_obstacle(problem: ObstacleProblem, opts: ObstacleOptions | None = None,
                   init: np.ndarray | None = None) -> ObstacleSolution:
    opts = opts or ObstacleOptions()
    if not 0 < opts.omega < 2:
        raise ValueError("omega must lie in (0, 2)")
    n, h = problem.n, problem.h
    kinds, vals = _side_arrays(problem)
    if init is not None:
        v = np.maximum(np.array(init, dtype=float), problem.psi)
    else:
        v = problem.psi.copy()
    # impose Dirichlet data
    if kinds[0] == 0:
        v[:, 0] = vals[0]
    if kinds[1] == 0:
        v[-1, :] = vals[1]
    if kinds[2] == 0:
        v[:, -1] = vals[2]
    if kinds[3] == 0:
        v[0, :] = vals[3]
    snapshots = []
    it = 0
    res = np.inf
    converged = False
    while it < opts.max_iters:
        steps = min(opts.check_every, opts.max_iters - it)
        for _ in range(steps):
            _sweep(v, problem.f, problem.psi, n, h, kinds, vals, opts.omega)
            it += 1
            if opts.record_every and it % opts.record_every == 0:
                snapshots.append(v.copy())
        res = float(np.max(np.abs(complementarity(problem, v))))
        if res <= opts.tol:
            converged = True
            break
    tol_c = contact_tolerance(v, h)
    contact = v - problem.psi <= tol_c
    log.info("obstacle n=%d: %d sweeps, residual %.3g, converged=%s", n, it, res, converged)
    return ObstacleSolution(v, contact, res, it, converged, h, snapshots)


def solve_a0(grid: Grid, opts: ObstacleOptions | None = None) -> tuple[ScalarField, np.ndarray, ObstacleSolution]:
    """``Delta u = 3`` on ``{u > 0}``, ``u >= 0``, ``D_n u = x . n`` on all four sides of (0, 1)^2."""
    if grid.a != 0:
        raise ValueError("solve_a0 needs a = 0")
    n = grid.n
    bc = {"south": ("neumann", 0.0), "west": ("neumann", 0.0),
          "east": ("neumann", 1.0), "north": ("neumann", 1.0)}
    prob = ObstacleProblem(n, (0.0, 0.0), 1.0, 3.0, bc)
    opts = opts or ObstacleOptions(omega=2.0 / (1.0 + np.sin(np.pi * grid.h)))
    sol = solve_obstacle(prob, opts)
    return ScalarField(grid, sol.v), sol.contact, sol


def free_boundary_nodes(contact: np.ndarray) -> np.ndarray:
    """Non-contact nodes with a contact 4-neighbour, as an ``(m, 2)`` index array."""
    c = contact
    near = np.zeros_like(c)
    near[1:, :] |= c[:-1, :]
    near[:-1, :] |= c[1:, :]
    near[:, 1:] |= c[:, :-1]
    near[:, :-1] |= c[:, 1:]
    return np.argwhere(near & ~c)


@dataclass
class DetachmentReport:
    points: np.ndarray  # (m, 2) coordinates of free boundary nodes
    radii: np.ndarray
    sup: np.ndarray  # (m, len(radii)) sup of v over the ball
    margins: np.ndarray  # sup - kappa c0 rho^2
    c0: float
    kappa: float

    @property
    def min_margin(self) -> float:
        return float(np.min(self.margins)) if self.margins.size else np.inf


def ball_margins(v: np.ndarray, coords: tuple[np.ndarray, np.ndarray], point, c0: float, radii,
                 kappa: float = 0.5) -> np.ndarray:
    """``sup_{B_rho(point)} v - kappa c0 rho^2`` over grid nodes, one entry per radius."""
    x1, x2 = coords
    d = np.hypot(x1 - point[0], x2 - point[1])
    radii = np.atleast_1d(np.asarray(radii, dtype=float))
    return np.array([np.max(v[d <= rho]) for rho in radii]) - kappa * c0 * radii**2


def quadratic_detachment(v: np.ndarray, contact: np.ndarray, coords: tuple[np.ndarray, np.ndarray],
                         c0: float, radii, kappa: float = 0.5) -> DetachmentReport:
    """Margins ``sup_{B_rho(x)} v - kappa c0 rho^2`` at free boundary nodes.

    ``kappa = 1/2`` is sharp for a flat contact boundary; the maximum principle
    only guarantees ``kappa = 1/(2d)`` in dimension d.
    """
    x1, x2 = coords
    radii = np.atleast_1d(np.asarray(radii, dtype=float))
    fb = free_boundary_nodes(contact)
    pts = np.column_stack([x1[fb[:, 0], fb[:, 1]], x2[fb[:, 0], fb[:, 1]]])
    margins = np.array([ball_margins(v, coords, p, c0, radii, kappa) for p in pts]).reshape(len(pts), len(radii))
    sup = margins + kappa * c0 * radii[None, :] ** 2
    return DetachmentReport(pts, radii, sup, margins, float(c0), kappa)


def estimate_c0(problem: ObstacleProblem, contact: np.ndarray) -> float:
    """Minimum of f over non-contact nodes adjacent to the contact set."""
    fb = free_boundary_nodes(contact)
    if len(fb) == 0:
        return float(np.min(problem.f))
    return float(np.min(problem.f[fb[:, 0], fb[:, 1]]))
