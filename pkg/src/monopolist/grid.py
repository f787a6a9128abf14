"""Uniform lattice over the square (a, a+1)^2 and finite-difference calculus.

Fields are stored as ``(n, n)`` arrays indexed ``[i, j]`` with node ``(i, j)``
at ``x = (a + i*h, a + j*h)``.  Flattening is row-major (``i`` outer).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

SIDES = ("south", "east", "north", "west")
SIDE_NORMALS = {
    "south": (0.0, -1.0),
    "east": (1.0, 0.0),
    "north": (0.0, 1.0),
    "west": (-1.0, 0.0),
}


@dataclass(frozen=True)
class Grid:
    a: float
    n: int

    def __post_init__(self):
        if not np.isfinite(self.a):
            raise ValueError("a must be finite")
        if self.a < 0:
            raise ValueError("a must be nonnegative")
        if int(self.n) != self.n or self.n < 3:
            raise ValueError("n must be an integer >= 3")

    @property
    def h(self) -> float:
        return 1.0 / (self.n - 1)

    @property
    def coords(self) -> np.ndarray:
        """1D node coordinates ``a + i*h``."""
        return self.a + np.arange(self.n) * self.h

    def mesh(self) -> tuple[np.ndarray, np.ndarray]:
        """Coordinate arrays ``(X1, X2)`` of shape ``(n, n)``."""
        c = self.coords
        return np.meshgrid(c, c, indexing="ij")

    def sample(self, fn) -> "ScalarField":
        x1, x2 = self.mesh()
        return ScalarField(self, np.asarray(fn(x1, x2), dtype=float) * np.ones_like(x1))

    def trapezoid_weights(self) -> np.ndarray:
        w = np.full(self.n, self.h)
        w[0] = w[-1] = self.h / 2
        return np.outer(w, w)

    def integrate(self, values: np.ndarray) -> float:
        return float(np.sum(self.trapezoid_weights() * values))


def make_grid(a: float, n: int) -> Grid:
    return Grid(float(a), int(n))


@dataclass
class ScalarField:
    grid: Grid
    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.size != self.grid.n ** 2:
            raise ValueError(f"expected {self.grid.n ** 2} values, got {v.size}")
        v = v.reshape(self.grid.n, self.grid.n)
        if not np.all(np.isfinite(v)):
            raise ValueError("field values must be finite")
        self.values = v

    def flat(self) -> np.ndarray:
        return self.values.ravel()

    def reflect(self) -> "ScalarField":
        """Reflection across the diagonal, (x1, x2) -> (x2, x1)."""
        return ScalarField(self.grid, self.values.T.copy())

    def __add__(self, other):
        if isinstance(other, ScalarField):
            return ScalarField(self.grid, self.values + other.values)
        return ScalarField(self.grid, self.values + other)


@dataclass
class VectorField:
    grid: Grid
    d1: np.ndarray
    d2: np.ndarray


@dataclass
class TensorField:
    """Symmetric 2x2 tensor per node."""

    grid: Grid
    d11: np.ndarray
    d12: np.ndarray
    d22: np.ndarray

    @property
    def trace(self) -> np.ndarray:
        return self.d11 + self.d22

    def eigenvalues(self) -> tuple[np.ndarray, np.ndarray]:
        """Pointwise ``(lambda_min, lambda_max)``."""
        mean = 0.5 * (self.d11 + self.d22)
        rad = np.hypot(0.5 * (self.d11 - self.d22), self.d12)
        return mean - rad, mean + rad


@dataclass
class BoundaryTrace:
    """Boundary nodes counterclockwise from (a, a), 4(n-1) entries.

    ``normals`` holds the outer normal of the side a node is listed under;
    ``normals2`` holds the second adjacent normal at corners (NaN elsewhere).
    """

    grid: Grid
    index: np.ndarray  # (m, 2) integer node indices
    points: np.ndarray  # (m, 2)
    values: np.ndarray  # (m,)
    normals: np.ndarray  # (m, 2)
    normals2: np.ndarray  # (m, 2)
    side: list[str] = field(default_factory=list)

    @property
    def is_corner(self) -> np.ndarray:
        return ~np.isnan(self.normals2[:, 0])

    def on_side(self, name: str, include_corners: bool = False) -> np.ndarray:
        sel = np.array([s == name for s in self.side])
        if not include_corners:
            sel &= ~self.is_corner
        return sel


def boundary_nodes(grid: Grid):
    """Boundary node indices, side labels and normals in counterclockwise order."""
    n = grid.n
    idx, side, nrm, nrm2 = [], [], [], []
    nan2 = (np.nan, np.nan)
    corner_second = {(0, 0): "west", (n - 1, 0): "south", (n - 1, n - 1): "east", (0, n - 1): "north"}
    runs = [
        ("south", [(i, 0) for i in range(0, n - 1)]),
        ("east", [(n - 1, j) for j in range(0, n - 1)]),
        ("north", [(i, n - 1) for i in range(n - 1, 0, -1)]),
        ("west", [(0, j) for j in range(n - 1, 0, -1)]),
    ]
    for name, nodes in runs:
        for ij in nodes:
            idx.append(ij)
            side.append(name)
            nrm.append(SIDE_NORMALS[name])
            other = corner_second.get(ij)
            nrm2.append(SIDE_NORMALS[other] if other else nan2)
    return np.array(idx), side, np.array(nrm, dtype=float), np.array(nrm2, dtype=float)


def gradient(u: ScalarField) -> VectorField:
    """Central differences inside, second-order one-sided on the boundary."""
    h = u.grid.h
    d1 = np.gradient(u.values, h, axis=0, edge_order=2)
    d2 = np.gradient(u.values, h, axis=1, edge_order=2)
    return VectorField(u.grid, d1, d2)


def _second_difference(v: np.ndarray, h: float, axis: int) -> np.ndarray:
    out = np.empty_like(v)
    w = np.moveaxis(v, axis, 0)
    o = np.moveaxis(out, axis, 0)
    o[1:-1] = (w[2:] - 2 * w[1:-1] + w[:-2]) / h**2
    o[0] = o[1]
    o[-1] = o[-2]
    return out


def hessian(u: ScalarField) -> TensorField:
    h = u.grid.h
    d11 = _second_difference(u.values, h, 0)
    d22 = _second_difference(u.values, h, 1)
    g1 = np.gradient(u.values, h, axis=0, edge_order=2)
    g2 = np.gradient(u.values, h, axis=1, edge_order=2)
    # both orders agree up to round-off; average keeps the diagonal symmetry exact
    d12 = 0.5 * (np.gradient(g1, h, axis=1, edge_order=2) + np.gradient(g2, h, axis=0, edge_order=2))
    return TensorField(u.grid, d11, d12, d22)


def laplacian(u: ScalarField) -> np.ndarray:
    return hessian(u).trace


def boundary_normal_residual(u: ScalarField) -> BoundaryTrace:
    """Normal distortion ``(Du - x) . n`` on every boundary node.

    Corners carry both adjacent normals and report the larger of the two values.
    """
    g = gradient(u)
    grid = u.grid
    idx, side, nrm, nrm2 = boundary_nodes(grid)
    c = grid.coords
    pts = np.column_stack([c[idx[:, 0]], c[idx[:, 1]]])
    du = np.column_stack([g.d1[idx[:, 0], idx[:, 1]], g.d2[idx[:, 0], idx[:, 1]]])
    dist = du - pts
    vals = np.sum(dist * nrm, axis=1)
    corner = ~np.isnan(nrm2[:, 0])
    vals[corner] = np.maximum(vals[corner], np.sum(dist[corner] * nrm2[corner], axis=1))
    return BoundaryTrace(grid, idx, pts, vals, nrm, nrm2, side)


def side_integral(u: ScalarField) -> float:
    """Trapezoid integral of ``(Du - x) . n`` with corner nodes split between sides."""
    g = gradient(u)
    grid = u.grid
    x1, x2 = grid.mesh()
    r1, r2 = g.d1 - x1, g.d2 - x2
    w = np.full(grid.n, grid.h)
    w[0] = w[-1] = grid.h / 2
    total = -np.dot(w, r2[:, 0]) + np.dot(w, r1[-1, :]) + np.dot(w, r2[:, -1]) - np.dot(w, r1[0, :])
    return float(total)


# -- field file format -------------------------------------------------------

FIELD_HEADER = "# monopolist-field v1"


def _fmt(v: float) -> str:
    return f"{v:.17g}"


def format_field(u: ScalarField, header: str = FIELD_HEADER) -> str:
    lines = [header, f"n={u.grid.n} a={_fmt(u.grid.a)}"]
    for row in u.values:
        lines.append(",".join(_fmt(v) for v in row))
    return "\n".join(lines) + "\n"


def parse_field(text: str, header: str = FIELD_HEADER) -> ScalarField:
    lines = text.strip("\n").split("\n")
    if not lines or lines[0].strip() != header:
        raise ValueError(f"bad header, expected {header!r}")
    meta = dict(tok.split("=", 1) for tok in lines[1].split())
    grid = make_grid(float(meta["a"]), int(meta["n"]))
    rows = [[float(t) for t in ln.split(",")] for ln in lines[2:]]
    if len(rows) != grid.n or any(len(r) != grid.n for r in rows):
        raise ValueError("field body does not match n")
    return ScalarField(grid, np.array(rows))


def write_field(path, u: ScalarField) -> None:
    with open(path, "w") as fh:
        fh.write(format_field(u))


def read_field(path) -> ScalarField:
    with open(path) as fh:
        return parse_field(fh.read())
