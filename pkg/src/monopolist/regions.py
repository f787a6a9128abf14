"""Partition a solved field into exclusion, bunching and customization regions.

A node is bunched when the Hessian is rank deficient there *and* ``u`` is affine
along the degenerate direction all the way to the boundary of the square, with
the gradient violating the boundary condition ``(Du - x).n = 0`` at that foot.
Segments that are affine but satisfy the boundary condition are stray: they are
kept in a separate mask and labelled as customization nodes.
"""

from __future__ import annotations

import json
import logging
import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.cluster.hierarchy import fcluster, linkage
from scipy.interpolate import RegularGridInterpolator

from .grid import Grid, ScalarField, gradient, hessian

log = logging.getLogger(__name__)

OMEGA0, OMEGA1, OMEGA2 = 0, 1, 2
MASK_HEADER = "# monopolist-mask v1"


@dataclass
class Thresholds:
    eps0: float | None = None  # |u| threshold, default 10 h^2
    eps1: float = 0.05  # lambda_min / lambda_max
    eps2: float = 0.2  # |Delta u - 3| tolerance on the customization region
    affine: float = 10.0  # allowed deviation from affine along a leaf, in units of h^2
    neumann: float | None = None  # foot violation needed for a tame leaf, default h^2

    def resolved(self, h: float) -> "Thresholds":
        return Thresholds(
            10 * h * h if self.eps0 is None else self.eps0, self.eps1, self.eps2, self.affine,
            h * h if self.neumann is None else self.neumann,
        )


@dataclass
class RegionMasks:
    grid: Grid
    labels: np.ndarray  # (n, n) ints in {0, 1, 2}
    thresholds: Thresholds
    stray: np.ndarray  # (n, n) bool, affine leaves obeying the boundary condition
    direction: np.ndarray  # (n, n, 2) leaf direction estimate (degenerate eigenvector)
    ratio: np.ndarray  # lambda_min / lambda_max
    poisson_violation: float = 0.0  # fraction of customization nodes with |Delta u - 3| > eps2

    def mask(self, label: int) -> np.ndarray:
        return self.labels == label

    def counts(self) -> dict:
        return {k: int(np.sum(self.labels == k)) for k in (OMEGA0, OMEGA1, OMEGA2)}

    def areas(self) -> dict:
        w = self.grid.trapezoid_weights()
        return {k: float(np.sum(w[self.labels == k])) for k in (OMEGA0, OMEGA1, OMEGA2)}

    def stray_area(self) -> float:
        return float(np.sum(self.grid.trapezoid_weights()[self.stray]))


def _exit_distance(p, d, lo, hi):
    """Distance along unit directions ``d`` from points ``p`` to the square's boundary,
    and the outer normal of the side reached."""
    with np.errstate(divide="ignore", invalid="ignore"):
        t1 = np.where(d[:, 0] > 0, (hi - p[:, 0]) / d[:, 0], np.where(d[:, 0] < 0, (lo - p[:, 0]) / d[:, 0], np.inf))
        t2 = np.where(d[:, 1] > 0, (hi - p[:, 1]) / d[:, 1], np.where(d[:, 1] < 0, (lo - p[:, 1]) / d[:, 1], np.inf))
    first = t1 <= t2
    L = np.where(first, t1, t2)
    nrm = np.zeros_like(p)
    nrm[first, 0] = np.sign(d[first, 0])
    nrm[~first, 1] = np.sign(d[~first, 1])
    return L, nrm


def leaf_probe(u: ScalarField, nodes: np.ndarray, directions: np.ndarray, samples: int = 41):
    """For each node and unit direction, march to the boundary.

    Returns ``(deviation, neumann, length, foot)``: the largest deviation of
    ``u`` from the chord between the node and the exit point, the value
    ``(Du(node) - foot).n`` at the exit, the march length and the exit point.
    """
    g = u.grid
    c = g.coords
    interp = RegularGridInterpolator((c, c), u.values, method="linear")
    x1, x2 = g.mesh()
    p = np.column_stack([x1[nodes[:, 0], nodes[:, 1]], x2[nodes[:, 0], nodes[:, 1]]])
    L, nrm = _exit_distance(p, directions, g.a, g.a + 1)
    s = np.linspace(0.0, 1.0, samples)
    pts = p[:, None, :] + (L[:, None, None] * s[None, :, None]) * directions[:, None, :]
    pts = np.clip(pts, g.a, g.a + 1)
    vals = interp(pts.reshape(-1, 2)).reshape(len(p), samples)
    chord = vals[:, :1] + (vals[:, -1:] - vals[:, :1]) * s[None, :]
    dev = np.max(np.abs(vals - chord), axis=1)
    G = gradient(u)
    du = np.column_stack([G.d1[nodes[:, 0], nodes[:, 1]], G.d2[nodes[:, 0], nodes[:, 1]]])
    foot = pts[:, -1, :]
    neu = np.sum((du - foot) * nrm, axis=1)
    return dev, neu, L, foot


def _degenerate_direction(H):
    """Unit eigenvector of the smaller Hessian eigenvalue."""
    ang = 0.5 * np.arctan2(2 * H.d12, H.d11 - H.d22) + np.pi / 2
    return np.stack([np.cos(ang), np.sin(ang)], axis=-1)


def classify_regions(u: ScalarField, thresholds: Thresholds | None = None) -> RegionMasks:
    grid = u.grid
    th = (thresholds or Thresholds()).resolved(grid.h)
    h = grid.h
    H = hessian(u)
    lmin, lmax = H.eigenvalues()
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(lmax > 0, lmin / lmax, 0.0)
    direction = _degenerate_direction(H)
    labels = np.full((grid.n, grid.n), OMEGA2, dtype=np.int64)
    zero = u.values < th.eps0
    labels[zero] = OMEGA0
    cand = (~zero) & (lmin < th.eps1 * lmax)
    stray = np.zeros_like(zero)
    nodes = np.argwhere(cand)
    if len(nodes):
        e = direction[nodes[:, 0], nodes[:, 1]]
        tame = np.zeros(len(nodes), dtype=bool)
        affine = np.zeros(len(nodes), dtype=bool)
        for sgn in (1.0, -1.0):
            dev, neu, _, _ = leaf_probe(u, nodes, sgn * e)
            ok = dev <= th.affine * h * h
            affine |= ok
            tame |= ok & (neu > th.neumann)
        labels[nodes[tame, 0], nodes[tame, 1]] = OMEGA1
        st = affine & ~tame
        stray[nodes[st, 0], nodes[st, 1]] = True
    # Poisson check on interior customization nodes
    inner = np.zeros_like(zero)
    inner[1:-1, 1:-1] = True
    om2 = (labels == OMEGA2) & inner & ~stray
    frac = float(np.mean(np.abs(H.trace[om2] - 3) > th.eps2)) if om2.any() else 0.0
    if frac > 0.05:
        warnings.warn(f"{100 * frac:.1f}% of customization nodes violate |Delta u - 3| <= {th.eps2}")
    return RegionMasks(grid, labels, th, stray, direction, ratio, frac)


def zero_set(u: ScalarField, tol: float | None = None) -> np.ndarray:
    """Nodes where ``u`` vanishes up to ``1e-8 max|u| + h^3``."""
    if tol is None:
        tol = 1e-8 * float(np.max(np.abs(u.values))) + u.grid.h**3
    return u.values <= tol


# -- rays -----------------------------------------------------------------------

@dataclass
class Ray:
    foot: np.ndarray  # point on the boundary
    xi: np.ndarray  # unit direction into the square
    R: float
    grad: np.ndarray  # Du on the ray
    side: str  # side of the foot
    two_sided: bool = False  # both ends on the boundary (blunt leaves)
    interior_only: bool = False  # never reaches the boundary
    size: int = 0  # nodes in the cluster
    spread: float = 0.0  # max |Du - grad| over the cluster
    tolerance: float = 0.0  # clustering tolerance the cluster was built with
    diag_extent: tuple = (0.0, 0.0)  # min/max of cluster nodes projected on (1, 1)/sqrt(2)

    @property
    def theta(self) -> float:
        return math.atan2(self.xi[1], self.xi[0])

    def to_json(self) -> dict:
        return {"foot": [float(self.foot[0]), float(self.foot[1])], "theta": self.theta, "R": self.R,
                "grad": [float(self.grad[0]), float(self.grad[1])], "side": self.side,
                "two_sided": self.two_sided, "interior_only": self.interior_only,
                "diag_extent": [float(self.diag_extent[0]), float(self.diag_extent[1])]}


@dataclass
class RayExtraction:
    rays: list[Ray]
    stray: list[Ray]
    tolerance: float  # largest clustering tolerance used

    @property
    def interior_only(self) -> list[Ray]:
        return [r for r in self.rays if r.interior_only]


def _side_of(point, a, tol):
    x, y = point
    if abs(y - a) <= tol:
        return "south"
    if abs(x - (a + 1)) <= tol:
        return "east"
    if abs(y - (a + 1)) <= tol:
        return "north"
    return "west"


def boundary_parameter(point, a) -> float:
    """Counterclockwise arclength from (a, a): south [0,1), east [1,2), north [2,3), west [3,4)."""
    x, y = point[0] - a, point[1] - a
    side = _side_of(point, a, 1e-9)
    return {"south": x, "east": 1 + y, "north": 3 - x, "west": 4 - y}[side] % 4.0


def _fit_cluster(pts, grads, grid: Grid, reach: float) -> Ray:
    a = grid.a
    c = pts.mean(axis=0)
    if len(pts) >= 2:
        _, _, vt = np.linalg.svd(pts - c, full_matrices=False)
        e = vt[0]
    else:
        e = np.array([1.0, 0.0])
    s = (pts - c) @ e
    smin, smax = float(s.min()), float(s.max())
    both = np.vstack([e, -e])
    Ls, _ = _exit_distance(np.vstack([c, c]), both, a, a + 1)
    end_plus, end_minus = c + Ls[0] * e, c - Ls[1] * e
    gap_plus, gap_minus = Ls[0] - smax, Ls[1] + smin
    y = grads.mean(axis=0)
    spread = float(np.max(np.linalg.norm(grads - y, axis=1)))
    two = gap_plus <= reach and gap_minus <= reach
    if two:
        # report the foot on the west side (or south when the ray lies below the diagonal)
        sp, sm = _side_of(end_plus, a, 1e-9), _side_of(end_minus, a, 1e-9)
        use_minus = sm == "west" or (sp != "west" and sm == "south")
        foot, xi = (end_minus, e) if use_minus else (end_plus, -e)
        R = Ls[0] + Ls[1]
    elif gap_minus <= gap_plus:
        foot, xi, R = end_minus, e, Ls[1] + smax
    else:
        foot, xi, R = end_plus, -e, Ls[0] - smin
    interior = min(gap_plus, gap_minus) > reach
    q = (pts[:, 0] + pts[:, 1]) / math.sqrt(2)
    return Ray(foot, xi, float(R), y, _side_of(foot, a, 1e-9), bool(two), bool(interior), len(pts), spread,
               diag_extent=(float(q.min()), float(q.max())))


def _cluster(grads, scale):
    """Complete linkage on ``|Du(p) - Du(q)| / max(scale(p), scale(q))`` cut at 1."""
    if len(grads) == 1:
        return np.array([1])
    iu = np.triu_indices(len(grads), k=1)
    d = np.hypot(grads[iu[0], 0] - grads[iu[1], 0], grads[iu[0], 1] - grads[iu[1], 1])
    d /= np.maximum(scale[iu[0]], scale[iu[1]])
    Z = linkage(d, method="complete")
    return fcluster(Z, t=1.0, criterion="distance")


def extract_rays(u: ScalarField, masks: RegionMasks, tol: float | None = None, min_size: int = 3) -> RayExtraction:
    """Cluster bunched nodes by gradient and fit a segment to each cluster.

    Two nodes may share a cluster when their gradients differ by at most
    ``3 h`` times the larger of their largest Hessian eigenvalues, so the
    tolerance follows the local curvature; a fixed ``tol`` overrides this.
    Rays are sorted by boundary parameter.
    """
    grid = u.grid
    h = grid.h
    G = gradient(u)
    H = hessian(u)
    _, lmax = H.eigenvalues()
    x1, x2 = grid.mesh()
    reach = 2.0 * h * math.sqrt(2)

    def build(mask):
        idx = np.argwhere(mask)
        if len(idx) == 0:
            return [], None
        grads = np.column_stack([G.d1[mask], G.d2[mask]])
        pts = np.column_stack([x1[mask], x2[mask]])
        scale = np.full(len(pts), tol) if tol is not None else 3 * h * np.maximum(lmax[mask], 1e-12)
        lab = _cluster(grads, scale)
        out = []
        for k in np.unique(lab):
            sel = lab == k
            if sel.sum() < min_size:
                continue
            ray = _fit_cluster(pts[sel], grads[sel], grid, reach)
            ray.tolerance = float(scale[sel].max())
            out.append(ray)
        out.sort(key=lambda r: boundary_parameter(r.foot, grid.a))
        return out, float(np.max(scale))

    rays, t = build(masks.mask(OMEGA1))
    stray, _ = build(masks.stray)
    if not rays:
        log.info("no bunching detected")
    for r in rays:
        if r.interior_only:
            log.warning("interior-only bunch near %s", r.foot)
    return RayExtraction(rays, stray, t if t is not None else float("nan"))


def rays_to_json(rays: list[Ray]) -> str:
    return json.dumps([r.to_json() for r in rays], indent=1)


# -- regimes -----------------------------------------------------------------------

BLUNT_ANGLE_TOL = 0.05


def blunt_rays(rays: list[Ray], angle_tol: float = BLUNT_ANGLE_TOL) -> list[Ray]:
    """Two-sided rays orthogonal to the diagonal (to ``angle_tol``)."""
    return [r for r in rays if r.two_sided and abs(r.theta + math.pi / 4) <= angle_tol]


def ray_far_end(ray: Ray) -> np.ndarray:
    return ray.foot + ray.R * ray.xi


def blunt_span(rays: list[Ray], angle_tol: float = BLUNT_ANGLE_TOL) -> float:
    """Distance along the diagonal between the outermost blunt ray axes, 0 for fewer than two rays."""
    b = blunt_rays(rays, angle_tol)
    if len(b) < 2:
        return 0.0
    c = [0.5 * (r.diag_extent[0] + r.diag_extent[1]) for r in b]
    return float(max(c) - min(c))


def classify_regime(masks: RegionMasks, rays: list[Ray], angle_tol: float = BLUNT_ANGLE_TOL) -> str:
    """``A`` if the bunching area is at most ``2h``; ``C`` if a family of blunt rays spans at least three cells; else ``B``."""
    h = masks.grid.h
    if masks.areas()[OMEGA1] <= 2 * h:
        return "A"
    if blunt_span(rays, angle_tol) >= 3 * h:
        return "C"
    return "B"


# -- free boundary ----------------------------------------------------------------

@dataclass
class FreeBoundary:
    points: np.ndarray  # (m, 2)
    edges: np.ndarray  # (m, 4) node index pairs (i, j, i2, j2)
    polylines: list = field(default_factory=list)

    @property
    def empty(self) -> bool:
        return len(self.points) == 0

    def endpoints(self) -> np.ndarray:
        ends = [p[[0, -1]] for p in self.polylines if len(p) > 1]
        return np.vstack(ends) if ends else np.zeros((0, 2))


def _chain(points: np.ndarray, link: float) -> list:
    """Greedy nearest-neighbour ordering into polylines with gaps below ``link``."""
    if len(points) == 0:
        return []
    left = set(range(len(points)))
    lines = []
    while left:
        start = min(left, key=lambda k: (points[k][0], points[k][1]))
        line = [start]
        left.remove(start)
        for direction in (0, 1):
            while True:
                cur = points[line[-1] if direction == 0 else line[0]]
                cand = [k for k in left if np.hypot(*(points[k] - cur)) <= link]
                if not cand:
                    break
                k = min(cand, key=lambda q: np.hypot(*(points[q] - cur)))
                left.remove(k)
                if direction == 0:
                    line.append(k)
                else:
                    line.insert(0, k)
        lines.append(points[line])
    return lines


def free_boundary(masks: RegionMasks, level: np.ndarray | None = None) -> FreeBoundary:
    """Crossings on grid edges joining a bunched and a customization node.

    With ``level`` (e.g. ``ratio - eps1``) the crossing is placed by linear
    interpolation, otherwise at the edge midpoint.
    """
    g = masks.grid
    lab = masks.labels
    x1, x2 = g.mesh()
    pts, edges = [], []
    for di, dj in ((1, 0), (0, 1)):
        A = lab[: g.n - di, : g.n - dj]
        B = lab[di:, dj:]
        hit = ((A == OMEGA1) & (B == OMEGA2)) | ((A == OMEGA2) & (B == OMEGA1))
        for i, j in np.argwhere(hit):
            i2, j2 = i + di, j + dj
            w = 0.5
            if level is not None:
                la, lb = level[i, j], level[i2, j2]
                if la != lb and (la <= 0) != (lb <= 0):
                    w = float(np.clip(la / (la - lb), 0.0, 1.0))
            pts.append(((1 - w) * x1[i, j] + w * x1[i2, j2], (1 - w) * x2[i, j] + w * x2[i2, j2]))
            edges.append((i, j, i2, j2))
    pts = np.array(pts, dtype=float).reshape(-1, 2)
    edges = np.array(edges, dtype=np.int64).reshape(-1, 4)
    return FreeBoundary(pts, edges, _chain(pts, 1.5 * g.h))


# -- ray length profile ------------------------------------------------------------

@dataclass
class RProfile:
    t: np.ndarray
    R: np.ndarray
    max_jump: float
    local_maxima: list
    lipschitz: list  # max |secant slope| per monotone piece


def ray_diameter_profile(rays: list[Ray], side: str | None = None, exclude=None) -> RProfile:
    """``R`` against the foot coordinate along one side (the most populated by default).

    ``exclude`` optionally drops rays for which it returns True.
    """
    if side is None and rays:
        names = [r.side for r in rays]
        side = max(set(names), key=names.count)
    sel = [r for r in rays if r.side == side and not (exclude and exclude(r))]
    coord = 1 if side in ("west", "east") else 0
    t = np.array([r.foot[coord] for r in sel], dtype=float)
    R = np.array([r.R for r in sel], dtype=float)
    order = np.argsort(t)
    t, R = t[order], R[order]
    jumps = np.abs(np.diff(R))
    max_jump = float(jumps.max()) if len(jumps) else 0.0
    maxima = [int(k) for k in range(1, len(R) - 1) if R[k] >= R[k - 1] and R[k] >= R[k + 1]
              and (R[k] > R[k - 1] or R[k] > R[k + 1])]
    lips = []
    if len(R) > 1:
        slopes = np.diff(R) / np.maximum(np.diff(t), 1e-300)
        piece = [slopes[0]]
        for s_prev, s in zip(slopes[:-1], slopes[1:]):
            if np.sign(s) != np.sign(s_prev) and s != 0 and s_prev != 0:
                lips.append(float(np.max(np.abs(piece))))
                piece = []
            piece.append(s)
        lips.append(float(np.max(np.abs(piece))))
    return RProfile(t, R, max_jump, maxima, lips)


# -- export ------------------------------------------------------------------------

def format_mask(masks: RegionMasks) -> str:
    return format_labels(masks.grid, masks.labels)


def format_labels(g: Grid, labels: np.ndarray) -> str:
    lines = [MASK_HEADER, f"n={g.n} a={g.a:.17g}"]
    lines += [",".join(str(int(v)) for v in row) for row in labels]
    return "\n".join(lines) + "\n"


def parse_mask(text: str) -> tuple[Grid, np.ndarray]:
    lines = text.strip("\n").split("\n")
    if lines[0].strip() != MASK_HEADER:
        raise ValueError("bad mask header")
    meta = dict(tok.split("=", 1) for tok in lines[1].split())
    g = Grid(float(meta["a"]), int(meta["n"]))
    lab = np.array([[int(t) for t in ln.split(",")] for ln in lines[2:]], dtype=np.int64)
    if lab.shape != (g.n, g.n):
        raise ValueError("mask body does not match n")
    return g, lab

