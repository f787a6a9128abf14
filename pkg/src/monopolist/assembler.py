"""Piecewise candidate solutions on the square and their free-boundary residuals.

A candidate is glued from ``u = 0`` on the exclusion region, the explicit blunt
strip (case C), the leafwise fan ``u1`` above the diagonal with its mirror
image below, and ``u2`` solving ``Delta u2 = 3`` on the rest with
``(Du2 - x).n = 0`` on the square's sides and ``u2 = u1`` (or 0) on the
interfaces.  Interfaces cut grid edges; the cut-cell stencil places the
Dirichlet value at the crossing (Shortley-Weller).
"""

from __future__ import annotations

import json
import logging
import math
import os
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy.optimize import least_squares
from scipy.spatial import ConvexHull

from .grid import Grid, ScalarField, format_field, make_grid
from .solver import energy
from .square_ode import (BluntZone, FanEvaluator, LeafProfile, PiecewiseLinearR, ProfileError, blunt_initial_conditions,
                         blunt_zone, integrate_slope_el, write_polygon_json)

log = logging.getLogger(__name__)

EXCLUSION, STRIP, FAN, CUSTOM = 0, 10, 11, 2
SIDE_NAMES = ("south", "east", "north", "west")


class GeometryError(ValueError):
    pass


# -- geometry --------------------------------------------------------------------

@dataclass
class Geometry:
    """Region indicator of a candidate.  The fan lives above the diagonal and is mirrored."""

    a: float
    case: str  # "B" (targeted only) or "C" (blunt strip present)
    hull: np.ndarray | None  # (k, 3) half-plane equations of the exclusion region (case B)
    zone: BluntZone | None
    fan: FanEvaluator | None

    def _upper(self, x1, x2):
        flip = x2 < x1
        return np.where(flip, x2, x1), np.where(flip, x1, x2), flip

    def label(self, x1, x2) -> np.ndarray:
        x1 = np.asarray(x1, dtype=float)
        x2 = np.asarray(x2, dtype=float)
        out = np.full(np.broadcast(x1, x2).shape, CUSTOM, dtype=np.int64)
        if self.case == "C":
            w = x1 + x2 - 2 * self.a
            out[w <= self.zone.w0] = EXCLUSION
            out[(w > self.zone.w0) & (w <= self.zone.w1)] = STRIP
        else:
            eq = self.hull
            vals = eq[:, :2] @ np.vstack([x1.ravel(), x2.ravel()]) + eq[:, 2:3]
            out[np.all(vals <= 1e-12, axis=0).reshape(out.shape)] = EXCLUSION
        if self.fan is not None:
            y1, y2, _ = self._upper(x1, x2)
            _, _, ins = self.fan.locate(y1.ravel(), y2.ravel())
            ins = ins.reshape(out.shape) & (out == CUSTOM)
            out[ins] = FAN
        return out

    def value(self, x1, x2, lab) -> np.ndarray:
        """``u`` of the region ``lab`` at the points, extended past its boundary."""
        x1 = np.asarray(x1, dtype=float)
        x2 = np.asarray(x2, dtype=float)
        lab = np.broadcast_to(lab, x1.shape)
        out = np.zeros(x1.shape)
        if self.zone is not None:
            sel = lab == STRIP
            out[sel] = self.zone.phi(np.maximum(x1[sel] + x2[sel] - 2 * self.a, 1e-12))
        sel = lab == FAN
        if np.any(sel) and self.fan is not None:
            y1, y2, _ = self._upper(x1[sel], x2[sel])
            th, r = self._fan_coords(y1, y2)
            out[sel] = self.fan.value_at(th, r)
        return out

    def gradient(self, x1, x2, lab) -> tuple[np.ndarray, np.ndarray]:
        x1 = np.asarray(x1, dtype=float)
        x2 = np.asarray(x2, dtype=float)
        lab = np.broadcast_to(lab, x1.shape)
        g1, g2 = np.zeros(x1.shape), np.zeros(x1.shape)
        if self.zone is not None:
            sel = lab == STRIP
            d = self.zone.dphi(np.maximum(x1[sel] + x2[sel] - 2 * self.a, 1e-12))
            g1[sel], g2[sel] = d, d
        sel = lab == FAN
        if np.any(sel) and self.fan is not None:
            y1, y2, flip = self._upper(x1[sel], x2[sel])
            th, _ = self._fan_coords(y1, y2)
            d1, d2 = self.fan.gradient_at(th)
            g1[sel] = np.where(flip, d2, d1)
            g2[sel] = np.where(flip, d1, d2)
        return g1, g2

    def _fan_coords(self, y1, y2):
        th, r, _ = self.fan.locate(y1, y2)
        # points just past the tips or the outer rays: clamp to the nearest ray
        lo, hi = self.fan.theta_lo, self.fan.theta_hi
        bad = np.isnan(th)
        if np.any(bad):
            c_lo = self.fan._cross(np.full(bad.sum(), lo), y1[bad], y2[bad])
            th[bad] = np.where(np.abs(c_lo) <= np.abs(self.fan._cross(np.full(bad.sum(), hi), y1[bad], y2[bad])), lo, hi)
            r[bad] = (y1[bad] - self.a) / np.cos(th[bad])
        return th, r


# -- mixed boundary value problem ---------------------------------------------------

@dataclass
class Crossing:
    """Interface crossings on grid edges from a customization node outwards."""

    node: np.ndarray  # (m, 2) node indices
    axis: np.ndarray  # 0 or 1
    sign: np.ndarray  # +1 / -1 direction
    s: np.ndarray  # fraction of h to the crossing
    point: np.ndarray  # (m, 2)
    value: np.ndarray
    region: np.ndarray  # label of the other side


@dataclass
class MixedSolution:
    u: np.ndarray  # (n, n), NaN off the customization region
    mask: np.ndarray
    crossings: Crossing
    unknowns: int


def _bisect_crossings(p0, p1, inside, iters: int = 40):
    """Fraction along p0->p1 where ``inside`` first becomes False (p0 inside, p1 outside)."""
    lo = np.zeros(len(p0))
    hi = np.ones(len(p0))
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        pt = p0 + mid[:, None] * (p1 - p0)
        ins = inside(pt[:, 0], pt[:, 1])
        lo = np.where(ins, mid, lo)
        hi = np.where(ins, hi, mid)
    return 0.5 * (lo + hi)


def solve_mixed_bvp(grid: Grid, mask: np.ndarray | None = None, inside=None, dirichlet=None, f=3.0,
                    sides: dict | None = None, neumann=None, labels: np.ndarray | None = None) -> MixedSolution:
    """``Delta u = f`` on the nodes of ``mask``.

    ``inside(x1, x2)`` is the continuous region indicator used to place cut
    crossings (without it crossings sit at the neighbouring node).
    ``dirichlet(x1, x2)`` supplies values at crossings and on Dirichlet sides;
    with node ``labels`` it is called as ``dirichlet(x1, x2, label)`` using the
    label of the node across each crossing.
    ``sides`` maps side names to ``"neumann"`` (default) or ``"dirichlet"``;
    ``neumann(x1, x2, n1, n2)`` is the outward normal derivative, default ``x.n``.
    """
    n, h = grid.n, grid.h
    x1, x2 = grid.mesh()
    if mask is None:
        if inside is None:
            raise ValueError("need a mask or an indicator")
        mask = np.asarray(inside(x1, x2), dtype=bool)
    mask = np.array(mask, dtype=bool)
    sides = {s: "neumann" for s in SIDE_NAMES} | dict(sides or {})
    for kind in sides.values():
        if kind not in ("neumann", "dirichlet"):
            raise ValueError(f"unknown side condition {kind!r}")

    def g_at(y1, y2, lab):
        return dirichlet(y1, y2, lab) if labels is not None else dirichlet(y1, y2)

    if neumann is None:
        def neumann(y1, y2, n1, n2):
            return y1 * n1 + y2 * n2
    fixed = np.zeros((n, n), dtype=bool)
    if sides["south"] == "dirichlet":
        fixed[:, 0] = True
    if sides["east"] == "dirichlet":
        fixed[-1, :] = True
    if sides["north"] == "dirichlet":
        fixed[:, -1] = True
    if sides["west"] == "dirichlet":
        fixed[0, :] = True
    unk = mask & ~fixed
    if not unk.any():
        raise ValueError("empty customization region")
    idx = -np.ones((n, n), dtype=np.int64)
    idx[unk] = np.arange(int(unk.sum()))
    nodes = np.argwhere(unk)
    F = np.broadcast_to(np.asarray(f, dtype=float), (n, n))

    # classify the 4 directions of every unknown
    dirs = [(0, 1), (0, -1), (1, 1), (1, -1)]
    info = {}
    cross_rows = []
    for axis, sgn in dirs:
        nb = nodes.copy()
        nb[:, axis] += sgn
        outside_sq = (nb[:, axis] < 0) | (nb[:, axis] >= n)
        nbc = np.clip(nb, 0, n - 1)
        nb_unknown = ~outside_sq & unk[nbc[:, 0], nbc[:, 1]]
        nb_fixed_side = ~outside_sq & fixed[nbc[:, 0], nbc[:, 1]] & mask[nbc[:, 0], nbc[:, 1]]
        cut = ~outside_sq & ~mask[nbc[:, 0], nbc[:, 1]]
        s = np.ones(len(nodes))
        gval = np.zeros(len(nodes))
        if np.any(cut):
            p0 = np.column_stack([x1[nodes[cut, 0], nodes[cut, 1]], x2[nodes[cut, 0], nodes[cut, 1]]])
            p1 = np.column_stack([x1[nbc[cut, 0], nbc[cut, 1]], x2[nbc[cut, 0], nbc[cut, 1]]])
            frac = _bisect_crossings(p0, p1, inside) if inside is not None else np.ones(len(p0))
            frac = np.maximum(frac, 1e-6)
            pts = p0 + frac[:, None] * (p1 - p0)
            s[cut] = frac
            reg = labels[nbc[cut, 0], nbc[cut, 1]] if labels is not None else np.full(len(pts), -1)
            gval[cut] = g_at(pts[:, 0], pts[:, 1], reg)
            cross_rows.append((nodes[cut], np.full(cut.sum(), axis), np.full(cut.sum(), sgn), frac, pts, gval[cut], reg))
        if np.any(nb_fixed_side):
            q = nbc[nb_fixed_side]
            gval[nb_fixed_side] = g_at(x1[q[:, 0], q[:, 1]], x2[q[:, 0], q[:, 1]],
                                       labels[q[:, 0], q[:, 1]] if labels is not None else None)
        info[(axis, sgn)] = dict(outside=outside_sq, unknown=nb_unknown, cut=cut | nb_fixed_side, s=s, g=gval,
                                 nbidx=np.where(nb_unknown, idx[nbc[:, 0], nbc[:, 1]], -1))
    if not any(np.any(v["cut"]) for v in info.values()):
        raise ValueError("singular system: no Dirichlet data on the customization region")

    rows, cols, vals = [], [], []
    rhs = F[nodes[:, 0], nodes[:, 1]].copy()
    me = np.arange(len(nodes))
    xn1, xn2 = x1[nodes[:, 0], nodes[:, 1]], x2[nodes[:, 0], nodes[:, 1]]
    for axis in (0, 1):
        m_, p_ = info[(axis, -1)], info[(axis, 1)]
        for outer, inner, sgn in ((m_, p_, -1), (p_, m_, 1)):
            # one side leaves the square: Neumann quadratic
            sel = outer["outside"]
            if not np.any(sel):
                continue
            nrm = np.zeros((sel.sum(), 2))
            nrm[:, axis] = sgn
            N = neumann(xn1[sel], xn2[sel], nrm[:, 0], nrm[:, 1])
            si = inner["s"][sel]
            c = 2.0 / (si * si * h * h)
            rows += [me[sel]]
            cols += [me[sel]]
            vals += [-c]
            uk = inner["unknown"][sel]
            rows += [me[sel][uk]]
            cols += [inner["nbidx"][sel][uk]]
            vals += [c[uk]]
            rhs[sel] -= np.where(uk, 0.0, c * inner["g"][sel])
            rhs[sel] -= 2.0 * N / (si * h)
        both = ~m_["outside"] & ~p_["outside"]
        sm, sp_ = m_["s"][both], p_["s"][both]
        cm = 2.0 / (h * h * sm * (sm + sp_))
        cp = 2.0 / (h * h * sp_ * (sm + sp_))
        rows += [me[both]]
        cols += [me[both]]
        vals += [-(cm + cp)]
        for d, coef in ((m_, cm), (p_, cp)):
            uk = d["unknown"][both]
            rows += [me[both][uk]]
            cols += [d["nbidx"][both][uk]]
            vals += [coef[uk]]
            rhs[both] -= np.where(uk, 0.0, coef * d["g"][both])
    A = sp.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                      shape=(len(nodes), len(nodes)))
    sol = spla.spsolve(A.tocsc(), rhs)
    u = np.full((n, n), np.nan)
    u[unk] = sol
    if fixed.any():
        fm = fixed & mask
        u[fm] = g_at(x1[fm], x2[fm], labels[fm] if labels is not None else None)
    if cross_rows:
        parts = list(zip(*cross_rows))
        cr = Crossing(*(np.concatenate(p) for p in parts))
    else:
        cr = Crossing(np.zeros((0, 2), int), np.zeros(0, int), np.zeros(0, int), np.zeros(0), np.zeros((0, 2)),
                      np.zeros(0), np.zeros(0, int))
    return MixedSolution(u, mask, cr, len(nodes))


# -- candidates -------------------------------------------------------------------------

@dataclass
class CandidateParams:
    """Case C: ``w1`` and knot values after the first; case B: ``theta0, h0, R0`` and knot values."""

    case: str
    values: np.ndarray
    knots: int = 6
    fractions: np.ndarray | None = None  # knot positions as fractions of [theta0, 0]; uniform by default

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.fractions is None:
            self.fractions = np.linspace(0.0, 1.0, self.knots)
        self.fractions = np.asarray(self.fractions, dtype=float)
        if len(self.fractions) != self.knots or self.fractions[0] != 0 or np.any(np.diff(self.fractions) <= 0):
            raise ValueError("knot fractions must start at 0 and increase")
        if len(self.values) != len(self.names()):
            raise ValueError(f"expected {len(self.names())} parameter values")

    def copy(self) -> "CandidateParams":
        return CandidateParams(self.case, np.array(self.values, dtype=float), self.knots, self.fractions.copy())

    def knot_thetas(self, theta0: float) -> np.ndarray:
        return theta0 * (1.0 - self.fractions)

    def names(self) -> list[str]:
        head = ["w1"] if self.case == "C" else ["theta0", "h0", "R0"]
        return head + [f"R{k}" for k in range(1, self.knots)]

    def to_json(self) -> dict:
        return {"case": self.case, "knots": self.knots, "fractions": [float(f) for f in self.fractions],
                **{k: float(v) for k, v in zip(self.names(), self.values)}}

    @classmethod
    def from_json(cls, d: dict) -> "CandidateParams":
        head = ["w1"] if d["case"] == "C" else ["theta0", "h0", "R0"]
        names = head + [f"R{k}" for k in range(1, d["knots"])]
        return cls(d["case"], np.array([d[k] for k in names]), d["knots"], d.get("fractions"))


@dataclass
class CandidateSolution:
    a: float
    params: CandidateParams
    geometry: Geometry
    profile: LeafProfile | None
    zone: BluntZone | None
    labels: np.ndarray  # EXCLUSION / STRIP / FAN / CUSTOM per node
    mixed: MixedSolution
    field: ScalarField

    @property
    def hypotenuse(self) -> float:
        """Offset ``s`` of the exclusion region's diagonal edge ``x1 + x2 = s``."""
        if self.zone is not None:
            return self.zone.s
        p = self.profile
        tip = np.array([self.a + p.R0 * math.cos(p.theta0), p.h0 + p.R0 * math.sin(p.theta0)])
        return float(tip.sum())

    def energy(self) -> float:
        return energy(self.field)

    def exclusion_polygon(self) -> np.ndarray:
        a = self.a
        if self.zone is not None:
            w0 = self.zone.w0
            return np.array([(a, a), (a + w0, a), (a, a + w0)])
        p = self.profile
        P = (a + p.R0 * math.cos(p.theta0), p.h0 + p.R0 * math.sin(p.theta0))
        return np.array([(a, a), (p.h0, a), (P[1], P[0]), P, (a, p.h0)])


def build_profile(a: float, params: CandidateParams, step: float = 2e-3):
    """Integrate the fan for ``params``; returns ``(profile or None, zone or None)``."""
    v = np.asarray(params.values, dtype=float)
    if params.case == "C":
        w1 = float(v[0])
        zone = blunt_zone(a, w1)
        if not zone.w0 < w1 < 1.0:
            raise GeometryError("strip edge outside (w0, 1)")
        ic = blunt_initial_conditions(zone, w1)
        Rf = PiecewiseLinearR(params.knot_thetas(ic["theta0"]), np.r_[ic["R0"], v[1:]])
        prof = integrate_slope_el(a, ic["theta0"], ic["h0"], ic["R0"], Rf, step=step, mp0=ic["mp0"], b0=ic["b0"],
                                  richardson=False)
        return prof, zone
    theta0, h0, R0 = map(float, v[:3])
    if R0 <= 0 and np.all(v[3:] <= 0):
        # no bunching: exclusion triangle with legs h0 - a
        return integrate_slope_el(a, theta0, h0, 0.0, 0.0, step=max(step, -theta0), richardson=False), None
    Rf = PiecewiseLinearR(params.knot_thetas(theta0), np.r_[R0, v[3:]])
    prof = integrate_slope_el(a, theta0, h0, R0, Rf, step=step, richardson=False)
    return prof, None


def _hull_equations(points: np.ndarray) -> np.ndarray:
    pts = np.unique(np.round(points, 14), axis=0)
    if len(pts) < 3:
        raise GeometryError("degenerate exclusion region")
    return ConvexHull(pts).equations


def assemble_candidate(a: float, params: CandidateParams, grid: Grid | None = None, n: int = 65,
                       step: float = 2e-3) -> CandidateSolution:
    """Integrate the fan, lay out the regions, solve for ``u2`` and glue."""
    if not a > 0:
        raise ValueError("candidates need a > 0")
    grid = grid or make_grid(a, n)
    prof, zone = build_profile(a, params, step)
    trivial = prof is not None and np.all(prof.R <= 0)
    fan = None if trivial else FanEvaluator(prof)
    if fan is not None:
        tips = prof.tips()
        if np.any(tips[:, 1] < tips[:, 0] - 1e-9):
            raise GeometryError("geometry overlap: fan crosses the diagonal")
    if zone is not None:
        geom = Geometry(a, "C", None, zone, fan)
    else:
        P = (a + prof.R0 * math.cos(prof.theta0), prof.h0 + prof.R0 * math.sin(prof.theta0))
        if P[1] < P[0] - 1e-12:
            raise GeometryError("geometry overlap: first ray crosses the diagonal")
        hull = _hull_equations(np.array([(a, a), (prof.h0, a), (P[1], P[0]), P, (a, prof.h0)]))
        geom = Geometry(a, "B", hull, None, fan)
    x1, x2 = grid.mesh()
    labels = geom.label(x1, x2)
    mask = labels == CUSTOM

    def inside(y1, y2):
        return geom.label(y1, y2) == CUSTOM

    mixed = solve_mixed_bvp(grid, mask, inside, geom.value, labels=labels)
    glued = geom.value(x1, x2, labels)
    glued[mask] = mixed.u[mask]
    return CandidateSolution(a, params.copy(), geom, prof, zone, labels, mixed, ScalarField(grid, glued))


# -- residuals ---------------------------------------------------------------------------------

@dataclass
class ResidualReport:
    r_interface: float
    r_exclusion: float
    r_fixed: float
    r_c1: float
    weights: tuple = (1.0, 1.0, 1.0, 1.0)

    @property
    def objective(self) -> float:
        w = self.weights
        return float(w[0] * self.r_interface + w[1] * self.r_exclusion + w[2] * self.r_fixed + w[3] * self.r_c1)

    def to_json(self) -> dict:
        return {"r_interface": self.r_interface, "r_exclusion": self.r_exclusion, "r_fixed": self.r_fixed,
                "r_c1": self.r_c1, "objective": self.objective}


def _edge_derivative(g, u0, u1, s, h, have_u1):
    """d/drho at rho=0 of the interpolant through (0, g), (-s h, u0), (-(s+1) h, u1)."""
    lin = (g - u0) / (s * h)
    a0, a1 = -s * h, -(s + 1) * h
    # Lagrange derivative at 0 for nodes 0, a0, a1
    d = g * (-(a0 + a1)) / (a0 * a1) + u0 * (-a1) / (a0 * (a0 - a1)) + u1 * (-a0) / (a1 * (a1 - a0))
    return np.where(have_u1, d, lin)


def _local_normals(points: np.ndarray, k: int = 7) -> np.ndarray:
    """Unit normals of a curve sampled by ``points`` from local principal axes."""
    m = len(points)
    out = np.zeros((m, 2))
    if m < 2:
        out[:, 0] = 1.0
        return out
    d2 = np.sum((points[:, None, :] - points[None, :, :]) ** 2, axis=2)
    nearest = np.argsort(d2, axis=1)[:, : min(k, m)]
    for i in range(m):
        q = points[nearest[i]] - points[nearest[i]].mean(axis=0)
        _, _, vt = np.linalg.svd(q, full_matrices=False)
        out[i] = vt[-1] if vt.shape[0] > 1 else np.array([-vt[0, 1], vt[0, 0]])
    return out


def free_boundary_residuals(cand: CandidateSolution, weights=(1.0, 1.0, 1.0, 1.0)) -> ResidualReport:
    """Interface and boundary residuals of the customization piece, from one-sided differences."""
    grid = cand.field.grid
    n, h = grid.n, grid.h
    U = cand.field.values
    mask = cand.mixed.mask
    cr = cand.mixed.crossings
    r_int = r_exc = r_c1 = 0.0
    if len(cr.s):
        i, j = cr.node[:, 0], cr.node[:, 1]
        back = cr.node.copy()
        back[np.arange(len(back)), cr.axis] -= cr.sign
        okb = (back >= 0).all(axis=1) & (back < n).all(axis=1)
        bc = np.clip(back, 0, n - 1)
        have = okb & mask[bc[:, 0], bc[:, 1]]
        u0 = U[i, j]
        u1 = np.where(have, U[bc[:, 0], bc[:, 1]], 0.0)
        d_along = cr.sign * _edge_derivative(cr.value, u0, u1, cr.s, h, have)
        # the other component by differences of the glued field at the node
        G = [np.gradient(U, h, axis=0, edge_order=2), np.gradient(U, h, axis=1, edge_order=2)]
        du2 = np.zeros((len(i), 2))
        for ax in (0, 1):
            du2[:, ax] = np.where(cr.axis == ax, d_along, G[ax][i, j])
        o1, o2 = cand.geometry.gradient(cr.point[:, 0], cr.point[:, 1], cr.region)
        jump = du2 - np.column_stack([o1, o2])
        nrm = np.zeros_like(jump)
        for lab in np.unique(cr.region):
            sel = cr.region == lab
            nrm[sel] = _local_normals(cr.point[sel])
        normal_jump = np.abs(np.sum(jump * nrm, axis=1))
        excl = cr.region == EXCLUSION
        if np.any(~excl):
            r_int = float(normal_jump[~excl].max())
        if np.any(excl):
            r_exc = float(normal_jump[excl].max())
        r_c1 = float(np.linalg.norm(jump, axis=1).max())
    # Neumann condition on customization nodes of the sides, second-order one-sided
    x1, x2 = grid.mesh()
    fixed = []
    for side, (sl, inward, nrm, coord) in {
        "south": ((slice(1, -1), 0), (0, 1), (0.0, -1.0), x2),
        "north": ((slice(1, -1), n - 1), (0, -1), (0.0, 1.0), x2),
        "west": ((0, slice(1, -1)), (1, 0), (-1.0, 0.0), x1),
        "east": ((n - 1, slice(1, -1)), (-1, 0), (1.0, 0.0), x1),
    }.items():
        line = np.zeros((n, n), dtype=bool)
        line[sl] = True
        for p in np.argwhere(line & mask):
            q1 = p + np.array(inward)
            q2 = p + 2 * np.array(inward)
            if not (mask[tuple(q1)] and mask[tuple(q2)]):
                continue
            # outward derivative = -(inward derivative)
            d_in = (-3 * U[tuple(p)] + 4 * U[tuple(q1)] - U[tuple(q2)]) / (2 * h)
            xn = x1[tuple(p)] * nrm[0] + x2[tuple(p)] * nrm[1]
            fixed.append(abs(-d_in - xn))
    r_fix = float(max(fixed)) if fixed else 0.0
    return ResidualReport(r_int, r_exc, r_fix, r_c1, tuple(weights))


# -- initial parameters --------------------------------------------------------------------------

def initial_params_from_rays(a: float, rays, case: str = "C", knots: int = 6, w1: float | None = None) -> CandidateParams:
    """Least-squares fit of the fan's feet and slopes to extracted tame rays above the diagonal."""
    tame = [r for r in rays if r.side == "west" and not r.two_sided and not r.interior_only]
    blunt = [r for r in rays if r.two_sided and abs(r.theta + math.pi / 4) <= 0.05]
    if len(tame) < 2:
        raise ValueError("need at least two tame rays on the west side")
    th = np.array([r.theta for r in tame])
    t = np.array([r.foot[1] for r in tame])
    R = np.array([r.R for r in tame])
    m = np.array([float(np.dot(r.grad, r.xi)) for r in tame])
    if case == "C":
        if w1 is None:
            w1 = max(r.foot[1] for r in blunt) - a if blunt else float(t.min() - a)
        theta0 = -math.pi / 4
        head = [w1]
    else:
        k0 = int(np.argmin(th))
        theta0 = float(max(th[k0], -math.pi / 4 + 1e-6))
        head = [theta0, float(t[k0]), float(R[k0])]

    def fit(p0, fractions):
        def res(p):
            try:
                prof, _ = build_profile(a, CandidateParams(case, p, knots, fractions))
            except (ProfileError, GeometryError, ValueError):
                return np.full(2 * len(th), 1.0)
            tc = np.clip(th, prof.theta[0], prof.theta[-1])
            return np.r_[np.interp(tc, prof.theta, prof.h) - t, 0.1 * (np.interp(tc, prof.theta, prof.m) - m)]
        return least_squares(res, p0, diff_step=1e-4)

    order = np.argsort(th)
    # stage 1: uniform knots on [theta0, 0]
    uni = np.linspace(0.0, 1.0, knots)
    vals = np.interp(theta0 * (1 - uni[1:]), th[order], R[order])
    vals[-1] = -abs(vals[-2])  # let R vanish before theta = 0
    s1 = fit(np.r_[head, vals], uni)
    best = (s1.cost, s1.x, uni)
    # stage 2: interior knots at quantiles of the observed angles, the last just past the top ray
    last = min(float(th.max()) + 0.03, -1e-3)
    inner = np.quantile(th, np.linspace(0.25, 0.95, knots - 2)) if knots > 2 else np.zeros(0)
    kn = np.unique(np.r_[theta0, np.clip(inner, theta0 + 1e-3, last - 1e-3), last])
    if len(kn) == knots and np.isfinite(s1.cost):
        frac = 1.0 - kn / theta0
        Rs1 = PiecewiseLinearR(theta0 * (1 - uni), np.r_[s1.x[len(head) - 1] / math.sqrt(2) if case == "C" else s1.x[2],
                                                           s1.x[len(head):]])
        v2 = np.asarray(Rs1(kn[1:]), dtype=float)
        v2[-1] = min(v2[-1], -abs(v2[-2]))
        s2 = fit(np.r_[s1.x[:len(head)], v2], frac)
        if s2.cost < best[0]:
            best = (s2.cost, s2.x, frac)
    log.info("ray fit cost %.3g", best[0])
    return CandidateParams(case, best[1], knots, best[2])


def blunt_params(a: float, w1: float, R_values, knots: int = 6) -> CandidateParams:
    zone = blunt_zone(a, w1)
    if not zone.blunt_expected:
        log.info("a=%g is below the sufficient blunt threshold", a)
    return CandidateParams("C", np.r_[w1, np.asarray(R_values, dtype=float)], knots)


# -- outer fit ---------------------------------------------------------------------------------------

@dataclass
class FitOptions:
    n: int = 65
    sweeps: int = 3
    golden_iters: int = 10
    radius: float | None = None  # initial bracket half-width per coordinate (default 0.05)
    shrink: float = 0.5
    weights: tuple = (1.0, 1.0, 1.0, 1.0)
    step: float = 2e-3


@dataclass
class FitResult:
    candidate: CandidateSolution
    report: ResidualReport
    params: CandidateParams
    trace: list = field(default_factory=list)  # (evaluation, objective)
    initial_objective: float = float("nan")


def _evaluate(a, params, opts, cache):
    key = tuple(np.round(params.values, 12))
    if key in cache:
        return cache[key]
    try:
        cand = assemble_candidate(a, params, n=opts.n, step=opts.step)
        rep = free_boundary_residuals(cand, opts.weights)
        out = (rep.objective, cand, rep)
    except (ProfileError, GeometryError, ValueError, RuntimeError) as exc:
        log.debug("probe rejected: %s", exc)
        out = (math.inf, None, None)
    cache[key] = out
    return out


def fit_free_boundary(a: float, init: CandidateParams, opts: FitOptions | None = None) -> FitResult:
    """Coordinate search with golden-section line searches on the residual objective.

    A probe replaces the incumbent only if it lowers the objective, so the
    returned objective never exceeds the initial one.
    """
    if not a > 0:
        raise ValueError("fit needs a > 0")
    opts = opts or FitOptions()
    cache: dict = {}
    trace = []
    best = init.copy()
    f_best, c_best, r_best = _evaluate(a, best, opts, cache)
    trace.append((0, f_best))
    f_init = f_best
    radius = opts.radius or 0.05
    invphi = (math.sqrt(5) - 1) / 2
    evals = 1
    for sweep in range(opts.sweeps):
        for k in range(len(best.values)):
            x0 = best.values[k]

            def f(x):
                nonlocal evals
                p = best.copy()
                p.values[k] = x
                evals += 1
                return _evaluate(a, p, opts, cache)

            lo, hi = x0 - radius, x0 + radius
            c, d = hi - invphi * (hi - lo), lo + invphi * (hi - lo)
            fc, fd = f(c)[0], f(d)[0]
            for _ in range(opts.golden_iters):
                if fc <= fd:
                    hi, d, fd = d, c, fc
                    c = hi - invphi * (hi - lo)
                    fc = f(c)[0]
                else:
                    lo, c, fc = c, d, fd
                    d = lo + invphi * (hi - lo)
                    fd = f(d)[0]
            x = c if fc <= fd else d
            fx, cx, rx = f(x)
            if fx < f_best:
                best.values[k] = x
                f_best, c_best, r_best = fx, cx, rx
            trace.append((evals, f_best))
        radius *= opts.shrink
        log.info("fit sweep %d: objective %.4g", sweep, f_best)
    if c_best is None:
        raise GeometryError("no admissible candidate")
    return FitResult(c_best, r_best, best, trace, f_init)


# -- bundle ---------------------------------------------------------------------------------------------

def write_candidate_bundle(outdir, cand: CandidateSolution, report: ResidualReport) -> None:
    os.makedirs(outdir, exist_ok=True)
    with open(os.path.join(outdir, "field.csv"), "w") as fh:
        fh.write(format_field(cand.field))
    u2 = cand.mixed.u.copy()
    with open(os.path.join(outdir, "u2.csv"), "w") as fh:
        fh.write(format_field(ScalarField(cand.field.grid, np.nan_to_num(u2, nan=0.0))))
    write_polygon_json(os.path.join(outdir, "omega0.json"), cand.exclusion_polygon())
    if cand.geometry.fan is not None:
        write_polygon_json(os.path.join(outdir, "omega1_minus.json"), cand.geometry.fan.polygon())
    if cand.zone is not None:
        write_polygon_json(os.path.join(outdir, "omega1_zero.json"), np.array(cand.zone.strip_polygon()))
    with open(os.path.join(outdir, "residuals.json"), "w") as fh:
        json.dump(report.to_json(), fh, indent=1)
    with open(os.path.join(outdir, "params.json"), "w") as fh:
        json.dump(cand.params.to_json(), fh, indent=1)
    if cand.profile is not None:
        cand.profile.to_csv(os.path.join(outdir, "profile.csv"))
