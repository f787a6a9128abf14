"""Leafwise identities along tame rays, evaluated as numerical residuals.

A family of rays is parameterized by ``t`` as ``x(r, t) = gamma(t) + r xi(t)``,
``0 <= r <= R(t)``, with foot ``gamma(t)`` on a side of the square.  With
``j = xi x gamma'`` and ``f = xi x xi'`` the Jacobian is ``J = j + r f`` and
an exact minimizer satisfies

    (3 - Delta u) J = f (3 r - 2 R)                       along each ray
    int_0^R (3 - Delta u) J dr + |gamma'| N = 0           (zeroth moment)
    int_0^R (3 - Delta u) J r dr = 0                      (first moment)
    R^2 |xi'| = 2 |gamma'| N                              (Neumann relation)

where ``N = (Du - x).n`` at the foot.  Integrals are composite Simpson along
the ray, which is exact on the quadratic integrands of an exact profile.
"""

from __future__ import annotations

import csv
import io
import logging
import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.integrate import simpson
from scipy.interpolate import RegularGridInterpolator

from .grid import SIDE_NORMALS, ScalarField, gradient, hessian

log = logging.getLogger(__name__)

UNTAMED_TOL = 1e-12
RESIDUAL_COLUMNS = ("t", "R", "res_moment0", "res_moment1", "res_neumann", "min_localization")


def cross(u, v):
    u, v = np.asarray(u), np.asarray(v)
    return u[..., 0] * v[..., 1] - u[..., 1] * v[..., 0]


def local_quadratic(t: np.ndarray, y: np.ndarray, width: int = 5) -> tuple[np.ndarray, np.ndarray]:
    """Value and slope of a least-squares quadratic through ``width`` neighbours of each sample."""
    t = np.asarray(t, dtype=float)
    y = np.asarray(y, dtype=float)
    k = len(t)
    if k < 3:
        slope = np.gradient(y, t) if k == 2 else np.zeros(k)
        return y.copy(), slope
    half = width // 2
    val = np.empty(k)
    der = np.empty(k)
    for i in range(k):
        lo = max(0, min(i - half, k - width))
        hi = min(k, lo + width)
        tt = t[lo:hi] - t[i]
        deg = min(2, len(np.unique(tt)) - 1)
        c = np.polyfit(tt, y[lo:hi], deg)
        val[i] = c[-1]
        der[i] = c[-2] if deg >= 1 else 0.0
    return val, der


@dataclass
class LeafFamily:
    t: np.ndarray
    gamma: np.ndarray  # (k, 2) feet
    xi: np.ndarray  # (k, 2) unit directions
    R: np.ndarray
    normal: np.ndarray  # (k, 2) outward normals at the feet
    grad: np.ndarray | None = None  # (k, 2) Du on each ray
    gamma_dot: np.ndarray | None = None
    xi_dot: np.ndarray | None = None
    grad_dot: np.ndarray | None = None

    def __post_init__(self):
        self.t = np.asarray(self.t, dtype=float)
        k = len(self.t)
        if k >= 2 and np.any(np.diff(self.t) <= 0):
            raise ValueError("t must be strictly increasing")
        self.gamma = np.asarray(self.gamma, dtype=float).reshape(k, 2)
        self.xi = np.asarray(self.xi, dtype=float).reshape(k, 2)
        self.R = np.asarray(self.R, dtype=float).reshape(k)
        self.normal = np.broadcast_to(np.asarray(self.normal, dtype=float), (k, 2)).copy()
        if not np.allclose(np.linalg.norm(self.xi, axis=1), 1.0, atol=1e-10):
            raise ValueError("xi must be unit vectors")

        def d(arr):
            return np.gradient(arr, self.t, axis=0, edge_order=1) if k >= 2 else np.zeros_like(arr)

        if self.gamma_dot is None:
            self.gamma_dot = d(self.gamma)
        if self.xi_dot is None:
            self.xi_dot = d(self.xi)
        if self.grad is not None:
            self.grad = np.asarray(self.grad, dtype=float).reshape(k, 2)
            if self.grad_dot is None:
                self.grad_dot = d(self.grad)

    def __len__(self):
        return len(self.t)

    @property
    def j(self) -> np.ndarray:
        return cross(self.xi, self.gamma_dot)

    @property
    def f(self) -> np.ndarray:
        return cross(self.xi, self.xi_dot)

    @property
    def speed(self) -> np.ndarray:
        return np.linalg.norm(self.gamma_dot, axis=1)

    @property
    def turn(self) -> np.ndarray:
        return np.linalg.norm(self.xi_dot, axis=1)

    @property
    def neumann(self) -> np.ndarray:
        """``(Du - x).n`` at each foot."""
        if self.grad is None:
            raise ValueError("family has no gradient values")
        return np.sum((self.grad - self.gamma) * self.normal, axis=1)

    def index(self, t: float) -> int:
        if not self.t[0] - 1e-12 <= t <= self.t[-1] + 1e-12:
            raise ValueError(f"t={t} outside the family range [{self.t[0]}, {self.t[-1]}]")
        return int(np.argmin(np.abs(self.t - t)))

    def delta_from_gradients(self) -> np.ndarray:
        """``xi x w'`` with ``w = Du`` differentiated along the family."""
        if self.grad_dot is None:
            raise ValueError("family has no gradient values")
        return cross(self.xi, self.grad_dot)

    def check_transversal(self) -> bool:
        ok = bool(np.all(self.j > 0))
        if not ok:
            warnings.warn("leaf coordinates degenerate: j <= 0 somewhere")
        return ok

    @classmethod
    def from_angles(cls, t, feet, theta, R, normal, grad=None, smooth: bool = True) -> "LeafFamily":
        """Family from ray angles; angles are smoothed by a local quadratic fit over 5 neighbours."""
        t = np.asarray(t, dtype=float)
        theta = np.asarray(theta, dtype=float)
        if smooth and len(t) >= 3:
            th, dth = local_quadratic(t, theta)
        else:
            th = theta
            dth = np.gradient(theta, t) if len(t) >= 2 else np.zeros_like(t)
        xi = np.column_stack([np.cos(th), np.sin(th)])
        xi_dot = dth[:, None] * np.column_stack([-np.sin(th), np.cos(th)])
        return cls(t, feet, xi, R, normal, grad, xi_dot=xi_dot)

    @classmethod
    def from_rays(cls, rays, a: float, side: str = "west", include_two_sided: bool = False,
                  smooth: bool = True) -> "LeafFamily":
        """Family of extracted rays with feet on ``side``; rays on the south side are
        reflected across the diagonal onto the west side when ``side='west'``."""
        sel = []
        for r in rays:
            if r.interior_only or (r.two_sided and not include_two_sided):
                continue
            foot, xi, g = np.array(r.foot), np.array(r.xi), np.array(r.grad)
            if r.side == "south" and side == "west":
                foot, xi, g = foot[::-1], xi[::-1], g[::-1]
            elif r.side != side:
                continue
            sel.append((foot, xi, g, r.R))
        coord = 1 if side in ("west", "east") else 0
        sel.sort(key=lambda s: s[0][coord])
        # merge rays whose feet coincide
        merged = []
        for s in sel:
            if merged and abs(s[0][coord] - merged[-1][0][coord]) < 1e-12:
                continue
            merged.append(s)
        if len(merged) < 2:
            raise ValueError("need at least two rays on a common side")
        feet = np.array([m[0] for m in merged])
        t = feet[:, coord]
        theta = np.unwrap(np.array([math.atan2(m[1][1], m[1][0]) for m in merged]))
        grad = np.array([m[2] for m in merged])
        R = np.array([m[3] for m in merged])
        # smooth the feet onto the side exactly
        feet[:, 1 - coord] = {"west": a, "south": a, "east": a + 1, "north": a + 1}[side]
        return cls.from_angles(t, feet, theta, R, SIDE_NORMALS[side], grad, smooth)

    @classmethod
    def from_profile(cls, profile, stride: int = 1) -> "LeafFamily":
        """Exact family of a square ODE profile (feet on the west side, t = theta)."""
        s = slice(None, None, stride)
        th = profile.theta[s]
        feet = np.column_stack([np.full_like(th, profile.a), profile.h[s]])
        xi = np.column_stack([np.cos(th), np.sin(th)])
        xi_dot = np.column_stack([-np.sin(th), np.cos(th)])
        gamma_dot = np.column_stack([np.zeros_like(th), profile.hp[s]])
        g = profile.gradient()
        grad = np.column_stack([g[0][s], g[1][s]])
        return cls(th, feet, xi, profile.R[s], SIDE_NORMALS["west"], grad, gamma_dot, xi_dot)


# -- pointwise formulas -------------------------------------------------------------

def _interp(family: LeafFamily, arr: np.ndarray, t: float) -> float:
    family.index(t)
    return float(np.interp(t, family.t, arr))


def leaf_jacobian(family: LeafFamily, r: float, t: float) -> float:
    """``J(r, t) = xi x gamma' + r xi x xi'``; warns when ``J <= 0``."""
    if r < 0:
        raise ValueError("r must be nonnegative")
    J = _interp(family, family.j, t) + r * _interp(family, family.f, t)
    if J <= 0:
        warnings.warn(f"leaf coordinates degenerate at t={t}, r={r}: J={J:.3g}")
    return J


def laplacian_on_leaf(family: LeafFamily, t: float, r: float) -> float | None:
    """Predicted ``Delta u = 3 - (3r - 2R)/(r + j/|xi'|)``; ``None`` marks an untamed ray."""
    turn = _interp(family, family.turn, t)
    if turn < UNTAMED_TOL:
        return None
    j = _interp(family, family.j, t)
    R = _interp(family, family.R, t)
    return 3.0 - (3 * r - 2 * R) / (r + j / turn)


# -- sampled rays -----------------------------------------------------------------------

@dataclass
class RaySamples:
    """``(3 - Delta u)`` and ``J`` sampled on ``0 <= r <= R`` of one ray."""

    r: np.ndarray
    lap: np.ndarray
    J: np.ndarray
    neumann: float
    speed: float  # |gamma'|

    @property
    def R(self) -> float:
        return float(self.r[-1])

    @property
    def density(self) -> np.ndarray:
        return (3.0 - self.lap) * self.J

    def integral(self, v) -> float:
        """``v(0) N |gamma'| + int_0^R (3 - Delta u) J v dr`` for a test function ``v(r)``."""
        vr = np.asarray(v(self.r), dtype=float) * np.ones_like(self.r)
        return float(vr[0] * self.neumann * self.speed + simpson(self.density * vr, x=self.r))


def _ray_points(R: float, spacing: float) -> np.ndarray:
    m = max(1, int(math.ceil(R / (2 * spacing))))
    return np.linspace(0.0, R, 2 * m + 1)


def sample_ray(family: LeafFamily, k: int, u: ScalarField, spacing: float | None = None,
               neumann_from: str = "ray") -> RaySamples:
    """Sample ``Delta u`` from the finite-difference Hessian along ray ``k``.

    The Neumann value is ``(y - x0).n`` with the ray's gradient ``y`` when
    ``neumann_from='ray'`` or with the interpolated ``Du(x0)`` for ``'field'``.
    """
    g = u.grid
    spacing = spacing or g.h
    r = _ray_points(float(family.R[k]), spacing)
    pts = family.gamma[k][None, :] + r[:, None] * family.xi[k][None, :]
    pts = np.clip(pts, g.a, g.a + 1)
    c = g.coords
    lap = RegularGridInterpolator((c, c), hessian(u).trace)(pts)
    J = family.j[k] + r * family.f[k]
    if neumann_from == "field":
        G = gradient(u)
        x0 = pts[:1]
        du = np.array([RegularGridInterpolator((c, c), G.d1)(x0)[0], RegularGridInterpolator((c, c), G.d2)(x0)[0]])
        N = float(np.dot(du - family.gamma[k], family.normal[k]))
    else:
        N = float(family.neumann[k])
    return RaySamples(r, lap, J, N, float(family.speed[k]))


def exact_samples(family: LeafFamily, k: int, spacing: float = 1e-3, lap=None) -> RaySamples:
    """Samples carrying the exact leafwise Laplacian (or ``lap(r)`` if given); the
    Neumann value is the one the Neumann relation predicts."""
    R = float(family.R[k])
    r = _ray_points(R, spacing)
    J = family.j[k] + r * family.f[k]
    if lap is None:
        dens = family.f[k] * (3 * r - 2 * R)
        lapv = 3.0 - np.divide(dens, J, out=np.zeros_like(J), where=J != 0)
    else:
        lapv = np.asarray(lap(r), dtype=float) * np.ones_like(r)
    N = R * R * family.turn[k] / (2 * family.speed[k]) if family.speed[k] > 0 else 0.0
    return RaySamples(r, lapv, J, float(N), float(family.speed[k]))


def delta_from_samples(s: RaySamples) -> float:
    """``delta = Delta u J``, constant along an exact ray; median over the samples."""
    return float(np.median(s.lap * s.J))


# -- residuals ----------------------------------------------------------------------------

def moment_residuals(samples: RaySamples) -> tuple[float, float]:
    """Zeroth and first moment left-hand sides by quadrature along the ray."""
    zeroth = samples.integral(lambda r: 1.0)
    first = samples.integral(lambda r: r)
    return zeroth, first


def closed_form_residuals(j, f, R, delta, speed, neumann):
    """Moment and Neumann residuals from ``(j, f, R, delta, |gamma'|, N)``.

    Exactly ``res_neumann = 4 res1 / R - 2 res0`` for ``R > 0``.
    """
    j, f, R, delta, speed, neumann = map(np.asarray, (j, f, R, delta, speed, neumann))
    res0 = (3 * j - delta) * R + 1.5 * R**2 * f + speed * neumann
    res1 = (3 * j - delta) * R**2 / 2 + R**3 * f
    resn = R**2 * f - 2 * speed * neumann
    return res0, res1, resn


def neumann_ray_residual(family: LeafFamily, k: int, neumann: float | None = None) -> float:
    """``R^2 |xi'| - 2 |gamma'| (Du - x).n`` at the foot of ray ``k``."""
    N = float(family.neumann[k]) if neumann is None else neumann
    return float(family.R[k] ** 2 * family.turn[k] - 2 * family.speed[k] * N)


def localization_tests(R: float, shifts: int = 8) -> dict:
    tests = {
        "1": lambda r: np.ones_like(r), "-1": lambda r: -np.ones_like(r),
        "r": lambda r: r, "-r": lambda r: -r, "r^2": lambda r: r * r,
    }
    for s in np.linspace(0.0, R, shifts + 1)[1:-1]:
        tests[f"(r-{s:.4g})+"] = (lambda s_: lambda r: np.maximum(r - s_, 0.0))(s)
    return tests


@dataclass
class LocalizationResult:
    minimum: float
    values: dict = field(default_factory=dict)

    def argmin(self) -> str:
        return min(self.values, key=self.values.get)


def leafwise_localization_check(samples: RaySamples, tests: dict | None = None) -> LocalizationResult:
    """Minimum of ``v(0) N |gamma'| + int (3 - Delta u) J v dr`` over affine and convex tests."""
    tests = tests or localization_tests(samples.R)
    vals = {name: samples.integral(v) for name, v in tests.items()}
    return LocalizationResult(min(vals.values()), vals)


@dataclass
class LeafResiduals:
    t: np.ndarray
    R: np.ndarray
    res0: np.ndarray
    res1: np.ndarray
    resn: np.ndarray
    min_localization: np.ndarray
    delta_hessian: np.ndarray
    delta_gradient: np.ndarray | None

    @property
    def delta_gap(self) -> float:
        if self.delta_gradient is None:
            return float("nan")
        return float(np.max(np.abs(self.delta_hessian - self.delta_gradient)))

    def medians(self) -> dict:
        return {"res_moment0": float(np.median(np.abs(self.res0))), "res_moment1": float(np.median(np.abs(self.res1))),
                "res_neumann": float(np.median(np.abs(self.resn)))}

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(RESIDUAL_COLUMNS)
        for row in zip(self.t, self.R, self.res0, self.res1, self.resn, self.min_localization):
            w.writerow([f"{v:.12g}" for v in row])
        return buf.getvalue()


def family_residuals(family: LeafFamily, u: ScalarField | None = None, spacing: float | None = None) -> LeafResiduals:
    """Residuals on every ray; ``u=None`` uses the exact leafwise Laplacian."""
    k = len(family)
    out = {key: np.empty(k) for key in ("r0", "r1", "rn", "loc", "dh")}
    for i in range(k):
        s = exact_samples(family, i) if u is None else sample_ray(family, i, u, spacing)
        out["r0"][i], out["r1"][i] = moment_residuals(s)
        out["rn"][i] = neumann_ray_residual(family, i, s.neumann)
        out["loc"][i] = leafwise_localization_check(s).minimum
        out["dh"][i] = delta_from_samples(s)
    dg = family.delta_from_gradients() if family.grad is not None else None
    return LeafResiduals(family.t.copy(), family.R.copy(), out["r0"], out["r1"], out["rn"], out["loc"], out["dh"], dg)


# -- variational derivative ---------------------------------------------------------------

@dataclass
class SigmaBalance:
    interior: float
    boundary: float
    total: float
    per_region: dict = field(default_factory=dict)  # label -> mass


def sigma_node_masses(u: ScalarField) -> tuple[np.ndarray, np.ndarray]:
    """Per-node interior mass ``w (3 - Delta u)`` and boundary mass ``w_side (Du - x).n``."""
    g = u.grid
    interior = g.trapezoid_weights() * (3.0 - hessian(u).trace)
    G = gradient(u)
    x1, x2 = g.mesh()
    r1, r2 = G.d1 - x1, G.d2 - x2
    w = np.full(g.n, g.h)
    w[0] = w[-1] = g.h / 2
    bnd = np.zeros((g.n, g.n))
    bnd[:, 0] -= w * r2[:, 0]
    bnd[-1, :] += w * r1[-1, :]
    bnd[:, -1] += w * r2[:, -1]
    bnd[0, :] -= w * r1[0, :]
    return interior, bnd


def sigma_mass_balance(u: ScalarField, labels: np.ndarray | None = None) -> SigmaBalance:
    interior, bnd = sigma_node_masses(u)
    I, B = float(interior.sum()), float(bnd.sum())
    per = {}
    if labels is not None:
        for lab in np.unique(labels):
            sel = labels == lab
            per[int(lab)] = float(interior[sel].sum() + bnd[sel].sum())
    return SigmaBalance(I, B, I + B, per)
