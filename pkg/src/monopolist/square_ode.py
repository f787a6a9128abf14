"""Leafwise Euler-Lagrange system on the square and the explicit blunt zone.

On the upper half of the square, rays leave the west side at ``(a, h(theta))``
with direction ``(cos theta, sin theta)`` and ``u = m(theta) r + b(theta)`` along
them.  Given the ray length ``R(theta)`` the slope obeys

    (m'' + m - 2R) d = (3/2) R^2 cos(theta),   d = a + m' sin(theta) - m cos(theta)

and the foot height and offset follow from

    h' = (m'' + m - 2R) / (3 cos theta),   b' = (m' cos theta + m sin theta) h'.

Below the diagonal everything is mirrored.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass

import numba
import numpy as np
from scipy.interpolate import CubicHermiteSpline
from scipy.optimize import brentq

log = logging.getLogger(__name__)

BLUNT_THRESHOLD = 3.5 - math.sqrt(2.0)


class ProfileError(ValueError):
    pass


@dataclass
class PiecewiseLinearR:
    """``R(theta)`` interpolating ``values`` at increasing ``knots``."""

    knots: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        self.knots = np.asarray(self.knots, dtype=float)
        self.values = np.asarray(self.values, dtype=float)
        if self.knots.shape != self.values.shape or self.knots.ndim != 1 or len(self.knots) < 1:
            raise ValueError("knots and values must be matching 1D arrays")
        if np.any(np.diff(self.knots) <= 0):
            raise ValueError("knots must increase")

    def __call__(self, theta):
        if len(self.knots) == 1:
            return np.full_like(np.asarray(theta, dtype=float), self.values[0])
        return np.interp(theta, self.knots, self.values)


@dataclass
class LeafProfile:
    a: float
    theta0: float
    h0: float
    R0: float
    theta: np.ndarray
    m: np.ndarray
    mp: np.ndarray
    mpp: np.ndarray
    h: np.ndarray
    hp: np.ndarray
    b: np.ndarray
    R: np.ndarray
    step: float
    error_estimate: float = float("nan")

    @property
    def d(self) -> np.ndarray:
        """Neumann value ``a - D_1 u`` at the foot of each ray."""
        return self.a + self.mp * np.sin(self.theta) - self.m * np.cos(self.theta)

    def gradient(self) -> tuple[np.ndarray, np.ndarray]:
        """Constant gradient ``Du`` on each ray."""
        c, s = np.cos(self.theta), np.sin(self.theta)
        return self.m * c - self.mp * s, self.m * s + self.mp * c

    def neumann_identity_residual(self) -> np.ndarray:
        """``R^2 - 2 h' d`` per sample."""
        return self.R**2 - 2.0 * self.hp * self.d

    def tips(self) -> np.ndarray:
        return np.column_stack([self.a + self.R * np.cos(self.theta), self.h + self.R * np.sin(self.theta)])

    def feet(self) -> np.ndarray:
        return np.column_stack([np.full_like(self.h, self.a), self.h])

    def to_csv(self, path) -> None:
        data = np.column_stack([self.theta, self.m, self.mp, self.h, self.b, self.R])
        np.savetxt(path, data, delimiter=",", header="theta,m,mprime,h,b,R", comments="", fmt="%.17g")


@numba.njit(cache=True)
def _rhs(theta, m, mp, R, a):
    c = math.cos(theta)
    s = math.sin(theta)
    d = a + mp * s - m * c
    mpp = -m + 2.0 * R + 1.5 * R * R * c / d
    hp = (mpp + m - 2.0 * R) / (3.0 * c)
    bp = (mp * c + m * s) * hp
    return d, mpp, hp, bp


@numba.njit(cache=True)
def _rk4(theta0, dt, nsteps, Rs, a, m0, mp0, h0, b0, out):
    """Classical RK4 on (m, m', h, b); ``Rs[2k]`` is R at step k, ``Rs[2k+1]`` at the midpoint.

    Returns the index of the last valid sample, ``-1 - k`` on denominator collapse at step k.
    """
    m, mp, h, b = m0, mp0, h0, b0
    out[0, 0] = m
    out[0, 1] = mp
    out[0, 2] = h
    out[0, 3] = b
    for k in range(nsteps):
        t = theta0 + k * dt
        R0 = Rs[2 * k]
        R1 = Rs[2 * k + 1]
        R2 = Rs[2 * k + 2]
        d1, a1, h1, b1 = _rhs(t, m, mp, R0, a)
        if d1 <= 1e-10:
            return -1 - k
        d2, a2, h2, b2 = _rhs(t + 0.5 * dt, m + 0.5 * dt * mp, mp + 0.5 * dt * a1, R1, a)
        mp2 = mp + 0.5 * dt * a1
        d3, a3, h3, b3 = _rhs(t + 0.5 * dt, m + 0.5 * dt * mp2, mp + 0.5 * dt * a2, R1, a)
        mp3 = mp + 0.5 * dt * a2
        d4, a4, h4, b4 = _rhs(t + dt, m + dt * mp3, mp + dt * a3, R2, a)
        mp4 = mp + dt * a3
        if min(d2, d3, d4) <= 1e-10:
            return -1 - k
        m = m + dt / 6.0 * (mp + 2 * mp2 + 2 * mp3 + mp4)
        mp = mp + dt / 6.0 * (a1 + 2 * a2 + 2 * a3 + a4)
        h = h + dt / 6.0 * (h1 + 2 * h2 + 2 * h3 + h4)
        b = b + dt / 6.0 * (b1 + 2 * b2 + 2 * b3 + b4)
        out[k + 1, 0] = m
        out[k + 1, 1] = mp
        out[k + 1, 2] = h
        out[k + 1, 3] = b
    return nsteps


def _as_rfun(Rfun):
    if callable(Rfun):
        return Rfun
    c = float(Rfun)
    return lambda th: np.full_like(np.asarray(th, dtype=float), c)


def _integrate(a, theta0, h0, Rfun, step, mp0, b0, theta_end):
    span = theta_end - theta0
    nsteps = max(1, int(math.ceil(span / step - 1e-9)))
    dt = span / nsteps
    tt = theta0 + 0.5 * dt * np.arange(2 * nsteps + 1)
    Rs = np.asarray(Rfun(tt), dtype=float) * np.ones_like(tt)
    out = np.empty((nsteps + 1, 4))
    status = _rk4(theta0, dt, nsteps, Rs, float(a), 0.0, float(mp0), float(h0), float(b0), out)
    if status < 0:
        k = -1 - status
        raise ProfileError(f"denominator collapse near theta={theta0 + k * dt:.6g}")
    theta = theta0 + dt * np.arange(nsteps + 1)
    return theta, out, Rs[::2], dt


def integrate_slope_el(a: float, theta0: float, h0: float, R0: float, Rfun, step: float = 1e-4,
                       mp0: float = 0.0, b0: float = 0.0, richardson: bool = True) -> LeafProfile:
    """Integrate the slope equation from ``theta0`` to 0 with fixed-step RK4.

    ``mp0`` and ``b0`` default to the exclusion-region conditions ``m' = b = 0``;
    a nonzero ``mp0`` starts the fan from the last ray of a blunt zone.
    The grid is clipped at the first ``theta`` where ``R`` vanishes.
    """
    if not a > 0:
        raise ProfileError("denominator collapse: a must be positive")
    if not -math.pi / 4 - 1e-12 <= theta0 < 0:
        raise ValueError("theta0 must lie in [-pi/4, 0)")
    if not a < h0 < a + 1:
        raise ValueError("h0 must lie in (a, a+1)")
    if not 0 <= R0 < math.sqrt(2) / 2 + 1e-12:
        raise ValueError("R0 must lie in [0, sqrt(2)/2)")
    if step <= 0:
        raise ValueError("step must be positive")
    Rfun = _as_rfun(Rfun)
    if abs(float(Rfun(np.array([theta0]))[0]) - R0) > 1e-9:
        raise ValueError("Rfun(theta0) must equal R0")
    # clip where R first hits zero
    probe = np.linspace(theta0, 0.0, 2001)
    rp = np.asarray(Rfun(probe), dtype=float)
    theta_end = 0.0
    if rp[0] > 0 and np.any(rp <= 0):
        k = int(np.argmax(rp <= 0))
        theta_end = brentq(lambda t: float(Rfun(np.array([t]))[0]), probe[k - 1], probe[k])
    theta, out, R, dt = _integrate(a, theta0, h0, Rfun, step, mp0, b0, theta_end)
    m, mp, h, b = out.T
    c = np.cos(theta)
    d = a + mp * np.sin(theta) - m * c
    mpp = -m + 2 * R + 1.5 * R**2 * c / d
    hp = (mpp + m - 2 * R) / (3 * c)
    err = float("nan")
    if richardson:
        _, out2, _, _ = _integrate(a, theta0, h0, Rfun, dt / 2, mp0, b0, theta_end)
        err = float(np.max(np.abs(out2[::2] - out)) / 15.0)
    if np.any(hp < -1e-12):
        raise ProfileError("foot height decreasing")
    if np.any(h <= a) or np.any(h >= a + 1):
        raise ProfileError("height overflow: h left (a, a+1)")
    return LeafProfile(float(a), float(theta0), float(h0), float(R0), theta, m, mp, mpp, h, hp, b, R, dt, err)


# -- evaluation of u on the fan ------------------------------------------------

class FanEvaluator:
    """Point evaluation of ``u = m(theta) r + b(theta)`` on the fan above the diagonal."""

    def __init__(self, profile: LeafProfile):
        p = profile
        self.profile = p
        th = p.theta
        self._h = CubicHermiteSpline(th, p.h, p.hp)
        self._m = CubicHermiteSpline(th, p.m, p.mp)
        self._mp = CubicHermiteSpline(th, p.mp, p.mpp)
        bp = (p.mp * np.cos(th) + p.m * np.sin(th)) * p.hp
        self._b = CubicHermiteSpline(th, p.b, bp)
        self._R = lambda t: np.interp(t, th, p.R)
        self.theta_lo, self.theta_hi = th[0], th[-1]

    def _cross(self, theta, x1, x2):
        # xi x (x - gamma); increasing in theta for points inside the fan
        return np.cos(theta) * (x2 - self._h(theta)) - np.sin(theta) * (x1 - self.profile.a)

    def locate(self, x1, x2):
        """``(theta, r, inside)`` for each point; theta NaN where no ray passes."""
        x1 = np.atleast_1d(np.asarray(x1, dtype=float))
        x2 = np.atleast_1d(np.asarray(x2, dtype=float))
        lo = np.full(x1.shape, self.theta_lo)
        hi = np.full(x1.shape, self.theta_hi)
        flo, fhi = self._cross(lo, x1, x2), self._cross(hi, x1, x2)
        ok = (flo <= 0) & (fhi >= 0) | (flo >= 0) & (fhi <= 0)
        sgn = np.where(flo <= 0, 1.0, -1.0)
        for _ in range(60):
            mid = 0.5 * (lo + hi)
            fm = sgn * self._cross(mid, x1, x2)
            lo = np.where(fm <= 0, mid, lo)
            hi = np.where(fm <= 0, hi, mid)
        theta = np.where(ok, 0.5 * (lo + hi), np.nan)
        with np.errstate(invalid="ignore"):
            r = (x1 - self.profile.a) / np.cos(theta)
            inside = ok & (r >= -1e-12) & (r <= self._R(np.nan_to_num(theta)) + 1e-12)
        return theta, r, inside

    def value_at(self, theta, r):
        return self._m(theta) * r + self._b(theta)

    def gradient_at(self, theta):
        m, mp = self._m(theta), self._mp(theta)
        return m * np.cos(theta) - mp * np.sin(theta), m * np.sin(theta) + mp * np.cos(theta)

    def __call__(self, x1, x2, strict: bool = True):
        theta, r, inside = self.locate(x1, x2)
        if strict and not np.all(inside):
            raise ValueError("outside region")
        return np.where(inside, self.value_at(np.nan_to_num(theta), r), np.nan)

    def polygon(self, samples: int = 64) -> np.ndarray:
        """Closed boundary: feet upward, then tips back down."""
        idx = np.unique(np.linspace(0, len(self.profile.theta) - 1, samples).astype(int))
        feet = self.profile.feet()[idx]
        tips = self.profile.tips()[idx]
        return np.vstack([feet, tips[::-1]])


def u1_from_profile(profile: LeafProfile) -> FanEvaluator:
    return FanEvaluator(profile)


def write_polygon_json(path, poly: np.ndarray) -> None:
    with open(path, "w") as fh:
        json.dump([[float(x), float(y)] for x, y in poly], fh)


# -- blunt zone ---------------------------------------------------------------

def exclusion_width(a: float) -> float:
    """``w0`` with ``(3/2) w0^2 + 2 a w0 = 1``: hypotenuse ``x1 + x2 = 2a + w0``."""
    return (-2 * a + math.sqrt(4 * a * a + 6)) / 3


def exclusion_threshold(a: float) -> float:
    """``s(a) = 2a + (2a/3)(sqrt(1 + 3/(2a^2)) - 1)``."""
    if a <= 0:
        raise ValueError("a must be positive")
    return 2 * a + (2 * a / 3) * (math.sqrt(1 + 3 / (2 * a * a)) - 1)


@dataclass
class BluntZone:
    """Exclusion triangle ``x1 + x2 <= s`` and the strip of rays orthogonal to the diagonal.

    On the strip ``u = phi(w)`` with ``w = x1 + x2 - 2a`` and
    ``phi'(w) = 3w/4 + a - 1/(2w)``: the mass of every triangle ``{w' <= w}`` stays one.
    """

    a: float
    s: float
    w0: float
    blunt_expected: bool
    w1: float | None = None  # outer edge of the strip, fixed by a fit

    def dphi(self, w):
        w = np.asarray(w, dtype=float)
        return 0.75 * w + self.a - 0.5 / w

    def phi(self, w):
        w = np.asarray(w, dtype=float)
        w0 = self.w0
        return 0.375 * (w * w - w0 * w0) + self.a * (w - w0) - 0.5 * np.log(w / w0)

    def neumann(self, w):
        """``a - D_1 u`` at the west foot of the ray at level ``w``."""
        return self.a - self.dphi(w)

    def strip_polygon(self) -> list[tuple[float, float]]:
        a, w0 = self.a, self.w0
        w1 = self.w1 if self.w1 is not None else w0
        return [(a, a + w0), (a, a + w1), (a + w1, a), (a + w0, a)]


def blunt_zone(a: float, w1: float | None = None) -> BluntZone:
    if not a > 0:
        raise ValueError("blunt_zone needs a > 0")
    s = exclusion_threshold(a)
    return BluntZone(float(a), s, s - 2 * a, bool(a >= BLUNT_THRESHOLD), w1)


def blunt_initial_conditions(zone: BluntZone, w1: float) -> dict:
    """Fan data continuing the strip's last ray (theta0 = -pi/4)."""
    return dict(theta0=-math.pi / 4, h0=zone.a + w1, R0=w1 / math.sqrt(2),
                mp0=math.sqrt(2) * float(zone.dphi(w1)), b0=float(zone.phi(w1)))


# -- stingray -----------------------------------------------------------------

@dataclass
class StingrayCurve:
    theta: np.ndarray
    y1: np.ndarray
    y2: np.ndarray
    slopes: np.ndarray  # dy2/dy1 between adjacent samples
    slope_theta: np.ndarray  # midpoints
    slope_rate: np.ndarray  # d/dtheta of the discrete slopes
    exact_slopes: np.ndarray  # y2'/y1' from the ODE derivatives at each sample


def stingray_curve(profile: LeafProfile) -> StingrayCurve:
    th = profile.theta
    if np.any(th >= 0):
        keep = th < 0
        th = th[keep]
    else:
        keep = slice(None)
    y1, y2 = profile.gradient()
    y1, y2 = y1[keep], y2[keep]
    k = profile.m[keep] + profile.mpp[keep]
    dy1 = -k * np.sin(th)
    dy2 = k * np.cos(th)
    with np.errstate(divide="ignore", invalid="ignore"):
        slopes = np.diff(y2) / np.diff(y1)
        exact = dy2 / dy1
    mid = 0.5 * (th[1:] + th[:-1])
    rate = np.diff(slopes) / np.diff(mid) if len(slopes) > 1 else np.zeros(0)
    return StingrayCurve(th, y1, y2, slopes, mid, rate, exact)
