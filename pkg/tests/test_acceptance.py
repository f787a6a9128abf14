"""Acceptance criteria, one test per criterion, each recorded as a PASS/FAIL summary line."""

import json
import math
import os
import time
from functools import lru_cache

import numpy as np
from hypothesis import given, settings, strategies as st
from scipy.spatial.distance import directed_hausdorff

from _cache import ACCEPTANCE, R0, direct, fitted_a25, radial_exact, radial_solution, regions, run_dir
from monopolist.assembler import assemble_candidate
from monopolist.cli import RunConfig, neumann_min, run_scan
from monopolist.grid import hessian, make_grid, parse_field
from monopolist.leaf import LeafFamily, closed_form_residuals, family_residuals, sigma_mass_balance
from monopolist.obstacle import solve_a0
from monopolist.regions import (OMEGA2, blunt_rays, classify_regions, extract_rays, free_boundary,
                                ray_diameter_profile, zero_set)
from monopolist.solver import energy, minimize
from monopolist.square_ode import exclusion_threshold, integrate_slope_el, stingray_curve


def record(key, ok, detail):
    ACCEPTANCE[key] = (bool(ok), detail)
    print(f"{'PASS' if ok else 'FAIL'} {key}: {detail}")
    assert ok, detail


# -- shared runs -----------------------------------------------------------------------------

SCAN_A = (0.0, 0.25, 0.5, 1.0, 1.5, 2.0, 2.5, 3.0)
MASS_A = (0.0, 0.5, 1.0, 2.5)


@lru_cache(maxsize=None)
def scan_129():
    out = run_dir("acceptance_scan")
    rc = run_scan(RunConfig(n=129, mode="scan"), out, values=SCAN_A)
    with open(os.path.join(out, "scan.json")) as fh:
        return rc, out, json.load(fh)


def scan_field(a):
    _, out, _ = scan_129()
    with open(os.path.join(out, f"a_{a:.6g}", "field.csv")) as fh:
        return parse_field(fh.read())


@lru_cache(maxsize=None)
def fitted_candidate_129():
    return assemble_candidate(2.5, fitted_a25(65).params, n=129)


def _hausdorff_to_triangle(zs, g):
    x1, x2 = g.mesh()
    pts = np.column_stack([x1[zs], x2[zs]])
    tri = x1 + x2 <= math.sqrt(2 / 3) + 1e-12
    ref = np.column_stack([x1[tri], x2[tri]])
    return max(directed_hausdorff(pts, ref)[0], directed_hausdorff(ref, pts)[0])


# -- 1 -------------------------------------------------------------------------------------------

def test_criterion_01_a0_exclusion_triangle():
    n = 129
    g = make_grid(0.0, n)
    w = g.trapezoid_weights()
    t = time.perf_counter()
    u_obs, contact, _ = solve_a0(g)
    t_obs = time.perf_counter() - t
    t = time.perf_counter()
    u_dir = minimize(g).u
    t_dir = time.perf_counter() - t
    parts, ok = [], True
    for name, zs, secs in (("obstacle", zero_set(u_obs), t_obs), ("direct", zero_set(u_dir), t_dir)):
        d = _hausdorff_to_triangle(zs, g)
        area = float(np.sum(w[zs]))
        good = d <= 3 * g.h and abs(area - 1 / 3) <= 0.03 / 3 and secs < 120
        ok &= good
        parts.append(f"{name} Hausdorff {d / g.h:.1f}h (<= 3h), area {area:.4f}, {secs:.0f}s")
    record("1", ok, "; ".join(parts))


# -- 2, 3, 4 -------------------------------------------------------------------------------------

def test_criterion_02_mass_balance():
    rc, _, data = scan_129()
    conv = {r["a"]: r["converged"] for r in data["records"]}
    totals = {a: sigma_mass_balance(scan_field(a)).total for a in MASS_A if conv[a]}
    fine = {}
    for a in MASS_A:
        res = direct(a, 257)
        if res.converged:
            fine[a] = sigma_mass_balance(res.u).total
    ok = (all(abs(v - 1) <= 0.02 for v in totals.values()) and all(abs(v - 1) <= 0.005 for v in fine.values())
          and len(totals) == len(MASS_A) and len(fine) == len(MASS_A))
    worst = max(abs(v - 1) for v in totals.values())
    worst_f = max(abs(v - 1) for v in fine.values()) if fine else float("nan")
    record("2", ok, f"n=129 max |total - 1| = {worst:.2e} over {len(totals)} converged; "
                    f"n=257 max = {worst_f:.2e} over {len(fine)} converged")


def test_criterion_03_poisson_region():
    h = 1 / 128
    meds = {}
    for a in MASS_A:
        u = scan_field(a)
        m = classify_regions(u)
        inner = np.zeros_like(m.labels, dtype=bool)
        inner[1:-1, 1:-1] = True
        sel = (m.labels == OMEGA2) & inner
        meds[a] = float(np.median(np.abs(hessian(u).trace[sel] - 3)))
    ok = all(v <= 10 * h for v in meds.values())
    record("3", ok, "median |Delta u - 3| on Omega2: " + ", ".join(f"a={a:g}: {v:.2e}" for a, v in meds.items())
           + f" (<= {10 * h:.3f})")


def test_criterion_04_neumann_sign():
    h = 1 / 128
    mins = {a: neumann_min(scan_field(a)) for a in MASS_A}
    ok = all(v >= -5 * h for v in mins.values())
    record("4", ok, "min (Du - x).n: " + ", ".join(f"a={a:g}: {v:.2e}" for a, v in mins.items())
           + f" (>= {-5 * h:.3f})")


# -- 5 -------------------------------------------------------------------------------------------

def test_criterion_05_regime_trichotomy():
    rc, _, data = scan_129()
    reg = {r["a"]: r["regime"] for r in data["records"]}
    ok = [a for a, r in reg.items() if r == "A"] == [0.0] and reg[2.5] == "C" and reg[3.0] == "C"
    bad_feet = 0
    nblunt = 0
    for a, r in reg.items():
        if r != "C":
            continue
        u = scan_field(a)
        rays = extract_rays(u, classify_regions(u)).rays
        for ray in blunt_rays(rays):
            nblunt += 1
            ok &= abs(ray.theta + math.pi / 4) <= 0.05
            if ray.side not in ("west", "south"):
                bad_feet += 1
    ok &= bad_feet == 0 and nblunt > 0
    record("5", ok, f"regimes {reg}; bracket {data['bracket']}; {nblunt} blunt rays, {bad_feet} with feet off W/S")


# -- 6 -------------------------------------------------------------------------------------------

def test_criterion_06_blunt_hypotenuse():
    cand = fitted_candidate_129()
    s = exclusion_threshold(2.5)
    h = 1 / 128
    gap = abs(cand.hypotenuse - s)
    record("6", gap <= 5 * h, f"hypotenuse {cand.hypotenuse:.6f} vs s(2.5) = {s:.6f}, gap {gap:.1e} (<= 5h)")


# -- 7 -------------------------------------------------------------------------------------------

def test_criterion_07_ode_fidelity():
    a, th0, h0, R = 2.5, -math.pi / 4, 2.9, 0.3
    coarse = integrate_slope_el(a, th0, h0, R, R, step=1e-3)
    fine = integrate_slope_el(a, th0, h0, R, R, step=1e-6, richardson=False)
    gaps = {k: abs(getattr(coarse, k)[-1] - getattr(fine, k)[-1]) for k in ("m", "mp", "h", "b")}
    ident = float(np.max(np.abs(coarse.neumann_identity_residual())))
    ok = max(gaps.values()) <= 1e-8 and ident <= 1e-8
    record("7", ok, "gaps at theta=0 " + ", ".join(f"{k}: {v:.1e}" for k, v in gaps.items())
           + f"; identity {ident:.1e}")


# -- 8 -------------------------------------------------------------------------------------------

def test_criterion_08_obstacle_oracle():
    errs, ok, parts = [], True, []
    for n in (65, 129):
        p, sol = radial_solution(n)
        X, Y = p.mesh()
        rad = float(np.hypot(X[sol.contact], Y[sol.contact]).max())
        err = float(np.max(np.abs(sol.v - radial_exact(X, Y))))
        errs.append(err)
        ok &= sol.converged and abs(rad - R0) <= 2 * p.h
        parts.append(f"n={n}: radius {rad:.4f}, sup error {err:.2e} = {err / p.h**2:.3f} h^2")
    order = math.log2(errs[0] / errs[1])
    ok &= order >= 1.8
    record("8", ok, "; ".join(parts) + f"; observed order {order:.2f} (>= 1.8)")


# -- 9 -------------------------------------------------------------------------------------------

def test_criterion_09_leafwise_identities():
    n = 129
    h = 1 / (n - 1)
    u = direct(2.5, n).u
    _, ex = regions(2.5, n)
    med = family_residuals(LeafFamily.from_rays(ex.rays, 2.5), u).medians()
    worst = [0.0]

    @settings(max_examples=300, deadline=None)
    @given(st.floats(0.01, 2), st.floats(-3, 3), st.floats(0.01, 1.5), st.floats(-5, 5), st.floats(0, 3),
           st.floats(-2, 2))
    def dependence(j, f, R, delta, speed, nm):
        r0, r1, rn = closed_form_residuals(j, f, R, delta, speed, nm)
        gap = abs(float(rn) - float(4 * r1 / R - 2 * r0)) / (1 + abs(float(r0)) + abs(float(r1)) / R)
        worst[0] = max(worst[0], gap)
        assert gap <= 1e-12

    dependence()
    ok = all(v <= 10 * h for v in med.values())
    record("9", ok, "medians " + ", ".join(f"{k} {v:.2e}" for k, v in med.items())
           + f" (<= {10 * h:.3f}); dependence identity worst {worst[0]:.1e}")


# -- 10 ------------------------------------------------------------------------------------------

def test_criterion_10_stingray():
    prof = fitted_candidate_129().profile
    st_ = stingray_curve(prof)
    s = np.asarray(st_.slopes)
    ok = bool(np.all(s > 0) and np.all(np.diff(s) > 0)) and abs(st_.exact_slopes[0] - 1) <= 1e-6
    record("10", ok, f"{len(s)} slopes in [{s.min():.4f}, {s.max():.4f}], increasing {bool(np.all(np.diff(s) > 0))}; "
                     f"slope at -pi/4 {st_.exact_slopes[0]:.9f}")


# -- 11 ------------------------------------------------------------------------------------------

def test_criterion_11_cross_solver():
    n = 129
    h = 1 / (n - 1)
    cand = fitted_candidate_129()
    ref = direct(2.5, n).u
    gap = float(np.max(np.abs(cand.field.values - ref.values)))
    de = cand.energy() - energy(ref)
    ok = gap <= 10 * h and -h <= de <= h
    record("11", ok, f"sup gap {gap:.2e} (<= {10 * h:.3f}); energy excess {de:.2e} (|.| <= h)")


# -- property substitutes ------------------------------------------------------------------------

def test_property_free_boundary_cells_sublinear():
    counts = {n: len(free_boundary(classify_regions(direct(2.5, n).u)).points) for n in (65, 129, 257)}
    ns = np.array(list(counts))
    slope = float(np.polyfit(np.log(ns - 1), np.log(list(counts.values())), 1)[0])
    record("P1", slope < 2, f"free-boundary crossings {counts}; log-log exponent in n {slope:.2f} (< 2)")


def test_property_R_profile_continuity_unimodal():
    _, ex = regions(2.5, 129)
    h = 1 / 128
    blunt = {id(r) for r in blunt_rays(ex.rays)}
    p = ray_diameter_profile(ex.rays, side="west", exclude=lambda r: id(r) in blunt)
    ok = p.max_jump <= 5 * h and len(p.local_maxima) <= 1
    record("P2", ok, f"{len(p.R)} west rays, max jump {p.max_jump / h:.1f}h (<= 5h), "
                     f"{len(p.local_maxima)} local maxima, Lipschitz per piece {np.round(p.lipschitz, 2).tolist()}")
