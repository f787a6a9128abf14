"""Command line driver: solve, ode, assemble, scan, verify and export.

Every run directory starts with ``config.json``, the resolved configuration,
so a run can be repeated from its own outputs.  Exit codes: 0 ok, 2 solver
failure, 3 verification failure, 4 I/O or configuration error.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.spatial import ConvexHull, Delaunay

from .assembler import (CandidateParams, FitOptions, GeometryError, assemble_candidate, fit_free_boundary,
                        free_boundary_residuals, initial_params_from_rays, write_candidate_bundle, build_profile)
from .grid import FIELD_HEADER, Grid, ScalarField, boundary_normal_residual, format_field, make_grid, parse_field
from .leaf import LeafFamily, family_residuals, sigma_mass_balance
from .regions import (MASK_HEADER, OMEGA0, OMEGA1, OMEGA2, Ray, Thresholds, blunt_span, classify_regime, classify_regions,
                      extract_rays, format_labels, format_mask, parse_mask, rays_to_json, zero_set)
from .solver import SolveOptions, minimize
from .square_ode import ProfileError, stingray_curve

log = logging.getLogger(__name__)

MODES = ("solve", "ode", "assemble", "scan", "verify", "export")
EXIT_OK, EXIT_SOLVER, EXIT_VERIFY, EXIT_IO = 0, 2, 3, 4
SUMMARY_KEYS = ("a", "n", "regime", "areas", "mass_balance", "neumann_min", "energy", "residuals")
EXPORT_FORMATS = ("csv", "json", "gnuplot-matrix")


class CliError(Exception):
    def __init__(self, message: str, code: int = EXIT_IO):
        super().__init__(message)
        self.code = code


@dataclass
class RunConfig:
    a: float = 0.0
    n: int = 65
    mode: str = "solve"
    out: str = "out"
    solver: dict = field(default_factory=dict)  # SolveOptions fields
    thresholds: dict = field(default_factory=dict)  # Thresholds fields
    fit: dict = field(default_factory=dict)  # FitOptions fields
    params: dict | None = None  # CandidateParams JSON for ode / assemble
    init_from: str | None = None  # solve directory whose rays seed assemble
    scan: dict = field(default_factory=lambda: {"a_min": 0.0, "a_max": 3.0, "steps": 13})
    verify: dict = field(default_factory=dict)  # tolerance overrides
    export: dict = field(default_factory=dict)  # {"input", "format", "output"}

    def __post_init__(self):
        if self.mode not in MODES:
            raise CliError(f"unknown mode {self.mode!r}")
        self.a, self.n = float(self.a), int(self.n)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise CliError(f"unknown config keys {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)

    def solve_options(self) -> SolveOptions:
        return SolveOptions(**self.solver)

    def thresholds_obj(self) -> Thresholds:
        return Thresholds(**self.thresholds)

    def fit_options(self) -> FitOptions:
        d = dict(self.fit)
        if "weights" in d:
            d["weights"] = tuple(d["weights"])
        return FitOptions(**d)


def load_config(path: str | None, overrides: dict) -> RunConfig:
    d = {}
    if path:
        try:
            with open(path) as fh:
                d = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise CliError(f"cannot read config {path}: {exc}")
    d.update({k: v for k, v in overrides.items() if v is not None})
    try:
        return RunConfig.from_dict(d)
    except TypeError as exc:
        raise CliError(f"bad config: {exc}")


def _dump(path, obj) -> None:
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=1, sort_keys=True)
        fh.write("\n")


def _start_run(cfg: RunConfig, out: str | None = None) -> str:
    out = out or cfg.out
    os.makedirs(out, exist_ok=True)
    _dump(os.path.join(out, "config.json"), cfg.to_dict())
    return out


def _threads() -> int:
    try:
        return max(1, int(os.environ.get("MONOPOLIST_THREADS", "1")))
    except ValueError:
        return 1


# -- diagnostics ---------------------------------------------------------------------------

def neumann_min(u: ScalarField) -> float:
    """Smallest ``(Du - x).n`` over non-corner boundary nodes."""
    bt = boundary_normal_residual(u)
    return float(np.min(bt.values[~bt.is_corner]))


def _area_dict(masks) -> dict:
    ar = masks.areas()
    return {"omega0": ar[OMEGA0], "omega1": ar[OMEGA1], "omega2": ar[OMEGA2]}


def leaf_diagnostics(u: ScalarField, rays) -> tuple[dict, str | None]:
    """Medians of the moment residuals over tame west rays, and the per-ray CSV."""
    try:
        fam = LeafFamily.from_rays(rays, u.grid.a)
    except ValueError:
        return {}, None
    res = family_residuals(fam, u)
    return {k: float(v) for k, v in res.medians().items()}, res.to_csv()


def exclusion_convexity_gap(u: ScalarField, tol: float | None = None) -> float:
    """Largest ``u`` at nodes inside the convex hull of the zero set (0 for a convex zero set)."""
    zs = zero_set(u, tol)
    x1, x2 = u.grid.mesh()
    pts = np.column_stack([x1[zs], x2[zs]])
    if len(pts) < 3:
        return 0.0
    try:
        hull = ConvexHull(pts)
    except Exception:  # collinear zero set
        return 0.0
    tri = Delaunay(pts[hull.vertices])
    inside = tri.find_simplex(np.column_stack([x1.ravel(), x2.ravel()])) >= 0
    return float(np.max(u.values.ravel()[inside]))


def summarize(u: ScalarField, en: float, residuals: dict, thresholds: Thresholds | None = None):
    masks = classify_regions(u, thresholds)
    ex = extract_rays(u, masks)
    regime = classify_regime(masks, ex.rays)
    sb = sigma_mass_balance(u, masks.labels)
    summary = {
        "a": u.grid.a, "n": u.grid.n, "regime": regime, "areas": _area_dict(masks),
        "mass_balance": {"total": sb.total, "omega0": sb.per_region.get(OMEGA0, 0.0)},
        "neumann_min": neumann_min(u), "energy": en, "residuals": residuals,
    }
    return summary, masks, ex


# -- modes ---------------------------------------------------------------------------------

def run_solve(cfg: RunConfig, out: str | None = None) -> int:
    out = _start_run(cfg, out)
    grid = make_grid(cfg.a, cfg.n)
    res = minimize(grid, opts=cfg.solve_options())
    u = res.u
    with open(os.path.join(out, "field.csv"), "w") as fh:
        fh.write(format_field(u))
    summary, masks, ex = summarize(u, res.energy, {}, cfg.thresholds_obj())
    leaf, csv = leaf_diagnostics(u, ex.rays)
    summary["residuals"] = leaf
    with open(os.path.join(out, "mask.csv"), "w") as fh:
        fh.write(format_mask(masks))
    with open(os.path.join(out, "rays.json"), "w") as fh:
        fh.write(rays_to_json(ex.rays) + "\n")
    if csv:
        with open(os.path.join(out, "leaf_residuals.csv"), "w") as fh:
            fh.write(csv)
    _dump(os.path.join(out, "diagnostics.json"), {
        "converged": res.converged, "iterations": res.iterations, "min_second_difference": res.min_second_difference,
        "min_u": res.min_u, "stray_area": masks.stray_area(), "poisson_violation": masks.poisson_violation,
        "rays": len(ex.rays), "stray_rays": len(ex.stray)})
    _dump(os.path.join(out, "summary.json"), summary)
    if not res.converged:
        log.error("solver did not converge")
        return EXIT_SOLVER
    return EXIT_OK


def _params(cfg: RunConfig) -> CandidateParams:
    if cfg.params is None:
        raise CliError("mode needs 'params' in the config")
    try:
        return CandidateParams.from_json(cfg.params)
    except (KeyError, ValueError) as exc:
        raise CliError(f"bad params: {exc}")


def run_ode(cfg: RunConfig, out: str | None = None) -> int:
    out = _start_run(cfg, out)
    params = _params(cfg)
    try:
        prof, zone = build_profile(cfg.a, params, step=cfg.fit.get("step", 1e-3))
    except (ProfileError, GeometryError) as exc:
        log.error("integration failed: %s", exc)
        return EXIT_SOLVER
    prof.to_csv(os.path.join(out, "profile.csv"))
    st = stingray_curve(prof)
    _dump(os.path.join(out, "ode.json"), {
        "hypotenuse": zone.s if zone is not None else None,
        "neumann_identity_max": float(np.max(np.abs(prof.neumann_identity_residual()))),
        "stingray_min_slope": float(np.min(st.slopes)) if len(st.slopes) else None,
        "stingray_increasing": bool(np.all(st.slope_rate > 0)),
    })
    return EXIT_OK


def _rays_from_dir(path: str):
    try:
        with open(os.path.join(path, "rays.json")) as fh:
            raw = json.load(fh)
    except OSError as exc:
        raise CliError(f"missing artifacts: {exc}")
    rays = []
    for d in raw:
        th = d["theta"]
        rays.append(Ray(np.array(d["foot"]), np.array([math.cos(th), math.sin(th)]), d["R"], np.array(d["grad"]),
                        d["side"], d["two_sided"], d["interior_only"],
                        diag_extent=tuple(d.get("diag_extent", (0.0, 0.0)))))
    return rays


def run_assemble(cfg: RunConfig, out: str | None = None) -> int:
    out = _start_run(cfg, out)
    if cfg.params is not None:
        init = _params(cfg)
    else:
        if cfg.init_from:
            rays = _rays_from_dir(cfg.init_from)
        else:
            res = minimize(make_grid(cfg.a, cfg.n), opts=cfg.solve_options())
            masks = classify_regions(res.u, cfg.thresholds_obj())
            rays = extract_rays(res.u, masks).rays
        case = "C" if blunt_span(rays) >= 3.0 / (cfg.n - 1) else "B"
        try:
            init = initial_params_from_rays(cfg.a, rays, case=case)
        except ValueError as exc:
            log.error("no initial candidate: %s", exc)
            return EXIT_SOLVER
    opts = cfg.fit_options()
    try:
        if opts.sweeps > 0:
            fit = fit_free_boundary(cfg.a, init, opts)
            params, trace = fit.params, fit.trace
        else:
            params, trace = init, []
        cand = assemble_candidate(cfg.a, params, n=cfg.n, step=opts.step)
    except (ProfileError, GeometryError) as exc:
        log.error("assembly failed: %s", exc)
        return EXIT_SOLVER
    report = free_boundary_residuals(cand, opts.weights)
    write_candidate_bundle(out, cand, report)
    _dump(os.path.join(out, "fit_trace.json"), [[int(k), float(f)] for k, f in trace])
    summary, masks, _ = summarize(cand.field, cand.energy(), report.to_json(), cfg.thresholds_obj())
    summary["hypotenuse"] = cand.hypotenuse
    with open(os.path.join(out, "mask.csv"), "w") as fh:
        fh.write(format_mask(masks))
    _dump(os.path.join(out, "summary.json"), summary)
    return EXIT_OK


def _scan_one(args):
    a, n, solver, thresholds = args
    res = minimize(make_grid(a, n), opts=SolveOptions(**solver))
    summary, masks, _ = summarize(res.u, res.energy, {}, Thresholds(**thresholds))
    return res.u, res.converged, summary, masks


def regime_bracket(records: list[dict]) -> list[float] | None:
    """``[a_lo, a_hi]`` around the first B to C flip in a sorted scan."""
    for lo, hi in zip(records[:-1], records[1:]):
        if lo["regime"] == "B" and hi["regime"] == "C":
            return [lo["a"], hi["a"]]
    return None


def run_scan(cfg: RunConfig, out: str | None = None, values=None) -> int:
    out = _start_run(cfg, out)
    sc = cfg.scan
    if values is None:
        a_min, a_max, steps = float(sc["a_min"]), float(sc["a_max"]), int(sc["steps"])
        if not 0 <= a_min < a_max or steps < 2:
            raise CliError("scan needs 0 <= a_min < a_max and steps >= 2")
        values = np.linspace(a_min, a_max, steps)
    values = sorted(float(v) for v in values)
    jobs = [(a, cfg.n, cfg.solver, cfg.thresholds) for a in values]
    workers = min(_threads(), len(jobs))
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            results = list(pool.map(_scan_one, jobs))
    else:
        results = [_scan_one(j) for j in jobs]
    records, ok = [], True
    for a, (u, conv, summary, masks) in zip(values, results):
        sub = os.path.join(out, f"a_{a:.6g}")
        os.makedirs(sub, exist_ok=True)
        with open(os.path.join(sub, "field.csv"), "w") as fh:
            fh.write(format_field(u))
        with open(os.path.join(sub, "mask.csv"), "w") as fh:
            fh.write(format_mask(masks))
        _dump(os.path.join(sub, "summary.json"), summary)
        ok &= conv
        records.append({"a": a, "regime": summary["regime"], "areas": summary["areas"],
                        "mass_balance": summary["mass_balance"]["total"],
                        "neumann_violation": max(0.0, -summary["neumann_min"]), "converged": conv})
    _dump(os.path.join(out, "scan.json"), {"records": records, "bracket": regime_bracket(records)})
    with open(os.path.join(out, "scan.csv"), "w") as fh:
        fh.write("a,regime,omega0,omega1,omega2,mass_balance,neumann_violation\n")
        for r in records:
            ar = r["areas"]
            fh.write(f"{r['a']:.17g},{r['regime']},{ar['omega0']:.17g},{ar['omega1']:.17g},{ar['omega2']:.17g},"
                     f"{r['mass_balance']:.17g},{r['neumann_violation']:.17g}\n")
    return EXIT_OK if ok else EXIT_SOLVER


# -- verify --------------------------------------------------------------------------------

@dataclass
class VerifyTolerances:
    mass_total: float = 0.02
    mass_omega0: float = 0.02
    neumann: float = 5.0  # times h
    moments: float = 10.0  # times h
    convexity: float = 10.0  # times h^2


def verify_field(u: ScalarField, tol: VerifyTolerances, profile_path: str | None = None) -> list[dict]:
    h = u.grid.h
    masks = classify_regions(u)
    ex = extract_rays(u, masks)
    sb = sigma_mass_balance(u, masks.labels)
    checks = []

    def add(name, value, limit, passed):
        checks.append({"check": name, "value": value, "limit": limit, "pass": bool(passed)})

    add("mass_total", sb.total, [1 - tol.mass_total, 1 + tol.mass_total], abs(sb.total - 1) <= tol.mass_total)
    m0 = sb.per_region.get(OMEGA0, 0.0)
    add("mass_omega0", m0, [1 - tol.mass_omega0, 1 + tol.mass_omega0], abs(m0 - 1) <= tol.mass_omega0)
    nm = neumann_min(u)
    add("neumann_sign", nm, -tol.neumann * h, nm >= -tol.neumann * h)
    leaf, _ = leaf_diagnostics(u, ex.rays)
    if leaf:
        worst = max(abs(leaf[k]) for k in ("res_moment0", "res_moment1"))
        add("moment_residuals", worst, tol.moments * h, worst <= tol.moments * h)
    gap = exclusion_convexity_gap(u)
    add("omega0_convexity", gap, tol.convexity * h * h, gap <= tol.convexity * h * h)
    if profile_path and os.path.exists(profile_path):
        data = np.loadtxt(profile_path, delimiter=",", skiprows=1, ndmin=2)
        th, m, mp = data[:, 0], data[:, 1], data[:, 2]
        y1, y2 = m * np.cos(th) - mp * np.sin(th), m * np.sin(th) + mp * np.cos(th)
        keep = th < 0
        with np.errstate(divide="ignore", invalid="ignore"):
            s = np.diff(y2[keep]) / np.diff(y1[keep])
        ok = bool(len(s) > 0 and np.all(s > 0) and np.all(np.diff(s) > 0))
        add("stingray_monotone", float(np.min(s)) if len(s) else float("nan"), 0.0, ok)
    return checks


def run_verify(path: str, tol: VerifyTolerances | None = None) -> int:
    tol = tol or VerifyTolerances()
    fpath = os.path.join(path, "field.csv")
    if not os.path.exists(fpath):
        log.error("missing artifacts in %s", path)
        print("missing artifacts", file=sys.stderr)
        return EXIT_IO
    try:
        with open(fpath) as fh:
            u = parse_field(fh.read())
    except (OSError, ValueError) as exc:
        log.error("unreadable field: %s", exc)
        return EXIT_IO
    checks = verify_field(u, tol, os.path.join(path, "profile.csv"))
    failed = [c["check"] for c in checks if not c["pass"]]
    _dump(os.path.join(path, "verify.json"), {"checks": checks, "failed": failed, "pass": not failed})
    if failed:
        print("failed checks: " + ", ".join(failed), file=sys.stderr)
        return EXIT_VERIFY
    return EXIT_OK


# -- export --------------------------------------------------------------------------------

def _read_any(text: str):
    """Return ``(kind, grid, array)`` with kind ``field`` or ``mask``."""
    s = text.lstrip()
    if s.startswith("{"):
        d = json.loads(s)
        g = Grid(float(d["a"]), int(d["n"]))
        kind = d.get("kind", "field")
        arr = np.array(d["values"], dtype=np.int64 if kind == "mask" else float)
        if arr.shape != (g.n, g.n):
            raise ValueError("values do not match n")
        return kind, g, arr
    if s.startswith(MASK_HEADER):
        g, lab = parse_mask(s)
        return "mask", g, lab
    if s.startswith(FIELD_HEADER):
        u = parse_field(s)
        return "field", u.grid, u.values
    raise ValueError("unrecognised field file")


def encode(kind: str, grid: Grid, arr: np.ndarray, fmt: str) -> str:
    if fmt not in EXPORT_FORMATS:
        raise ValueError(f"unknown format {fmt!r}")
    if kind == "mask":
        cell = lambda v: str(int(v))  # noqa: E731
    else:
        cell = lambda v: repr(float(v))  # noqa: E731
    if fmt == "json":
        vals = arr.astype(int).tolist() if kind == "mask" else arr.tolist()
        return json.dumps({"kind": kind, "a": grid.a, "n": grid.n, "values": vals}) + "\n"
    if fmt == "gnuplot-matrix":
        # rows follow x2 so that "plot ... matrix" shows x1 horizontally
        return "\n".join(" ".join(cell(v) for v in row) for row in arr.T) + "\n"
    if kind == "mask":
        return format_labels(grid, arr)
    return format_field(ScalarField(grid, arr))


def export_field(src: str, fmt: str, dst: str) -> str:
    with open(src) as fh:
        kind, grid, arr = _read_any(fh.read())
    text = encode(kind, grid, arr, fmt)
    with open(dst, "w") as fh:
        fh.write(text)
    return dst


def label_histogram(labels: np.ndarray) -> dict:
    vals, counts = np.unique(labels, return_counts=True)
    return {int(v): int(c) for v, c in zip(vals, counts)}


def run_export(cfg: RunConfig) -> int:
    ex = cfg.export
    src, fmt = ex.get("input"), ex.get("format", "json")
    if not src:
        raise CliError("export needs an input file")
    ext = {"csv": ".csv", "json": ".json", "gnuplot-matrix": ".dat"}.get(fmt)
    if ext is None:
        raise CliError(f"unknown format {fmt!r}")
    dst = ex.get("output") or os.path.splitext(src)[0] + ext
    try:
        export_field(src, fmt, dst)
    except (OSError, ValueError, KeyError) as exc:
        raise CliError(f"export failed: {exc}")
    return EXIT_OK


# -- entry point ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="monopolist", description=__doc__.splitlines()[0])
    p.add_argument("command", nargs="?", choices=MODES, help="mode (overrides --mode and the config)")
    p.add_argument("target", nargs="?", help="artifact directory (verify) or input file (export)")
    p.add_argument("--config", help="JSON run configuration")
    p.add_argument("--a", type=float)
    p.add_argument("--n", type=int)
    p.add_argument("--out")
    p.add_argument("--mode", choices=MODES)
    p.add_argument("--format", help="export format: csv, json or gnuplot-matrix")
    p.add_argument("--output", help="export destination")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config, {"a": args.a, "n": args.n, "out": args.out,
                                        "mode": args.command or args.mode})
        if cfg.mode == "verify":
            return run_verify(args.target or cfg.out, VerifyTolerances(**cfg.verify))
        if cfg.mode == "export":
            if args.target:
                cfg.export["input"] = args.target
            if args.format:
                cfg.export["format"] = args.format
            if args.output:
                cfg.export["output"] = args.output
            return run_export(cfg)
        runner = {"solve": run_solve, "ode": run_ode, "assemble": run_assemble, "scan": run_scan}[cfg.mode]
        return runner(cfg)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
