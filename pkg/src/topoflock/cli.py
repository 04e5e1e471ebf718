"""Command line: ``topoflock run|validate|sweep <config.json>``.

Exit codes: 0 success, 2 validation failure, 3 runtime solver guard, 4 I/O.
"""

from __future__ import annotations

import argparse
import logging
import platform
import sys
from pathlib import Path

import numpy as np

from . import __version__
from . import analysis as an
from . import config as cf
from . import kernels as _k
from . import lagrangian as lg
from . import m_solver as ms
from . import v_solver as vs
from .exceptions import (AdmissibilityError, ArtifactIOError, ConfigurationError, KernelDomainError,
                         SolverGuardError, UnsupportedKernelError)
from .io import ensure_dir, read_text, write_csv, write_json, write_rows

logger = logging.getLogger("topoflock")

EXIT_OK, EXIT_VALIDATION, EXIT_GUARD, EXIT_IO = 0, 2, 3, 4
SPECTRAL_SERIES_POINTS = 400
DIRICHLET_CAVEAT = ("Dirichlet runs use the pinned-cell realisation (first and last cells held at 0); "
                    "one consistent discrete choice among several")
PRINTED_FORMULA_NOTE = ("'printed_formula' is the quotient (psi0 drop)/(label width), the reciprocal of the "
                        "crossing time implied by the quotient inequality; 'time' is the crossing time")


def _versions() -> dict:
    import scipy
    import sklearn

    return {"topoflock": __version__, "python": platform.python_version(), "numpy": np.__version__,
            "scipy": scipy.__version__, "scikit-learn": sklearn.__version__}


def _tag(t: float) -> str:
    return f"{t:.6f}".rstrip("0").rstrip(".").replace(".", "p")


def _manifest(cfg: cf.RunConfig, flags: dict, files: list, extra: dict = None) -> dict:
    return {"mode": cfg.mode, "config": cfg.raw, "versions": _versions(), "flags": flags,
            "files": sorted(str(f) for f in files), **(extra or {})}


def _write_velocity(out: Path, times, values, files: list):
    n = values.shape[1]
    m = (np.arange(n) + 0.5) / n
    for t, v in zip(times, values):
        files.append(write_csv(out / "velocity" / f"v_t{_tag(t)}.csv", ["m", "v"], [m, v]).relative_to(out))


def _write_mass(out: Path, traj: ms.MassTrajectory, files: list):
    x = traj.centers
    for t, M in zip(traj.times, traj.snapshots):
        rho = np.gradient(M, traj.dx)
        files.append(write_csv(out / "mass" / f"M_t{_tag(t)}.csv", ["x", "M", "rho"], [x, M, rho]).relative_to(out))


def _velocity_stage(cfg: cf.RunConfig, kernel: _k.Kernel, v0: np.ndarray, times_dense: bool = True) -> dict:
    """Velocity trajectory plus the operator data the reports need."""
    N = v0.size
    if kernel.is_bounded:
        solver = vs.BoundedAlignmentSolver(kernel, N, cfg.dt).fit()
        traj = solver.evolve(v0, cfg.t_final)
        G = solver.generator_
        lam = np.linalg.eigvalsh(G) if N <= vs.MAX_SPECTRAL_CELLS else None
        return {"traj": traj, "form": G / N, "lambda1": float(lam[1]) if lam is not None and N > 1 else None,
                "rate_max": 2.0 * float(lam[-1]) if lam is not None else None, "op": None}
    bc = cfg.spectral.get("bc", "neumann")
    op = vs.RegionalFractionalLaplacian(kernel.s, bc, N, cfg.spectral.get("scheme", "auto")).fit()
    n_pts = max(SPECTRAL_SERIES_POINTS, int(round(cfg.t_final / cfg.dt)) if times_dense else 0)
    times = np.unique(np.concatenate((np.linspace(0.0, cfg.t_final, n_pts + 1), cfg.output_times)))
    traj = op.trajectory(v0, times)
    return {"traj": traj, "form": op.form_matrix_, "lambda1": op.lambda1_,
            "rate_max": 2.0 * float(op.eigenvalues_[-1]), "op": op}


def _energy_report(cfg, kernel, stage) -> tuple:
    traj = stage["traj"]
    rec = an.decay_record(traj, stage["form"])
    c_phi = _k.poincare_constant(kernel) if kernel.is_pure else float("inf")
    report = {"rate_fit": rec.rate, "fit_residual": rec.residual, "lambda1": stage["lambda1"],
              "c_phi": c_phi, "rate_bound_2_over_cphi": 2.0 / c_phi if np.isfinite(c_phi) else 0.0,
              "energy_monotone": rec.energy_monotone, "max_ratio": None}
    if np.isfinite(c_phi) and kernel.is_bounded:
        report["max_ratio"] = an.poincare_decay_check(traj, c_phi)["max_ratio"]
    if np.isfinite(rec.rate) and np.isfinite(c_phi) and stage["rate_max"] is not None:
        report["rate_in_sandwich"] = an.rate_in_sandwich(rec.rate, c_phi, stage["rate_max"])
    return rec, report


def run_mass(cfg: cf.RunConfig, out: Path) -> dict:
    kernel = cf.build_kernel(cfg)
    rho0 = cf.build_rho0(cfg)
    N, n_x = cfg.resolution["N"], cfg.resolution["n_x"]
    v0 = cf.build_v0(cfg, rho0, N)
    files, flags = [], {}
    stage = _velocity_stage(cfg, kernel, v0)
    traj = stage["traj"]
    mean0 = float(np.mean(v0))
    flags["mean_drift"] = float(np.abs(traj.values.mean(axis=1) - mean0).max())
    if kernel.is_bounded:
        a, verdict = lg.mass_threshold(v0, kernel)
        flags["mass_threshold"] = verdict.as_dict()
    if stage["op"] is not None and stage["op"].bc == "dirichlet":
        flags["dirichlet_convention"] = DIRICHLET_CAVEAT
    rec, report = _energy_report(cfg, kernel, stage)
    write_csv(out / "energy.csv", ["t", "energy", "form", "sup_deviation"],
              [rec.times, rec.energy, rec.form, rec.sup_deviation])
    files.append(Path("energy.csv"))
    _write_velocity(out, cfg.output_times, traj.sample(cfg.output_times), files)
    tol = cfg.tolerances
    mt = ms.couple_and_run(traj, rho0, cfg.t_final, cfg.output_times, n_x, cfl=tol.get("cfl", ms.CFL_MAX),
                           monitor_factor=tol.get("monitor_factor", 50.0))
    _write_mass(out, mt, files)
    flags.update({"cfl": tol.get("cfl", ms.CFL_MAX), "dx": mt.dx, "dt_mass": mt.dt, **mt.flags})
    if len(mt.times) >= 2:
        profiles = [mt.grid(k).to_profile() for k in range(len(mt.times))]
        fl = an.flocking_diagnostic(mt.times, profiles, mean0)
        report["flocking_declared"] = fl["flocking_declared"]
        report["flocking_heuristic"] = True
    else:
        report["flocking_declared"] = False
    return {"report": report, "flags": flags, "files": files}


def run_spectral(cfg: cf.RunConfig, out: Path) -> dict:
    kernel = cf.build_kernel(cfg)
    rho0 = cf.build_rho0(cfg)
    N = cfg.resolution["N"]
    v0 = cf.build_v0(cfg, rho0, N)
    files, flags = [], {}
    stage = _velocity_stage(cfg, kernel, v0, times_dense=False)
    op, traj = stage["op"], stage["traj"]
    if op.bc == "dirichlet":
        flags["dirichlet_convention"] = DIRICHLET_CAVEAT
    flags["mean_drift"] = float(np.abs(traj.values.mean(axis=1) - np.mean(v0)).max())
    write_csv(out / "spectrum.csv", ["index", "lambda"], [np.arange(op.eigenvalues_.size), op.eigenvalues_])
    files.append(Path("spectrum.csv"))
    rec, report = _energy_report(cfg, kernel, stage)
    write_csv(out / "energy.csv", ["t", "energy", "form", "sup_deviation"],
              [rec.times, rec.energy, rec.form, rec.sup_deviation])
    files.append(Path("energy.csv"))
    _write_velocity(out, cfg.output_times, traj.sample(cfg.output_times), files)
    if op.bc == "neumann" and kernel.s > 0.5:
        tau = float(cfg.spectral.get("tau", 0.5 / op.lambda1_))
        sup = an.sup_decay_check(traj, op.lambda1_, op.sobolev_norm, min(tau, cfg.t_final))
        report["sup_rate_fit"] = sup["rate_fit"]
        report["sup_bound_max_ratio"] = sup["max_ratio"]
        report["sup_bound_passed"] = sup["passed"]
    report["flocking_declared"] = False
    if rho0 is not None and not rho0.has_atoms:
        mt = ms.couple_and_run(traj, rho0, cfg.t_final, cfg.output_times, cfg.resolution["n_x"],
                               cfl=cfg.tolerances.get("cfl", ms.CFL_MAX),
                               monitor_factor=cfg.tolerances.get("monitor_factor", 50.0))
        _write_mass(out, mt, files)
        flags.update({"dx": mt.dx, "dt_mass": mt.dt, **mt.flags})
        if len(mt.times) >= 2:
            fl = an.flocking_diagnostic(mt.times, [mt.grid(k).to_profile() for k in range(len(mt.times))],
                                        float(np.mean(v0)))
            report["flocking_declared"] = fl["flocking_declared"]
            report["flocking_heuristic"] = True
    return {"report": report, "flags": flags, "files": files}


def run_lagrangian(cfg: cf.RunConfig, out: Path) -> dict:
    kernel = cf.build_kernel(cfg)
    rho0 = cf.build_rho0(cfg)
    u0 = cf.build_u0(cfg, rho0)
    lag = cfg.lagrangian
    flow = lg.LagrangianFlow(kernel, cfg.resolution["P"], cfg.dt, bool(lag.get("radial", False))).fit(rho0, u0)
    verdict = lg.threshold_check(flow.psi0_)
    run = flow.run(cfg.t_final, cfg.output_times, lag.get("collapse_fraction", 0.1))
    files, flags = [], {"threshold": verdict.as_dict(), "radial": bool(lag.get("radial", False))}
    flags["blowup"] = run.blowup
    report = {"collapse_time": run.collapse_time, "classical": run.classical,
              "final_time": float(run.times[-1])}
    if not verdict.satisfied:
        bound = lg.radial_blowup_bound(flow.psi0_, flow.labels_)
        bound["note"] = PRINTED_FORMULA_NOTE
        flags["radial_blowup_bound"] = bound
        report["predicted_latest_classical_time"] = bound.get("time")
    margins, mom = [], []
    for k, st in enumerate(run.snapshots):
        psi = lg.psi_values(flow.kernel_, flow.levels_, st.positions, st.velocities)
        files.append(write_csv(out / "particles" / f"p_t{_tag(st.t)}.csv", ["alpha", "X", "V", "psi"],
                               [flow.labels_, st.positions, st.velocities, psi]).relative_to(out))
        rec = lg.eulerian_reconstruct(st, 0.5 * (st.positions[1:] + st.positions[:-1]))
        files.append(write_csv(out / "eulerian" / f"e_t{_tag(st.t)}.csv", ["x", "rho", "u"],
                               [rec["x"], rec["rho"], rec["u"]]).relative_to(out))
        mom.append(float(np.mean(st.velocities)))
        if verdict.satisfied:
            margins.append(float((lg.difference_quotients(flow, st) - lg.adjacent_lower_bounds(flow, st.t)).min()))
    if margins:
        report["gronwall_min_margin"] = min(margins)
    if mom:
        report["momentum_drift"] = float(np.max(np.abs(np.array(mom) - mom[0])))
    report["threshold_satisfied"] = verdict.satisfied
    return {"report": report, "flags": flags, "files": files}


def run_compare(cfg: cf.RunConfig, out: Path) -> dict:
    kernel = cf.build_kernel(cfg)
    rho0 = cf.build_rho0(cfg)
    v0 = cf.build_v0_function(cfg, rho0)
    levels = [tuple(lv) for lv in cfg.resolution.get("levels", [[400, 400], [800, 800]])]
    cv = an.cross_validate(kernel, rho0, v0, cfg.t_final, levels, cfg.dt)
    rows = cv.rows()
    write_rows(out / "convergence.csv", ["P", "n_x", "l1", "linf"], rows)
    report = {"table": rows, "order_l1": cv.order_l1, "ratios_l1": cv.ratios.tolist()}
    return {"report": report, "flags": cv.flags, "files": [Path("convergence.csv")]}


RUNNERS = {"mass": run_mass, "spectral": run_spectral, "lagrangian": run_lagrangian, "compare": run_compare}


def execute(cfg: cf.RunConfig, out: Path) -> dict:
    """Run a validated config into ``out``; writes report.json and manifest.json."""
    out = ensure_dir(out)
    result = RUNNERS[cfg.mode](cfg, out)
    write_json(out / "report.json", result["report"])
    files = list(result["files"]) + [Path("report.json")]
    write_json(out / "manifest.json", _manifest(cfg, result["flags"], files))
    return result


def execute_sweep(data: dict, source: str, base_dir: Path, out: Path) -> int:
    out = ensure_dir(out)
    points = cf.expand_sweep(data)
    params = cf.sweep_parameters(data)
    rows, worst = [], EXIT_OK
    for i, (point, par) in enumerate(zip(points, params)):
        row = {"point": i, **{k: (v if not isinstance(v, (list, dict)) else str(v)) for k, v in par.items()}}
        try:
            cfg = cf.from_dict(point, source, base_dir)
            rep = execute(cfg, out / f"point_{i:03d}")["report"]
            row.update({"status": "ok", "exit_code": EXIT_OK})
            for key in ("rate_fit", "rate_bound_2_over_cphi", "lambda1", "max_ratio", "flocking_declared",
                        "collapse_time", "order_l1"):
                if key in rep:
                    row[key] = rep[key]
        except Exception as exc:  # each point reports independently
            code = _exit_code(exc)
            if code is None:
                raise
            row.update({"status": type(exc).__name__, "exit_code": code})
            worst = worst or code
            logger.error("sweep point %d failed: %s", i, exc)
        rows.append(row)
    header = ["point", *sorted(params[0]), "status", "exit_code", "rate_fit", "rate_bound_2_over_cphi",
              "lambda1", "max_ratio", "flocking_declared", "collapse_time", "order_l1"]
    write_rows(out / "summary.csv", header, rows)
    write_json(out / "manifest.json", {"mode": "sweep", "config": data, "versions": _versions(),
                                       "points": len(points), "summary": "summary.csv"})
    return worst


def _exit_code(exc: BaseException):
    if isinstance(exc, SolverGuardError):
        return EXIT_GUARD
    if isinstance(exc, (ArtifactIOError, OSError)):
        return EXIT_IO
    if isinstance(exc, (ConfigurationError, AdmissibilityError, UnsupportedKernelError, KernelDomainError)):
        return EXIT_VALIDATION
    return None


def _load(path) -> tuple:
    path = Path(path)
    text = read_text(path)
    data = cf.parse_text(text, str(path))
    errors = cf.validate_dict(data, str(path), text, path.parent)
    if errors:
        raise cf.ConfigValidationError(errors)
    return data, text, path


def cmd_validate(args) -> int:
    _load(args.config)
    print(f"{args.config}: ok")
    return EXIT_OK


def _default_out(path: Path) -> Path:
    return Path.cwd() / f"{path.stem}_out"


def cmd_run(args) -> int:
    data, text, path = _load(args.config)
    out = Path(args.out) if args.out else _default_out(path)
    if data["mode"] == "sweep":
        return execute_sweep(data, str(path), path.parent, out)
    execute(cf.from_dict(data, str(path), path.parent, text), out)
    print(f"wrote {out}")
    return EXIT_OK


def cmd_sweep(args) -> int:
    data, _, path = _load(args.config)
    if data["mode"] != "sweep":
        raise cf.ConfigValidationError([f"{path}:1: mode: the sweep command needs mode 'sweep'"])
    out = Path(args.out) if args.out else _default_out(path)
    code = execute_sweep(data, str(path), path.parent, out)
    print(f"wrote {out}")
    return code


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="topoflock", description="1D Euler alignment with topological protocols")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)
    r = sub.add_parser("run", help="run a config and write artifacts")
    r.add_argument("config")
    r.add_argument("--out", help="output directory (default: ./<config stem>_out)")
    r.set_defaults(func=cmd_run)
    v = sub.add_parser("validate", help="check a config without running it")
    v.add_argument("config")
    v.set_defaults(func=cmd_validate)
    s = sub.add_parser("sweep", help="run every point of a parameter grid")
    s.add_argument("config")
    s.add_argument("--out", help="output directory (default: ./<config stem>_out)")
    s.set_defaults(func=cmd_sweep)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except cf.ConfigValidationError as exc:
        for line in exc.errors:
            print(line, file=sys.stderr)
        return EXIT_VALIDATION
    except Exception as exc:
        code = _exit_code(exc)
        if code is None:
            raise
        print(f"topoflock: {type(exc).__name__}: {exc}", file=sys.stderr)
        return code


if __name__ == "__main__":
    sys.exit(main())
