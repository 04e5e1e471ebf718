"""Long-time diagnostics: decay rates, coupled distances, flocking and cross-validation."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from . import kernels as _k
from .exceptions import ConfigurationError
from .mass_coords import MassProfile, cdf_eval, pushforward_uniform, velocity_to_space
from .v_solver import VelocityTrajectory, continuous_representative

FIT_WINDOW = (1e-10, 1e-1)
FLOCKING_THRESHOLD = 1e-3
MEAN_TOL = 1e-10


def _values(traj) -> tuple:
    if isinstance(traj, VelocityTrajectory):
        return np.asarray(traj.times, dtype=float), np.asarray(traj.values, dtype=float)
    times, values = traj
    return np.asarray(times, dtype=float), np.asarray(values, dtype=float)


def fit_rate(times, series, window: tuple = FIT_WINDOW) -> tuple:
    """Least-squares exponential rate of ``series`` inside window * series[0].

    Returns ``(rate, residual, n_points)``; the rate is NaN when the window spans
    fewer than two decades of data.
    """
    t = np.asarray(times, dtype=float)
    y = np.asarray(series, dtype=float)
    if y.size == 0 or y[0] <= 0:
        return float("nan"), float("nan"), 0
    lo, hi = window[0] * y[0], window[1] * y[0]
    sel = (y >= lo) & (y <= hi)
    if sel.sum() < 3 or np.log10(y[sel].max() / y[sel].min()) < 2.0:
        return float("nan"), float("nan"), int(sel.sum())
    A = np.vstack([t[sel], np.ones(sel.sum())]).T
    coef, res, *_ = np.linalg.lstsq(A, np.log(y[sel]), rcond=None)
    rms = float(np.sqrt(res[0] / sel.sum())) if res.size else 0.0
    return float(-coef[0]), rms, int(sel.sum())


@dataclass
class DecayRecord:
    """Energy, Dirichlet form and sup deviation from the mean along a trajectory."""

    times: np.ndarray
    energy: np.ndarray
    form: np.ndarray
    sup_deviation: np.ndarray
    rate: float = float("nan")
    residual: float = float("nan")

    @property
    def energy_monotone(self) -> bool:
        return bool(np.all(np.diff(self.energy) <= 1e-14 * max(self.energy[0], 1e-300)))

    def as_dict(self) -> dict:
        return {"rate_fit": self.rate, "fit_residual": self.residual,
                "energy_monotone": self.energy_monotone}


def decay_record(traj, form_matrix: Optional[np.ndarray] = None) -> DecayRecord:
    """Build a :class:`DecayRecord`; ``form_matrix`` Q gives E(v, v) = v^T Q v."""
    times, vals = _values(traj)
    dev = vals - vals.mean(axis=1, keepdims=True)
    energy = np.mean(dev**2, axis=1)
    form = np.einsum("ij,ij->i", dev, dev @ form_matrix) if form_matrix is not None else np.full(times.size, np.nan)
    sup = np.abs(dev).max(axis=1)
    rate, res, _ = fit_rate(times, energy)
    return DecayRecord(times, energy, form, sup, rate, res)


def rate_in_sandwich(rate: float, c_phi: float, rate_max: float, eps: float = 0.05) -> bool:
    """Is the fitted energy rate within [2/c_phi (1 - eps), rate_max]?"""
    return bool(2.0 / c_phi * (1.0 - eps) <= rate <= rate_max * (1.0 + eps))


def poincare_decay_check(traj, c_phi: float, other=None) -> dict:
    """Ratios ||dv(t)|| / (exp(-t/c_phi) ||dv(0)||) for dv = v1 - v2.

    Without ``other`` the second solution is the constant mean of the first.
    """
    if not np.isfinite(c_phi) or c_phi <= 0:
        raise ConfigurationError("poincare_decay_check needs a finite positive c_phi")
    times, v1 = _values(traj)
    if other is None:
        v2 = np.broadcast_to(v1[0].mean(), v1.shape)
    else:
        t2, v2 = _values(other)
        if t2.shape != times.shape or np.any(np.abs(t2 - times) > 1e-12):
            raise ConfigurationError("trajectories must share their output times")
    if abs(v1[0].mean() - np.mean(v2[0])) > MEAN_TOL:
        raise ConfigurationError("the stability estimate compares solutions with equal means")
    norm = np.sqrt(np.mean((v1 - v2) ** 2, axis=1))
    if norm[0] == 0.0:
        ratios = np.zeros_like(norm)
    else:
        ratios = norm / (np.exp(-times / c_phi) * norm[0])
    return {"times": times, "ratios": ratios, "max_ratio": float(ratios.max()), "c_phi": float(c_phi)}


def coupling_distance(v1, M1: MassProfile, v2, M2: MassProfile, n_samples: int = 100_000) -> dict:
    """int_0^1 |v1 - v2|^2 dm and its Eulerian reading under the quantile coupling.

    The Eulerian side samples x = M1^{-1}(m), y = M2^{-1}(m) at midpoint levels
    and averages |u1(x) - u2(y)|^2 with u = v o M (cell lookup).  It reproduces
    the cell sum exactly when the cell count divides ``n_samples`` and is
    within about N/n_samples * max|v1 - v2|^2 otherwise.
    """
    v1 = np.asarray(v1, dtype=float)
    v2 = np.asarray(v2, dtype=float)
    if v1.shape != v2.shape:
        raise ConfigurationError("velocity grids must share the mass grid")
    mass_side = float(np.mean((v1 - v2) ** 2))
    x = pushforward_uniform(M1, n_samples)
    y = pushforward_uniform(M2, n_samples)
    u1 = velocity_to_space(v1, M1, x)
    u2 = velocity_to_space(v2, M2, y)
    eulerian = float(np.mean((u1 - u2) ** 2))
    return {"mass": mass_side, "eulerian": eulerian, "difference": abs(mass_side - eulerian),
            "n_samples": int(n_samples)}


def sup_decay_check(traj, lambda1: float, sobolev: Callable, tau: float, growth: float = 2.0) -> dict:
    """sup|v(t) - mean| against C exp(-lambda1 (t - tau)) ||v(tau) - mean||_{W^{s,2}}.

    C is fixed at t = tau; the check passes if the ratio never exceeds
    ``growth`` afterwards.  The sup is taken of the piecewise-linear
    continuous representative, i.e. over midpoint values.  Also returns the
    least-squares rate of the sup deviation over the same window as energy fits.
    """
    times, vals = _values(traj)
    dev = vals - vals.mean(axis=1, keepdims=True)
    sup = np.array([np.abs(continuous_representative(d, (np.arange(d.size) + 0.5) / d.size)).max() for d in dev])
    k0 = int(np.searchsorted(times, tau - 1e-12))
    if k0 >= times.size:
        raise ConfigurationError("tau lies beyond the last output time")
    base = float(sobolev(dev[k0]))
    C = sup[k0] / base if base > 0 else 0.0
    bound = C * np.exp(-lambda1 * (times[k0:] - times[k0])) * base
    ratio = np.where(bound > 0, sup[k0:] / np.where(bound > 0, bound, 1.0), 0.0)
    rate, res, npts = fit_rate(times, sup)
    return {"times": times, "sup": sup, "C": float(C), "max_ratio": float(ratio.max()),
            "passed": bool(ratio.max() <= growth), "rate_fit": rate, "fit_residual": res,
            "fit_points": npts, "lambda1": float(lambda1)}


def flocking_diagnostic(times, profiles: Sequence[MassProfile], u_bar: float, n_grid: int = 2000,
                        threshold: float = FLOCKING_THRESHOLD) -> dict:
    """L1 distances between consecutive drift-compensated densities rho(. + u_bar t, t).

    Flocking is declared (heuristically) when the last third of the distances
    is nonincreasing and the final one is below ``threshold``.
    """
    times = np.asarray(times, dtype=float)
    if len(profiles) != times.size or times.size < 2:
        raise ConfigurationError("need at least two profiles with matching times")
    lo = min(p.support[0] - u_bar * t for p, t in zip(profiles, times))
    hi = max(p.support[1] - u_bar * t for p, t in zip(profiles, times))
    pad = 0.05 * max(hi - lo, 1e-12)
    y = np.linspace(lo - pad, hi + pad, n_grid + 1)
    # L1 distance of densities = total variation of the CDF difference on the grid
    cdfs = [np.asarray(cdf_eval(p, y + u_bar * t)) for p, t in zip(profiles, times)]
    dist = np.array([np.abs(np.diff(b - a)).sum() for a, b in zip(cdfs[:-1], cdfs[1:])])
    tail = dist[-max(1, dist.size // 3):]
    declared = bool(np.all(np.diff(tail) <= 1e-12) and tail[-1] < threshold)
    return {"times": times[1:], "distances": dist, "flocking_declared": declared,
            "threshold": threshold, "heuristic": True}


def density_discrepancy(M_grid_values, x_lo: float, x_hi: float, profile: MassProfile) -> tuple:
    """(L1, Linf) between finite-volume rho and the rho of ``profile`` on the same dual cells."""
    vals = np.asarray(M_grid_values, dtype=float)
    n = vals.size
    dx = (x_hi - x_lo) / n
    centers = x_lo + (np.arange(n) + 0.5) * dx
    rho_fv = np.diff(vals) / dx
    rho_p = np.diff(np.asarray(cdf_eval(profile, centers))) / dx
    diff = np.abs(rho_fv - rho_p)
    return float(diff.sum() * dx), float(diff.max())


def observed_order(h, errors) -> float:
    """Slope of log(error) against log(h)."""
    h = np.log(np.asarray(h, dtype=float))
    e = np.log(np.asarray(errors, dtype=float))
    if h.size < 2:
        return float("nan")
    return float(np.polyfit(h, e, 1)[0])


@dataclass
class CrossValidation:
    levels: list
    l1: np.ndarray
    linf: np.ndarray
    order_l1: float
    flags: dict = field(default_factory=dict)

    @property
    def ratios(self) -> np.ndarray:
        return self.l1[:-1] / self.l1[1:]

    def rows(self) -> list:
        return [{"P": P, "n_x": n, "l1": float(a), "linf": float(b)}
                for (P, n), a, b in zip(self.levels, self.l1, self.linf)]


def cross_validate(kernel: _k.Kernel, rho0: MassProfile, v0: Callable, t_final: float,
                   levels: Sequence[tuple] = ((400, 400), (800, 800)), dt: float = 1e-2) -> CrossValidation:
    """Run the particle and the mass pipelines at each (P, n_x) and compare rho at ``t_final``.

    ``v0`` is a function of mass; the particle data use u0 = v0 o M0.  The
    velocity grid has N = P cells, so both pipelines share v exactly.
    """
    from .lagrangian import LagrangianFlow, particle_profile, threshold_check
    from .m_solver import couple_and_run
    from .v_solver import BoundedAlignmentSolver

    u0 = lambda x: v0(np.asarray(cdf_eval(rho0, x)))  # noqa: E731
    l1, linf, flags = [], [], {"threshold_satisfied": [], "blowup": [], "admissible": []}
    for P, n_x in levels:
        flow = LagrangianFlow(kernel, P, dt).fit(rho0, u0)
        flags["threshold_satisfied"].append(threshold_check(flow.psi0_).satisfied)
        run = flow.run(t_final, [t_final])
        flags["blowup"].append(run.blowup)
        if run.blowup is not None:
            raise ConfigurationError("particle run lost ordering; data are not threshold-satisfied")
        traj = BoundedAlignmentSolver(kernel, P, dt).fit().evolve(v0((np.arange(P) + 0.5) / P), t_final)
        mt = couple_and_run(traj, rho0, t_final, [t_final], n_x)
        flags["admissible"].append(mt.flags["admissible"])
        a, b = density_discrepancy(mt.snapshots[-1], mt.x_lo, mt.x_hi, particle_profile(run.snapshots[-1]))
        l1.append(a)
        linf.append(b)
    l1, linf = np.array(l1), np.array(linf)
    order = observed_order([1.0 / n for _, n in levels], l1)
    return CrossValidation([tuple(lv) for lv in levels], l1, linf, order, flags)
