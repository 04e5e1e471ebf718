"""Entropy solver for dM/dt + d/dx A(M, t) = 0 with A(m, t) = int_0^m v(m', t) dm'.

First-order finite volumes with the Engquist-Osher flux.  Because v is
piecewise constant on the mass grid, the positive and negative parts of A'
integrate exactly, so the flux needs no quadrature.  Boundary ghost states are
M = 0 on the left and M = 1 on the right.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .exceptions import AdmissibilityError, ConfigurationError, SolverGuardError
from .mass_coords import MassProfile, cdf_eval

logger = logging.getLogger(__name__)

CFL_MAX = 0.5
MONOTONE_TOL = 1e-13
DOMAIN_MARGIN = 0.1


@dataclass(frozen=True, eq=False)
class SpatialGrid:
    """Cell values M_i at centres of ``n_x`` uniform cells on [x_lo, x_hi]."""

    x_lo: float
    x_hi: float
    values: np.ndarray
    t: float = 0.0

    def __post_init__(self):
        vals = np.array(self.values, dtype=float)
        if vals.ndim != 1 or vals.size < 2:
            raise ConfigurationError("spatial grid needs at least two cells")
        if not self.x_hi > self.x_lo:
            raise ConfigurationError("x_hi must exceed x_lo")
        vals.setflags(write=False)
        object.__setattr__(self, "values", vals)

    @property
    def n_x(self) -> int:
        return self.values.size

    @property
    def dx(self) -> float:
        return (self.x_hi - self.x_lo) / self.n_x

    @property
    def centers(self) -> np.ndarray:
        return self.x_lo + (np.arange(self.n_x) + 0.5) * self.dx

    @property
    def edges(self) -> np.ndarray:
        return np.linspace(self.x_lo, self.x_hi, self.n_x + 1)

    def density(self) -> np.ndarray:
        """rho on the n_x - 1 dual cells between consecutive centres."""
        return np.diff(self.values) / self.dx

    def to_profile(self) -> MassProfile:
        """Piecewise-linear CDF through the cell centres, pinned to 0 and 1 at the ends."""
        x = np.concatenate(([self.x_lo], self.centers, [self.x_hi]))
        m = np.concatenate(([0.0], np.clip(self.values, 0.0, 1.0), [1.0]))
        m = np.maximum.accumulate(m)
        return MassProfile(x, m / m[-1])

    @classmethod
    def from_profile(cls, M0: MassProfile, x_lo: float, x_hi: float, n_x: int, t: float = 0.0):
        if M0.has_atoms:
            raise AdmissibilityError("the conservation-law solver takes atom-free initial data")
        dx = (x_hi - x_lo) / n_x
        centers = x_lo + (np.arange(n_x) + 0.5) * dx
        return cls(x_lo, x_hi, np.asarray(cdf_eval(M0, centers)), t)


class FluxTable:
    """Cumulative positive/negative parts of v at the mass-cell edges.

    P(m) = int_0^m max(v, 0) and Q(m) = int_0^m min(v, 0) are piecewise linear
    in m, so ``np.interp`` on the edge tables is exact.
    """

    def __init__(self, v):
        v = np.asarray(v, dtype=float)
        n = v.size
        self.edges = np.linspace(0.0, 1.0, n + 1)
        self.pos = np.concatenate(([0.0], np.cumsum(np.maximum(v, 0.0)))) / n
        self.neg = np.concatenate(([0.0], np.cumsum(np.minimum(v, 0.0)))) / n
        self.speed = float(np.max(np.abs(v))) if n else 0.0

    def P(self, m):
        return np.interp(m, self.edges, self.pos)

    def Q(self, m):
        return np.interp(m, self.edges, self.neg)

    def A(self, m):
        return self.P(m) + self.Q(m)


def numerical_flux(M_left, M_right, v) -> np.ndarray:
    """Engquist-Osher flux A(0) + int_0^{M_left} max(v,0) + int_0^{M_right} min(v,0)."""
    table = v if isinstance(v, FluxTable) else FluxTable(v)
    return table.P(np.asarray(M_left, dtype=float)) + table.Q(np.asarray(M_right, dtype=float))


def godunov_flux(M_left: float, M_right: float, A: Callable, n_sample: int = 20001) -> float:
    """Godunov flux by brute-force optimisation of A over [M_l, M_r]; a test oracle only."""
    lo, hi = min(M_left, M_right), max(M_left, M_right)
    m = np.linspace(lo, hi, n_sample)
    vals = A(m)
    return float(vals.min() if M_left <= M_right else vals.max())


def interface_fluxes(values: np.ndarray, table: FluxTable) -> np.ndarray:
    """F_{i-1/2} for i = 0..n_x, ghost states 0 (left) and 1 (right)."""
    padded = np.concatenate(([0.0], values, [1.0]))
    return table.P(padded[:-1]) + table.Q(padded[1:])


def step_conservation(grid: SpatialGrid, v, dt: float) -> SpatialGrid:
    """One explicit conservative update; raises on a CFL violation."""
    table = v if isinstance(v, FluxTable) else FluxTable(v)
    if dt <= 0:
        raise ConfigurationError("dt must be positive")
    if dt * table.speed / grid.dx > CFL_MAX * (1 + 1e-12):
        raise SolverGuardError(f"CFL violated: dt*max|v|/dx = {dt * table.speed / grid.dx:.4g} > {CFL_MAX}")
    F = interface_fluxes(grid.values, table)
    new = grid.values - (dt / grid.dx) * np.diff(F)
    return SpatialGrid(grid.x_lo, grid.x_hi, new, grid.t + dt)


def cfl_dt(dx: float, speed: float, cfl: float = CFL_MAX) -> float:
    return cfl * dx / speed if speed > 0 else np.inf


# ---------------------------------------------------------------------------
# diagnostics


@dataclass(frozen=True)
class MonitorReport:
    admissible: bool
    location: Optional[float] = None
    steepness: Optional[float] = None

    def as_dict(self) -> dict:
        return {"admissible": self.admissible, "location": self.location, "steepness": self.steepness}


def admissibility_monitor(grid: SpatialGrid, initial_max_slope: float, factor: float = 50.0) -> MonitorReport:
    """Flag steepening: discrete slope above ``factor`` times the initial maximum slope.

    A heuristic signal that the CDF may be developing an atom, in which case the
    (rho, u) reading of the run is mass-distributional only.
    """
    slopes = grid.density()
    k = int(np.argmax(slopes))
    peak = float(slopes[k])
    if peak > factor * initial_max_slope:
        loc = float(0.5 * (grid.centers[k] + grid.centers[k + 1]))
        return MonitorReport(False, loc, peak / initial_max_slope)
    return MonitorReport(True)


def smooth_bump(y):
    """C-infinity bump supported on (-1, 1), peak 1 at 0."""
    y = np.asarray(y, dtype=float)
    inside = np.abs(y) < 1
    out = np.zeros_like(y)
    out[inside] = np.exp(1.0 - 1.0 / (1.0 - y[inside] ** 2))
    return out


def smooth_bump_derivative(y):
    y = np.asarray(y, dtype=float)
    inside = np.abs(y) < 1
    out = np.zeros_like(y)
    yi = y[inside]
    out[inside] = np.exp(1.0 - 1.0 / (1.0 - yi**2)) * (-2.0 * yi / (1.0 - yi**2) ** 2)
    return out


@dataclass
class BumpTestFunction:
    """eta(x, t) = b((x - xc)/wx) b((t - tc)/wt) with the smooth bump b."""

    xc: float
    wx: float
    tc: float
    wt: float

    def parts(self, x, t):
        bx, dbx = smooth_bump((x - self.xc) / self.wx), smooth_bump_derivative((x - self.xc) / self.wx) / self.wx
        bt, dbt = smooth_bump((t - self.tc) / self.wt), smooth_bump_derivative((t - self.tc) / self.wt) / self.wt
        return bx, dbx, bt, dbt


def entropy_residual(times: np.ndarray, snapshots: np.ndarray, x: np.ndarray, flux_tables: Sequence[FluxTable],
                     levels: Sequence[float] = tuple(np.round(np.arange(1, 10) * 0.1, 10)),
                     test_function: Optional[BumpTestFunction] = None) -> dict:
    """Weak-form Kruzhkov residuals, one per level k.

    R_k = -int int (|M - k| eta_t + sgn(M - k)(A(M) - A(k)) eta_x) dx dt, which
    is <= 0 for an entropy solution and a nonnegative test function eta.
    Snapshots are at uniform times; the time integral uses the trapezoid rule.
    Returns ``{"levels", "residuals", "max_positive"}``.
    """
    times = np.asarray(times, dtype=float)
    snaps = np.asarray(snapshots, dtype=float)
    x = np.asarray(x, dtype=float)
    dx = x[1] - x[0]
    if test_function is None:
        span = x[-1] - x[0]
        test_function = BumpTestFunction(0.5 * (x[0] + x[-1]), 0.5 * span, 0.5 * (times[0] + times[-1]),
                                         0.5 * (times[-1] - times[0]))
    bx, dbx, bt, dbt = test_function.parts(x, times)
    wts = np.full(times.size, times[1] - times[0])
    wts[[0, -1]] *= 0.5
    res = []
    for k in levels:
        total = 0.0
        for n in range(times.size):
            if bt[n] == 0.0 and dbt[n] == 0.0:
                continue
            M = snaps[n]
            A = flux_tables[n].A
            ent = np.abs(M - k)
            q = np.sign(M - k) * (A(M) - A(k))
            integrand = ent * bx * dbt[n] + q * dbx * bt[n]
            total += wts[n] * dx * integrand.sum()
        res.append(-total)
    res = np.array(res)
    return {"levels": np.asarray(levels, dtype=float), "residuals": res,
            "max_positive": float(max(res.max(), 0.0))}


# ---------------------------------------------------------------------------
# coupled run


@dataclass
class MassTrajectory:
    """Output of :func:`couple_and_run`."""

    x_lo: float
    x_hi: float
    times: np.ndarray
    snapshots: np.ndarray
    dt: float
    n_steps: int
    boundary_flux_integral: float
    flags: dict = field(default_factory=dict)
    monitor: list = field(default_factory=list)

    @property
    def n_x(self) -> int:
        return self.snapshots.shape[1]

    @property
    def dx(self) -> float:
        return (self.x_hi - self.x_lo) / self.n_x

    @property
    def centers(self) -> np.ndarray:
        return self.x_lo + (np.arange(self.n_x) + 0.5) * self.dx

    def grid(self, k: int) -> SpatialGrid:
        return SpatialGrid(self.x_lo, self.x_hi, self.snapshots[k], float(self.times[k]))


def auto_domain(M0: MassProfile, v_min: float, v_max: float, t_final: float) -> tuple:
    """Initial support moved by the extreme speeds over ``t_final``, plus a 10% margin.

    Mass can only travel left at speed -v_min and right at speed v_max, since
    the velocity equation keeps v within its initial range.
    """
    lo, hi = M0.support
    lo -= max(0.0, -v_min) * t_final
    hi += max(0.0, v_max) * t_final
    pad = DOMAIN_MARGIN * max(hi - lo, 1e-12)
    return lo - pad, hi + pad


def couple_and_run(v_of_t: Callable[[float], np.ndarray], M0: MassProfile, t_final: float,
                   output_times: Sequence[float], n_x: int, *, speed: Optional[float] = None,
                   domain: Optional[tuple] = None, cfl: float = CFL_MAX, dt: Optional[float] = None,
                   monitor_factor: float = 50.0, record_all: bool = False) -> MassTrajectory:
    """Drive the conservation law with a precomputed velocity history.

    ``v_of_t`` returns cell values of v at any time (for example a
    :class:`~topoflock.v_solver.VelocityTrajectory`).  ``speed`` bounds
    max|v| over the run; by default it is max|v(0)|, valid because the velocity
    equation obeys a maximum principle.  With ``record_all`` every step is kept.
    """
    if cfl > CFL_MAX:
        raise SolverGuardError(f"requested CFL {cfl} exceeds {CFL_MAX}")
    v_init = np.asarray(v_of_t(0.0), dtype=float)
    if speed is None:
        speed = float(np.max(np.abs(v_init)))
    if domain is None:
        domain = auto_domain(M0, float(v_init.min()), float(v_init.max()), t_final)
    grid = SpatialGrid.from_profile(M0, domain[0], domain[1], n_x)
    if dt is None:
        dt = cfl_dt(grid.dx, speed, cfl) if speed > 0 else t_final
    n_steps = max(1, int(np.ceil(t_final / dt - 1e-12)))
    dt = t_final / n_steps
    out_times = sorted(float(t) for t in output_times)
    if out_times and (out_times[0] < 0 or out_times[-1] > t_final + 1e-12):
        raise ConfigurationError("output_times must lie in [0, t_final]")
    step_of = {t: int(round(t / dt)) for t in out_times}
    wanted = set(step_of.values())
    init_slope = float(np.max(grid.density())) or 1.0
    flags = {"monotonicity_violations": 0, "range_violations": 0, "admissible": True,
             "first_atom_suspected": None}
    monitor = []
    times, snaps = [], []
    if record_all or 0 in wanted:
        times.append(0.0)
        snaps.append(grid.values.copy())
    flux_total = 0.0
    for n in range(n_steps):
        table = FluxTable(v_of_t(n * dt))
        F = interface_fluxes(grid.values, table)
        flux_total += dt * (F[-1] - F[0])
        grid = step_conservation(grid, table, dt)
        vals = grid.values
        if np.any(np.diff(vals) < -MONOTONE_TOL):
            flags["monotonicity_violations"] += 1
        if vals.min() < -MONOTONE_TOL or vals.max() > 1 + MONOTONE_TOL:
            flags["range_violations"] += 1
        rep = admissibility_monitor(grid, init_slope, monitor_factor)
        if not rep.admissible and flags["admissible"]:
            flags["admissible"] = False
            flags["first_atom_suspected"] = {"t": grid.t, **rep.as_dict()}
            logger.warning("steepening detected at t=%.4g x=%.4g; output is mass-distributional only",
                           grid.t, rep.location)
        if record_all or (n + 1) in wanted:
            times.append((n + 1) * dt)
            snaps.append(vals.copy())
            monitor.append(rep.as_dict())
    return MassTrajectory(domain[0], domain[1], np.array(times), np.array(snaps), dt, n_steps,
                          flux_total, flags, monitor)
