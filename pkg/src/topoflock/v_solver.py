"""The decoupled velocity equation dv/dt = -Lv on the mass interval (0, 1).

Bounded protocols are integrated with classical RK4 on the midpoint-rule
generator.  The power-law protocol is handled by a dense eigendecomposition of
a discrete regional fractional Laplacian, which gives the semigroup exactly.

Both paths work with cell values on the uniform grid m_i = (i + 1/2)/N and
the weighted inner product (v, w) = (1/N) sum_i v_i w_i.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import eigh, toeplitz
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_array, check_is_fitted

from . import kernels as _k
from .exceptions import ConfigurationError, SolverGuardError, UnsupportedKernelError
from .mass_coords import mass_midpoints

MAX_SPECTRAL_CELLS = 2048
MAX_PRINCIPLE_TOL = 1e-10


@dataclass(frozen=True, eq=False)
class VelocityGrid:
    """Cell values of v on the uniform mass grid at time ``t``."""

    values: np.ndarray
    t: float = 0.0

    def __post_init__(self):
        vals = np.array(self.values, dtype=float)
        if vals.ndim != 1 or vals.size < 1:
            raise ConfigurationError("velocity grid must be a non-empty 1-D array")
        if not np.all(np.isfinite(vals)):
            raise SolverGuardError("velocity grid contains non-finite values")
        vals.setflags(write=False)
        object.__setattr__(self, "values", vals)

    @property
    def n_cells(self) -> int:
        return self.values.size

    @property
    def midpoints(self) -> np.ndarray:
        return mass_midpoints(self.n_cells)

    @property
    def mean(self) -> float:
        return float(np.mean(self.values))


@dataclass(frozen=True, eq=False)
class VelocityTrajectory:
    """Stored v snapshots; ``at(t)`` interpolates linearly in time."""

    times: np.ndarray
    values: np.ndarray

    def at(self, t: float) -> np.ndarray:
        times = self.times
        if t <= times[0]:
            return self.values[0]
        if t >= times[-1]:
            return self.values[-1]
        k = int(np.searchsorted(times, t, side="right")) - 1
        t0, t1 = times[k], times[k + 1]
        if t == t0:
            return self.values[k]
        w = (t - t0) / (t1 - t0)
        return (1.0 - w) * self.values[k] + w * self.values[k + 1]

    __call__ = at

    def sample(self, times) -> np.ndarray:
        return np.array([self.at(float(t)) for t in times])

    @property
    def n_cells(self) -> int:
        return self.values.shape[1]


def _check_vector(v, n=None) -> np.ndarray:
    if isinstance(v, VelocityGrid):
        v = v.values
    arr = check_array(np.asarray(v, dtype=float), ensure_2d=False, dtype=float)
    if arr.ndim != 1:
        raise ConfigurationError("expected a 1-D vector of cell values")
    if n is not None and arr.size != n:
        raise ConfigurationError(f"expected {n} cell values, got {arr.size}")
    return arr


def energy_and_mean(v) -> tuple:
    """(||v||^2, mean v) with the cell-average quadrature."""
    vals = _check_vector(v)
    return float(np.mean(vals**2)), float(np.mean(vals))


# ---------------------------------------------------------------------------
# bounded protocols


def alignment_generator(kernel: _k.Kernel, n_cells: int) -> np.ndarray:
    """Symmetric generator G with (Gv)_i = (1/N) sum_j phi(|m_i - m_j|)(v_i - v_j)."""
    if not kernel.is_pure:
        raise UnsupportedKernelError("the mass-coordinate velocity equation needs a pure protocol")
    if not kernel.is_bounded:
        raise UnsupportedKernelError("singular protocol: use RegionalFractionalLaplacian")
    # |m_i - m_j| = |i - j| / N on the uniform grid
    dist = np.arange(n_cells) / n_cells
    row = np.zeros(n_cells)
    row[1:] = np.asarray(_k.eval_phi(kernel, dist[1:]), dtype=float) / n_cells
    K = toeplitz(row)
    return np.diag(K.sum(axis=1)) - K


def apply_L_bounded(kernel: _k.Kernel, v) -> np.ndarray:
    vals = _check_vector(v)
    return alignment_generator(kernel, vals.size) @ vals


def dirichlet_form_matrix(G: np.ndarray, v, w) -> float:
    """E(v, w) = (Gv, w) in the weighted inner product."""
    v = np.asarray(v, dtype=float)
    w = np.asarray(w, dtype=float)
    return float(v @ (G @ w)) / v.size


def rk4_step(G: np.ndarray, v: np.ndarray, dt: float) -> np.ndarray:
    k1 = -(G @ v)
    k2 = -(G @ (v + 0.5 * dt * k1))
    k3 = -(G @ (v + 0.5 * dt * k2))
    k4 = -(G @ (v + dt * k3))
    return v + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def _check_dt(kernel: _k.Kernel, dt: float) -> float:
    if dt <= 0:
        raise ConfigurationError("time step must be positive")
    sup = _k.sup_norm(kernel)
    if dt * sup > 1.0 + 1e-15:
        raise SolverGuardError(f"stability guard violated: dt*||phi||_inf = {dt * sup:.3g} > 1")
    return sup


def step_bounded(kernel: _k.Kernel, v, dt: float) -> VelocityGrid:
    """One RK4 step of dv/dt = -Lv."""
    _check_dt(kernel, dt)
    vals = _check_vector(v)
    t = v.t if isinstance(v, VelocityGrid) else 0.0
    G = alignment_generator(kernel, vals.size)
    return VelocityGrid(rk4_step(G, vals, dt), t + dt)


class BoundedAlignmentSolver(BaseEstimator):
    """RK4 integrator for the velocity equation with a bounded pure protocol.

    Parameters
    ----------
    kernel : Kernel
        Bounded, purely topological protocol.
    n_cells : int
        Number of uniform mass cells.
    dt : float
        Time step; must satisfy dt * ||phi||_inf <= 1.
    """

    def __init__(self, kernel=None, n_cells=256, dt=1e-3):
        self.kernel = kernel
        self.n_cells = n_cells
        self.dt = dt

    def fit(self, X=None, y=None):
        if self.kernel is None:
            raise ConfigurationError("kernel is required")
        if int(self.n_cells) < 1:
            raise ConfigurationError("n_cells must be positive")
        self.sup_norm_ = _check_dt(self.kernel, self.dt)
        self.generator_ = alignment_generator(self.kernel, int(self.n_cells))
        return self

    def tendency(self, v) -> np.ndarray:
        check_is_fitted(self, "generator_")
        return -(self.generator_ @ _check_vector(v, self.n_cells))

    def dirichlet_form(self, v, w=None) -> float:
        check_is_fitted(self, "generator_")
        v = _check_vector(v, self.n_cells)
        return dirichlet_form_matrix(self.generator_, v, v if w is None else _check_vector(w, self.n_cells))

    def evolve(self, v0, t_final: float) -> VelocityTrajectory:
        """Integrate to ``t_final`` and keep every step.

        The step count is ``round(t_final/dt)``; t_final must be a multiple of dt.
        Raises :class:`SolverGuardError` if the discrete maximum principle fails.
        """
        check_is_fitted(self, "generator_")
        v = _check_vector(v0, self.n_cells).copy()
        n_steps = int(round(t_final / self.dt))
        if n_steps < 0 or abs(n_steps * self.dt - t_final) > 1e-9 * max(1.0, t_final):
            raise ConfigurationError("t_final must be a nonnegative multiple of dt")
        lo, hi = v.min(), v.max()
        tol = MAX_PRINCIPLE_TOL * max(1.0, np.abs(v).max())
        out = np.empty((n_steps + 1, v.size))
        out[0] = v
        G = self.generator_
        for n in range(n_steps):
            v = rk4_step(G, v, self.dt)
            if v.min() < lo - tol or v.max() > hi + tol:
                raise SolverGuardError(f"maximum principle violated at step {n + 1}")
            out[n + 1] = v
        times = self.dt * np.arange(n_steps + 1)
        return VelocityTrajectory(times, out)


def energy_identity_residual(traj: VelocityTrajectory, G: np.ndarray) -> np.ndarray:
    """Discrete residual of d/dt ||v||^2 + 2 E(v, v) = 0 on each step.

    Centred difference of the energy against the trapezoid average of 2E,
    so the residual is O(dt^2) for a consistent integrator.
    """
    vals = traj.values
    dt = np.diff(traj.times)
    energy = np.mean(vals**2, axis=1)
    form = np.einsum("ij,ij->i", vals, vals @ G) / vals.shape[1]
    return np.diff(energy) / dt + (form[:-1] + form[1:])


# ---------------------------------------------------------------------------
# singular power-law protocol


def _double_antiderivative(r, s):
    """F with F'' = r^(-1-2s), F(0) = 0 when s < 1/2."""
    r = np.asarray(r, dtype=float)
    if s == 0.5:
        return np.where(r > 0, -np.log(np.where(r > 0, r, 1.0)), 0.0)
    return r ** (1.0 - 2.0 * s) / (2.0 * s * (2.0 * s - 1.0))


def cell_pair_weight(i: int, j: int, h: float, s: float) -> float:
    """Exact int_{cell i} int_{cell j} |m - m'|^(-1-2s) dm dm' for i != j.

    Finite for adjacent cells only when s < 1/2.
    """
    k = abs(i - j)
    if k == 0:
        raise ConfigurationError("pair weight is defined for distinct cells")
    if k == 1 and s >= 0.5:
        return float("inf")
    F = lambda r: _double_antiderivative(r, s)  # noqa: E731
    return float(F((k + 1) * h) - 2.0 * F(k * h) + F((k - 1) * h))


def _galerkin_row(n: int, s: float) -> np.ndarray:
    h = 1.0 / n
    k = np.arange(n, dtype=float)
    F = lambda r: _double_antiderivative(r, s)  # noqa: E731
    w = np.zeros(n)
    w[1:] = F((k[1:] + 1) * h) - 2.0 * F(k[1:] * h) + F((k[1:] - 1) * h)
    return _k.fractional_constant(s) * w / h


def _collocation_row(n: int, s: float) -> np.ndarray:
    h = 1.0 / n
    k = np.arange(1, n, dtype=float)
    cs = _k.fractional_constant(s)
    row = np.zeros(n)
    row[1:] = cs / (2.0 * s) * (((k - 0.5) * h) ** (-2.0 * s) - ((k + 0.5) * h) ** (-2.0 * s))
    # self-cell principal value, replaced by its second-difference Taylor term
    row[1] += cs * (0.5 * h) ** (2.0 - 2.0 * s) / ((2.0 - 2.0 * s) * h * h)
    return row


def fractional_generator(s: float, n_cells: int, scheme: str = "auto") -> np.ndarray:
    """Symmetric, row-sum-zero generator of the discrete regional fractional Laplacian."""
    if scheme == "auto":
        scheme = "galerkin" if s < 0.5 else "collocation"
    if scheme == "galerkin":
        if s >= 0.5:
            raise ConfigurationError("Galerkin pair weights diverge for adjacent cells when s >= 1/2")
        row = _galerkin_row(n_cells, s)
    elif scheme == "collocation":
        row = _collocation_row(n_cells, s)
    else:
        raise ConfigurationError(f"unknown scheme {scheme!r}")
    K = toeplitz(row)
    return np.diag(K.sum(axis=1)) - K


class RegionalFractionalLaplacian(BaseEstimator):
    """Discrete regional fractional Laplacian on (0, 1) with its eigenpairs.

    Parameters
    ----------
    s : float
        Fractional order in (0, 1).
    bc : {"neumann", "dirichlet"}
        Neumann is the regional form on the whole cell space.  Dirichlet pins
        the first and last cells to zero and solves on the interior block.
    n_cells : int
        Grid size, at most 2048 (dense eigensolve).
    scheme : {"auto", "galerkin", "collocation"}
        ``galerkin`` uses exact cell-pair integrals of the power law (s < 1/2
        only); ``collocation`` uses exact far-field cell integrals plus a
        second-difference near-field term.  ``auto`` picks Galerkin below 1/2.

    Attributes
    ----------
    generator_ : ndarray (N, N)
    form_matrix_ : ndarray (N, N)
        Q with E(v, w) = v^T Q w.
    eigenvalues_ : ndarray
        Ascending.
    eigenvectors_ : ndarray (N, n_modes)
        Columns orthonormal in the weighted inner product.
    """

    def __init__(self, s=0.75, bc="neumann", n_cells=256, scheme="auto"):
        self.s = s
        self.bc = bc
        self.n_cells = n_cells
        self.scheme = scheme

    def fit(self, X=None, y=None):
        s, n = float(self.s), int(self.n_cells)
        if not 0.0 < s < 1.0:
            raise ConfigurationError("s must lie in (0, 1)")
        if self.bc not in ("neumann", "dirichlet"):
            raise ConfigurationError(f"bc must be 'neumann' or 'dirichlet', got {self.bc!r}")
        if n < 2 or n > MAX_SPECTRAL_CELLS:
            raise ConfigurationError(f"n_cells must lie in [2, {MAX_SPECTRAL_CELLS}]")
        if self.bc == "dirichlet" and n < 3:
            raise ConfigurationError("Dirichlet pinning needs at least 3 cells")
        G = fractional_generator(s, n, self.scheme)
        self.generator_ = G
        self.form_matrix_ = G / n
        active = np.ones(n, dtype=bool)
        if self.bc == "dirichlet":
            active[[0, -1]] = False
        lam, U = eigh(G[np.ix_(active, active)])
        vecs = np.zeros((n, lam.size))
        vecs[active] = U * np.sqrt(n)
        self.active_ = active
        self.eigenvalues_ = lam
        self.eigenvectors_ = vecs
        return self

    @property
    def lambda1_(self) -> float:
        check_is_fitted(self, "eigenvalues_")
        return float(self.eigenvalues_[1] if self.bc == "neumann" else self.eigenvalues_[0])

    def coefficients(self, v) -> np.ndarray:
        check_is_fitted(self, "eigenvectors_")
        v = _check_vector(v, self.n_cells)
        return self.eigenvectors_.T @ v / self.n_cells

    def evolve(self, v0, t: float) -> np.ndarray:
        """v(t) = sum_i exp(-lambda_i t) (v0, e_i) e_i."""
        if t < 0:
            raise ConfigurationError("t must be nonnegative")
        c = self.coefficients(v0)
        return self.eigenvectors_ @ (np.exp(-self.eigenvalues_ * t) * c)

    def trajectory(self, v0, times) -> VelocityTrajectory:
        c = self.coefficients(v0)
        times = np.asarray(times, dtype=float)
        vals = (np.exp(-np.outer(times, self.eigenvalues_)) * c) @ self.eigenvectors_.T
        return VelocityTrajectory(times, vals)

    def apply(self, v) -> np.ndarray:
        check_is_fitted(self, "generator_")
        v = _check_vector(v, self.n_cells)
        out = self.generator_ @ np.where(self.active_, v, 0.0)
        return np.where(self.active_, out, 0.0)

    def dirichlet_form(self, v, w=None) -> float:
        check_is_fitted(self, "form_matrix_")
        v = _check_vector(v, self.n_cells)
        w = v if w is None else _check_vector(w, self.n_cells)
        return float(v @ self.form_matrix_ @ w)

    def rayleigh_lambda1(self) -> float:
        """Smallest nonzero eigenvalue (Neumann): inf of E(v,v)/||v||^2 over mean-zero v."""
        if self.bc != "neumann":
            raise ConfigurationError("rayleigh_lambda1 is defined for the Neumann operator")
        return self.lambda1_

    def sobolev_norm(self, v) -> float:
        e, _ = energy_and_mean(v)
        return float(np.sqrt(e + self.dirichlet_form(v)))


def assemble_form(s: float, bc: str, n_cells: int, scheme: str = "auto") -> RegionalFractionalLaplacian:
    return RegionalFractionalLaplacian(s=s, bc=bc, n_cells=n_cells, scheme=scheme).fit()


def evolve_spectral(op: RegionalFractionalLaplacian, v0, t: float) -> VelocityGrid:
    t0 = v0.t if isinstance(v0, VelocityGrid) else 0.0
    return VelocityGrid(op.evolve(v0, t), t0 + t)


def dirichlet_form(op, v, w=None) -> float:
    return op.dirichlet_form(v, w)


def rayleigh_lambda1(op: RegionalFractionalLaplacian) -> float:
    return op.rayleigh_lambda1()


def sobolev_norm(op: RegionalFractionalLaplacian, v) -> float:
    return op.sobolev_norm(v)


def continuous_representative(values, m) -> np.ndarray:
    """Piecewise-linear interpolant of midpoint values, constant beyond the end midpoints."""
    values = np.asarray(values, dtype=float)
    return np.interp(np.asarray(m, dtype=float), mass_midpoints(values.size), values)
