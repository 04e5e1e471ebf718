"""Particle (flow-map) pipeline for regular topological protocols.

Particles sit at the quantiles alpha_k = M0^{-1}((k - 1/2)/P) with equal mass
w = 1/P, so the topological distance between labels j and k is |j - k|/P
for all time.  The reduced first-order system

    dX_k/dt = psi0_k - w sum_j Phi(|j - k|/P, X_k - X_j)

is integrated with RK4.  When Phi(d, z) = phi(d) z the right side is linear
in X and is applied as a dense matrix.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable, Optional, Sequence

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from . import kernels as _k
from .exceptions import ConfigurationError, UnsupportedKernelError
from .mass_coords import MassProfile, quantile, topo_distance
from .v_solver import alignment_generator

BLOWUP_GAP_FRACTION = 1e-8
CHUNK = 512


@dataclass(frozen=True, eq=False)
class LagrangianState:
    """Particle labels, positions and velocities at time ``t``."""

    labels: np.ndarray
    positions: np.ndarray
    velocities: np.ndarray
    psi0: np.ndarray
    t: float = 0.0

    @property
    def n_particles(self) -> int:
        return self.labels.size

    @property
    def weight(self) -> float:
        return 1.0 / self.labels.size

    @property
    def mass_levels(self) -> np.ndarray:
        return (np.arange(self.n_particles) + 0.5) / self.n_particles

    def gaps(self) -> np.ndarray:
        return np.diff(self.positions)


@dataclass(frozen=True)
class ThresholdVerdict:
    satisfied: bool
    alpha_index: Optional[int] = None
    beta_index: Optional[int] = None
    gap: float = 0.0

    def as_dict(self) -> dict:
        return {"satisfied": self.satisfied, "alpha_index": self.alpha_index,
                "beta_index": self.beta_index, "gap": self.gap}


def _check_flow_kernel(kernel: _k.Kernel):
    if not kernel.is_bounded:
        raise UnsupportedKernelError("the Lagrangian pipeline needs a bounded protocol")


def _linear_in_z(kernel: _k.Kernel) -> bool:
    return kernel.z_independent


def _pair_sum_Phi(kernel: _k.Kernel, levels: np.ndarray, left: np.ndarray, right: np.ndarray) -> np.ndarray:
    """sum_j Phi(|l_k - l_j|, left_k - right_j) over all j, row-chunked."""
    P = levels.size
    out = np.empty(P)
    for a in range(0, P, CHUNK):
        b = min(a + CHUNK, P)
        d = np.abs(levels[a:b, None] - levels[None, :])
        z = left[a:b, None] - right[None, :]
        out[a:b] = np.asarray(_k.eval_Phi(kernel, np.clip(d, 0.0, 1.0), z)).sum(axis=1)
    return out


def compute_psi0(rho0: MassProfile, u0: Callable, kernel: _k.Kernel, n_particles: int) -> tuple:
    """Labels alpha_k and psi0(alpha_k) = u0(alpha_k) + w sum_j Phi(d(alpha_k, alpha_j), alpha_k - alpha_j)."""
    _check_flow_kernel(kernel)
    if n_particles < 1:
        raise ConfigurationError("need at least one particle")
    levels = (np.arange(n_particles) + 0.5) / n_particles
    labels = np.asarray(quantile(rho0, levels), dtype=float)
    # topological distances are measured on rho0 itself
    d_levels = np.asarray(topo_distance(rho0, -np.inf, labels))
    psi = np.asarray(u0(labels), dtype=float) + _pair_sum_Phi(kernel, d_levels, labels, labels) / n_particles
    return labels, psi


def threshold_check(psi0) -> ThresholdVerdict:
    """Is psi0 nondecreasing?  Otherwise report the pair with the largest drop."""
    psi = np.asarray(psi0, dtype=float)
    if psi.size < 2:
        return ThresholdVerdict(True)
    run_max = np.maximum.accumulate(psi)
    drop = run_max - psi
    j = int(np.argmax(drop))
    if drop[j] <= 0.0:
        return ThresholdVerdict(True)
    i = int(np.argmax(psi[: j + 1]))
    return ThresholdVerdict(False, i, j, float(drop[j]))


def mass_threshold(v0, kernel: _k.Kernel) -> tuple:
    """a(m) = v0(m) + int_0^1 phi(|m - m'|)(m - m') dm' on the mass grid, with its verdict."""
    v0 = np.asarray(v0, dtype=float)
    n = v0.size
    m = (np.arange(n) + 0.5) / n
    G = alignment_generator(kernel, n)
    # (G m)_i = (1/N) sum_j phi_ij (m_i - m_j)
    a = v0 + G @ m
    return a, threshold_check(a)


class LagrangianFlow(BaseEstimator):
    """RK4 integrator of the reduced particle system.

    Parameters
    ----------
    kernel : Kernel
        Bounded protocol (pure or general).
    n_particles : int
    dt : float
    radial : bool
        Freeze the mass-distance argument at 0 (Euclidean part only).
    """

    def __init__(self, kernel=None, n_particles=400, dt=1e-3, radial=False):
        self.kernel = kernel
        self.n_particles = n_particles
        self.dt = dt
        self.radial = radial

    def _effective_kernel(self) -> _k.Kernel:
        if self.kernel is None:
            raise ConfigurationError("kernel is required")
        return _k.radial(self.kernel) if self.radial else self.kernel

    def fit(self, rho0: MassProfile, u0: Callable):
        kernel = self._effective_kernel()
        _check_flow_kernel(kernel)
        if self.dt <= 0:
            raise ConfigurationError("dt must be positive")
        P = int(self.n_particles)
        labels, psi = compute_psi0(rho0, u0, kernel, P)
        self.kernel_ = kernel
        self.labels_ = labels
        self.psi0_ = psi
        self.levels_ = (np.arange(P) + 0.5) / P
        self.sup_norm_ = _k.sup_norm(kernel)
        self.rho0_ = rho0
        if _linear_in_z(kernel):
            if kernel.is_pure:
                self.linear_operator_ = alignment_generator(kernel, P)
            else:
                dist = np.abs(self.levels_[:, None] - self.levels_[None, :])
                K = np.asarray(_k.eval_phi(kernel, np.clip(dist, 0, 1), 0.0)) / P
                np.fill_diagonal(K, 0.0)
                self.linear_operator_ = np.diag(K.sum(axis=1)) - K
        else:
            self.linear_operator_ = None
        self.initial_state_ = LagrangianState(labels, labels.copy(), self.rhs(labels), psi, 0.0)
        return self

    def rhs(self, X: np.ndarray) -> np.ndarray:
        """dX/dt = psi0 - w sum_j Phi(d_kj, X_k - X_j)."""
        if getattr(self, "linear_operator_", None) is not None:
            return self.psi0_ - self.linear_operator_ @ X
        return self.psi0_ - _pair_sum_Phi(self.kernel_, self.levels_, X, X) / X.size

    def step(self, state: LagrangianState, dt: Optional[float] = None) -> LagrangianState:
        check_is_fitted(self, "psi0_")
        dt = self.dt if dt is None else dt
        X = state.positions
        k1 = self.rhs(X)
        k2 = self.rhs(X + 0.5 * dt * k1)
        k3 = self.rhs(X + 0.5 * dt * k2)
        k4 = self.rhs(X + dt * k3)
        Xn = X + (dt / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
        return replace(state, positions=Xn, velocities=self.rhs(Xn), t=state.t + dt)

    def run(self, t_final: float, output_times: Sequence[float] = (), collapse_fraction: float = 0.1):
        """Integrate until ``t_final`` or loss of ordering, whichever comes first."""
        check_is_fitted(self, "psi0_")
        n_steps = int(round(t_final / self.dt))
        if abs(n_steps * self.dt - t_final) > 1e-9 * max(1.0, t_final):
            raise ConfigurationError("t_final must be a multiple of dt")
        wanted = {int(round(t / self.dt)): float(t) for t in output_times}
        state = self.initial_state_
        gaps0 = state.gaps()
        snaps = [state] if 0 in wanted else []
        min_ratio = [1.0]
        times = [0.0]
        blowup = None
        collapse_time = None
        for n in range(n_steps):
            new = self.step(state)
            ratio = new.gaps() / gaps0 if gaps0.size else np.ones(0)
            r = float(ratio.min()) if ratio.size else 1.0
            if collapse_time is None and r < collapse_fraction:
                # linear interpolation of the minimum ratio inside the step
                r0 = min_ratio[-1]
                frac = (r0 - collapse_fraction) / (r0 - r) if r0 != r else 1.0
                collapse_time = state.t + frac * self.dt
            times.append(new.t)
            min_ratio.append(r)
            if ratio.size and (np.any(ratio <= 0.0) or np.any(ratio < BLOWUP_GAP_FRACTION)):
                k = int(np.argmin(ratio))
                blowup = {"t": new.t, "pair": [k, k + 1], "min_gap_ratio": r}
                break
            state = new
            if (n + 1) in wanted:
                snaps.append(state)
        return LagrangianRun(self, snaps, np.array(times), np.array(min_ratio), blowup, collapse_time)


@dataclass
class LagrangianRun:
    flow: LagrangianFlow
    snapshots: list
    times: np.ndarray
    min_gap_ratio: np.ndarray
    blowup: Optional[dict] = None
    collapse_time: Optional[float] = None
    flags: dict = field(default_factory=dict)

    @property
    def classical(self) -> bool:
        return self.blowup is None


def integrate_flow(state: LagrangianState, kernel: _k.Kernel, dt: float) -> LagrangianState:
    """Single RK4 step of the reduced particle system for ``state``."""
    flow = LagrangianFlow(kernel, state.n_particles, dt)
    flow.kernel_ = kernel
    flow.psi0_ = state.psi0
    flow.levels_ = state.mass_levels
    flow.linear_operator_ = None
    if _linear_in_z(kernel) and kernel.is_pure:
        flow.linear_operator_ = alignment_generator(kernel, state.n_particles)
    return flow.step(state, dt)


def momentum_rhs(kernel: _k.Kernel, levels: np.ndarray, X: np.ndarray, V: np.ndarray) -> np.ndarray:
    """dV_k/dt = -w sum_j phi(d_kj, X_k - X_j)(V_k - V_j): the unreduced momentum equation."""
    P = X.size
    out = np.empty(P)
    for a in range(0, P, CHUNK):
        b = min(a + CHUNK, P)
        d = np.clip(np.abs(levels[a:b, None] - levels[None, :]), 0.0, 1.0)
        z = X[a:b, None] - X[None, :]
        phi = np.asarray(_k.eval_phi(kernel, d, z))
        out[a:b] = -(phi * (V[a:b, None] - V[None, :])).sum(axis=1) / P
    return out


def integrate_momentum(kernel: _k.Kernel, levels, X0, V0, dt: float, n_steps: int) -> tuple:
    """RK4 on the second-order (X, V) system; an independent check of psi conservation."""
    levels = np.asarray(levels, dtype=float)
    X, V = np.array(X0, dtype=float), np.array(V0, dtype=float)

    def f(X, V):
        return V, momentum_rhs(kernel, levels, X, V)

    for _ in range(n_steps):
        a1, b1 = f(X, V)
        a2, b2 = f(X + 0.5 * dt * a1, V + 0.5 * dt * b1)
        a3, b3 = f(X + 0.5 * dt * a2, V + 0.5 * dt * b2)
        a4, b4 = f(X + dt * a3, V + dt * b3)
        X = X + dt / 6.0 * (a1 + 2 * a2 + 2 * a3 + a4)
        V = V + dt / 6.0 * (b1 + 2 * b2 + 2 * b3 + b4)
    return X, V


def psi_values(kernel: _k.Kernel, levels, X, V) -> np.ndarray:
    """psi_k = V_k + w sum_j Phi(d_kj, X_k - X_j); conserved along particle paths."""
    X = np.asarray(X, dtype=float)
    return np.asarray(V, dtype=float) + _pair_sum_Phi(kernel, np.asarray(levels), X, X) / X.size


def flow_lower_bound(psi_quotient, phi_sup: float, t):
    """Gronwall bound on (X(beta,t) - X(alpha,t))/(beta - alpha).

    ``psi_quotient`` is (psi0(beta) - psi0(alpha))/(beta - alpha).
    """
    t = np.asarray(t, dtype=float)
    q = np.asarray(psi_quotient, dtype=float)
    if phi_sup == 0:
        return 1.0 + q * t
    decay = np.exp(-phi_sup * t)
    return decay + q * (1.0 - decay) / phi_sup


def adjacent_lower_bounds(flow: LagrangianFlow, t: float) -> np.ndarray:
    check_is_fitted(flow, "psi0_")
    q = np.diff(flow.psi0_) / np.diff(flow.labels_)
    return flow_lower_bound(q, flow.sup_norm_, t)


def difference_quotients(flow: LagrangianFlow, state: LagrangianState) -> np.ndarray:
    return np.diff(state.positions) / np.diff(flow.labels_)


def radial_blowup_bound(psi0, labels, alpha: Optional[float] = None, beta: Optional[float] = None) -> dict:
    """Latest classical time in radial mode: (beta - alpha)/(psi0(alpha) - psi0(beta)).

    Without an explicit pair the steepest adjacent decrease is used; any secant
    slope is an average of adjacent ones, so this minimises over all pairs.
    The reciprocal quotient is reported alongside as ``printed_formula``.
    """
    psi0 = np.asarray(psi0, dtype=float)
    labels = np.asarray(labels, dtype=float)
    if alpha is not None and beta is not None:
        pa, pb = np.interp([alpha, beta], labels, psi0)
        drop, width = pa - pb, beta - alpha
        pair = [float(alpha), float(beta)]
    else:
        slopes = np.diff(psi0) / np.diff(labels)
        k = int(np.argmin(slopes))
        drop, width = psi0[k] - psi0[k + 1], labels[k + 1] - labels[k]
        pair = [float(labels[k]), float(labels[k + 1])]
    if drop <= 0:
        return {"applicable": False, "pair": pair}
    return {"applicable": True, "pair": pair, "time": float(width / drop),
            "printed_formula": float(drop / width)}


def eulerian_reconstruct(state: LagrangianState, x=None) -> dict:
    """rho = w/(X_{k+1} - X_k) between neighbours; u by linear interpolation of V."""
    X = state.positions
    gaps = np.diff(X)
    if np.any(gaps <= 0):
        raise ConfigurationError("particle ordering lost; no Eulerian reconstruction")
    rho = state.weight / gaps
    out = {"edges": X.copy(), "rho": rho}
    if x is not None:
        out["x"] = np.asarray(x, dtype=float)
        out["u"] = np.interp(out["x"], X, state.velocities)
    return out


def particle_profile(state: LagrangianState) -> MassProfile:
    """Piecewise-linear CDF through (X_k, (k - 1/2)/P), with half-cells at both ends."""
    X = state.positions
    P = X.size
    levels = (np.arange(P) + 0.5) / P
    if P == 1:
        return MassProfile(np.array([X[0] - 0.5, X[0] + 0.5]), np.array([0.0, 1.0]))
    left = X[0] - 0.5 * (X[1] - X[0])
    right = X[-1] + 0.5 * (X[-1] - X[-2])
    return MassProfile(np.concatenate(([left], X, [right])), np.concatenate(([0.0], levels, [1.0])))


def e_q_diagnostics(state: LagrangianState, kernel: _k.Kernel, vacuum_tol: float = 1e-12) -> dict:
    """e = d psi/dx across neighbours and q = e/rho, masked where rho vanishes."""
    psi = psi_values(kernel, state.mass_levels, state.positions, state.velocities)
    gaps = np.diff(state.positions)
    rho = state.weight / gaps
    e = np.diff(psi) / gaps
    q = np.where(rho > vacuum_tol, e / np.where(rho > vacuum_tol, rho, 1.0), np.nan)
    return {"psi": psi, "e": e, "q": q, "rho": rho}
