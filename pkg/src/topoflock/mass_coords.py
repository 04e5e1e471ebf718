"""Cumulative distributions, generalized inverses and the mass/space dictionary.

A :class:`MassProfile` is a right-continuous CDF made of a piecewise-linear
continuous part on a node grid plus an explicit list of atoms.  Quantiles use
the left-continuous inverse ``inf{x : M(x) >= m}``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable, Sequence, Union

import numpy as np

from .exceptions import AdmissibilityError, ConfigurationError

logger = logging.getLogger(__name__)

MASS_TOL = 1e-12


@dataclass(frozen=True, eq=False)
class MassProfile:
    """CDF = piecewise-linear continuous part + atoms.

    ``values`` are the continuous-part CDF values at ``nodes`` (starting at 0);
    ``atoms`` is a tuple of ``(position, jump)`` pairs.  The total mass
    ``values[-1] + sum(jumps)`` is 1.
    """

    nodes: np.ndarray
    values: np.ndarray
    atoms: tuple = ()

    def __post_init__(self):
        nodes = np.asarray(self.nodes, dtype=float)
        values = np.asarray(self.values, dtype=float)
        if nodes.ndim != 1 or nodes.shape != values.shape or nodes.size < 2:
            raise ConfigurationError("nodes and values must be 1-D arrays of equal length >= 2")
        if np.any(np.diff(nodes) <= 0):
            raise ConfigurationError("CDF nodes must be strictly increasing")
        if np.any(np.diff(values) < -MASS_TOL):
            raise ConfigurationError("CDF values must be nondecreasing")
        if abs(values[0]) > MASS_TOL:
            raise ConfigurationError("continuous part must start at 0; put jumps in atoms")
        atoms = tuple(sorted((float(p), float(w)) for p, w in self.atoms))
        if any(w <= 0 for _, w in atoms):
            raise ConfigurationError("atom masses must be positive")
        total = values[-1] + sum(w for _, w in atoms)
        if abs(total - 1.0) > 1e-9:
            raise ConfigurationError(f"total mass must be 1, got {total!r}")
        values = np.maximum.accumulate(np.clip(values, 0.0, 1.0))
        nodes.setflags(write=False)
        values.setflags(write=False)
        object.__setattr__(self, "nodes", nodes)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "atoms", atoms)

    # constructors -----------------------------------------------------------

    @classmethod
    def uniform(cls, a: float = 0.0, b: float = 1.0) -> "MassProfile":
        return cls(np.array([a, b]), np.array([0.0, 1.0]))

    @classmethod
    def heaviside(cls, x0: float = 0.0, width: float = 1.0) -> "MassProfile":
        return cls(np.array([x0 - width, x0 + width]), np.zeros(2), atoms=((x0, 1.0),))

    @classmethod
    def from_blocks(cls, blocks: Sequence[tuple]) -> "MassProfile":
        """Piecewise-constant density from ``(left, right, mass)`` triples."""
        blocks = sorted(blocks)
        xs, ms = [blocks[0][0]], [0.0]
        for left, right, mass in blocks:
            if left < xs[-1] - 1e-15:
                raise ConfigurationError("blocks overlap")
            if left > xs[-1]:
                xs.append(left)
                ms.append(ms[-1])
            xs.append(right)
            ms.append(ms[-1] + mass)
        return cls(np.array(xs), np.array(ms))

    @classmethod
    def from_density(cls, x, rho) -> "MassProfile":
        """Integrate sampled density with the trapezoid rule and renormalise to mass 1."""
        x = np.asarray(x, dtype=float)
        rho = np.asarray(rho, dtype=float)
        if np.any(rho < 0):
            raise ConfigurationError("density samples must be nonnegative")
        cum = np.concatenate(([0.0], np.cumsum(0.5 * (rho[1:] + rho[:-1]) * np.diff(x))))
        total = cum[-1]
        if total <= 0:
            raise ConfigurationError("density has zero mass")
        if abs(total - 1.0) > 1e-12:
            logger.info("renormalising density by factor %.17g", 1.0 / total)
        return cls(x, cum / total)

    @classmethod
    def from_function(cls, cdf: Callable, x) -> "MassProfile":
        """Sample a continuous CDF on ``x``, rescaled so the sampled range spans [0, 1]."""
        x = np.asarray(x, dtype=float)
        vals = np.asarray(cdf(x), dtype=float)
        vals = (vals - vals[0]) / (vals[-1] - vals[0])
        return cls(x, vals)

    # basic queries ------------------------------------------------------------

    @property
    def has_atoms(self) -> bool:
        return len(self.atoms) > 0

    @property
    def support(self) -> tuple:
        """Smallest interval [lo, hi] carrying all the mass."""
        v = self.values
        pos = np.nonzero(np.diff(v) > 0)[0]
        lo, hi = np.inf, -np.inf
        if pos.size:
            lo, hi = self.nodes[pos[0]], self.nodes[pos[-1] + 1]
        for p, _ in self.atoms:
            lo, hi = min(lo, p), max(hi, p)
        return float(lo), float(hi)

    def _breakpoints(self):
        """Sorted breakpoints with left limits and values of M there."""
        apos = np.array([p for p, _ in self.atoms])
        xs = np.union1d(self.nodes, apos) if apos.size else self.nodes
        cont = self._continuous(xs)
        right = cont + self._atom_mass(xs, inclusive=True)
        left = cont + self._atom_mass(xs, inclusive=False)
        return xs, left, right

    def _continuous(self, x):
        x = np.asarray(x, dtype=float)
        return np.interp(x, self.nodes, self.values, left=0.0, right=self.values[-1])

    def _atom_mass(self, x, inclusive=True):
        x = np.asarray(x, dtype=float)
        out = np.zeros(x.shape)
        for p, w in self.atoms:
            out += w * ((x >= p) if inclusive else (x > p))
        return out


def cdf_eval(M: MassProfile, x):
    """Right-continuous M(x), atoms included."""
    x = np.asarray(x, dtype=float)
    out = np.clip(M._continuous(x) + M._atom_mass(x, inclusive=True), 0.0, 1.0)
    return float(out) if out.ndim == 0 else out


def cdf_left_limit(M: MassProfile, x):
    x = np.asarray(x, dtype=float)
    out = np.clip(M._continuous(x) + M._atom_mass(x, inclusive=False), 0.0, 1.0)
    return float(out) if out.ndim == 0 else out


def quantile(M: MassProfile, m):
    """Left-continuous generalized inverse inf{x : M(x) >= m} for m in (0, 1].

    Exact on linear segments; an atom's whole mass interval maps to the atom,
    and the level of a vacuum plateau maps to the plateau's left end.
    """
    m = np.asarray(m, dtype=float)
    if np.any((m <= 0.0) | (m > 1.0 + MASS_TOL)) or np.any(np.isnan(m)):
        raise ConfigurationError("quantile level must lie in (0, 1]")
    m = np.minimum(m, 1.0)
    xs, left, right = M._breakpoints()
    # a rounding shortfall in the last value must not push level 1 past the end
    right = right.copy()
    right[-1] = max(right[-1], 1.0)
    k = np.searchsorted(right, m, side="left")
    k = np.minimum(k, xs.size - 1)
    x_k = xs[k]
    km1 = np.maximum(k - 1, 0)
    x0 = xs[km1]
    m0 = right[km1]
    m1 = left[k]
    on_segment = (k > 0) & (m <= m1) & (m1 > m0)
    frac = np.where(on_segment, (m - m0) / np.where(m1 > m0, m1 - m0, 1.0), 1.0)
    out = np.where(on_segment, x0 + frac * (x_k - x0), x_k)
    return float(out) if out.ndim == 0 else out


def pushforward_uniform(M: MassProfile, n_samples: int) -> np.ndarray:
    """Quantile samples M^{-1}((i - 1/2)/n): the midpoint pushforward of Lebesgue measure."""
    if n_samples < 1:
        raise ConfigurationError("n_samples must be >= 1")
    levels = (np.arange(n_samples) + 0.5) / n_samples
    return np.asarray(quantile(M, levels))


def pushforward_histogram(M: MassProfile, n_samples: int, bins) -> tuple:
    """Histogram (bin masses, edges) of the quantile samples; a test oracle for rho."""
    samples = pushforward_uniform(M, n_samples)
    counts, edges = np.histogram(samples, bins=bins)
    return counts / n_samples, edges


def topo_distance(M: MassProfile, x, y):
    """Topological distance |M(y) - M(x)|."""
    d = np.abs(np.asarray(cdf_eval(M, y)) - np.asarray(cdf_eval(M, x)))
    return float(d) if d.ndim == 0 else d


def crosses_atom(M: MassProfile, x: float, y: float) -> bool:
    """True when an atom sits in the closed interval between x and y.

    The CDF-difference convention is ambiguous there, so callers record it.
    """
    lo, hi = min(x, y), max(x, y)
    return any(lo <= p <= hi for p, _ in M.atoms)


def velocity_to_mass(u: Callable, M: MassProfile, m) -> np.ndarray:
    """v(m) = u(M^{-1}(m)) sampled at mass levels ``m``."""
    return np.asarray(u(np.asarray(quantile(M, m))), dtype=float)


VelocityLike = Union[Callable, "np.ndarray"]


def velocity_to_space(v: VelocityLike, M: MassProfile, x) -> np.ndarray:
    """u(x) = v(M(x)).

    ``v`` is a callable of mass, or an array of cell values on the uniform mass
    grid (looked up piecewise-constant).
    """
    mx = np.asarray(cdf_eval(M, x))
    if callable(v):
        return np.asarray(v(mx), dtype=float)
    vals = np.asarray(v, dtype=float)
    return vals[cell_index(mx, vals.size)]


def cell_index(m, n_cells: int) -> np.ndarray:
    """Index of the uniform mass cell containing m; m = 1 maps to the last cell."""
    idx = np.floor(np.asarray(m, dtype=float) * n_cells).astype(int)
    return np.clip(idx, 0, n_cells - 1)


def mass_midpoints(n_cells: int) -> np.ndarray:
    return (np.arange(n_cells) + 0.5) / n_cells


def flux_primitive(values, m):
    """A(m) = int_0^m v, exact for piecewise-constant cell values on (0, 1)."""
    values = np.asarray(values, dtype=float)
    n = values.size
    edges = np.linspace(0.0, 1.0, n + 1)
    cum = np.concatenate(([0.0], np.cumsum(values))) / n
    out = np.interp(np.asarray(m, dtype=float), edges, cum)
    return float(out) if np.ndim(out) == 0 else out


def density_from_cdf(M: MassProfile) -> tuple:
    """Piecewise-constant density: returns (edges, rho) with rho the segment slopes."""
    if M.has_atoms:
        raise AdmissibilityError("profile has atoms; its density is not in L^1")
    rho = np.diff(M.values) / np.diff(M.nodes)
    return M.nodes.copy(), rho


def random_profile(rng: np.random.Generator, n_nodes: int = 12, lo: float = -1.0, hi: float = 1.0,
                   vacuum_prob: float = 0.2) -> MassProfile:
    """Random monotone piecewise-linear CDF, with some flat (vacuum) segments."""
    nodes = np.sort(rng.uniform(lo, hi, n_nodes))
    nodes = np.unique(nodes)
    incr = rng.exponential(1.0, nodes.size - 1)
    incr[rng.random(nodes.size - 1) < vacuum_prob] = 0.0
    if incr.sum() == 0:
        incr[0] = 1.0
    vals = np.concatenate(([0.0], np.cumsum(incr)))
    return MassProfile(nodes, vals / vals[-1])
