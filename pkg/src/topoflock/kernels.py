"""Communication protocols phi(d, z) and their derived constants.

A protocol takes the topological (mass) distance ``d`` in [0, 1] and, for the
general kind, the signed spatial offset ``z``.  Purely topological protocols
ignore ``z``.  Every evaluator is vectorised over numpy arrays.
"""

from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Optional

import numpy as np
from scipy import integrate
from scipy.interpolate import RegularGridInterpolator
from scipy.special import gamma

from .exceptions import ArtifactIOError, ConfigurationError, KernelDomainError, UnsupportedKernelError

# phi below this value counts as zero when looking for vanishing sets
VANISHING_THRESHOLD = 1e-300
QUAD_EPSREL = 1e-10
QUAD_EPSABS = 1e-14

Evaluator = Callable[[np.ndarray, np.ndarray], np.ndarray]


def fractional_constant(s: float) -> float:
    """Normalising constant C_s = s 4^s Gamma(1/2 + s) / (sqrt(pi) Gamma(1 - s))."""
    if not 0.0 < s < 1.0:
        raise ConfigurationError(f"fractional order s must lie in (0, 1), got {s}")
    return s * 4.0**s * gamma(0.5 + s) / (math.sqrt(math.pi) * gamma(1.0 - s))


@dataclass(frozen=True, eq=False)
class Kernel:
    """An immutable communication protocol.

    ``z_independent`` marks protocols with phi(d, z) = phi(d), for which the
    z-antiderivative is simply phi(d) * z.  ``sup`` holds the exact sup norm when
    it is known in closed form.
    """

    kind: str
    family: str
    evaluator: Evaluator
    singularity: str = "bounded"
    s: Optional[float] = None
    monotone_in_d: bool = True
    z_independent: bool = True
    antiderivative: Optional[Evaluator] = None
    sup: Optional[float] = None
    z_breakpoints: tuple = ()
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in ("pure", "general"):
            raise ConfigurationError(f"kernel kind must be 'pure' or 'general', got {self.kind!r}")
        if self.singularity not in ("bounded", "power_law"):
            raise ConfigurationError(f"unknown singularity class {self.singularity!r}")

    @property
    def is_bounded(self) -> bool:
        return self.singularity == "bounded"

    @property
    def is_pure(self) -> bool:
        return self.kind == "pure"

    def __call__(self, d, z=0.0):
        return eval_phi(self, d, z)

    def __repr__(self):
        return f"Kernel(kind={self.kind!r}, family={self.family!r}, params={self.params!r})"

    def to_spec(self) -> dict:
        return {"kind": self.kind, "family": self.family, "params": dict(self.params)}


def _as_scalar_if_0d(arr):
    arr = np.asarray(arr)
    return float(arr) if arr.ndim == 0 else arr


def eval_phi(kernel: Kernel, d, z=0.0):
    """Communication rate phi(d, z); the ``z`` argument is ignored for pure kernels."""
    d = np.asarray(d, dtype=float)
    z = np.asarray(z, dtype=float)
    if np.any((d < 0.0) | (d > 1.0)) or np.any(np.isnan(d)):
        raise KernelDomainError("mass distance d must lie in [0, 1]")
    if kernel.singularity == "power_law" and np.any(d == 0.0):
        raise KernelDomainError("power-law protocol is singular at d = 0")
    d, z = np.broadcast_arrays(d, z)
    return _as_scalar_if_0d(kernel.evaluator(d, z))


def eval_Phi(kernel: Kernel, d, z):
    """Antiderivative Phi(d, z) = int_0^z phi(d, zeta) dzeta.

    Uses the registered closed form when there is one, otherwise adaptive
    quadrature with the kernel's z-discontinuities as breakpoints.
    """
    if not kernel.is_bounded:
        raise UnsupportedKernelError("Phi is only defined for bounded protocols")
    d = np.asarray(d, dtype=float)
    z = np.asarray(z, dtype=float)
    if np.any((d < 0.0) | (d > 1.0)):
        raise KernelDomainError("mass distance d must lie in [0, 1]")
    d, z = np.broadcast_arrays(d, z)
    if kernel.antiderivative is not None:
        return _as_scalar_if_0d(kernel.antiderivative(d, z))
    if kernel.z_independent:
        return _as_scalar_if_0d(kernel.evaluator(d, np.zeros_like(z)) * z)
    out = np.empty(d.shape)
    for idx in np.ndindex(d.shape):
        out[idx] = _quad_Phi(kernel, float(d[idx]), float(z[idx]))
    return _as_scalar_if_0d(out)


def _quad_Phi(kernel: Kernel, d: float, z: float) -> float:
    if z == 0.0:
        return 0.0
    upper = abs(z)
    pts = [p for p in kernel.z_breakpoints if 0.0 < p < upper]

    def f(zeta):
        return float(kernel.evaluator(np.array(d), np.array(zeta)))

    val, _ = integrate.quad(f, 0.0, upper, points=pts or None, epsabs=QUAD_EPSABS,
                            epsrel=QUAD_EPSREL, limit=200)
    # phi is even in z, so Phi is odd
    return math.copysign(val, z)


def poincare_constant(kernel: Kernel, n_quad: int = 2000) -> float:
    """Grid estimate of c_phi = esssup_m int_0^1 dm' / phi(|m - m'|).

    For a pure kernel the inner integral splits as G(m) + G(1 - m) with
    G(x) = int_0^x dr / phi(r), so G is accumulated once on a uniform grid of
    ``n_quad`` subintervals and the maximum is taken over the grid nodes.
    Returns ``math.inf`` when phi vanishes at a sampled interior point, which
    signals a zero set of positive measure.
    """
    if not kernel.is_pure:
        raise UnsupportedKernelError("c_phi is defined for purely topological protocols")
    if n_quad < 2:
        raise ConfigurationError("n_quad must be at least 2")
    edges = np.linspace(0.0, 1.0, n_quad + 1)
    mids = 0.5 * (edges[:-1] + edges[1:])
    if np.any(kernel.evaluator(mids, np.zeros_like(mids)) < VANISHING_THRESHOLD):
        return math.inf

    def inv_phi(r):
        return 1.0 / float(kernel.evaluator(np.array(r), np.array(0.0)))

    pieces = np.empty(n_quad)
    with warnings.catch_warnings():
        # integrable endpoint singularities of 1/phi make quad warn on the last piece
        warnings.simplefilter("ignore", integrate.IntegrationWarning)
        for k in range(n_quad):
            pieces[k], _ = integrate.quad(inv_phi, edges[k], edges[k + 1],
                                          epsabs=QUAD_EPSABS, epsrel=QUAD_EPSREL, limit=100)
    G = np.concatenate(([0.0], np.cumsum(pieces)))
    c = G + G[::-1]
    return float(np.max(c))


def sup_norm(kernel: Kernel, n_grid: int = 2001) -> float:
    """||phi||_inf: exact for registered closed forms, grid-sampled otherwise."""
    if not kernel.is_bounded:
        return math.inf
    if kernel.sup is not None:
        return float(kernel.sup)
    d = np.linspace(0.0, 1.0, n_grid)
    if kernel.is_pure:
        return float(np.max(kernel.evaluator(d, np.zeros_like(d))))
    zmax = float(kernel.params.get("z_extent", 10.0))
    z = np.linspace(-zmax, zmax, n_grid)
    D, Z = np.meshgrid(d, z, indexing="ij")
    return float(np.max(kernel.evaluator(D, Z)))


@dataclass(frozen=True)
class KernelConstants:
    sup_norm: float
    c_phi: float
    quad_points: int


def kernel_constants(kernel: Kernel, n_quad: int = 2000) -> KernelConstants:
    c_phi = poincare_constant(kernel, n_quad) if kernel.is_pure else math.inf
    return KernelConstants(sup_norm=sup_norm(kernel), c_phi=c_phi, quad_points=n_quad)


# ---------------------------------------------------------------------------
# families


def constant(value: float = 1.0, kind: str = "pure") -> Kernel:
    if value < 0:
        raise ConfigurationError("constant protocol must be nonnegative")
    c = float(value)
    return Kernel(
        kind=kind,
        family="constant",
        evaluator=lambda d, z: np.full(np.broadcast(d, z).shape, c),
        antiderivative=lambda d, z: c * np.broadcast_to(z, np.broadcast(d, z).shape).astype(float),
        sup=c,
        params={"value": c},
    )


def power_law(s: float) -> Kernel:
    """phi(r) = C_s r^(-1-2s), the kernel of the regional fractional Laplacian."""
    cs = fractional_constant(s)
    s = float(s)
    return Kernel(
        kind="pure",
        family="power_law",
        evaluator=lambda d, z: cs * np.asarray(d, dtype=float) ** (-1.0 - 2.0 * s),
        singularity="power_law",
        s=s,
        params={"s": s},
    )


def affine_decay(intercept: float = 1.0, slope: float = 0.5, radius: Optional[float] = None) -> Kernel:
    """phi(d, z) = (intercept - slope*d), optionally cut off to |z| <= radius.

    Without a radius the protocol is purely topological.
    """
    a, b = float(intercept), float(slope)
    if b < 0 or a - b < 0:
        raise ConfigurationError("affine_decay needs slope >= 0 and intercept >= slope")
    params = {"intercept": a, "slope": b}
    if radius is None:
        return Kernel(
            kind="pure",
            family="affine_decay",
            evaluator=lambda d, z: a - b * np.asarray(d, dtype=float) + 0.0 * np.asarray(z),
            antiderivative=lambda d, z: (a - b * d) * z,
            sup=a,
            params=params,
        )
    R = float(radius)
    if R <= 0:
        raise ConfigurationError("affine_decay radius must be positive")
    params["radius"] = R
    params["z_extent"] = 2.0 * R
    return Kernel(
        kind="general",
        family="affine_decay",
        evaluator=lambda d, z: np.where(np.abs(z) <= R, a - b * np.asarray(d, dtype=float), 0.0),
        z_independent=False,
        antiderivative=lambda d, z: (a - b * d) * np.sign(z) * np.minimum(np.abs(z), R),
        sup=a,
        z_breakpoints=(R,),
        params=params,
    )


def root_decay(exponent: float = 0.5) -> Kernel:
    """phi(r) = (1 - r)^exponent; vanishes at r = 1 but keeps c_phi finite for exponent < 1."""
    alpha = float(exponent)
    if alpha < 0:
        raise ConfigurationError("root_decay exponent must be nonnegative")
    return Kernel(
        kind="pure",
        family="root_decay",
        evaluator=lambda d, z: np.clip(1.0 - np.asarray(d, dtype=float), 0.0, None) ** alpha,
        antiderivative=lambda d, z: np.clip(1.0 - d, 0.0, None) ** alpha * z,
        sup=1.0,
        params={"exponent": alpha},
    )


def short_range(radius: float = 0.5) -> Kernel:
    """phi(r) = 1 for r <= radius, else 0."""
    R = float(radius)
    return Kernel(
        kind="pure",
        family="short_range",
        evaluator=lambda d, z: np.where(np.asarray(d, dtype=float) <= R, 1.0, 0.0),
        antiderivative=lambda d, z: np.where(d <= R, 1.0, 0.0) * z,
        sup=1.0,
        params={"radius": R},
    )


def custom_table(path=None, *, d=None, z=None, phi=None) -> Kernel:
    """Linearly interpolated tabulated protocol.

    Pure tables have columns ``d,phi``; general tables ``d,z,phi`` on a full
    tensor grid.  Offsets beyond the tabulated z-range are clamped to the edge,
    and tables given for z >= 0 only are extended evenly.
    """
    params = {}
    if path is not None:
        d, z, phi = _read_kernel_csv(path)
        params["path"] = str(path)
    if d is None or phi is None:
        raise ConfigurationError("custom_table needs a CSV path or d/phi arrays")
    d = np.asarray(d, dtype=float)
    phi = np.asarray(phi, dtype=float)
    if np.any(phi < 0):
        raise ConfigurationError("tabulated protocol must be nonnegative")
    if z is None:
        order = np.argsort(d)
        dd, pp = d[order], phi[order]
        diffs = np.diff(pp)
        return Kernel(
            kind="pure",
            family="custom_table",
            evaluator=lambda dq, zq: np.interp(np.asarray(dq, dtype=float), dd, pp),
            monotone_in_d=bool(np.all(diffs <= 0)),
            sup=float(pp.max()),
            params=params,
        )
    z = np.asarray(z, dtype=float)
    dgrid = np.unique(d)
    zgrid = np.unique(z)
    table = np.full((dgrid.size, zgrid.size), np.nan)
    table[np.searchsorted(dgrid, d), np.searchsorted(zgrid, z)] = phi
    if np.isnan(table).any():
        raise ConfigurationError("general custom_table must cover a full (d, z) tensor grid")
    one_sided = zgrid.min() >= 0.0
    interp = RegularGridInterpolator((dgrid, zgrid), table)

    def evaluator(dq, zq):
        dq = np.asarray(dq, dtype=float)
        zq = np.asarray(zq, dtype=float)
        zq = np.abs(zq) if one_sided else zq
        zq = np.clip(zq, zgrid[0], zgrid[-1])
        dq = np.clip(dq, dgrid[0], dgrid[-1])
        shape = np.broadcast(dq, zq).shape
        pts = np.stack(np.broadcast_arrays(dq, zq), axis=-1).reshape(-1, 2)
        return interp(pts).reshape(shape)

    params["z_extent"] = float(np.abs(zgrid).max())
    return Kernel(
        kind="general",
        family="custom_table",
        evaluator=evaluator,
        z_independent=False,
        monotone_in_d=bool(np.all(np.diff(table, axis=0) <= 0)),
        sup=float(table.max()),
        z_breakpoints=tuple(float(v) for v in np.abs(zgrid) if v > 0),
        params=params,
    )


def _read_kernel_csv(path):
    try:
        with open(Path(path), newline="") as fh:
            rows = list(csv.DictReader(fh))
    except OSError as exc:
        raise ArtifactIOError(f"cannot read kernel table {path}: {exc}") from exc
    if not rows:
        raise ConfigurationError(f"kernel table {path} is empty")
    cols = set(rows[0])
    d = [float(r["d"]) for r in rows]
    phi = [float(r["phi"]) for r in rows]
    z = [float(r["z"]) for r in rows] if "z" in cols else None
    return d, z, phi


def radial(kernel: Kernel) -> Kernel:
    """Same protocol with the mass-distance argument frozen at 0.

    Isolates the Euclidean part of a general protocol; used for the radial
    blow-up comparison in the Lagrangian pipeline.
    """
    if not kernel.is_bounded:
        raise UnsupportedKernelError("radial mode needs a bounded protocol")
    ev = kernel.evaluator
    anti = kernel.antiderivative
    return replace(
        kernel,
        kind="general",
        family=f"radial({kernel.family})",
        evaluator=lambda d, z: ev(np.zeros(np.broadcast(d, z).shape), z),
        antiderivative=None if anti is None else (lambda d, z: anti(np.zeros(np.broadcast(d, z).shape), z)),
        params={**kernel.params, "radial": True},
    )


FAMILIES = {
    "constant": constant,
    "power_law": power_law,
    "affine_decay": affine_decay,
    "root_decay": root_decay,
    "short_range": short_range,
    "custom_table": custom_table,
}


def make_kernel(spec: dict) -> Kernel:
    """Build a kernel from a config dict ``{"kind", "family", "params"}``."""
    try:
        family = spec["family"]
    except (KeyError, TypeError):
        raise ConfigurationError("kernel spec needs a 'family' field")
    if family not in FAMILIES:
        raise ConfigurationError(f"unknown kernel family {family!r}; expected one of {sorted(FAMILIES)}")
    params = dict(spec.get("params", {}))
    kind = spec.get("kind")
    try:
        if family == "constant":
            k = constant(kind=kind or "pure", **params)
        else:
            k = FAMILIES[family](**params)
    except TypeError as exc:
        raise ConfigurationError(f"bad parameters for kernel family {family!r}: {exc}") from None
    if kind is not None and kind != k.kind:
        raise ConfigurationError(
            f"kernel family {family!r} with these params is {k.kind!r}, but kind={kind!r} was requested")
    if spec.get("radial"):
        k = radial(k)
    return k
