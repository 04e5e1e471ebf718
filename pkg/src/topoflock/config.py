"""Run configuration: JSON parsing, validation with line numbers, and builders.

A config is one JSON document::

    {
      "mode": "mass" | "lagrangian" | "spectral" | "compare" | "sweep",
      "kernel": {"kind": "pure", "family": "constant", "params": {"value": 1.0}},
      "rho0": {"family": "uniform", "params": {"a": 0.0, "b": 1.0}},
      "velocity": {"family": "sine", "params": {"amplitude": 1.0}, "variable": "m"},
      "resolution": {"N": 256, "n_x": 400, "P": 800, "levels": [[400, 400], [800, 800]]},
      "dt": 0.001, "t_final": 5.0, "output_times": [0.0, 1.0, 5.0],
      "spectral": {"bc": "neumann", "scheme": "auto"},
      "lagrangian": {"radial": false, "collapse_fraction": 0.1},
      "tolerances": {"cfl": 0.5, "monitor_factor": 50.0},
      "seed": 0,
      "sweep": {"mode": "mass", "grid": {"kernel.params.value": [0.5, 1.0]}}
    }
"""

from __future__ import annotations

import copy
import itertools
import json
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from . import kernels as _k
from .exceptions import ConfigurationError
from .io import read_cdf_csv, read_columns, read_density_csv, read_text
from .mass_coords import MassProfile, cdf_eval, quantile

MODES = ("mass", "lagrangian", "spectral", "compare", "sweep")
RHO0_FAMILIES = ("uniform", "blocks", "cosine_bump", "atom", "csv")
VELOCITY_FAMILIES = ("constant", "linear", "sine", "step", "custom_csv", "random_modes")
TOP_KEYS = {"mode", "kernel", "rho0", "velocity", "resolution", "dt", "t_final", "output_times",
            "spectral", "lagrangian", "tolerances", "seed", "sweep", "description"}
DEFAULT_RESOLUTION = {"N": 256, "n_x": 400, "P": 400}


class ConfigValidationError(ConfigurationError):
    """Carries every problem found, each formatted ``file:line: key: message``."""

    def __init__(self, errors):
        self.errors = list(errors)
        super().__init__("\n".join(self.errors))


def _line_of(text: str, keys) -> int:
    """Best-effort line of the JSON key path ``keys`` (nested search for the quoted names)."""
    pos = 0
    for key in keys:
        if isinstance(key, int):
            continue
        m = re.compile(r'"%s"\s*:' % re.escape(str(key))).search(text, pos)
        if m is None:
            break
        pos = m.start()
    return text.count("\n", 0, pos) + 1


class _Collector:
    def __init__(self, source: str, text: str):
        self.source = source
        self.text = text
        self.errors = []

    def add(self, keys, message):
        dotted = ".".join(str(k) for k in keys) or "<root>"
        self.errors.append(f"{self.source}:{_line_of(self.text, keys)}: {dotted}: {message}")


@dataclass
class RunConfig:
    mode: str
    kernel: dict
    rho0: dict
    velocity: dict
    resolution: dict
    dt: float
    t_final: float
    output_times: list
    spectral: dict = field(default_factory=dict)
    lagrangian: dict = field(default_factory=dict)
    tolerances: dict = field(default_factory=dict)
    seed: int = 0
    sweep: Optional[dict] = None
    source: str = "<config>"
    base_dir: Path = field(default_factory=Path)
    raw: dict = field(default_factory=dict)

    @property
    def velocity_variable(self) -> str:
        default = "x" if self.mode == "lagrangian" else "m"
        return self.velocity.get("variable", default)


# ---------------------------------------------------------------------------
# validation


def _is_pos_int(x) -> bool:
    return isinstance(x, int) and not isinstance(x, bool) and x > 0


def _is_num(x) -> bool:
    return isinstance(x, (int, float)) and not isinstance(x, bool) and np.isfinite(x)


def _check_kernel(spec, col: _Collector, mode: str):
    if not isinstance(spec, dict):
        col.add(["kernel"], "must be an object")
        return None
    try:
        k = _k.make_kernel(spec)
    except Exception as exc:  # the kernel factory raises several error types
        col.add(["kernel", "family"] if "family" in str(exc) else ["kernel", "params"], str(exc))
        return None
    if mode == "spectral" and k.singularity != "power_law":
        col.add(["kernel", "family"], "mode 'spectral' requires the power_law family")
    if mode in ("lagrangian", "compare") and not k.is_bounded:
        col.add(["kernel", "family"], f"mode {mode!r} requires a bounded protocol")
    if mode in ("mass", "compare", "spectral") and not k.is_pure:
        col.add(["kernel", "kind"], f"mode {mode!r} requires a purely topological (pure) protocol")
    return k


def _check_rho0(spec, col: _Collector, required: bool):
    if spec is None:
        if required:
            col.add(["rho0"], "initial density is required for this mode")
        return
    if not isinstance(spec, dict) or spec.get("family") not in RHO0_FAMILIES:
        col.add(["rho0", "family"], f"expected one of {list(RHO0_FAMILIES)}")
        return
    params = spec.get("params", {})
    if not isinstance(params, dict):
        col.add(["rho0", "params"], "must be an object")
        return
    fam = spec["family"]
    if fam == "uniform" and not params.get("a", 0.0) < params.get("b", 1.0):
        col.add(["rho0", "params"], "uniform needs a < b")
    if fam == "blocks":
        blocks = params.get("blocks")
        if not isinstance(blocks, list) or not blocks or any(
                not isinstance(b, list) or len(b) != 3 or not all(_is_num(v) for v in b) for b in blocks):
            col.add(["rho0", "params", "blocks"], "expected a list of [left, right, mass] triples")
        elif abs(sum(b[2] for b in blocks) - 1.0) > 1e-9 or any(b[0] >= b[1] or b[2] < 0 for b in blocks):
            col.add(["rho0", "params", "blocks"], "blocks need left < right, nonnegative masses summing to 1")
    if fam == "cosine_bump" and not params.get("half_width", 0.5) > 0:
        col.add(["rho0", "params", "half_width"], "must be positive")
    if fam == "csv":
        if "path" not in params:
            col.add(["rho0", "params", "path"], "csv family needs a path")
        if params.get("format", "cdf") not in ("cdf", "density"):
            col.add(["rho0", "params", "format"], "expected 'cdf' or 'density'")


def _check_velocity(spec, col: _Collector):
    if spec is None:
        col.add(["velocity"], "initial velocity is required")
        return
    if not isinstance(spec, dict) or spec.get("family") not in VELOCITY_FAMILIES:
        col.add(["velocity", "family"], f"expected one of {list(VELOCITY_FAMILIES)}")
        return
    if spec.get("variable", "m") not in ("m", "x"):
        col.add(["velocity", "variable"], "expected 'm' (mass) or 'x' (space)")
    params = spec.get("params", {})
    if not isinstance(params, dict) or any(k != "path" and not _is_num(v) for k, v in params.items()):
        col.add(["velocity", "params"], "parameters must be numbers (except 'path')")
    if spec["family"] == "custom_csv" and "path" not in params:
        col.add(["velocity", "params", "path"], "custom_csv needs a path")


def validate_dict(data, source: str = "<config>", text: Optional[str] = None, base_dir: Path = Path(".")) -> list:
    """All problems in a config dict, as ``file:line: key: message`` strings."""
    text = text if text is not None else json.dumps(data, indent=2)
    col = _Collector(source, text)
    if not isinstance(data, dict):
        col.add([], "config must be a JSON object")
        return col.errors
    for key in sorted(set(data) - TOP_KEYS):
        col.add([key], "unknown key")
    mode = data.get("mode")
    if mode not in MODES:
        col.add(["mode"], f"expected one of {list(MODES)}")
        return col.errors
    if mode == "sweep":
        return _validate_sweep(data, col, base_dir)
    kernel = _check_kernel(data.get("kernel"), col, mode)
    _check_rho0(data.get("rho0"), col, required=mode in ("mass", "lagrangian", "compare"))
    _check_velocity(data.get("velocity"), col)
    res = data.get("resolution", {})
    if not isinstance(res, dict):
        col.add(["resolution"], "must be an object")
        res = {}
    for key in ("N", "n_x", "P"):
        if key in res and not _is_pos_int(res[key]):
            col.add(["resolution", key], "must be a positive integer")
    if mode == "spectral" and _is_pos_int(res.get("N", 1)) and not 2 <= res.get("N", DEFAULT_RESOLUTION["N"]) <= 2048:
        col.add(["resolution", "N"], "spectral mode needs 2 <= N <= 2048")
    if mode == "compare":
        levels = res.get("levels", [[400, 400], [800, 800]])
        if not isinstance(levels, list) or len(levels) < 2 or any(
                not isinstance(lv, list) or len(lv) != 2 or not all(_is_pos_int(v) for v in lv) for lv in levels):
            col.add(["resolution", "levels"], "expected at least two [P, n_x] pairs of positive integers")
    t_final, dt = data.get("t_final"), data.get("dt", 1e-3)
    if not _is_num(t_final) or t_final <= 0:
        col.add(["t_final"], "must be a positive number")
        t_final = None
    if not _is_num(dt) or dt <= 0:
        col.add(["dt"], "must be a positive number")
        dt = None
    if t_final is not None and dt is not None and mode != "spectral":
        n = round(t_final / dt)
        if n < 1 or abs(n * dt - t_final) > 1e-9 * max(1.0, t_final):
            col.add(["t_final"], f"must be a positive multiple of dt = {dt}")
        elif kernel is not None and kernel.is_bounded and dt * _k.sup_norm(kernel) > 1.0:
            col.add(["dt"], "stability guard: dt * ||phi||_inf must not exceed 1")
    out = data.get("output_times", [t_final] if t_final else [])
    if not isinstance(out, list) or not all(_is_num(t) for t in out):
        col.add(["output_times"], "must be a list of numbers")
    elif t_final is not None:
        if any(b < a for a, b in zip(out, out[1:])):
            col.add(["output_times"], "must be sorted")
        if out and (out[0] < 0 or out[-1] > t_final + 1e-12):
            col.add(["output_times"], "must lie in [0, t_final]")
    spec = data.get("spectral", {})
    if not isinstance(spec, dict) or spec.get("bc", "neumann") not in ("neumann", "dirichlet") \
            or spec.get("scheme", "auto") not in ("auto", "galerkin", "collocation"):
        col.add(["spectral"], "bc must be neumann|dirichlet and scheme auto|galerkin|collocation")
    lag = data.get("lagrangian", {})
    if not isinstance(lag, dict) or not 0 < lag.get("collapse_fraction", 0.1) < 1:
        col.add(["lagrangian"], "collapse_fraction must lie in (0, 1)")
    tol = data.get("tolerances", {})
    if not isinstance(tol, dict) or not 0 < tol.get("cfl", 0.5) <= 0.5 or not tol.get("monitor_factor", 50.0) > 1:
        col.add(["tolerances"], "cfl must lie in (0, 0.5] and monitor_factor exceed 1")
    if "seed" in data and (not isinstance(data["seed"], int) or isinstance(data["seed"], bool) or data["seed"] < 0):
        col.add(["seed"], "must be a nonnegative integer")
    return col.errors


def _validate_sweep(data, col: _Collector, base_dir: Path) -> list:
    sweep = data.get("sweep")
    if not isinstance(sweep, dict) or sweep.get("mode") not in MODES[:-1]:
        col.add(["sweep", "mode"], f"sweep needs an inner mode in {list(MODES[:-1])}")
        return col.errors
    grid = sweep.get("grid")
    if not isinstance(grid, dict) or not grid or any(not isinstance(v, list) or not v for v in grid.values()):
        col.add(["sweep", "grid"], "expected a non-empty object of dotted-path -> list of values")
        return col.errors
    for i, point in enumerate(expand_sweep(data)):
        for err in validate_dict(point, col.source, col.text, base_dir):
            col.errors.append(f"{err} (sweep point {i})")
    return col.errors


def _set_dotted(d: dict, dotted: str, value):
    keys = dotted.split(".")
    for key in keys[:-1]:
        d = d.setdefault(key, {})
    d[keys[-1]] = value


def expand_sweep(data: dict) -> list:
    """Cartesian product of the sweep grid applied to the base config (in sorted key order)."""
    sweep = data["sweep"]
    base = {k: copy.deepcopy(v) for k, v in data.items() if k != "sweep"}
    base["mode"] = sweep["mode"]
    keys = sorted(sweep["grid"])
    points = []
    for combo in itertools.product(*(sweep["grid"][k] for k in keys)):
        point = copy.deepcopy(base)
        for key, value in zip(keys, combo):
            _set_dotted(point, key, value)
        points.append(point)
    return points


def sweep_parameters(data: dict) -> list:
    keys = sorted(data["sweep"]["grid"])
    return [dict(zip(keys, combo)) for combo in itertools.product(*(data["sweep"]["grid"][k] for k in keys))]


def parse_text(text: str, source: str = "<config>") -> dict:
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigValidationError([f"{source}:{exc.lineno}: <json>: {exc.msg} (column {exc.colno})"]) from None


def from_dict(data: dict, source: str = "<config>", base_dir: Path = Path("."), text: Optional[str] = None,
              check: bool = True) -> RunConfig:
    if check:
        errors = validate_dict(data, source, text, base_dir)
        if errors:
            raise ConfigValidationError(errors)
    t_final = float(data.get("t_final", 0.0))
    return RunConfig(
        mode=data["mode"],
        kernel=data.get("kernel", {}),
        rho0=data.get("rho0"),
        velocity=data.get("velocity", {}),
        resolution={**DEFAULT_RESOLUTION, **data.get("resolution", {})},
        dt=float(data.get("dt", 1e-3)),
        t_final=t_final,
        output_times=[float(t) for t in data.get("output_times", [t_final])],
        spectral=data.get("spectral", {}),
        lagrangian=data.get("lagrangian", {}),
        tolerances=data.get("tolerances", {}),
        seed=int(data.get("seed", 0)),
        sweep=data.get("sweep"),
        source=source,
        base_dir=Path(base_dir),
        raw=data,
    )


def load_config(path) -> RunConfig:
    """Read, validate and parse a config file; raises on I/O or validation problems."""
    path = Path(path)
    text = read_text(path)
    data = parse_text(text, str(path))
    return from_dict(data, str(path), path.parent, text)


# ---------------------------------------------------------------------------
# builders


def _resolve(cfg: RunConfig, p) -> Path:
    p = Path(p)
    return p if p.is_absolute() else cfg.base_dir / p


def build_kernel(cfg: RunConfig) -> _k.Kernel:
    spec = dict(cfg.kernel)
    if spec.get("family") == "custom_table" and "path" in spec.get("params", {}):
        spec["params"] = {**spec["params"], "path": str(_resolve(cfg, spec["params"]["path"]))}
    return _k.make_kernel(spec)


def build_rho0(cfg: RunConfig) -> Optional[MassProfile]:
    spec = cfg.rho0
    if spec is None:
        return None
    fam, p = spec["family"], spec.get("params", {})
    if fam == "uniform":
        return MassProfile.uniform(p.get("a", 0.0), p.get("b", 1.0))
    if fam == "blocks":
        return MassProfile.from_blocks([tuple(b) for b in p["blocks"]])
    if fam == "cosine_bump":
        c, hw, n = p.get("center", 0.0), p.get("half_width", 0.5), int(p.get("nodes", 4001))
        x = np.linspace(c - hw, c + hw, n)
        u = (x - c) / hw
        # exact CDF of rho proportional to cos^2(pi u / 2) on [-1, 1]
        return MassProfile.from_function(lambda _: (u + 1.0) / 2.0 + np.sin(np.pi * u) / (2.0 * np.pi), x)
    if fam == "atom":
        return MassProfile.heaviside(p.get("x0", 0.0), p.get("width", 1.0))
    path = _resolve(cfg, p["path"])
    return read_density_csv(path) if p.get("format", "cdf") == "density" else read_cdf_csv(path)


def velocity_function(cfg: RunConfig) -> Callable:
    """The configured velocity as a function of its own variable (m or x)."""
    fam, p = cfg.velocity["family"], cfg.velocity.get("params", {})
    if fam == "constant":
        c = p.get("value", 0.0)
        return lambda y: np.full(np.shape(y), float(c))
    if fam == "linear":
        a, b = p.get("slope", 1.0), p.get("intercept", 0.0)
        return lambda y: a * np.asarray(y, dtype=float) + b
    if fam == "sine":
        amp, freq, ph = p.get("amplitude", 1.0), p.get("frequency", 1.0), p.get("phase", 0.0)
        return lambda y: amp * np.sin(2.0 * np.pi * freq * np.asarray(y, dtype=float) + ph)
    if fam == "step":
        left, right, at = p.get("left", 1.0), p.get("right", -1.0), p.get("at", 0.5)
        return lambda y: np.where(np.asarray(y, dtype=float) < at, left, right).astype(float)
    if fam == "random_modes":
        rng = np.random.default_rng(int(p.get("seed", cfg.seed)))
        n_modes = int(p.get("n_modes", 5))
        coef = p.get("amplitude", 1.0) * rng.standard_normal(n_modes)
        lo, hi = p.get("lo", 0.0), p.get("hi", 1.0)

        def modes(y):
            s = (np.asarray(y, dtype=float) - lo) / (hi - lo)
            return sum(c * np.cos((k + 1) * np.pi * s) for k, c in enumerate(coef))
        return modes
    cols = read_columns(_resolve(cfg, p["path"]))
    keys = ("m", "v") if cfg.velocity_variable == "m" else ("x", "u")
    if not set(keys) <= set(cols):
        raise ConfigurationError(f"{p['path']}: expected columns {','.join(keys)}")
    xs, vs = cols[keys[0]], cols[keys[1]]
    return lambda y: np.interp(np.asarray(y, dtype=float), xs, vs)


def build_v0(cfg: RunConfig, rho0: Optional[MassProfile], n_cells: int) -> np.ndarray:
    """Cell values of v0 at the mass midpoints."""
    f = velocity_function(cfg)
    m = (np.arange(n_cells) + 0.5) / n_cells
    if cfg.velocity_variable == "m":
        return np.asarray(f(m), dtype=float)
    if rho0 is None:
        raise ConfigurationError("a spatial velocity needs rho0 to map to mass coordinates")
    return np.asarray(f(quantile(rho0, m)), dtype=float)


def build_u0(cfg: RunConfig, rho0: MassProfile) -> Callable:
    """u0 as a function of x."""
    f = velocity_function(cfg)
    if cfg.velocity_variable == "x":
        return f
    return lambda x: np.asarray(f(np.asarray(cdf_eval(rho0, x))), dtype=float)


def build_v0_function(cfg: RunConfig, rho0: Optional[MassProfile]) -> Callable:
    """v0 as a function of mass."""
    f = velocity_function(cfg)
    if cfg.velocity_variable == "m":
        return f
    return lambda m: np.asarray(f(np.asarray(quantile(rho0, m))), dtype=float)
