"""Scenario files: a TOML schema for domain, Lagrangian, data, schedule, tolerances and pipeline flags."""
from __future__ import annotations

import csv
from dataclasses import asdict, dataclass, field
from importlib import resources
from pathlib import Path
import sys

import numpy as np
from scipy.interpolate import LinearNDInterpolator, NearestNDInterpolator

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .lagrangian import Lagrangian, catalog, load_tabulated, make_lagrangian
from .mesh import DomainSpec, Mesh

__all__ = [
    "Tolerances",
    "Scenario",
    "load_scenario",
    "builtin_scenarios",
    "G_FIELDS",
    "TRACES",
    "list_catalog",
]

MODES = ("check_only", "convex", "nonconvex")


# ---------------------------------------------------------------------------
# named data


def _g_radial(x: np.ndarray, center=(0.0, 0.0)) -> np.ndarray:
    return np.linalg.norm(x - np.asarray(center, dtype=float), axis=1)


def _g_gaussian(x: np.ndarray, center=(0.0, 0.0), width: float = 0.5) -> np.ndarray:
    return np.exp(-np.sum((x - np.asarray(center, dtype=float)) ** 2, axis=1) / (2 * width**2))


G_FIELDS = {
    "radial": (_g_radial, "|x - center|"),
    "gaussian": (_g_gaussian, "exp(-|x - center|^2 / (2 width^2))"),
}


def _tr_zero(gam: np.ndarray) -> np.ndarray:
    return np.zeros(len(gam))


def _tr_squared_distance(gam: np.ndarray, point=(0.0, 0.0)) -> np.ndarray:
    return np.sum((gam - np.asarray(point, dtype=float)) ** 2, axis=1)


def _tr_spike(gam: np.ndarray, anchor: int = 0) -> np.ndarray:
    return -np.sqrt(np.linalg.norm(gam - gam[anchor], axis=1))


def _tr_cosine(gam: np.ndarray, amplitude: float = 1.0, frequency: int = 1) -> np.ndarray:
    return amplitude * np.cos(frequency * np.arctan2(gam[:, 1], gam[:, 0]))


TRACES = {
    "zero": (_tr_zero, "0"),
    "squared_distance": (_tr_squared_distance, "|gamma - point|^2"),
    "spike": (_tr_spike, "-sqrt(|gamma - gamma_anchor|), fails the slope condition at the anchor"),
    "cosine": (_tr_cosine, "amplitude cos(frequency angle)"),
}


def _read_xyv(path: Path) -> tuple[np.ndarray, np.ndarray]:
    with open(path, newline="") as fh:
        rows = [r for r in csv.reader(fh) if r and not r[0].startswith("#")]
    try:
        float(rows[0][0])
    except ValueError:
        rows = rows[1:]
    data = np.array(rows, dtype=float)
    if data.ndim != 2 or data.shape[1] != 3:
        raise ValueError(f"{path}: expected columns x, y, value")
    return data[:, :2], data[:, 2]


def _scattered(path: Path, pts: np.ndarray) -> np.ndarray:
    xy, v = _read_xyv(path)
    out = LinearNDInterpolator(xy, v)(pts)
    miss = ~np.isfinite(out)
    if miss.any():
        out[miss] = NearestNDInterpolator(xy, v)(pts[miss])
    return out


# ---------------------------------------------------------------------------
# scenario


@dataclass(frozen=True)
class Tolerances:
    tol_rel: float = 1e-12  # solver stopping rule on the windowed relative energy decrease
    tol_lip: float = 1e-9  # slack on worst_ratio <= 1
    tol_theta: float = 1e-9  # Theta(q) > tol_theta defines the endpoint
    tol_area: float = 0.01  # admissible offending area fraction after repair
    tol_energy: float = 1e-6  # admissible relaxed-energy increase after repair
    tol_comparison: float = 1e-6  # admissible negative sandwich margin

    def __post_init__(self):
        for k, v in asdict(self).items():
            if not v > 0:
                raise ValueError(f"tolerance {k} must be positive, got {v}")


@dataclass(frozen=True)
class Scenario:
    name: str
    domain: DomainSpec
    lagrangian: str
    lagrangian_params: dict = field(default_factory=dict)
    g: dict = field(default_factory=lambda: {"constant": 0.0})
    phi: dict = field(default_factory=lambda: {"trace": "zero"})
    ks: tuple[int, ...] = (4, 8, 16, 32, 64, 128, 256)
    sigma_ratio: float = 0.1
    t_max: float = 8.0
    tolerances: Tolerances = Tolerances()
    c_sobolev: float = 1.0
    mode: str = "convex"
    R: float = 1.0  # uniform convexity radius tested for the domain
    M: float = 10.0  # slope bound tested for the boundary data
    lbsc_samples: int | None = None
    direct: bool = False  # also minimize with f itself (needs a gradient oracle)
    max_iters: int = 20000
    anchors: int = 8
    two_start: bool = False
    holder: dict | None = None  # {"p": .., "c": ..}
    oracle: str | None = None
    relax_k: int = 64
    max_passes: int = 50
    convexify_t_max: float = 6.0
    primal_box: tuple[float, float] = (1.6, 0.02)  # half-width, step for the biconjugate
    dual_box: tuple[float, float] = (40.0, 0.05)
    conjugate_box: tuple[float, float] = (4.0, 0.08)
    base_dir: str = "."

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.lagrangian not in catalog():
            raise ValueError(f"unknown Lagrangian {self.lagrangian!r}; known: {sorted(catalog())}")
        if len(self.g) != 1 or next(iter(self.g)) not in ("constant", "field", "csv"):
            raise ValueError("g must have exactly one of constant, field, csv")
        if "field" in self.g and self.g["field"]["name"] not in G_FIELDS:
            raise ValueError(f"unknown g field {self.g['field']['name']!r}; known: {sorted(G_FIELDS)}")
        if len(self.phi) != 1 or next(iter(self.phi)) not in ("affine", "trace", "csv"):
            raise ValueError("phi must have exactly one of affine, trace, csv")
        if "trace" in self.phi and self.phi["trace"]["name"] not in TRACES:
            raise ValueError(f"unknown trace {self.phi['trace']['name']!r}; known: {sorted(TRACES)}")
        if not self.c_sobolev > 0 or not self.R > 0 or not self.M >= 0:
            raise ValueError("c_sobolev and R must be positive, M nonnegative")
        if self.holder is not None and not {"p", "c"} <= set(self.holder):
            raise ValueError("holder needs p and c")

    # -- data ---------------------------------------------------------------

    def make_lagrangian(self) -> Lagrangian:
        params = dict(self.lagrangian_params)
        if self.lagrangian == "tabulated":
            path = Path(params.pop("path"))
            return load_tabulated(path if path.is_absolute() else Path(self.base_dir) / path, **params)
        return make_lagrangian(self.lagrangian, **params)

    def g_values(self, mesh: Mesh) -> np.ndarray:
        (kind, spec), = self.g.items()
        if kind == "constant":
            return np.full(mesh.n_vertices, float(spec))
        if kind == "field":
            params = {k: v for k, v in spec.items() if k != "name"}
            return G_FIELDS[spec["name"]][0](mesh.vertices, **params)
        return _scattered(self._path(spec), mesh.vertices)

    def g_norm(self, mesh: Mesh) -> float:
        return float(np.max(np.abs(self.g_values(mesh))))

    def phi_values(self, mesh: Mesh) -> np.ndarray:
        (kind, spec), = self.phi.items()
        gam = mesh.boundary_points
        if kind == "affine":
            return gam @ np.asarray(spec.get("a", (0.0, 0.0)), dtype=float) + float(spec.get("b", 0.0))
        if kind == "trace":
            params = {k: v for k, v in spec.items() if k != "name"}
            return TRACES[spec["name"]][0](gam, **params)
        return _scattered(self._path(spec), gam)

    def _path(self, p: str) -> Path:
        path = Path(p)
        return path if path.is_absolute() else Path(self.base_dir) / path

    # -- serialization --------------------------------------------------------

    def to_dict(self) -> dict:
        d = asdict(self)
        d["domain"] = self.domain.to_dict()
        d["ks"] = list(self.ks)
        for k in ("primal_box", "dual_box", "conjugate_box"):
            d[k] = list(d[k])
        d.pop("base_dir")
        return d

    @classmethod
    def from_dict(cls, d: dict, base_dir: str | Path = ".") -> "Scenario":
        d = dict(d)
        known = set(cls.__dataclass_fields__) | {"schedule", "tolerances", "geometry", "certify", "solve", "nonconvex",
                                                 "pipeline"}
        extra = set(d) - known
        if extra:
            raise ValueError(f"unknown scenario keys {sorted(extra)}")
        kw: dict = {"name": d["name"], "domain": DomainSpec.from_dict(d["domain"]), "base_dir": str(base_dir)}
        lag = d["lagrangian"]
        if isinstance(lag, str):
            kw["lagrangian"] = lag
        else:
            lag = dict(lag)
            kw["lagrangian"] = lag.pop("name")
            kw["lagrangian_params"] = lag
        if "g" in d:
            kw["g"] = _wrap(d["g"], "field")
        if "phi" in d:
            kw["phi"] = _wrap(d["phi"], "trace")
        for key in ("c_sobolev", "holder", "oracle", "mode"):
            if key in d:
                kw[key] = d[key]
        if "pipeline" in d:
            kw["mode"] = d["pipeline"].get("mode", kw.get("mode", "convex"))
        sched = d.get("schedule", {})
        if "ks" in sched:
            kw["ks"] = tuple(int(k) for k in sched["ks"])
        for key in ("sigma_ratio", "t_max"):
            if key in sched:
                kw[key] = float(sched[key])
        if "tolerances" in d:
            kw["tolerances"] = Tolerances(**d["tolerances"])
        for section, keys in (
            ("geometry", ("R", "M", "lbsc_samples")),
            ("solve", ("direct", "max_iters")),
            ("certify", ("anchors", "two_start")),
            ("nonconvex", ("relax_k", "max_passes", "convexify_t_max", "primal_box", "dual_box")),
        ):
            for key in keys:
                if key in d.get(section, {}):
                    v = d[section][key]
                    kw[key] = tuple(v) if isinstance(v, list) else v
        # flat field names, as written by to_dict, fill whatever the sections left unset
        for key in cls.__dataclass_fields__:
            if key in d and key not in kw and key not in ("g", "phi"):
                v = d[key]
                if key == "tolerances":
                    v = Tolerances(**v)
                elif key == "ks":
                    v = tuple(int(k) for k in v)
                elif isinstance(v, list):
                    v = tuple(v)
                kw[key] = v
        return cls(**kw)


def _wrap(spec, named_key: str) -> dict:
    """Normalize the short forms ``g = 1.0`` and ``phi = {trace = "zero"}``."""
    if isinstance(spec, (int, float)):
        return {"constant": float(spec)}
    spec = dict(spec)
    if named_key in spec and isinstance(spec[named_key], str):
        name = spec.pop(named_key)
        return {named_key: {"name": name, **spec}}
    return spec


def builtin_scenarios() -> dict[str, Path]:
    root = resources.files("lbsclab") / "scenarios"
    return {Path(p.name).stem: Path(str(p)) for p in sorted(root.iterdir(), key=lambda p: p.name) if p.name.endswith(".toml")}


def load_scenario(ref: str | Path) -> Scenario:
    """Load a scenario from a TOML path or by built-in name."""
    path = Path(ref)
    if not path.exists():
        builtins = builtin_scenarios()
        if str(ref) not in builtins:
            raise FileNotFoundError(f"no scenario file {ref!r} and no built-in of that name; built-ins: {sorted(builtins)}")
        path = builtins[str(ref)]
    with open(path, "rb") as fh:
        data = tomllib.load(fh)
    return Scenario.from_dict(data, base_dir=path.parent)


def list_catalog() -> str:
    lines = ["Lagrangians:"]
    lines += [f"  {k:<16} {v}" for k, v in catalog().items()]
    lines.append("Boundary traces:")
    lines += [f"  {k:<16} {v[1]}" for k, v in sorted(TRACES.items())]
    lines.append("  affine           a . x + b")
    lines.append("g fields:")
    lines.append("  constant         a single value")
    lines += [f"  {k:<16} {v[1]}" for k, v in sorted(G_FIELDS.items())]
    lines.append("Scenarios:")
    lines += [f"  {k}" for k in builtin_scenarios()]
    return "\n".join(lines) + "\n"
