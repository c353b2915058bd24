"""Run configuration: flat dotted keys (TOML syntax) or JSON.

Example::

    macro.nx = 48
    macro.ny = 24
    macro.material_class = "isotropic"
    micro.N = 40
    micro.template = "full21"
    micro.lambda_B = 0.4
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # Python 3.10
    import tomli as tomllib

from .exceptions import ConfigError
from .fmo import MATERIAL_CLASSES
from .templates import TEMPLATES


@dataclass
class MacroConfig:
    nx: int = 48
    ny: int = 24
    problem: str = "bridge"
    load_magnitude: float = 0.1
    material_class: str = "isotropic"
    T0_fraction: float = 0.35
    delta_fraction: float = 0.02
    K_clusters: int = 5
    max_iter: int = 200
    # only read for problem = "custom": "ix,iy,dirs" entries and "ix,iy,fx,fy" entries
    supports: list = field(default_factory=list)
    loads: list = field(default_factory=list)


@dataclass
class MicroConfig:
    N: int = 40
    template: str = "full21"
    penal: float = 3.0
    E_min_static: float = 1e-3
    E_min_buckling: float = 1e-4
    V_star: float = 0.35
    lambda_B: float = 0.0
    P_lower: float = 1.0
    n_b: int = 6
    ks_k: float = 100.0
    gamma: float = 0.005
    p_min: float = 0.01
    p_max: float = 0.5
    max_iter: int = 150
    tol: float = 1e-4
    enforce_buckling: bool = False


@dataclass
class PostConfig:
    p_threshold: float = 0.02
    rho_cut: float = 0.5
    rescale: bool = True
    connect: bool = True


@dataclass
class PipelineConfig:
    macro: MacroConfig = field(default_factory=MacroConfig)
    micro: MicroConfig = field(default_factory=MicroConfig)
    post: PostConfig = field(default_factory=PostConfig)

    def to_dict(self) -> dict:
        return asdict(self)

    def validate(self) -> "PipelineConfig":
        m, u, p = self.macro, self.micro, self.post
        checks = [
            (m.nx >= 2 and m.ny >= 1, "macro.nx >= 2 and macro.ny >= 1"),
            (m.problem in ("bridge", "custom"), "macro.problem in {bridge, custom}"),
            (m.load_magnitude > 0, "macro.load_magnitude > 0"),
            (m.material_class in MATERIAL_CLASSES, f"macro.material_class in {MATERIAL_CLASSES}"),
            (0 < m.T0_fraction <= 1, "0 < macro.T0_fraction <= 1"),
            (0 <= m.delta_fraction <= m.T0_fraction, "0 <= macro.delta_fraction <= macro.T0_fraction"),
            (1 <= m.K_clusters <= m.nx * m.ny, "1 <= macro.K_clusters <= nx * ny"),
            (m.max_iter >= 1, "macro.max_iter >= 1"),
            (u.N >= 4, "micro.N >= 4"),
            (u.template in TEMPLATES, f"micro.template in {sorted(TEMPLATES)}"),
            (u.penal >= 1, "micro.penal >= 1"),
            (0 < u.E_min_static < 1 and 0 < u.E_min_buckling < 1, "E_min values in (0, 1)"),
            (0 < u.V_star < 1, "0 < micro.V_star < 1"),
            (0 <= u.lambda_B <= 1, "0 <= micro.lambda_B <= 1"),
            (u.P_lower > 0, "micro.P_lower > 0"),
            (u.n_b >= 1, "micro.n_b >= 1"),
            (u.ks_k > 0 and u.gamma > 0, "micro.ks_k and micro.gamma positive"),
            (0 < u.p_min < u.p_max <= 1, "0 < micro.p_min < micro.p_max <= 1"),
            (u.max_iter >= 0 and u.tol > 0, "micro.max_iter >= 0 and micro.tol > 0"),
            (p.p_threshold >= 0, "post.p_threshold >= 0"),
            (0 < p.rho_cut < 1, "0 < post.rho_cut < 1"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ConfigError(f"config value out of range: {msg}")
        if m.problem == "custom" and (not m.supports or not m.loads):
            raise ConfigError("macro.problem = custom needs macro.supports and macro.loads")
        return self


_SECTIONS = {"macro": MacroConfig, "micro": MicroConfig, "post": PostConfig}


def _flatten(d: dict, prefix: str = "") -> dict:
    out = {}
    for k, v in d.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict):
            out.update(_flatten(v, key + "."))
        else:
            out[key] = v
    return out


def _coerce(value, proto, key):
    if isinstance(proto, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{key} must be true or false")
        return value
    if isinstance(proto, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{key} must be an integer")
        return value
    if isinstance(proto, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key} must be a number")
        return float(value)
    if isinstance(proto, list):
        if not isinstance(value, list) or not all(isinstance(x, str) for x in value):
            raise ConfigError(f"{key} must be a list of strings")
        return list(value)
    if not isinstance(value, str):
        raise ConfigError(f"{key} must be a string")
    return value


def config_from_mapping(data: dict) -> PipelineConfig:
    cfg = PipelineConfig()
    for key, value in _flatten(data).items():
        section, _, name = key.partition(".")
        if section not in _SECTIONS or not name:
            raise ConfigError(f"unknown config key {key!r}")
        target = getattr(cfg, section)
        names = {f.name for f in fields(target)}
        if name not in names:
            raise ConfigError(f"unknown config key {key!r}")
        setattr(target, name, _coerce(value, getattr(target, name), key))
    return cfg.validate()


def parse_config(text: str, fmt: str = "auto") -> PipelineConfig:
    if fmt == "auto":
        fmt = "json" if text.lstrip().startswith("{") else "toml"
    try:
        data = json.loads(text) if fmt == "json" else tomllib.loads(text)
    except (json.JSONDecodeError, tomllib.TOMLDecodeError) as exc:
        raise ConfigError(f"cannot parse config: {exc}") from None
    return config_from_mapping(data)


def load_config(path) -> PipelineConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return parse_config(text, "json" if path.suffix == ".json" else "auto")


SMOKE_CONFIG = """\
macro.nx = 12
macro.ny = 6
macro.K_clusters = 2
micro.N = 20
micro.max_iter = 10
micro.V_star = 0.5
"""
