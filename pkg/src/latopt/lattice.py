"""Implicit bar-lattice unit cells.

A unit is a list of capsules (segment + width) over a fundamental domain.
Capsule level sets are blended with a log-sum-exp softmin, projected to
densities with a cubic regularized Heaviside and mirrored to the full cell.
Level sets are negative inside material.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field, replace

import numpy as np
import scipy.sparse as sp

from .exceptions import ParameterError

SYMMETRY_GROUPS = ("quarter-mirror", "none")
DEFAULT_KS_K = 100.0
DEFAULT_GAMMA = 0.005


@dataclass(frozen=True)
class Bar:
    v1: tuple[float, float]
    v2: tuple[float, float]
    p: float
    connector: bool = False

    def __post_init__(self):
        object.__setattr__(self, "v1", tuple(float(c) for c in self.v1))
        object.__setattr__(self, "v2", tuple(float(c) for c in self.v2))
        object.__setattr__(self, "p", float(self.p))
        if not self.p > 0:
            raise ParameterError(f"bar width must be positive, got {self.p}")
        if np.allclose(self.v1, self.v2, rtol=0, atol=1e-12):
            raise ParameterError("bar endpoints coincide")
        # connectors live in tile coordinates and may leave the unit square
        if not self.connector:
            pts = np.array([self.v1, self.v2])
            if pts.min() < -1e-9 or pts.max() > 1 + 1e-9:
                raise ParameterError(f"bar endpoints {self.v1}, {self.v2} leave the unit cell")

    @property
    def length(self) -> float:
        return float(np.hypot(self.v2[0] - self.v1[0], self.v2[1] - self.v1[1]))

    def to_dict(self) -> dict:
        d = {"v1": list(self.v1), "v2": list(self.v2), "p": self.p}
        if self.connector:
            d["connector"] = True
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "Bar":
        return cls(tuple(d["v1"]), tuple(d["v2"]), d["p"], bool(d.get("connector", False)))


class SymmetryMap:
    """Map from full-grid voxels to fundamental-domain design voxels (``rho = L mu``)."""

    def __init__(self, N: int, group: str = "quarter-mirror"):
        if group not in SYMMETRY_GROUPS:
            raise ParameterError(f"unknown symmetry group {group!r}")
        self.N = int(N)
        self.group = group
        idx = np.arange(self.N)
        if group == "quarter-mirror":
            self.n_fund = (self.N + 1) // 2
            fold = np.minimum(idx, self.N - 1 - idx)
        else:
            self.n_fund = self.N
            fold = idx
        self.n_design = self.n_fund * self.n_fund
        # rows are y, columns are x
        self.index = fold[:, None] * self.n_fund + fold[None, :]

    @property
    def fundamental_centers(self) -> np.ndarray:
        c = (np.arange(self.n_fund) + 0.5) / self.N
        X, Y = np.meshgrid(c, c)
        return np.column_stack([X.ravel(), Y.ravel()])

    @property
    def matrix(self) -> sp.csr_matrix:
        n_full = self.N * self.N
        return sp.csr_matrix((np.ones(n_full), (np.arange(n_full), self.index.ravel())),
                             shape=(n_full, self.n_design))

    def expand(self, design_values: np.ndarray) -> np.ndarray:
        """Fill the full (N, N, ...) grid from fundamental values (n_design, ...)."""
        return np.asarray(design_values)[self.index]

    def fold(self, full_values: np.ndarray) -> np.ndarray:
        """Transpose of :meth:`expand`: sum each design voxel's mirror images."""
        full = np.asarray(full_values)
        out = np.zeros((self.n_design,) + full.shape[2:])
        np.add.at(out, self.index.ravel(), full.reshape((self.N * self.N,) + full.shape[2:]))
        return out


@dataclass(frozen=True)
class LatticeUnit:
    bars: tuple[Bar, ...]
    symmetry: str = "quarter-mirror"
    ks_k: float = DEFAULT_KS_K
    heaviside_gamma: float = DEFAULT_GAMMA
    name: str = ""

    def __post_init__(self):
        object.__setattr__(self, "bars", tuple(self.bars))
        if not self.bars:
            raise ParameterError("a lattice unit needs at least one bar")
        if not self.ks_k > 0:
            raise ParameterError("ks_k must be positive")
        if not self.heaviside_gamma > 0:
            raise ParameterError("heaviside_gamma must be positive")
        if self.symmetry not in SYMMETRY_GROUPS:
            raise ParameterError(f"unknown symmetry group {self.symmetry!r}")

    @property
    def n_bars(self) -> int:
        return len(self.bars)

    @property
    def widths(self) -> np.ndarray:
        return np.array([b.p for b in self.bars])

    @property
    def endpoints(self) -> np.ndarray:
        """Array (m, 2, 2) of bar endpoints."""
        return np.array([[b.v1, b.v2] for b in self.bars])

    def with_widths(self, p) -> "LatticeUnit":
        p = np.asarray(p, dtype=float)
        if p.shape != (self.n_bars,):
            raise ParameterError(f"expected {self.n_bars} widths, got shape {p.shape}")
        return replace(self, bars=tuple(replace(b, p=float(w)) for b, w in zip(self.bars, p)))

    def full_cell_bars(self) -> list[Bar]:
        """Bars of the whole cell after applying the symmetry group."""
        if self.symmetry == "none":
            return list(self.bars)
        out, seen = [], set()
        for b in self.bars:
            for sx in (False, True):
                for sy in (False, True):
                    def m(v):
                        return (1.0 - v[0] if sx else v[0], 1.0 - v[1] if sy else v[1])
                    nb = replace(b, v1=m(b.v1), v2=m(b.v2))
                    key = tuple(sorted([tuple(np.round(nb.v1, 12)), tuple(np.round(nb.v2, 12))])) + (nb.p,)
                    if key not in seen:
                        seen.add(key)
                        out.append(nb)
        return out

    def to_dict(self) -> dict:
        return {"name": self.name, "symmetry": self.symmetry, "ks_k": self.ks_k,
                "gamma": self.heaviside_gamma, "bars": [b.to_dict() for b in self.bars]}

    @classmethod
    def from_dict(cls, d: dict) -> "LatticeUnit":
        return cls(bars=tuple(Bar.from_dict(b) for b in d["bars"]),
                   symmetry=d.get("symmetry", "quarter-mirror"),
                   ks_k=float(d.get("ks_k", DEFAULT_KS_K)),
                   heaviside_gamma=float(d.get("gamma", DEFAULT_GAMMA)),
                   name=d.get("name", ""))

    def to_json(self, **kwargs) -> str:
        return json.dumps(self.to_dict(), **kwargs)

    @classmethod
    def from_json(cls, text: str) -> "LatticeUnit":
        return cls.from_dict(json.loads(text))


def bar_distance(x, v1, v2) -> np.ndarray:
    """Distance from points ``x`` (..., 2) to the segment ``[v1, v2]``."""
    x = np.asarray(x, dtype=float)
    v1 = np.asarray(v1, dtype=float)
    v2 = np.asarray(v2, dtype=float)
    a = v2 - v1
    aa = a @ a
    if aa == 0.0:
        raise ParameterError("degenerate segment")
    b = x - v1
    ab = b @ a
    g = b - np.multiply.outer(ab / aa, a)
    e = x - v2
    return np.where(ab <= 0.0, np.linalg.norm(b, axis=-1),
                    np.where(ab >= aa, np.linalg.norm(e, axis=-1), np.linalg.norm(g, axis=-1)))


def bar_levelset(x, bar: Bar) -> np.ndarray:
    return bar_distance(x, bar.v1, bar.v2) - 0.5 * bar.p


def ks_blend(values, k: float) -> np.ndarray:
    """Smooth union (softmin) along the last axis: ``-(1/k) ln sum exp(-k v)``."""
    if not k > 0:
        raise ParameterError("blending coefficient must be positive")
    v = np.asarray(values, dtype=float)
    if v.shape[-1] == 0:
        raise ParameterError("nothing to blend")
    vmin = v.min(axis=-1, keepdims=True)
    s = np.exp(-k * (v - vmin)).sum(axis=-1)
    return vmin[..., 0] - np.log(s) / k


def ks_weights(values, k: float) -> np.ndarray:
    """Softmin weights, the derivative of :func:`ks_blend` w.r.t. each input."""
    v = np.asarray(values, dtype=float)
    w = np.exp(-k * (v - v.min(axis=-1, keepdims=True)))
    return w / w.sum(axis=-1, keepdims=True)


def heaviside(omega, gamma: float) -> np.ndarray:
    if not gamma > 0:
        raise ParameterError("gamma must be positive")
    w = np.asarray(omega, dtype=float)
    t = np.clip(w / gamma, -1.0, 1.0)
    return -0.75 * (t - t ** 3 / 3.0) + 0.5


def heaviside_derivative(omega, gamma: float) -> np.ndarray:
    w = np.asarray(omega, dtype=float)
    return np.where(np.abs(w) <= gamma, 3.0 * (w * w - gamma * gamma) / (4.0 * gamma ** 3), 0.0)


@dataclass
class VoxelGeometry:
    """Width-independent rasterization data: voxel-to-axis distances per bar."""

    N: int
    symmetry: SymmetryMap
    distances: np.ndarray = field(repr=False)  # (n_design, m)


def voxel_geometry(unit: LatticeUnit, N: int) -> VoxelGeometry:
    if N < 4:
        raise ParameterError(f"grid resolution must be at least 4, got {N}")
    sym = SymmetryMap(N, unit.symmetry)
    x = sym.fundamental_centers
    d = np.column_stack([bar_distance(x, b.v1, b.v2) for b in unit.bars])
    return VoxelGeometry(N, sym, d)


def _omega(unit, geom):
    iota = geom.distances - 0.5 * unit.widths[None, :]
    return iota, ks_blend(iota, unit.ks_k)


def rasterize(unit: LatticeUnit, N: int, geometry: VoxelGeometry | None = None) -> np.ndarray:
    """Density grid ``rho[iy, ix]`` sampled at voxel centers."""
    geom = geometry or voxel_geometry(unit, N)
    _, omega = _omega(unit, geom)
    return geom.symmetry.expand(heaviside(omega, unit.heaviside_gamma))


def density_gradient(unit: LatticeUnit, N: int, geometry: VoxelGeometry | None = None) -> np.ndarray:
    """Analytic ``d rho / d p`` on the full grid, shape (N, N, m)."""
    geom = geometry or voxel_geometry(unit, N)
    iota, omega = _omega(unit, geom)
    dH = heaviside_derivative(omega, unit.heaviside_gamma)
    g = dH[:, None] * (-0.5 * ks_weights(iota, unit.ks_k))
    return geom.symmetry.expand(g)


def volume_fraction(rho: np.ndarray) -> float:
    return float(np.mean(rho))
