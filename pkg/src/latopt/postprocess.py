"""Manufacturability repair of optimized lattice units and macro tiling."""
from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .exceptions import ConnectorError, EmptyUnitError, ParameterError
from .lattice import Bar, LatticeUnit, bar_distance, heaviside, ks_blend, rasterize

log = logging.getLogger(__name__)

P_THRESHOLD = 0.02
RHO_CUT = 0.5
EDGES = ("right", "left", "top", "bottom")
_EIGHT = np.ones((3, 3), dtype=int)


@dataclass
class ConnectivityReport:
    n_components: int
    sizes: np.ndarray
    dangling: list = field(default_factory=list)
    labels: np.ndarray | None = field(default=None, repr=False)

    @property
    def connected(self) -> bool:
        return self.n_components == 1


# ---------------------------------------------------------------------------
# pruning


def _domain_bounds(unit: LatticeUnit) -> tuple[float, float]:
    return (0.0, 0.5) if unit.symmetry == "quarter-mirror" else (0.0, 1.0)


def _on_boundary(pt, lo: float, hi: float, tol: float = 1e-9) -> bool:
    return bool(np.any(np.abs(np.asarray(pt) - lo) <= tol) or np.any(np.abs(np.asarray(pt) - hi) <= tol))


def _is_supported(pt, others: list[Bar], tol: float = 1e-9) -> bool:
    for b in others:
        if bar_distance(np.asarray(pt, dtype=float)[None, :], b.v1, b.v2)[0] <= tol:
            return True
    return False


def dangling_bars(bars: list[Bar], lo: float, hi: float) -> list[int]:
    """Indices of bars with a free endpoint that is neither shared nor on the domain boundary."""
    out = []
    for i, b in enumerate(bars):
        others = bars[:i] + bars[i + 1:]
        for pt in (b.v1, b.v2):
            if not _on_boundary(pt, lo, hi) and not _is_supported(pt, others):
                out.append(i)
                break
    return out


def prune_bars(unit: LatticeUnit, p_threshold: float = P_THRESHOLD) -> LatticeUnit:
    """Drop bars thinner than ``p_threshold``, then dangling bars until nothing changes."""
    if p_threshold < 0:
        raise ParameterError("p_threshold must be non-negative")
    lo, hi = _domain_bounds(unit)
    bars = [b for b in unit.bars if b.p >= p_threshold]
    while bars:
        drop = dangling_bars(bars, lo, hi)
        if not drop:
            break
        bars = [b for i, b in enumerate(bars) if i not in drop]
    if not bars:
        raise EmptyUnitError("pruning removed every bar of the unit")
    if len(bars) == unit.n_bars:
        return unit
    return LatticeUnit(bars=tuple(bars), symmetry=unit.symmetry, ks_k=unit.ks_k,
                       heaviside_gamma=unit.heaviside_gamma, name=unit.name)


# ---------------------------------------------------------------------------
# connectivity and volume


def connectivity(grid, rho_cut: float = RHO_CUT, unit: LatticeUnit | None = None) -> ConnectivityReport:
    """8-connected components of ``{rho >= rho_cut}``."""
    if not 0 < rho_cut < 1:
        raise ParameterError("rho_cut must lie in (0, 1)")
    solid = np.asarray(grid) >= rho_cut
    labels, n = ndimage.label(solid, structure=_EIGHT)
    sizes = np.bincount(labels.ravel(), minlength=n + 1)[1:]
    dangling = []
    if unit is not None:
        lo, hi = _domain_bounds(unit)
        dangling = dangling_bars(list(unit.bars), lo, hi)
    return ConnectivityReport(n_components=int(n), sizes=sizes, dangling=dangling, labels=labels)


def _scaled(unit: LatticeUnit, factor: float, p_min: float, p_max: float) -> LatticeUnit:
    return unit.with_widths(np.clip(unit.widths * factor, p_min, p_max))


def rescale_factor(unit: LatticeUnit, V_star: float, N: int, p_min: float = 0.01,
                   p_max: float = 0.5, iters: int = 60) -> tuple[float, float]:
    """Largest common width factor keeping the volume at or below ``V_star``; ``(factor, volume)``."""
    w = unit.widths

    def vol(f):
        return float(rasterize(_scaled(unit, f, p_min, p_max), N).mean())

    f_lo = p_min / w.max()
    f_hi = p_max / w.min()
    v_lo, v_hi = vol(f_lo), vol(f_hi)
    if v_hi <= V_star:
        return f_hi, v_hi
    if v_lo > V_star:
        return f_lo, v_lo
    a, b = np.log(f_lo), np.log(f_hi)
    for _ in range(iters):
        m = 0.5 * (a + b)
        if vol(np.exp(m)) <= V_star:
            a = m
        else:
            b = m
    return float(np.exp(a)), vol(np.exp(a))


def rescale_volume(unit: LatticeUnit, V_star: float, N: int, p_min: float = 0.01,
                   p_max: float = 0.5) -> LatticeUnit:
    if not 0 < V_star < 1:
        raise ParameterError("V_star must lie in (0, 1)")
    factor, v = rescale_factor(unit, V_star, N, p_min, p_max)
    if not V_star - 0.002 <= v <= V_star:
        warnings.warn(f"volume band unreachable; closest achievable volume {v:.4f} (target {V_star})",
                      RuntimeWarning, stacklevel=2)
    return _scaled(unit, factor, p_min, p_max)


# ---------------------------------------------------------------------------
# connectors between neighbouring cells


_OFFSETS = {"right": (1.0, 0.0), "left": (-1.0, 0.0), "top": (0.0, 1.0), "bottom": (0.0, -1.0)}


def _edge_distance(pts: np.ndarray, edge: str, side: str) -> np.ndarray:
    """Distance of cell-local points to the shared edge, seen from cell A or cell B."""
    axis = 0 if edge in ("right", "left") else 1
    at_high = edge in ("right", "top")
    if side == "B":
        at_high = not at_high
    return (1.0 - pts[:, axis]) if at_high else pts[:, axis]


def rasterize_bars(bars: list[Bar], shape: tuple[int, int], N: int, gamma: float, ks_k: float,
                   origin=(0.0, 0.0)) -> np.ndarray:
    """Density of a bar union over a ``shape`` voxel block whose lower-left corner is ``origin``."""
    ny, nx = shape
    ys = origin[1] + (np.arange(ny) + 0.5) / N
    xs = origin[0] + (np.arange(nx) + 0.5) / N
    X, Y = np.meshgrid(xs, ys)
    pts = np.column_stack([X.ravel(), Y.ravel()])
    iota = np.column_stack([bar_distance(pts, b.v1, b.v2) - 0.5 * b.p for b in bars])
    return heaviside(ks_blend(iota, ks_k), gamma).reshape(ny, nx)


def tile_pair(unitA: LatticeUnit, unitB: LatticeUnit, edge: str, N: int,
              connectors: list[Bar] = ()) -> np.ndarray:
    """Two-cell density grid with B placed across ``edge`` of A, plus connectors."""
    if edge not in EDGES:
        raise ParameterError(f"edge must be one of {EDGES}")
    gA, gB = rasterize(unitA, N), rasterize(unitB, N)
    if edge == "right":
        tile, origin = np.hstack([gA, gB]), (0.0, 0.0)
    elif edge == "left":
        tile, origin = np.hstack([gB, gA]), (-1.0, 0.0)
    elif edge == "top":
        tile, origin = np.vstack([gA, gB]), (0.0, 0.0)
    else:
        tile, origin = np.vstack([gB, gA]), (0.0, -1.0)
    if connectors:
        extra = rasterize_bars(list(connectors), tile.shape, N, unitA.heaviside_gamma, unitA.ks_k, origin)
        tile = np.maximum(tile, extra)
    return tile


def _tile_index(pt, edge: str, N: int, shape) -> tuple[int, int]:
    origin = {"right": (0.0, 0.0), "left": (-1.0, 0.0), "top": (0.0, 0.0), "bottom": (0.0, -1.0)}[edge]
    ix = int(np.clip(np.floor((pt[0] - origin[0]) * N), 0, shape[1] - 1))
    iy = int(np.clip(np.floor((pt[1] - origin[1]) * N), 0, shape[0] - 1))
    return iy, ix


def _candidates(unit: LatticeUnit, edge: str, side: str, shift=(0.0, 0.0)):
    bars = unit.full_cell_bars()
    out = []
    for b in bars:
        for pt in (b.v1, b.v2):
            pt = np.asarray(pt, dtype=float)
            if _edge_distance(pt[None, :], edge, side)[0] <= 0.5 + 1e-12:
                out.append((pt + np.asarray(shift), b.p))
    return out


def connect_adjacent(unitA: LatticeUnit, unitB: LatticeUnit, shared_edge: str = "right", N: int = 40,
                     rho_cut: float = RHO_CUT, max_connectors: int = 8) -> list[Bar]:
    """Connector bars (in A's cell coordinates) joining A to its neighbour B across ``shared_edge``.

    Connectors are added between the closest endpoint pair lying in different
    components of the two-cell tile until the tile is a single component.
    """
    if shared_edge not in EDGES:
        raise ParameterError(f"edge must be one of {EDGES}")
    shift = _OFFSETS[shared_edge]
    cand_a = _candidates(unitA, shared_edge, "A")
    cand_b = _candidates(unitB, shared_edge, "B", shift)
    if not cand_a or not cand_b:
        raise ConnectorError(shared_edge, "no bar endpoints within 0.5 cell widths of the edge")
    connectors: list[Bar] = []
    tried = set()
    for _ in range(max_connectors + 1):
        tile = tile_pair(unitA, unitB, shared_edge, N, connectors)
        rep = connectivity(tile, rho_cut)
        if rep.n_components <= 1:
            return connectors
        best = None
        for i, (pa, wa) in enumerate(cand_a):
            la = rep.labels[_tile_index(pa, shared_edge, N, tile.shape)]
            for j, (pb, wb) in enumerate(cand_b):
                lb = rep.labels[_tile_index(pb, shared_edge, N, tile.shape)]
                if (i, j) in tried or (la == lb and la != 0):
                    continue
                d = float(np.linalg.norm(pa - pb))
                if d <= 1e-12:
                    continue
                if best is None or d < best[0] - 1e-12:
                    best = (d, i, j, pa, pb, wa, wb)
        if best is None or len(connectors) == max_connectors:
            break
        _, i, j, pa, pb, wa, wb = best
        tried.add((i, j))
        width = max(0.5 * (wa + wb), 2.0 / N)
        connectors.append(Bar(tuple(pa), tuple(pb), width, connector=True))
    raise ConnectorError(shared_edge, "could not connect the two cells")


# ---------------------------------------------------------------------------
# macro tiling


@dataclass
class AssemblyReport:
    grid: np.ndarray
    connectors: dict
    failures: list


def assemble_structure(labels, units, nx: int, ny: int, N: int, connect: bool = True,
                       rho_cut: float = RHO_CUT) -> AssemblyReport:
    """Tile the macro layout with per-label unit densities and splice connectors.

    ``labels`` is ordered like macro elements (``e = ey * nx + ex``, ``ey = 0`` at
    the bottom); the returned grid has row 0 at the bottom.
    """
    labels = np.asarray(labels, dtype=int).reshape(ny, nx)
    missing = set(np.unique(labels)) - set(range(len(units))) if isinstance(units, (list, tuple)) \
        else set(np.unique(labels)) - set(units)
    if missing:
        raise ParameterError(f"no unit for labels {sorted(missing)}")
    blocks = {k: rasterize(units[k], N) for k in np.unique(labels)}
    grid = np.zeros((ny * N, nx * N))
    for ey in range(ny):
        for ex in range(nx):
            grid[ey * N:(ey + 1) * N, ex * N:(ex + 1) * N] = blocks[labels[ey, ex]]
    conns: dict = {}
    failures = []
    if connect:
        pairs = []
        for ey in range(ny):
            for ex in range(nx):
                a = labels[ey, ex]
                if ex + 1 < nx and labels[ey, ex + 1] != a:
                    pairs.append((ey, ex, "right", a, labels[ey, ex + 1]))
                if ey + 1 < ny and labels[ey + 1, ex] != a:
                    pairs.append((ey, ex, "top", a, labels[ey + 1, ex]))
        for ey, ex, edge, a, b in pairs:
            key = (int(a), int(b), edge)
            if key not in conns:
                try:
                    conns[key] = connect_adjacent(units[a], units[b], edge, N, rho_cut)
                except ConnectorError as exc:
                    conns[key] = []
                    failures.append((key, str(exc)))
                    log.warning("connector failure %s: %s", key, exc)
            bars = conns[key]
            if not bars:
                continue
            if edge == "right":
                r0, c0, shape = ey * N, ex * N, (N, 2 * N)
            else:
                r0, c0, shape = ey * N, ex * N, (2 * N, N)
            extra = rasterize_bars(bars, shape, N, units[a].heaviside_gamma, units[a].ks_k)
            window = grid[r0:r0 + shape[0], c0:c0 + shape[1]]
            np.maximum(window, extra, out=window)
    return AssemblyReport(grid=grid, connectors=conns, failures=failures)
