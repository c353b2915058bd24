"""Two-stage pipeline: macro FMO and clustering, per-cluster cell design, assembly."""
from __future__ import annotations

import logging
import os
import time
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import __version__
from .artifacts import (read_json, write_csv, write_field_csv, write_grid_csv, write_json, write_pgm)
from .buckling import KS_MU_FACTOR, analyze
from .clustering import (ClusterAssignment, ClusterStrainLoads, clustered_fmo, hierarchical_cluster,
                         select_cluster_strains)
from .config import PipelineConfig
from .core_fe import QuadMesh, base_material
from .exceptions import EmptyUnitError, LatoptError, StageError
from .fmo import FmoProblem, FmoSolution, compliance, solve_fmo
from .homogenize import homogenize
from .invhom import InvHomProblem, InvHomResult, evaluate, solve_invhom
from .lattice import LatticeUnit, rasterize
from .postprocess import assemble_structure, connectivity, prune_bars, rescale_volume
from .templates import make_unit

log = logging.getLogger(__name__)

MANIFEST_SCHEMA = "latopt-manifest-v1"
REFERENCE_VALUES = {
    "fmo_isotropic_compliance": 1.4618,
    "clustered_compliance_K5": 1.5899,
    "lambda_sweep_compliance": {"0": 19.6117, "0.01": 14.0077, "0.02": 23.9039, "0.4": 24.9216,
                                "0.9": 11.4800},
}


# ---------------------------------------------------------------------------
# macro problem


def _dof(mesh: QuadMesh, ix: int, iy: int, direction: str) -> int:
    return int(2 * mesh.node(ix, iy) + (0 if direction == "x" else 1))


def build_bridge_problem(cfg: PipelineConfig) -> FmoProblem:
    """Simply supported beam: pinned bottom-left, roller bottom-right, point load at top center."""
    m = cfg.macro
    nx, ny = m.nx, m.ny
    mesh0 = QuadMesh(nx, ny)
    fixed = [_dof(mesh0, 0, 0, "x"), _dof(mesh0, 0, 0, "y"), _dof(mesh0, nx, 0, "y")]
    f = np.zeros(mesh0.n_dofs)
    f[_dof(mesh0, nx // 2, ny, "y")] = -m.load_magnitude
    return _fmo_problem(cfg, QuadMesh(nx, ny, 1.0, fixed, f))


def _custom_problem(cfg: PipelineConfig) -> FmoProblem:
    m = cfg.macro
    mesh0 = QuadMesh(m.nx, m.ny)
    fixed = []
    for entry in m.supports:
        ix, iy, dirs = (s.strip() for s in entry.split(","))
        for d in dirs:
            fixed.append(_dof(mesh0, int(ix), int(iy), d))
    f = np.zeros(mesh0.n_dofs)
    for entry in m.loads:
        ix, iy, fx, fy = (s.strip() for s in entry.split(","))
        f[_dof(mesh0, int(ix), int(iy), "x")] += float(fx)
        f[_dof(mesh0, int(ix), int(iy), "y")] += float(fy)
    return _fmo_problem(cfg, QuadMesh(m.nx, m.ny, 1.0, fixed, f))


def _fmo_problem(cfg: PipelineConfig, mesh: QuadMesh) -> FmoProblem:
    m = cfg.macro
    T_high = float(np.trace(base_material(1.0, 0.3)))
    delta = m.delta_fraction * T_high / 3.0
    return FmoProblem(mesh=mesh, T0=m.T0_fraction * mesh.n_elems * T_high, T_low=3.0 * delta,
                      T_high=T_high, delta=delta, material_class=m.material_class, max_iter=m.max_iter)


def build_macro_problem(cfg: PipelineConfig) -> FmoProblem:
    return build_bridge_problem(cfg) if cfg.macro.problem == "bridge" else _custom_problem(cfg)


def support_description(cfg: PipelineConfig) -> dict:
    m = cfg.macro
    if m.problem == "bridge":
        return {"pinned": [0, 0], "roller_y": [m.nx, 0], "point_load": [m.nx // 2, m.ny],
                "load": [0.0, -m.load_magnitude]}
    return {"supports": m.supports, "loads": m.loads}


@dataclass
class MacroResult:
    problem: FmoProblem
    free: FmoSolution
    assignment: ClusterAssignment
    clustered: FmoSolution
    loads: ClusterStrainLoads

    @property
    def targets(self) -> np.ndarray:
        return self.clustered.representatives


def run_macro(cfg: PipelineConfig) -> MacroResult:
    problem = build_macro_problem(cfg)
    free = solve_fmo(problem)
    assignment = hierarchical_cluster(free.field, cfg.macro.K_clusters)
    clustered = clustered_fmo(problem, assignment)
    assignment = ClusterAssignment(assignment.labels, assignment.K, clustered.representatives)
    loads = select_cluster_strains(clustered, assignment, problem.mesh)
    return MacroResult(problem, free, assignment, clustered, loads)


def write_macro(result: MacroResult, out: Path) -> dict:
    out = Path(out)
    write_field_csv(out / "macro_field.csv", result.free.field)
    write_field_csv(out / "clustered_field.csv", result.clustered.field)
    write_csv(out / "labels.csv", ("element", "label"), enumerate(result.assignment.labels))
    write_field_csv(out / "cluster_targets.csv", result.targets)
    write_csv(out / "cluster_loads.csv", ("cluster", "element", "eps11", "eps22", "eps12_kelvin",
                                          "sig11", "sig22", "sig12_kelvin", "von_mises"),
              [(k, int(result.loads.elements[k]), *result.loads.strains[k], *result.loads.stresses[k],
                result.loads.von_mises[k]) for k in range(result.assignment.K)])
    n = max(len(result.free.history), len(result.clustered.history))
    pad = lambda h, i: h[i] if i < len(h) else h[-1]  # noqa: E731
    write_csv(out / "macro_log.csv", ("iter", "compliance_free", "compliance_clustered"),
              [(i + 1, pad(result.free.history, i), pad(result.clustered.history, i)) for i in range(n)])
    summary = {
        "labels": result.assignment.labels, "K": result.assignment.K, "targets": result.targets,
        "strains": result.loads.strains, "source_elements": result.loads.elements,
        "compliance_free": result.free.compliance, "compliance_clustered": result.clustered.compliance,
        "iterations_free": result.free.iterations, "iterations_clustered": result.clustered.iterations,
    }
    write_json(out / "macro_summary.json", summary)
    return summary


# ---------------------------------------------------------------------------
# micro stage


def micro_problem(cfg: PipelineConfig, target, strain, lambda_B: float | None = None) -> InvHomProblem:
    u = cfg.micro
    unit = make_unit(u.template, ks_k=u.ks_k, gamma=u.gamma)
    return InvHomProblem(target=np.asarray(target), strain_load=np.asarray(strain), unit_template=unit,
                         V_star=u.V_star, lambda_B=u.lambda_B if lambda_B is None else lambda_B,
                         P_lower=u.P_lower, n_b=u.n_b, p_min=u.p_min, p_max=u.p_max, N=u.N, penal=u.penal,
                         E_min_static=u.E_min_static, E_min_buckling=u.E_min_buckling,
                         max_iter=u.max_iter, tol=u.tol, enforce_buckling=u.enforce_buckling)


@dataclass
class MicroResult:
    cluster: int
    optimized: InvHomResult
    unit: LatticeUnit           # after pruning and rescaling
    grid: np.ndarray
    DH: np.ndarray
    kappa_ks: float
    n_components: int
    pruned_bars: int
    prune_skipped: bool = False


def design_cell(cfg: PipelineConfig, k: int, target, strain) -> MicroResult:
    problem = micro_problem(cfg, target, strain)
    res = solve_invhom(problem)
    unit = res.unit
    n0 = unit.n_bars
    try:
        unit = prune_bars(unit, cfg.post.p_threshold)
        prune_skipped = False
    except EmptyUnitError:
        # every bar is below the threshold; keep the optimized unit rather than abort
        log.warning("cluster %d: pruning would remove every bar, kept unpruned", k)
        prune_skipped = True
    if cfg.post.rescale:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            unit = rescale_volume(unit, cfg.micro.V_star, cfg.micro.N, cfg.micro.p_min, cfg.micro.p_max)
    grid = rasterize(unit, cfg.micro.N)
    DH = homogenize(grid, penal=cfg.micro.penal, E_min=cfg.micro.E_min_static)
    kappa = _final_kappa(cfg, unit, problem, grid)
    comps = connectivity(grid, cfg.post.rho_cut).n_components
    return MicroResult(cluster=k, optimized=res, unit=unit, grid=grid, DH=DH, kappa_ks=kappa,
                       n_components=comps, pruned_bars=n0 - unit.n_bars, prune_skipped=prune_skipped)


def _final_kappa(cfg, unit: LatticeUnit, problem: InvHomProblem, grid) -> float:
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        st = analyze(grid, problem.strain_load, penal=cfg.micro.penal, E_min=cfg.micro.E_min_buckling,
                     n_b=cfg.micro.n_b)
    return float(st.spectrum.kappa_ks) if st.spectrum.buckles else 0.0


def _design_cell_task(args):
    cfg, k, target, strain = args
    logging.getLogger("latopt").setLevel(logging.WARNING)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        return design_cell(cfg, k, target, strain)


def run_micro(cfg: PipelineConfig, targets, strains, threads: int | None = None) -> list[MicroResult]:
    tasks = [(cfg, k, np.asarray(targets[k]), np.asarray(strains[k])) for k in range(len(targets))]
    threads = threads or os.cpu_count() or 1
    if threads <= 1 or len(tasks) <= 1:
        return [_design_cell_task(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=min(threads, len(tasks))) as pool:
        return list(pool.map(_design_cell_task, tasks))


def write_micro(results: list[MicroResult], out: Path) -> list[dict]:
    out = Path(out)
    rows = []
    for r in results:
        k = r.cluster
        (out / f"unit_{k}.json").write_text(r.unit.to_json(indent=2) + "\n")
        write_grid_csv(out / f"unit_{k}_density.csv", r.grid)
        write_pgm(out / f"unit_{k}.pgm", r.grid)
        (out / f"invhom_log_{k}.csv").write_text(r.optimized.log_csv())
        rows.append({"cluster": k, "J": r.optimized.J, "kappa_ks_optimized": r.optimized.kappa_ks,
                     "kappa_ks_final": r.kappa_ks, "volume": float(r.grid.mean()),
                     "iterations": r.optimized.iterations, "converged": r.optimized.converged,
                     "bars": r.unit.n_bars, "pruned_bars": r.pruned_bars, "prune_skipped": r.prune_skipped,
                     "components": r.n_components,
                     "DH": r.DH, "runtime_s": r.optimized.runtime})
    write_csv(out / "units_summary.csv", ("cluster", "J", "kappa_ks", "volume", "bars", "components"),
              [(r["cluster"], r["J"], r["kappa_ks_final"], r["volume"], r["bars"], r["components"])
               for r in rows])
    return rows


# ---------------------------------------------------------------------------
# assembly


def run_assemble(cfg: PipelineConfig, labels, units: list[LatticeUnit], out: Path | None = None):
    rep = assemble_structure(labels, units, cfg.macro.nx, cfg.macro.ny, cfg.micro.N,
                             connect=cfg.post.connect, rho_cut=cfg.post.rho_cut)
    if out is not None:
        out = Path(out)
        write_pgm(out / "structure.pgm", rep.grid)
        write_json(out / "connectors.json", [
            {"interface": list(key), "bars": [b.to_dict() for b in bars]}
            for key, bars in sorted(rep.connectors.items())])
    return rep


def lattice_compliance(problem: FmoProblem, labels, DHs) -> float:
    """Macro compliance when every element carries its cluster's realized cell tensor."""
    field = np.asarray(DHs)[np.asarray(labels)]
    return compliance(field, problem.mesh)


# ---------------------------------------------------------------------------
# orchestration


def resolved_defaults(cfg: PipelineConfig) -> dict:
    T_high = float(np.trace(base_material(1.0, 0.3)))
    return {
        "T_high": T_high,
        "delta": cfg.macro.delta_fraction * T_high / 3.0,
        "T0": cfg.macro.T0_fraction * cfg.macro.nx * cfg.macro.ny * T_high,
        "ks_k": cfg.micro.ks_k,
        "heaviside_gamma": cfg.micro.gamma,
        "p_bounds": [cfg.micro.p_min, cfg.micro.p_max],
        "ks_mu_factor": KS_MU_FACTOR,
        "eigensolver": {"method": "lanczos (ARPACK) on K^-1 G, dense below 60 dofs", "tol": 0.0,
                        "residual_check": 1e-8},
        "gcmma": {"move": 0.1, "asyinit": 0.5, "asyincr": 1.2, "asydecr": 0.7, "max_inner": 20},
        "fmo_tol": 1e-6,
        "postprocess": {"p_threshold": cfg.post.p_threshold, "rho_cut": cfg.post.rho_cut},
    }


def _update_manifest(out: Path, cfg: PipelineConfig, stage: str, info: dict, seconds: float):
    path = Path(out) / "manifest.json"
    manifest = read_json(path) if path.exists() else {}
    manifest.update({"schema": MANIFEST_SCHEMA, "version": __version__, "config": cfg.to_dict(),
                     "resolved_defaults": resolved_defaults(cfg), "supports": support_description(cfg),
                     "reference_values": REFERENCE_VALUES})
    manifest.setdefault("stages", {})[stage] = info
    manifest.setdefault("timings_s", {})[stage] = seconds
    write_json(path, manifest)
    return manifest


def _stage(name, fn, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except LatoptError as exc:
        raise StageError(name, exc) from exc
    except (np.linalg.LinAlgError, ArithmeticError, RuntimeError, ValueError) as exc:
        raise StageError(name, exc) from exc


def macro_stage(cfg: PipelineConfig, out) -> MacroResult:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    t = time.perf_counter()
    res = _stage("macro", run_macro, cfg)
    write_macro(res, out)
    _update_manifest(out, cfg, "macro", {
        "compliance_free": res.free.compliance, "compliance_clustered": res.clustered.compliance,
        "cluster_sizes": res.assignment.counts}, time.perf_counter() - t)
    return res


def micro_stage(cfg: PipelineConfig, out, threads: int | None = None) -> list[MicroResult]:
    out = Path(out)
    summary = read_json(out / "macro_summary.json")
    t = time.perf_counter()
    results = _stage("micro", run_micro, cfg, summary["targets"], summary["strains"], threads)
    rows = write_micro(results, out)
    info = {"units": rows}
    problem = build_macro_problem(cfg)
    info["lattice_compliance"] = _stage("micro", lattice_compliance, problem, summary["labels"],
                                        [r.DH for r in results])
    _update_manifest(out, cfg, "micro", info, time.perf_counter() - t)
    return results


def assemble_stage(cfg: PipelineConfig, out):
    out = Path(out)
    summary = read_json(out / "macro_summary.json")
    units = [LatticeUnit.from_json((out / f"unit_{k}.json").read_text()) for k in range(summary["K"])]
    t = time.perf_counter()
    rep = _stage("assemble", run_assemble, cfg, summary["labels"], units, out)
    _update_manifest(out, cfg, "assemble", {
        "grid_shape": list(rep.grid.shape), "volume": float(rep.grid.mean()),
        "connector_failures": [f"{k}: {msg}" for k, msg in rep.failures],
        "components": connectivity(rep.grid, cfg.post.rho_cut).n_components}, time.perf_counter() - t)
    return rep


def run_pipeline(cfg: PipelineConfig, out, threads: int | None = None) -> dict:
    out = Path(out)
    macro_stage(cfg, out)
    micro_stage(cfg, out, threads)
    assemble_stage(cfg, out)
    return read_json(out / "manifest.json")


def lambda_sweep(cfg: PipelineConfig, target, strain, lambdas=(0.0, 0.01, 0.02, 0.4, 0.9)) -> dict:
    """Cell designs of one cluster target for several buckling weights: ``{lambda: (result, kappa_ks)}``."""
    out = {}
    for lam in lambdas:
        res = solve_invhom(micro_problem(cfg, target, strain, lam))
        _, _, _, cache = evaluate(res.widths, micro_problem(cfg, target, strain, lam))
        out[lam] = (res, cache.kappa_ks)
    return out
