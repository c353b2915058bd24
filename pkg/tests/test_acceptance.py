"""End-to-end acceptance checks; each test records one pass/fail line."""
import time

import numpy as np
import pytest
import scipy.linalg as sla

from latopt.buckling import analyze, ks_eigen_aggregate, solve_pencil
from latopt.cli import EXIT_OK, main
from latopt.config import SMOKE_CONFIG, PipelineConfig
from latopt.core_fe import base_material
from latopt.exceptions import EmptyUnitError
from latopt.homogenize import homogenize
from latopt.invhom import InvHomProblem, evaluate, solve_invhom, width_gradients
from latopt.lattice import LatticeUnit, ks_blend, rasterize
from latopt.pipeline import micro_problem, run_macro
from latopt.postprocess import assemble_structure, connectivity, prune_bars
from latopt.templates import make_unit

from _helpers import laminate_tensor

C0 = base_material(1.0, 0.3)


def _rel(a, b):
    return float(np.linalg.norm(a - b) / np.linalg.norm(b))


@pytest.fixture(scope="module")
def bridge():
    t = time.perf_counter()
    res = run_macro(PipelineConfig())
    return res, time.perf_counter() - t


def test_01_homogenization_identity(criterion):
    t = time.perf_counter()
    err = _rel(homogenize(np.ones((40, 40))), C0)
    dt = time.perf_counter() - t
    criterion(1, err <= 1e-8 and dt < 5.0, f"rel error {err:.2e}, {dt:.2f} s")


def test_02_laminate(criterion):
    N = 64
    grid = np.zeros((N, N))
    grid[: N // 2] = 1.0
    err = _rel(homogenize(grid, E_min=1e-3), laminate_tensor(C0, 1e-3 * C0))
    criterion(2, err <= 0.01, f"rel error {err:.2e} at N={N}")


def test_03_gradients(criterion):
    t = time.perf_counter()
    rng = np.random.default_rng(2024)
    unit = make_unit("full21")
    h = 1e-6
    compared, skipped, worst = 0, 0, 0.0
    bad = []
    for trial in range(20):
        target = 0.3 * C0 + 0.02 * np.diag(rng.uniform(0, 1, 3))
        eps = rng.uniform(-1, 0.3, 3)
        pr = InvHomProblem(target=target, strain_load=eps, unit_template=unit, N=20, lambda_B=0.4,
                           P_lower=1.0, V_star=0.5)
        p = rng.uniform(0.02, 0.1, pr.n_vars)
        _, _, _, cache = evaluate(p, pr)
        grads = width_gradients(cache, pr)
        gaps_ok = cache.buckling is None or cache.buckling.spectrum.relative_gaps().min() > 1e-6
        mu = cache.mu_kappa or None
        for i in range(pr.n_vars):
            e = np.zeros(pr.n_vars)
            e[i] = h
            Jp, Vp, fp, _ = evaluate(p + e, pr, mu)
            Jm, Vm, fm, _ = evaluate(p - e, pr, mu)
            for key, a, b in (("J", Jp, Jm), ("volume", Vp, Vm), ("f_P", fp, fm)):
                an = grads.get(key, np.zeros(pr.n_vars))[i]
                if abs(an) <= 1e-7 or (key != "volume" and not gaps_ok):
                    skipped += 1
                    continue
                fd = (a - b) / (2 * h)
                rel = abs(an - fd) / abs(an)
                compared += 1
                worst = max(worst, rel)
                if rel > 1e-3:
                    bad.append(abs(an))
    dt = time.perf_counter() - t
    tail = f", largest such |gradient| {max(bad):.1e}" if bad else ""
    criterion(3, not bad and dt < 600,
              f"{compared} components compared, {skipped} skipped, worst rel {worst:.2e}, "
              f"{len(bad)} above 1e-3{tail}, {dt:.0f} s")


def _reduced_pencil(state):
    free = state.solution.free
    K = state.solution.K_reduced[free][:, free]
    G = state.cell.periodic.reduce_matrix(state.G)[free][:, free]
    return K, G


def test_04_buckling_oracle(criterion):
    rng = np.random.default_rng(4)
    grids = [rasterize(make_unit("full21", 0.04), 10), rasterize(make_unit("selfsupport10", 0.08), 10),
             rng.uniform(0.2, 1.0, (10, 10))]
    loads = [np.array([-1.0, -0.2, 0.1]), np.array([-0.5, -1.0, 0.0]), np.array([-1.0, 0.3, -0.4])]
    eig_err, scale_err = 0.0, 0.0
    for grid, eps in zip(grids, loads):
        st = analyze(grid, eps, n_b=6)
        K, G = _reduced_pencil(st)
        kap, _ = solve_pencil(K, G, 6, dense_below=0)
        P_it = np.sort(1.0 / kap[kap > 0])[:3]
        vals = sla.eigh(G.toarray(), K.toarray(), eigvals_only=True)
        P_ref = np.sort(1.0 / vals[vals > 0])[:3]
        eig_err = max(eig_err, float(np.max(np.abs(P_it - P_ref) / P_ref)))
        for alpha in (0.25, 4.0):
            P_a = analyze(grid, alpha * eps, n_b=6).spectrum.load_factors
            P_1 = st.spectrum.load_factors
            scale_err = max(scale_err, float(np.max(np.abs(P_a - P_1 / alpha) / (P_1 / alpha))))
    criterion(4, eig_err <= 1e-8 and scale_err <= 1e-10,
              f"iterative vs dense {eig_err:.1e}, stress scaling {scale_err:.1e}")


def test_05_ks_bounds(criterion):
    rng = np.random.default_rng(5)
    ok = True
    for _ in range(2000):
        n = int(rng.integers(1, 11))
        kappas = rng.uniform(0.01, 10.0, n) * 10.0 ** rng.uniform(-3, 3)
        mu = float(rng.uniform(1, 1000)) / kappas.max()
        ks, _ = ks_eigen_aggregate(kappas, mu)
        k1 = kappas.max()
        tol = 4 * np.finfo(float).eps * k1
        ok &= k1 - tol <= ks <= k1 + np.log(n) / mu + tol
        v = rng.uniform(-1, 1, n)
        k = float(rng.uniform(1, 300))
        b = ks_blend(v, k)
        ok &= v.min() - np.log(n) / k - 1e-12 <= b <= v.min() + 1e-12
    criterion(5, bool(ok), "2000 random lists, eigen and geometric aggregates")


def test_06_bridge_compliance(criterion, bridge):
    res, dt = bridge
    c_free, c_k = res.free.compliance, res.clustered.compliance
    free_ok = abs(c_free - 1.4618) <= 0.15 * 1.4618
    clus_ok = abs(c_k - 1.5899) <= 0.15 * 1.5899
    nested = c_k >= c_free * (1 - 1e-9)
    criterion(6, free_ok and clus_ok and nested and dt < 1800,
              f"free {c_free:.4f} (ref 1.4618), K=5 {c_k:.4f} (ref 1.5899), "
              f"nesting {'holds' if nested else 'violated'}, {dt:.0f} s")


def test_07_inverse_crime(criterion):
    unit = make_unit("full21")
    rng = np.random.default_rng(7)
    p_true = rng.uniform(0.02, 0.06, unit.n_bars)
    grid = rasterize(unit.with_widths(p_true), 20)
    D0 = homogenize(grid)
    pr = InvHomProblem(target=D0, strain_load=np.array([-1.0, -0.5, 0.0]), unit_template=unit, N=20,
                       lambda_B=0.0, V_star=min(grid.mean() + 0.05, 0.95), max_iter=150)
    res = solve_invhom(pr)
    ratio = res.J / np.linalg.norm(D0)
    criterion(7, ratio <= 0.05 and res.iterations <= 150,
              f"J/||D0|| = {ratio:.4f} after {res.iterations} iterations")


def test_08_buckling_weight(criterion, bridge):
    res, _ = bridge
    cfg = PipelineConfig()
    details = []
    ok = False
    for k in range(res.assignment.K):
        target, strain = res.targets[k], res.loads.strains[k]
        kap = {lam: solve_invhom(micro_problem(cfg, target, strain, lam)).kappa_ks for lam in (0.0, 0.4)}
        details.append(f"cluster {k}: {kap[0.0]:.1f} -> {kap[0.4]:.1f}")
        if kap[0.4] <= kap[0.0]:
            ok = True
            break
    criterion(8, ok, "kappa_KS at lambda 0 -> 0.4; " + "; ".join(details))


def test_09_postprocess(criterion):
    units = [make_unit("full21", 0.03), make_unit("selfsupport10", 0.06)]
    rep = assemble_structure(np.array([0, 1]), units, 2, 1, 40)
    n_comp = connectivity(rep.grid, 0.5).n_components

    rng = np.random.default_rng(9)
    idem, empty = 0, 0
    for i in range(100):
        name = ("full21", "selfsupport10")[i % 2]
        u = make_unit(name)
        u = u.with_widths(rng.uniform(0.005, 0.08, u.n_bars))
        if i % 5 == 0:
            u = LatticeUnit(u.full_cell_bars(), symmetry="none")
        try:
            once = prune_bars(u)
        except EmptyUnitError:
            empty += 1
            continue
        idem += prune_bars(once) == once
    criterion(9, n_comp == 1 and idem + empty == 100,
              f"tile components {n_comp}, idempotent on {idem}/{100 - empty} non-empty units")


def test_10_determinism(criterion, tmp_path):
    cfg = tmp_path / "smoke.toml"
    cfg.write_text(SMOKE_CONFIG)
    outs = [tmp_path / "a", tmp_path / "b"]
    codes = [main(["run", "--config", str(cfg), "--out", str(o)]) for o in outs]
    names = sorted(p.name for p in outs[0].glob("*.csv"))
    same = [n for n in names if (outs[0] / n).read_bytes() == (outs[1] / n).read_bytes()]
    criterion(10, codes == [EXIT_OK, EXIT_OK] and names and len(same) == len(names)
              and names == sorted(p.name for p in outs[1].glob("*.csv")),
              f"{len(same)}/{len(names)} CSV files identical")
