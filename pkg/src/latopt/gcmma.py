"""Globally convergent method of moving asymptotes.

Solves ``min f0(x)`` s.t. ``f_i(x) <= 0``, ``xmin <= x <= xmax`` through
separable convex approximations.  Each outer iteration builds the moving
asymptotes, solves the approximate subproblem through its concave dual
(projected Newton on the multipliers), and repeats inner iterations with
increased curvature until every approximation is conservative at the new
point.  The subproblem uses the usual elastic slack: ``f_i - y_i <= 0`` with
penalty ``c y + d y^2 / 2`` so it is always feasible.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .exceptions import ParameterError

log = logging.getLogger(__name__)

ASY_INIT = 0.5
ASY_INCR = 1.2
ASY_DECR = 0.7
MOVE = 0.1
ALBEFA = 0.1
RAA_EPS = 1e-6
MAX_INNER = 20


@dataclass
class GcmmaState:
    low: np.ndarray
    upp: np.ndarray
    xold1: np.ndarray
    xold2: np.ndarray
    iteration: int = 0
    raa0: float = RAA_EPS
    raa: np.ndarray = field(default_factory=lambda: np.zeros(0))
    asy_factors: list = field(default_factory=list)
    inner_counts: list = field(default_factory=list)

    @classmethod
    def new(cls, x, m: int = 0) -> "GcmmaState":
        x = np.asarray(x, dtype=float)
        return cls(low=x.copy(), upp=x.copy(), xold1=x.copy(), xold2=x.copy(),
                   raa=np.full(m, RAA_EPS))


@dataclass
class Subproblem:
    low: np.ndarray
    upp: np.ndarray
    alfa: np.ndarray
    beta: np.ndarray
    p0: np.ndarray
    q0: np.ndarray
    r0: float
    P: np.ndarray
    Q: np.ndarray
    r: np.ndarray

    def objective(self, x) -> float:
        return float(self.r0 + np.sum(self.p0 / (self.upp - x) + self.q0 / (x - self.low)))

    def constraints(self, x) -> np.ndarray:
        return self.r + self.P @ (1.0 / (self.upp - x)) + self.Q @ (1.0 / (x - self.low))


def _approximation(f, df, x, low, upp, rng, raa):
    ux = upp - x
    xl = x - low
    dpos = np.maximum(df, 0.0)
    dneg = np.maximum(-df, 0.0)
    reg = np.multiply.outer(raa, 1.0 / rng)
    p = (1.001 * dpos + 0.001 * dneg + reg) * ux ** 2
    q = (0.001 * dpos + 1.001 * dneg + reg) * xl ** 2
    r = f - (p / ux).sum(axis=-1) - (q / xl).sum(axis=-1)
    return p, q, r


def update_asymptotes(state: GcmmaState, x, xmin, xmax, asyinit=ASY_INIT, asyincr=ASY_INCR,
                      asydecr=ASY_DECR):
    rng = xmax - xmin
    if state.iteration < 2:
        low = x - asyinit * rng
        upp = x + asyinit * rng
        factor = np.ones_like(x)
    else:
        zzz = (x - state.xold1) * (state.xold1 - state.xold2)
        factor = np.where(zzz > 0, asyincr, np.where(zzz < 0, asydecr, 1.0))
        low = x - factor * (state.xold1 - state.low)
        upp = x + factor * (state.upp - state.xold1)
        low = np.clip(low, x - 10.0 * rng, x - 0.01 * rng)
        upp = np.clip(upp, x + 0.01 * rng, x + 10.0 * rng)
    state.low, state.upp = low, upp
    state.asy_factors.append(factor)


def build_subproblem(x, f0, df0, fval, dfdx, state: GcmmaState, xmin, xmax, move=MOVE) -> Subproblem:
    rng = np.maximum(xmax - xmin, 1e-5)
    low, upp = state.low, state.upp
    alfa = np.maximum.reduce([xmin, low + ALBEFA * (x - low), x - move * rng])
    beta = np.minimum.reduce([xmax, upp - ALBEFA * (upp - x), x + move * rng])
    p0, q0, r0 = _approximation(f0, df0, x, low, upp, rng, state.raa0)
    P, Q, r = _approximation(fval, dfdx, x, low, upp, rng, state.raa)
    return Subproblem(low, upp, alfa, beta, p0, q0, float(r0), P, Q, r)


def solve_subproblem(sp: Subproblem, c, d, tol: float = 1e-10, max_iter: int = 200):
    """Dual projected-Newton solve; returns ``(x, y, lam, kkt_residual)``."""
    m = sp.r.size
    sq = np.sqrt

    def primal(lam):
        p = sp.p0 + lam @ sp.P
        q = sp.q0 + lam @ sp.Q
        sp_, sq_ = sq(p), sq(q)
        x = (sp_ * sp.low + sq_ * sp.upp) / (sp_ + sq_)
        x = np.clip(x, sp.alfa, sp.beta)
        y = np.maximum(0.0, (lam - c) / d)
        return x, y, p, q

    def dual(lam):
        x, y, p, q = primal(lam)
        W = (sp.r0 + np.sum(p / (sp.upp - x) + q / (x - sp.low)) + lam @ sp.r
             + np.sum(c * y + 0.5 * d * y * y) - lam @ y)
        grad = sp.constraints(x) - y
        return W, grad, x, y, p, q

    lam = np.zeros(m)
    if m == 0:
        x, y, _, _ = primal(lam)
        return x, y, lam, 0.0
    W, grad, x, y, p, q = dual(lam)
    res = np.inf
    for _ in range(max_iter):
        res = np.max(np.abs(lam - np.maximum(0.0, lam + grad)))
        if res <= tol:
            break
        ux, xl = sp.upp - x, x - sp.low
        interior = (x > sp.alfa) & (x < sp.beta)
        dg = sp.P / ux ** 2 - sp.Q / xl ** 2                     # d g_i / d x_j
        curv = 2.0 * p / ux ** 3 + 2.0 * q / xl ** 3
        H = -(dg[:, interior] / curv[interior]) @ dg[:, interior].T
        H -= np.diag((lam > c) / d)
        active = (lam <= 0.0) & (grad <= 0.0)
        F = ~active
        step = np.zeros(m)
        HF = H[np.ix_(F, F)]
        if F.any():
            try:
                reg = 1e-14 * max(1.0, np.abs(HF).max())
                step[F] = np.linalg.solve(HF - reg * np.eye(F.sum()), -grad[F])
            except np.linalg.LinAlgError:
                step[F] = grad[F]
            if not np.all(np.isfinite(step)) or step[F] @ grad[F] <= 0:
                step[F] = grad[F]
        t = 1.0
        stalled = False
        while True:
            lam_new = np.maximum(0.0, lam + t * step)
            W_new, grad_new, x_new, y_new, p_new, q_new = dual(lam_new)
            if W_new >= W + 1e-4 * grad @ (lam_new - lam):
                break
            if np.max(np.abs(lam_new - lam)) <= 1e-15 * (1.0 + np.max(lam)):
                stalled = True
                break
            t *= 0.5
        if stalled:
            break
        lam, W, grad, x, y, p, q = lam_new, W_new, grad_new, x_new, y_new, p_new, q_new
    return x, y, lam, float(res)


class GCMMA:
    """Stateful optimizer; call :meth:`step` once per outer iteration."""

    def __init__(self, xmin, xmax, n_constraints: int, move: float = MOVE, c: float = 1000.0,
                 d: float = 1.0, max_inner: int = MAX_INNER, conservative_tol: float = 1e-10,
                 asyinit: float = ASY_INIT, asyincr: float = ASY_INCR, asydecr: float = ASY_DECR):
        self.xmin = np.asarray(xmin, dtype=float)
        self.xmax = np.asarray(xmax, dtype=float)
        if self.xmin.shape != self.xmax.shape or np.any(self.xmin >= self.xmax):
            raise ParameterError("inconsistent variable bounds")
        self.m = int(n_constraints)
        self.move = move
        self.c = np.full(self.m, c)
        self.d = np.full(self.m, d)
        self.max_inner = max_inner
        self.tol = conservative_tol
        self.asy = (asyinit, asyincr, asydecr)
        self.state: GcmmaState | None = None

    def step(self, x, f0: float, df0, fval, dfdx, evaluate: Callable):
        """One outer iteration.

        ``evaluate(x)`` must return the true ``(f0, fval)`` at a trial point.
        Returns ``(x_next, f0_next, fval_next)``.
        """
        x = np.asarray(x, dtype=float)
        df0 = np.asarray(df0, dtype=float)
        fval = np.atleast_1d(np.asarray(fval, dtype=float))
        dfdx = np.asarray(dfdx, dtype=float).reshape(self.m, x.size)
        for arr in (x, df0, fval, dfdx):
            if not np.all(np.isfinite(arr)):
                raise ParameterError("non-finite value passed to GCMMA")
        if not np.isfinite(f0):
            raise ParameterError("non-finite objective passed to GCMMA")
        if self.state is None:
            self.state = GcmmaState.new(x, self.m)
        st = self.state
        update_asymptotes(st, x, self.xmin, self.xmax, *self.asy)
        rng = self.xmax - self.xmin
        n = x.size
        st.raa0 = max(RAA_EPS, 0.1 / n * np.sum(np.abs(df0) * rng))
        st.raa = np.maximum(RAA_EPS, 0.1 / n * (np.abs(dfdx) @ rng))

        inner = 0
        while True:
            sub = build_subproblem(x, f0, df0, fval, dfdx, st, self.xmin, self.xmax, self.move)
            x_new, _, _, _ = solve_subproblem(sub, self.c, self.d)
            f0_new, fval_new = evaluate(x_new)
            fval_new = np.atleast_1d(np.asarray(fval_new, dtype=float))
            f0_app = sub.objective(x_new)
            f_app = sub.constraints(x_new)
            bad0 = f0_new > f0_app + self.tol * max(1.0, abs(f0_new))
            bad = fval_new > f_app + self.tol * np.maximum(1.0, np.abs(fval_new))
            if not (bad0 or bad.any()) or inner >= self.max_inner:
                break
            inner += 1
            # curvature increase that makes the violated approximations conservative
            w = np.sum((st.upp - st.low) * (x_new - x) ** 2
                       / ((st.upp - x_new) * (x_new - st.low) * np.maximum(rng, 1e-5)))
            w = max(w, 1e-300)
            if bad0:
                st.raa0 = min(1.1 * (st.raa0 + (f0_new - f0_app) / w), 10.0 * st.raa0)
            st.raa = np.where(bad, np.minimum(1.1 * (st.raa + (fval_new - f_app) / w), 10.0 * st.raa),
                              st.raa)
        st.inner_counts.append(inner)
        st.xold2, st.xold1 = st.xold1, x.copy()
        st.iteration += 1
        return x_new, float(f0_new), fval_new


def gcmma_step(x, f0, df0, fval, dfdx, state: GcmmaState | None, evaluate, xmin, xmax, **kwargs):
    """Functional form of one outer iteration; returns ``(x_next, state)``."""
    opt = GCMMA(xmin, xmax, np.atleast_1d(fval).size, **kwargs)
    opt.state = state
    x_next, _, _ = opt.step(x, f0, df0, fval, dfdx, evaluate)
    return x_next, opt.state


@dataclass
class MinimizeResult:
    x: np.ndarray
    f0: float
    fval: np.ndarray
    iterations: int
    converged: bool
    history: list


def minimize(fun: Callable, x0, xmin, xmax, n_constraints: int, max_iter: int = 100,
             xtol: float = 1e-6, **kwargs) -> MinimizeResult:
    """Run GCMMA on ``fun(x) -> (f0, df0, fval, dfdx)`` until the step falls below ``xtol``."""
    opt = GCMMA(xmin, xmax, n_constraints, **kwargs)
    x = np.asarray(x0, dtype=float)
    f0, df0, fval, dfdx = fun(x)
    history = [(x.copy(), f0)]

    def values(xt):
        a, _, b, _ = fun(xt)
        return a, b

    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        x_new, _, _ = opt.step(x, f0, df0, fval, dfdx, values)
        change = np.max(np.abs(x_new - x))
        x = x_new
        f0, df0, fval, dfdx = fun(x)
        history.append((x.copy(), f0))
        if change < xtol:
            converged = True
            break
    return MinimizeResult(x=x, f0=float(f0), fval=np.atleast_1d(fval), iterations=it,
                          converged=converged, history=history)
