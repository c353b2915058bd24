"""scikit-learn style wrappers around the functional API.

The estimators only hold hyper-parameters (so ``get_params``/``set_params``/
``clone`` work) and forward to the module functions in ``fit``.
"""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClusterMixin

from .clustering import hierarchical_cluster
from .core_fe import QuadMesh, base_material, vector_to_tensor
from .fmo import FmoProblem, solve_fmo
from .invhom import InvHomProblem, P_MAX, P_MIN, solve_invhom
from .templates import make_unit


class FreeMaterialOptimizer(BaseEstimator):
    """Fit an optimal tensor field to a loaded, supported :class:`QuadMesh`."""

    def __init__(self, material_class: str = "isotropic", T0_fraction: float = 0.35,
                 delta_fraction: float = 0.02, max_iter: int = 200):
        self.material_class = material_class
        self.T0_fraction = T0_fraction
        self.delta_fraction = delta_fraction
        self.max_iter = max_iter

    def fit(self, mesh: QuadMesh, y=None):
        T_high = float(np.trace(base_material(1.0, 0.3)))
        delta = self.delta_fraction * T_high / 3.0
        self.problem_ = FmoProblem(mesh, self.T0_fraction * mesh.n_elems * T_high, 3 * delta, T_high, delta,
                                   self.material_class, self.max_iter)
        sol = solve_fmo(self.problem_)
        self.field_ = sol.field
        self.displacement_ = sol.displacement
        self.compliance_ = sol.compliance
        self.history_ = sol.history
        return self


class TensorClusterer(ClusterMixin, BaseEstimator):
    """Ward clustering of a tensor field given as (M, 3, 3) tensors or (M, 6) Kelvin entries."""

    def __init__(self, n_clusters: int = 5):
        self.n_clusters = n_clusters

    def fit(self, X, y=None):
        X = np.asarray(X, dtype=float)
        field = vector_to_tensor(X) if X.ndim == 2 else X
        a = hierarchical_cluster(field, self.n_clusters)
        self.labels_ = a.labels
        self.representatives_ = a.representatives
        return self


class CellDesigner(BaseEstimator):
    """Design a lattice cell whose homogenized tensor approaches a target.

    ``fit(target, strain)`` runs the optimizer; ``predict()`` returns the
    achieved tensor and ``score`` the negative objective.
    """

    def __init__(self, template: str = "full21", N: int = 40, V_star: float = 0.35, lambda_B: float = 0.0,
                 P_lower: float = 1.0, n_b: int = 6, p_min: float = P_MIN, p_max: float = P_MAX,
                 max_iter: int = 150):
        self.template = template
        self.N = N
        self.V_star = V_star
        self.lambda_B = lambda_B
        self.P_lower = P_lower
        self.n_b = n_b
        self.p_min = p_min
        self.p_max = p_max
        self.max_iter = max_iter

    def fit(self, X, y=None):
        strain = np.zeros(3) if y is None else np.asarray(y, dtype=float)
        problem = InvHomProblem(target=np.asarray(X, dtype=float), strain_load=strain,
                                unit_template=make_unit(self.template), V_star=self.V_star,
                                lambda_B=self.lambda_B, P_lower=self.P_lower, n_b=self.n_b,
                                p_min=self.p_min, p_max=self.p_max, N=self.N, max_iter=self.max_iter)
        res = solve_invhom(problem)
        self.result_ = res
        self.unit_ = res.unit
        self.widths_ = res.widths
        self.grid_ = res.grid
        self.DH_ = res.DH
        self.kappa_ks_ = res.kappa_ks
        return self

    def predict(self, X=None):
        return self.DH_

    def score(self, X=None, y=None):
        return -float(self.result_.J)
