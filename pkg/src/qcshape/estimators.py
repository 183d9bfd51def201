"""scikit-learn style wrappers around the shape-analysis pipeline.

``TeichmullerFeaturizer`` turns subjects into the per-vertex terms
[|dH| | |dK| | d] against a learned mean surface.  ``ShapeIndexClassifier``
weights those terms, selects significant vertices and fits bagged trees.
``SphericalMarchingSearch`` picks the weights and p_cut by grid search.
"""
from __future__ import annotations

import math

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .conformal import rectangular_param
from .mesh import Dataset, Subject
from .shape import (
    DEFAULT_PCUT_GRID,
    ShapeIndexParams,
    ShapeTerms,
    _forest,
    classify,
    compute_terms,
    mean_surface,
    sms_search,
    vertex_pvalues,
)
from .teichmuller import QCOptions


def check_subjects(X):
    """Accept a Dataset or a sequence of Subjects; return a Dataset."""
    subjects = list(X)
    if not subjects:
        raise ValueError("no subjects given")
    for s in subjects:
        if not isinstance(s, Subject):
            raise TypeError(f"expected Subject instances, got {type(s).__name__}")
    return Dataset(subjects).check()


def check_terms(X, y=None):
    """Validate a term array of shape (N, 2M + 1)."""
    if y is None:
        X = check_array(X, dtype=float, ensure_all_finite=True)
    else:
        X, y = check_X_y(X, y, dtype=float, ensure_all_finite=True)
    if X.shape[1] < 3 or X.shape[1] % 2 == 0:
        raise ValueError(f"term array must have 2M + 1 columns, got {X.shape[1]}")
    if np.any(X < 0):
        raise ValueError("shape terms must be nonnegative")
    return X if y is None else (X, y)


def _eligible(mask, m):
    if mask is None:
        return None
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != (m,):
        raise ValueError(f"eligible mask has shape {mask.shape}, expected ({m},)")
    return mask


class TeichmullerFeaturizer(TransformerMixin, BaseEstimator):
    """Learn a mean surface and emit per-subject shape terms.

    ``transform`` returns an (N, 2M + 1) array: M mean-curvature differences,
    M Gaussian-curvature differences and the Teichmuller distance, over the M
    mean-surface vertices.  Non-converged subjects raise unless
    ``drop_unconverged`` is set, in which case ``kept_`` lists survivors.
    """

    def __init__(self, uniformity_tol=0.05, mean_change_tol=1e-4, max_iter=200, n_jobs=1, drop_unconverged=False):
        self.uniformity_tol = uniformity_tol
        self.mean_change_tol = mean_change_tol
        self.max_iter = max_iter
        self.n_jobs = n_jobs
        self.drop_unconverged = drop_unconverged

    def _options(self):
        return QCOptions(uniformity_tol=self.uniformity_tol, mean_change_tol=self.mean_change_tol, max_iter=self.max_iter)

    def fit(self, X, y=None):
        ds = check_subjects(X)
        mesh, lm, info = mean_surface(ds, self._options(), self.n_jobs)
        self.mean_ = mesh
        self.mean_landmarks_ = lm
        self.mean_param_ = info["param"]
        self.medoid_ = info["medoid"]
        self.n_vertices_ = mesh.n_vertices
        self.boundary_mask_ = mesh.is_boundary()
        return self

    def transform_terms(self, X):
        """ShapeTerms plus the maps; subjects keep their own labels."""
        check_is_fitted(self, "mean_")
        ds = check_subjects(X)
        params = [rectangular_param(s.mesh, s.landmarks) for s in ds]
        terms, maps, kept = compute_terms(ds, self.mean_, self.mean_landmarks_, self._options(), self.n_jobs,
                                          params, self.mean_param_)
        if len(kept) < len(ds) and not self.drop_unconverged:
            raise RuntimeError(f"{len(ds) - len(kept)} maps did not converge")
        self.kept_ = kept
        return terms, maps

    def transform(self, X):
        terms, _ = self.transform_terms(X)
        return terms.as_array()


class ShapeIndexClassifier(ClassifierMixin, BaseEstimator):
    """Weighted shape index, Welch-test vertex selection and bagged trees on term arrays."""

    def __init__(self, alpha=0.0, beta=0.0, gamma=1.0, p_cut=1.0, n_estimators=100, random_state=0, eligible=None):
        self.alpha = alpha
        self.beta = beta
        self.gamma = gamma
        self.p_cut = p_cut
        self.n_estimators = n_estimators
        self.random_state = random_state
        self.eligible = eligible

    def _params(self):
        return ShapeIndexParams.normalized(self.alpha, self.beta, self.gamma, self.p_cut)

    def _combine(self, X):
        p = self._params()
        return ShapeTerms.from_array(X).combine(p.weights)

    def fit(self, X, y):
        X, y = check_terms(X, y)
        params = self._params()
        C = self._combine(X)
        elig = _eligible(self.eligible, C.shape[1])
        p = vertex_pvalues(C, y)
        mask = p <= params.p_cut
        if elig is not None:
            mask &= elig
        self.report_ = classify(C, mask, params, self.n_estimators, self.random_state, labels=y)
        self.pvalues_ = p
        self.mask_ = mask
        self.forest_ = _forest(self.n_estimators, self.random_state).fit(C[:, mask], y)
        self.classes_ = self.forest_.classes_
        self.oob_score_ = self.report_.overall_accuracy
        return self

    def predict(self, X):
        check_is_fitted(self, "forest_")
        X = check_terms(X)
        return self.forest_.predict(self._combine(X)[:, self.mask_])

    def predict_proba(self, X):
        check_is_fitted(self, "forest_")
        X = check_terms(X)
        return self.forest_.predict_proba(self._combine(X)[:, self.mask_])


class SphericalMarchingSearch(ClassifierMixin, BaseEstimator):
    """Grid search of (alpha, beta, gamma) on the nonnegative unit-sphere octant and of p_cut."""

    def __init__(self, rho=0.02 * math.pi, p_cut_grid=DEFAULT_PCUT_GRID, n_estimators=100, random_state=0,
                 eligible=None, n_jobs=1, allow_any_rho=False):
        self.rho = rho
        self.p_cut_grid = p_cut_grid
        self.n_estimators = n_estimators
        self.random_state = random_state
        self.eligible = eligible
        self.n_jobs = n_jobs
        self.allow_any_rho = allow_any_rho

    def fit(self, X, y):
        X, y = check_terms(X, y)
        terms = ShapeTerms.from_array(X, y)
        elig = _eligible(self.eligible, terms.n_vertices)
        self.search_ = sms_search(terms, self.rho, tuple(self.p_cut_grid), self.random_state, elig,
                                  self.n_estimators, self.n_jobs, self.allow_any_rho)
        best = self.search_.best
        self.best_params_ = best.params
        self.report_ = best
        self.best_estimator_ = ShapeIndexClassifier(
            best.params.alpha, best.params.beta, best.params.gamma, best.params.p_cut,
            self.n_estimators, self.random_state, self.eligible,
        ).fit(X, y)
        self.classes_ = self.best_estimator_.classes_
        return self

    def predict(self, X):
        check_is_fitted(self, "best_estimator_")
        return self.best_estimator_.predict(X)
