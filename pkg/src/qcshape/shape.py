"""Quasi-conformal shape classification.

Pipeline: mean surface -> Teichmuller maps from the mean to every subject
-> per-vertex curvature differences and Teichmuller distances -> shape
index features -> Welch t-test vertex selection -> bagged decision trees,
with the shape-index weights found by a grid search over the unit sphere.
"""
from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from joblib import Parallel, delayed
from scipy import sparse, stats
from sklearn.ensemble import RandomForestClassifier

from .conformal import rectangular_param
from .diffgeo import CurvatureField, curvatures, interpolate_scalar
from .mesh import Dataset, MeshError, TriMesh, write_landmarks, write_mesh
from .teichmuller import QCOptions, landmark_tmap

log = logging.getLogger(__name__)

DEFAULT_PCUT_GRID = (1.0, 1e-1, 1e-2, 1e-3, 1e-4)
RHO_RANGE = (0.01 * math.pi, 0.03 * math.pi)
MAX_EXCLUDED_FRACTION = 0.10


class ClassificationError(ValueError):
    """Invalid labels or an empty significant-vertex set."""


@dataclass(frozen=True)
class ShapeIndexParams:
    alpha: float
    beta: float
    gamma: float
    p_cut: float = 1.0

    def __post_init__(self):
        w = (self.alpha, self.beta, self.gamma)
        if min(w) < 0:
            raise ValueError("shape index weights must be nonnegative")
        if abs(sum(x * x for x in w) - 1.0) > 1e-9:
            raise ValueError("shape index weights must have unit norm")
        if not 0.0 <= self.p_cut <= 1.0:
            raise ValueError("p_cut must lie in [0, 1]")

    @classmethod
    def normalized(cls, alpha, beta, gamma, p_cut=1.0):
        n = math.sqrt(alpha * alpha + beta * beta + gamma * gamma)
        return cls(alpha / n, beta / n, gamma / n, p_cut)

    @property
    def weights(self):
        return np.array([self.alpha, self.beta, self.gamma])


@dataclass
class ShapeTerms:
    """Per-subject ingredients of the shape index over the mean-surface vertices."""

    dH: np.ndarray
    dK: np.ndarray
    d: np.ndarray
    labels: np.ndarray
    names: list = field(default_factory=list)

    def __len__(self):
        return len(self.d)

    @property
    def n_vertices(self):
        return self.dH.shape[1]

    def combine(self, weights):
        a, b, g = (float(x) for x in weights)
        return a * self.dH + b * self.dK + g * self.d[:, None]

    def as_array(self):
        return np.hstack([self.dH, self.dK, self.d[:, None]])

    @classmethod
    def from_array(cls, X, labels=None):
        X = np.asarray(X, dtype=float)
        m = (X.shape[1] - 1) // 2
        if 2 * m + 1 != X.shape[1]:
            raise ValueError("term array must have 2M + 1 columns")
        lab = np.asarray(labels) if labels is not None else np.zeros(len(X))
        return cls(X[:, :m], X[:, m : 2 * m], X[:, 2 * m], lab)


@dataclass
class FeatureMatrix:
    values: np.ndarray
    labels: np.ndarray
    params: ShapeIndexParams = None

    @property
    def shape(self):
        return self.values.shape


@dataclass
class ClassificationReport:
    overall_accuracy: float
    class_rates: dict
    significant_vertex_mask: np.ndarray
    params: ShapeIndexParams
    num_significant: int
    predictions: list
    labels: list
    n_estimators: int = 100
    seed: int = 0
    extra: dict = field(default_factory=dict)

    def to_json(self):
        p = self.params
        return {
            "overall_accuracy": self.overall_accuracy,
            "class_rates": {str(k): v for k, v in self.class_rates.items()},
            "params": {"alpha": p.alpha, "beta": p.beta, "gamma": p.gamma, "p_cut": p.p_cut},
            "num_significant": int(self.num_significant),
            "significant_vertices": [int(i) for i in np.flatnonzero(self.significant_vertex_mask)],
            "predictions": [None if x is None else str(x) for x in self.predictions],
            "labels": [str(x) for x in self.labels],
            "n_estimators": self.n_estimators,
            "seed": self.seed,
            **self.extra,
        }


# ------------------------------------------------------------------ mean surface

def _parallel(n_jobs):
    return Parallel(n_jobs=n_jobs, prefer="processes") if n_jobs and n_jobs != 1 else None


def _run(tasks, n_jobs):
    par = _parallel(n_jobs)
    if par is None:
        return [fn(*args) for fn, args in tasks]
    return par(delayed(fn)(*args) for fn, args in tasks)


def _param(subject):
    return rectangular_param(subject.mesh, subject.landmarks)


def _map(mesh_i, lm_i, mesh_j, lm_j, options, pi, pj):
    return landmark_tmap(mesh_i, lm_i, mesh_j, lm_j, options, pi, pj)


def rigid_align(points, reference):
    """Best rotation + translation taking ``points`` onto ``reference`` (least squares)."""
    pc, rc = points.mean(axis=0), reference.mean(axis=0)
    H = (points - pc).T @ (reference - rc)
    U, _, Vt = np.linalg.svd(H)
    D = np.eye(3)
    D[2, 2] = np.sign(np.linalg.det(Vt.T @ U.T)) or 1.0
    R = Vt.T @ D @ U.T
    return (points - pc) @ R.T + rc


def _medoid_index(dataset, params, options, n_jobs):
    """Approximate medoid from the Teichmuller distances to subject 0.

    Picks the subject whose distance to subject 0 is the median of all such
    distances (minimum of sum |D_j - D_k|), the smallest index on ties.
    """
    s0 = dataset[0]
    tasks = [
        (_map, (s0.mesh, s0.landmarks, s.mesh, s.landmarks, options, params[0], params[j]))
        for j, s in enumerate(dataset) if j > 0
    ]
    maps = _run(tasks, n_jobs)
    D = np.array([0.0] + [m.distance for m in maps])
    spread = np.abs(D[:, None] - D[None, :]).sum(axis=1)
    return int(np.argmin(spread)), D


def _average_onto(template, lm, tparam, dataset, params, options, n_jobs):
    tasks = [(_map, (template, lm, s.mesh, s.landmarks, options, tparam, params[i])) for i, s in enumerate(dataset)]
    maps = _run(tasks, n_jobs)
    ok = [i for i, m in enumerate(maps) if m.converged]
    dropped = [dataset[i].name or str(i) for i, m in enumerate(maps) if not m.converged]
    if dropped:
        warnings.warn(f"excluding {len(dropped)} subjects with non-converged maps: {dropped}")
    if len(dropped) > MAX_EXCLUDED_FRACTION * len(dataset):
        raise MeshError(f"{len(dropped)} of {len(dataset)} maps did not converge")
    aligned = [rigid_align(maps[i].points, template.vertices) for i in ok]
    return TriMesh(np.mean(aligned, axis=0), template.faces), maps


def mean_surface(dataset, options=None, n_jobs=1, params=None, iterations=2):
    """Mean surface of a dataset, sharing the connectivity of its medoid.

    Returns (mesh, landmarks, info).
    """
    if len(dataset) < 2:
        raise MeshError("mean surface needs at least 2 subjects")
    dataset.check()
    params = params or _run([(_param, (s,)) for s in dataset], n_jobs)
    med, D = _medoid_index(dataset, params, options, n_jobs)
    template = dataset[med].mesh
    lm = dataset[med].landmarks
    tparam = params[med]
    for _ in range(iterations):
        template, _ = _average_onto(template, lm, tparam, dataset, params, options, n_jobs)
        tparam = rectangular_param(template, lm)
    return template, lm, {"medoid": med, "seed_distances": D.tolist(), "param": tparam}


# ------------------------------------------------------------------ features

def curvature_floor(mesh):
    """Absolute floors below which curvature differences are rounding noise."""
    diam = mesh.diameter
    return 1e-9 / diam, 1e-9 / diam**2


def feature_curvatures(mesh):
    """Curvatures with rim values replaced by the mean over interior neighbours.

    Rim angle defects measure boundary turning, not surface bending; left in
    place they leak into interior features through interpolation.
    """
    c = curvatures(mesh)
    H, K = c.H.copy(), c.K.copy()
    e = np.concatenate([mesh.faces[:, [0, 1]], mesh.faces[:, [1, 2]], mesh.faces[:, [2, 0]]])
    n = mesh.n_vertices
    adj = sparse.coo_matrix((np.ones(len(e)), (e[:, 0], e[:, 1])), shape=(n, n)).tocsr()
    adj = ((adj + adj.T) > 0).astype(float)
    known = ~mesh.is_boundary()
    while not known.all():
        cnt = adj @ known.astype(float)
        fill = ~known & (cnt > 0)
        if not fill.any():
            break
        H[fill] = (adj @ np.where(known, H, 0.0))[fill] / cnt[fill]
        K[fill] = (adj @ np.where(known, K, 0.0))[fill] / cnt[fill]
        known = known | fill
    return CurvatureField(H=H, K=K, vertex_area=c.vertex_area, angle_defect=c.angle_defect,
                          low_confidence=c.low_confidence)


def shape_terms_for(surface_map, curv_src, curv_tgt, target_mesh, floor=(0.0, 0.0)):
    """|H_src - H_tgt o f| and |K_src - K_tgt o f| at the source vertices, plus d."""
    H_img = interpolate_scalar(target_mesh, curv_tgt.H, surface_map.face, surface_map.bary)
    K_img = interpolate_scalar(target_mesh, curv_tgt.K, surface_map.face, surface_map.bary)
    dH = np.abs(curv_src.H - H_img)
    dK = np.abs(curv_src.K - K_img)
    dH[dH < floor[0]] = 0.0
    dK[dK < floor[1]] = 0.0
    return dH, dK, surface_map.distance


def shape_index(surface_map, curv_src, curv_tgt, params, target_mesh):
    """Per-vertex shape index alpha|dH| + beta|dK| + gamma d over the source vertices."""
    dH, dK, d = shape_terms_for(surface_map, curv_src, curv_tgt, target_mesh, curvature_floor(target_mesh))
    if len(dH) != surface_map.n_source:
        raise ValueError("curvature field and map sizes differ")
    return params.alpha * dH + params.beta * dK + params.gamma * d


def compute_terms(dataset, mean, mean_lm, options=None, n_jobs=1, params=None, mean_param=None):
    """Maps from the mean to each subject and the resulting shape terms.

    Returns (ShapeTerms, maps, kept_indices); subjects whose maps did not
    converge are left out with a warning.
    """
    params = params or _run([(_param, (s,)) for s in dataset], n_jobs)
    mparam = mean_param or rectangular_param(mean, mean_lm)
    tasks = [(_map, (mean, mean_lm, s.mesh, s.landmarks, options, mparam, params[i])) for i, s in enumerate(dataset)]
    maps = _run(tasks, n_jobs)
    cm = feature_curvatures(mean)
    floor = curvature_floor(mean)
    rows, kept = [], []
    for i, (s, m) in enumerate(zip(dataset, maps)):
        if not m.converged:
            warnings.warn(f"excluding subject {s.name or i}: map did not converge")
            continue
        rows.append(shape_terms_for(m, cm, feature_curvatures(s.mesh), s.mesh, floor))
        kept.append(i)
    if len(dataset) - len(kept) > MAX_EXCLUDED_FRACTION * len(dataset):
        raise MeshError(f"{len(dataset) - len(kept)} of {len(dataset)} maps did not converge")
    terms = ShapeTerms(
        dH=np.array([r[0] for r in rows]),
        dK=np.array([r[1] for r in rows]),
        d=np.array([r[2] for r in rows]),
        labels=np.asarray([dataset[i].label for i in kept]),
        names=[dataset[i].name for i in kept],
    )
    return terms, maps, kept


def build_feature_matrix(terms, params):
    """Stack the shape-index vectors of all subjects (N x M)."""
    if terms.dH.shape != terms.dK.shape or terms.dH.shape[0] != len(terms.d):
        raise ValueError("missing or inconsistent shape terms")
    return FeatureMatrix(terms.combine(params.weights), np.asarray(terms.labels), params)


# ------------------------------------------------------------------ statistics

def _two_classes(labels):
    classes = np.unique(labels)
    if len(classes) != 2:
        raise ClassificationError(f"need exactly two classes, found {len(classes)}")
    counts = [int(np.sum(labels == c)) for c in classes]
    if min(counts) < 2:
        raise ClassificationError("each class needs at least 2 subjects")
    return classes


def vertex_pvalues(values, labels):
    """Welch two-sample t-test p-value per column; constant columns get p = 1."""
    labels = np.asarray(labels)
    a, b = _two_classes(labels)
    X = np.asarray(values, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"), warnings.catch_warnings():
        # constant columns trip scipy's precision warning; they get p = 1 below
        warnings.simplefilter("ignore", RuntimeWarning)
        p = stats.ttest_ind(X[labels == a], X[labels == b], axis=0, equal_var=False).pvalue
    p = np.asarray(p, dtype=float)
    p[np.isnan(p)] = 1.0
    return p


def significant_vertices(C, p_cut, eligible=None, labels=None):
    """Mask of vertices with Welch p-value <= p_cut, and the p-values."""
    values = C.values if isinstance(C, FeatureMatrix) else np.asarray(C)
    lab = C.labels if isinstance(C, FeatureMatrix) else np.asarray(labels)
    p = vertex_pvalues(values, lab)
    mask = p <= p_cut
    if eligible is not None:
        mask &= np.asarray(eligible, dtype=bool)
    return mask, p


def _forest(n_estimators, seed):
    # bagging of unpruned CART trees: every tree sees all masked columns
    return RandomForestClassifier(
        n_estimators=n_estimators, max_features=None, bootstrap=True, oob_score=True, random_state=seed, n_jobs=1
    )


def oob_predictions(X, y, n_estimators=100, seed=0):
    """Out-of-bag class predictions of a bagged tree ensemble (None if never out of bag)."""
    forest = _forest(n_estimators, seed)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        forest.fit(X, y)
    dec = forest.oob_decision_function_
    pred = []
    for row in dec:
        if not np.all(np.isfinite(row)) or row.sum() == 0:
            pred.append(None)
        else:
            pred.append(forest.classes_[int(np.argmax(row))])
    return pred, forest


def classify(C, mask, params=None, n_estimators=100, seed=0, labels=None):
    """Bagged-tree classification on the masked columns, scored out of bag."""
    values = C.values if isinstance(C, FeatureMatrix) else np.asarray(C)
    lab = np.asarray(C.labels if isinstance(C, FeatureMatrix) else labels)
    classes = _two_classes(lab)
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise ClassificationError("no statistically significant vertices")
    pred, _ = oob_predictions(values[:, mask], lab, n_estimators, seed)
    correct = np.array([p is not None and p == t for p, t in zip(pred, lab)])
    rates = {c.item() if hasattr(c, "item") else c: float(correct[lab == c].mean()) for c in classes}
    return ClassificationReport(
        overall_accuracy=float(correct.mean()),
        class_rates=rates,
        significant_vertex_mask=mask,
        params=params if params is not None else getattr(C, "params", None),
        num_significant=int(mask.sum()),
        predictions=[p.item() if hasattr(p, "item") else p for p in pred],
        labels=[x.item() if hasattr(x, "item") else x for x in lab],
        n_estimators=n_estimators,
        seed=seed,
    )


# ------------------------------------------------------------------ search

@dataclass(frozen=True)
class GridPoint:
    theta: float
    phi: float
    n: int
    m: int

    @property
    def weights(self):
        w = np.array(
            [math.sin(self.theta) * math.cos(self.phi), math.sin(self.theta) * math.sin(self.phi), math.cos(self.theta)]
        )
        w[np.abs(w) < 1e-12] = 0.0
        return w / np.linalg.norm(w)


def sphere_grid(rho, octant=True):
    """Grid points (n rho, m rho) on the sphere, n = 0..floor(pi/rho), m = 0..ceil(2pi/rho)-1.

    The pole n = 0 appears once.  With ``octant`` only nonnegative weights are
    kept, and the three coordinate axes are always included.
    """
    n_max = int(math.floor(math.pi / rho + 1e-9))
    m_count = int(math.ceil(2.0 * math.pi / rho - 1e-9))
    pts = [GridPoint(0.0, 0.0, 0, 0)]
    for n in range(1, n_max + 1):
        for m in range(m_count):
            pts.append(GridPoint(n * rho, m * rho, n, m))
    if octant:
        keep = []
        for p in pts:
            w = np.array(
                [math.sin(p.theta) * math.cos(p.phi), math.sin(p.theta) * math.sin(p.phi), math.cos(p.theta)]
            )
            if np.all(w >= -1e-12):
                keep.append(p)
        pts = keep
        axes = [GridPoint(math.pi / 2, 0.0, -1, -1), GridPoint(math.pi / 2, math.pi / 2, -1, -1)]
        for a in axes:
            if not any(np.allclose(a.weights, p.weights, atol=1e-12) for p in pts):
                pts.append(a)
    return pts


@dataclass
class SearchResult:
    best: ClassificationReport
    table: list
    skipped: list

    def to_json(self):
        return {
            "best": self.best.to_json(),
            "evaluated": len(self.table),
            "skipped_empty": len(self.skipped),
        }


def _evaluate_point(terms, gp, p_cut_grid, eligible, n_estimators, seed):
    w = gp.weights
    params_w = ShapeIndexParams(*w.tolist(), p_cut=1.0)
    C = FeatureMatrix(terms.combine(w), np.asarray(terms.labels), params_w)
    p = vertex_pvalues(C.values, C.labels)
    rows, skipped = [], []
    cache = {}
    for pc in p_cut_grid:
        mask = p <= pc
        if eligible is not None:
            mask &= eligible
        params = ShapeIndexParams(*w.tolist(), p_cut=pc)
        if not mask.any():
            skipped.append((gp, pc))
            continue
        key = mask.tobytes()
        if key not in cache:
            cache[key] = classify(C, mask, params, n_estimators, seed)
        rep = cache[key]
        rows.append((gp, pc, ClassificationReport(**{**rep.__dict__, "params": params})))
    return rows, skipped


def _rank_key(gp, pc, rep):
    return (-rep.overall_accuracy, rep.num_significant, gp.theta, gp.phi, pc)


def sms_search(terms, rho=0.02 * math.pi, p_cut_grid=DEFAULT_PCUT_GRID, seed=0, eligible=None,
               n_estimators=100, n_jobs=1, allow_any_rho=False):
    """Spherical marching search over (alpha, beta, gamma) and p_cut.

    Every evaluation seeds its own tree ensemble with ``seed``, so results do
    not depend on evaluation order or worker count.
    """
    if not allow_any_rho and not (RHO_RANGE[0] - 1e-12 <= rho <= RHO_RANGE[1] + 1e-12):
        raise ValueError(f"rho must lie in [0.01 pi, 0.03 pi], got {rho}")
    if rho <= 0:
        raise ValueError("rho must be positive")
    _two_classes(np.asarray(terms.labels))
    grid = sphere_grid(rho)
    elig = None if eligible is None else np.asarray(eligible, dtype=bool)
    tasks = [(_evaluate_point, (terms, gp, tuple(p_cut_grid), elig, n_estimators, seed)) for gp in grid]
    results = _run(tasks, n_jobs)
    table, skipped = [], []
    for rows, sk in results:
        table += rows
        skipped += sk
    if not table:
        raise ClassificationError("no statistically significant vertices at any grid point")
    gp, pc, rep = min(table, key=lambda r: _rank_key(*r))
    rep.extra = {"theta": gp.theta, "phi": gp.phi, "grid_n": gp.n, "grid_m": gp.m, "rho": rho}
    return SearchResult(rep, table, skipped)


# ------------------------------------------------------------------ pipeline

@dataclass
class PipelineResult:
    report: ClassificationReport
    search: SearchResult
    mean: TriMesh
    mean_landmarks: object
    terms: ShapeTerms
    maps: list
    pvalues: np.ndarray
    feature_matrix: FeatureMatrix
    eligible: np.ndarray


def run_pipeline(dataset, rho=0.02 * math.pi, p_cut_grid=DEFAULT_PCUT_GRID, seed=0, out_dir=None,
                 exclude_boundary=True, options=None, n_jobs=1, n_estimators=100, allow_any_rho=False):
    """Mean surface, maps, shape terms and parameter search; writes artifacts to ``out_dir``."""
    if not isinstance(dataset, Dataset):
        dataset = Dataset(list(dataset))
    dataset.check()
    _two_classes(dataset.labels)
    options = options or QCOptions()
    params = _run([(_param, (s,)) for s in dataset], n_jobs)
    mean, mean_lm, info = mean_surface(dataset, options, n_jobs, params)
    terms, maps, kept = compute_terms(dataset, mean, mean_lm, options, n_jobs, params, info["param"])
    eligible = ~mean.is_boundary() if exclude_boundary else np.ones(mean.n_vertices, dtype=bool)
    search = sms_search(terms, rho, p_cut_grid, seed, eligible, n_estimators, n_jobs, allow_any_rho)
    best = search.best
    C = build_feature_matrix(terms, ShapeIndexParams(best.params.alpha, best.params.beta, best.params.gamma, 1.0))
    p = vertex_pvalues(C.values, C.labels)
    best.extra.update({"n_subjects": len(kept), "n_vertices": int(mean.n_vertices), "medoid": info["medoid"]})
    result = PipelineResult(best, search, mean, mean_lm, terms, maps, p, C, eligible)
    if out_dir is not None:
        write_artifacts(result, out_dir, dataset, kept)
    return result


def write_artifacts(result, out_dir, dataset=None, kept=None):
    from .io import write_csv_matrix, write_index_csv, write_json, write_pvalues

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_mesh(result.mean, out / "mean.obj")
    write_landmarks(result.mean_landmarks, out / "mean.lmk")
    write_json(result.report.to_json(), out / "report.json")
    names = result.terms.names
    write_csv_matrix(result.feature_matrix.values, result.terms.labels, names, out / "features.csv")
    write_index_csv(np.flatnonzero(result.report.significant_vertex_mask), out / "mask.csv")
    write_pvalues(result.pvalues, out / "pvalues.csv")
    maps_dir = out / "maps"
    maps_dir.mkdir(exist_ok=True)
    idx = kept if kept is not None else range(len(result.maps))
    for i in idx:
        m = result.maps[i]
        name = dataset[i].name if dataset is not None and dataset[i].name else f"subject_{i:03d}"
        write_json(m.to_json(), maps_dir / f"{name}.json")
    rows = [
        {"theta": gp.theta, "phi": gp.phi, "alpha": r.params.alpha, "beta": r.params.beta, "gamma": r.params.gamma,
         "p_cut": pc, "num_significant": r.num_significant, "accuracy": r.overall_accuracy}
        for gp, pc, r in result.search.table
    ]
    write_json({"evaluations": rows, "skipped_empty": len(result.search.skipped)}, out / "search.json")
