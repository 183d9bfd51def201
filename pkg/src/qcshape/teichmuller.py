"""Landmark-matching Teichmuller maps between rectangles and between surfaces."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .conformal import rectangular_param
from .diffgeo import FoldError, basis_gradients
from .mesh import MeshError, validate_pair

log = logging.getLogger(__name__)


class SolverError(RuntimeError):
    """Singular linear Beltrami system."""


@dataclass
class QCOptions:
    uniformity_tol: float = 0.05
    mean_change_tol: float = 1e-4
    max_iter: int = 200
    smoothing_step: float = 0.5
    # the step at iteration n is smoothing_step / (1 + n / smoothing_decay)
    smoothing_decay: float = 10.0
    fold_patience: int = 10

    def as_dict(self):
        return dict(self.__dict__)


def teichmuller_distance(k):
    """Teichmuller distance 1/2 log((1+k)/(1-k)) for a dilatation 0 <= k < 1."""
    k = np.asarray(k, dtype=float)
    if np.any(k < 0) or np.any(k >= 1):
        raise ValueError("k must lie in [0, 1)")
    d = np.arctanh(k)
    return float(d) if d.ndim == 0 else d


def beltrami_tensor(mu):
    """Per-face coefficients (a1, a2, a3) of the symmetric diffusion tensor A(mu)."""
    rho, tau = mu.real, mu.imag
    den = 1.0 - np.abs(mu) ** 2
    a1 = ((rho - 1.0) ** 2 + tau**2) / den
    a2 = -2.0 * tau / den
    a3 = ((1.0 + rho) ** 2 + tau**2) / den
    return a1, a2, a3


def beltrami_stiffness(uv, faces, mu):
    """Stiffness matrix of div(A(mu) grad f) for P1 elements on a planar mesh."""
    grads, area = basis_gradients(uv[faces])
    if np.any(area <= 0):
        raise SolverError("source embedding has flipped faces")
    a1, a2, a3 = beltrami_tensor(np.asarray(mu))
    gx, gy = grads[:, :, 0], grads[:, :, 1]
    # (A g_i) . g_j per face
    Agx = a1[:, None] * gx + a2[:, None] * gy
    Agy = a2[:, None] * gx + a3[:, None] * gy
    local = area[:, None, None] * (Agx[:, :, None] * gx[:, None, :] + Agy[:, :, None] * gy[:, None, :])
    rows = np.repeat(faces, 3, axis=1).ravel()
    cols = np.tile(faces, (1, 3)).ravel()
    n = len(uv)
    return sp.csr_matrix((local.ravel(), (rows, cols)), shape=(n, n))


def _dirichlet(K, fixed, values):
    n = K.shape[0]
    x = np.zeros(n)
    x[fixed] = values
    free = np.setdiff1d(np.arange(n), fixed)
    if len(free) == 0:
        return x
    b = -(K[free][:, fixed] @ values)
    try:
        x[free] = spla.splu(K[free][:, free].tocsc()).solve(b)
    except RuntimeError as exc:
        raise SolverError(f"singular linear Beltrami system ({exc})") from exc
    if not np.all(np.isfinite(x)):
        raise SolverError("non-finite linear Beltrami solution")
    return x


@dataclass
class Constraints:
    """Fixed values of the two coordinate functions: vertex -> value."""

    u: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def pin(self, vertex, uv):
        self.u[int(vertex)] = float(uv[0])
        self.v[int(vertex)] = float(uv[1])

    def arrays(self, which):
        d = self.u if which == "u" else self.v
        keys = np.array(sorted(d), dtype=np.int64)
        return keys, np.array([d[k] for k in keys], dtype=float)


def linear_beltrami_solver(uv, faces, mu, constraints):
    """Map with Beltrami coefficient ~ mu under the given coordinate constraints.

    Both coordinates solve div(A(mu) grad f) = 0; each has its own Dirichlet
    set, so sliding boundary conditions are expressed by fixing only one
    coordinate on a side.
    """
    mu = np.asarray(getattr(mu, "mu", mu), dtype=complex)
    if np.any(np.abs(mu) >= 1):
        raise ValueError("|mu| must be < 1 on every face")
    K = beltrami_stiffness(np.asarray(uv, dtype=float), np.asarray(faces), mu)
    fu, vu = constraints.arrays("u")
    fv, vv = constraints.arrays("v")
    if len(fu) == 0 or len(fv) == 0:
        raise SolverError("each coordinate needs at least one fixed vertex")
    return np.column_stack([_dirichlet(K, fu, vu), _dirichlet(K, fv, vv)])


def rectangle_constraints(src, target_height, landmarks=(), landmark_uv=()):
    """Pinned corners, sliding sides and pinned landmarks for a rectangle map.

    ``src`` is the source rectangle; its sides map onto the sides of
    [0, 1] x [0, target_height].  Corner landmarks are already pinned; a
    landmark on a non-corner boundary vertex keeps its side coordinate.
    """
    c = Constraints()
    h = float(target_height)
    side = src.side
    for vtx in np.flatnonzero(side >= 0):
        s = side[vtx]
        if s == 0:
            c.v[int(vtx)] = 0.0
        elif s == 1:
            c.u[int(vtx)] = 1.0
        elif s == 2:
            c.v[int(vtx)] = h
        else:
            c.u[int(vtx)] = 0.0
    for vtx, p in zip(src.corners, [(0.0, 0.0), (1.0, 0.0), (1.0, h), (0.0, h)]):
        c.pin(vtx, p)
    corner_set = set(int(x) for x in src.corners)
    for vtx, p in zip(landmarks, landmark_uv):
        vtx = int(vtx)
        if vtx in corner_set:
            continue
        s = side[vtx]
        if s >= 0:
            expected = {0: (1, 0.0), 1: (0, 1.0), 2: (1, h), 3: (0, 0.0)}[s]
            if abs(p[expected[0]] - expected[1]) > 1e-9:
                raise MeshError(f"boundary landmark {vtx} has no counterpart on the same side")
        c.pin(vtx, p)
    return c


def _face_adjacency(faces):
    e = np.concatenate([faces[:, [0, 1]], faces[:, [1, 2]], faces[:, [2, 0]]])
    fid = np.tile(np.arange(len(faces)), 3)
    e = np.sort(e, axis=1)
    order = np.lexsort((e[:, 1], e[:, 0]))
    e, fid = e[order], fid[order]
    same = np.all(e[1:] == e[:-1], axis=1)
    a, b = fid[:-1][same], fid[1:][same]
    n = len(faces)
    W = sp.csr_matrix((np.ones(2 * len(a)), (np.r_[a, b], np.r_[b, a])), shape=(n, n))
    deg = np.asarray(W.sum(axis=1)).ravel()
    deg[deg == 0] = 1.0
    return sp.diags(1.0 / deg) @ W


def _uniformity(absmu, area):
    w = area / area.sum()
    k = float(np.sum(w * absmu))
    if k < 1e-12:
        return k, 0.0
    sd = float(np.sqrt(np.sum(w * (absmu - k) ** 2)))
    return k, sd / k


@dataclass
class QCResult:
    uv: np.ndarray
    mu: np.ndarray
    k: float
    residual_uniformity: float
    converged: bool
    iterations: int
    history: list = field(default_factory=list)


def qc_iterate(rect_i, rect_j, lm_i, lm_uv_j, options=None):
    """Landmark-matching Teichmuller map between two rectangles.

    ``lm_i`` are source landmark vertices, ``lm_uv_j`` their target positions
    in ``rect_j``.  Each step solves the linear Beltrami system, measures the
    map's Beltrami coefficient, replaces |mu| by its area-weighted mean and
    smooths the result over face neighbours.
    """
    opt = options or QCOptions()
    uv0 = rect_i.uv
    faces = rect_i.faces
    area = rect_i.signed_areas()
    cons = rectangle_constraints(rect_i, rect_j.height, lm_i, lm_uv_j)
    smooth = _face_adjacency(faces)
    nu = np.zeros(len(faces), dtype=complex)
    best = None
    prev_k = None
    fold_run = 0
    history = []
    for it in range(1, opt.max_iter + 1):
        uv = linear_beltrami_solver(uv0, faces, nu, cons)
        fz, fzbar = _wirtinger_planar(uv0, faces, uv)
        absfz = np.abs(fz)
        folded = np.abs(fzbar) >= absfz
        mu = np.where(absfz > 0, fzbar / np.where(absfz > 0, fz, 1.0), 1.0)
        absmu = np.abs(mu)
        if folded.any():
            fold_run += 1
            if fold_run > opt.fold_patience:
                raise FoldError(f"{int(folded.sum())} folded faces persist after {fold_run} iterations")
        else:
            fold_run = 0
        k, ru = _uniformity(absmu, area)
        history.append((k, ru))
        if not folded.any() and (best is None or ru < best.residual_uniformity):
            best = QCResult(uv, mu, k, ru, False, it)
        done = not folded.any() and (
            k < 1e-12 or (ru < opt.uniformity_tol and (prev_k is None or abs(k - prev_k) < opt.mean_change_tol))
        )
        if done:
            return QCResult(uv, mu, k, ru, True, it, history)
        prev_k = k
        # Teichmuller projection: constant modulus, keep argument, then smooth
        unit = np.where(absmu > 0, mu / np.where(absmu > 0, absmu, 1.0), 0.0)
        nu = k * unit
        step = opt.smoothing_step / (1.0 + (it - 1) / opt.smoothing_decay)
        nu = (1.0 - step) * nu + step * (smooth @ nu)
        big = np.abs(nu) >= 0.999
        nu[big] *= 0.999 / np.abs(nu[big])
    if best is None:
        raise FoldError("no fold-free iterate")
    best.history = history
    log.warning("QC iteration did not converge in %d iterations (uniformity %.3g)", opt.max_iter, best.residual_uniformity)
    return best


def _wirtinger_planar(uv0, faces, uv):
    grads, _ = basis_gradients(uv0[faces])
    u, v = uv[faces, 0], uv[faces, 1]
    ux = np.einsum("fi,fi->f", grads[:, :, 0], u)
    uy = np.einsum("fi,fi->f", grads[:, :, 1], u)
    vx = np.einsum("fi,fi->f", grads[:, :, 0], v)
    vy = np.einsum("fi,fi->f", grads[:, :, 1], v)
    return 0.5 * ((ux + vy) + 1j * (vx - uy)), 0.5 * ((ux - vy) + 1j * (vx + uy))


class PointLocator:
    """Uniform-grid point location in a planar triangulation."""

    def __init__(self, uv, faces, cells=None):
        self.uv = np.asarray(uv, dtype=float)
        self.faces = np.asarray(faces)
        tri = self.uv[self.faces]
        self.lo = self.uv.min(axis=0)
        self.hi = self.uv.max(axis=0)
        n = cells or max(1, int(np.sqrt(len(self.faces) / 2)))
        self.n = n
        span = np.maximum(self.hi - self.lo, 1e-300)
        self.scale = n / span
        fmin = np.clip(((tri.min(axis=1) - self.lo) * self.scale).astype(int), 0, n - 1)
        fmax = np.clip(((tri.max(axis=1) - self.lo) * self.scale).astype(int), 0, n - 1)
        buckets = [[] for _ in range(n * n)]
        for f, (a, b) in enumerate(zip(fmin, fmax)):
            for ix in range(a[0], b[0] + 1):
                for iy in range(a[1], b[1] + 1):
                    buckets[ix * n + iy].append(f)
        self.buckets = [np.array(b, dtype=np.int64) for b in buckets]
        p0, p1, p2 = tri[:, 0], tri[:, 1], tri[:, 2]
        self.det = (p1[:, 0] - p0[:, 0]) * (p2[:, 1] - p0[:, 1]) - (p1[:, 1] - p0[:, 1]) * (p2[:, 0] - p0[:, 0])

    def barycentric(self, faces, p):
        tri = self.uv[self.faces[faces]]
        p0, p1, p2 = tri[:, 0], tri[:, 1], tri[:, 2]
        d = self.det[faces]
        l1 = ((p[0] - p0[:, 0]) * (p2[:, 1] - p0[:, 1]) - (p[1] - p0[:, 1]) * (p2[:, 0] - p0[:, 0])) / d
        l2 = ((p1[:, 0] - p0[:, 0]) * (p[1] - p0[:, 1]) - (p1[:, 1] - p0[:, 1]) * (p[0] - p0[:, 0])) / d
        return np.column_stack([1.0 - l1 - l2, l1, l2])

    def locate(self, points, tol=1e-9):
        """(face index, barycentric) per point; raises if a point lies outside by more than tol."""
        pts = np.atleast_2d(points)
        out_f = np.empty(len(pts), dtype=np.int64)
        out_b = np.empty((len(pts), 3))
        for i, p in enumerate(pts):
            c = np.clip(((p - self.lo) * self.scale).astype(int), 0, self.n - 1)
            cand = self.buckets[c[0] * self.n + c[1]]
            if len(cand):
                bc = self.barycentric(cand, p)
                j = int(np.argmax(bc.min(axis=1)))
                f, b = cand[j], bc[j]
            else:
                f, b = -1, np.full(3, -np.inf)
            if b.min() < -tol:
                allf = np.arange(len(self.faces))
                bc = self.barycentric(allf, p)
                j = int(np.argmax(bc.min(axis=1)))
                f, b = j, bc[j]
                if b.min() < -tol:
                    raise MeshError(f"point {p} lies outside the target domain")
            b = np.clip(b, 0.0, None)
            out_f[i] = f
            out_b[i] = b / b.sum()
        return out_f, out_b


@dataclass
class SurfaceMap:
    """Correspondence from source vertices to points on the target mesh."""

    face: np.ndarray
    bary: np.ndarray
    points: np.ndarray
    mu: np.ndarray
    k: float
    distance: float
    residual_uniformity: float
    converged: bool
    iterations: int
    rect_uv: np.ndarray = None
    n_source: int = 0

    def to_json(self):
        return {
            "k": self.k,
            "distance": self.distance,
            "residual_uniformity": self.residual_uniformity,
            "converged": bool(self.converged),
            "iterations": int(self.iterations),
            "images": [
                {"face": int(f), "bary": [float(x) for x in b]} for f, b in zip(self.face, self.bary)
            ],
        }


def compose_to_surface(h_uv, rect_j, mesh_j):
    """Pull rectangle images back to mesh_j through its (bijective, piecewise-linear) parameterization."""
    loc = PointLocator(rect_j.uv, rect_j.faces)
    face, bary = loc.locate(h_uv)
    pts = np.einsum("ij,ijk->ik", bary, mesh_j.vertices[mesh_j.faces[face]])
    return face, bary, pts


def landmark_tmap(mesh_i, lm_i, mesh_j, lm_j, options=None, param_i=None, param_j=None):
    """Landmark-matching Teichmuller map from surface i to surface j.

    Precomputed rectangular parameterizations can be passed to avoid
    recomputing them for every pair.
    """
    validate_pair(mesh_i, lm_i, mesh_j, lm_j)
    pi = param_i or rectangular_param(mesh_i, lm_i)
    pj = param_j or rectangular_param(mesh_j, lm_j)
    res = qc_iterate(pi.embedding, pj.embedding, list(lm_i.indices), pj.landmark_uv, options)
    face, bary, pts = compose_to_surface(res.uv, pj.embedding, mesh_j)
    return SurfaceMap(
        face=face, bary=bary, points=pts, mu=res.mu, k=res.k, distance=teichmuller_distance(min(res.k, 1 - 1e-15)),
        residual_uniformity=res.residual_uniformity, converged=res.converged, iterations=res.iterations,
        rect_uv=res.uv, n_source=mesh_i.n_vertices,
    )
