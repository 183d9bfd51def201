"""Discrete differential geometry on triangle meshes.

Beltrami coefficients of piecewise-linear maps, the cotangent Laplacian and
vertex curvatures (angle-defect Gaussian curvature, cotangent mean curvature,
mixed Voronoi areas).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .mesh import TriMesh


class FoldError(ValueError):
    """A map collapses a face (|f_z| = 0) or a composition is singular."""


@dataclass
class BeltramiField:
    """Per-face Beltrami coefficient of a piecewise-linear map."""

    mu: np.ndarray

    @property
    def abs(self):
        return np.abs(self.mu)

    @property
    def folds(self):
        """Indices of faces with |mu| >= 1 (orientation reversed or degenerate)."""
        return np.flatnonzero(np.abs(self.mu) >= 1.0)

    def __len__(self):
        return len(self.mu)


@dataclass
class CurvatureField:
    H: np.ndarray
    K: np.ndarray
    vertex_area: np.ndarray
    angle_defect: np.ndarray
    low_confidence: np.ndarray

    def to_rows(self):
        return [
            (i, float(h), float(k), float(a))
            for i, (h, k, a) in enumerate(zip(self.H, self.K, self.vertex_area))
        ]


def _as_points_faces(source):
    if isinstance(source, TriMesh):
        return source.vertices, source.faces
    pts, faces = source
    return np.asarray(pts, dtype=float), np.asarray(faces)


def local_face_coords(points, faces):
    """Per-face 2D coordinates, shape (F, 3, 2).

    Planar input is used as is; 3D triangles are laid out isometrically in a
    per-face orthonormal frame (first edge along x), preserving orientation
    relative to the face normal.
    """
    p = np.asarray(points, dtype=float)
    if p.shape[1] == 2:
        return p[faces]
    if np.allclose(p[:, 2], 0.0, atol=0.0):
        return p[faces][:, :, :2]
    a, b, c = p[faces[:, 0]], p[faces[:, 1]], p[faces[:, 2]]
    e1 = b - a
    l1 = np.linalg.norm(e1, axis=1)
    x_axis = e1 / l1[:, None]
    n = np.cross(e1, c - a)
    n /= np.linalg.norm(n, axis=1)[:, None]
    y_axis = np.cross(n, x_axis)
    out = np.zeros((len(faces), 3, 2))
    out[:, 1, 0] = l1
    out[:, 2, 0] = np.einsum("ij,ij->i", c - a, x_axis)
    out[:, 2, 1] = np.einsum("ij,ij->i", c - a, y_axis)
    return out


def basis_gradients(tri2d):
    """Gradients of the three hat functions on each 2D triangle.

    Returns (grads, signed_area) with grads of shape (F, 3, 2).
    """
    p0, p1, p2 = tri2d[:, 0], tri2d[:, 1], tri2d[:, 2]
    area2 = (p1[:, 0] - p0[:, 0]) * (p2[:, 1] - p0[:, 1]) - (p1[:, 1] - p0[:, 1]) * (p2[:, 0] - p0[:, 0])
    grads = np.empty((len(tri2d), 3, 2))
    for a, (b, c) in enumerate(((1, 2), (2, 0), (0, 1))):
        e = tri2d[:, c] - tri2d[:, b]
        grads[:, a, 0] = -e[:, 1] / area2
        grads[:, a, 1] = e[:, 0] / area2
    return grads, 0.5 * area2


def wirtinger(source, target):
    """Per-face Wirtinger derivatives (f_z, f_zbar) of the PL map source -> target.

    ``source`` is a TriMesh or a ``(points, faces)`` pair; ``target`` is a
    (V, 2) array of image points (or complex array).
    """
    pts, faces = _as_points_faces(source)
    tgt = np.asarray(target)
    if np.iscomplexobj(tgt):
        tgt = np.column_stack([tgt.real, tgt.imag])
    grads, area = basis_gradients(local_face_coords(pts, faces))
    if np.any(area <= 0):
        raise ValueError("source faces must have positive area")
    u = tgt[faces, 0]
    v = tgt[faces, 1]
    ux = np.einsum("fi,fi->f", grads[:, :, 0], u)
    uy = np.einsum("fi,fi->f", grads[:, :, 1], u)
    vx = np.einsum("fi,fi->f", grads[:, :, 0], v)
    vy = np.einsum("fi,fi->f", grads[:, :, 1], v)
    fz = 0.5 * ((ux + vy) + 1j * (vx - uy))
    fzbar = 0.5 * ((ux - vy) + 1j * (vx + uy))
    return fz, fzbar


def beltrami_from_map(source, target):
    """Beltrami coefficient mu = f_zbar / f_z of the PL map, one value per face."""
    fz, fzbar = wirtinger(source, target)
    dead = np.abs(fz) == 0
    if dead.any():
        raise FoldError(f"map collapses face {int(np.argmax(dead))} (f_z = 0)")
    return BeltramiField(fzbar / fz)


def compose_beltrami(mu_f, fz, mu_g):
    """Beltrami coefficient of g o f from mu_f, f_z and mu_g evaluated on f's image faces."""
    mu_f = np.asarray(getattr(mu_f, "mu", mu_f))
    mu_g = np.asarray(getattr(mu_g, "mu", mu_g))
    fz = np.asarray(fz)
    rot = np.conj(fz) / fz
    den = 1.0 + rot * np.conj(mu_f) * mu_g
    if np.any(np.abs(den) < 1e-14):
        raise FoldError("composition denominator vanishes")
    return BeltramiField((mu_f + rot * mu_g) / den)


def corner_cotangents(points, faces):
    """Cotangent of the interior angle at each face corner, shape (F, 3)."""
    p = np.asarray(points, dtype=float)
    if p.shape[1] == 2:
        p = np.column_stack([p, np.zeros(len(p))])
    cots = np.empty((len(faces), 3))
    for a, (b, c) in enumerate(((1, 2), (2, 0), (0, 1))):
        u = p[faces[:, b]] - p[faces[:, a]]
        w = p[faces[:, c]] - p[faces[:, a]]
        cots[:, a] = np.einsum("ij,ij->i", u, w) / np.linalg.norm(np.cross(u, w), axis=1)
    return cots


def corner_angles(points, faces):
    p = np.asarray(points, dtype=float)
    if p.shape[1] == 2:
        p = np.column_stack([p, np.zeros(len(p))])
    ang = np.empty((len(faces), 3))
    for a, (b, c) in enumerate(((1, 2), (2, 0), (0, 1))):
        u = p[faces[:, b]] - p[faces[:, a]]
        w = p[faces[:, c]] - p[faces[:, a]]
        ang[:, a] = np.arctan2(np.linalg.norm(np.cross(u, w), axis=1), np.einsum("ij,ij->i", u, w))
    return ang


def cotan_laplacian(mesh, points=None):
    """Cotangent Laplacian with L_ij = (cot a_ij + cot b_ij)/2 and zero row sums.

    ``points`` overrides the mesh positions (e.g. a planar embedding with the
    same connectivity).
    """
    return cotan_matrix(mesh.vertices if points is None else points, mesh.faces)


def cotan_matrix(pts, faces):
    n = len(pts)
    cots = corner_cotangents(pts, faces)
    rows, cols, vals = [], [], []
    for a, (b, c) in enumerate(((1, 2), (2, 0), (0, 1))):
        w = 0.5 * cots[:, a]
        rows += [faces[:, b], faces[:, c]]
        cols += [faces[:, c], faces[:, b]]
        vals += [w, w]
    rows = np.concatenate(rows)
    cols = np.concatenate(cols)
    vals = np.concatenate(vals)
    W = sp.csr_matrix((vals, (rows, cols)), shape=(n, n))
    return (W - sp.diags(np.asarray(W.sum(axis=1)).ravel())).tocsr()


def mixed_areas(points, faces):
    """Mixed Voronoi vertex areas with the obtuse-triangle fallback."""
    p = np.asarray(points, dtype=float)
    if p.shape[1] == 2:
        p = np.column_stack([p, np.zeros(len(p))])
    n = len(p)
    cots = corner_cotangents(p, faces)
    ang = corner_angles(p, faces)
    area = 0.5 * np.linalg.norm(np.cross(p[faces[:, 1]] - p[faces[:, 0]], p[faces[:, 2]] - p[faces[:, 0]]), axis=1)
    sq = np.empty((len(faces), 3))
    for a, (b, c) in enumerate(((1, 2), (2, 0), (0, 1))):
        sq[:, a] = np.sum((p[faces[:, b]] - p[faces[:, c]]) ** 2, axis=1)  # opposite edge
    contrib = np.empty((len(faces), 3))
    for a, (b, c) in enumerate(((1, 2), (2, 0), (0, 1))):
        # edges a-b (opposite c) and a-c (opposite b)
        contrib[:, a] = (sq[:, c] * cots[:, c] + sq[:, b] * cots[:, b]) / 8.0
    obtuse = ang > np.pi / 2
    any_obtuse = obtuse.any(axis=1)
    contrib[any_obtuse] = area[any_obtuse, None] / 4.0
    contrib[obtuse] = (area[:, None] / 2.0 * np.ones(3))[obtuse]
    out = np.zeros(n)
    np.add.at(out, faces.ravel(), contrib.ravel())
    return out


def vertex_normals(mesh):
    v, f = mesh.vertices, mesh.faces
    fn = np.cross(v[f[:, 1]] - v[f[:, 0]], v[f[:, 2]] - v[f[:, 0]])
    vn = np.zeros_like(v)
    for k in range(3):
        np.add.at(vn, f[:, k], fn)
    return vn / np.linalg.norm(vn, axis=1)[:, None]


def angle_defects(mesh):
    """2*pi minus the angle sum at interior vertices, pi minus it on the boundary."""
    ang = corner_angles(mesh.vertices, mesh.faces)
    total = np.zeros(mesh.n_vertices)
    np.add.at(total, mesh.faces.ravel(), ang.ravel())
    target = np.full(mesh.n_vertices, 2.0 * np.pi)
    target[mesh.boundary] = np.pi
    return target - total


def curvatures(mesh):
    """Mean and Gaussian curvature per vertex.

    H > 0 where the surface bends toward the face-orientation normal (a sphere
    with outward normals has H = 1/r).  Boundary values use the truncated
    one-ring and are marked ``low_confidence``.
    """
    area = mixed_areas(mesh.vertices, mesh.faces)
    defect = angle_defects(mesh)
    K = defect / area
    LX = cotan_laplacian(mesh) @ mesh.vertices
    n = vertex_normals(mesh)
    mag = np.linalg.norm(LX, axis=1) / (2.0 * area)
    sign = np.where(np.einsum("ij,ij->i", -LX, n) >= 0, 1.0, -1.0)
    return CurvatureField(
        H=sign * mag, K=K, vertex_area=area, angle_defect=defect, low_confidence=mesh.is_boundary()
    )


def interpolate_scalar(mesh, field, face_idx, bary, tol=1e-9):
    """Barycentric interpolation of a per-vertex field at (face, barycentric) points."""
    bary = np.atleast_2d(np.asarray(bary, dtype=float))
    face_idx = np.atleast_1d(np.asarray(face_idx))
    if np.any(bary < -tol) or np.any(bary > 1 + tol):
        raise ValueError("barycentric coordinates outside [0, 1]")
    vals = np.asarray(field)[mesh.faces[face_idx]]
    return np.einsum("ij,ij->i", vals, bary)
