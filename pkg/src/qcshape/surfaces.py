"""Analytic test surfaces: planar grids and disks, sphere caps, cylinder patches."""
from __future__ import annotations

import numpy as np
from scipy.spatial import Delaunay

from .mesh import TriMesh


def grid_rectangle(width=1.0, height=1.0, nx=10, ny=10, diagonal="alternate"):
    """Structured triangulation of [0, width] x [0, height].

    Returns (mesh, corners) with corners (0,0), (w,0), (w,h), (0,h) as vertex indices.
    """
    xs = np.linspace(0.0, width, nx + 1)
    ys = np.linspace(0.0, height, ny + 1)
    X, Y = np.meshgrid(xs, ys)
    verts = np.column_stack([X.ravel(), Y.ravel(), np.zeros(X.size)])
    idx = np.arange((nx + 1) * (ny + 1)).reshape(ny + 1, nx + 1)
    faces = []
    for j in range(ny):
        for i in range(nx):
            a, b, c, d = idx[j, i], idx[j, i + 1], idx[j + 1, i + 1], idx[j + 1, i]
            flip = diagonal == "alternate" and (i + j) % 2 == 1
            if flip:
                faces += [[a, b, d], [b, c, d]]
            else:
                faces += [[a, b, c], [a, c, d]]
    corners = (int(idx[0, 0]), int(idx[0, nx]), int(idx[ny, nx]), int(idx[ny, 0]))
    return TriMesh(verts, faces), corners


def _sunflower(n_interior, r_max):
    golden = np.pi * (3.0 - np.sqrt(5.0))
    k = np.arange(n_interior)
    r = r_max * np.sqrt((k + 0.5) / n_interior)
    t = k * golden
    return np.column_stack([r * np.cos(t), r * np.sin(t)])


def unit_disk_points(n_vertices):
    """Near-uniform points in the closed unit disk: a boundary ring plus a sunflower spiral.

    The total number of points is exactly ``n_vertices``.
    """
    if n_vertices < 10:
        raise ValueError("need at least 10 vertices")
    # n_b ~ 2 pi / h with n_i ~ pi / (h^2 sqrt(3)/2)
    h = np.sqrt(np.pi / (n_vertices * np.sqrt(3.0) / 2.0))
    n_b = int(round(2.0 * np.pi / h))
    for _ in range(20):
        n_i = n_vertices - n_b
        h = np.sqrt(np.pi / ((n_i + n_b / 2.0) * np.sqrt(3.0) / 2.0))
        n_new = int(round(2.0 * np.pi / h))
        if n_new == n_b:
            break
        n_b = n_new
    n_i = n_vertices - n_b
    ang = 2.0 * np.pi * np.arange(n_b) / n_b
    ring = np.column_stack([np.cos(ang), np.sin(ang)])
    inner = _sunflower(n_i, 1.0 - 0.5 * h)
    return np.vstack([ring, inner]), n_b


def disk_mesh(n_vertices=600):
    """Delaunay triangulation of the unit disk with exactly ``n_vertices`` vertices (z = 0)."""
    pts, _ = unit_disk_points(n_vertices)
    tri = Delaunay(pts)
    faces = tri.simplices.copy()
    # orient counterclockwise
    p = pts[faces]
    cross = (p[:, 1, 0] - p[:, 0, 0]) * (p[:, 2, 1] - p[:, 0, 1]) - (p[:, 1, 1] - p[:, 0, 1]) * (p[:, 2, 0] - p[:, 0, 0])
    faces[cross < 0] = faces[cross < 0][:, [0, 2, 1]]
    # drop hull slivers
    faces = faces[np.abs(cross) > 1e-10]
    return TriMesh(np.column_stack([pts, np.zeros(len(pts))]), faces)


def icosphere(level):
    t = (1.0 + np.sqrt(5.0)) / 2.0
    v = np.array(
        [[-1, t, 0], [1, t, 0], [-1, -t, 0], [1, -t, 0], [0, -1, t], [0, 1, t],
         [0, -1, -t], [0, 1, -t], [t, 0, -1], [t, 0, 1], [-t, 0, -1], [-t, 0, 1]],
        dtype=float,
    )
    f = np.array(
        [[0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11], [1, 5, 9], [5, 11, 4],
         [11, 10, 2], [10, 7, 6], [7, 1, 8], [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8],
         [3, 8, 9], [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1]]
    )
    v /= np.linalg.norm(v, axis=1)[:, None]
    for _ in range(level):
        verts = list(v)
        cache = {}

        def mid(a, b):
            key = (min(a, b), max(a, b))
            if key not in cache:
                m = verts[a] + verts[b]
                verts.append(m / np.linalg.norm(m))
                cache[key] = len(verts) - 1
            return cache[key]

        nf = []
        for a, b, c in f:
            ab, bc, ca = mid(a, b), mid(b, c), mid(c, a)
            nf += [[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]]
        v = np.array(verts)
        f = np.array(nf)
    return v, f


def _submesh(verts, faces, keep_faces):
    f = faces[keep_faces]
    used = np.unique(f)
    remap = -np.ones(len(verts), dtype=np.int64)
    remap[used] = np.arange(len(used))
    return verts[used], remap[f]


def sphere_cap(radius=1.0, max_polar_angle=np.pi / 3, level=5):
    """Cap {polar angle <= max} of an icosphere of the given radius, outward normals.

    The cap keeps whole faces, so its rim is jagged but manifold.
    """
    v, f = icosphere(level)
    c = v[f].mean(axis=1)
    keep = c[:, 2] / np.linalg.norm(c, axis=1) >= np.cos(max_polar_angle)
    verts, faces = _submesh(v * radius, f, keep)
    return _clean_disk(verts, faces)


def _clean_disk(verts, faces):
    """Drop faces that touch the rim by a single vertex (pinches) until the mesh is a disk."""
    from .mesh import MeshError

    for _ in range(50):
        try:
            return TriMesh(verts, faces)
        except MeshError:
            # remove faces with two boundary edges (ears) or at non-manifold vertices
            e = np.sort(np.concatenate([faces[:, [0, 1]], faces[:, [1, 2]], faces[:, [2, 0]]]), axis=1)
            key, inv, cnt = np.unique(e[:, 0] * len(verts) + e[:, 1], return_inverse=True, return_counts=True)
            on_bnd = (cnt[inv] == 1).reshape(3, -1).T
            bnd_vert = np.zeros(len(verts), dtype=bool)
            bnd_vert[e[(cnt[inv] == 1)].ravel()] = True
            vertex_only = bnd_vert[faces].any(axis=1) & ~on_bnd.any(axis=1)
            ears = on_bnd.sum(axis=1) >= 2
            drop = ears | vertex_only
            if not drop.any():
                raise
            verts, faces = _submesh(verts, faces, ~drop)
    return TriMesh(verts, faces)


def hemisphere_cap(n_vertices=None, level=5):
    return sphere_cap(1.0, np.pi / 2 - 1e-6, level)


def cylinder_patch(radius=2.0, angle=np.pi / 2, length=2.0, edge=0.05):
    """Patch of a cylinder along z from a structured grid; no edge, diagonals included, exceeds `edge`."""
    arc = radius * angle
    step = edge / np.sqrt(2.0)
    flat, _ = grid_rectangle(arc, length, max(2, int(np.ceil(arc / step))), max(2, int(np.ceil(length / step))))
    x, z = flat.vertices[:, 0], flat.vertices[:, 1]
    phi = x / radius
    # counterclockwise (x, z) faces get normals pointing away from the axis
    verts = np.column_stack([radius * np.sin(phi), -radius * np.cos(phi), z])
    return TriMesh(verts, flat.faces)


def planar_perturbed(mesh, amount=0.2, seed=0):
    """Jitter interior vertices of a planar mesh in-plane (boundary fixed)."""
    rng = np.random.default_rng(seed)
    v = mesh.vertices.copy()
    inner = mesh.interior_vertices()
    e = mesh.vertices[mesh.faces]
    h = np.median(np.linalg.norm(e[:, 1] - e[:, 0], axis=1))
    v[inner, :2] += amount * h * rng.uniform(-1, 1, size=(len(inner), 2))
    return TriMesh(v, mesh.faces)
