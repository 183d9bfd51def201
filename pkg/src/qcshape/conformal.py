"""Conformal flattening of disk-topology surfaces onto the unit disk and onto rectangles."""
from __future__ import annotations

import heapq
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .diffgeo import beltrami_from_map, corner_cotangents, cotan_laplacian, cotan_matrix
from .mesh import MeshError, extract_boundary


class ParameterizationError(RuntimeError):
    """Singular solve, flipped faces or a pathological corner choice."""


@dataclass
class PlanarEmbedding:
    """Per-vertex planar coordinates of a flattening.

    For ``domain == "rectangle"`` the image is [0, 1] x [0, height] and
    ``corners`` are the vertices sent to (0,0), (1,0), (1,h), (0,h).
    ``side`` labels boundary vertices 0..3 (bottom, right, top, left) by the
    side that starts at corner k; -1 marks interior vertices.
    """

    uv: np.ndarray
    faces: np.ndarray
    domain: str
    corners: tuple = ()
    height: float = 1.0
    side: np.ndarray = None
    mean_mu: float = float("nan")
    max_mu: float = float("nan")
    stats: dict = field(default_factory=dict)

    def signed_areas(self):
        p = self.uv[self.faces]
        return 0.5 * (
            (p[:, 1, 0] - p[:, 0, 0]) * (p[:, 2, 1] - p[:, 0, 1])
            - (p[:, 1, 1] - p[:, 0, 1]) * (p[:, 2, 0] - p[:, 0, 0])
        )

    @property
    def flips(self):
        return int(np.sum(self.signed_areas() <= 0))

    def sidecar(self):
        return {
            "domain": self.domain,
            "height": float(self.height),
            "corners": [int(c) for c in self.corners],
            "mean_mu": float(self.mean_mu),
            "max_mu": float(self.max_mu),
            "flips": self.flips,
        }


def _solve_dirichlet(L, fixed, values, rhs=None):
    """Solve L x = rhs on free vertices with x[fixed] = values."""
    n = L.shape[0]
    x = np.zeros(n)
    x[fixed] = values
    free = np.setdiff1d(np.arange(n), fixed)
    b = -(L[free][:, fixed] @ values)
    if rhs is not None:
        b = b + rhs[free]
    A = L[free][:, free].tocsc()
    try:
        x[free] = spla.splu(A).solve(b)
    except RuntimeError as exc:
        raise ParameterizationError(f"singular system ({exc})") from exc
    if not np.all(np.isfinite(x)):
        raise ParameterizationError("non-finite solution")
    return x


def _arc_angles(mesh):
    b = mesh.vertices[mesh.boundary]
    seg = np.linalg.norm(np.roll(b, -1, axis=0) - b, axis=1)
    cum = np.concatenate([[0.0], np.cumsum(seg)[:-1]])
    return 2.0 * np.pi * cum / seg.sum()


def _harmonic_disk(mesh, L, angles):
    bnd = mesh.boundary
    u = _solve_dirichlet(-L, bnd, np.cos(angles))
    v = _solve_dirichlet(-L, bnd, np.sin(angles))
    return np.column_stack([u, v])


def _center_vertex(mesh):
    """Interior vertex with the largest hop distance to the boundary (smallest index on ties)."""
    n = mesh.n_vertices
    f = mesh.faces
    rows = np.concatenate([f[:, 0], f[:, 1], f[:, 2]])
    cols = np.concatenate([f[:, 1], f[:, 2], f[:, 0]])
    A = sp.csr_matrix((np.ones(len(rows)), (rows, cols)), shape=(n, n))
    A = ((A + A.T) > 0).tocsr()
    dist = np.full(n, -1)
    frontier = list(mesh.boundary)
    dist[frontier] = 0
    d = 0
    while frontier:
        d += 1
        nxt = np.unique(A[frontier].indices)
        nxt = nxt[dist[nxt] < 0]
        dist[nxt] = d
        frontier = list(nxt)
    return int(np.argmax(dist))


def _cut_path(mesh, keep_faces, ring, center):
    """Shortest edge path from the puncture ring to the outer boundary through interior vertices."""
    v = mesh.vertices
    f = mesh.faces[keep_faces]
    adj = [[] for _ in range(mesh.n_vertices)]
    for a, b in np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]]):
        adj[a].append(b)
        adj[b].append(a)
    outer = mesh.is_boundary()
    in_ring = np.zeros(mesh.n_vertices, dtype=bool)
    in_ring[ring] = True
    dist = {int(r): 0.0 for r in ring}
    prev = {}
    heap = [(0.0, int(r)) for r in sorted(ring)]
    heapq.heapify(heap)
    done = set()
    while heap:
        d, a = heapq.heappop(heap)
        if a in done:
            continue
        done.add(a)
        if outer[a]:
            path = [a]
            while path[-1] in prev:
                path.append(prev[path[-1]])
            return path[::-1]
        for b in sorted(set(adj[a])):
            if b == center or (in_ring[b] and not outer[b]):
                continue
            nd = d + float(np.linalg.norm(v[a] - v[b]))
            if nd < dist.get(b, np.inf):
                dist[b] = nd
                prev[b] = a
                heapq.heappush(heap, (nd, b))
    raise ParameterizationError("no path from the puncture to the boundary")


def _sheet_offsets(faces, path):
    """0/1 per face corner: 1 where the corner is a cut vertex seen from the left of the cut."""
    cut_edges = set()
    for a, b in zip(path[:-1], path[1:]):
        cut_edges.add((a, b))
        cut_edges.add((b, a))
    sigma = np.zeros(faces.shape, dtype=float)
    inc = {p: [] for p in path}
    for fi, tri in enumerate(faces):
        for k in range(3):
            if tri[k] in inc:
                inc[tri[k]].append(fi)
    # faces on the left of directed cut edges
    seeds = set()
    for a, b in zip(path[:-1], path[1:]):
        for fi in inc[a]:
            tri = list(faces[fi])
            i = tri.index(a)
            if tri[(i + 1) % 3] == b:
                seeds.add(fi)
    for p in path:
        fs = inc[p]
        left = {fi for fi in fs if fi in seeds}
        stack = list(left)
        while stack:
            fi = stack.pop()
            tri = list(faces[fi])
            others = [x for x in tri if x != p]
            for gi in fs:
                if gi in left:
                    continue
                shared = [x for x in faces[gi] if x != p and x in others]
                if shared and (p, shared[0]) not in cut_edges:
                    left.add(gi)
                    stack.append(gi)
        for fi in left:
            k = list(faces[fi]).index(p)
            sigma[fi, k] = 1.0
    return sigma


def conformal_boundary_angles(mesh):
    """Boundary angles of the discrete conformal map onto the unit disk.

    The surface is punctured at a central vertex; log|F| is the harmonic
    function vanishing on the rim and the angle is its conjugate, found as
    the harmonic function with zero flux through both boundaries and a
    2*pi period across a cut.
    """
    c = _center_vertex(mesh)
    keep = ~np.any(mesh.faces == c, axis=1)
    faces = mesh.faces[keep]
    ring = np.unique(mesh.faces[~keep])
    ring = ring[ring != c]
    La = cotan_matrix(mesh.vertices, faces)
    n = mesh.n_vertices
    # angular function with a 2*pi jump across the cut
    path = _cut_path(mesh, keep, ring, c)
    sigma = _sheet_offsets(faces, path)
    cots = corner_cotangents(mesh.vertices, faces)
    rhs = np.zeros(n)
    for a, (b, cc) in enumerate(((1, 2), (2, 0), (0, 1))):
        w = 0.5 * cots[:, a]
        s = 2.0 * np.pi * (sigma[:, cc] - sigma[:, b])  # jump along b -> cc
        np.add.at(rhs, faces[:, b], -w * s)
        np.add.at(rhs, faces[:, cc], w * s)
    active = np.setdiff1d(np.arange(n), [c])
    pin = int(path[-1])
    M = La[active][:, active].tocsr()
    pos = {int(v): i for i, v in enumerate(active)}
    # (-L) theta = rhs with one pinned vertex
    theta_a = _solve_dirichlet(-M, np.array([pos[pin]]), np.array([0.0]), rhs=rhs[active])
    theta = np.zeros(n)
    theta[active] = theta_a
    ang = theta[mesh.boundary]
    # orientation: boundary angles must increase along the loop
    d = np.diff(np.unwrap(ang))
    if d.sum() < 0:
        ang = -ang
    ang = np.unwrap(ang)
    ang -= ang[0]
    return np.mod(ang, 2.0 * np.pi)


def disk_conformal(mesh):
    """Conformal parameterization of a disk-topology mesh onto the unit disk.

    Starts from the harmonic map with arc-length boundary, then corrects the
    boundary distribution with the conformal boundary angles and re-solves
    the interior; the correction is kept only if it lowers mean |mu|.
    """
    L = cotan_laplacian(mesh)
    best_uv = _harmonic_disk(mesh, L, _arc_angles(mesh))
    best_mu = np.abs(beltrami_from_map(mesh, best_uv).mu)
    cand = _harmonic_disk(mesh, L, conformal_boundary_angles(mesh))
    if _no_flips(cand, mesh.faces):
        cmu = np.abs(beltrami_from_map(mesh, cand).mu)
        if cmu.mean() < best_mu.mean():
            best_uv, best_mu = cand, cmu
    emb = PlanarEmbedding(
        uv=best_uv, faces=mesh.faces, domain="disk", mean_mu=float(best_mu.mean()), max_mu=float(best_mu.max())
    )
    if emb.flips:
        raise ParameterizationError(f"{emb.flips} flipped faces in disk parameterization")
    return emb


def _no_flips(uv, faces):
    p = uv[faces]
    a = (p[:, 1, 0] - p[:, 0, 0]) * (p[:, 2, 1] - p[:, 0, 1]) - (p[:, 1, 1] - p[:, 0, 1]) * (p[:, 2, 0] - p[:, 0, 0])
    return bool(np.all(a > 0))


def select_corners(mesh, lm):
    """Rectangle corners from landmarks ordered (cusp1, cusp2, pit1, pit2).

    Returns (cusp1, nearest boundary vertex to pit1, cusp2, nearest boundary
    vertex to pit2), rotated/reversed into boundary order with cusp1 first.
    """
    if len(lm) < 4:
        raise MeshError("corner selection needs 4 landmarks (cusp1, cusp2, pit1, pit2)")
    bnd = mesh.boundary
    pos = {int(b): i for i, b in enumerate(bnd)}
    cusp1, cusp2, pit1, pit2 = (int(x) for x in lm.indices[:4])
    for c in (cusp1, cusp2):
        if c not in pos:
            raise MeshError(f"cusp landmark {c} is not a boundary vertex")

    def nearest(p):
        d = np.linalg.norm(mesh.vertices[bnd] - mesh.vertices[p], axis=1)
        best = np.flatnonzero(d == d.min())
        return int(min(bnd[best]))

    corners = [cusp1, nearest(pit1), cusp2, nearest(pit2)]
    if len(set(corners)) != 4:
        raise MeshError(f"corners coincide: {corners}")
    n = len(bnd)
    offs = [(pos[c] - pos[cusp1]) % n for c in corners]
    if offs[1] < offs[2] < offs[3]:
        return tuple(corners)
    if offs[3] < offs[2] < offs[1]:
        # boundary visits cusp1, proxy2, cusp2, proxy1
        return (corners[0], corners[3], corners[2], corners[1])
    raise MeshError("cusp and pit-proxy corners do not alternate along the boundary")


def boundary_sides(boundary, corners):
    """Side label (0..3) for each boundary vertex; corner k opens side k."""
    n = len(boundary)
    pos = {int(b): i for i, b in enumerate(boundary)}
    start = [pos[int(c)] for c in corners]
    offs = [(s - start[0]) % n for s in start]
    if not (offs[0] < offs[1] < offs[2] < offs[3]):
        raise MeshError("corners are not in cyclic boundary order")
    side = np.empty(n, dtype=np.int64)
    for k in range(4):
        a = offs[k]
        b = offs[k + 1] if k < 3 else n
        idx = (start[0] + np.arange(a, b)) % n
        side[idx] = k
    return side


def disk_to_rectangle(disk, corners, mesh=None):
    """Conformal map of a parameterized disk onto [0, 1] x [0, h].

    ``u`` is harmonic with u = 0 on the side entering corner 1 and u = 1 on the
    side from corner 2 to corner 3 (zero flux elsewhere); ``v`` likewise on
    the other pair of sides.  h is the conformal modulus sqrt(E_u / E_v) of
    the two Dirichlet energies.  When ``mesh`` is given its cotangent weights
    (the surface metric) are used, otherwise the disk's planar ones.
    """
    faces = disk.faces
    if mesh is not None:
        L = cotan_laplacian(mesh)
        boundary = mesh.boundary
        n = mesh.n_vertices
    else:
        pts = np.column_stack([disk.uv, np.zeros(len(disk.uv))])
        L = cotan_matrix(pts, faces)
        boundary = extract_boundary(faces, len(pts))
        n = len(pts)
    corners = tuple(int(c) for c in corners)
    side_b = boundary_sides(boundary, corners)
    side = -np.ones(n, dtype=np.int64)
    side[boundary] = side_b
    c1, c2, c3, c4 = corners
    left = np.union1d(boundary[side_b == 3], [c1])
    right = np.union1d(boundary[side_b == 1], [c3])
    bottom = np.union1d(boundary[side_b == 0], [c2])
    top = np.union1d(boundary[side_b == 2], [c4])
    A = -L
    u = _solve_dirichlet(A, np.concatenate([left, right]), np.concatenate([np.zeros(len(left)), np.ones(len(right))]))
    vt = _solve_dirichlet(A, np.concatenate([bottom, top]), np.concatenate([np.zeros(len(bottom)), np.ones(len(top))]))
    Eu = float(u @ (A @ u))
    Ev = float(vt @ (A @ vt))
    if Eu <= 0 or Ev <= 0:
        raise ParameterizationError("degenerate Dirichlet energy")
    h = float(np.sqrt(Eu / Ev))
    if not 1e-3 <= h <= 1e3:
        raise ParameterizationError(f"rectangle height {h:.3g} outside [1e-3, 1e3]")
    uv = np.column_stack([u, h * vt])
    src = mesh if mesh is not None else (np.column_stack([disk.uv, np.zeros(len(disk.uv))]), faces)
    mu = np.abs(beltrami_from_map(src, uv).mu) if _no_flips(uv, faces) else np.array([np.inf])
    emb = PlanarEmbedding(
        uv=uv, faces=faces, domain="rectangle", corners=corners, height=h, side=side,
        mean_mu=float(mu.mean()), max_mu=float(mu.max()),
        stats={"energy_u": Eu, "energy_v": Ev},
    )
    if emb.flips:
        raise ParameterizationError(f"{emb.flips} flipped faces in rectangle map")
    return emb


@dataclass
class RectangularParam:
    embedding: PlanarEmbedding
    landmark_uv: np.ndarray
    disk: PlanarEmbedding


def rectangular_param(mesh, lm):
    """Surface -> rectangle conformal map with corners chosen from the landmarks."""
    disk = disk_conformal(mesh)
    corners = select_corners(mesh, lm)
    rect = disk_to_rectangle(disk, corners, mesh=mesh)
    return RectangularParam(rect, rect.uv[list(lm.indices)], disk)
