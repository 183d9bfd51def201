"""Triangle meshes with disk topology, landmarks, datasets and their file formats.

Meshes are read from Wavefront OBJ (``v``/``f`` records) or ASCII PLY.
Landmark files hold one landmark per line, either ``i <vertex-index>``
(0-based) or ``p <x> <y> <z>``.  A dataset manifest is a CSV with the columns
``mesh_path,landmark_path,label``.
"""
from __future__ import annotations

import csv
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


class MeshError(ValueError):
    """Raised for malformed input meshes, landmarks or datasets."""


DEGENERATE_AREA_FACTOR = 1e-12


def _face_areas(vertices, faces):
    e1 = vertices[faces[:, 1]] - vertices[faces[:, 0]]
    e2 = vertices[faces[:, 2]] - vertices[faces[:, 0]]
    if vertices.shape[1] == 2:
        return 0.5 * np.abs(e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0])
    return 0.5 * np.linalg.norm(np.cross(e1, e2), axis=1)


def extract_boundary(faces, n_vertices):
    """Return the single boundary loop of an oriented disk-topology mesh.

    The loop follows the boundary half-edges, so the surface lies to the left
    of the traversal.  Raises :class:`MeshError` on non-manifold edges,
    inconsistent orientation, or a boundary made of more than one loop.
    """
    faces = np.asarray(faces)
    he = np.concatenate([faces[:, [0, 1]], faces[:, [1, 2]], faces[:, [2, 0]]])
    key = he[:, 0].astype(np.int64) * n_vertices + he[:, 1]
    uniq, counts = np.unique(key, return_counts=True)
    if np.any(counts > 1):
        bad = uniq[counts > 1][0]
        raise MeshError(
            f"non-manifold or inconsistently oriented edge ({bad // n_vertices}, {bad % n_vertices})"
        )
    rev = he[:, 1].astype(np.int64) * n_vertices + he[:, 0]
    is_bnd = ~np.isin(rev, uniq)
    bnd = he[is_bnd]
    if len(bnd) == 0:
        return np.zeros(0, dtype=np.int64)
    nxt = {}
    for a, b in bnd:
        if a in nxt:
            raise MeshError(f"non-manifold boundary vertex {a}")
        nxt[int(a)] = int(b)
    loops = []
    seen = set()
    for start in nxt:
        if start in seen:
            continue
        loop = [start]
        seen.add(start)
        cur = nxt[start]
        while cur != start:
            if cur in seen or cur not in nxt:
                raise MeshError(f"broken boundary loop at vertex {cur}")
            loop.append(cur)
            seen.add(cur)
            cur = nxt[cur]
        loops.append(loop)
    if len(loops) > 1:
        raise MeshError(f"mesh has {len(loops)} boundary loops, expected 1")
    return np.asarray(loops[0], dtype=np.int64)


def count_edges(faces):
    e = np.sort(np.concatenate([faces[:, [0, 1]], faces[:, [1, 2]], faces[:, [2, 0]]]), axis=1)
    return len(np.unique(e, axis=0))


class TriMesh:
    """Immutable disk-topology triangle mesh.

    ``vertices`` is (V, 3) (2D input is padded with z = 0), ``faces`` is
    (F, 3) counterclockwise, ``boundary`` the ordered boundary loop.
    """

    def __init__(self, vertices, faces, validate=True):
        v = np.asarray(vertices, dtype=float)
        if v.ndim != 2 or v.shape[1] not in (2, 3):
            raise MeshError("vertices must be an (n, 2) or (n, 3) array")
        if v.shape[1] == 2:
            v = np.column_stack([v, np.zeros(len(v))])
        f = np.asarray(faces, dtype=np.int64).reshape(-1, 3)
        self.vertices = v
        self.faces = f
        self.vertices.setflags(write=False)
        self.faces.setflags(write=False)
        if validate:
            self._validate()
        self.boundary = extract_boundary(f, len(v))
        self.boundary.setflags(write=False)
        if validate:
            chi = self.euler_characteristic
            if chi != 1 or len(self.boundary) == 0:
                raise MeshError(f"not disk topology, V-E+F={chi}")

    def _validate(self):
        v, f = self.vertices, self.faces
        if len(f) == 0:
            raise MeshError("mesh has no faces")
        if f.min() < 0 or f.max() >= len(v):
            raise MeshError("face references an invalid vertex index")
        repeated = (f[:, 0] == f[:, 1]) | (f[:, 1] == f[:, 2]) | (f[:, 0] == f[:, 2])
        if repeated.any():
            raise MeshError(f"face {int(np.argmax(repeated))} repeats a vertex")
        used = np.zeros(len(v), dtype=bool)
        used[f.ravel()] = True
        if not used.all():
            raise MeshError(f"vertex {int(np.argmin(used))} is not referenced by any face")
        diag2 = float(np.sum((v.max(axis=0) - v.min(axis=0)) ** 2))
        areas = _face_areas(v, f)
        degenerate = areas < DEGENERATE_AREA_FACTOR * diag2
        if degenerate.any():
            raise MeshError(f"degenerate (zero-area) face {int(np.argmax(degenerate))}")

    @property
    def n_vertices(self):
        return len(self.vertices)

    @property
    def n_faces(self):
        return len(self.faces)

    @property
    def n_edges(self):
        return count_edges(self.faces)

    @property
    def euler_characteristic(self):
        return self.n_vertices - self.n_edges + self.n_faces

    @property
    def face_areas(self):
        return _face_areas(self.vertices, self.faces)

    @property
    def diameter(self):
        return float(np.linalg.norm(self.vertices.max(axis=0) - self.vertices.min(axis=0)))

    def is_boundary(self):
        mask = np.zeros(self.n_vertices, dtype=bool)
        mask[self.boundary] = True
        return mask

    def interior_vertices(self):
        return np.flatnonzero(~self.is_boundary())

    def boundary_length(self):
        b = self.vertices[self.boundary]
        return float(np.linalg.norm(np.roll(b, -1, axis=0) - b, axis=1).sum())

    def min_triangle_quality(self):
        """Minimum of 4*sqrt(3)*area / sum of squared edge lengths (1 for equilateral)."""
        v, f = self.vertices, self.faces
        l2 = sum(
            np.sum((v[f[:, a]] - v[f[:, b]]) ** 2, axis=1) for a, b in ((0, 1), (1, 2), (2, 0))
        )
        return float(np.min(4.0 * np.sqrt(3.0) * self.face_areas / l2))

    def with_vertices(self, vertices):
        """Same connectivity, new positions (validated)."""
        return TriMesh(vertices, self.faces)

    def __repr__(self):
        return f"TriMesh(V={self.n_vertices}, F={self.n_faces}, boundary={len(self.boundary)})"


@dataclass(frozen=True)
class LandmarkSet:
    indices: tuple
    snap_distances: tuple = ()

    def __post_init__(self):
        idx = tuple(int(i) for i in self.indices)
        object.__setattr__(self, "indices", idx)
        if len(idx) == 0:
            raise MeshError("landmark set is empty")
        if len(set(idx)) != len(idx):
            raise MeshError("duplicate landmark")

    def __len__(self):
        return len(self.indices)

    def __iter__(self):
        return iter(self.indices)

    def __getitem__(self, k):
        return self.indices[k]

    def check(self, mesh):
        for i in self.indices:
            if not 0 <= i < mesh.n_vertices:
                raise MeshError(f"landmark index {i} out of range for mesh with {mesh.n_vertices} vertices")
        return self


@dataclass
class Subject:
    mesh: TriMesh
    landmarks: LandmarkSet
    label: object = None
    name: str = ""


@dataclass
class Dataset:
    subjects: list = field(default_factory=list)

    def __len__(self):
        return len(self.subjects)

    def __getitem__(self, i):
        return self.subjects[i]

    def __iter__(self):
        return iter(self.subjects)

    @property
    def labels(self):
        return np.asarray([s.label for s in self.subjects])

    def check(self, require_two_classes=False):
        if not self.subjects:
            raise MeshError("dataset is empty")
        n = {len(s.landmarks) for s in self.subjects}
        if len(n) != 1:
            raise MeshError(f"subjects carry different landmark counts {sorted(n)}")
        if require_two_classes:
            k = len(set(self.labels.tolist()))
            if k != 2:
                raise MeshError(f"expected exactly two labels, found {k}")
        return self


# ---------------------------------------------------------------- file I/O

def _read_obj(path):
    verts, faces = [], []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.split()
            if not parts or parts[0].startswith("#"):
                continue
            try:
                if parts[0] == "v":
                    verts.append([float(x) for x in parts[1:4]])
                elif parts[0] == "f":
                    idx = [int(p.split("/")[0]) for p in parts[1:]]
                    idx = [i - 1 if i > 0 else len(verts) + i for i in idx]
                    if len(idx) < 3:
                        raise ValueError("face with fewer than 3 vertices")
                    # fan-triangulate polygons
                    for k in range(1, len(idx) - 1):
                        faces.append([idx[0], idx[k], idx[k + 1]])
            except (ValueError, IndexError) as exc:
                raise MeshError(f"{path}:{lineno}: cannot parse OBJ record ({exc})") from exc
    return np.array(verts, dtype=float).reshape(-1, 3), np.array(faces, dtype=np.int64).reshape(-1, 3)


def _read_ply(path):
    with open(path) as fh:
        lines = fh.read().splitlines()
    if not lines or lines[0].strip() != "ply":
        raise MeshError(f"{path}: not a PLY file")
    nv = nf = 0
    body = None
    for i, line in enumerate(lines[1:], 1):
        parts = line.split()
        if not parts:
            continue
        if parts[0] == "format" and parts[1] != "ascii":
            raise MeshError(f"{path}: only ASCII PLY is supported")
        if parts[:2] == ["element", "vertex"]:
            nv = int(parts[2])
        elif parts[:2] == ["element", "face"]:
            nf = int(parts[2])
        elif parts[0] == "end_header":
            body = i + 1
            break
    if body is None:
        raise MeshError(f"{path}: missing end_header")
    try:
        verts = [[float(x) for x in lines[body + k].split()[:3]] for k in range(nv)]
        faces = []
        for k in range(nf):
            vals = [int(x) for x in lines[body + nv + k].split()]
            idx = vals[1 : 1 + vals[0]]
            for j in range(1, len(idx) - 1):
                faces.append([idx[0], idx[j], idx[j + 1]])
    except (ValueError, IndexError) as exc:
        raise MeshError(f"{path}: cannot parse PLY body ({exc})") from exc
    return np.array(verts, dtype=float).reshape(-1, 3), np.array(faces, dtype=np.int64).reshape(-1, 3)


def load_mesh(path):
    """Read an OBJ or ASCII PLY file into a validated :class:`TriMesh`."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"no such mesh file: {path}")
    if path.suffix.lower() == ".ply":
        v, f = _read_ply(path)
    else:
        v, f = _read_obj(path)
    return TriMesh(v, f)


def write_mesh(mesh, path, uv=None):
    """Write OBJ.  With ``uv`` the planar coordinates are written with z = 0."""
    pts = mesh.vertices if uv is None else np.column_stack([uv, np.zeros(len(uv))])
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        for x, y, z in pts.tolist():
            fh.write(f"v {x!r} {y!r} {z!r}\n")
        for a, b, c in mesh.faces + 1:
            fh.write(f"f {a} {b} {c}\n")


def load_landmarks(path, mesh):
    """Read a landmark file; points are snapped to the nearest vertex."""
    indices, snaps = [], []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.split()
            if not parts or parts[0].startswith("#"):
                continue
            try:
                if parts[0] == "i":
                    indices.append(int(parts[1]))
                    snaps.append(0.0)
                elif parts[0] == "p":
                    p = np.array([float(x) for x in parts[1:4]])
                    d = np.linalg.norm(mesh.vertices - p, axis=1)
                    k = int(np.argmin(d))
                    indices.append(k)
                    snaps.append(float(d[k]))
                else:
                    raise ValueError(f"unknown record type {parts[0]!r}")
            except (ValueError, IndexError) as exc:
                raise MeshError(f"{path}:{lineno}: {exc}") from exc
    return landmarks_from(indices, mesh, snaps)


def landmarks_from(indices, mesh, snaps=None):
    if len(indices) == 0:
        raise MeshError("no landmarks given")
    lm = LandmarkSet(tuple(indices), tuple(snaps or [0.0] * len(indices)))
    return lm.check(mesh)


def snap_points(points, mesh):
    """Landmarks from 3D points (nearest vertex, Euclidean)."""
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    d = np.linalg.norm(mesh.vertices[None, :, :] - pts[:, None, :], axis=2)
    idx = d.argmin(axis=1)
    return landmarks_from(idx.tolist(), mesh, d[np.arange(len(pts)), idx].tolist())


def write_landmarks(lm, path):
    with open(path, "w") as fh:
        for i in lm:
            fh.write(f"i {i}\n")


def validate_pair(mesh_i, lm_i, mesh_j, lm_j):
    """Check two mesh/landmark pairs are compatible; return diagnostics."""
    if len(lm_i) != len(lm_j):
        raise MeshError(f"landmark count mismatch {len(lm_i)}≠{len(lm_j)}")
    lm_i.check(mesh_i)
    lm_j.check(mesh_j)

    def stats(m):
        return {
            "V": m.n_vertices,
            "F": m.n_faces,
            "euler": m.euler_characteristic,
            "min_quality": m.min_triangle_quality(),
            "boundary_length": m.boundary_length(),
        }

    return {"match": True, "n_landmarks": len(lm_i), "source": stats(mesh_i), "target": stats(mesh_j)}


def load_manifest(path):
    """Read a ``mesh_path,landmark_path,label`` CSV into a :class:`Dataset`.

    Relative paths are resolved against the manifest's directory.
    """
    path = Path(path)
    base = path.parent
    subjects = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = {"mesh_path", "landmark_path", "label"} - set(reader.fieldnames or [])
        if missing:
            raise MeshError(f"manifest missing columns {sorted(missing)}")
        for row in reader:
            mp = base / row["mesh_path"]
            lp = base / row["landmark_path"]
            mesh = load_mesh(mp)
            subjects.append(
                Subject(mesh, load_landmarks(lp, mesh), row["label"], name=Path(row["mesh_path"]).stem)
            )
    return Dataset(subjects).check()


def write_manifest(rows, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["mesh_path", "landmark_path", "label"])
        for r in rows:
            w.writerow([os.fspath(r[0]), os.fspath(r[1]), r[2]])
