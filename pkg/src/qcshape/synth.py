"""Deterministic synthetic occlusal-like surfaces with two cusps and two pits.

Every subject is an elliptical disk (shared triangulation) whose height is a
sum of two Gaussian cusps near the rim and two Gaussian pits inside.  The
four landmarks are (cusp1, cusp2, pit1, pit2): the cusps snap to the nearest
rim vertex, the pits to the vertex nearest the pit centre.

Random numbers come from PCG64 streams keyed by (seed, class index, subject
index), so any subject can be regenerated on its own.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial import Delaunay

from .mesh import Dataset, Subject, TriMesh, landmarks_from, write_landmarks, write_manifest, write_mesh
from .surfaces import unit_disk_points

MIN_RESOLUTION = 200


@dataclass
class ClassParams:
    cusp_height: tuple = (0.35, 0.35)
    cusp_width: tuple = (0.22, 0.22)
    pit_depth: tuple = (0.12, 0.12)
    pit_width: tuple = (0.15, 0.15)
    axes: tuple = (1.0, 0.8)
    # pit landmarks are moved by this distance in a random direction
    pit_shift: float = 0.0
    # relative per-subject spread of heights and widths
    shape_jitter: float = 0.03
    # absolute per-subject spread of the pit centres
    pit_jitter: float = 0.01


@dataclass
class SynthSpec:
    class_params: dict = field(default_factory=lambda: {"A": ClassParams(), "B": ClassParams()})
    noise_sigma: float = 0.002
    resolution: int = 1217
    seed: int = 0
    planar_noise: bool = False

    def to_dict(self):
        return dataclasses.asdict(self)


CUSP_CENTERS = np.array([[-0.78, 0.0], [0.78, 0.0]])
PIT_CENTERS = np.array([[0.0, -0.38], [0.0, 0.38]])


def preset(name, seed=0, resolution=1217, noise_sigma=None):
    """Named two-class generator settings.

    ``null``: identical classes.  ``curvature-diff``: class B cusps are twice
    as sharp.  ``distortion-diff``: flat disks whose class B pit landmarks sit
    a fixed distance away from the class A positions.  ``mixed``: both.
    """
    base = ClassParams()
    if name == "null":
        a, b = base, ClassParams()
    elif name == "curvature-diff":
        a, b = base, ClassParams(cusp_width=(0.11, 0.11))
    elif name == "distortion-diff":
        flat = dict(cusp_height=(0.0, 0.0), pit_depth=(0.0, 0.0))
        a, b = ClassParams(**flat), ClassParams(**flat, pit_shift=0.12)
    elif name == "mixed":
        a, b = base, ClassParams(cusp_width=(0.11, 0.11), pit_shift=0.10)
    else:
        raise ValueError(f"unknown preset {name!r}")
    planar = name == "distortion-diff"
    sigma = (0.0 if planar else 0.002) if noise_sigma is None else noise_sigma
    if planar and noise_sigma is None:
        sigma = 0.004
    return SynthSpec({"A": a, "B": b}, noise_sigma=sigma, resolution=resolution, seed=seed, planar_noise=planar)


def subject_rng(seed, class_index, subject_id):
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(seed), int(class_index), int(subject_id)])))


_TRIANGULATIONS = {}


def base_triangulation(resolution):
    """Unit-disk points and counterclockwise faces, cached per resolution."""
    if resolution < MIN_RESOLUTION:
        raise ValueError(f"resolution {resolution} too low to separate landmarks (< {MIN_RESOLUTION} vertices)")
    if resolution not in _TRIANGULATIONS:
        pts, n_b = unit_disk_points(resolution)
        faces = Delaunay(pts).simplices.copy()
        p = pts[faces]
        cross = (p[:, 1, 0] - p[:, 0, 0]) * (p[:, 2, 1] - p[:, 0, 1]) - (p[:, 1, 1] - p[:, 0, 1]) * (p[:, 2, 0] - p[:, 0, 0])
        faces[cross < 0] = faces[cross < 0][:, [0, 2, 1]]
        faces = faces[np.abs(cross) > 1e-10]
        _TRIANGULATIONS[resolution] = (pts, faces, n_b)
    return _TRIANGULATIONS[resolution]


def gen_surface(spec, class_id, subject_id):
    """One subject: (TriMesh, LandmarkSet).  ``class_id`` is a key of ``spec.class_params``."""
    labels = list(spec.class_params)
    cp = spec.class_params[class_id]
    rng = subject_rng(spec.seed, labels.index(class_id), subject_id)
    pts, faces, n_b = base_triangulation(spec.resolution)
    ax = np.asarray(cp.axes, dtype=float)
    xy = pts * ax

    def jit(vals):
        return np.asarray(vals, dtype=float) * (1.0 + cp.shape_jitter * rng.standard_normal(len(vals)))

    heights, cwidths = jit(cp.cusp_height), jit(cp.cusp_width)
    depths, pwidths = jit(cp.pit_depth), jit(cp.pit_width)
    pit_c = PIT_CENTERS * ax + cp.pit_jitter * rng.standard_normal((2, 2))
    if cp.pit_shift:
        ang = rng.uniform(0.0, 2.0 * np.pi, size=2)
        pit_c += cp.pit_shift * np.column_stack([np.cos(ang), np.sin(ang)])
    cusp_c = CUSP_CENTERS * ax
    z = np.zeros(len(xy))
    for c, h, w in zip(cusp_c, heights, cwidths):
        z += h * np.exp(-np.sum((xy - c) ** 2, axis=1) / (2.0 * w * w))
    for c, d, w in zip(pit_c, depths, pwidths):
        z -= d * np.exp(-np.sum((xy - c) ** 2, axis=1) / (2.0 * w * w))
    noise = rng.standard_normal((len(xy), 3)) * spec.noise_sigma
    verts = np.column_stack([xy, z])
    interior = np.arange(n_b, len(xy))
    if spec.planar_noise:
        verts[interior, :2] += noise[interior, :2]
    else:
        verts[:, 2] += noise[:, 2]
    mesh = TriMesh(verts, faces)
    rim = np.arange(n_b)
    cusps = [int(rim[np.argmin(np.sum((xy[rim] - c) ** 2, axis=1))]) for c in cusp_c]
    pits = [int(n_b + np.argmin(np.sum((verts[n_b:, :2] - c) ** 2, axis=1))) for c in pit_c]
    return mesh, landmarks_from(cusps + pits, mesh)


def gen_dataset(spec, n_per_class, out_dir=None):
    """Balanced two-class dataset; optionally written as OBJ + landmark files + manifest.csv."""
    if n_per_class < 2:
        raise ValueError("n_per_class must be at least 2")
    subjects = []
    rows = []
    if out_dir is not None:
        out = Path(out_dir)
        (out / "meshes").mkdir(parents=True, exist_ok=True)
        (out / "landmarks").mkdir(parents=True, exist_ok=True)
    for label in spec.class_params:
        for s in range(n_per_class):
            mesh, lm = gen_surface(spec, label, s)
            name = f"{label}_{s:03d}"
            subjects.append(Subject(mesh, lm, label, name))
            if out_dir is not None:
                mp = Path("meshes") / f"{name}.obj"
                lp = Path("landmarks") / f"{name}.lmk"
                write_mesh(mesh, out / mp)
                write_landmarks(lm, out / lp)
                rows.append((mp.as_posix(), lp.as_posix(), label))
    if out_dir is not None:
        write_manifest(rows, Path(out_dir) / "manifest.csv")
    return Dataset(subjects)
