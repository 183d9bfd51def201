import numpy as np
import pytest

from qcshape.conformal import rectangular_param
from qcshape.mesh import landmarks_from
from qcshape.surfaces import disk_mesh, grid_rectangle
from qcshape.synth import gen_surface, preset
from qcshape.teichmuller import (
    Constraints,
    PointLocator,
    QCOptions,
    SolverError,
    landmark_tmap,
    linear_beltrami_solver,
    teichmuller_distance,
)


def corner_landmarks(mesh, c):
    return landmarks_from([c[0], c[2], c[1], c[3]], mesh)


def test_distance_values():
    assert abs(teichmuller_distance(1 / 3) - 0.5 * np.log(2.0)) < 1e-12
    assert abs(teichmuller_distance(1 / 3) - 0.346574) < 1e-6
    assert abs(teichmuller_distance(0.5) - 0.549306) < 1e-6
    assert teichmuller_distance(0.0) == 0.0
    with pytest.raises(ValueError):
        teichmuller_distance(1.0)


def test_lbs_reproduces_affine_map():
    m, c = grid_rectangle(1.0, 1.0, 8, 8)
    uv = m.vertices[:, :2]
    A = np.array([[1.4, 0.3], [0.1, 0.9]])
    target = uv @ A.T
    # mu of the affine map, constant per face
    a = 0.5 * ((A[0, 0] + A[1, 1]) + 1j * (A[1, 0] - A[0, 1]))
    b = 0.5 * ((A[0, 0] - A[1, 1]) + 1j * (A[1, 0] + A[0, 1]))
    mu = np.full(m.n_faces, b / a)
    cons = Constraints()
    for v in m.boundary:
        cons.pin(v, target[v])
    got = linear_beltrami_solver(uv, m.faces, mu, cons)
    assert np.max(np.abs(got - target)) < 1e-10


def test_lbs_zero_mu_is_harmonic_identity():
    m, _ = grid_rectangle(1.0, 1.0, 6, 6)
    uv = m.vertices[:, :2]
    cons = Constraints()
    for v in m.boundary:
        cons.pin(v, uv[v])
    got = linear_beltrami_solver(uv, m.faces, np.zeros(m.n_faces), cons)
    assert np.max(np.abs(got - uv)) < 1e-12


def test_lbs_rejects_bad_input():
    m, _ = grid_rectangle(1.0, 1.0, 3, 3)
    uv = m.vertices[:, :2]
    with pytest.raises(ValueError):
        linear_beltrami_solver(uv, m.faces, np.full(m.n_faces, 1.0 + 0j), Constraints())
    with pytest.raises(SolverError):
        linear_beltrami_solver(uv, m.faces, np.zeros(m.n_faces), Constraints())


@pytest.mark.parametrize("a", [1.5, 2.0, 3.0])
def test_rectangle_oracle(a):
    src, c = grid_rectangle(1.0, 1.0, 12, 12)
    tgt, ct = grid_rectangle(a, 1.0, int(12 * a), 12)
    sm = landmark_tmap(src, corner_landmarks(src, c), tgt, corner_landmarks(tgt, ct))
    assert abs(np.abs(sm.mu).mean() - (a - 1) / (a + 1)) < 1e-3
    assert sm.residual_uniformity < 0.02
    assert sm.converged


def test_self_map_is_identity():
    mesh, lm = gen_surface(preset("mixed", resolution=400), "A", 1)
    sm = landmark_tmap(mesh, lm, mesh, lm)
    assert sm.distance < 1e-3
    assert np.max(np.linalg.norm(sm.points - mesh.vertices, axis=1)) < 1e-8


def test_landmarks_match_exactly():
    spec = preset("mixed", resolution=400)
    mi, li = gen_surface(spec, "A", 0)
    mj, lj = gen_surface(spec, "B", 0)
    pj = rectangular_param(mj, lj)
    sm = landmark_tmap(mi, li, mj, lj, param_j=pj)
    assert sm.converged
    assert np.max(np.abs(sm.rect_uv[list(li)] - pj.landmark_uv)) < 1e-9
    assert np.max(np.linalg.norm(sm.points[list(li)] - mj.vertices[list(lj)], axis=1)) < 1e-9


def test_map_is_fold_free_and_uniform():
    spec = preset("mixed", resolution=400)
    mi, li = gen_surface(spec, "A", 2)
    mj, lj = gen_surface(spec, "B", 3)
    sm = landmark_tmap(mi, li, mj, lj)
    assert np.all(np.abs(sm.mu) < 1)
    assert sm.residual_uniformity < QCOptions().uniformity_tol
    assert 0 < sm.k < 1


def test_distance_symmetry():
    spec = preset("curvature-diff", resolution=400)
    mi, li = gen_surface(spec, "A", 0)
    mj, lj = gen_surface(spec, "B", 0)
    dij = landmark_tmap(mi, li, mj, lj).distance
    dji = landmark_tmap(mj, lj, mi, li).distance
    assert dij > 0
    assert abs(dij - dji) / max(dij, dji) < 0.05


def test_non_convergence_is_flagged():
    spec = preset("mixed", resolution=400)
    mi, li = gen_surface(spec, "A", 0)
    mj, lj = gen_surface(spec, "B", 1)
    sm = landmark_tmap(mi, li, mj, lj, QCOptions(max_iter=2))
    assert not sm.converged
    assert sm.iterations <= 2
    assert sm.to_json()["converged"] is False


def test_point_locator():
    m = disk_mesh(300)
    loc = PointLocator(m.vertices[:, :2], m.faces)
    rng = np.random.default_rng(0)
    r = np.sqrt(rng.uniform(0, 0.8, 50))
    t = rng.uniform(0, 2 * np.pi, 50)
    pts = np.column_stack([r * np.cos(t), r * np.sin(t)])
    f, b = loc.locate(pts)
    back = np.einsum("ij,ijk->ik", b, m.vertices[m.faces[f], :2])
    assert np.max(np.abs(back - pts)) < 1e-12
    assert np.all(b >= -1e-9)
    with pytest.raises(ValueError):
        loc.locate([[5.0, 5.0]])


def test_surface_map_json_shape():
    mesh, lm = gen_surface(preset("null", resolution=300), "A", 0)
    data = landmark_tmap(mesh, lm, mesh, lm).to_json()
    assert len(data["images"]) == mesh.n_vertices
    assert set(data) >= {"k", "distance", "residual_uniformity", "converged", "images"}
