import hashlib

import numpy as np
import pytest

from qcshape.conformal import select_corners
from qcshape.diffgeo import curvatures
from qcshape.mesh import load_manifest
from qcshape.synth import ClassParams, SynthSpec, gen_dataset, gen_surface, preset


def test_same_inputs_same_surface():
    spec = preset("mixed", seed=4, resolution=400)
    a = gen_surface(spec, "B", 7)
    b = gen_surface(spec, "B", 7)
    assert np.array_equal(a[0].vertices, b[0].vertices)
    assert a[1].indices == b[1].indices


def test_subjects_differ():
    spec = preset("mixed", seed=4, resolution=400)
    a = gen_surface(spec, "A", 0)[0].vertices
    b = gen_surface(spec, "A", 1)[0].vertices
    assert not np.array_equal(a, b)


def test_noise_free_identical_params_are_congruent():
    cp = ClassParams(shape_jitter=0.0, pit_jitter=0.0)
    spec = SynthSpec({"A": cp, "B": cp}, noise_sigma=0.0, resolution=400)
    a, la = gen_surface(spec, "A", 0)
    b, lb = gen_surface(spec, "A", 5)
    assert np.array_equal(a.vertices, b.vertices)
    assert la.indices == lb.indices


def test_flat_pits_have_no_gaussian_curvature():
    cp = ClassParams(pit_depth=(0.0, 0.0))
    spec = SynthSpec({"A": cp, "B": cp}, noise_sigma=0.0, resolution=1200)
    mesh, lm = gen_surface(spec, "A", 0)
    K = curvatures(mesh).K
    assert np.all(np.abs(K[list(lm)[2:]]) < 1e-2)


def test_resolution_contract():
    mesh, _ = gen_surface(SynthSpec(resolution=1200), "A", 0)
    assert abs(mesh.n_vertices - 1217) <= 0.05 * 1217
    with pytest.raises(ValueError, match="too low"):
        gen_surface(SynthSpec(resolution=150), "A", 0)


@pytest.mark.parametrize("name", ["null", "curvature-diff", "distortion-diff", "mixed"])
def test_presets_give_valid_disks(name):
    spec = preset(name, resolution=300)
    for label in spec.class_params:
        mesh, lm = gen_surface(spec, label, 0)
        assert mesh.euler_characteristic == 1
        assert len(lm) == 4
        bnd = set(mesh.boundary.tolist())
        assert lm[0] in bnd and lm[1] in bnd
        assert lm[2] not in bnd and lm[3] not in bnd
        select_corners(mesh, lm)


def test_unknown_preset():
    with pytest.raises(ValueError):
        preset("nope")


def _digest(folder):
    h = hashlib.sha256()
    for p in sorted(folder.rglob("*")):
        if p.is_file():
            h.update(p.relative_to(folder).as_posix().encode())
            h.update(p.read_bytes())
    return h.hexdigest()


def test_dataset_files_are_reproducible(tmp_path):
    spec = preset("curvature-diff", seed=2, resolution=300)
    ds = gen_dataset(spec, 3, tmp_path / "a")
    gen_dataset(spec, 3, tmp_path / "b")
    assert _digest(tmp_path / "a") == _digest(tmp_path / "b")
    assert len(ds) == 6
    assert sorted(ds.labels.tolist()) == ["A"] * 3 + ["B"] * 3
    back = load_manifest(tmp_path / "a" / "manifest.csv")
    assert np.array_equal(back[4].mesh.vertices, ds[4].mesh.vertices)


def test_balanced_dataset_size():
    ds = gen_dataset(preset("null", resolution=300), 20)
    assert len(ds) == 40
    assert (ds.labels == "A").sum() == 20


def test_needs_two_per_class():
    with pytest.raises(ValueError):
        gen_dataset(preset("null", resolution=300), 1)
