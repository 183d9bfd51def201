import warnings

import numpy as np
import pytest

from qcshape.conformal import rectangular_param
from qcshape.shape import compute_terms, mean_surface
from qcshape.synth import gen_dataset, preset

# Small meshes keep the suite fast; the acceptance module uses its own sizes.
RES = 400


@pytest.fixture(scope="session")
def small_mixed():
    return gen_dataset(preset("mixed", seed=3, resolution=RES), 4)


@pytest.fixture(scope="session")
def small_terms(small_mixed):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        params = [rectangular_param(s.mesh, s.landmarks) for s in small_mixed]
        mean, lm, info = mean_surface(small_mixed, params=params)
        terms, maps, kept = compute_terms(small_mixed, mean, lm, params=params, mean_param=info["param"])
    return {"mean": mean, "lm": lm, "terms": terms, "maps": maps, "info": info, "params": params}


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# one PASS/FAIL line per acceptance criterion, repeated in the terminal summary
ACCEPTANCE_LINES = []


@pytest.fixture
def verdict():
    def record(number, ok, detail):
        line = f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        assert ok, line

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
