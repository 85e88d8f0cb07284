import sys
from pathlib import Path

import numpy as np
import pytest

from seizure_lstm import kernels

sys.path.insert(0, str(Path(__file__).parent))


@pytest.fixture(params=kernels.available_backends())
def backend(request):
    return request.param


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def write_bonn_tree(root, sets="ABCDE", per_set=3, n_samples=4097, seed=0):
    """Fake Bonn layout: one directory per set, integer samples, plus a manifest."""
    gen = np.random.default_rng(seed)
    manifest = {}
    for s in sets:
        d = Path(root) / f"set_{s}"
        d.mkdir(parents=True)
        for j in range(per_set):
            values = gen.integers(-200, 200, size=n_samples)
            (d / f"{s}{j:03d}.txt").write_text("\n".join(str(v) for v in values) + "\n")
        manifest[s] = d.name
    path = Path(root) / "manifest.json"
    path.write_text(__import__("json").dumps(manifest))
    return path


@pytest.fixture
def bonn_tree(tmp_path):
    return write_bonn_tree(tmp_path)


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    setattr(item, f"rep_{rep.when}", rep)
