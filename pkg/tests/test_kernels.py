import numpy as np
import pytest

from seizure_lstm import kernels, nncore
from seizure_lstm.errors import ConfigError

needs_ext = pytest.mark.skipif("cython" not in kernels.available_backends(), reason="extension not built")


def test_python_always_available():
    assert "python" in kernels.available_backends()
    assert kernels.get_backend("python") is kernels.get_backend("python")


def test_unknown_backend():
    with pytest.raises(ConfigError):
        kernels.get_backend("fortran")


@needs_ext
@pytest.mark.parametrize("B,L,M,n", [(1, 1, 3, 1), (4, 2, 7, 3), (16, 8, 32, 5)])
def test_backends_agree(B, L, M, n, rng):
    params = nncore.random_params(B, L, 3, 2, rng)
    X = rng.normal(size=(n, M, L))
    labels = rng.integers(0, 2, size=n)
    loss_p, g_p, P_p = nncore.loss_and_grad(params, X, labels, "python")
    loss_c, g_c, P_c = nncore.loss_and_grad(params, X, labels, "cython")
    assert loss_c == pytest.approx(loss_p, rel=1e-12)
    np.testing.assert_allclose(P_c, P_p, rtol=1e-12, atol=1e-15)
    for name in params.NAMES:
        np.testing.assert_allclose(g_c.arrays()[name], g_p.arrays()[name], rtol=1e-9, atol=1e-13)
