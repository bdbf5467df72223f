import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from rfo import _kernels as K

pytestmark = pytest.mark.skipif(not K.HAS_NUMBA, reason="numba not installed")

floats = st.floats(-5.0, 5.0, allow_nan=False, width=64)


@pytest.fixture
def both():
    prev = K.backend()

    def run(fn, *args):
        out = {}
        for b in ("numpy", "numba"):
            K.set_backend(b)
            out[b] = fn(*[a.copy() if isinstance(a, np.ndarray) else a for a in args])
        K.set_backend(prev)
        return out["numpy"], out["numba"]

    yield run
    K.set_backend(prev)


@given(arrays(np.float64, (5, 7), elements=floats))
def test_layernorm_backends_agree(x):
    g = np.linspace(0.5, 1.5, 7)
    b = np.linspace(-0.2, 0.2, 7)
    outs = []
    for name in ("numpy", "numba"):
        K.set_backend(name)
        y, xhat, rstd = K.layernorm_fwd(x, g, b, 1e-5)
        gx, gg, gb = K.layernorm_bwd(np.cos(x), xhat, rstd, g)
        outs.append((y, gx, gg, gb))
    K.set_backend("numba")
    for a, c in zip(*outs):
        np.testing.assert_allclose(a, c, rtol=1e-9, atol=1e-9)


def test_td_lambda_k3_silu_adamw_agree(both, rng):
    r = rng.normal(size=(8, 5))
    v = rng.normal(size=(8, 5))
    d = (rng.uniform(size=(8, 5)) < 0.2).astype(float)
    a, b = both(K.td_lambda, r, v, d, 0.99, 0.95)
    np.testing.assert_allclose(a, b, rtol=1e-14, atol=1e-14)
    lr = rng.normal(size=1000)
    a, b = both(K.k3, lr)
    np.testing.assert_allclose(a, b, rtol=1e-14, atol=1e-14)
    x = rng.normal(size=(6, 4))
    y, sig = K.silu_fwd(x)
    a, b = both(K.silu_bwd, np.ones_like(x), x, sig)
    np.testing.assert_allclose(a, b, rtol=1e-14, atol=1e-14)

    def step(p, g, m, v2):
        K.adamw_update(p, g, m, v2, 0.01, 0.9, 0.999, 0.1, 0.001, 1e-4, 1e-8)
        return p, m, v2

    a, b = both(step, rng.normal(size=50), rng.normal(size=50), rng.normal(size=50), rng.uniform(size=50))
    for u, w in zip(a, b):
        np.testing.assert_allclose(u, w, rtol=1e-14, atol=1e-15)


def test_unknown_backend_rejected():
    with pytest.raises(ValueError):
        K.set_backend("cuda")
