import numpy as np
import pytest

from distill_influence import _kernels_py, kernels

BACKENDS = ["python"] + (["compiled"] if kernels._compiled is not None else [])


@pytest.fixture(params=BACKENDS)
def backend(request):
    return kernels.get_backend(request.param)


def _rows(rng, n=7, c=4):
    z = rng.standard_normal((n, c)) * 5
    return np.ascontiguousarray(z)


def test_compiled_backend_is_built():
    # the editable install compiles the extension; the fallback is for environments without a compiler
    assert kernels.BACKEND in ("compiled", "python")
    assert kernels.get_backend("python") is _kernels_py


def test_unknown_backend():
    with pytest.raises(ValueError):
        kernels.get_backend("gpu")


def test_softmax_rows(backend):
    z = _rows(np.random.default_rng(0))
    p = backend.softmax_rows(z)
    e = np.exp(z - z.max(1, keepdims=True))
    np.testing.assert_allclose(p, e / e.sum(1, keepdims=True), rtol=1e-14, atol=0)
    np.testing.assert_allclose(p.sum(1), 1.0, atol=1e-15)


def test_softmax_extreme_logits(backend):
    p = backend.softmax_rows(np.array([[1000.0, 0.0], [-1000.0, -1000.0]]))
    np.testing.assert_allclose(p, [[1.0, 0.0], [0.5, 0.5]])


def test_empty_rows(backend):
    assert backend.softmax_rows(np.zeros((0, 3))).shape == (0, 3)
    assert backend.xent_rows(np.zeros((0, 3)), np.zeros((0, 3)), 1e-12).shape == (0,)


def test_backends_agree():
    if len(BACKENDS) < 2:
        pytest.skip("compiled kernels not built")
    py, cc = kernels.get_backend("python"), kernels.get_backend("compiled")
    rng = np.random.default_rng(1)
    z, g = _rows(rng), _rows(rng)
    p = py.softmax_rows(z)
    np.testing.assert_allclose(cc.softmax_rows(z), p, rtol=1e-13)
    np.testing.assert_allclose(cc.softmax_rows_backward(p, g), py.softmax_rows_backward(p, g), rtol=1e-12, atol=1e-15)
    t = py.softmax_rows(_rows(rng))
    q = p.copy()
    q[0, 0] = 1e-20  # exercise the floor
    np.testing.assert_allclose(cc.xent_rows(t, q, 1e-12), py.xent_rows(t, q, 1e-12), rtol=1e-13)
    gr = rng.standard_normal(q.shape[0])
    for a, b in zip(cc.xent_rows_backward(t, q, 1e-12, gr), py.xent_rows_backward(t, q, 1e-12, gr)):
        np.testing.assert_allclose(a, b, rtol=1e-13)


def test_xent_floor(backend):
    t = np.array([[1.0, 0.0]])
    q = np.array([[0.0, 1.0]])
    np.testing.assert_allclose(backend.xent_rows(t, q, 1e-12), [-np.log(1e-12)])
    gt, gq = backend.xent_rows_backward(t, q, 1e-12, np.ones(1))
    assert gq[0, 0] == 0.0
    np.testing.assert_allclose(gt[0, 0], -np.log(1e-12))
