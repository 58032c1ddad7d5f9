import itertools

import numpy as np
import pytest

from powdr._backend import compiled_available, get_kernels


def _direct_conv(x, w, b, stride):
    N, C, X, Y, Z = x.shape
    O = w.shape[0]
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1), (1, 1)))
    oX, oY, oZ = (X - 1) // stride + 1, (Y - 1) // stride + 1, (Z - 1) // stride + 1
    out = np.zeros((N, O, oX, oY, oZ))
    for i, j, k in itertools.product(range(oX), range(oY), range(oZ)):
        patch = xp[:, :, i * stride:i * stride + 3, j * stride:j * stride + 3, k * stride:k * stride + 3]
        out[:, :, i, j, k] = np.tensordot(patch, w, axes=([1, 2, 3, 4], [1, 2, 3, 4]))
    return out + b[None, :, None, None, None]


@pytest.mark.parametrize("stride", [1, 2])
def test_conv_forward_matches_direct(backend, rng, stride):
    k = get_kernels(backend)
    x = rng.normal(size=(2, 3, 4, 6, 4))
    w = rng.normal(size=(5, 3, 3, 3, 3))
    b = rng.normal(size=5)
    np.testing.assert_allclose(k.conv3d_forward(x, w, b, stride), _direct_conv(x, w, b, stride), atol=1e-12)


def test_conv_center_tap_is_pointwise(backend, rng):
    k = get_kernels(backend)
    x = rng.normal(size=(1, 2, 4, 4, 4))
    w = np.zeros((2, 2, 3, 3, 3))
    w[:, :, 1, 1, 1] = [[2.0, 0.0], [1.0, -1.0]]
    out = k.conv3d_forward(x, w, np.zeros(2), 1)
    np.testing.assert_allclose(out[0, 0], 2 * x[0, 0])
    np.testing.assert_allclose(out[0, 1], x[0, 0] - x[0, 1])


@pytest.mark.parametrize("stride", [1, 2])
def test_conv_backward_is_adjoint(backend, rng, stride):
    k = get_kernels(backend)
    x = rng.normal(size=(2, 3, 4, 4, 6))
    w = rng.normal(size=(4, 3, 3, 3, 3))
    b = rng.normal(size=4)
    out = k.conv3d_forward(x, w, b, stride)
    g = rng.normal(size=out.shape)
    gx, gw, gb = k.conv3d_backward(x, w, g, stride)
    # <g, conv(x)> is bilinear: gradients must reproduce it exactly
    lin = np.sum(g * (out - b[None, :, None, None, None]))
    assert np.sum(gx * x) == pytest.approx(lin, rel=1e-10)
    assert np.sum(gw * w) == pytest.approx(lin, rel=1e-10)
    np.testing.assert_allclose(gb, g.sum(axis=(0, 2, 3, 4)))
    gx2, _, _ = k.conv3d_backward(x, w, g, stride, need_input_grad=False)
    assert gx2 is None


@pytest.mark.skipif(not compiled_available(), reason="compiled extension not built")
def test_backends_agree(rng):
    c, p = get_kernels("compiled"), get_kernels("python")
    x = rng.normal(size=(2, 4, 6, 4, 4))
    w = rng.normal(size=(3, 4, 3, 3, 3))
    b = rng.normal(size=3)
    for s in (1, 2):
        oc = c.conv3d_forward(x, w, b, s)
        np.testing.assert_allclose(oc, p.conv3d_forward(x, w, b, s), atol=1e-12)
        g = rng.normal(size=oc.shape)
        for u, v in zip(c.conv3d_backward(x, w, g, s), p.conv3d_backward(x, w, g, s)):
            np.testing.assert_allclose(u, v, atol=1e-11)
    allowed = rng.random((8, 8, 8)) > 0.2
    draws = rng.random(99)
    seed = int(np.flatnonzero(allowed.ravel())[0])
    a = allowed.astype(np.uint8)
    np.testing.assert_array_equal(c.grow_region(a, seed, 100, draws), p.grow_region(a, seed, 100, draws))


def test_unknown_backend():
    with pytest.raises(ValueError):
        get_kernels("fortran")
