import os
import subprocess
import sys

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from motionpose import kernels as K
from motionpose._accel import HAVE_NUMBA

needs_numba = pytest.mark.skipif(not HAVE_NUMBA, reason="numba not installed")


def direct_conv(x, w, stride, pad):
    """Loop-nest reference convolution."""
    n, c, h, wd = x.shape
    oc, _, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    oh, ow = (h + 2 * pad - kh) // stride + 1, (wd + 2 * pad - kw) // stride + 1
    out = np.zeros((n, oc, oh, ow))
    for b in range(n):
        for o in range(oc):
            for i in range(oh):
                for j in range(ow):
                    out[b, o, i, j] = np.sum(xp[b, :, i * stride:i * stride + kh, j * stride:j * stride + kw] * w[o])
    return out


@pytest.mark.parametrize("stride,pad", [(1, 0), (1, 1), (2, 1), (2, 2)])
def test_im2col_matches_direct_convolution(rng, stride, pad):
    x = rng.standard_normal((2, 3, 7, 6))
    w = rng.standard_normal((4, 3, 3, 3))
    cols = K.im2col_numpy(x, 3, 3, stride, pad)
    oh, ow = K.out_size(7, 3, stride, pad), K.out_size(6, 3, stride, pad)
    got = (cols @ w.reshape(4, -1).T).reshape(2, oh, ow, 4).transpose(0, 3, 1, 2)
    np.testing.assert_allclose(got, direct_conv(x, w, stride, pad), atol=1e-10)


@settings(max_examples=30, deadline=None)
@given(k=st.integers(1, 4), stride=st.integers(1, 3), pad=st.integers(0, 2), seed=st.integers(0, 2**16))
def test_col2im_is_adjoint_of_im2col(k, stride, pad, seed):
    r = np.random.default_rng(seed)
    shape = (2, 2, 6, 5)
    x = r.standard_normal(shape)
    cols = K.im2col_numpy(x, k, k, stride, pad)
    y = r.standard_normal(cols.shape)
    lhs = np.sum(cols * y)
    rhs = np.sum(x * K.col2im_numpy(y, shape, k, k, stride, pad))
    assert lhs == pytest.approx(rhs, rel=1e-10, abs=1e-10)


def test_maxpool_definition():
    x = np.array([[[[1.0, 2.0], [3.0, 4.0]]]])
    out, arg = K.maxpool_forward_numpy(x, 2, 2)
    assert out.tolist() == [[[[4.0]]]]
    g = K.maxpool_backward_numpy(np.ones_like(out), arg, x.shape)
    assert g.tolist() == [[[[0.0, 0.0], [0.0, 1.0]]]]


@needs_numba
@pytest.mark.parametrize("stride,pad", [(1, 1), (2, 0), (2, 2)])
def test_numba_im2col_col2im_agree(rng, stride, pad):
    x = rng.standard_normal((2, 3, 9, 8)).astype(np.float32)
    a = K.im2col_numpy(x, 3, 3, stride, pad)
    b = K.im2col_numba(x, 3, 3, stride, pad)
    np.testing.assert_array_equal(a, b)
    y = rng.standard_normal(a.shape).astype(np.float32)
    np.testing.assert_allclose(K.col2im_numpy(y, x.shape, 3, 3, stride, pad),
                               K.col2im_numba(y, x.shape, 3, 3, stride, pad), rtol=1e-5, atol=1e-5)


@needs_numba
def test_numba_maxpool_agrees(rng):
    x = rng.standard_normal((2, 3, 9, 9)).astype(np.float32)
    o1, a1 = K.maxpool_forward_numpy(x, 3, 2)
    o2, a2 = K.maxpool_forward_numba(x, 3, 2)
    np.testing.assert_array_equal(o1, o2)
    np.testing.assert_array_equal(a1, a2)
    g = rng.standard_normal(o1.shape).astype(np.float32)
    np.testing.assert_allclose(K.maxpool_backward_numpy(g, a1, x.shape), K.maxpool_backward_numba(g, a2, x.shape))


@needs_numba
def test_numba_flow_kernels_agree(rng):
    shape = (20, 17)
    ix, iy, it = (rng.standard_normal(shape) for _ in range(3))
    u0, v0 = rng.standard_normal(shape) * 0.1, rng.standard_normal(shape) * 0.1
    a = K.hs_jacobi_numpy(ix, iy, it, u0, v0, 4.0, 25)
    b = K.hs_jacobi_numba(ix, iy, it, u0, v0, 4.0, 25)
    for p, q in zip(a, b):
        np.testing.assert_allclose(p, q, rtol=1e-9, atol=1e-9)
    img = rng.random(shape)
    u, v = rng.standard_normal(shape) * 2, rng.standard_normal(shape) * 2
    np.testing.assert_allclose(K.warp_bilinear_numpy(img, u, v), K.warp_bilinear_numba(img, u, v), atol=1e-12)


def test_warp_with_zero_flow_is_identity(rng):
    img = rng.random((8, 9))
    z = np.zeros_like(img)
    np.testing.assert_allclose(K.warp_bilinear_numpy(img, z, z), img)


def test_out_size_floor_rule():
    assert K.out_size(8, 3, 1, 1) == 8
    assert K.out_size(64, 5, 2, 2) == 32
    assert K.out_size(7, 2, 2, 0) == 3


@pytest.mark.parametrize("flag,expected", [("0", "numpy"), pytest.param("1", "numba", marks=needs_numba)])
def test_env_flag_selects_the_path(flag, expected):
    code = "from motionpose import kernels as K; print(K.im2col.__name__.rsplit('_', 1)[1])"
    out = subprocess.run([sys.executable, "-c", code], env=dict(os.environ, MOTIONPOSE_NUMBA=flag),
                         capture_output=True, text=True, check=True)
    assert out.stdout.strip() == expected
