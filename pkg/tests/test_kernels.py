"""Convolution kernels vs a seven-loop float64 oracle, on every backend."""

import numpy as np
import pytest

from cvvt import kernels

from _oracles import conv3d_loops, assert_close


@pytest.fixture(params=kernels.available_backends())
def backend(request):
    kernels.set_backend(request.param)
    yield request.param
    kernels.set_backend("auto")


def _rand(rng, shape):
    return rng.uniform(-1.0, 1.0, size=shape).astype(np.float32)


def _run_case(backend, rng, b, cin, cout, tin, hin, win, kernel, stride,
              padding, groups=1):
    x = _rand(rng, (b, cin, tin, hin, win))
    w = _rand(rng, (cout, cin // groups, *kernel))
    # keep magnitudes comparable across kernel volumes
    w /= np.sqrt(w[0].size)
    out = kernels.conv3d_forward(x, w, stride, padding, groups)
    oracle = conv3d_loops(x, w, stride, padding, groups)
    assert out.dtype == np.float32
    assert_close(out, oracle, tol=1e-5,
                 what=f"forward[{backend} k={kernel} s={stride} p={padding} "
                      f"g={groups}]")
    return x, w, out


STRUCTURAL_CASES = [
    # b, cin, cout, (T,H,W), kernel, stride, padding, groups
    (1, 2, 3, (4, 6, 6), (3, 3, 3), (1, 1, 1), (1, 1, 1), 1),
    (2, 4, 4, (3, 6, 6), (3, 3, 3), (1, 1, 1), (1, 1, 1), 4),   # depthwise
    (1, 4, 6, (4, 9, 9), (5, 5, 5), (1, 2, 2), (2, 2, 2), 1),   # strided 5^3
    (2, 3, 5, (2, 4, 4), (1, 1, 1), (1, 2, 2), (0, 0, 0), 1),   # pointwise
    (1, 6, 4, (5, 5, 6), (2, 3, 2), (2, 1, 2), (1, 0, 1), 2),   # grouped
    (1, 1, 1, (1, 1, 1), (1, 1, 1), (1, 1, 1), (0, 0, 0), 1),   # singleton
]


@pytest.mark.parametrize("case", STRUCTURAL_CASES,
                         ids=["plain", "depthwise", "strided5", "pointwise",
                              "grouped", "singleton"])
def test_forward_matches_oracle(backend, case):
    rng = np.random.default_rng(42)
    b, cin, cout, dims, kernel, stride, padding, groups = case
    _run_case(backend, rng, b, cin, cout, *dims, kernel, stride, padding,
              groups)


def test_small_extent_sweep(backend):
    """Every kernel/stride/padding combination on one axis at a time, with
    output extents <= 5."""
    rng = np.random.default_rng(7)
    for axis in range(3):
        for k in (1, 2, 3):
            for s in (1, 2):
                for p in (0, 1):
                    kernel = [2, 2, 2]
                    stride = [1, 1, 1]
                    padding = [1, 1, 1]
                    kernel[axis], stride[axis], padding[axis] = k, s, p
                    dims = [4, 4, 4]
                    if dims[axis] + 2 * p < k:
                        continue
                    _run_case(backend, rng, 1, 2, 2, *dims,
                              tuple(kernel), tuple(stride), tuple(padding))


def test_gradients_match_fd(backend):
    """Directional finite differences (float64 oracle path) of the forward
    map vs grad_input / grad_weight."""
    rng = np.random.default_rng(3)
    cases = [
        ((1, 2, 4, 6, 6), (3, 2, 3, 3, 3), (1, 1, 1), (1, 1, 1), 1),
        ((2, 4, 3, 6, 6), (4, 1, 3, 3, 3), (1, 1, 1), (1, 1, 1), 4),
        ((1, 2, 4, 9, 9), (4, 2, 5, 5, 5), (1, 2, 2), (2, 2, 2), 1),
        ((1, 4, 3, 5, 5), (4, 2, 2, 3, 2), (2, 1, 2), (1, 0, 1), 2),
    ]
    eps = 1e-4
    for x_shape, w_shape, stride, padding, groups in cases:
        x = _rand(rng, x_shape)
        w = _rand(rng, w_shape) / np.sqrt(np.prod(w_shape[1:]))
        gy = _rand(rng, kernels.conv3d_forward(x, w, stride, padding,
                                               groups).shape)
        gx = kernels.conv3d_grad_input(gy, w, x_shape, stride, padding,
                                       groups)
        gw = kernels.conv3d_grad_weight(gy, x, w_shape, stride, padding,
                                        groups)
        assert gx.shape == x_shape and gw.shape == w_shape
        dx = rng.standard_normal(x_shape)
        dw = rng.standard_normal(w_shape)

        def loss(xa, wa):
            out = conv3d_loops(xa, wa, stride, padding, groups)
            return float((out * gy.astype(np.float64)).sum())

        x64, w64 = x.astype(np.float64), w.astype(np.float64)
        fd = (loss(x64 + eps * dx, w64 + eps * dw)
              - loss(x64 - eps * dx, w64 - eps * dw)) / (2 * eps)
        analytic = float((gx.astype(np.float64) * dx).sum()
                         + (gw.astype(np.float64) * dw).sum())
        rel = abs(analytic - fd) / max(abs(analytic), abs(fd), 1e-3)
        assert rel < 1e-3, (f"{w_shape} g={groups}: analytic {analytic} vs "
                            f"fd {fd} (rel {rel:.2e})")


def test_float64_inputs_stay_float64(backend):
    rng = np.random.default_rng(1)
    x = rng.standard_normal((1, 2, 3, 4, 4))
    w = rng.standard_normal((2, 2, 2, 2, 2))
    out = kernels.conv3d_forward(x, w, (1, 1, 1), (0, 0, 0), 1)
    assert out.dtype == np.float64
    assert_close(out, conv3d_loops(x, w, (1, 1, 1), (0, 0, 0)), tol=1e-10)


def test_forward_is_deterministic(backend):
    rng = np.random.default_rng(11)
    x = _rand(rng, (2, 3, 4, 8, 8))
    w = _rand(rng, (4, 3, 3, 3, 3))
    a = kernels.conv3d_forward(x, w, (1, 2, 2), (1, 1, 1), 1)
    b = kernels.conv3d_forward(x.copy(), w.copy(), (1, 2, 2), (1, 1, 1), 1)
    assert np.array_equal(a, b)


def test_output_extent_formula():
    assert kernels.output_extent(8, 3, 1, 1) == 8
    assert kernels.output_extent(8, 5, 2, 2) == 4
    assert kernels.output_extent(1, 1, 1, 0) == 1
    assert kernels.output_extent(4, 5, 1, 0) == 0  # caller must reject


def test_backend_selection():
    names = kernels.available_backends()
    assert "numpy" in names
    kernels.set_backend("numpy")
    assert kernels.active_backend() == "numpy"
    with pytest.raises(ValueError):
        kernels.set_backend("gpu")
    kernels.set_backend("auto")
