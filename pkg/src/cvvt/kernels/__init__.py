"""Convolution kernel dispatch.

Two interchangeable backends compute the same 3D convolutions:

* ``numba`` — JIT-compiled direct loops (:mod:`cvvt.kernels.jit`), the
  default when numba imports cleanly.
* ``numpy`` — vectorized im2col/BLAS fallback
  (:mod:`cvvt.kernels.reference`).

Selection: the ``CVVT_BACKEND`` environment variable (``auto`` | ``numba``
| ``numpy``, read once at import) or :func:`set_backend` at runtime.
Regardless of backend, float64 arrays always take the numpy path (the JIT
kernels are compiled for float32), 1x1x1 ungrouped convolutions are plain
channel matmuls so both backends route them to BLAS, and ungrouped
convolutions above ``GEMM_MIN_MACS`` multiply-accumulates go to the
GEMM-based numpy path on both backends as well — at that size the BLAS
matrix products outrun the direct loops.
"""

import os

import numpy as np

from . import reference
from .reference import output_extent

# The workqueue layer is always present and fully deterministic here; the
# default probe may emit warnings when TBB/OpenMP are missing or stale.
os.environ.setdefault("NUMBA_THREADING_LAYER", "workqueue")

try:
    from . import jit as _jit
    _HAVE_NUMBA = True
except ImportError:  # pragma: no cover - exercised only without numba
    _jit = None
    _HAVE_NUMBA = False

_backend = None


def available_backends():
    return ("numba", "numpy") if _HAVE_NUMBA else ("numpy",)


def set_backend(name):
    """Select the kernel backend: 'auto', 'numba' or 'numpy'."""
    global _backend
    if name == "auto":
        _backend = "numba" if _HAVE_NUMBA else "numpy"
    elif name == "numpy":
        _backend = "numpy"
    elif name == "numba":
        if not _HAVE_NUMBA:
            raise RuntimeError("numba backend requested but numba is not importable")
        _backend = "numba"
    else:
        raise ValueError(f"unknown backend {name!r}: expected auto, numba or numpy")


def active_backend():
    return _backend


set_backend(os.environ.get("CVVT_BACKEND", "auto"))


def _use_reference(x, w):
    return (_backend == "numpy" or x.dtype == np.float64
            or w.dtype == np.float64)


def _is_pointwise(w_shape, groups):
    return groups == 1 and w_shape[2:] == (1, 1, 1)


# Ungrouped convolutions at or above this many multiply-accumulates take
# the GEMM path even on the numba backend. Tests pin this to 0 or a huge
# value to force one path or the other.
GEMM_MIN_MACS = 1 << 22


def _use_gemm(w_shape, groups, out_elements):
    cg, kvol = w_shape[1], w_shape[2] * w_shape[3] * w_shape[4]
    return groups == 1 and out_elements * cg * kvol >= GEMM_MIN_MACS


def _build_planes(x, padding, sh, sw):
    """Pad ``x`` and split it into stride-parity planes for the JIT kernels.

    Plane ``a*sw + b`` holds ``xp[..., a::sh, b::sw]``, zero-padded on the
    right so all planes share the extent ``(ceil(Hp/sh), ceil(Wp/sw))``.
    """
    pt, ph, pw = padding
    if pt or ph or pw:
        xp = np.pad(x, ((0, 0), (0, 0), (pt, pt), (ph, ph), (pw, pw)))
    else:
        xp = x
    if sh == 1 and sw == 1:
        return np.ascontiguousarray(xp).reshape((1,) + xp.shape)
    B, C, Tp, Hp, Wp = xp.shape
    planes = np.zeros((sh * sw, B, C, Tp, -(-Hp // sh), -(-Wp // sw)),
                      dtype=xp.dtype)
    for a in range(sh):
        ha = -(-(Hp - a) // sh)
        for b in range(sw):
            wb = -(-(Wp - b) // sw)
            planes[a * sw + b, :, :, :, :ha, :wb] = xp[:, :, :, a::sh, b::sw]
    return planes


def _scatter_planes(gxP, x_shape, padding, sh, sw):
    """Inverse of :func:`_build_planes` for the input-gradient planes."""
    B, C, T, H, W = x_shape
    pt, ph, pw = padding
    if sh == 1 and sw == 1:
        gxp = gxP[0]
    else:
        Tp, Hp, Wp = T + 2 * pt, H + 2 * ph, W + 2 * pw
        gxp = np.empty((B, C, Tp, Hp, Wp), dtype=gxP.dtype)
        for a in range(sh):
            ha = -(-(Hp - a) // sh)
            for b in range(sw):
                wb = -(-(Wp - b) // sw)
                gxp[:, :, :, a::sh, b::sw] = gxP[a * sw + b, :, :, :, :ha, :wb]
    if pt or ph or pw:
        gxp = gxp[:, :, pt:pt + T, ph:ph + H, pw:pw + W]
    return np.ascontiguousarray(gxp)


def conv3d_forward(x, w, stride, padding, groups):
    """out[b,o,t,h,w] = sum_{c,p,q,r} x[b, gC+c, t*st-pt+p, ...] * w[o,c,p,q,r]

    x: (B, Cin, T, H, W); w: (Cout, Cin/groups, kt, kh, kw).
    Out-of-range input positions (from padding) contribute zero.
    """
    if _is_pointwise(w.shape, groups):
        return reference.pointwise_forward(x, w, stride, padding)
    B, _, T, H, W = x.shape
    Cout, _, kt, kh, kw = w.shape
    st, sh, sw = stride
    pt, ph, pw = padding
    To = output_extent(T, kt, st, pt)
    Ho = output_extent(H, kh, sh, ph)
    Wo = output_extent(W, kw, sw, pw)
    if (_use_reference(x, w)
            or _use_gemm(w.shape, groups, B * Cout * To * Ho * Wo)):
        return reference.conv3d_forward(x, w, stride, padding, groups)
    planes = _build_planes(x, padding, sh, sw)
    out = np.empty((B, Cout, To, Ho, Wo), dtype=np.float32)
    _jit.conv3d_forward(planes, w, st, sh, sw, groups, out)
    return out


def conv3d_grad_input(gy, w, x_shape, stride, padding, groups):
    if _is_pointwise(w.shape, groups):
        return reference.pointwise_grad_input(gy, w, x_shape, stride, padding)
    if _use_reference(gy, w) or _use_gemm(w.shape, groups, gy.size):
        return reference.conv3d_grad_input(gy, w, x_shape, stride, padding,
                                           groups)
    B, C, T, H, W = x_shape
    st, sh, sw = stride
    pt, ph, pw = padding
    Tp, Hp, Wp = T + 2 * pt, H + 2 * ph, W + 2 * pw
    gxP = np.zeros((sh * sw, B, C, Tp, -(-Hp // sh), -(-Wp // sw)),
                   dtype=np.float32)
    _jit.conv3d_grad_input(gy, w, st, sh, sw, groups, gxP)
    return _scatter_planes(gxP, x_shape, padding, sh, sw)


def conv3d_grad_weight(gy, x, w_shape, stride, padding, groups):
    if _is_pointwise(w_shape, groups):
        return reference.pointwise_grad_weight(gy, x, w_shape, stride, padding)
    if _use_reference(gy, x) or _use_gemm(w_shape, groups, gy.size):
        return reference.conv3d_grad_weight(gy, x, w_shape, stride, padding,
                                            groups)
    st, sh, sw = stride
    planes = _build_planes(x, padding, sh, sw)
    gw = np.empty(w_shape, dtype=np.float32)
    _jit.conv3d_grad_weight(planes, gy, st, sh, sw, groups, gw)
    return gw
