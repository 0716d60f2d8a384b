"""Pure-numpy 3D convolution kernels (forward and both gradients).

These serve three roles: the fallback backend when numba is unavailable,
the only implementation used for float64 arrays (the finite-difference
oracle runs in 64-bit), and — for large ungrouped convolutions — the fast
path for *both* backends, because they spend their time inside BLAS.

Ungrouped convolutions are lowered to matrix products: the forward and
weight-gradient passes copy kernel-offset slabs of the padded input into a
column matrix per batch item (im2col with contiguous strided copies, no
transposed scatter) and run one fat GEMM each.  The input gradient avoids
a col2im scatter entirely: positions of the padded input are split into
stride-parity classes, and each class is itself a plain stride-1
convolution of the zero-padded output gradient with a flipped subsampled
kernel — so it reuses the same slab+GEMM machinery.  Grouped and
depthwise convolutions keep their einsum formulations.
"""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def output_extent(size, kernel, stride, padding):
    return (size + 2 * padding - kernel) // stride + 1


def _pad(x, padding):
    pt, ph, pw = padding
    if pt == 0 and ph == 0 and pw == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (pt, pt), (ph, ph), (pw, pw)))


def _windows(x, kernel, stride):
    """Strided sliding windows over the padded input.

    Returns a view of shape (B, C, To, Ho, Wo, kt, kh, kw).
    """
    st, sh, sw = stride
    win = sliding_window_view(x, kernel, axis=(2, 3, 4))
    return win[:, :, ::st, ::sh, ::sw]


def _slab_cols(item, kernel, stride, out_extents, buf):
    """im2col for one batch item via kernel-offset slab copies.

    ``item`` is (C, Tp, Hp, Wp); ``buf`` is (kt, kh, kw, C, To, Ho, Wo).
    Each of the kt*kh*kw assignments copies a strided block whose last
    axis is walked with the (small) kernel stride, so the copies run at
    near-memcpy speed instead of the scattered access a transposed
    window view would produce.  Returns ``buf`` as a 2-D column matrix.
    """
    kt, kh, kw = kernel
    st, sh, sw = stride
    to, ho, wo = out_extents
    for p in range(kt):
        ts = slice(p, p + (to - 1) * st + 1, st)
        for q in range(kh):
            hs = slice(q, q + (ho - 1) * sh + 1, sh)
            for r in range(kw):
                buf[p, q, r] = item[:, ts, hs,
                                    r:r + (wo - 1) * sw + 1:sw]
    return buf.reshape(-1, to * ho * wo)


def conv3d_forward(x, w, stride, padding, groups):
    B, C, T, H, W = x.shape
    Cout, Cg, kt, kh, kw = w.shape
    xp = _pad(x, padding)
    if groups == 1:
        st, sh, sw = stride
        pt, ph, pw = padding
        To = output_extent(T, kt, st, pt)
        Ho = output_extent(H, kh, sh, ph)
        Wo = output_extent(W, kw, sw, pw)
        # rows ordered (p, q, r, c) to match the slab layout
        wf = np.ascontiguousarray(
            w.transpose(2, 3, 4, 1, 0).reshape(kt * kh * kw * Cg, Cout))
        out = np.empty((B, Cout, To, Ho, Wo), dtype=x.dtype)
        buf = np.empty((kt, kh, kw, C, To, Ho, Wo), dtype=x.dtype)
        for b in range(B):
            m = _slab_cols(xp[b], (kt, kh, kw), stride, (To, Ho, Wo), buf)
            out[b] = (wf.T @ m).reshape(Cout, To, Ho, Wo)
        return out
    win = _windows(xp, (kt, kh, kw), stride)
    _, _, To, Ho, Wo = win.shape[:5]
    if groups == C and Cg == 1:
        return np.einsum("bcthwpqr,cpqr->bcthw", win, w[:, 0],
                         optimize=True).astype(x.dtype, copy=False)
    cpg = Cout // groups
    wing = win.reshape(B, groups, Cg, To, Ho, Wo, kt, kh, kw)
    wg = w.reshape(groups, cpg, Cg, kt, kh, kw)
    out = np.einsum("bgcthwpqr,gocpqr->bgothw", wing, wg, optimize=True)
    return out.reshape(B, Cout, To, Ho, Wo).astype(x.dtype, copy=False)


def conv3d_grad_input(gy, w, x_shape, stride, padding, groups):
    # Ungrouped case: each stride-parity class (at, ah, aw) of padded
    # input positions receives gradient only from kernel taps congruent
    # to it (gx[s*u + a] = sum_m gy[u - m] * w[s*m + a]), and over those
    # positions the map is a plain stride-1 correlation — so each class
    # is a valid convolution of the zero-padded output gradient with the
    # flipped subsampled kernel, via slabs + one GEMM per batch item.
    # Classes with no congruent taps (stride beyond the kernel) keep
    # their zeros.
    B, C, T, H, W = x_shape
    Cout, Cg, kt, kh, kw = w.shape
    _, _, To, Ho, Wo = gy.shape
    st, sh, sw = stride
    pt, ph, pw = padding
    cpg = Cout // groups
    gxp = np.zeros((B, C, T + 2 * pt, H + 2 * ph, W + 2 * pw), dtype=gy.dtype)
    Tp, Hp, Wp = gxp.shape[2:]
    if groups == 1:
        for at in range(st):
            mt = -(-(kt - at) // st)
            ut = -(-(Tp - at) // st)
            if mt <= 0 or ut <= 0:
                continue
            for ah in range(sh):
                mh = -(-(kh - ah) // sh)
                uh = -(-(Hp - ah) // sh)
                if mh <= 0 or uh <= 0:
                    continue
                for aw in range(sw):
                    mw = -(-(kw - aw) // sw)
                    uw = -(-(Wp - aw) // sw)
                    if mw <= 0 or uw <= 0:
                        continue
                    sub = w[:, :, at::st, ah::sh, aw::sw]
                    sub = sub[:, :, ::-1, ::-1, ::-1]
                    wg = np.ascontiguousarray(
                        sub.transpose(2, 3, 4, 0, 1).reshape(
                            mt * mh * mw * Cout, C))
                    gyp = np.pad(gy, ((0, 0), (0, 0),
                                      (mt - 1, max(0, ut - To)),
                                      (mh - 1, max(0, uh - Ho)),
                                      (mw - 1, max(0, uw - Wo))))
                    buf = np.empty((mt, mh, mw, Cout, ut, uh, uw),
                                   dtype=gy.dtype)
                    view = gxp[:, :, at::st, ah::sh, aw::sw]
                    for b in range(B):
                        m = _slab_cols(gyp[b], (mt, mh, mw), (1, 1, 1),
                                       (ut, uh, uw), buf)
                        view[b] = (wg.T @ m).reshape(C, ut, uh, uw)
        return gxp[:, :, pt:pt + T, ph:ph + H, pw:pw + W]
    gyg = gy.reshape(B, groups, cpg, To, Ho, Wo)
    wg = w.reshape(groups, cpg, Cg, kt, kh, kw)
    for p in range(kt):
        ts = slice(p, p + To * st, st)
        for q in range(kh):
            hs = slice(q, q + Ho * sh, sh)
            for r in range(kw):
                ws = slice(r, r + Wo * sw, sw)
                contrib = np.einsum("bgothw,goc->bgcthw", gyg,
                                    wg[:, :, :, p, q, r], optimize=True)
                gxp[:, :, ts, hs, ws] += contrib.reshape(B, C, To, Ho, Wo)
    return gxp[:, :, pt:pt + T, ph:ph + H, pw:pw + W]


def conv3d_grad_weight(gy, x, w_shape, stride, padding, groups):
    B, C, T, H, W = x.shape
    Cout, Cg, kt, kh, kw = w_shape
    _, _, To, Ho, Wo = gy.shape
    xp = _pad(x, padding)
    if groups == 1:
        # accumulate across batch items in float64: each weight entry sums
        # B*To*Ho*Wo products, which merits the wider accumulator
        acc = np.zeros((kt * kh * kw * Cg, Cout), dtype=np.float64)
        buf = np.empty((kt, kh, kw, C, To, Ho, Wo), dtype=x.dtype)
        for b in range(B):
            m = _slab_cols(xp[b], (kt, kh, kw), stride, (To, Ho, Wo), buf)
            acc += m @ gy[b].reshape(Cout, To * Ho * Wo).T
        gw = acc.reshape(kt, kh, kw, Cg, Cout).transpose(4, 3, 0, 1, 2)
        return np.ascontiguousarray(gw).astype(gy.dtype, copy=False)
    win = _windows(xp, (kt, kh, kw), stride)
    if groups == C and Cg == 1:
        gw = np.einsum("bcthw,bcthwpqr->cpqr", gy, win, optimize=True)
        return gw[:, None].astype(gy.dtype, copy=False)
    cpg = Cout // groups
    wing = win.reshape(B, groups, Cg, To, Ho, Wo, kt, kh, kw)
    gyg = gy.reshape(B, groups, cpg, To, Ho, Wo)
    gw = np.einsum("bgothw,bgcthwpqr->gocpqr", gyg, wing, optimize=True)
    return gw.reshape(w_shape).astype(gy.dtype, copy=False)


# Pointwise (1x1x1, groups=1) convolutions are plain channel matmuls; both
# backends route them here so they hit BLAS instead of scalar loops.

def pointwise_forward(x, w, stride, padding):
    xp = _pad(x, padding)
    st, sh, sw = stride
    xs = xp[:, :, ::st, ::sh, ::sw]
    return np.einsum("oc,bcthw->bothw", w[:, :, 0, 0, 0], xs, optimize=True)


def pointwise_grad_input(gy, w, x_shape, stride, padding):
    B, C, T, H, W = x_shape
    st, sh, sw = stride
    pt, ph, pw = padding
    gxp = np.zeros((B, C, T + 2 * pt, H + 2 * ph, W + 2 * pw), dtype=gy.dtype)
    gxp[:, :, ::st, ::sh, ::sw] = np.einsum(
        "oc,bothw->bcthw", w[:, :, 0, 0, 0], gy, optimize=True)
    return gxp[:, :, pt:pt + T, ph:ph + H, pw:pw + W]


def pointwise_grad_weight(gy, x, w_shape, stride, padding):
    xp = _pad(x, padding)
    st, sh, sw = stride
    xs = xp[:, :, ::st, ::sh, ::sw]
    gw = np.einsum("bothw,bcthw->oc", gy, xs, optimize=True)
    return gw.reshape(w_shape[:2] + (1, 1, 1)).astype(gy.dtype, copy=False)
