"""Numba-compiled 3D convolution kernels.

Layout strategy: the dispatch layer pads the input and splits it into
stride-parity planes ``P[a*sw + b]`` holding ``xp[..., a::sh, b::sw]``
(zero-padded to a common extent). The input element for output column
``ow`` and kernel offset ``(q, r)`` then lives at plane
``(q % sh) * sw + (r % sw)``, row ``oh + q // sh``, column
``ow + r // sw`` — so inner loops walk unit-stride memory.

Speed strategy: the per-q row/plane offsets are precomputed into small
lookup tables (keeping integer division out of hot loops), and the two
kernel shapes that dominate this package's models — 3-wide taps at stride
1 and 5-wide taps at stride 2 — get fused code paths that keep all taps of
a row in registers (one load/store of the accumulator row per 3-5
multiply-adds). Everything else takes a generic tap-at-a-time path. The
input gradient is computed in gather form (shifted reads of the output
gradient, unit-stride writes), so no loop-carried dependences block
vectorization.

The kernels are compiled single-threaded: this package targets small CPU
boxes, and sequential loops both optimize better under LLVM and stay
bitwise deterministic.
"""

import numpy as np
from numba import njit


@njit(cache=True)
def _q_offsets(kh, sh, sw):
    """Per-q lookup tables: row shift ``q // sh`` and plane base
    ``(q % sh) * sw``."""
    jq = np.empty(kh, np.int64)
    aq = np.empty(kh, np.int64)
    for q in range(kh):
        jq[q] = q // sh
        aq[q] = (q % sh) * sw
    return jq, aq


@njit(fastmath=True, cache=True)
def conv3d_forward(P, w, st, sh, sw, groups, out):
    """P: (sh*sw, B, C, Tp, Hs, Ws) parity planes of the padded input."""
    B = P.shape[1]
    Cout, Cg, kt, kh, kw = w.shape
    To, Ho, Wo = out.shape[2], out.shape[3], out.shape[4]
    cpg = Cout // groups
    fuse5 = sw == 2 and kw == 5
    fuse3 = sw == 1 and kw == 3
    jq, aq = _q_offsets(kh, sh, sw)
    row = np.empty(Wo, np.float32)
    for b in range(B):
        for co in range(Cout):
            ci0 = (co // cpg) * Cg
            for ot in range(To):
                it0 = ot * st
                for oh in range(Ho):
                    for i in range(Wo):
                        row[i] = 0.0
                    for c in range(Cg):
                        ci = ci0 + c
                        for p in range(kt):
                            it = it0 + p
                            for q in range(kh):
                                j = oh + jq[q]
                                a = aq[q]
                                if fuse5:
                                    se = P[a, b, ci, it, j]
                                    so = P[a + 1, b, ci, it, j]
                                    w0 = w[co, c, p, q, 0]
                                    w1 = w[co, c, p, q, 1]
                                    w2 = w[co, c, p, q, 2]
                                    w3 = w[co, c, p, q, 3]
                                    w4 = w[co, c, p, q, 4]
                                    for ow in range(Wo):
                                        row[ow] += (w0 * se[ow]
                                                    + w2 * se[ow + 1]
                                                    + w4 * se[ow + 2]
                                                    + w1 * so[ow]
                                                    + w3 * so[ow + 1])
                                elif fuse3:
                                    s0 = P[a, b, ci, it, j]
                                    w0 = w[co, c, p, q, 0]
                                    w1 = w[co, c, p, q, 1]
                                    w2 = w[co, c, p, q, 2]
                                    for ow in range(Wo):
                                        row[ow] += (w0 * s0[ow]
                                                    + w1 * s0[ow + 1]
                                                    + w2 * s0[ow + 2])
                                else:
                                    for r in range(kw):
                                        src = P[a + r % sw, b, ci, it, j]
                                        k0 = r // sw
                                        wv = w[co, c, p, q, r]
                                        for ow in range(Wo):
                                            row[ow] += wv * src[k0 + ow]
                    for i in range(Wo):
                        out[b, co, ot, oh, i] = row[i]


@njit(fastmath=True, cache=True)
def conv3d_grad_input(gy, w, st, sh, sw, groups, gxP):
    """Accumulates the input gradient into parity planes ``gxP`` (pre-zeroed).

    Gather form: for each kernel row tap, the destination plane row takes
    shifted reads of the output-gradient row, so writes stay unit-stride
    and independent.
    """
    B, C = gxP.shape[1], gxP.shape[2]
    Cout, Cg, kt, kh, kw = w.shape
    To, Ho, Wo = gy.shape[2], gy.shape[3], gy.shape[4]
    cpg = Cout // groups
    fuse5 = sw == 2 and kw == 5 and Wo >= 2
    fuse3 = sw == 1 and kw == 3 and Wo >= 3
    jq, aq = _q_offsets(kh, sh, sw)
    # local copy of each gy row: reads then come from a buffer LLVM can
    # prove distinct from the write target, so the tap loops vectorize
    g = np.empty(Wo, np.float32)
    for b in range(B):
        for ci in range(C):
            c = ci % Cg
            co0 = (ci // Cg) * cpg
            for o in range(cpg):
                co = co0 + o
                for ot in range(To):
                    it0 = ot * st
                    for oh in range(Ho):
                        gsrc = gy[b, co, ot, oh]
                        for i in range(Wo):
                            g[i] = gsrc[i]
                        for p in range(kt):
                            it = it0 + p
                            for q in range(kh):
                                j = oh + jq[q]
                                a = aq[q]
                                if fuse5:
                                    de = gxP[a, b, ci, it, j]
                                    do = gxP[a + 1, b, ci, it, j]
                                    w0 = w[co, c, p, q, 0]
                                    w1 = w[co, c, p, q, 1]
                                    w2 = w[co, c, p, q, 2]
                                    w3 = w[co, c, p, q, 3]
                                    w4 = w[co, c, p, q, 4]
                                    de[0] += w0 * g[0]
                                    de[1] += w0 * g[1] + w2 * g[0]
                                    for k in range(2, Wo):
                                        de[k] += (w0 * g[k] + w2 * g[k - 1]
                                                  + w4 * g[k - 2])
                                    de[Wo] += w2 * g[Wo - 1] + w4 * g[Wo - 2]
                                    de[Wo + 1] += w4 * g[Wo - 1]
                                    do[0] += w1 * g[0]
                                    for k in range(1, Wo):
                                        do[k] += w1 * g[k] + w3 * g[k - 1]
                                    do[Wo] += w3 * g[Wo - 1]
                                elif fuse3:
                                    d0 = gxP[a, b, ci, it, j]
                                    w0 = w[co, c, p, q, 0]
                                    w1 = w[co, c, p, q, 1]
                                    w2 = w[co, c, p, q, 2]
                                    d0[0] += w0 * g[0]
                                    d0[1] += w0 * g[1] + w1 * g[0]
                                    for k in range(2, Wo):
                                        d0[k] += (w0 * g[k] + w1 * g[k - 1]
                                                  + w2 * g[k - 2])
                                    d0[Wo] += w1 * g[Wo - 1] + w2 * g[Wo - 2]
                                    d0[Wo + 1] += w2 * g[Wo - 1]
                                else:
                                    for r in range(kw):
                                        dst = gxP[a + r % sw, b, ci, it, j]
                                        k0 = r // sw
                                        wv = w[co, c, p, q, r]
                                        for ow in range(Wo):
                                            dst[k0 + ow] += wv * g[ow]


@njit(fastmath=True, cache=True)
def conv3d_grad_weight(P, gy, st, sh, sw, groups, gw):
    B = P.shape[1]
    Cout, Cg, kt, kh, kw = gw.shape
    To, Ho, Wo = gy.shape[2], gy.shape[3], gy.shape[4]
    cpg = Cout // groups
    fuse5 = sw == 2 and kw == 5
    fuse3 = sw == 1 and kw == 3
    jq, aq = _q_offsets(kh, sh, sw)
    for co in range(Cout):
        ci0 = (co // cpg) * Cg
        for c in range(Cg):
            ci = ci0 + c
            for p in range(kt):
                for q in range(kh):
                    dh = jq[q]
                    a = aq[q]
                    if fuse5:
                        a0 = 0.0
                        a1 = 0.0
                        a2 = 0.0
                        a3 = 0.0
                        a4 = 0.0
                        for b in range(B):
                            for ot in range(To):
                                it = ot * st + p
                                for oh in range(Ho):
                                    g = gy[b, co, ot, oh]
                                    se = P[a, b, ci, it, oh + dh]
                                    so = P[a + 1, b, ci, it, oh + dh]
                                    d0 = np.float32(0.0)
                                    d1 = np.float32(0.0)
                                    d2 = np.float32(0.0)
                                    d3 = np.float32(0.0)
                                    d4 = np.float32(0.0)
                                    for ow in range(Wo):
                                        gv = g[ow]
                                        d0 += gv * se[ow]
                                        d2 += gv * se[ow + 1]
                                        d4 += gv * se[ow + 2]
                                        d1 += gv * so[ow]
                                        d3 += gv * so[ow + 1]
                                    a0 += d0
                                    a1 += d1
                                    a2 += d2
                                    a3 += d3
                                    a4 += d4
                        gw[co, c, p, q, 0] = a0
                        gw[co, c, p, q, 1] = a1
                        gw[co, c, p, q, 2] = a2
                        gw[co, c, p, q, 3] = a3
                        gw[co, c, p, q, 4] = a4
                    elif fuse3:
                        a0 = 0.0
                        a1 = 0.0
                        a2 = 0.0
                        for b in range(B):
                            for ot in range(To):
                                it = ot * st + p
                                for oh in range(Ho):
                                    g = gy[b, co, ot, oh]
                                    s0 = P[a, b, ci, it, oh + dh]
                                    d0 = np.float32(0.0)
                                    d1 = np.float32(0.0)
                                    d2 = np.float32(0.0)
                                    for ow in range(Wo):
                                        gv = g[ow]
                                        d0 += gv * s0[ow]
                                        d1 += gv * s0[ow + 1]
                                        d2 += gv * s0[ow + 2]
                                    a0 += d0
                                    a1 += d1
                                    a2 += d2
                        gw[co, c, p, q, 0] = a0
                        gw[co, c, p, q, 1] = a1
                        gw[co, c, p, q, 2] = a2
                    else:
                        for r in range(kw):
                            s = a + r % sw
                            k0 = r // sw
                            acc = 0.0
                            for b in range(B):
                                for ot in range(To):
                                    it = ot * st + p
                                    for oh in range(Ho):
                                        g = gy[b, co, ot, oh]
                                        src = P[s, b, ci, it, oh + dh]
                                        d = np.float32(0.0)
                                        for ow in range(Wo):
                                            d += g[ow] * src[k0 + ow]
                                        acc += d
                            gw[co, c, p, q, r] = acc
