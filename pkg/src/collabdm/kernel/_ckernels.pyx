# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled kernels: SplitMix64 fill, Box-Muller, and direct convolution.

Same signatures and results as ``_pykernels``. The RNG kernels are
bit-identical to the fallback; the convolution kernels agree to rounding
(accumulation order differs from the BLAS path).
"""
import numpy as np
cimport numpy as cnp
from cython cimport floating
from libc.math cimport log, sqrt, cos, sin
from libc.stdint cimport uint64_t

cnp.import_array()

cdef uint64_t GOLDEN = 0x9E3779B97F4A7C15ULL
cdef double TWO_PI = 6.283185307179586
cdef double INV_2_53 = 1.0 / 9007199254740992.0


cdef inline uint64_t _mix64(uint64_t z) noexcept nogil:
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL
    return z ^ (z >> 31)


def splitmix_fill(uint64_t key, uint64_t counter, Py_ssize_t n):
    out = np.empty(n, dtype=np.uint64)
    cdef uint64_t[::1] o = out
    cdef Py_ssize_t i
    with nogil:
        for i in range(n):
            o[i] = _mix64(key + (counter + <uint64_t>i + 1) * GOLDEN)
    return out


def box_muller(const uint64_t[::1] bits, Py_ssize_t n):
    out = np.empty(n, dtype=np.float64)
    cdef double[::1] o = out
    cdef Py_ssize_t i
    cdef double u1, u2, r
    with nogil:
        for i in range(0, n, 2):
            u1 = 1.0 - <double>(bits[i] >> 11) * INV_2_53
            u2 = <double>(bits[i + 1] >> 11) * INV_2_53
            r = sqrt(-2.0 * log(u1))
            o[i] = r * cos(TWO_PI * u2)
            if i + 1 < n:
                o[i + 1] = r * sin(TWO_PI * u2)
    return out


cdef inline Py_ssize_t _lo(Py_ssize_t off, Py_ssize_t stride) noexcept nogil:
    # smallest o >= 0 with o*stride + off >= 0
    if off >= 0:
        return 0
    return (-off + stride - 1) // stride


cdef inline Py_ssize_t _hi(Py_ssize_t off, Py_ssize_t stride, Py_ssize_t size,
                           Py_ssize_t count) noexcept nogil:
    # one past the largest o < count with o*stride + off < size
    cdef Py_ssize_t top = size - 1 - off
    if top < 0:
        return 0
    top = top // stride + 1
    return top if top < count else count


cdef void _conv_fwd(const floating[:, :, :, ::1] x, const floating[:, :, :, ::1] w,
                    floating[:, :, :, ::1] out, Py_ssize_t stride,
                    Py_ssize_t pad) noexcept nogil:
    cdef Py_ssize_t N = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3]
    cdef Py_ssize_t O = w.shape[0], K = w.shape[2]
    cdef Py_ssize_t Ho = out.shape[2], Wo = out.shape[3]
    cdef Py_ssize_t n, o, c, ky, kx, oy, ox, oy0, oy1, ox0, ox1, iy, offx
    cdef floating wv
    for n in range(N):
        for o in range(O):
            for c in range(C):
                for ky in range(K):
                    oy0 = _lo(ky - pad, stride)
                    oy1 = _hi(ky - pad, stride, H, Ho)
                    for kx in range(K):
                        wv = w[o, c, ky, kx]
                        offx = kx - pad
                        ox0 = _lo(offx, stride)
                        ox1 = _hi(offx, stride, W, Wo)
                        for oy in range(oy0, oy1):
                            iy = oy * stride + ky - pad
                            for ox in range(ox0, ox1):
                                out[n, o, oy, ox] += wv * x[n, c, iy, ox * stride + offx]


cdef void _conv_bwd_in(const floating[:, :, :, ::1] g, const floating[:, :, :, ::1] w,
                       floating[:, :, :, ::1] dx, Py_ssize_t stride,
                       Py_ssize_t pad) noexcept nogil:
    cdef Py_ssize_t N = g.shape[0], O = g.shape[1], Ho = g.shape[2], Wo = g.shape[3]
    cdef Py_ssize_t C = w.shape[1], K = w.shape[2], H = dx.shape[2], W = dx.shape[3]
    cdef Py_ssize_t n, o, c, ky, kx, oy, ox, oy0, oy1, ox0, ox1, iy, offx
    cdef floating wv
    for n in range(N):
        for o in range(O):
            for c in range(C):
                for ky in range(K):
                    oy0 = _lo(ky - pad, stride)
                    oy1 = _hi(ky - pad, stride, H, Ho)
                    for kx in range(K):
                        wv = w[o, c, ky, kx]
                        offx = kx - pad
                        ox0 = _lo(offx, stride)
                        ox1 = _hi(offx, stride, W, Wo)
                        for oy in range(oy0, oy1):
                            iy = oy * stride + ky - pad
                            for ox in range(ox0, ox1):
                                dx[n, c, iy, ox * stride + offx] += wv * g[n, o, oy, ox]


cdef void _conv_bwd_w(const floating[:, :, :, ::1] x, const floating[:, :, :, ::1] g,
                      floating[:, :, :, ::1] dw, Py_ssize_t stride,
                      Py_ssize_t pad) noexcept nogil:
    cdef Py_ssize_t N = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3]
    cdef Py_ssize_t O = g.shape[1], Ho = g.shape[2], Wo = g.shape[3], K = dw.shape[2]
    cdef Py_ssize_t n, o, c, ky, kx, oy, ox, oy0, oy1, ox0, ox1, iy, offx
    cdef double acc
    for o in range(O):
        for c in range(C):
            for ky in range(K):
                oy0 = _lo(ky - pad, stride)
                oy1 = _hi(ky - pad, stride, H, Ho)
                for kx in range(K):
                    offx = kx - pad
                    ox0 = _lo(offx, stride)
                    ox1 = _hi(offx, stride, W, Wo)
                    acc = 0.0
                    for n in range(N):
                        for oy in range(oy0, oy1):
                            iy = oy * stride + ky - pad
                            for ox in range(ox0, ox1):
                                acc += g[n, o, oy, ox] * x[n, c, iy, ox * stride + offx]
                    dw[o, c, ky, kx] = <floating>acc


# Stride-1 fast path. Planes are zero-padded to (Hp, Wp) and flattened; the
# output is computed on a "wide" grid of width Wp whose last Wp - Wo columns
# are junk (forward) or zero (backward), so every (c, ky, kx) tap becomes one
# contiguous axpy/dot of length L = Ho * Wp.

cdef void _wide_fwd(const floating[:, :, ::1] xp, const floating[:, :, :, ::1] w,
                    floating[:, :, ::1] out, Py_ssize_t Wp) noexcept nogil:
    cdef Py_ssize_t N = xp.shape[0], C = xp.shape[1], L = out.shape[2]
    cdef Py_ssize_t O = w.shape[0], K = w.shape[2]
    cdef Py_ssize_t n, o, c, ky, kx, i
    cdef floating wv, acc
    cdef floating w0, w1, w2, w3, w4, w5, w6, w7, w8
    cdef floating *op
    cdef const floating *x0
    cdef const floating *x1
    cdef const floating *x2
    cdef const floating *xq
    for n in range(N):
        for o in range(O):
            op = &out[n, o, 0]
            for c in range(C):
                if K == 3:
                    # all nine taps in one pass: one load/store of out per 9 FMAs
                    w0 = w[o, c, 0, 0]; w1 = w[o, c, 0, 1]; w2 = w[o, c, 0, 2]
                    w3 = w[o, c, 1, 0]; w4 = w[o, c, 1, 1]; w5 = w[o, c, 1, 2]
                    w6 = w[o, c, 2, 0]; w7 = w[o, c, 2, 1]; w8 = w[o, c, 2, 2]
                    x0 = &xp[n, c, 0]
                    x1 = &xp[n, c, Wp]
                    x2 = &xp[n, c, 2 * Wp]
                    for i in range(L):
                        acc = op[i]
                        acc = acc + w0 * x0[i]
                        acc = acc + w1 * x0[i + 1]
                        acc = acc + w2 * x0[i + 2]
                        acc = acc + w3 * x1[i]
                        acc = acc + w4 * x1[i + 1]
                        acc = acc + w5 * x1[i + 2]
                        acc = acc + w6 * x2[i]
                        acc = acc + w7 * x2[i + 1]
                        acc = acc + w8 * x2[i + 2]
                        op[i] = acc
                else:
                    for ky in range(K):
                        for kx in range(K):
                            wv = w[o, c, ky, kx]
                            xq = &xp[n, c, ky * Wp + kx]
                            for i in range(L):
                                op[i] += wv * xq[i]


cdef inline double _dot8(const floating *a, const floating *b, Py_ssize_t L) noexcept nogil:
    # fixed 8-lane partial sums: vectorizable and still deterministic
    cdef floating s0 = 0, s1 = 0, s2 = 0, s3 = 0, s4 = 0, s5 = 0, s6 = 0, s7 = 0
    cdef Py_ssize_t i = 0, m = L - L % 8
    while i < m:
        s0 = s0 + a[i] * b[i]
        s1 = s1 + a[i + 1] * b[i + 1]
        s2 = s2 + a[i + 2] * b[i + 2]
        s3 = s3 + a[i + 3] * b[i + 3]
        s4 = s4 + a[i + 4] * b[i + 4]
        s5 = s5 + a[i + 5] * b[i + 5]
        s6 = s6 + a[i + 6] * b[i + 6]
        s7 = s7 + a[i + 7] * b[i + 7]
        i += 8
    cdef double tail = 0.0
    while i < L:
        tail += a[i] * b[i]
        i += 1
    return ((<double>s0 + s1) + (<double>s2 + s3)) + ((<double>s4 + s5) + (<double>s6 + s7)) + tail


cdef void _wide_bwd_w(const floating[:, :, ::1] xp, const floating[:, :, ::1] gw,
                      floating[:, :, :, ::1] dw, Py_ssize_t Wp) noexcept nogil:
    cdef Py_ssize_t N = xp.shape[0], C = xp.shape[1], O = gw.shape[1], L = gw.shape[2]
    cdef Py_ssize_t K = dw.shape[2]
    cdef Py_ssize_t n, o, c, ky, kx
    cdef double total
    for o in range(O):
        for c in range(C):
            for ky in range(K):
                for kx in range(K):
                    total = 0.0
                    for n in range(N):
                        total += _dot8(&gw[n, o, 0], &xp[n, c, ky * Wp + kx], L)
                    dw[o, c, ky, kx] = <floating>total


cdef _wfwd_f(xp, w, out, Py_ssize_t Wp):
    cdef const float[:, :, ::1] xv = xp
    cdef const float[:, :, :, ::1] wv = w
    cdef float[:, :, ::1] ov = out
    with nogil:
        _wide_fwd(xv, wv, ov, Wp)


cdef _wfwd_d(xp, w, out, Py_ssize_t Wp):
    cdef const double[:, :, ::1] xv = xp
    cdef const double[:, :, :, ::1] wv = w
    cdef double[:, :, ::1] ov = out
    with nogil:
        _wide_fwd(xv, wv, ov, Wp)


cdef _wbw_f(xp, gw, dw, Py_ssize_t Wp):
    cdef const float[:, :, ::1] xv = xp
    cdef const float[:, :, ::1] gv = gw
    cdef float[:, :, :, ::1] dv = dw
    with nogil:
        _wide_bwd_w(xv, gv, dv, Wp)


cdef _wbw_d(xp, gw, dw, Py_ssize_t Wp):
    cdef const double[:, :, ::1] xv = xp
    cdef const double[:, :, ::1] gv = gw
    cdef double[:, :, :, ::1] dv = dw
    with nogil:
        _wide_bwd_w(xv, gv, dv, Wp)


def _padded_flat(x, Py_ssize_t pad, Py_ssize_t k):
    # one extra zero row keeps the last tap's L-length window in bounds
    n, c, h, wd = x.shape
    xp = np.zeros((n, c, h + 2 * pad + 1, wd + 2 * pad), dtype=x.dtype)
    xp[:, :, pad:pad + h, pad:pad + wd] = x
    return xp.reshape(n, c, -1), wd + 2 * pad


cdef _fwd_f(x, w, out, Py_ssize_t stride, Py_ssize_t pad):
    cdef const float[:, :, :, ::1] xv = x
    cdef const float[:, :, :, ::1] wv = w
    cdef float[:, :, :, ::1] ov = out
    with nogil:
        _conv_fwd(xv, wv, ov, stride, pad)


cdef _fwd_d(x, w, out, Py_ssize_t stride, Py_ssize_t pad):
    cdef const double[:, :, :, ::1] xv = x
    cdef const double[:, :, :, ::1] wv = w
    cdef double[:, :, :, ::1] ov = out
    with nogil:
        _conv_fwd(xv, wv, ov, stride, pad)


cdef _bin_f(g, w, dx, Py_ssize_t stride, Py_ssize_t pad):
    cdef const float[:, :, :, ::1] gv = g
    cdef const float[:, :, :, ::1] wv = w
    cdef float[:, :, :, ::1] dv = dx
    with nogil:
        _conv_bwd_in(gv, wv, dv, stride, pad)


cdef _bin_d(g, w, dx, Py_ssize_t stride, Py_ssize_t pad):
    cdef const double[:, :, :, ::1] gv = g
    cdef const double[:, :, :, ::1] wv = w
    cdef double[:, :, :, ::1] dv = dx
    with nogil:
        _conv_bwd_in(gv, wv, dv, stride, pad)


cdef _bw_f(x, g, dw, Py_ssize_t stride, Py_ssize_t pad):
    cdef const float[:, :, :, ::1] xv = x
    cdef const float[:, :, :, ::1] gv = g
    cdef float[:, :, :, ::1] dv = dw
    with nogil:
        _conv_bwd_w(xv, gv, dv, stride, pad)


cdef _bw_d(x, g, dw, Py_ssize_t stride, Py_ssize_t pad):
    cdef const double[:, :, :, ::1] xv = x
    cdef const double[:, :, :, ::1] gv = g
    cdef double[:, :, :, ::1] dv = dw
    with nogil:
        _conv_bwd_w(xv, gv, dv, stride, pad)


def conv2d_forward(x, w, Py_ssize_t stride, Py_ssize_t pad):
    n, _, h, wd = x.shape
    k = w.shape[2]
    if stride == 1:
        xp, Wp = _padded_flat(x, pad, k)
        ho, wo = h + 2 * pad - k + 1, wd + 2 * pad - k + 1
        out = np.zeros((n, w.shape[0], ho * Wp), dtype=x.dtype)
        if x.dtype == np.float32:
            _wfwd_f(xp, w, out, Wp)
        else:
            _wfwd_d(xp, w, out, Wp)
        return np.ascontiguousarray(out.reshape(n, -1, ho, Wp)[:, :, :, :wo])
    out = np.zeros((n, w.shape[0], (h + 2 * pad - k) // stride + 1,
                    (wd + 2 * pad - k) // stride + 1), dtype=x.dtype)
    if x.dtype == np.float32:
        _fwd_f(x, w, out, stride, pad)
    else:
        _fwd_d(x, w, out, stride, pad)
    return out


def conv2d_backward_input(g, w, Py_ssize_t height, Py_ssize_t width,
                          Py_ssize_t stride, Py_ssize_t pad):
    if stride == 1:
        # adjoint of a stride-1 correlation = correlation of the upstream
        # gradient, padded by k - 1 - pad, with the flipped, transposed kernel
        k = w.shape[2]
        wt = np.ascontiguousarray(w[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
        q = k - 1 - pad
        if q >= 0:
            return conv2d_forward(g, wt, 1, q)
        full = conv2d_forward(g, wt, 1, 0)
        return np.ascontiguousarray(full[:, :, -q:-q + height, -q:-q + width])
    dx = np.zeros((g.shape[0], w.shape[1], height, width), dtype=g.dtype)
    if g.dtype == np.float32:
        _bin_f(g, w, dx, stride, pad)
    else:
        _bin_d(g, w, dx, stride, pad)
    return dx


def conv2d_backward_weight(x, g, Py_ssize_t k, Py_ssize_t stride, Py_ssize_t pad):
    if stride == 1:
        n, o, ho, wo = g.shape
        xp, Wp = _padded_flat(x, pad, k)
        gw = np.zeros((n, o, ho, Wp), dtype=x.dtype)
        gw[:, :, :, :wo] = g
        dw = np.zeros((o, x.shape[1], k, k), dtype=x.dtype)
        if x.dtype == np.float32:
            _wbw_f(xp, gw.reshape(n, o, -1), dw, Wp)
        else:
            _wbw_d(xp, gw.reshape(n, o, -1), dw, Wp)
        return dw
    dw = np.zeros((g.shape[1], x.shape[1], k, k), dtype=x.dtype)
    if x.dtype == np.float32:
        _bw_f(x, g, dw, stride, pad)
    else:
        _bw_d(x, g, dw, stride, pad)
    return dw
