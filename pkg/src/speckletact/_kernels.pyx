# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled hot loops: phasor summation, 3x3 im2col/col2im, 2x2 max pooling,
batch normalization and ReLU.

Every function here has a numpy twin in ``_fallback`` with the same
signature and the same per-element accumulation order.
"""
import numpy as np

cimport numpy as cnp
from cython cimport floating
from libc.math cimport sqrt

cnp.import_array()

cdef extern from "phasor.h" nogil:
    void st_accumulate_phasors(const double *pxs, const double *pys, const double *pzs,
                               Py_ssize_t n, double qx, double qy, double qz, double d1,
                               double a, double nu, double dmin, double *re, double *im)


def render_intensity(pixels, source, points, amplitudes, double thickness, int order,
                     wavenumbers, double min_distance):
    soa = np.ascontiguousarray(np.asarray(pixels, dtype=np.float64).T)
    cdef const double[:, ::1] pix = soa
    cdef const double[:, ::1] pts = np.ascontiguousarray(points, dtype=np.float64)
    cdef const double[::1] amps = np.ascontiguousarray(amplitudes, dtype=np.float64)
    cdef const double[::1] nus = np.ascontiguousarray(wavenumbers, dtype=np.float64)
    cdef double sx = source[0], sy = source[1], sz = source[2]
    cdef Py_ssize_t n_pix = pix.shape[1]
    cdef Py_ssize_t m, k, q, p
    cdef double x, y, z, dx, dy, dz, d1
    out = np.zeros(n_pix, dtype=np.float64)
    re_arr = np.empty(n_pix, dtype=np.float64)
    im_arr = np.empty(n_pix, dtype=np.float64)
    cdef double[::1] intensity = out
    cdef double[::1] e_re = re_arr
    cdef double[::1] e_im = im_arr

    with nogil:
        for m in range(nus.shape[0]):
            for p in range(n_pix):
                e_re[p] = 0.0
                e_im[p] = 0.0
            for k in range(pts.shape[0]):
                x = pts[k, 0]
                y = pts[k, 1]
                z = pts[k, 2]
                dx = x - sx
                dy = y - sy
                dz = z - sz
                d1 = sqrt(dx * dx + dy * dy + dz * dz)
                if d1 < min_distance:
                    d1 = min_distance
                for q in range(order + 1):
                    st_accumulate_phasors(&pix[0, 0], &pix[1, 0], &pix[2, 0], n_pix,
                                          x, y, z if q == 0 else 2.0 * thickness - z,
                                          d1, amps[k], nus[m], min_distance,
                                          &e_re[0], &e_im[0])
            for p in range(n_pix):
                intensity[p] += e_re[p] * e_re[p] + e_im[p] * e_im[p]
        for p in range(n_pix):
            intensity[p] /= nus.shape[0]
    return out


def im2col3x3(floating[:, :, :, ::1] x):
    """(N, C, H, W) -> (N, C*9, H*W) with zero padding 1, row order (c, i, j)."""
    cdef Py_ssize_t N = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3]
    cdef Py_ssize_t n, c, h, i, j, w, w0, w1, h0, h1, row
    cdef const floating *src
    cdef floating *dst
    dtype = np.float32 if floating is float else np.float64
    cols_arr = np.zeros((N, C * 9, H * W), dtype=dtype)
    cdef floating[:, :, ::1] cols = cols_arr
    with nogil:
        for n in range(N):
            for c in range(C):
                for i in range(3):
                    h0 = 1 - i if i < 1 else 0
                    h1 = H + 1 - i if i > 1 else H
                    for j in range(3):
                        w0 = 1 - j if j < 1 else 0
                        w1 = W + 1 - j if j > 1 else W
                        row = c * 9 + i * 3 + j
                        for h in range(h0, h1):
                            src = &x[n, c, h + i - 1, 0]
                            dst = &cols[n, row, h * W]
                            for w in range(w0, w1):
                                dst[w] = src[w + j - 1]
    return cols_arr


def col2im3x3(floating[:, :, ::1] cols, Py_ssize_t N, Py_ssize_t C, Py_ssize_t H, Py_ssize_t W):
    """Adjoint of :func:`im2col3x3`; taps are accumulated in (i, j) order."""
    cdef Py_ssize_t n, c, h, i, j, w, w0, w1, h0, h1, row
    cdef const floating *src
    cdef floating *dst
    dtype = np.float32 if floating is float else np.float64
    out = np.zeros((N, C, H, W), dtype=dtype)
    cdef floating[:, :, :, ::1] dx = out
    with nogil:
        for n in range(N):
            for c in range(C):
                for i in range(3):
                    h0 = 1 - i if i < 1 else 0
                    h1 = H + 1 - i if i > 1 else H
                    for j in range(3):
                        w0 = 1 - j if j < 1 else 0
                        w1 = W + 1 - j if j > 1 else W
                        row = c * 9 + i * 3 + j
                        for h in range(h0, h1):
                            src = &cols[n, row, h * W]
                            dst = &dx[n, c, h + i - 1, 0]
                            for w in range(w0, w1):
                                dst[w + j - 1] += src[w]
    return out


def maxpool2x2_forward(floating[:, :, :, ::1] x):
    cdef Py_ssize_t N = x.shape[0], C = x.shape[1], H = x.shape[2] // 2, W = x.shape[3] // 2
    cdef Py_ssize_t n, c, h, w, best
    cdef floating v, top
    dtype = np.float32 if floating is float else np.float64
    y_arr = np.empty((N, C, H, W), dtype=dtype)
    idx_arr = np.empty((N, C, H, W), dtype=np.int8)
    cdef floating[:, :, :, ::1] y = y_arr
    cdef cnp.int8_t[:, :, :, ::1] idx = idx_arr
    with nogil:
        for n in range(N):
            for c in range(C):
                for h in range(H):
                    for w in range(W):
                        # strict '>' keeps the first row-major maximum on ties
                        top = x[n, c, 2 * h, 2 * w]
                        best = 0
                        v = x[n, c, 2 * h, 2 * w + 1]
                        if v > top:
                            top = v
                            best = 1
                        v = x[n, c, 2 * h + 1, 2 * w]
                        if v > top:
                            top = v
                            best = 2
                        v = x[n, c, 2 * h + 1, 2 * w + 1]
                        if v > top:
                            top = v
                            best = 3
                        y[n, c, h, w] = top
                        idx[n, c, h, w] = <cnp.int8_t>best
    return y_arr, idx_arr


def maxpool2x2_backward(floating[:, :, :, ::1] dy, const cnp.int8_t[:, :, :, ::1] idx):
    cdef Py_ssize_t N = dy.shape[0], C = dy.shape[1], H = dy.shape[2], W = dy.shape[3]
    cdef Py_ssize_t n, c, h, w, b
    dtype = np.float32 if floating is float else np.float64
    out = np.zeros((N, C, 2 * H, 2 * W), dtype=dtype)
    cdef floating[:, :, :, ::1] dx = out
    with nogil:
        for n in range(N):
            for c in range(C):
                for h in range(H):
                    for w in range(W):
                        b = idx[n, c, h, w]
                        dx[n, c, 2 * h + b // 2, 2 * w + b % 2] = dy[n, c, h, w]
    return out


cdef inline double _sum8(const floating *v, Py_ssize_t n, double shift) noexcept nogil:
    # eight interleaved partial sums in a fixed order: vectorizable and deterministic
    cdef double acc[8]
    cdef Py_ssize_t p, l
    for l in range(8):
        acc[l] = 0.0
    for p in range(0, n - n % 8, 8):
        for l in range(8):
            acc[l] += v[p + l] - shift
    for p in range(n - n % 8, n):
        acc[0] += v[p] - shift
    return ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7]))


cdef inline double _sumsq8(const floating *v, Py_ssize_t n, double shift) noexcept nogil:
    cdef double acc[8]
    cdef double d
    cdef Py_ssize_t p, l
    for l in range(8):
        acc[l] = 0.0
    for p in range(0, n - n % 8, 8):
        for l in range(8):
            d = v[p + l] - shift
            acc[l] += d * d
    for p in range(n - n % 8, n):
        d = v[p] - shift
        acc[0] += d * d
    return ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7]))


cdef inline void _dot8(const floating *a, const floating *b, Py_ssize_t n,
                       double *sa, double *sab) noexcept nogil:
    cdef double acc[8]
    cdef double accp[8]
    cdef Py_ssize_t p, l
    for l in range(8):
        acc[l] = 0.0
        accp[l] = 0.0
    for p in range(0, n - n % 8, 8):
        for l in range(8):
            acc[l] += a[p + l]
            accp[l] += <double>a[p + l] * b[p + l]
    for p in range(n - n % 8, n):
        acc[0] += a[p]
        accp[0] += <double>a[p] * b[p]
    sa[0] += ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7]))
    sab[0] += ((accp[0] + accp[1]) + (accp[2] + accp[3])) + ((accp[4] + accp[5]) + (accp[6] + accp[7]))


def channel_moments(floating[:, :, :, ::1] x):
    """Per-channel mean and biased variance over (N, H, W), two passes in double."""
    cdef Py_ssize_t N = x.shape[0], C = x.shape[1], HW = x.shape[2] * x.shape[3]
    cdef Py_ssize_t n, c
    cdef double s
    mean_arr = np.zeros(C, dtype=np.float64)
    var_arr = np.zeros(C, dtype=np.float64)
    cdef double[::1] mean = mean_arr
    cdef double[::1] var = var_arr
    with nogil:
        for c in range(C):
            s = 0.0
            for n in range(N):
                s += _sum8(&x[n, c, 0, 0], HW, 0.0)
            mean[c] = s / (N * HW)
            s = 0.0
            for n in range(N):
                s += _sumsq8(&x[n, c, 0, 0], HW, mean[c])
            var[c] = s / (N * HW)
    return mean_arr, var_arr


def bn_apply(floating[:, :, :, ::1] x, floating[::1] mean, floating[::1] inv_std,
             floating[::1] gamma, floating[::1] beta):
    """xhat = (x - mean) * inv_std and y = gamma * xhat + beta in one pass."""
    cdef Py_ssize_t N = x.shape[0], C = x.shape[1], HW = x.shape[2] * x.shape[3]
    cdef Py_ssize_t n, c, p
    cdef floating m, s, g, b, v
    cdef floating *xh
    cdef floating *yy
    cdef const floating *xx
    dtype = np.float32 if floating is float else np.float64
    xhat_arr = np.empty((x.shape[0], x.shape[1], x.shape[2], x.shape[3]), dtype=dtype)
    y_arr = np.empty_like(xhat_arr)
    cdef floating[:, :, :, ::1] xhat = xhat_arr
    cdef floating[:, :, :, ::1] y = y_arr
    with nogil:
        for n in range(N):
            for c in range(C):
                m = mean[c]
                s = inv_std[c]
                g = gamma[c]
                b = beta[c]
                xx = &x[n, c, 0, 0]
                xh = &xhat[n, c, 0, 0]
                yy = &y[n, c, 0, 0]
                for p in range(HW):
                    v = (xx[p] - m) * s
                    xh[p] = v
                    yy[p] = g * v + b
    return xhat_arr, y_arr


def bn_backward(floating[:, :, :, ::1] dy, floating[:, :, :, ::1] xhat, floating[::1] gamma,
                floating[::1] inv_std, bint train):
    """Returns (dx, dgamma, dbeta) for batch normalization over (N, H, W)."""
    cdef Py_ssize_t N = dy.shape[0], C = dy.shape[1], HW = dy.shape[2] * dy.shape[3]
    cdef Py_ssize_t n, c, p
    cdef double sd, sdx
    cdef floating k, a, b
    cdef const floating *d
    cdef const floating *xh
    cdef floating *o
    cdef double count = N * HW
    dtype = np.float32 if floating is float else np.float64
    dx_arr = np.empty((dy.shape[0], dy.shape[1], dy.shape[2], dy.shape[3]), dtype=dtype)
    dg_arr = np.empty(C, dtype=dtype)
    db_arr = np.empty(C, dtype=dtype)
    cdef floating[:, :, :, ::1] dx = dx_arr
    cdef floating[::1] dg = dg_arr
    cdef floating[::1] db = db_arr
    with nogil:
        for c in range(C):
            sd = 0.0
            sdx = 0.0
            for n in range(N):
                _dot8(&dy[n, c, 0, 0], &xhat[n, c, 0, 0], HW, &sd, &sdx)
            dg[c] = <floating>sdx
            db[c] = <floating>sd
            k = gamma[c] * inv_std[c]
            # train: dx = k * (dy - mean(dy) - xhat * mean(dy * xhat)); eval: dx = k * dy
            a = <floating>(sd / count) if train else 0
            b = <floating>(sdx / count) if train else 0
            for n in range(N):
                d = &dy[n, c, 0, 0]
                xh = &xhat[n, c, 0, 0]
                o = &dx[n, c, 0, 0]
                for p in range(HW):
                    o[p] = k * (d[p] - a - xh[p] * b)
    return dx_arr, dg_arr, db_arr


def relu_forward(floating[::1] x):
    cdef Py_ssize_t i, n = x.shape[0]
    dtype = np.float32 if floating is float else np.float64
    out = np.empty(n, dtype=dtype)
    cdef floating[::1] y = out
    with nogil:
        for i in range(n):
            y[i] = 0 if x[i] <= 0 else x[i]  # NaN passes through
    return out


def relu_backward(floating[::1] dy, floating[::1] y):
    """Gradient through ReLU given its output (positive output = open gate)."""
    cdef Py_ssize_t i, n = dy.shape[0]
    dtype = np.float32 if floating is float else np.float64
    out = np.empty(n, dtype=dtype)
    cdef floating[::1] dx = out
    with nogil:
        for i in range(n):
            dx[i] = 0 if y[i] <= 0 else dy[i]
    return out
