"""Pure numpy implementations of the compiled kernels in ``_kernels.pyx``.

Signatures and per-pixel accumulation order match the compiled versions so
either backend can stand in for the other.
"""
import numpy as np

TWO_PI = 6.283185307179586
_SIN = (-0.16666666666666666, 0.008333333333333333, -0.0001984126984126984,
        2.7557319223985893e-06, -2.505210838544172e-08, 1.6059043836821613e-10,
        -7.647163731819816e-13)
_COS = (-0.5, 0.041666666666666664, -0.001388888888888889, 2.48015873015873e-05,
        -2.755731922398589e-07, 2.08767569878681e-09, -1.1470745597729725e-11,
        4.779477332387385e-14)


def _horner(z, coeffs):
    acc = coeffs[-1]
    for c in coeffs[-2::-1]:
        acc = c + z * acc
    return 1.0 + z * acc


def _accumulate_phasors(px, py, pz, qx, qy, qz, d1, a, nu, dmin, re, im):
    # operation-for-operation copy of st_accumulate_phasors in phasor.h
    dx = px - qx
    dy = py - qy
    dz = pz - qz
    d2 = np.sqrt(dx * dx + dy * dy + dz * dz)
    np.maximum(d2, dmin, out=d2)
    amp = a / (d1 * d2)
    cyc = nu * (d1 + d2)
    t = cyc - np.floor(cyc)
    quad = np.floor(4.0 * t + 0.5)
    th = TWO_PI * (t - 0.25 * quad)
    z = th * th
    s = th * _horner(z, _SIN)
    c = _horner(z, _COS)
    q4 = quad - 4.0 * np.floor(0.25 * quad)
    cr = np.select([q4 == 0.0, q4 == 1.0, q4 == 2.0], [c, -s, -c], s)
    sr = np.select([q4 == 0.0, q4 == 1.0, q4 == 2.0], [s, c, -s], -c)
    re += amp * cr
    im += amp * sr


def render_intensity(pixels, source, points, amplitudes, thickness, order,
                     wavenumbers, min_distance):
    pixels = np.asarray(pixels, dtype=np.float64)
    px, py, pz = (np.ascontiguousarray(pixels[:, i]) for i in range(3))
    sx, sy, sz = (float(v) for v in source)
    intensity = np.zeros(len(pixels))
    e_re = np.empty(len(pixels))
    e_im = np.empty(len(pixels))
    for nu in wavenumbers:
        e_re[:] = 0.0
        e_im[:] = 0.0
        for k in range(len(points)):
            x, y, z = (float(v) for v in points[k])
            dx, dy, dz = x - sx, y - sy, z - sz
            d1 = max(float(np.sqrt(dx * dx + dy * dy + dz * dz)), min_distance)
            for q in range(order + 1):
                qz = z if q == 0 else 2.0 * thickness - z
                _accumulate_phasors(px, py, pz, x, y, qz, d1, float(amplitudes[k]),
                                    float(nu), min_distance, e_re, e_im)
        intensity += e_re * e_re + e_im * e_im
    intensity /= len(wavenumbers)
    return intensity


def im2col3x3(x):
    n, c, h, w = x.shape
    padded = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    cols = np.empty((n, c, 3, 3, h, w), dtype=x.dtype)
    for i in range(3):
        for j in range(3):
            cols[:, :, i, j] = padded[:, :, i:i + h, j:j + w]
    return cols.reshape(n, c * 9, h * w)


def col2im3x3(cols, n, c, h, w):
    taps = cols.reshape(n, c, 3, 3, h, w)
    padded = np.zeros((n, c, h + 2, w + 2), dtype=cols.dtype)
    for i in range(3):
        for j in range(3):
            padded[:, :, i:i + h, j:j + w] += taps[:, :, i, j]
    return np.ascontiguousarray(padded[:, :, 1:h + 1, 1:w + 1])


def maxpool2x2_forward(x):
    n, c, h, w = x.shape
    blocks = x.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5)
    blocks = blocks.reshape(n, c, h // 2, w // 2, 4)
    # argmax returns the first maximum, i.e. row-major tie-breaking
    idx = blocks.argmax(axis=-1).astype(np.int8)
    y = np.take_along_axis(blocks, idx[..., None].astype(np.intp), axis=-1)[..., 0]
    return np.ascontiguousarray(y), idx


def maxpool2x2_backward(dy, idx):
    n, c, h, w = dy.shape
    onehot = np.zeros((n, c, h, w, 4), dtype=dy.dtype)
    np.put_along_axis(onehot, idx[..., None].astype(np.intp), dy[..., None], axis=-1)
    dx = onehot.reshape(n, c, h, w, 2, 2).transpose(0, 1, 2, 4, 3, 5)
    return np.ascontiguousarray(dx.reshape(n, c, 2 * h, 2 * w))


def channel_moments(x):
    xd = x.astype(np.float64)
    mean = xd.mean(axis=(0, 2, 3))
    var = ((xd - mean[None, :, None, None]) ** 2).mean(axis=(0, 2, 3))
    return mean, var


def bn_apply(x, mean, inv_std, gamma, beta):
    xhat = (x - mean[None, :, None, None]) * inv_std[None, :, None, None]
    return xhat, gamma[None, :, None, None] * xhat + beta[None, :, None, None]


def bn_backward(dy, xhat, gamma, inv_std, train):
    sd = dy.sum(axis=(0, 2, 3), dtype=np.float64)
    sdx = (dy * xhat).sum(axis=(0, 2, 3), dtype=np.float64)
    count = dy.shape[0] * dy.shape[2] * dy.shape[3]
    k = (gamma * inv_std)[None, :, None, None]
    if train:
        a = (sd / count).astype(dy.dtype)[None, :, None, None]
        b = (sdx / count).astype(dy.dtype)[None, :, None, None]
        dx = k * (dy - a - xhat * b)
    else:
        dx = k * dy
    return dx, sdx.astype(dy.dtype), sd.astype(dy.dtype)


def relu_forward(x):
    return np.where(x <= 0, 0, x).astype(x.dtype)  # NaN passes through


def relu_backward(dy, y):
    return np.where(y <= 0, 0, dy).astype(dy.dtype)
