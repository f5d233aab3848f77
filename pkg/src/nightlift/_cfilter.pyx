# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled per-pixel filter kernels.

Layouts: image (H, W, C) channels-last, kernels (P, H, W) where
P = k*k (shared across channels) or k*k*C (per channel, channel-major).
Padding: 0 = replicate, 1 = zero. Loops run tap-major so every kernel
plane is streamed once, contiguously; sums accumulate in double.
"""
import numpy as np
cimport numpy as cnp


ctypedef fused real:
    float
    double


cdef inline Py_ssize_t _clip(Py_ssize_t v, Py_ssize_t hi) noexcept nogil:
    if v < 0:
        return 0
    if v > hi:
        return hi
    return v


def _check(image, kernels, k, per_channel, upstream=None):
    H, W, C = image.shape
    P = k * k * (C if per_channel else 1)
    if kernels.shape != (P, H, W):
        raise ValueError(f"kernels {kernels.shape} do not fit image {image.shape} with k={k}")
    if upstream is not None and upstream.shape != image.shape:
        raise ValueError("upstream gradient and image disagree in shape")


cdef void _columns(Py_ssize_t[::1] xs, Py_ssize_t W, Py_ssize_t dv, int padding) noexcept nogil:
    # source column for every output column; -1 marks a zero-padded tap
    cdef Py_ssize_t j, x
    for j in range(W):
        x = j + dv
        if padding == 1 and (x < 0 or x >= W):
            xs[j] = -1
        else:
            xs[j] = _clip(x, W - 1)


def filter_forward(real[:, :, ::1] image, real[:, :, ::1] kernels, int k, bint per_channel, int padding):
    _check(np.asarray(image), np.asarray(kernels), k, per_channel)
    cdef Py_ssize_t H = image.shape[0], W = image.shape[1], C = image.shape[2]
    cdef Py_ssize_t r = k // 2, kk = k * k
    cdef Py_ssize_t i, j, c, u, v, y, x, tap, c0, c1
    cdef double w
    cdef double[:, :, ::1] acc = np.zeros((H, W, C))
    cdef Py_ssize_t[::1] xs = np.empty(W, dtype=np.intp)

    with nogil:
        for u in range(k):
            for v in range(k):
                _columns(xs, W, v - r, padding)
                for i in range(H):
                    y = i + u - r
                    if padding == 1 and (y < 0 or y >= H):
                        continue
                    y = _clip(y, H - 1)
                    for j in range(W):
                        x = xs[j]
                        if x < 0:
                            continue
                        if per_channel:
                            for c in range(C):
                                acc[i, j, c] += kernels[c * kk + u * k + v, i, j] * image[y, x, c]
                        else:
                            w = kernels[u * k + v, i, j]
                            for c in range(C):
                                acc[i, j, c] += w * image[y, x, c]
    dtype = np.float32 if real is float else np.float64
    return np.asarray(acc).astype(dtype, copy=False)


def filter_backward(real[:, :, ::1] image, real[:, :, ::1] kernels,
                    real[:, :, ::1] upstream, int k, bint per_channel, int padding):
    """Return (grad_image, grad_kernels) for upstream dL/d(output)."""
    _check(np.asarray(image), np.asarray(kernels), k, per_channel, np.asarray(upstream))
    cdef Py_ssize_t H = image.shape[0], W = image.shape[1], C = image.shape[2]
    cdef Py_ssize_t P = kernels.shape[0]
    cdef Py_ssize_t r = k // 2, kk = k * k
    cdef Py_ssize_t i, j, c, u, v, y, x, p
    cdef double s, w
    dtype = np.float32 if real is float else np.float64
    cdef double[:, :, ::1] gi = np.zeros((H, W, C))
    gk_arr = np.zeros((P, H, W), dtype=dtype)
    cdef real[:, :, ::1] gk = gk_arr
    cdef Py_ssize_t[::1] xs = np.empty(W, dtype=np.intp)

    with nogil:
        for u in range(k):
            for v in range(k):
                _columns(xs, W, v - r, padding)
                for i in range(H):
                    y = i + u - r
                    if padding == 1 and (y < 0 or y >= H):
                        continue
                    y = _clip(y, H - 1)
                    for j in range(W):
                        x = xs[j]
                        if x < 0:
                            continue
                        if per_channel:
                            for c in range(C):
                                p = c * kk + u * k + v
                                gk[p, i, j] = <real>(upstream[i, j, c] * image[y, x, c])
                                gi[y, x, c] += upstream[i, j, c] * kernels[p, i, j]
                        else:
                            p = u * k + v
                            w = kernels[p, i, j]
                            s = 0.0
                            for c in range(C):
                                s += upstream[i, j, c] * image[y, x, c]
                                gi[y, x, c] += upstream[i, j, c] * w
                            gk[p, i, j] = <real>s
    return np.asarray(gi).astype(dtype, copy=False), gk_arr
