"""Pure numpy per-pixel filter, used when the compiled core is unavailable.

Same signatures and layouts as ``nightlift._cfilter``.
"""
import numpy as np


def _pad(image, r, padding):
    mode = "edge" if padding == 0 else "constant"
    return np.pad(image, ((r, r), (r, r), (0, 0)), mode=mode)


def filter_forward(image, kernels, k, per_channel, padding):
    H, W, C = image.shape
    r = k // 2
    kk = k * k
    padded = _pad(image, r, padding)
    out = np.zeros((H, W, C), dtype=image.dtype)
    for u in range(k):
        for v in range(k):
            window = padded[u:u + H, v:v + W, :]
            p = u * k + v
            if per_channel:
                weights = kernels[p::kk][:C].transpose(1, 2, 0)
            else:
                weights = kernels[p][:, :, None]
            out += weights * window
    return out


def filter_backward(image, kernels, upstream, k, per_channel, padding):
    H, W, C = image.shape
    r = k // 2
    kk = k * k
    padded = _pad(image, r, padding)
    grad_padded = np.zeros_like(padded)
    grad_kernels = np.zeros_like(kernels)
    for u in range(k):
        for v in range(k):
            window = padded[u:u + H, v:v + W, :]
            p = u * k + v
            if per_channel:
                for c in range(C):
                    grad_kernels[c * kk + p] = upstream[:, :, c] * window[:, :, c]
                weights = kernels[p::kk][:C].transpose(1, 2, 0)
            else:
                grad_kernels[p] = (upstream * window).sum(axis=2)
                weights = kernels[p][:, :, None]
            grad_padded[u:u + H, v:v + W, :] += weights * upstream

    if r == 0:
        return grad_padded, grad_kernels
    grad_image = grad_padded[r:-r, r:-r, :].copy()
    if padding == 0:
        # replicate padding routes border gradient back to the edge pixels
        grad_image[0, :, :] += grad_padded[:r, r:-r, :].sum(axis=0)
        grad_image[-1, :, :] += grad_padded[-r:, r:-r, :].sum(axis=0)
        grad_image[:, 0, :] += grad_padded[r:-r, :r, :].sum(axis=1)
        grad_image[:, -1, :] += grad_padded[r:-r, -r:, :].sum(axis=1)
        grad_image[0, 0, :] += grad_padded[:r, :r, :].sum(axis=(0, 1))
        grad_image[0, -1, :] += grad_padded[:r, -r:, :].sum(axis=(0, 1))
        grad_image[-1, 0, :] += grad_padded[-r:, :r, :].sum(axis=(0, 1))
        grad_image[-1, -1, :] += grad_padded[-r:, -r:, :].sum(axis=(0, 1))
    return grad_image, grad_kernels
