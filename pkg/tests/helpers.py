"""Checks shared by the unit tests and the acceptance run."""
import numpy as np
import torch

from nightlift.imaging import apply_pixelwise_filter
from nightlift.kpn import KpnConfig, KpnModel, predict_kernels


def kpn_gradient_error(seed, size=16, step=1e-6):
    """Relative error between autograd and central differences for a tiny double KPN.

    The scalar is ``sum(w * translate(x))`` for random ``w``; the derivative
    is taken along one random direction over every parameter and the input.
    """
    gen = torch.Generator().manual_seed(seed)
    model = KpnModel(KpnConfig(k=3, base_channels=4, depth=1, seed=seed, init_scale=0.5)).double()
    x = torch.rand(1, 3, size, size, generator=gen, dtype=torch.float64, requires_grad=True)
    w = torch.randn(1, 3, size, size, generator=gen, dtype=torch.float64)
    params = [x] + list(model.parameters())
    dirs = [torch.randn(p.shape, generator=gen, dtype=torch.float64) for p in params]

    def value():
        return float((model.translate_tensor(x) * w).sum())

    loss = (model.translate_tensor(x) * w).sum()
    grads = torch.autograd.grad(loss, params)
    analytic = sum(float((g * d).sum()) for g, d in zip(grads, dirs))
    with torch.no_grad():
        for p, d in zip(params, dirs):
            p += step * d
        hi = value()
        for p, d in zip(params, dirs):
            p -= 2 * step * d
        lo = value()
        for p, d in zip(params, dirs):
            p += step * d
    numeric = (hi - lo) / (2 * step)
    return abs(analytic - numeric) / max(abs(numeric), abs(analytic), 1e-12)


def impulse_support(model, image, y, x, amplitude=0.5):
    """Pixels whose output changes when an impulse is added at (y, x) under fixed predicted kernels."""
    kernels = predict_kernels(model, image)
    bumped = image.copy()
    bumped[y, x, :] += amplitude
    diff = np.abs(apply_pixelwise_filter(bumped, kernels) - apply_pixelwise_filter(image, kernels))
    return diff.max(axis=-1) > 0


def outside_window(mask, y, x, k):
    r = k // 2
    outside = mask.copy()
    outside[max(y - r, 0):y + r + 1, max(x - r, 0):x + r + 1] = False
    return outside
