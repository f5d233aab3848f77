"""Kernel prediction network and single-layer translation.

The network sees the night image and predicts a ``k x k`` kernel per pixel;
the translated image is the per-pixel filtering of the *input* with those
kernels, so no detail passes through a down/up-sampling bottleneck.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from typing import NamedTuple

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from . import __version__, backend
from .errors import CompatibilityError, DataError, NumericError
from .imaging import KernelField, Padding, as_image_array, clamp_to_unit
from .utils import atomic_write


@dataclass
class KpnConfig:
    k: int = 5
    base_channels: int = 32
    depth: int = 3
    per_channel_kernels: bool = False
    in_channels: int = 3
    seed: int = 0
    init_scale: float = 1e-2

    def __post_init__(self):
        if self.k < 1 or self.k % 2 == 0:
            raise CompatibilityError(f"k must be odd and >= 1, got {self.k}")
        if self.depth < 1:
            raise CompatibilityError(f"depth must be >= 1, got {self.depth}")

    @property
    def kernel_channels(self) -> int:
        kk = self.k * self.k
        return kk * self.in_channels if self.per_channel_kernels else kk


class PixelwiseFilterFn(torch.autograd.Function):
    """Autograd wrapper around the compiled (or fallback) filter core."""

    @staticmethod
    def forward(ctx, image, kernels, k, per_channel, padding):
        ctx.k, ctx.per_channel, ctx.padding = k, per_channel, padding
        ctx.save_for_backward(image, kernels)
        impl = backend.impl
        img = image.detach().permute(0, 2, 3, 1).contiguous().numpy()
        ker = kernels.detach().contiguous().numpy()
        out = np.stack([impl.filter_forward(img[n], ker[n], k, per_channel, padding)
                        for n in range(img.shape[0])])
        return torch.from_numpy(out).permute(0, 3, 1, 2).contiguous()

    @staticmethod
    def backward(ctx, grad_out):
        image, kernels = ctx.saved_tensors
        impl = backend.impl
        img = image.detach().permute(0, 2, 3, 1).contiguous().numpy()
        ker = kernels.detach().contiguous().numpy()
        up = grad_out.detach().permute(0, 2, 3, 1).contiguous().numpy()
        gi, gk = [], []
        for n in range(img.shape[0]):
            a, b = impl.filter_backward(img[n], ker[n], up[n], ctx.k, ctx.per_channel, ctx.padding)
            gi.append(a)
            gk.append(b)
        grad_image = torch.from_numpy(np.stack(gi)).permute(0, 3, 1, 2) if ctx.needs_input_grad[0] else None
        grad_kernels = torch.from_numpy(np.stack(gk)) if ctx.needs_input_grad[1] else None
        return grad_image, grad_kernels, None, None, None


def pixelwise_filter(image: torch.Tensor, kernels: torch.Tensor, k: int,
                     per_channel=False, padding="replicate") -> torch.Tensor:
    """Differentiable per-pixel filtering of an NCHW batch with (N, P, H, W) kernels."""
    return PixelwiseFilterFn.apply(image, kernels.to(image.dtype), k, per_channel, Padding(padding).code)


def _double_conv(cin, cout):
    return nn.Sequential(
        nn.Conv2d(cin, cout, 3, padding=1, padding_mode="replicate"),
        nn.ReLU(inplace=True),
        nn.Conv2d(cout, cout, 3, padding=1, padding_mode="replicate"),
        nn.ReLU(inplace=True),
    )


class KpnModel(nn.Module):
    """Encoder-decoder with skip connections and a linear 1x1 kernel head.

    No normalisation layers, no output nonlinearity: kernels are free to be
    negative or to sum above one (brightening).
    """

    def __init__(self, config: KpnConfig | None = None):
        super().__init__()
        self.config = config = config or KpnConfig()
        gen_state = torch.random.get_rng_state()
        torch.manual_seed(config.seed)
        try:
            widths = [config.base_channels * 2**lvl for lvl in range(config.depth + 1)]
            self.encoders = nn.ModuleList()
            cin = config.in_channels
            for w in widths[:-1]:
                self.encoders.append(_double_conv(cin, w))
                cin = w
            self.bottleneck = _double_conv(widths[-2], widths[-1])
            self.decoders = nn.ModuleList()
            for lvl in reversed(range(config.depth)):
                self.decoders.append(_double_conv(widths[lvl + 1] + widths[lvl], widths[lvl]))
            self.head = nn.Conv2d(widths[0], config.kernel_channels, 1)
            self._init_head()
        finally:
            torch.random.set_rng_state(gen_state)
        self.init_bound = self._probe_bound()

    def _init_head(self):
        cfg = self.config
        with torch.no_grad():
            self.head.weight.normal_(0.0, cfg.init_scale / np.sqrt(self.head.in_channels))
            self.head.bias.copy_(torch.from_numpy(delta_kernel_vector(cfg)))

    def _probe_bound(self) -> float:
        """Empirical output bound at initialisation, with a 2x margin."""
        c = self.config.in_channels
        gen = torch.Generator().manual_seed(self.config.seed)
        probes = torch.cat([
            torch.zeros(1, c, 32, 32), torch.ones(1, c, 32, 32),
            torch.rand(2, c, 32, 32, generator=gen),
        ])
        with torch.no_grad():
            out = self.forward(probes.to(self.head.weight.dtype))
        return 2.0 * float(out.abs().max())

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """Predict kernels (N, P, H, W) for an NCHW batch in [0, 1]."""
        H, W = x.shape[-2:]
        m = 2**self.config.depth
        ph, pw = (-H) % m, (-W) % m
        if ph or pw:
            x = F.pad(x, (0, pw, 0, ph), mode="replicate")
        skips = []
        h = x
        for lvl, enc in enumerate(self.encoders):
            h = _checked(enc(h), f"encoder[{lvl}]")
            skips.append(h)
            h = F.avg_pool2d(h, 2)
        h = _checked(self.bottleneck(h), "bottleneck")
        for lvl, dec in enumerate(self.decoders):
            skip = skips[-1 - lvl]
            h = F.interpolate(h, size=skip.shape[-2:], mode="bilinear", align_corners=False)
            h = _checked(dec(torch.cat([h, skip], dim=1)), f"decoder[{lvl}]")
        out = _checked(self.head(h), "head")
        return out[..., :H, :W]

    def translate_tensor(self, x: torch.Tensor, padding="replicate") -> torch.Tensor:
        """Unclamped translation of an NCHW batch."""
        cfg = self.config
        return pixelwise_filter(x, self.forward(x), cfg.k, cfg.per_channel_kernels, padding)

    def set_constant_kernels(self, kernel) -> "KpnModel":
        """Freeze the head so every pixel gets ``kernel`` (flattened, length P)."""
        vec = torch.as_tensor(np.asarray(kernel, dtype=np.float64).reshape(-1))
        if vec.numel() != self.config.kernel_channels:
            raise CompatibilityError(f"kernel has {vec.numel()} entries, expected {self.config.kernel_channels}")
        with torch.no_grad():
            self.head.weight.zero_()
            self.head.bias.copy_(vec.to(self.head.bias.dtype))
        return self


def _checked(t: torch.Tensor, where: str) -> torch.Tensor:
    if not torch.isfinite(t).all():
        raise NumericError(f"non-finite activations in {where}")
    return t


def delta_kernel_vector(config: KpnConfig, scale=1.0) -> np.ndarray:
    kk = config.k * config.k
    vec = np.zeros(config.kernel_channels)
    reps = config.kernel_channels // kk
    for c in range(reps):
        vec[c * kk + kk // 2] = scale
    return vec


def _to_batch(image, model) -> torch.Tensor:
    arr = as_image_array(image)
    dtype = model.head.weight.dtype
    return torch.from_numpy(np.ascontiguousarray(arr.transpose(2, 0, 1))).unsqueeze(0).to(dtype)


def predict_kernels(model: KpnModel, image) -> KernelField:
    with torch.no_grad():
        out = model(_to_batch(image, model))[0].numpy()
    return KernelField(out, model.config.k, model.config.per_channel_kernels)


class Translation(NamedTuple):
    raw: np.ndarray      # unclamped, for losses
    clamped: np.ndarray  # for files and the detector


def translate(model: KpnModel, night) -> Translation:
    with torch.no_grad():
        out = model.translate_tensor(_to_batch(night, model))[0].permute(1, 2, 0).numpy()
    return Translation(out, clamp_to_unit(out))


def save_checkpoint(path, model: KpnModel, extra: dict | None = None) -> None:
    arrays = {f"param/{name}": t.detach().cpu().numpy() for name, t in model.state_dict().items()}
    meta = {"config": asdict(model.config), "version": __version__, "kind": "kpn",
            "init_bound": model.init_bound, **(extra or {})}
    arrays["meta"] = np.array(json.dumps(meta))
    atomic_write(path, lambda f: np.savez(f, **arrays))


def load_checkpoint(path, expect_k: int | None = None) -> KpnModel:
    with np.load(path, allow_pickle=False) as data:
        meta = json.loads(str(data["meta"]))
        if meta.get("kind") != "kpn":
            raise DataError(f"{path} is not a KPN checkpoint")
        config = KpnConfig(**meta["config"])
        if expect_k is not None and config.k != expect_k:
            raise CompatibilityError(f"checkpoint k={config.k} but configuration expects k={expect_k}")
        state = {name[len("param/"):]: torch.from_numpy(data[name].copy())
                 for name in data.files if name.startswith("param/")}
    model = KpnModel(config)
    expected = model.state_dict()
    for name, tensor in expected.items():
        if name not in state or tuple(state[name].shape) != tuple(tensor.shape):
            raise CompatibilityError(f"parameter {name!r} missing or mis-shaped in {path}")
    model.load_state_dict(state)
    model.to(state[next(iter(state))].dtype)
    model.init_bound = meta.get("init_bound", model.init_bound)
    return model
