"""Images, per-pixel kernel fields and the pixel-wise filtering operator.

Images are channels-last ``(H, W, C)`` float arrays with ``C`` in {1, 3}.
A :class:`KernelField` stores one flattened ``k x k`` kernel per pixel as
``(k*k, H, W)``; with ``per_channel=True`` it is ``(k*k*C, H, W)``,
channel-major.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image as PILImage

from . import backend
from .errors import DataError, ShapeError


class Padding(str, enum.Enum):
    REPLICATE = "replicate"
    ZERO = "zero"

    @property
    def code(self) -> int:
        return 0 if self is Padding.REPLICATE else 1


@dataclass
class Image:
    """An image plus optional provenance."""

    data: np.ndarray
    path: str | None = None
    id: str | None = None

    def __post_init__(self):
        self.data = as_image_array(self.data)

    def __array__(self, dtype=None, copy=None):
        return self.data if dtype is None else self.data.astype(dtype)

    @property
    def shape(self):
        return self.data.shape


@dataclass
class KernelField:
    data: np.ndarray
    k: int
    per_channel: bool = False
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.k < 1 or self.k % 2 == 0:
            raise ValueError(f"kernel side must be odd and positive, got {self.k}")
        if self.data.ndim != 3:
            raise ShapeError(f"kernel field must be (P, H, W), got {self.data.shape}")
        kk = self.k * self.k
        P = self.data.shape[0]
        if self.per_channel:
            if P % kk or P // kk not in (1, 3):
                raise ShapeError(f"{P} kernel channels is not k*k*C for k={self.k}")
        elif P != kk:
            raise ShapeError(f"expected {kk} kernel channels for k={self.k}, got {P}")

    @property
    def spatial(self):
        return self.data.shape[1:]

    def kernel_at(self, i: int, j: int, channel: int = 0) -> np.ndarray:
        kk = self.k * self.k
        base = channel * kk if self.per_channel else 0
        return self.data[base:base + kk, i, j].reshape(self.k, self.k)

    @classmethod
    def delta(cls, height, width, k=5, scale=1.0, dtype=np.float64):
        """Kernels that copy the centre pixel (times ``scale``)."""
        data = np.zeros((k * k, height, width), dtype=dtype)
        data[(k * k) // 2] = scale
        return cls(data, k)

    @classmethod
    def uniform(cls, height, width, k=5, total=1.0, dtype=np.float64):
        return cls(np.full((k * k, height, width), total / (k * k), dtype=dtype), k)


def as_image_array(image) -> np.ndarray:
    """Coerce to a finite float ``(H, W, C)`` array; 2-D input gains a channel axis."""
    arr = np.asarray(image)
    if not np.issubdtype(arr.dtype, np.floating):
        arr = arr.astype(np.float64)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    if arr.ndim != 3 or arr.shape[2] not in (1, 3) or arr.shape[0] < 1 or arr.shape[1] < 1:
        raise ShapeError(f"image must be HxWxC with C in (1, 3), got shape {arr.shape}")
    return arr


def _as_kernels(kernels, k=None) -> KernelField:
    if isinstance(kernels, KernelField):
        return kernels
    arr = np.asarray(kernels)
    if k is None:
        k = int(round(np.sqrt(arr.shape[0])))
        if k * k != arr.shape[0]:
            raise ShapeError(f"cannot infer kernel side from {arr.shape[0]} channels")
    return KernelField(arr, k)


def _prepare(image, kernels, padding):
    img = as_image_array(image)
    kf = _as_kernels(kernels)
    if kf.spatial != img.shape[:2]:
        raise ShapeError(f"kernel field {kf.spatial} does not match image {img.shape[:2]}")
    if kf.per_channel and kf.data.shape[0] != kf.k * kf.k * img.shape[2]:
        raise ShapeError("per-channel kernel field does not match image channel count")
    dtype = np.result_type(img.dtype, kf.data.dtype, np.float32)
    img = np.ascontiguousarray(img, dtype=dtype)
    kd = np.ascontiguousarray(kf.data, dtype=dtype)
    return img, kd, kf, Padding(padding)


def apply_pixelwise_filter(image, kernels, padding="replicate", impl=None) -> np.ndarray:
    """Filter every pixel with its own kernel over its ``k x k`` neighbourhood.

    ``out[i, j, c] = sum_{u,v} K[i, j][u, v] * I_pad[i + u - k//2, j + v - k//2, c]``.
    The output is not clamped.
    """
    img, kd, kf, pad = _prepare(image, kernels, padding)
    return backend.get(impl).filter_forward(img, kd, kf.k, kf.per_channel, pad.code)


def filter_gradients(image, kernels, upstream, padding="replicate", impl=None):
    """Vector-Jacobian product of :func:`apply_pixelwise_filter`.

    Returns ``(grad_image, grad_kernels)`` for the upstream gradient of the
    filter output.
    """
    img, kd, kf, pad = _prepare(image, kernels, padding)
    up = as_image_array(upstream)
    if up.shape != img.shape:
        raise ShapeError(f"upstream gradient {up.shape} does not match output {img.shape}")
    up = np.ascontiguousarray(up, dtype=img.dtype)
    return backend.get(impl).filter_backward(img, kd, up, kf.k, kf.per_channel, pad.code)


def psnr(a, b) -> float:
    """Peak signal-to-noise ratio in dB for unit-range images; ``inf`` if identical."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return float("inf")
    return 10.0 * np.log10(1.0 / mse)


def clamp_to_unit(image) -> np.ndarray:
    arr = np.asarray(image)
    if not np.all(np.isfinite(arr)):
        raise DataError("image contains non-finite values")
    return np.clip(arr, 0.0, 1.0)


def read_image(path, channels=3) -> Image:
    path = Path(path)
    with PILImage.open(path) as im:
        im = im.convert("RGB" if channels == 3 else "L")
        data = np.asarray(im, dtype=np.float64) / 255.0
    return Image(data, path=str(path), id=path.stem)


def to_uint8(image) -> np.ndarray:
    return np.round(255.0 * clamp_to_unit(image)).astype(np.uint8)


def write_image(path, image) -> None:
    arr = to_uint8(as_image_array(np.asarray(image)))
    if arr.shape[2] == 1:
        arr = arr[:, :, 0]
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    PILImage.fromarray(arr).save(path)
