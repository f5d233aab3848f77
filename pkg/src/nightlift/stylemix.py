"""StyleMix: synthetic night images from day images.

Each mixed-night (MN) image is built from ``chains`` style-augmentation
chains (one or two stylisations each, styles drawn from a reference pool);
the stylised branches are fused with Dirichlet convex coefficients.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple, Protocol, Sequence

import numpy as np

from .errors import ConfigError, DataError, ShapeError
from .imaging import Image, as_image_array, clamp_to_unit, read_image

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg")

# Reinhard et al. colour-transfer space: RGB -> LMS -> log -> decorrelated l-alpha-beta
_RGB_TO_LMS = np.array([
    [0.3811, 0.5783, 0.0402],
    [0.1967, 0.7244, 0.0782],
    [0.0241, 0.1288, 0.8444],
])
_LMS_TO_RGB = np.linalg.inv(_RGB_TO_LMS)
_LOG_TO_LAB = np.diag([1 / np.sqrt(3), 1 / np.sqrt(6), 1 / np.sqrt(2)]) @ np.array([
    [1.0, 1.0, 1.0],
    [1.0, 1.0, -2.0],
    [1.0, -1.0, 0.0],
])
_LAB_TO_LOG = np.linalg.inv(_LOG_TO_LAB)
_LOG_EPS = 1.0 / 255.0
_LOG_FLOOR = 1e-12  # keeps log finite; exact inverse of from_transfer_space above it


def to_transfer_space(image) -> np.ndarray:
    """Map an image into the decorrelated log space used for statistics matching."""
    img = as_image_array(image).astype(np.float64)
    if img.shape[2] == 1:
        return np.log(np.maximum(img + _LOG_EPS, _LOG_FLOOR))
    lms = img @ _RGB_TO_LMS.T
    return np.log(np.maximum(lms + _LOG_EPS, _LOG_FLOOR)) @ _LOG_TO_LAB.T


def from_transfer_space(lab) -> np.ndarray:
    if lab.shape[2] == 1:
        return np.exp(lab) - _LOG_EPS
    lms = np.exp(lab @ _LAB_TO_LOG.T) - _LOG_EPS
    return lms @ _LMS_TO_RGB.T


class Stylizer(Protocol):
    def stylize(self, content: Image, style: Image, style_index: int | None = None) -> Image: ...


class StatisticsStylizer:
    """Global colour-statistics transfer (per-channel mean/std in log-l-alpha-beta).

    Deterministic. A channel with zero spread collapses to the style mean.
    """

    def __init__(self, min_std=1e-8):
        self.min_std = min_std

    def stylize(self, content, style, style_index=None):
        c_img = _image(content)
        s_img = _image(style)
        if c_img.shape[2] != s_img.shape[2]:
            raise ValueError(f"channel mismatch: content {c_img.shape[2]} vs style {s_img.shape[2]}")
        c = to_transfer_space(c_img)
        s = to_transfer_space(s_img)
        c_mean, c_std = c.mean(axis=(0, 1)), c.std(axis=(0, 1))
        s_mean, s_std = s.mean(axis=(0, 1)), s.std(axis=(0, 1))
        scale = np.where(c_std > self.min_std, s_std / np.maximum(c_std, self.min_std), 0.0)
        out = (c - c_mean) * scale + s_mean
        return Image(from_transfer_space(out), id=_styled_id(content, style_index))


class FileStylizer:
    """Read pre-stylised images from ``<styled_dir>/<content_id>__<style_idx>.png``.

    For chains the intermediate id accumulates, e.g. ``img7__2__4.png``.
    """

    def __init__(self, styled_dir):
        self.styled_dir = Path(styled_dir)

    def stylize(self, content, style, style_index=None):
        if not isinstance(content, Image) or content.id is None or style_index is None:
            raise ValueError("file stylizer needs a content id and a style index")
        key = _styled_id(content, style_index)
        for suffix in IMAGE_SUFFIXES:
            path = self.styled_dir / f"{key}{suffix}"
            if path.exists():
                img = read_image(path, channels=content.shape[2])
                if img.shape != content.shape:
                    raise ShapeError(f"{path} has shape {img.shape}, expected {content.shape}")
                return Image(img.data, path=str(path), id=key)
        raise DataError(f"no pre-stylised image for {key!r} in {self.styled_dir}")


def _image(x) -> np.ndarray:
    return x.data if isinstance(x, Image) else as_image_array(x)


def _styled_id(content, style_index):
    cid = content.id if isinstance(content, Image) else None
    if cid is None or style_index is None:
        return None
    return f"{cid}__{style_index}"


_DEFAULT_STYLIZER = StatisticsStylizer()


def stylize(content, style, stylizer: Stylizer | None = None) -> np.ndarray:
    """Stylise ``content`` with ``style`` (statistics transfer by default)."""
    stylizer = stylizer or _DEFAULT_STYLIZER
    return stylizer.stylize(_wrap(content), _wrap(style)).data


def _wrap(x) -> Image:
    return x if isinstance(x, Image) else Image(x)


@dataclass
class StylePool:
    refs: list

    def __post_init__(self):
        self.refs = [_wrap(r) for r in self.refs]
        if not self.refs:
            raise ConfigError("style pool is empty")

    @property
    def count(self) -> int:
        return len(self.refs)

    def __getitem__(self, idx) -> Image:
        return self.refs[idx]

    def subset(self, n: int | None) -> "StylePool":
        """First ``n`` references (all of them if the pool is smaller)."""
        if n is None or n >= self.count:
            return self
        if n < 1:
            raise ConfigError(f"pool_size must be >= 1, got {n}")
        return StylePool(self.refs[:n])

    @classmethod
    def from_dir(cls, directory, channels=3) -> "StylePool":
        directory = Path(directory)
        files = sorted(p for p in directory.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
        if not files:
            raise DataError(f"no style images in {directory}")
        return cls([read_image(p, channels) for p in files])


@dataclass
class StyleMixConfig:
    alpha: float = 1.0
    pool_size: int | None = 5
    chains: int = 3
    max_chain_len: int = 2
    per_pixel_coeffs: bool = False
    seed: int = 0

    def __post_init__(self):
        if not self.alpha > 0:
            raise ConfigError(f"alpha must be positive, got {self.alpha}")
        if self.chains < 1 or self.max_chain_len < 1:
            raise ConfigError("chains and max_chain_len must be >= 1")


@dataclass
class MixPlan:
    chains: list
    coeffs: np.ndarray  # (n_chains, H, W), convex along axis 0
    seed: int | None = None
    meta: dict = field(default_factory=dict)


def _generator(rng_state) -> tuple[np.random.Generator, int | None]:
    if isinstance(rng_state, np.random.Generator):
        seed = int(rng_state.integers(2**63))
        return np.random.default_rng(seed), seed
    if isinstance(rng_state, np.random.SeedSequence):
        return np.random.default_rng(rng_state), None
    return np.random.default_rng(rng_state), None if rng_state is None else int(rng_state)


def sample_mix_plan(cfg: StyleMixConfig, pool: StylePool, rng_state, shape) -> MixPlan:
    """Draw chains (lengths uniform in 1..max_chain_len) and fusion coefficients.

    ``shape`` is the ``(H, W)`` of the day image. Coefficients are one
    Dirichlet draw broadcast over the image unless ``cfg.per_pixel_coeffs``.
    """
    rng, seed = _generator(rng_state)
    n_styles = pool.subset(cfg.pool_size).count if isinstance(pool, StylePool) else int(pool)
    chains = []
    for _ in range(cfg.chains):
        length = int(rng.integers(1, cfg.max_chain_len + 1))
        chains.append([int(i) for i in rng.integers(0, n_styles, size=length)])
    H, W = shape
    conc = np.full(cfg.chains, cfg.alpha)
    if cfg.per_pixel_coeffs:
        coeffs = rng.dirichlet(conc, size=(H, W)).transpose(2, 0, 1)
    else:
        coeffs = np.broadcast_to(rng.dirichlet(conc)[:, None, None], (cfg.chains, H, W)).copy()
    return MixPlan(chains, coeffs, seed)


def apply_chain(content, chain: Sequence[int], pool: StylePool, stylizer: Stylizer | None = None):
    stylizer = stylizer or _DEFAULT_STYLIZER
    out = _wrap(content)
    for idx in chain:
        if not 0 <= idx < pool.count:
            raise IndexError(f"style index {idx} out of range for pool of {pool.count}")
        out = stylizer.stylize(out, pool[idx], idx)
    return out.data


def fuse(plan: MixPlan, branch_images) -> np.ndarray:
    """Pixel-wise convex combination ``sum_m coeffs[m] * branch_m``."""
    coeffs = np.asarray(plan.coeffs)
    branches = np.stack([_image(b) for b in branch_images])
    if branches.shape[0] != coeffs.shape[0] or branches.shape[1:3] != coeffs.shape[1:]:
        raise ShapeError(f"branches {branches.shape} incompatible with coefficients {coeffs.shape}")
    return np.einsum("mhw,mhwc->hwc", coeffs, branches)


def mix(day, plan: MixPlan, pool: StylePool, stylizer: Stylizer | None = None) -> np.ndarray:
    branches = [apply_chain(day, chain, pool, stylizer) for chain in plan.chains]
    return fuse(plan, branches)


class StyleMixPair(NamedTuple):
    mn1: np.ndarray
    mn2: np.ndarray
    target: np.ndarray


def generate_pair(day, cfg: StyleMixConfig, pool: StylePool, rng_state=None,
                  stylizer: Stylizer | None = None, return_plans=False):
    """Two independently mixed night images of the same day image.

    MN images are clamped to [0, 1] (they stand in for stored night
    photographs); ``target`` is the day image itself.
    """
    day_img = _wrap(day)
    pool = pool.subset(cfg.pool_size)
    if rng_state is None:
        rng_state = cfg.seed
    seq = rng_state if isinstance(rng_state, np.random.SeedSequence) else None
    if seq is None:
        if isinstance(rng_state, np.random.Generator):
            seq = np.random.SeedSequence(int(rng_state.integers(2**63)))
        else:
            seq = np.random.SeedSequence(int(rng_state))
    s1, s2 = seq.spawn(2)
    shape = day_img.shape[:2]
    plans = [sample_mix_plan(cfg, pool, s, shape) for s in (s1, s2)]
    mn = [clamp_to_unit(mix(day_img, p, pool, stylizer)) for p in plans]
    pair = StyleMixPair(mn[0], mn[1], day_img.data)
    return (pair, plans) if return_plans else pair


def pair_seed(global_seed: int, index: int, epoch: int = 0) -> np.random.SeedSequence:
    """Independent stream for one generated pair (stable across workers/resumes)."""
    return np.random.SeedSequence([int(global_seed), int(epoch), int(index)])
