"""Synthetic day/night traffic-like scenes for desk-scale experiments.

Day scenes: smooth textured background plus bright rectangles ("vehicles")
with a darker window band. Night renditions: gamma darkening, exposure
loss, a blue colour cast and Gaussian sensor noise.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
from PIL import Image as PILImage

from .dataset import write_manifest
from .errors import DataError
from .imaging import write_image
from .utils import atomic_write


@dataclass
class NightParams:
    gamma: float = 2.2
    exposure: float = 0.6
    cast: tuple = (0.85, 0.95, 1.15)
    noise_sigma: float = 0.02

    def jittered(self, rng) -> "NightParams":
        return NightParams(
            gamma=float(self.gamma * rng.uniform(0.9, 1.1)),
            exposure=float(self.exposure * rng.uniform(0.85, 1.15)),
            cast=tuple(float(c * rng.uniform(0.95, 1.05)) for c in self.cast),
            noise_sigma=self.noise_sigma,
        )


def _smooth_noise(rng, size, cells):
    grid = rng.random((cells, cells)).astype(np.float32)
    im = PILImage.fromarray(grid, mode="F").resize((size, size), PILImage.BICUBIC)
    return np.asarray(im, dtype=np.float64)


def _overlaps(box, boxes, margin=2):
    x1, y1, x2, y2 = box
    return any(x1 < b[2] + margin and b[0] < x2 + margin and y1 < b[3] + margin and b[1] < y2 + margin
               for b in boxes)


def generate_scene(rng, size=64, max_objects=3, min_side=10, max_side=20):
    """One day image ``(size, size, 3)`` and its boxes ``[[x1, y1, x2, y2, 0], ...]``."""
    base = rng.uniform(0.32, 0.5)
    tint = rng.uniform(-0.04, 0.04, size=3)
    yy, xx = np.mgrid[0:size, 0:size] / size
    angle = rng.uniform(0, 2 * np.pi)
    gradient = 0.08 * (np.cos(angle) * xx + np.sin(angle) * yy)
    texture = 0.12 * (_smooth_noise(rng, size, 6) - 0.5) + 0.04 * (_smooth_noise(rng, size, 16) - 0.5)
    img = (base + gradient + texture)[:, :, None] + tint
    # lane markings: thin bright lines
    for _ in range(rng.integers(0, 3)):
        x = rng.integers(4, size - 4)
        img[:, x, :] += 0.15
    img += rng.normal(0, 0.01, img.shape)

    boxes = []
    n_obj = int(rng.integers(1, max_objects + 1))
    tries = 0
    while len(boxes) < n_obj and tries < 100:
        tries += 1
        w, h = rng.integers(min_side, max_side + 1, size=2)
        x1 = int(rng.integers(1, size - w - 1))
        y1 = int(rng.integers(1, size - h - 1))
        box = (x1, y1, x1 + int(w), y1 + int(h))
        if _overlaps(box, boxes):
            continue
        boxes.append(box)
        body = rng.uniform(0.75, 0.95) + rng.uniform(-0.05, 0.05, size=3)
        img[box[1]:box[3], box[0]:box[2], :] = body
        # window band: a darker stripe across the upper third
        wy1 = box[1] + max(1, int(h) // 5)
        wy2 = wy1 + max(2, int(h) // 4)
        img[wy1:wy2, box[0] + 2:box[2] - 2, :] = body * 0.55
    return np.clip(img, 0.0, 1.0), [[*b, 0] for b in boxes]


def render_night(day, params: NightParams, rng) -> np.ndarray:
    night = params.exposure * np.power(np.clip(day, 0, 1), params.gamma) * np.asarray(params.cast)
    night = night + rng.normal(0.0, params.noise_sigma, night.shape)
    return np.clip(night, 0.0, 1.0)


def _quantize(img):
    return np.round(np.clip(img, 0, 1) * 255) / 255


def make_toy_data(out_dir, n_images, seed, size=64, n_test=None, n_styles=5,
                  night: NightParams | None = None) -> dict:
    """Write day-train/day-test/night-test splits, style references and manifests.

    Returns the paths of the written manifests. ``n_test`` defaults to
    ``n_images // 4``.
    """
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DataError(f"cannot create {out}: {exc}") from exc
    night = night or NightParams()
    n_test = n_images // 4 if n_test is None else n_test
    seq = np.random.SeedSequence(seed)
    train_seq, test_seq, style_seq = seq.spawn(3)

    train_rows = []
    rng = np.random.default_rng(train_seq)
    for i in range(n_images):
        day, boxes = generate_scene(rng, size)
        name = f"day_train/{i:05d}.png"
        write_image(out / name, day)
        train_rows.append({"image": name, "boxes": boxes, "id": f"train{i:05d}"})

    day_rows, night_rows = [], []
    rng = np.random.default_rng(test_seq)
    for i in range(n_test):
        day, boxes = generate_scene(rng, size)
        night_img = render_night(_quantize(day), night, rng)
        dname, nname = f"day_test/{i:05d}.png", f"night_test/{i:05d}.png"
        write_image(out / dname, day)
        write_image(out / nname, night_img)
        day_rows.append({"image": dname, "boxes": boxes, "id": f"test{i:05d}"})
        night_rows.append({"image": nname, "boxes": boxes, "id": f"test{i:05d}", "day": dname})

    rng = np.random.default_rng(style_seq)
    style_params = []
    for i in range(n_styles):
        params = night.jittered(rng)
        day, _ = generate_scene(rng, size)
        write_image(out / f"styles/style_{i}.png", render_night(_quantize(day), params, rng))
        style_params.append(asdict(params))
    (out / "styles").mkdir(exist_ok=True)

    manifests = {
        "day_train": out / "day_train.jsonl",
        "day_test": out / "day_test.jsonl",
        "night_test": out / "night_test.jsonl",
    }
    write_manifest(manifests["day_train"], train_rows)
    write_manifest(manifests["day_test"], day_rows)
    write_manifest(manifests["night_test"], night_rows)
    info = {"seed": seed, "size": size, "n_images": n_images, "n_test": n_test,
            "night": asdict(night), "styles": style_params}
    payload = json.dumps(info, indent=2, sort_keys=True)
    atomic_write(out / "toy_params.json", lambda f: f.write(payload), mode="w")
    return {k: str(v) for k, v in manifests.items()} | {"styles": str(out / "styles")}
