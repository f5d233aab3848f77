"""Detector boundary and a tiny single-class anchor detector.

Anything that implements :class:`DetectorInterface` can stand in for the
frozen daytime detector. :class:`TinyDetector` is a small convolutional
backbone with one anchor per cell (objectness logit + 4 box deltas), enough
for desk-scale toy scenes.
"""
from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from typing import NamedTuple, Protocol, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from . import __version__
from .boxes import BoxSet, EvalConfig, iou_matrix, nms
from .errors import CompatibilityError, DataError, StateError
from .imaging import as_image_array, clamp_to_unit
from .utils import atomic_write

log = logging.getLogger(__name__)


class HeadOutputs(NamedTuple):
    objectness: torch.Tensor  # (N, A) logits
    deltas: torch.Tensor      # (N, A, 4)


class Targets(NamedTuple):
    labels: torch.Tensor  # (A,) 1 positive, 0 negative, -1 ignored
    deltas: torch.Tensor  # (A, 4), meaningful where labels == 1


class DetectorInterface(Protocol):
    frozen: bool

    def forward_heads(self, images: torch.Tensor) -> HeadOutputs: ...

    def detect(self, image) -> BoxSet: ...

    def match_targets(self, gt: BoxSet, image_size: tuple[int, int]) -> Targets: ...


@dataclass
class TinyDetectorConfig:
    in_channels: int = 3
    widths: tuple = (16, 32, 32, 64, 64, 64)
    strides: tuple = (1, 2, 1, 2, 1, 1)
    anchor_size: float = 16.0
    pos_iou: float = 0.4
    neg_iou: float = 0.3
    prior: float = 0.01
    nms_threshold: float = 0.5
    max_detections: int = 100
    seed: int = 0

    def __post_init__(self):
        self.widths = tuple(self.widths)
        self.strides = tuple(self.strides)

    @property
    def stride(self) -> int:
        return int(np.prod(self.strides))


@dataclass
class DetectorTrainConfig:
    epochs: int = 30
    batch_size: int = 16
    lr: float = 2e-3
    lr_decay_every: int = 10
    lr_decay: float = 0.5
    optimizer: str = "adam"
    momentum: float = 0.9
    seed: int = 0
    eval: EvalConfig = field(default_factory=EvalConfig)


def encode(anchors: np.ndarray, boxes: np.ndarray) -> np.ndarray:
    """Box deltas (dx, dy, log dw, log dh) relative to anchors."""
    aw = anchors[:, 2] - anchors[:, 0]
    ah = anchors[:, 3] - anchors[:, 1]
    ax = anchors[:, 0] + 0.5 * aw
    ay = anchors[:, 1] + 0.5 * ah
    bw = boxes[:, 2] - boxes[:, 0]
    bh = boxes[:, 3] - boxes[:, 1]
    bx = boxes[:, 0] + 0.5 * bw
    by = boxes[:, 1] + 0.5 * bh
    return np.stack([(bx - ax) / aw, (by - ay) / ah, np.log(bw / aw), np.log(bh / ah)], axis=1)


def decode(anchors: np.ndarray, deltas: np.ndarray) -> np.ndarray:
    aw = anchors[:, 2] - anchors[:, 0]
    ah = anchors[:, 3] - anchors[:, 1]
    ax = anchors[:, 0] + 0.5 * aw
    ay = anchors[:, 1] + 0.5 * ah
    d = np.clip(deltas, -10, 10)
    cx = ax + d[:, 0] * aw
    cy = ay + d[:, 1] * ah
    w = aw * np.exp(np.minimum(d[:, 2], 4.0))
    h = ah * np.exp(np.minimum(d[:, 3], 4.0))
    return np.stack([cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2], axis=1)


class TinyDetector(nn.Module):
    def __init__(self, config: TinyDetectorConfig | None = None):
        super().__init__()
        self.config = config = config or TinyDetectorConfig()
        self.frozen = False
        self.eval_config = EvalConfig()
        gen_state = torch.random.get_rng_state()
        torch.manual_seed(config.seed)
        try:
            layers = []
            cin = config.in_channels
            for w, s in zip(config.widths, config.strides):
                layers += [nn.Conv2d(cin, w, 3, stride=s, padding=1), nn.ReLU(inplace=True)]
                cin = w
            self.backbone = nn.Sequential(*layers)
            self.head = nn.Conv2d(cin, 5, 1)
            with torch.no_grad():
                self.head.weight.normal_(0.0, 0.01)
                self.head.bias.zero_()
                self.head.bias[0] = -float(np.log((1 - config.prior) / config.prior))
        finally:
            torch.random.set_rng_state(gen_state)
        self._anchor_cache = {}

    # anchor grid depends only on the image size
    def grid_shape(self, image_size):
        H, W = image_size
        for s in self.config.strides:
            H = (H - 1) // s + 1
            W = (W - 1) // s + 1
        return H, W

    def anchors(self, image_size) -> np.ndarray:
        key = tuple(image_size)
        if key not in self._anchor_cache:
            gh, gw = self.grid_shape(image_size)
            s = self.config.stride
            ys, xs = np.meshgrid((np.arange(gh) + 0.5) * s, (np.arange(gw) + 0.5) * s, indexing="ij")
            half = self.config.anchor_size / 2
            cx, cy = xs.ravel(), ys.ravel()
            self._anchor_cache[key] = np.stack([cx - half, cy - half, cx + half, cy + half], axis=1)
        return self._anchor_cache[key]

    def forward_heads(self, images: torch.Tensor) -> HeadOutputs:
        out = self.head(self.backbone(images))
        N = out.shape[0]
        out = out.permute(0, 2, 3, 1).reshape(N, -1, 5)
        return HeadOutputs(out[..., 0], out[..., 1:])

    forward = forward_heads

    def freeze(self) -> "TinyDetector":
        self.frozen = True
        self.eval()
        for p in self.parameters():
            p.requires_grad_(False)
        return self

    def match_targets(self, gt: BoxSet, image_size) -> Targets:
        anchors = self.anchors(image_size)
        A = len(anchors)
        labels = np.zeros(A, dtype=np.int64)
        deltas = np.zeros((A, 4))
        if len(gt):
            ious = iou_matrix(anchors, gt.boxes)
            best_gt = ious.argmax(axis=1)
            best = ious.max(axis=1)
            labels[(best >= self.config.neg_iou) & (best < self.config.pos_iou)] = -1
            labels[best >= self.config.pos_iou] = 1
            # every ground-truth box keeps at least its best anchor
            forced = ious.argmax(axis=0)
            labels[forced] = 1
            best_gt[forced] = np.arange(len(gt))
            pos = labels == 1
            deltas[pos] = encode(anchors[pos], gt.boxes[best_gt[pos]])
        return Targets(torch.from_numpy(labels), torch.from_numpy(deltas))

    def _to_tensor(self, images) -> torch.Tensor:
        if isinstance(images, torch.Tensor):
            return images
        arr = np.stack([clamp_to_unit(as_image_array(im)) for im in images])
        return torch.from_numpy(np.ascontiguousarray(arr.transpose(0, 3, 1, 2))).to(self.head.weight.dtype)

    def postprocess(self, heads: HeadOutputs, image_size, score_threshold=None) -> list[BoxSet]:
        thr = self.eval_config.score_threshold if score_threshold is None else score_threshold
        anchors = self.anchors(image_size)
        H, W = image_size
        results = []
        scores_all = torch.sigmoid(heads.objectness).detach().cpu().numpy().astype(np.float64)
        deltas_all = heads.deltas.detach().cpu().numpy().astype(np.float64)
        for scores, deltas in zip(scores_all, deltas_all):
            keep = scores >= thr
            boxes = decode(anchors[keep], deltas[keep])
            boxes[:, [0, 2]] = np.clip(boxes[:, [0, 2]], 0, W)
            boxes[:, [1, 3]] = np.clip(boxes[:, [1, 3]], 0, H)
            sc = scores[keep]
            valid = (boxes[:, 2] - boxes[:, 0] > 1e-3) & (boxes[:, 3] - boxes[:, 1] > 1e-3)
            boxes, sc = boxes[valid], sc[valid]
            kept = nms(boxes, sc, self.config.nms_threshold)[: self.config.max_detections]
            results.append(BoxSet(boxes[kept], np.zeros(len(kept), dtype=np.int64), sc[kept]))
        return results

    @torch.no_grad()
    def detect(self, image) -> BoxSet:
        t = self._to_tensor([image])
        return self.postprocess(self.forward_heads(t), t.shape[-2:])[0]


def detect_batch(detector, images, batch_size=32) -> list[BoxSet]:
    """Score-thresholded, NMS-filtered detections, one BoxSet per image, in order."""
    if detector is None:
        raise StateError("no detector loaded")
    images = list(images)
    if not hasattr(detector, "postprocess"):
        return [detector.detect(im) for im in images]
    results = []
    with torch.no_grad():
        for start in range(0, len(images), batch_size):
            chunk = detector._to_tensor(images[start:start + batch_size])
            results += detector.postprocess(detector.forward_heads(chunk), chunk.shape[-2:])
    return results


def detection_loss_terms(heads: HeadOutputs, targets: Sequence[Targets]):
    """(classification, regression, n_positive) for a batch of matched targets."""
    from .losses import smooth_l1

    labels = torch.stack([t.labels for t in targets])
    reg = torch.stack([t.deltas for t in targets]).to(heads.deltas.dtype)
    valid = labels >= 0
    cls = F.binary_cross_entropy_with_logits(
        heads.objectness[valid], labels[valid].to(heads.objectness.dtype), reduction="mean")
    pos = labels == 1
    n_pos = int(pos.sum())
    regression = smooth_l1(heads.deltas[pos] - reg[pos]) if n_pos else heads.deltas.sum() * 0.0
    return cls, regression, n_pos


def tiny_detector_train(records, config: DetectorTrainConfig | None = None,
                        detector_config: TinyDetectorConfig | None = None,
                        on_epoch=None) -> tuple[TinyDetector, list]:
    """Train the tiny detector on (image, BoxSet) records; returns (detector, loss curve)."""
    config = config or DetectorTrainConfig()
    records = list(records)
    if not records:
        raise DataError("empty detection training set")
    detector_config = detector_config or TinyDetectorConfig(seed=config.seed)
    det = TinyDetector(detector_config)
    det.eval_config = config.eval
    images = torch.from_numpy(np.stack([as_image_array(im).transpose(2, 0, 1) for im, _ in records])).float()
    size = images.shape[-2:]
    targets = [det.match_targets(boxes, size) for _, boxes in records]
    if config.optimizer == "adam":
        opt = torch.optim.Adam(det.parameters(), lr=config.lr)
    else:
        opt = torch.optim.SGD(det.parameters(), lr=config.lr, momentum=config.momentum)
    sched = torch.optim.lr_scheduler.StepLR(opt, step_size=max(config.lr_decay_every, 1), gamma=config.lr_decay)
    rng = np.random.default_rng(config.seed)
    curve = []
    det.train()
    for epoch in range(config.epochs):
        order = rng.permutation(len(records))
        total = 0.0
        for start in range(0, len(order), config.batch_size):
            idx = order[start:start + config.batch_size]
            heads = det.forward_heads(images[idx])
            cls, reg, _ = detection_loss_terms(heads, [targets[i] for i in idx])
            loss = cls + reg
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += float(loss.detach()) * len(idx)
        sched.step()
        curve.append(total / len(records))
        log.info("detector epoch %d loss %.5f", epoch, curve[-1])
        if on_epoch is not None:
            on_epoch(epoch, curve[-1])
    det.eval()
    return det, curve


def save_detector(path, det: TinyDetector, extra: dict | None = None) -> None:
    arrays = {f"param/{k}": v.detach().cpu().numpy() for k, v in det.state_dict().items()}
    meta = {"kind": "tiny_detector", "version": __version__, "config": asdict(det.config),
            "eval": asdict(det.eval_config), **(extra or {})}
    arrays["meta"] = np.array(json.dumps(meta))
    atomic_write(path, lambda f: np.savez(f, **arrays))


def load_detector(path, freeze=True) -> TinyDetector:
    with np.load(path, allow_pickle=False) as data:
        meta = json.loads(str(data["meta"]))
        if meta.get("kind") != "tiny_detector":
            raise DataError(f"{path} is not a tiny-detector checkpoint")
        state = {k[len("param/"):]: torch.from_numpy(data[k].copy()) for k in data.files if k.startswith("param/")}
    det = TinyDetector(TinyDetectorConfig(**meta["config"]))
    try:
        det.load_state_dict(state)
    except RuntimeError as exc:
        raise CompatibilityError(f"{path}: parameters do not fit the stored config ({exc})") from exc
    det.eval_config = EvalConfig(**meta.get("eval", {}))
    det.eval()
    return det.freeze() if freeze else det
