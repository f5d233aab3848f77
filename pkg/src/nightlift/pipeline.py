"""Training and inference orchestration.

Stage 1 trains the day detector (``detector.tiny_detector_train``); stage 2
trains the KPN on StyleMix pairs with the detector frozen; inference runs
contrast preprocessing, translation and detection on night images.
"""
from __future__ import annotations

import json
import logging
import queue
import threading
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import torch
import yaml

from . import __version__
from .boxes import BoxSet, EvalConfig
from .dataset import write_predictions
from .detector import detect_batch, load_detector
from .errors import CompatibilityError, ConfigError, NumericError
from .imaging import as_image_array, clamp_to_unit, write_image
from .kpn import KpnConfig, KpnModel, load_checkpoint, translate
from .losses import LossWeights, l_det, l_det_cons, l_pix, l_pix_cons, total_loss
from .stylemix import StyleMixConfig, StylePool, generate_pair, pair_seed
from .utils import atomic_write, parameter_digest

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    kpn_lr: float = 0.002
    kpn_epochs: int = 200
    # counts MN images, as in "2,000 augmixed images"; each pair yields two
    pairs_per_epoch: int = 2000
    batch_size: int = 4
    momentum: float = 0.9
    weight_decay: float = 0.0
    max_steps: int | None = None
    det_lr: float = 0.0001
    det_lr_decay_every: int = 10
    loss: LossWeights = field(default_factory=LossWeights)
    stylemix: StyleMixConfig = field(default_factory=StyleMixConfig)
    kpn: KpnConfig = field(default_factory=KpnConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    seed: int = 0
    prefetch: int = 4
    log_every: int = 1

    def __post_init__(self):
        if self.kpn_lr <= 0 or self.det_lr <= 0:
            raise ConfigError("learning rates must be positive")
        if self.kpn_epochs < 1 or self.pairs_per_epoch < 1 or self.batch_size < 1:
            raise ConfigError("epochs, pairs_per_epoch and batch_size must be >= 1")

    @property
    def n_pairs(self) -> int:
        return max(self.pairs_per_epoch // 2, 1)

    @property
    def steps_per_epoch(self) -> int:
        return -(-self.n_pairs // self.batch_size)

    def to_dict(self) -> dict:
        return asdict(self)


_NESTED = {"loss": LossWeights, "stylemix": StyleMixConfig, "kpn": KpnConfig, "eval": EvalConfig}


def config_from_dict(data: dict) -> TrainConfig:
    data = dict(data or {})
    known = {f.name for f in fields(TrainConfig)}
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    kwargs = {}
    for key, value in data.items():
        if key in _NESTED and isinstance(value, dict):
            sub_known = {f.name for f in fields(_NESTED[key])}
            bad = set(value) - sub_known
            if bad:
                raise ConfigError(f"unknown keys in {key}: {sorted(bad)}")
            value = _NESTED[key](**value)
        kwargs[key] = value
    try:
        return TrainConfig(**kwargs)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def load_config(path) -> TrainConfig:
    try:
        data = yaml.safe_load(Path(path).read_text()) or {}
    except (OSError, yaml.YAMLError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"{path} must hold a key-value mapping")
    return config_from_dict(data)


def dump_config(config: TrainConfig) -> str:
    return yaml.safe_dump(config.to_dict(), sort_keys=False)


def override(config: TrainConfig, dotted: dict) -> TrainConfig:
    """Return a copy with ``{"kpn.k": 3, "seed": 5}``-style overrides applied."""
    data = config.to_dict()
    for key, value in dotted.items():
        parts = key.split(".")
        target = data
        for p in parts[:-1]:
            if p not in target or not isinstance(target[p], dict):
                raise ConfigError(f"unknown config section {p!r} in {key!r}")
            target = target[p]
        if parts[-1] not in target:
            raise ConfigError(f"unknown config key {key!r}")
        target[parts[-1]] = value
    return config_from_dict(data)


@dataclass
class ContrastConfig:
    threshold: float = 0.2
    gain: float = 1.5
    enabled: bool = True
    mode: str = "linear"  # or "gamma"

    def __post_init__(self):
        if not 0 < self.threshold < 1:
            raise ConfigError(f"threshold must lie in (0, 1), got {self.threshold}")
        if self.gain < 1:
            raise ConfigError(f"gain must be >= 1, got {self.gain}")
        if self.threshold * self.gain > 1:
            raise ConfigError("threshold * gain must not exceed 1")
        if self.mode not in ("linear", "gamma"):
            raise ConfigError(f"unknown contrast mode {self.mode!r}")


def contrast_enhance(image, cfg: ContrastConfig | None = None) -> np.ndarray:
    """Lift dark values: ``gain * v`` below the threshold, then a straight line to (1, 1)."""
    cfg = cfg or ContrastConfig()
    img = as_image_array(image)
    if not cfg.enabled:
        return img
    if cfg.mode == "gamma":
        return np.power(np.clip(img, 0, 1), 1.0 / cfg.gain)
    t, g = cfg.threshold, cfg.gain
    upper = g * t + (img - t) * (1.0 - g * t) / (1.0 - t)
    return np.where(img < t, g * img, upper)


# ---------------------------------------------------------------- training

class _PairProducer:
    """Generates StyleMix batches ahead of the training loop through a bounded queue."""

    def __init__(self, schedule, days, config, pool, stylizer, targets):
        self.schedule = schedule
        self.days = days
        self.config = config
        self.pool = pool
        self.stylizer = stylizer
        self.targets = targets
        self.q = queue.Queue(maxsize=max(config.prefetch, 1))
        self._stop = threading.Event()
        self.thread = threading.Thread(target=self._run, daemon=True)
        self.thread.start()

    def _run(self):
        try:
            for item in self.schedule:
                if self._stop.is_set():
                    return
                self.q.put(self._build(*item))
            self.q.put(None)
        except BaseException as exc:  # surfaced in the consumer
            self.q.put(exc)

    def _build(self, epoch, step, picks):
        cfg = self.config
        mn1, mn2, tgt, tg = [], [], [], []
        for index, day_idx in picks:
            pair = generate_pair(self.days[day_idx], cfg.stylemix, self.pool,
                                 pair_seed(cfg.seed, index, epoch), self.stylizer)
            mn1.append(pair.mn1)
            mn2.append(pair.mn2)
            tgt.append(pair.target)
            if self.targets is not None:
                tg.append(self.targets[day_idx])
        return epoch, step, _batch(mn1), _batch(mn2), _batch(tgt), tg

    def __iter__(self):
        while True:
            item = self.q.get()
            if item is None:
                return
            if isinstance(item, BaseException):
                raise item
            yield item

    def close(self):
        self._stop.set()
        while self.thread.is_alive():
            try:
                self.q.get_nowait()
            except queue.Empty:
                self.thread.join(timeout=0.05)


def _batch(images) -> torch.Tensor:
    arr = np.stack([as_image_array(im) for im in images]).astype(np.float32)
    return torch.from_numpy(np.ascontiguousarray(arr.transpose(0, 3, 1, 2)))


def epoch_order(config: TrainConfig, n_days: int, epoch: int) -> np.ndarray:
    """Day index for every pair of an epoch: shuffled passes over the day set."""
    rng = np.random.default_rng([config.seed, epoch, 0xDA7])
    reps = -(-config.n_pairs // n_days)
    return np.concatenate([rng.permutation(n_days) for _ in range(reps)])[: config.n_pairs]


def _schedule(config, n_days, start_epoch, start_step):
    bs = config.batch_size
    for epoch in range(start_epoch, config.kpn_epochs):
        order = epoch_order(config, n_days, epoch)
        first = start_step if epoch == start_epoch else 0
        for step in range(first, config.steps_per_epoch):
            lo = step * bs
            picks = [(i, int(order[i])) for i in range(lo, min(lo + bs, len(order)))]
            yield epoch, step, picks


@dataclass
class TrainResult:
    model: KpnModel
    log: list
    detector_digest_before: str | None = None
    detector_digest_after: str | None = None
    last_checkpoint: Path | None = None


def train_kpn(config: TrainConfig, days, pool: StylePool, detector=None, day_boxes=None,
              out_dir=None, resume=None, stylizer=None, model=None) -> TrainResult:
    """Train the KPN on StyleMix pairs, optionally through a frozen detector.

    ``days``: list of day images; ``day_boxes``: matching BoxSets (needed when
    the detection weight is positive). Detection targets are matched once on
    the day ground truth and reused for both translated branches.
    """
    days = [as_image_array(d) for d in days]
    if not days:
        raise ConfigError("no day images to train on")
    use_det = detector is not None and config.loss.lam > 0
    if use_det and day_boxes is None:
        raise ConfigError("detection losses need ground-truth boxes for the day images")
    targets = None
    digest_before = None
    if detector is not None:
        detector.freeze()
        digest_before = parameter_digest(detector)
        if use_det:
            targets = [detector.match_targets(b, d.shape[:2]) for d, b in zip(days, day_boxes)]

    start_epoch = start_step = 0
    global_step = 0
    if resume is not None:
        model, opt_state, pos = load_training_state(resume, config)
        start_epoch, start_step, global_step = pos
    elif model is None:
        model = KpnModel(config.kpn)
    if model.config.k != config.kpn.k:
        raise CompatibilityError(f"model k={model.config.k} but config k={config.kpn.k}")
    model.train()
    opt = torch.optim.SGD(model.parameters(), lr=config.kpn_lr, momentum=config.momentum,
                          weight_decay=config.weight_decay)
    if resume is not None:
        opt.load_state_dict(opt_state)

    out_dir = Path(out_dir) if out_dir is not None else None
    ckpt_dir = out_dir / "checkpoints" if out_dir else None
    log_path = out_dir / "logs" / "train_kpn.jsonl" if out_dir else None
    if log_path is not None:
        log_path.parent.mkdir(parents=True, exist_ok=True)
        if resume is None:
            log_path.write_text("")
    last_ckpt = None
    history = []
    producer = _PairProducer(_schedule(config, len(days), start_epoch, start_step),
                             days, config, pool, stylizer, targets)
    try:
        for epoch, step, mn1, mn2, target, tg in producer:
            if config.max_steps is not None and global_step >= config.max_steps:
                break
            report = _train_step(model, opt, config, mn1, mn2, target, detector if use_det else None, tg)
            if not np.isfinite(report.total):
                raise NumericError(f"non-finite loss at epoch {epoch} step {step}; "
                                   f"last good checkpoint: {last_ckpt}")
            record = {"epoch": epoch, "step": step, "global_step": global_step, **report.as_dict()}
            history.append(record)
            if log_path is not None and global_step % config.log_every == 0:
                with open(log_path, "a") as f:
                    f.write(json.dumps(record) + "\n")
            global_step += 1
            if step == config.steps_per_epoch - 1 and ckpt_dir is not None:
                last_ckpt = ckpt_dir / "kpn_last.npz"
                save_training_state(last_ckpt, model, opt, config, (epoch + 1, 0, global_step))
                log.info("epoch %d done, step %d, total %.5f", epoch, global_step, report.total)
    finally:
        producer.close()
    if ckpt_dir is not None:
        last_ckpt = ckpt_dir / "kpn_last.npz"
        pos = (history[-1]["epoch"], history[-1]["step"] + 1, global_step) if history else (start_epoch, start_step, global_step)
        if history and pos[1] >= config.steps_per_epoch:
            pos = (pos[0] + 1, 0, global_step)
        save_training_state(last_ckpt, model, opt, config, pos)
    model.eval()
    digest_after = parameter_digest(detector) if detector is not None else None
    return TrainResult(model, history, digest_before, digest_after, last_ckpt)


def _train_step(model, opt, config, mn1, mn2, target, detector, targets):
    dtype = model.head.weight.dtype
    mn1, mn2, target = mn1.to(dtype), mn2.to(dtype), target.to(dtype)
    out1 = model.translate_tensor(mn1)
    out2 = model.translate_tensor(mn2)
    lp = 0.5 * (l_pix(out1, target) + l_pix(out2, target))
    lpc = l_pix_cons(out1, out2)
    unmatched = False
    if detector is not None:
        h1 = detector.forward_heads(out1.clamp(0, 1))
        h2 = detector.forward_heads(out2.clamp(0, 1))
        ld1, u1 = l_det(h1, targets)
        ld2, u2 = l_det(h2, targets)
        ld = 0.5 * (ld1 + ld2)
        ldc = l_det_cons(h1, h2)
        unmatched = u1 or u2
    else:
        ld = ldc = torch.zeros((), dtype=dtype)
    total, report = total_loss(lp, lpc, ld, ldc, config.loss, unmatched)
    opt.zero_grad()
    total.backward()
    opt.step()
    return report


def save_training_state(path, model, opt, config: TrainConfig, position) -> None:
    """Model parameters, momentum buffers, config and schedule position in one archive."""
    arrays = {f"param/{k}": v.detach().cpu().numpy() for k, v in model.state_dict().items()}
    names = [n for n, _ in model.named_parameters()]
    state = opt.state_dict()
    for idx, pstate in state["state"].items():
        buf = pstate.get("momentum_buffer")
        if buf is not None:
            arrays[f"momentum/{names[idx]}"] = buf.detach().cpu().numpy()
    meta = {"kind": "kpn", "version": __version__, "config": asdict(model.config),
            "init_bound": model.init_bound, "train_config": config.to_dict(),
            "position": list(position)}
    arrays["meta"] = np.array(json.dumps(meta))
    atomic_write(path, lambda f: np.savez(f, **arrays))


def load_training_state(path, config: TrainConfig):
    model = load_checkpoint(path, expect_k=config.kpn.k)
    with np.load(path, allow_pickle=False) as data:
        meta = json.loads(str(data["meta"]))
        buffers = {k[len("momentum/"):]: torch.from_numpy(data[k].copy())
                   for k in data.files if k.startswith("momentum/")}
    opt = torch.optim.SGD(model.parameters(), lr=config.kpn_lr, momentum=config.momentum,
                          weight_decay=config.weight_decay)
    state = opt.state_dict()
    for idx, (name, _) in enumerate(model.named_parameters()):
        if name in buffers:
            state["state"][idx] = {"momentum_buffer": buffers[name]}
    return model, state, tuple(meta.get("position", (0, 0, 0)))


# --------------------------------------------------------------- inference

@dataclass
class NightResult:
    id: str
    translated: np.ndarray
    detections: BoxSet


def infer_night(images, kpn, detector, contrast: ContrastConfig | None = None, out_dir=None,
                ids=None, expect_k: int | None = None) -> list[NightResult]:
    """contrast -> translate -> clamp -> detect, one result per input, in order."""
    if isinstance(kpn, (str, Path)):
        kpn = load_checkpoint(kpn, expect_k=expect_k)
    elif expect_k is not None and kpn.config.k != expect_k:
        raise CompatibilityError(f"KPN k={kpn.config.k} but expected k={expect_k}")
    if isinstance(detector, (str, Path)):
        detector = load_detector(detector)
    contrast = contrast or ContrastConfig(enabled=False)
    images = list(images)
    ids = list(ids) if ids is not None else [f"{i:05d}" for i in range(len(images))]
    translated = [clamp_to_unit(translate(kpn, contrast_enhance(im, contrast)).raw) for im in images]
    dets = detect_batch(detector, translated)
    results = [NightResult(i, t, d) for i, t, d in zip(ids, translated, dets)]
    if out_dir is not None:
        out = Path(out_dir)
        for r in results:
            write_image(out / "translated" / f"{r.id}.png", r.translated)
        write_predictions(out / "detections" / "predictions.jsonl", ids, dets)
    return results

