"""``nightlift`` command line.

Exit codes: 0 success, 2 config error, 3 data error, 4 numeric failure.
Randomised commands take ``--seed``; without it ``NIGHTLIFT_SEED`` is used,
and failing that a seed is drawn and printed.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import secrets
import sys
from pathlib import Path

import numpy as np
import yaml

from .errors import ConfigError, DataError, NightliftError, NumericError, ShapeError

log = logging.getLogger("nightlift")


def resolve_seed(value) -> int:
    if value is not None:
        return int(value)
    env = os.environ.get("NIGHTLIFT_SEED")
    if env:
        try:
            return int(env)
        except ValueError:
            raise ConfigError(f"NIGHTLIFT_SEED must be an integer, got {env!r}") from None
    seed = secrets.randbelow(2**31)
    print(f"seed: {seed}")
    return seed


def _load_images(source):
    """(ids, arrays, records-or-None) from a manifest file or an image directory."""
    from .dataset import read_manifest
    from .imaging import read_image

    source = Path(source)
    if source.is_dir():
        paths = sorted(p for p in source.iterdir() if p.suffix.lower() in (".png", ".jpg", ".jpeg"))
        return [p.stem for p in paths], [read_image(p).data for p in paths], None
    records = read_manifest(source)
    return [r.id for r in records], [r.load() for r in records], records


def _contrast(args):
    from .pipeline import ContrastConfig

    return ContrastConfig(threshold=args.contrast_threshold, gain=args.contrast_gain,
                          enabled=args.contrast, mode=args.contrast_mode)


def _add_contrast(p):
    p.add_argument("--contrast", action="store_true", help="apply contrast preprocessing before translation")
    p.add_argument("--contrast-threshold", type=float, default=0.2, help="values below are multiplied by the gain")
    p.add_argument("--contrast-gain", type=float, default=1.5, help="gain for dark values")
    p.add_argument("--contrast-mode", choices=("linear", "gamma"), default="linear", help="piecewise-linear map or gamma curve")


# ------------------------------------------------------------ subcommands

def cmd_make_toy_data(args):
    from .toydata import make_toy_data

    seed = resolve_seed(args.seed)
    paths = make_toy_data(args.out, args.n_images, seed, size=args.size, n_test=args.n_test,
                          n_styles=args.n_styles)
    for name, path in paths.items():
        print(f"{name}: {path}")


def cmd_stylemix(args):
    from .imaging import write_image
    from .stylemix import StyleMixConfig, StylePool, generate_pair, pair_seed

    seed = resolve_seed(args.seed)
    ids, images, _ = _load_images(args.input)
    pool = StylePool.from_dir(args.styles)
    cfg = StyleMixConfig(alpha=args.alpha, pool_size=args.pool_size or pool.count,
                         per_pixel_coeffs=args.per_pixel, seed=seed)
    out = Path(args.out)
    for n, (iid, img) in enumerate(zip(ids, images)):
        pair = generate_pair(img, cfg, pool, pair_seed(seed, n))
        write_image(out / f"{iid}_mn1.png", pair.mn1)
        write_image(out / f"{iid}_mn2.png", pair.mn2)
    print(f"wrote {2 * len(ids)} mixed images to {out}")


def cmd_train_detector(args):
    from .boxes import EvalConfig
    from .dataset import read_manifest
    from .detector import DetectorTrainConfig, TinyDetectorConfig, save_detector, tiny_detector_train

    seed = resolve_seed(args.seed)
    records = read_manifest(args.manifest)
    cfg = DetectorTrainConfig(epochs=args.epochs, batch_size=args.batch_size, lr=args.lr,
                              optimizer=args.optimizer, seed=seed, eval=EvalConfig())
    det, curve = tiny_detector_train([(r.load(), r.boxes) for r in records], cfg,
                                     TinyDetectorConfig(seed=seed))
    save_detector(args.out, det, {"train_config": {"epochs": args.epochs, "lr": args.lr, "seed": seed}})
    print(f"final loss {curve[-1]:.5f}" if curve else "no epochs run")
    print(f"detector: {args.out}")


def _parse_set(items):
    out = {}
    for item in items or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, raw = item.split("=", 1)
        out[key.strip()] = yaml.safe_load(raw)
    return out


def cmd_train_kpn(args):
    from .dataset import read_manifest
    from .detector import load_detector
    from .pipeline import TrainConfig, dump_config, load_config, override, train_kpn
    from .stylemix import StylePool

    cfg = load_config(args.config) if args.config else TrainConfig()
    overrides = _parse_set(args.set)
    for flag, key in (("kpn_lr", "kpn_lr"), ("epochs", "kpn_epochs"), ("max_steps", "max_steps"),
                      ("batch_size", "batch_size"), ("lam", "loss.lam"), ("k", "kpn.k"),
                      ("base_channels", "kpn.base_channels")):
        value = getattr(args, flag)
        if value is not None:
            overrides[key] = value
    if args.seed is not None or not (args.config and "seed" in _raw_keys(args.config)):
        overrides["seed"] = resolve_seed(args.seed)
    cfg = override(cfg, overrides)
    records = read_manifest(args.manifest)
    if not records:
        raise DataError(f"{args.manifest} has no records")
    pool = StylePool.from_dir(args.styles)
    if cfg.stylemix.pool_size > pool.count:
        cfg = override(cfg, {"stylemix.pool_size": pool.count})
    detector = load_detector(args.detector) if args.detector else None
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.yaml").write_text(dump_config(cfg))
    result = train_kpn(cfg, [r.load() for r in records], pool, detector=detector,
                       day_boxes=[r.boxes for r in records], out_dir=out, resume=args.resume)
    if result.detector_digest_before != result.detector_digest_after:
        raise NightliftError("detector parameters changed during KPN training")
    last = result.log[-1] if result.log else {}
    print(f"steps: {len(result.log)}  last total: {last.get('total', float('nan')):.5f}")
    print(f"checkpoint: {result.last_checkpoint}")


def _raw_keys(path):
    data = yaml.safe_load(Path(path).read_text()) or {}
    return set(data) if isinstance(data, dict) else set()


def cmd_translate(args):
    from .imaging import clamp_to_unit, write_image
    from .kpn import load_checkpoint, translate
    from .pipeline import contrast_enhance

    model = load_checkpoint(args.kpn, expect_k=args.k)
    contrast = _contrast(args)
    ids, images, _ = _load_images(args.input)
    out = Path(args.out)
    for iid, img in zip(ids, images):
        write_image(out / f"{iid}.png", clamp_to_unit(translate(model, contrast_enhance(img, contrast)).raw))
    print(f"translated {len(ids)} images into {out}")


def cmd_detect(args):
    from .dataset import write_predictions
    from .detector import detect_batch, load_detector
    from .pipeline import infer_night

    ids, images, _ = _load_images(args.input)
    if args.kpn:
        results = infer_night(images, args.kpn, args.detector, _contrast(args), out_dir=args.out,
                              ids=ids, expect_k=args.k)
        print(f"{len(results)} images; detections in {Path(args.out) / 'detections'}")
        return
    dets = detect_batch(load_detector(args.detector), images)
    path = Path(args.out) / "detections" / "predictions.jsonl"
    write_predictions(path, ids, dets)
    print(f"{len(ids)} images; detections in {path}")


def cmd_eval_map(args):
    from .boxes import EvalConfig, evaluate
    from .dataset import read_manifest, read_predictions
    from .utils import atomic_write

    preds = read_predictions(args.pred)
    records = read_manifest(args.gt)
    gt_ids = [r.id for r in records]
    missing = sorted(set(gt_ids) - set(preds))
    extra = sorted(set(preds) - set(gt_ids))
    if missing or extra:
        raise DataError(f"image id mismatch; missing predictions: {missing[:20]}; "
                        f"unknown ids: {extra[:20]}")
    cfg = EvalConfig(iou_threshold=args.iou, eleven_point=args.eleven_point)
    result = evaluate([preds[i] for i in gt_ids], [r.boxes for r in records], cfg)
    report = {
        "mAP": result["mAP"],
        "per_class": {str(k): v for k, v in result["per_class"].items()},
        "pr_samples": {str(k): _sample_curve(*c) for k, c in result["curves"].items()},
        "iou_threshold": cfg.iou_threshold,
        "n_images": len(gt_ids),
    }
    payload = json.dumps(report, indent=2)
    atomic_write(args.out, lambda f: f.write(payload), mode="w")
    print(f"mAP@{cfg.iou_threshold:g}: {result['mAP']:.4f}")


def _sample_curve(recall, precision, n=11):
    precision, recall = np.asarray(precision), np.asarray(recall)
    if len(recall) == 0:
        return []
    rows = []
    for r in np.linspace(0, 1, n):
        above = precision[recall >= r]
        rows.append([float(r), float(above.max()) if len(above) else 0.0])
    return rows


def cmd_selfcheck(args):
    from .selfcheck import print_table, run_checks

    results = run_checks()
    print_table(results)
    if not all(r.ok for r in results):
        return 1
    return 0


# ------------------------------------------------------------------ parser

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="nightlift", description="Night-to-day translation for a frozen day detector.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    p = sub.add_parser("make-toy-data", help="write a synthetic day/night dataset")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--n-images", type=int, default=200, help="day training images")
    p.add_argument("--n-test", type=int, default=None, help="test images (default n_images // 4)")
    p.add_argument("--n-styles", type=int, default=5, help="night style references to write")
    p.add_argument("--size", type=int, default=64, help="image side in pixels")
    p.add_argument("--seed", type=int, help="random seed (default: $NIGHTLIFT_SEED, else drawn and printed)")
    p.set_defaults(func=cmd_make_toy_data)

    p = sub.add_parser("stylemix", help="write StyleMix image pairs for day images")
    p.add_argument("--input", required=True, help="manifest or image directory")
    p.add_argument("--styles", required=True, help="directory of night style references")
    p.add_argument("--out", required=True, help="output directory for <id>_mn1.png / <id>_mn2.png")
    p.add_argument("--alpha", type=float, default=1.0, help="Dirichlet concentration")
    p.add_argument("--pool-size", type=int, default=None, help="use the first N style references (default: all)")
    p.add_argument("--per-pixel", action="store_true", help="per-pixel Dirichlet coefficients")
    p.add_argument("--seed", type=int, help="random seed (default: $NIGHTLIFT_SEED, else drawn and printed)")
    p.set_defaults(func=cmd_stylemix)

    p = sub.add_parser("train-detector", help="train the tiny day detector")
    p.add_argument("--manifest", required=True, help="day image manifest with boxes")
    p.add_argument("--out", required=True, help="checkpoint path (.npz)")
    p.add_argument("--epochs", type=int, default=30, help="training epochs")
    p.add_argument("--batch-size", type=int, default=16, help="images per step")
    p.add_argument("--lr", type=float, default=2e-3, help="initial learning rate (halved every 10 epochs)")
    p.add_argument("--optimizer", choices=("adam", "sgd"), default="adam", help="optimizer (sgd uses momentum 0.9)")
    p.add_argument("--seed", type=int, help="random seed (default: $NIGHTLIFT_SEED, else drawn and printed)")
    p.set_defaults(func=cmd_train_detector)

    p = sub.add_parser("train-kpn", help="train the KPN on StyleMix pairs")
    p.add_argument("--manifest", required=True, help="day image manifest")
    p.add_argument("--styles", required=True, help="directory of night style references")
    p.add_argument("--detector", help="frozen detector checkpoint (needed when lam > 0)")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--config", help="YAML file mirroring TrainConfig")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override any config key, e.g. kpn.k=3")
    p.add_argument("--kpn-lr", type=float, help="SGD learning rate (config: kpn_lr)")
    p.add_argument("--epochs", type=int, help="epochs (config: kpn_epochs)")
    p.add_argument("--max-steps", type=int, help="stop after this many steps in total")
    p.add_argument("--batch-size", type=int, help="image pairs per step")
    p.add_argument("--lam", type=float, help="detection loss weight (config: loss.lam)")
    p.add_argument("--k", type=int, help="kernel size, odd (config: kpn.k)")
    p.add_argument("--base-channels", type=int, help="U-Net width (config: kpn.base_channels)")
    p.add_argument("--resume", help="training checkpoint to continue from")
    p.add_argument("--seed", type=int, help="random seed (default: $NIGHTLIFT_SEED, else drawn and printed)")
    p.set_defaults(func=cmd_train_kpn)

    p = sub.add_parser("translate", help="translate night images with a trained KPN")
    p.add_argument("--kpn", required=True, help="KPN checkpoint")
    p.add_argument("--input", required=True, help="manifest or image directory")
    p.add_argument("--out", required=True, help="output directory for translated PNGs")
    p.add_argument("--k", type=int, help="expected kernel size")
    _add_contrast(p)
    p.set_defaults(func=cmd_translate)

    p = sub.add_parser("detect", help="run the detector, optionally after KPN translation")
    p.add_argument("--detector", required=True, help="detector checkpoint")
    p.add_argument("--input", required=True, help="manifest or image directory")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--kpn", help="translate first with this KPN checkpoint")
    p.add_argument("--k", type=int, help="expected kernel size")
    _add_contrast(p)
    p.set_defaults(func=cmd_detect)

    p = sub.add_parser("eval-map", help="score a prediction dump against a manifest")
    p.add_argument("--pred", required=True, help="prediction dump (JSON lines)")
    p.add_argument("--gt", required=True, help="ground-truth manifest")
    p.add_argument("--out", required=True, help="JSON report path")
    p.add_argument("--iou", type=float, default=0.5, help="IoU threshold for a true positive")
    p.add_argument("--eleven-point", action="store_true", help="11-point interpolated AP")
    p.set_defaults(func=cmd_eval_map)

    p = sub.add_parser("selfcheck", help="run the fast invariant checks")
    p.set_defaults(func=cmd_selfcheck)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        code = args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (DataError, ShapeError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return 4
    except NightliftError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    return int(code or 0)


if __name__ == "__main__":
    sys.exit(main())
