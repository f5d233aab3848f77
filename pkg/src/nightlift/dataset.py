"""JSON-lines manifests and prediction dumps.

Manifest record: ``{"image": path, "boxes": [[x1, y1, x2, y2, class], ...]}``
(paths relative to the manifest's directory). Optional keys: ``id``,
``night``, ``params``. Prediction dump record:
``{"image_id": str, "boxes": [[x1, y1, x2, y2], ...], "scores": [...]}``
with optional ``classes``.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .boxes import BoxSet
from .errors import DataError
from .imaging import read_image
from .utils import atomic_write


@dataclass
class Record:
    image: Path
    boxes: BoxSet
    id: str
    extra: dict = field(default_factory=dict)

    def load(self, channels=3) -> np.ndarray:
        return read_image(self.image, channels).data


def _lines(path):
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    for n, line in enumerate(text.splitlines(), 1):
        if line.strip():
            try:
                yield n, json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataError(f"{path}:{n}: invalid JSON ({exc})") from exc


def read_manifest(path) -> list[Record]:
    path = Path(path)
    records = []
    for n, obj in _lines(path):
        if "image" not in obj:
            raise DataError(f"{path}:{n}: record has no 'image'")
        try:
            boxes = BoxSet.from_rows(obj.get("boxes", []))
        except ValueError as exc:
            raise DataError(f"{path}:{n}: bad boxes ({exc})") from exc
        image = Path(obj["image"])
        if not image.is_absolute():
            image = path.parent / image
        rid = obj.get("id") or Path(obj["image"]).stem
        extra = {k: v for k, v in obj.items() if k not in ("image", "boxes", "id")}
        records.append(Record(image, boxes, rid, extra))
    return records


def write_jsonl(path, rows) -> None:
    payload = "".join(json.dumps(r, sort_keys=True) + "\n" for r in rows)
    atomic_write(path, lambda f: f.write(payload), mode="w")


def write_manifest(path, records) -> None:
    """``records``: iterables of dicts already in manifest layout."""
    write_jsonl(path, records)


def write_predictions(path, image_ids, boxsets) -> None:
    rows = []
    for iid, bs in zip(image_ids, boxsets):
        scores = bs.scores if bs.scores is not None else np.ones(len(bs))
        rows.append({"image_id": iid, "boxes": bs.boxes.tolist(), "scores": scores.tolist(),
                     "classes": bs.classes.tolist()})
    write_jsonl(path, rows)


def read_predictions(path) -> dict[str, BoxSet]:
    out = {}
    for n, obj in _lines(path):
        try:
            boxes = np.asarray(obj.get("boxes", []), dtype=np.float64).reshape(-1, 4)
            classes = obj.get("classes") or [0] * len(boxes)
            out[str(obj["image_id"])] = BoxSet(boxes, classes, obj.get("scores", [1.0] * len(boxes)))
        except (KeyError, ValueError) as exc:
            raise DataError(f"{path}:{n}: bad prediction record ({exc})") from exc
    return out
