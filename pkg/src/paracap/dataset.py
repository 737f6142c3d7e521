"""Data model and file schemas: images, detections, paragraphs, captions.

A dataset is a JSON file of image records. Each record carries the image
dimensions, an optional pointer to a P6 PPM pixel file, the detected objects
(label, bounding box, optional feature vector), and the ground-truth
paragraph as a list of sentences. Feature vectors all share the dataset-level
``feature_dim``. Everything is immutable after load.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np

from .errors import PixelFormatError, SchemaError
from .ppm import read_ppm

_TOKEN_RE = re.compile(r"[a-z0-9]+")
_SENTENCE_SPLIT_RE = re.compile(r"[.!?]")


@dataclass(frozen=True)
class BBox:
    """Axis-aligned box: top-left corner (x, y) plus width and height, in pixels."""

    x: int
    y: int
    w: int
    h: int

    def __post_init__(self):
        for name in ("x", "y", "w", "h"):
            v = getattr(self, name)
            if not isinstance(v, int) or v < 0:
                raise SchemaError(f"bbox.{name} must be a non-negative integer, got {v!r}")
        if self.w < 1 or self.h < 1:
            raise SchemaError(f"bbox must have w >= 1 and h >= 1, got w={self.w} h={self.h}")

    @property
    def x2(self) -> int:
        return self.x + self.w

    @property
    def y2(self) -> int:
        return self.y + self.h


@dataclass(frozen=True)
class DetectedObject:
    """One detected region: integer id, lowercase label, box, optional feature."""

    id: int
    label: str
    bbox: BBox
    feature: tuple[float, ...] | None = None


@dataclass(frozen=True)
class ImageRecord:
    """An image with its detections and ground-truth paragraph."""

    id: str
    width: int
    height: int
    objects: tuple[DetectedObject, ...]
    paragraph: tuple[str, ...]
    pixel_source: str | None = None

    def object_by_id(self, obj_id: int) -> DetectedObject:
        for obj in self.objects:
            if obj.id == obj_id:
                return obj
        raise KeyError(f"image {self.id}: no object with id {obj_id}")


@dataclass(frozen=True)
class Dataset:
    """Loaded dataset: shared feature dimension plus the image records.

    ``base_dir`` is the directory pixel_source paths resolve against (the
    directory of the source JSON file); it does not take part in equality.
    """

    feature_dim: int
    images: tuple[ImageRecord, ...]
    base_dir: Path | None = field(default=None, compare=False)

    def __len__(self) -> int:
        return len(self.images)

    def __iter__(self) -> Iterator[ImageRecord]:
        return iter(self.images)

    def __getitem__(self, idx) -> ImageRecord:
        return self.images[idx]

    def image_by_id(self, image_id: str) -> ImageRecord:
        for rec in self.images:
            if rec.id == image_id:
                return rec
        raise KeyError(f"no image with id {image_id!r}")

    def resolve_pixels(self, record: ImageRecord) -> np.ndarray:
        """Load the record's PPM pixels, resolving relative to base_dir."""
        if record.pixel_source is None:
            raise SchemaError(f"image {record.id}: no pixel_source")
        path = Path(record.pixel_source)
        if not path.is_absolute() and self.base_dir is not None:
            path = self.base_dir / path
        return read_ppm(path)


@dataclass(frozen=True)
class CaptionSet:
    """Generated paragraphs keyed by image id."""

    entries: dict[str, tuple[str, ...]]

    def __len__(self) -> int:
        return len(self.entries)

    def __contains__(self, image_id: str) -> bool:
        return image_id in self.entries


@dataclass
class ValidationReport:
    ok: bool
    issues: list[str]


def tokenize(text: str) -> list[str]:
    """Lowercase, replace every non-[a-z0-9] character by a space, split.

    Empty tokens are dropped; the result is the word granularity used for
    alignment and all text metrics.
    """
    return _TOKEN_RE.findall(text.lower())


def split_sentences(text: str) -> list[str]:
    """Split raw paragraph text on '.', '!' and '?'; trim; drop empties."""
    parts = (seg.strip() for seg in _SENTENCE_SPLIT_RE.split(text))
    return [seg for seg in parts if seg]


def concat_object_feature(
    obj: DetectedObject,
    image_width: int,
    image_height: int,
    normalize: bool = True,
) -> np.ndarray:
    """Concatenate an object's feature vector with its box geometry.

    The box components are appended in (h, w, y, x) order. With
    ``normalize`` (the default) heights/y are divided by the image height
    and widths/x by the image width, so box entries land in [0, 1]; raw
    pixel values are kept otherwise.
    """
    if obj.feature is None:
        raise SchemaError(f"object {obj.id} ({obj.label}): missing feature vector")
    b = obj.bbox
    if normalize:
        box = (b.h / image_height, b.w / image_width, b.y / image_height, b.x / image_width)
    else:
        box = (float(b.h), float(b.w), float(b.y), float(b.x))
    return np.concatenate([np.asarray(obj.feature, dtype=np.float64), box])


def validate(dataset: Dataset | Iterable[ImageRecord],
             feature_dim: int | None = None,
             base_dir: Path | None = None) -> ValidationReport:
    """Check every record invariant; report violations instead of raising.

    Accepts either a Dataset (which supplies feature_dim and base_dir) or a
    bare iterable of records.
    """
    if isinstance(dataset, Dataset):
        feature_dim = dataset.feature_dim
        base_dir = dataset.base_dir
        records = dataset.images
    else:
        records = tuple(dataset)

    issues: list[str] = []
    for rec in records:
        seen_ids: set[int] = set()
        for obj in rec.objects:
            ctx = f"image {rec.id}, object {obj.id}"
            if obj.id in seen_ids:
                issues.append(f"{ctx}: duplicate object id")
            seen_ids.add(obj.id)
            if not tokenize(obj.label):
                issues.append(f"{ctx}: label empty after tokenization ({obj.label!r})")
            if obj.bbox.x2 > rec.width or obj.bbox.y2 > rec.height:
                issues.append(
                    f"{ctx}: bbox {obj.bbox} exceeds image bounds "
                    f"{rec.width}x{rec.height}"
                )
            if obj.feature is not None and feature_dim is not None \
                    and len(obj.feature) != feature_dim:
                issues.append(
                    f"{ctx}: feature length {len(obj.feature)} != feature_dim {feature_dim}"
                )
        if len(rec.paragraph) == 0:
            issues.append(f"image {rec.id}: empty paragraph")
        if rec.pixel_source is not None:
            path = Path(rec.pixel_source)
            if not path.is_absolute() and base_dir is not None:
                path = base_dir / path
            try:
                pixels = read_ppm(path)
            except (OSError, PixelFormatError) as exc:
                issues.append(f"image {rec.id}: pixel_source unreadable: {exc}")
            else:
                ph, pw = pixels.shape[:2]
                if (pw, ph) != (rec.width, rec.height):
                    issues.append(
                        f"image {rec.id}: pixel_source is {pw}x{ph}, "
                        f"record says {rec.width}x{rec.height}"
                    )
    return ValidationReport(ok=not issues, issues=issues)


def _require(mapping: dict, key: str, ctx: str):
    if key not in mapping:
        raise SchemaError(f"{ctx}: missing field {key!r}")
    return mapping[key]


def _parse_record(entry: dict, idx: int) -> ImageRecord:
    image_id = entry.get("id")
    ctx = f"image {image_id!r}" if image_id is not None else f"images[{idx}]"
    if not isinstance(image_id, str) or not image_id:
        raise SchemaError(f"{ctx}: field 'id' must be a non-empty string")
    width = _require(entry, "width", ctx)
    height = _require(entry, "height", ctx)
    if not isinstance(width, int) or not isinstance(height, int) or width < 1 or height < 1:
        raise SchemaError(f"{ctx}: width/height must be positive integers")

    objects = []
    for obj_entry in _require(entry, "objects", ctx):
        obj_id = _require(obj_entry, "id", ctx)
        octx = f"{ctx}, object {obj_id}"
        if not isinstance(obj_id, int):
            raise SchemaError(f"{octx}: field 'id' must be an integer")
        label = _require(obj_entry, "label", octx)
        if not isinstance(label, str):
            raise SchemaError(f"{octx}: field 'label' must be a string")
        raw_box = _require(obj_entry, "bbox", octx)
        try:
            bbox = BBox(
                x=_require(raw_box, "x", octx),
                y=_require(raw_box, "y", octx),
                w=_require(raw_box, "w", octx),
                h=_require(raw_box, "h", octx),
            )
        except SchemaError as exc:
            raise SchemaError(f"{octx}: {exc}") from None
        feature = obj_entry.get("feature")
        if feature is not None:
            if not isinstance(feature, list) or not all(
                isinstance(v, (int, float)) for v in feature
            ):
                raise SchemaError(f"{octx}: field 'feature' must be a list of numbers")
            feature = tuple(float(v) for v in feature)
        objects.append(DetectedObject(id=obj_id, label=label.lower(), bbox=bbox,
                                      feature=feature))

    paragraph = _require(entry, "paragraph", ctx)
    if isinstance(paragraph, str):
        paragraph = split_sentences(paragraph)
    if not isinstance(paragraph, list) or not all(isinstance(s, str) for s in paragraph):
        raise SchemaError(f"{ctx}: field 'paragraph' must be a string or list of strings")

    pixel_source = entry.get("pixel_source")
    if pixel_source is not None and not isinstance(pixel_source, str):
        raise SchemaError(f"{ctx}: field 'pixel_source' must be a string path")

    return ImageRecord(
        id=image_id,
        width=width,
        height=height,
        objects=tuple(objects),
        paragraph=tuple(paragraph),
        pixel_source=pixel_source,
    )


def load_dataset(path) -> Dataset:
    """Load and validate a dataset JSON file.

    Record order follows file order. Any schema violation or invariant
    failure raises SchemaError naming the offending image and field.
    """
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise SchemaError(f"{path}: not valid JSON: {exc}") from None

    if not isinstance(raw, dict):
        raise SchemaError(f"{path}: top level must be an object")
    feature_dim = _require(raw, "feature_dim", str(path))
    if not isinstance(feature_dim, int) or feature_dim < 0:
        raise SchemaError(f"{path}: feature_dim must be a non-negative integer")
    entries = _require(raw, "images", str(path))
    if not isinstance(entries, list):
        raise SchemaError(f"{path}: 'images' must be an array")

    records = tuple(_parse_record(entry, i) for i, entry in enumerate(entries))
    ids = [rec.id for rec in records]
    if len(set(ids)) != len(ids):
        dupes = sorted({i for i in ids if ids.count(i) > 1})
        raise SchemaError(f"{path}: duplicate image ids {dupes}")

    dataset = Dataset(feature_dim=feature_dim, images=records, base_dir=path.parent)
    report = validate(dataset)
    if not report.ok:
        raise SchemaError(f"{path}: validation failed: " + "; ".join(report.issues))
    return dataset


def write_dataset(dataset: Dataset, path) -> None:
    """Serialize a dataset back to its JSON schema (round-trips with load)."""
    out = {
        "feature_dim": dataset.feature_dim,
        "images": [
            {
                "id": rec.id,
                "width": rec.width,
                "height": rec.height,
                **({"pixel_source": rec.pixel_source} if rec.pixel_source else {}),
                "objects": [
                    {
                        "id": obj.id,
                        "label": obj.label,
                        "bbox": {"x": obj.bbox.x, "y": obj.bbox.y,
                                 "w": obj.bbox.w, "h": obj.bbox.h},
                        **({"feature": list(obj.feature)} if obj.feature is not None else {}),
                    }
                    for obj in rec.objects
                ],
                "paragraph": list(rec.paragraph),
            }
            for rec in dataset.images
        ],
    }
    Path(path).write_text(json.dumps(out, indent=2, sort_keys=True) + "\n")


def load_captions(path) -> CaptionSet:
    """Load generated paragraphs: entries carry either pre-split sentences
    (``paragraph``) or raw text (``text``, split on sentence terminators)."""
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise SchemaError(f"{path}: not valid JSON: {exc}") from None
    entries = _require(raw, "captions", str(path))
    out: dict[str, tuple[str, ...]] = {}
    for i, entry in enumerate(entries):
        image_id = entry.get("image_id")
        ctx = f"captions[{i}]"
        if not isinstance(image_id, str) or not image_id:
            raise SchemaError(f"{ctx}: 'image_id' must be a non-empty string")
        if "paragraph" in entry:
            sentences = entry["paragraph"]
            if not isinstance(sentences, list) or not all(isinstance(s, str) for s in sentences):
                raise SchemaError(f"{ctx} ({image_id}): 'paragraph' must be a list of strings")
        elif "text" in entry:
            if not isinstance(entry["text"], str):
                raise SchemaError(f"{ctx} ({image_id}): 'text' must be a string")
            sentences = split_sentences(entry["text"])
        else:
            raise SchemaError(f"{ctx} ({image_id}): need 'paragraph' or 'text'")
        out[image_id] = tuple(sentences)
    return CaptionSet(entries=out)
