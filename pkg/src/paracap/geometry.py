"""Combined-object canvases: zero-filled compositions that keep relative layout.

For each sentence, the pixels of its aligned objects are copied onto a black
canvas, translated so the union box corner lands at the origin. Canvas
dimensions are shared across a batch (componentwise max of union extents).
Sparse canvases can be integer-upscaled; a pooled per-cell descriptor stands
in for a CNN feature extractor at the same pipeline position.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .alignment import AlignmentRecord
from .dataset import BBox, Dataset, ImageRecord
from .errors import SchemaError
from .ppm import read_ppm, write_ppm  # noqa: F401  (canvas I/O surface)

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class CompositeSpec:
    """The objects of one sentence and their pre-translation union extent."""

    image_id: str
    sentence_index: int
    members: tuple[tuple[int, BBox], ...]  # (object id, source box)
    union: BBox

    @property
    def object_ids(self) -> tuple[int, ...]:
        return tuple(obj_id for obj_id, _ in self.members)


@dataclass
class CompositeCanvas:
    """Zero-filled RGB canvas with the placed (canvas-frame) boxes.

    Every pixel outside all placement boxes is (0, 0, 0); inside a placement
    box pixels equal the source image (before any enlargement).
    """

    pixels: np.ndarray
    placements: dict[int, BBox] = field(default_factory=dict)
    scale: int = 1

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    def placement_mask(self) -> np.ndarray:
        """Boolean (H, W) mask of pixels covered by any placement box."""
        mask = np.zeros(self.pixels.shape[:2], dtype=bool)
        for box in self.placements.values():
            mask[box.y : box.y2, box.x : box.x2] = True
        return mask

    def fill_ratio(self) -> float:
        return float(self.placement_mask().sum()) / (self.height * self.width)


def union_bbox(boxes: list[BBox]) -> BBox:
    """Smallest box covering every input box."""
    if not boxes:
        raise ValueError("union_bbox of an empty list")
    x1 = min(b.x for b in boxes)
    y1 = min(b.y for b in boxes)
    x2 = max(b.x2 for b in boxes)
    y2 = max(b.y2 for b in boxes)
    return BBox(x=x1, y=y1, w=x2 - x1, h=y2 - y1)


def make_composite_spec(record: ImageRecord, sentence_index: int,
                        object_ids: list[int] | tuple[int, ...]) -> CompositeSpec:
    """Resolve object ids against the image and compute the union extent."""
    if not object_ids:
        raise ValueError(f"image {record.id}: composite needs at least one object")
    members = tuple((obj_id, record.object_by_id(obj_id).bbox) for obj_id in object_ids)
    return CompositeSpec(
        image_id=record.id,
        sentence_index=sentence_index,
        members=members,
        union=union_bbox([box for _, box in members]),
    )


def batch_canvas_dims(specs: list[CompositeSpec]) -> tuple[int, int]:
    """Componentwise max of union-box heights and widths over the batch."""
    if not specs:
        raise ValueError("batch_canvas_dims of an empty batch")
    return (max(s.union.h for s in specs), max(s.union.w for s in specs))


def compose(pixels: np.ndarray, spec: CompositeSpec,
            dims: tuple[int, int] | None = None) -> CompositeCanvas:
    """Copy each member's source rectangle onto a zeroed canvas.

    Members are translated by (-union.x, -union.y); overlapping members copy
    identical source pixels so overlap order does not matter. ``dims``
    defaults to the spec's own union extent (single-image mode).
    """
    pixels = np.asarray(pixels)
    if pixels.ndim != 3 or pixels.shape[2] != 3:
        raise ValueError(f"expected (H, W, 3) pixels, got {pixels.shape}")
    img_h, img_w = pixels.shape[:2]
    if dims is None:
        dims = (spec.union.h, spec.union.w)
    canvas_h, canvas_w = dims
    if canvas_h < spec.union.h or canvas_w < spec.union.w:
        raise ValueError(
            f"canvas {canvas_h}x{canvas_w} smaller than union "
            f"{spec.union.h}x{spec.union.w}"
        )

    canvas = np.zeros((canvas_h, canvas_w, 3), dtype=np.uint8)
    placements: dict[int, BBox] = {}
    for obj_id, box in spec.members:
        if box.x2 > img_w or box.y2 > img_h:
            raise SchemaError(
                f"image {spec.image_id}, object {obj_id}: box {box} outside "
                f"{img_w}x{img_h} image"
            )
        tx, ty = box.x - spec.union.x, box.y - spec.union.y
        canvas[ty : ty + box.h, tx : tx + box.w] = pixels[box.y : box.y2, box.x : box.x2]
        placements[obj_id] = BBox(x=tx, y=ty, w=box.w, h=box.h)
    return CompositeCanvas(pixels=canvas, placements=placements, scale=1)


def _apply_scale(canvas: CompositeCanvas, s: int) -> CompositeCanvas:
    """Nearest-neighbor upscale of the placed content, re-centered and clipped."""
    if s == 1:
        return CompositeCanvas(pixels=canvas.pixels.copy(),
                               placements=dict(canvas.placements), scale=1)
    h, w = canvas.height, canvas.width
    content = union_bbox(list(canvas.placements.values()))
    crop = canvas.pixels[content.y : content.y2, content.x : content.x2]
    scaled = np.repeat(np.repeat(crop, s, axis=0), s, axis=1)
    sh, sw = scaled.shape[:2]
    # center the scaled content on the canvas; negative offsets crop it
    off_y = (h - sh) // 2
    off_x = (w - sw) // 2

    out = np.zeros_like(canvas.pixels)
    dst_y1, dst_x1 = max(off_y, 0), max(off_x, 0)
    src_y1, src_x1 = max(-off_y, 0), max(-off_x, 0)
    copy_h = min(sh - src_y1, h - dst_y1)
    copy_w = min(sw - src_x1, w - dst_x1)
    if copy_h > 0 and copy_w > 0:
        out[dst_y1 : dst_y1 + copy_h, dst_x1 : dst_x1 + copy_w] = scaled[
            src_y1 : src_y1 + copy_h, src_x1 : src_x1 + copy_w
        ]

    placements: dict[int, BBox] = {}
    for obj_id, box in canvas.placements.items():
        x1 = (box.x - content.x) * s + off_x
        y1 = (box.y - content.y) * s + off_y
        x2 = min(x1 + box.w * s, w)
        y2 = min(y1 + box.h * s, h)
        x1, y1 = max(x1, 0), max(y1, 0)
        if x2 > x1 and y2 > y1:
            placements[obj_id] = BBox(x=x1, y=y1, w=x2 - x1, h=y2 - y1)
    return CompositeCanvas(pixels=out, placements=placements, scale=s)


def enlarge_if_sparse(canvas: CompositeCanvas, tau: float = 0.2,
                      s_max: int = 4) -> CompositeCanvas:
    """Upscale a canvas whose object area sits below the fill threshold.

    The target scale is the smallest integer s with s^2 * ratio >= tau,
    capped at s_max (the cap applies even when the threshold stays out of
    reach). Scaling that would lose content past the canvas border is backed
    off so the fill ratio never drops below its starting value.
    """
    if not 0.0 < tau < 1.0:
        raise ValueError(f"tau must be in (0, 1), got {tau}")
    if s_max < 1:
        raise ValueError(f"s_max must be >= 1, got {s_max}")
    ratio = canvas.fill_ratio()
    if ratio >= tau or ratio == 0.0:
        return _apply_scale(canvas, 1)

    target = int(np.ceil(np.sqrt(tau / ratio)))
    if target * target * ratio < tau:  # guard fp rounding in the ceil
        target += 1
    s = min(target, s_max)
    for candidate in range(s, 0, -1):
        scaled = _apply_scale(canvas, candidate)
        if scaled.fill_ratio() >= ratio or candidate == 1:
            return scaled
    return _apply_scale(canvas, 1)


def extract_baseline_features(canvas: CompositeCanvas, grid: int = 4) -> np.ndarray:
    """Pooled per-cell descriptor of a canvas: a g*g grid of
    (mean R, mean G, mean B, fill fraction), channels scaled to [0, 1].

    Output length is 4*g*g. Deterministic; stands in for a learned extractor
    behind the same pipeline position.
    """
    if grid < 1:
        raise ValueError(f"grid must be >= 1, got {grid}")
    h, w = canvas.height, canvas.width
    mask = canvas.placement_mask()
    pix = canvas.pixels.astype(np.float64) / 255.0
    rows = [i * h // grid for i in range(grid + 1)]
    cols = [j * w // grid for j in range(grid + 1)]
    feats = np.zeros((grid, grid, 4), dtype=np.float64)
    for i in range(grid):
        for j in range(grid):
            cell = pix[rows[i] : rows[i + 1], cols[j] : cols[j + 1]]
            cell_mask = mask[rows[i] : rows[i + 1], cols[j] : cols[j + 1]]
            if cell.size == 0:
                continue
            feats[i, j, :3] = cell.reshape(-1, 3).mean(axis=0)
            feats[i, j, 3] = cell_mask.mean()
    return feats.reshape(-1)


def compose_dataset(dataset: Dataset, alignments: list[AlignmentRecord],
                    tau: float = 0.2, s_max: int = 4,
                    jobs: int = 1) -> list[tuple[CompositeSpec, CompositeCanvas]]:
    """Build every per-sentence composite for the dataset as one batch.

    Sentences with no aligned objects are skipped. Canvas dimensions are the
    batch max over all union extents; enlargement runs after composition.
    """
    specs: list[CompositeSpec] = []
    for rec in alignments:
        image = dataset.image_by_id(rec.image_id)
        for sentence_index, object_ids in enumerate(rec.sentences):
            if object_ids:
                specs.append(make_composite_spec(image, sentence_index, object_ids))
    if not specs:
        return []
    dims = batch_canvas_dims(specs)

    pixel_cache: dict[str, np.ndarray] = {}

    def build(spec: CompositeSpec) -> tuple[CompositeSpec, CompositeCanvas]:
        if spec.image_id not in pixel_cache:
            pixel_cache[spec.image_id] = dataset.resolve_pixels(
                dataset.image_by_id(spec.image_id)
            )
        canvas = compose(pixel_cache[spec.image_id], spec, dims)
        return spec, enlarge_if_sparse(canvas, tau=tau, s_max=s_max)

    # composition is pure per spec; batch_canvas_dims above is the sync point
    if jobs > 1:
        for spec in specs:  # fill the cache single-threaded first
            if spec.image_id not in pixel_cache:
                pixel_cache[spec.image_id] = dataset.resolve_pixels(
                    dataset.image_by_id(spec.image_id)
                )
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(build, specs))
    return [build(spec) for spec in specs]


def write_manifest(results: list[tuple[CompositeSpec, CompositeCanvas]], path,
                   ppm_dir: Path | None = None) -> None:
    """Write the composite manifest; optionally emit each canvas as a PPM.

    PPM paths are stored relative to the manifest so output trees are
    location-independent.
    """
    path = Path(path)
    entries = []
    for spec, canvas in results:
        entry = {
            "image_id": spec.image_id,
            "sentence_index": spec.sentence_index,
            "objects": list(spec.object_ids),
            "canvas": {"h": canvas.height, "w": canvas.width},
            "scale": canvas.scale,
        }
        if ppm_dir is not None:
            ppm_dir.mkdir(parents=True, exist_ok=True)
            name = f"{spec.image_id}_s{spec.sentence_index}.ppm"
            write_ppm(canvas.pixels, ppm_dir / name)
            rel = Path(ppm_dir, name)
            try:
                rel = rel.relative_to(path.parent)
            except ValueError:
                pass
            entry["ppm_path"] = rel.as_posix()
        entries.append(entry)
    path.write_text(json.dumps({"composites": entries}, indent=2, sort_keys=True) + "\n")
