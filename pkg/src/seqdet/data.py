"""Synthetic shapes generator and COCO annotation ingestion."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .codec import AnnotatedObject, BBox, OrderingStrategy

log = logging.getLogger(__name__)

SHAPE_NAMES = ("rectangle", "ellipse", "triangle")


@dataclass
class Sample:
    image: np.ndarray | None  # (H, W, 3) uint8, None for annotation-only samples
    objects: list[AnnotatedObject]
    image_id: int
    width: int
    height: int
    file_name: str = ""


@dataclass
class SyntheticConfig:
    canvas_size: int = 64
    min_objects: int = 1
    max_objects: int = 5
    n_classes: int = 3
    # object side length as a fraction of the canvas
    min_object_size: float = 0.12
    max_object_size: float = 0.4
    background_range: tuple[int, int] = (0, 80)
    foreground_range: tuple[int, int] = (110, 255)
    # largest IoU allowed between two boxes; 0 forbids any overlap
    max_overlap: float = 0.0
    dataset_size: int = 5000
    seed: int = 0

    def __post_init__(self):
        self.background_range = tuple(self.background_range)
        self.foreground_range = tuple(self.foreground_range)
        pairs = {
            "objects": (self.min_objects, self.max_objects),
            "object_size": (self.min_object_size, self.max_object_size),
            "background_range": self.background_range,
            "foreground_range": self.foreground_range,
        }
        for name, (lo, hi) in pairs.items():
            if lo > hi:
                raise ValueError(f"{name}: min {lo} > max {hi}")
        if not 1 <= self.n_classes <= len(SHAPE_NAMES):
            raise ValueError(f"n_classes must be in [1, {len(SHAPE_NAMES)}]")
        if self.min_objects < 0 or self.min_object_size <= 0 or self.max_object_size > 1:
            raise ValueError("invalid object count or size range")


@dataclass
class DataConfig:
    n_bins: int = 2000
    ordering: str = "random"
    val_size: int = 500
    synthetic: SyntheticConfig = field(default_factory=SyntheticConfig)

    def __post_init__(self):
        if isinstance(self.synthetic, dict):
            self.synthetic = SyntheticConfig(**self.synthetic)
        OrderingStrategy(self.ordering)


def _shape_mask(kind: int, h: int, w: int) -> np.ndarray:
    yy, xx = np.mgrid[0:h, 0:w]
    cy, cx = (yy + 0.5) / h, (xx + 0.5) / w  # pixel centers in [0, 1]
    if kind == 0:
        return np.ones((h, w), dtype=bool)
    if kind == 1:
        return (cy - 0.5) ** 2 + (cx - 0.5) ** 2 <= 0.25
    # isosceles triangle, apex at top centre
    return np.abs(cx - 0.5) <= 0.5 * cy + 0.5 / max(h, w)


def _boxes_overlap(a, b, max_overlap: float) -> bool:
    iy = max(0, min(a[2], b[2]) - max(a[0], b[0]))
    ix = max(0, min(a[3], b[3]) - max(a[1], b[1]))
    inter = iy * ix
    if max_overlap <= 0:
        return inter > 0
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return inter / union > max_overlap


def _pick_color(rng, lo, hi, taken, background):
    color = rng.integers(lo, hi + 1, size=3)
    for _ in range(20):
        if all(np.abs(color - c).sum() >= 60 for c in taken) and np.abs(color - background).max() >= 40:
            break
        color = rng.integers(lo, hi + 1, size=3)
    return color


def generate_synthetic_sample(cfg: SyntheticConfig, rng: np.random.Generator, image_id: int = 0) -> Sample:
    """Render up to k ~ U{min_objects..max_objects} non-overlapping shapes.

    Each recorded box is the tight pixel extent of the drawn mask (pixel edges,
    so rows r0..r1 map to y in [r0/H, (r1+1)/H]). A shape that cannot be
    placed within 50 tries is skipped.
    """
    size = cfg.canvas_size
    bg = rng.integers(cfg.background_range[0], cfg.background_range[1] + 1, size=3)
    image = np.empty((size, size, 3), dtype=np.uint8)
    image[:] = bg.astype(np.uint8)

    k = int(rng.integers(cfg.min_objects, cfg.max_objects + 1))
    lo = max(2, int(round(cfg.min_object_size * size)))
    hi = max(lo, int(round(cfg.max_object_size * size)))
    placed: list[tuple[int, int, int, int]] = []
    colors: list[np.ndarray] = []
    objects = []
    for _ in range(k):
        for _attempt in range(50):
            h, w = (int(v) for v in rng.integers(lo, hi + 1, size=2))
            y0 = int(rng.integers(0, size - h + 1))
            x0 = int(rng.integers(0, size - w + 1))
            kind = int(rng.integers(0, cfg.n_classes))
            mask = _shape_mask(kind, h, w)
            rows = np.flatnonzero(mask.any(axis=1))
            cols = np.flatnonzero(mask.any(axis=0))
            tight = (y0 + rows[0], x0 + cols[0], y0 + rows[-1] + 1, x0 + cols[-1] + 1)
            if not any(_boxes_overlap(tight, p, cfg.max_overlap) for p in placed):
                break
        else:
            continue
        color = _pick_color(rng, cfg.foreground_range[0], cfg.foreground_range[1], colors, bg)
        image[y0 : y0 + h, x0 : x0 + w][mask] = color.astype(np.uint8)
        placed.append(tight)
        colors.append(color)
        box = BBox(tight[0] / size, tight[1] / size, tight[2] / size, tight[3] / size)
        objects.append(AnnotatedObject(box, kind))
    return Sample(image, objects, image_id, size, size)


def synthetic_sample(cfg: SyntheticConfig, index: int) -> Sample:
    """Sample ``index`` of the stream; depends only on (cfg.seed, index)."""
    return generate_synthetic_sample(cfg, np.random.default_rng([cfg.seed, index]), image_id=index)


def synthetic_dataset(cfg: SyntheticConfig, start: int = 0, count: int | None = None) -> list[Sample]:
    count = cfg.dataset_size if count is None else count
    return [synthetic_sample(cfg, i) for i in range(start, start + count)]


def train_val_split(cfg: DataConfig) -> tuple[list[Sample], list[Sample]]:
    syn = cfg.synthetic
    train = synthetic_dataset(syn, 0, syn.dataset_size)
    val = synthetic_dataset(syn, syn.dataset_size, cfg.val_size)
    return train, val


# COCO ingestion


class CocoFormatError(ValueError):
    pass


@dataclass
class CocoAnnotations:
    samples: list[Sample]
    category_ids: list[int]  # dense index -> original COCO category id
    category_names: list[str]
    skipped_annotations: int = 0
    clipped_boxes: int = 0

    @property
    def n_classes(self) -> int:
        return len(self.category_ids)


def _require(obj, key, where):
    if not isinstance(obj, dict) or key not in obj:
        raise CocoFormatError(f"{where}: missing field {key!r}")
    return obj[key]


def load_coco_annotations(path: str | Path) -> CocoAnnotations:
    """Read a COCO detection annotation file into pixel-free samples.

    Boxes become normalized (y_min, x_min, y_max, x_max); category ids are
    remapped to a dense 0..n-1 range in ascending id order.
    """
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise CocoFormatError(f"{path}:{e.lineno}:{e.colno}: {e.msg}") from e
    if not isinstance(doc, dict):
        raise CocoFormatError(f"{path}: top level must be an object")

    cats = _require(doc, "categories", str(path))
    cat_ids = []
    names = {}
    for i, c in enumerate(cats):
        cid = _require(c, "id", f"{path}: categories[{i}]")
        names[cid] = str(c.get("name", cid))
        cat_ids.append(cid)
    if len(set(cat_ids)) != len(cat_ids):
        raise CocoFormatError(f"{path}: duplicate category ids")
    cat_ids.sort()
    dense = {cid: i for i, cid in enumerate(cat_ids)}

    images = {}
    order = []
    for i, im in enumerate(_require(doc, "images", str(path))):
        where = f"{path}: images[{i}]"
        iid = _require(im, "id", where)
        if iid in images:
            raise CocoFormatError(f"{where}: duplicate image id {iid}")
        w, h = _require(im, "width", where), _require(im, "height", where)
        if not (isinstance(w, (int, float)) and isinstance(h, (int, float)) and w > 0 and h > 0):
            raise CocoFormatError(f"{where}: width/height must be positive numbers")
        images[iid] = Sample(None, [], iid, int(w), int(h), str(im.get("file_name", "")))
        order.append(iid)

    skipped = clipped = 0
    for i, ann in enumerate(doc.get("annotations", [])):
        where = f"{path}: annotations[{i}]"
        iid = _require(ann, "image_id", where)
        bbox = _require(ann, "bbox", where)
        cid = _require(ann, "category_id", where)
        if not (isinstance(bbox, list) and len(bbox) == 4 and all(isinstance(v, (int, float)) for v in bbox)):
            raise CocoFormatError(f"{where}: bbox must be [x, y, w, h]")
        if cid not in dense:
            raise CocoFormatError(f"{where}: unknown category id {cid}")
        sample = images.get(iid)
        if sample is None:
            skipped += 1
            continue
        x, y, bw, bh = (float(v) for v in bbox)
        raw = (y / sample.height, x / sample.width, (y + bh) / sample.height, (x + bw) / sample.width)
        box = BBox.clipped(*raw)
        if box.as_tuple() != raw:
            clipped += 1
        sample.objects.append(AnnotatedObject(box, dense[cid]))

    if skipped:
        log.warning("%s: skipped %d annotations referencing unknown images", path, skipped)
    if clipped:
        log.warning("%s: clipped %d boxes to image bounds", path, clipped)
    return CocoAnnotations(
        [images[i] for i in order], cat_ids, [names[c] for c in cat_ids], skipped, clipped
    )


def resize_longer_side(sample: Sample, longer: int) -> Sample:
    """Rescale stored dimensions (and pixels, if any) keeping aspect ratio.

    Normalized boxes are unchanged by construction.
    """
    scale = longer / max(sample.width, sample.height)
    w, h = max(1, round(sample.width * scale)), max(1, round(sample.height * scale))
    image = sample.image
    if image is not None:
        from PIL import Image

        image = np.asarray(Image.fromarray(image).resize((w, h), Image.BILINEAR))
    return replace(sample, image=image, width=w, height=h)


def denormalize_box(box: BBox, width: int, height: int) -> tuple[float, float, float, float]:
    """Normalized box to COCO pixel [x, y, w, h]."""
    return (box.x_min * width, box.y_min * height, box.width * width, box.height * height)
