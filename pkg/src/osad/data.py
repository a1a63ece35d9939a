"""Dataset indexing, category-disjoint folds, episodic sampling and the
synthetic desk-scale dataset.

On-disk layout::

    <root>/<affordance>/<object>/images/<stem>.png|jpg
    <root>/<affordance>/<object>/masks/<stem>.png       (single channel, 0/255)
    <root>/<affordance>/<object>/depth/<stem>.png       (optional, unused)
    <root>/<affordance>/<object>/support/<stem>.json    (support sidecar)
    <root>/folds/fold<k>.txt                            (test categories)
    <root>/schemas/<name>.json                          (keypoint layouts)
"""

from __future__ import annotations

import colorsys
import json
import logging
import math
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image

from osad.errors import (
    DataError,
    InsufficientQueriesError,
    MalformedAnnotationError,
    MissingFileError,
    NonBinaryMaskError,
    UnwritablePathError,
)

log = logging.getLogger(__name__)

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg")
RESERVED_DIRS = {"folds", "schemas"}


# ---------------------------------------------------------------------------
# keypoint schemas
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class KeypointSchema:
    name: str
    keypoints: tuple[str, ...]
    edges: tuple[tuple[int, int], ...]

    @property
    def num_keypoints(self) -> int:
        return len(self.keypoints)

    def adjacency(self) -> np.ndarray:
        """Symmetric binary skeleton adjacency with an empty diagonal."""
        k = self.num_keypoints
        a = np.zeros((k, k), dtype=np.float32)
        for i, j in self.edges:
            if i != j:
                a[i, j] = a[j, i] = 1.0
        return a

    @classmethod
    def from_json(cls, obj: dict, path=None) -> "KeypointSchema":
        try:
            names = tuple(str(n) for n in obj["keypoints"])
            edges = tuple((int(i), int(j)) for i, j in obj["edges"])
            name = str(obj["name"])
        except (KeyError, TypeError, ValueError) as exc:
            raise MalformedAnnotationError(f"bad keypoint schema ({exc})", path) from None
        for i, j in edges:
            if not (0 <= i < len(names) and 0 <= j < len(names)):
                raise MalformedAnnotationError(f"schema edge ({i}, {j}) out of range", path)
        return cls(name=name, keypoints=names, edges=edges)


def load_schema(path) -> KeypointSchema:
    path = Path(path)
    try:
        obj = json.loads(path.read_text())
    except FileNotFoundError:
        raise MissingFileError("schema file not found", path) from None
    except json.JSONDecodeError as exc:
        raise MalformedAnnotationError(f"schema is not valid JSON ({exc.msg})", path) from None
    return KeypointSchema.from_json(obj, path)


def builtin_schemas() -> dict[str, KeypointSchema]:
    out = {}
    for entry in resources.files("osad.resources").joinpath("schemas").iterdir():
        if entry.name.endswith(".json"):
            schema = KeypointSchema.from_json(json.loads(entry.read_text()), entry.name)
            out[schema.name] = schema
    return out


# ---------------------------------------------------------------------------
# support annotations
# ---------------------------------------------------------------------------

Box = tuple[float, float, float, float]


@dataclass(frozen=True)
class SupportAnnotation:
    """Human box, object box and pose of a support image, in pixels."""

    human_box: Box
    object_box: Box
    pose: np.ndarray  # (K, 3): x, y, visibility
    schema: str

    @classmethod
    def from_json(cls, obj: dict, path=None) -> "SupportAnnotation":
        try:
            human = tuple(float(v) for v in obj["human_box"])
            obj_box = tuple(float(v) for v in obj["object_box"])
            pose = np.asarray(obj["pose"], dtype=np.float64)
            schema = str(obj["schema"])
        except (KeyError, TypeError, ValueError) as exc:
            raise MalformedAnnotationError(f"bad support annotation ({exc})", path) from None
        if len(human) != 4 or len(obj_box) != 4:
            raise MalformedAnnotationError("boxes need four coordinates", path)
        if pose.ndim != 2 or pose.shape[1] != 3:
            raise MalformedAnnotationError("pose must be a list of (x, y, visibility)", path)
        for box in (human, obj_box):
            if not (box[0] < box[2] and box[1] < box[3]):
                raise MalformedAnnotationError(f"degenerate box {box}", path)
        if not np.all(np.isfinite(pose)):
            raise MalformedAnnotationError("non-finite keypoint", path)
        return cls(human, obj_box, pose, schema)

    def to_json(self) -> dict:
        return {
            "human_box": [float(v) for v in self.human_box],
            "object_box": [float(v) for v in self.object_box],
            "pose": [[float(v) for v in kp] for kp in self.pose],
            "schema": self.schema,
        }

    def clamped(self, width: int, height: int, path=None) -> "SupportAnnotation":
        def clamp(box):
            x0, y0, x1, y1 = box
            out = (min(max(x0, 0.0), width), min(max(y0, 0.0), height),
                   min(max(x1, 0.0), width), min(max(y1, 0.0), height))
            if not (out[0] < out[2] and out[1] < out[3]):
                raise MalformedAnnotationError(f"box {box} lies outside the image", path)
            return out

        return SupportAnnotation(clamp(self.human_box), clamp(self.object_box), self.pose, self.schema)

    def hflip(self, width: float) -> "SupportAnnotation":
        def flip(box):
            return (width - box[2], box[1], width - box[0], box[3])

        pose = self.pose.copy()
        pose[:, 0] = width - pose[:, 0]
        return SupportAnnotation(flip(self.human_box), flip(self.object_box), pose, self.schema)

    def affine(self, scale_x: float, scale_y: float, shift_x: float = 0.0, shift_y: float = 0.0) -> "SupportAnnotation":
        """Map pixel coordinates through ``p * scale + shift``."""

        def tf(box):
            return (box[0] * scale_x + shift_x, box[1] * scale_y + shift_y,
                    box[2] * scale_x + shift_x, box[3] * scale_y + shift_y)

        pose = self.pose.copy()
        pose[:, 0] = pose[:, 0] * scale_x + shift_x
        pose[:, 1] = pose[:, 1] * scale_y + shift_y
        return SupportAnnotation(tf(self.human_box), tf(self.object_box), pose, self.schema)

    def normalized(self, width: float, height: float) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Boxes and pose scaled to [0, 1] image coordinates."""
        scale = np.array([width, height, width, height], dtype=np.float64)
        human = np.asarray(self.human_box) / scale
        obj = np.asarray(self.object_box) / scale
        pose = self.pose.copy()
        pose[:, 0] /= width
        pose[:, 1] /= height
        return human, obj, pose


def load_support_annotation(path) -> SupportAnnotation:
    path = Path(path)
    try:
        obj = json.loads(path.read_text())
    except FileNotFoundError:
        raise MissingFileError("support annotation not found", path) from None
    except json.JSONDecodeError as exc:
        raise MalformedAnnotationError(f"support annotation is not valid JSON ({exc.msg})", path) from None
    return SupportAnnotation.from_json(obj, path)


# ---------------------------------------------------------------------------
# index
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Record:
    image_id: str
    affordance: str
    object_category: str
    image_path: Path
    mask_path: Path | None = None
    depth_path: Path | None = None
    support_path: Path | None = None

    @property
    def is_query(self) -> bool:
        return self.mask_path is not None

    @property
    def is_support(self) -> bool:
        return self.support_path is not None


@dataclass(frozen=True)
class DatasetIndex:
    """Immutable after construction; safe to share between workers."""

    root: Path
    records: tuple[Record, ...]
    registry: dict[str, int]
    schemas: dict[str, KeypointSchema]
    load_warnings: tuple[str, ...] = ()

    @property
    def categories(self) -> list[str]:
        return sorted(self.registry, key=self.registry.__getitem__)

    def queries(self, category: str) -> list[Record]:
        return [r for r in self.records if r.affordance == category and r.is_query]

    def supports(self, category: str) -> list[Record]:
        return [r for r in self.records if r.affordance == category and r.is_support]

    def schema(self, name: str) -> KeypointSchema:
        try:
            return self.schemas[name]
        except KeyError:
            raise MalformedAnnotationError(f"unknown keypoint schema {name!r}") from None


def read_image(path) -> np.ndarray:
    """RGB uint8 array (H, W, 3)."""
    try:
        with Image.open(path) as im:
            return np.asarray(im.convert("RGB"))
    except FileNotFoundError:
        raise MissingFileError("image not found", path) from None
    except OSError as exc:
        raise MalformedAnnotationError(f"unreadable image ({exc})", path) from None


def read_mask(path) -> np.ndarray:
    """Binary uint8 array (H, W) with values in {0, 1}."""
    try:
        with Image.open(path) as im:
            mode = im.mode
            arr = np.asarray(im)
    except FileNotFoundError:
        raise MissingFileError("mask not found", path) from None
    except OSError as exc:
        raise MalformedAnnotationError(f"unreadable mask ({exc})", path) from None
    if mode not in ("L", "1", "P", "I", "I;16") or arr.ndim != 2:
        raise NonBinaryMaskError(f"mask must be single-channel, got mode {mode}", path)
    values = np.unique(arr)
    if mode == "1" or set(values.tolist()) <= {0, 1}:
        return arr.astype(np.uint8)
    if set(values.tolist()) <= {0, 255}:
        return (arr > 0).astype(np.uint8)
    raise NonBinaryMaskError(f"mask values {values[:6].tolist()} are not binary", path)


def _image_size(path) -> tuple[int, int]:
    try:
        with Image.open(path) as im:
            im.verify()
        with Image.open(path) as im:
            return im.size
    except FileNotFoundError:
        raise MissingFileError("image not found", path) from None
    except Exception as exc:  # PIL raises a zoo of types on corrupt files
        raise MalformedAnnotationError(f"unreadable image ({exc})", path) from None


def load_dataset(root) -> DatasetIndex:
    root = Path(root)
    if not root.is_dir():
        raise MissingFileError("dataset root does not exist", root)

    schemas = builtin_schemas()
    schema_dir = root / "schemas"
    if schema_dir.is_dir():
        for p in sorted(schema_dir.glob("*.json")):
            s = load_schema(p)
            schemas[s.name] = s

    records: list[Record] = []
    for aff_dir in sorted(p for p in root.iterdir() if p.is_dir() and p.name not in RESERVED_DIRS):
        for obj_dir in sorted(p for p in aff_dir.iterdir() if p.is_dir()):
            image_dir = obj_dir / "images"
            if not image_dir.is_dir():
                continue
            for img in sorted(p for p in image_dir.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES):
                stem = img.stem
                mask = obj_dir / "masks" / f"{stem}.png"
                support = obj_dir / "support" / f"{stem}.json"
                depth = obj_dir / "depth" / f"{stem}.png"
                records.append(Record(
                    image_id=f"{aff_dir.name}/{obj_dir.name}/{stem}",
                    affordance=aff_dir.name,
                    object_category=obj_dir.name,
                    image_path=img,
                    mask_path=mask if mask.exists() else None,
                    depth_path=depth if depth.exists() else None,
                    support_path=support if support.exists() else None,
                ))
    if not records:
        raise MissingFileError("no images found in dataset layout", root)

    for rec in records:
        width, height = _image_size(rec.image_path)
        if not rec.is_query and not rec.is_support:
            raise MissingFileError("image has neither a mask nor a support annotation",
                                   rec.image_path.parent.parent / "masks" / f"{rec.image_path.stem}.png")
        if rec.is_query:
            mask = read_mask(rec.mask_path)
            if mask.shape != (height, width):
                raise MalformedAnnotationError(
                    f"mask size {mask.shape[::-1]} differs from image size {(width, height)}", rec.mask_path)
        if rec.is_support:
            ann = load_support_annotation(rec.support_path).clamped(width, height, rec.support_path)
            if ann.schema not in schemas:
                raise MalformedAnnotationError(f"unknown keypoint schema {ann.schema!r}", rec.support_path)
            expected = schemas[ann.schema].num_keypoints
            if len(ann.pose) != expected:
                raise MalformedAnnotationError(
                    f"pose has {len(ann.pose)} keypoints, schema {ann.schema} expects {expected}", rec.support_path)

    names = sorted({r.affordance for r in records})
    registry = {name: i for i, name in enumerate(names)}
    notes = []
    for name in names:
        if not any(r.is_support for r in records if r.affordance == name):
            msg = f"category {name!r} has no support annotation and is excluded from sampling"
            log.warning(msg)
            notes.append(msg)
    return DatasetIndex(root=root, records=tuple(records), registry=registry,
                        schemas=schemas, load_warnings=tuple(notes))


# ---------------------------------------------------------------------------
# folds
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class FoldConfig:
    fold_id: int
    test: frozenset[str]
    train: frozenset[str]

    @classmethod
    def from_test(cls, fold_id: int, test: Sequence[str], registry) -> "FoldConfig":
        test = frozenset(test)
        return cls(fold_id, test, frozenset(registry) - test)

    def categories(self, split: str) -> frozenset[str]:
        if split == "train":
            return self.train
        if split == "test":
            return self.test
        raise ValueError(f"split must be 'train' or 'test', got {split!r}")


def read_fold_file(path) -> list[str]:
    path = Path(path)
    try:
        lines = path.read_text().splitlines()
    except FileNotFoundError:
        raise MissingFileError("fold file not found", path) from None
    return [ln.strip() for ln in lines if ln.strip() and not ln.lstrip().startswith("#")]


def load_folds(folds_dir, registry) -> list[FoldConfig]:
    folds_dir = Path(folds_dir)
    files = sorted(folds_dir.glob("fold*.txt"), key=lambda p: int("".join(c for c in p.stem if c.isdigit()) or 0))
    if not files:
        raise MissingFileError("no fold*.txt files", folds_dir)
    out = []
    for p in files:
        digits = "".join(c for c in p.stem if c.isdigit())
        if not digits:
            raise MalformedAnnotationError("fold file name carries no fold number", p)
        out.append(FoldConfig.from_test(int(digits), read_fold_file(p), registry))
    return out


def padv2_registry() -> list[str]:
    text = resources.files("osad.resources").joinpath("padv2_categories.txt").read_text()
    return [ln.strip() for ln in text.splitlines() if ln.strip()]


def padv2_folds() -> list[FoldConfig]:
    registry = padv2_registry()
    folds = []
    for k in (1, 2, 3):
        text = resources.files("osad.resources").joinpath("folds", f"fold{k}.txt").read_text()
        test = [ln.strip() for ln in text.splitlines() if ln.strip()]
        folds.append(FoldConfig.from_test(k, test, registry))
    return folds


@dataclass
class FoldReport:
    overlaps: dict[int, list[str]] = field(default_factory=dict)   # in train and test of one fold
    incomplete: dict[int, list[str]] = field(default_factory=dict)  # registry names outside train ∪ test
    unknown: dict[int, list[str]] = field(default_factory=dict)     # fold names absent from the registry
    untested: list[str] = field(default_factory=list)               # in no fold's test set

    def is_empty(self) -> bool:
        return not (self.overlaps or self.incomplete or self.unknown or self.untested)

    def lines(self) -> list[str]:
        out = []
        for fid, names in sorted(self.overlaps.items()):
            out.append(f"fold {fid}: in both train and test: {', '.join(names)}")
        for fid, names in sorted(self.incomplete.items()):
            out.append(f"fold {fid}: missing from train and test: {', '.join(names)}")
        for fid, names in sorted(self.unknown.items()):
            out.append(f"fold {fid}: not in registry: {', '.join(names)}")
        if self.untested:
            out.append(f"never tested: {', '.join(self.untested)}")
        return out


def validate_fold_disjointness(folds: Sequence[FoldConfig], registry) -> FoldReport:
    registry = set(registry)
    report = FoldReport()
    tested: set[str] = set()
    for fold in folds:
        both = sorted(fold.train & fold.test)
        if both:
            report.overlaps[fold.fold_id] = both
        missing = sorted(registry - (fold.train | fold.test))
        if missing:
            report.incomplete[fold.fold_id] = missing
        unknown = sorted((fold.train | fold.test) - registry)
        if unknown:
            report.unknown[fold.fold_id] = unknown
        tested |= fold.test
    report.untested = sorted(registry - tested)
    return report


# ---------------------------------------------------------------------------
# episodes
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Episode:
    category: int
    category_name: str
    support_record: Record
    support_image: np.ndarray
    annotation: SupportAnnotation
    query_records: tuple[Record, ...]
    query_images: tuple[np.ndarray, ...]
    query_masks: tuple[np.ndarray, ...]

    @property
    def n_queries(self) -> int:
        return len(self.query_records)


def _query_pool(index: DatasetIndex, category: str) -> list[Record]:
    """Query candidates: masked images that are not support-annotated."""
    return [r for r in index.queries(category) if not r.is_support]


def sample_episode(index: DatasetIndex, fold: FoldConfig, split: str, n: int,
                   rng: np.random.Generator) -> Episode:
    if n < 2:
        raise ValueError("an episode needs at least two queries")
    split_cats = sorted(c for c in fold.categories(split) if c in index.registry)
    if not split_cats:
        raise DataError(f"no {split} categories of fold {fold.fold_id} exist in the dataset", index.root)
    eligible = []
    for cat in split_cats:
        if not index.supports(cat):
            continue
        if len(_query_pool(index, cat)) >= n:
            eligible.append(cat)
    if not eligible:
        raise InsufficientQueriesError(
            f"no {split} category of fold {fold.fold_id} has a support image and {n} query images", index.root)

    cat = eligible[int(rng.integers(len(eligible)))]
    supports = index.supports(cat)
    support = supports[int(rng.integers(len(supports)))]
    pool = _query_pool(index, cat)
    picks = rng.choice(len(pool), size=n, replace=False)
    chosen = tuple(pool[int(i)] for i in picks)

    image = read_image(support.image_path)
    ann = load_support_annotation(support.support_path).clamped(image.shape[1], image.shape[0])
    return Episode(
        category=index.registry[cat],
        category_name=cat,
        support_record=support,
        support_image=image,
        annotation=ann,
        query_records=chosen,
        query_images=tuple(read_image(r.image_path) for r in chosen),
        query_masks=tuple(read_mask(r.mask_path) for r in chosen),
    )


# ---------------------------------------------------------------------------
# synthetic dataset
# ---------------------------------------------------------------------------

SYNTH_NAMES = ("Roll", "Stack", "Pour", "Hang", "Press", "Slide", "Wrap", "Spin")
SHAPES = ("circle", "square", "triangle", "ring", "cross", "diamond", "bar", "ellipse")
STAR5 = "star5"


@dataclass(frozen=True)
class SynthConfig:
    categories: int = 4
    images_per_category: int = 20
    supports_per_category: int = 3
    objects_per_category: int = 2
    distractors: int = 1  # clutter objects per query image
    support_distractors: int = 0
    image_size: int = 64
    seed: int = 0
    held_out: int = 1  # categories placed in the written fold's test set

    def __post_init__(self):
        if self.categories < 4:
            raise ValueError("synthetic dataset needs at least 4 categories")
        if self.images_per_category < 1 or self.image_size < 32:
            raise ValueError("need >= 1 image per category and image_size >= 32")


def synth_category_name(i: int) -> str:
    return SYNTH_NAMES[i] if i < len(SYNTH_NAMES) else f"Synth-{i}"


def _shape_mask(shape: str, cx: float, cy: float, r: float, size: int) -> np.ndarray:
    y, x = np.mgrid[0:size, 0:size].astype(np.float64) + 0.5
    dx, dy = x - cx, y - cy
    if shape == "circle":
        return dx**2 + dy**2 <= r**2
    if shape == "square":
        return (np.abs(dx) <= 0.85 * r) & (np.abs(dy) <= 0.85 * r)
    if shape == "triangle":
        inside_y = (dy <= 0.8 * r) & (dy >= -r)
        return inside_y & (np.abs(dx) <= (dy + r) / 1.8)
    if shape == "ring":
        d2 = dx**2 + dy**2
        return (d2 <= r**2) & (d2 >= (0.55 * r) ** 2)
    if shape == "cross":
        return (((np.abs(dx) <= 0.35 * r) & (np.abs(dy) <= r))
                | ((np.abs(dy) <= 0.35 * r) & (np.abs(dx) <= r)))
    if shape == "diamond":
        return np.abs(dx) + np.abs(dy) <= r
    if shape == "bar":
        return (np.abs(dx) <= r) & (np.abs(dy) <= 0.4 * r)
    if shape == "ellipse":
        return (dx / r) ** 2 + (dy / (0.55 * r)) ** 2 <= 1.0
    raise ValueError(shape)


def _category_color(cat: int, variant: int, n_cats: int, rng: np.random.Generator) -> np.ndarray:
    hue = (cat / n_cats + 0.04 * variant + rng.uniform(-0.02, 0.02)) % 1.0
    sat = 0.85 - 0.15 * (variant % 2)
    val = 0.9 - 0.1 * (variant % 3)
    return np.array(colorsys.hsv_to_rgb(hue, sat, val)) * 255.0


def _background(size: int, rng: np.random.Generator) -> np.ndarray:
    base = rng.uniform(90, 150, size=3)
    ramp = np.linspace(-1, 1, size)
    direction = rng.uniform(-25, 25, size=(2, 3))
    img = (base[None, None, :]
           + ramp[:, None, None] * direction[0][None, None, :]
           + ramp[None, :, None] * direction[1][None, None, :])
    img += rng.normal(0, 6.0, size=img.shape)
    return img


def _paint(img: np.ndarray, mask: np.ndarray, color: np.ndarray, rng: np.random.Generator) -> None:
    noise = rng.normal(0, 5.0, size=(int(mask.sum()), 3))
    img[mask] = color[None, :] + noise


def _place(existing: list[tuple[float, float, float]], r: float, size: int, rng: np.random.Generator,
           region=None) -> tuple[float, float]:
    lo_x, hi_x, lo_y, hi_y = region if region is not None else (r + 1, size - r - 1, r + 1, size - r - 1)
    for _ in range(200):
        cx, cy = rng.uniform(lo_x, hi_x), rng.uniform(lo_y, hi_y)
        if all(math.hypot(cx - ex, cy - ey) > r + er + 2 for ex, ey, er in existing):
            return cx, cy
    return cx, cy


def _draw_line(img: np.ndarray, p0, p1, color, width: float = 1.2) -> None:
    size = img.shape[0]
    y, x = np.mgrid[0:size, 0:size].astype(np.float64) + 0.5
    px, py = p1[0] - p0[0], p1[1] - p0[1]
    length2 = px * px + py * py or 1e-9
    t = np.clip(((x - p0[0]) * px + (y - p0[1]) * py) / length2, 0, 1)
    d = np.hypot(x - (p0[0] + t * px), y - (p0[1] + t * py))
    img[d <= width] = color


def _clutter(img: np.ndarray, placed: list, radius: tuple[float, float], rng: np.random.Generator) -> None:
    """One object of a random shape and hue that belongs to no category."""
    size = img.shape[0]
    r = rng.uniform(*radius)
    xy = _place(placed, r, size, rng)
    placed.append((*xy, r))
    hue, sat, val = rng.random(), rng.uniform(0.3, 0.9), rng.uniform(0.5, 0.95)
    color = np.array(colorsys.hsv_to_rgb(hue, sat, val)) * 255.0
    _paint(img, _shape_mask(SHAPES[int(rng.integers(len(SHAPES)))], xy[0], xy[1], r, size), color, rng)


def _render_query(cat: int, variant: int, cfg: SynthConfig, rng: np.random.Generator):
    size = cfg.image_size
    img = _background(size, rng)
    scale = size / 64.0
    r = rng.uniform(8, 13) * scale
    placed: list[tuple[float, float, float]] = []
    target_xy = _place(placed, r, size, rng)
    placed.append((*target_xy, r))
    for _ in range(cfg.distractors):
        _clutter(img, placed, (7 * scale, 11 * scale), rng)
    mask = _shape_mask(SHAPES[cat % len(SHAPES)], target_xy[0], target_xy[1], r, size)
    _paint(img, mask, _category_color(cat, variant, cfg.categories, rng), rng)
    return np.clip(np.rint(img), 0, 255).astype(np.uint8), mask.astype(np.uint8)


def _render_support(cat: int, variant: int, cfg: SynthConfig, rng: np.random.Generator):
    """Stick figure reaching for one object; the arm angle is category specific."""
    size = cfg.image_size
    s = size / 64.0
    img = _background(size, rng)
    hx = rng.uniform(14, 24) * s
    hy = rng.uniform(26, 36) * s
    angle = math.radians(-60 + 120 * cat / max(cfg.categories - 1, 1)) + rng.uniform(-0.1, 0.1)
    arm = 11 * s
    torso = (hx, hy)
    head = (hx, hy - 12 * s)
    left = (hx - 8 * s, hy + 2 * s)
    right = (hx + arm * math.cos(angle), hy + arm * math.sin(angle))
    feet = (hx, hy + 16 * s)
    r = rng.uniform(6, 8) * s
    ox = min(right[0] + r + 2 * s, size - r - 1)
    oy = min(max(right[1] + r * math.sin(angle), r + 1), size - r - 1)

    placed = [(hx, hy, 12 * s), (ox, oy, r)]
    for _ in range(cfg.support_distractors):
        _clutter(img, placed, (5 * s, 7 * s), rng)

    skin = np.array([40.0, 40.0, 40.0])
    for end in (head, left, right, feet):
        _draw_line(img, torso, end, skin, 1.2 * s)
    _paint(img, _shape_mask("circle", head[0], head[1], 3.5 * s, size), skin, rng)
    omask = _shape_mask(SHAPES[cat % len(SHAPES)], ox, oy, r, size)
    _paint(img, omask, _category_color(cat, variant, cfg.categories, rng), rng)

    pts = np.array([torso, head, left, right, feet])
    human_box = (float(max(pts[:, 0].min() - 4 * s, 0)), float(max(pts[:, 1].min() - 4 * s, 0)),
                 float(min(pts[:, 0].max() + 2 * s, size)), float(min(pts[:, 1].max() + 2 * s, size)))
    ys, xs = np.nonzero(omask)
    object_box = (float(xs.min()), float(ys.min()), float(xs.max() + 1), float(ys.max() + 1))
    pose = np.concatenate([pts, np.full((5, 1), 2.0)], axis=1)
    ann = SupportAnnotation(human_box, object_box, np.round(pose, 3), STAR5)
    return np.clip(np.rint(img), 0, 255).astype(np.uint8), ann


def generate_synthetic_dataset(config: SynthConfig, out_path) -> DatasetIndex:
    out = Path(out_path)
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write-probe"
        probe.write_text("")
        probe.unlink()
    except OSError:
        raise UnwritablePathError("cannot write synthetic dataset", out) from None

    rng = np.random.default_rng(config.seed)
    names = [synth_category_name(i) for i in range(config.categories)]
    for cat, name in enumerate(names):
        obj_names = [f"{SHAPES[cat % len(SHAPES)]}-{chr(ord('a') + v)}" for v in range(config.objects_per_category)]
        for i in range(config.images_per_category):
            variant = i % config.objects_per_category
            img, mask = _render_query(cat, variant, config, rng)
            base = out / name / obj_names[variant]
            (base / "images").mkdir(parents=True, exist_ok=True)
            (base / "masks").mkdir(parents=True, exist_ok=True)
            Image.fromarray(img).save(base / "images" / f"q{i:04d}.png")
            Image.fromarray(mask * 255).save(base / "masks" / f"q{i:04d}.png")
        for i in range(config.supports_per_category):
            variant = i % config.objects_per_category
            img, ann = _render_support(cat, variant, config, rng)
            base = out / name / obj_names[variant]
            (base / "images").mkdir(parents=True, exist_ok=True)
            (base / "support").mkdir(parents=True, exist_ok=True)
            Image.fromarray(img).save(base / "images" / f"s{i:04d}.png")
            (base / "support" / f"s{i:04d}.json").write_text(json.dumps(ann.to_json(), indent=1, sort_keys=True))

    (out / "schemas").mkdir(exist_ok=True)
    star = builtin_schemas()[STAR5]
    (out / "schemas" / "star5.json").write_text(json.dumps(
        {"name": star.name, "keypoints": list(star.keypoints), "edges": [list(e) for e in star.edges]},
        indent=1, sort_keys=True))
    (out / "folds").mkdir(exist_ok=True)
    held = names[-config.held_out:] if config.held_out else []
    (out / "folds" / "fold1.txt").write_text("".join(f"{n}\n" for n in held))
    return load_dataset(out)
