"""COCO-subset dataset I/O, binary PPM rasters, dataset statistics and splitting."""

from __future__ import annotations

import json
import logging
import math
import os
import tempfile
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Mapping, Union

import numpy as np

from .core import (
    Annotation,
    BBox,
    CategoryEntry,
    CategoryError,
    CategoryRegistry,
    DataFormatError,
    PseudoLabel,
    ValidationError,
    round_half_up,
)

logger = logging.getLogger(__name__)

PathLike = Union[str, os.PathLike]
Label = Union[Annotation, PseudoLabel]

# Upper bin edges in pixels^2; the last bin is open-ended.
AREA_BIN_EDGES: tuple[float, ...] = (32.0**2, 96.0**2, 256.0**2, math.inf)


class DatasetLoadError(DataFormatError):
    pass


class RasterFormatError(DataFormatError):
    def __init__(self, message: str, offset: int, path: PathLike | None = None):
        prefix = f"{path}: " if path is not None else ""
        super().__init__(f"{prefix}{message} (byte offset {offset})")
        self.message = message
        self.offset = offset


@dataclass(frozen=True)
class ImageRecord:
    id: int
    file_name: str
    width: int
    height: int
    extra: Mapping[str, Any] = field(default_factory=dict, compare=True, hash=False)


@dataclass(frozen=True)
class Dataset:
    images: tuple[ImageRecord, ...]
    annotations: tuple[Label, ...]
    registry: CategoryRegistry
    extra: Mapping[str, Any] = field(default_factory=dict, compare=True, hash=False)

    def __post_init__(self) -> None:
        object.__setattr__(self, "images", tuple(self.images))
        object.__setattr__(self, "annotations", tuple(self.annotations))

    def image(self, image_id: int) -> ImageRecord:
        for im in self.images:
            if im.id == image_id:
                return im
        raise KeyError(image_id)

    def annotations_by_image(self) -> dict[int, list[Label]]:
        out: dict[int, list[Label]] = {im.id: [] for im in self.images}
        for a in self.annotations:
            out.setdefault(a.image_id, []).append(a)
        return out

    def pseudo_labels(self) -> list[PseudoLabel]:
        return [a for a in self.annotations if isinstance(a, PseudoLabel)]

    def validate(self) -> None:
        """Raise :class:`ValidationError` if any cross-reference invariant is broken."""
        image_ids = [im.id for im in self.images]
        dup = _first_duplicate(image_ids)
        if dup is not None:
            raise ValidationError(f"duplicate image id {dup}")
        ann_ids = [a.id for a in self.annotations if a.id is not None]
        dup = _first_duplicate(ann_ids)
        if dup is not None:
            raise ValidationError(f"duplicate annotation id {dup}")
        known = set(image_ids)
        for a in self.annotations:
            if a.image_id not in known:
                raise ValidationError(f"annotation {a.id}: image_id {a.image_id} does not resolve")
            if a.category not in self.registry:
                raise ValidationError(f"annotation {a.id}: category {a.category.name!r} not in registry")
            if not (a.box.w > 0 and a.box.h > 0):
                raise ValidationError(f"annotation {a.id}: box {a.box.to_list()} has no area")


def _first_duplicate(values: Iterable[Any]) -> Any:
    seen = set()
    for v in values:
        if v in seen:
            return v
        seen.add(v)
    return None


# ---------------------------------------------------------------------------
# Dataset JSON
# ---------------------------------------------------------------------------

_IMAGE_KEYS = ("id", "file_name", "width", "height")
_ANN_KEYS = ("id", "image_id", "category_id", "bbox", "score")
_CAT_KEYS = ("id", "name", "supercategory")
_TOP_KEYS = ("images", "annotations", "categories")


def _extras(rec: Mapping[str, Any], known: tuple[str, ...]) -> dict[str, Any]:
    return {k: v for k, v in rec.items() if k not in known}


def _require(rec: Any, key: str, kind: type | tuple[type, ...], where: str) -> Any:
    if not isinstance(rec, dict):
        raise DatasetLoadError(f"{where}: expected an object, got {type(rec).__name__}")
    if key not in rec:
        raise DatasetLoadError(f"{where}: missing field {key!r}")
    val = rec[key]
    if isinstance(val, bool) or not isinstance(val, kind):
        raise DatasetLoadError(f"{where}: field {key!r} has invalid value {val!r}")
    return val


def _clamp_box(raw: list[float], im: ImageRecord, where: str) -> BBox:
    x, y, w, h = raw
    x1, y1 = max(0.0, x), max(0.0, y)
    x2, y2 = min(float(im.width), x + w), min(float(im.height), y + h)
    if x2 <= x1 or y2 <= y1:
        raise DatasetLoadError(f"{where}: field 'bbox' {raw} has no area inside image {im.id} ({im.width}x{im.height})")
    if (x1, y1, x2, y2) == (x, y, x + w, y + h):
        return BBox(x, y, w, h)
    box = BBox.from_xyxy(x1, y1, x2, y2)
    logger.info("%s: bbox %s clamped to %s", where, raw, box.to_list())
    return box


def dataset_from_dict(doc: Any) -> Dataset:
    if not isinstance(doc, dict):
        raise DatasetLoadError("top level: expected an object")
    for key in _TOP_KEYS:
        if not isinstance(doc.get(key), list):
            raise DatasetLoadError(f"top level: missing or non-array field {key!r}")

    entries = []
    for i, rec in enumerate(doc["categories"]):
        where = f"categories[{i}]"
        entries.append(
            CategoryEntry(
                _require(rec, "id", int, where),
                _require(rec, "name", str, where),
                _require(rec, "supercategory", str, where),
                _extras(rec, _CAT_KEYS),
            )
        )
    try:
        registry = CategoryRegistry(entries)
    except CategoryError as exc:
        raise DatasetLoadError(f"categories: {exc}") from exc

    images: dict[int, ImageRecord] = {}
    for i, rec in enumerate(doc["images"]):
        where = f"images[{i}]"
        im = ImageRecord(
            _require(rec, "id", int, where),
            _require(rec, "file_name", str, where),
            _require(rec, "width", int, where),
            _require(rec, "height", int, where),
            _extras(rec, _IMAGE_KEYS),
        )
        if im.width <= 0 or im.height <= 0:
            raise DatasetLoadError(f"{where} (id {im.id}): non-positive size {im.width}x{im.height}")
        if im.id in images:
            raise DatasetLoadError(f"{where}: duplicate image id {im.id}")
        images[im.id] = im

    anns: list[Label] = []
    seen_ids: set[int] = set()
    for i, rec in enumerate(doc["annotations"]):
        where = f"annotations[{i}]"
        scored = isinstance(rec, dict) and "score" in rec
        ann_id = rec.get("id") if scored else _require(rec, "id", int, where)
        if ann_id is not None:
            if not isinstance(ann_id, int) or isinstance(ann_id, bool):
                raise DatasetLoadError(f"{where}: field 'id' has invalid value {ann_id!r}")
            if ann_id in seen_ids:
                raise DatasetLoadError(f"{where}: duplicate annotation id {ann_id}")
            seen_ids.add(ann_id)
        image_id = _require(rec, "image_id", int, where)
        if image_id not in images:
            raise DatasetLoadError(f"{where}: field 'image_id' references missing image {image_id}")
        cat_id = _require(rec, "category_id", int, where)
        try:
            cat = registry.category(cat_id)
        except CategoryError:
            raise DatasetLoadError(f"{where}: field 'category_id' references missing category {cat_id}") from None
        raw = _require(rec, "bbox", list, where)
        if len(raw) != 4 or not all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in raw):
            raise DatasetLoadError(f"{where}: field 'bbox' must be 4 numbers, got {raw!r}")
        if not all(math.isfinite(v) for v in raw) or raw[2] <= 0 or raw[3] <= 0:
            raise DatasetLoadError(f"{where}: field 'bbox' {raw} has non-positive or non-finite size")
        box = _clamp_box([float(v) for v in raw], images[image_id], where)
        extra = _extras(rec, _ANN_KEYS)
        if scored:
            score = rec["score"]
            if isinstance(score, bool) or not isinstance(score, (int, float)) or not 0.0 <= score <= 1.0:
                raise DatasetLoadError(f"{where}: field 'score' must be in [0, 1], got {score!r}")
            anns.append(PseudoLabel(box, cat, float(score), image_id, ann_id, extra))
        else:
            anns.append(Annotation(ann_id, image_id, box, cat, extra))

    return Dataset(tuple(images.values()), tuple(anns), registry, _extras(doc, _TOP_KEYS))


def load_dataset(path: PathLike) -> Dataset:
    path = Path(path)
    text = path.read_text(encoding="utf-8")
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise DatasetLoadError(f"{path}: malformed JSON: {exc}") from exc
    try:
        return dataset_from_dict(doc)
    except DatasetLoadError as exc:
        raise DatasetLoadError(f"{path}: {exc}") from exc


def _ann_to_dict(a: Label, registry: CategoryRegistry) -> dict[str, Any]:
    rec: dict[str, Any] = {}
    if a.id is not None:
        rec["id"] = a.id
    rec["image_id"] = a.image_id
    rec["category_id"] = registry.id_of(a.category)
    rec["bbox"] = a.box.to_list()
    if isinstance(a, PseudoLabel):
        rec["score"] = a.confidence
    rec.update(a.extra)
    return rec


def dataset_to_dict(d: Dataset) -> dict[str, Any]:
    d.validate()
    doc: dict[str, Any] = {
        "images": [
            {"id": im.id, "file_name": im.file_name, "width": im.width, "height": im.height, **im.extra}
            for im in d.images
        ],
        "annotations": [_ann_to_dict(a, d.registry) for a in d.annotations],
        "categories": [
            {"id": e.id, "name": e.name, "supercategory": e.supercategory, **e.extra} for e in d.registry.entries
        ],
    }
    doc.update(d.extra)
    return doc


def atomic_write_bytes(path: PathLike, data: bytes) -> None:
    """Write via a sibling temp file and rename, so readers never see partial output."""
    path = Path(path)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent or ".")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        try:
            os.unlink(tmp)
        except FileNotFoundError:
            pass
        raise


def dump_json(obj: Any) -> bytes:
    return (json.dumps(obj, indent=2, ensure_ascii=False) + "\n").encode("utf-8")


def save_dataset(d: Dataset, path: PathLike) -> None:
    atomic_write_bytes(path, dump_json(dataset_to_dict(d)))


# ---------------------------------------------------------------------------
# Rasters (binary PPM)
# ---------------------------------------------------------------------------


class Raster:
    """8-bit RGB image held as a ``(height, width, 3)`` uint8 array."""

    __slots__ = ("pixels",)

    def __init__(self, pixels: np.ndarray):
        arr = np.asarray(pixels)
        if arr.ndim != 3 or arr.shape[2] != 3 or arr.shape[0] < 1 or arr.shape[1] < 1:
            raise ValidationError(f"raster pixels must have shape (h, w, 3), got {arr.shape}")
        if arr.dtype != np.uint8:
            raise ValidationError(f"raster pixels must be uint8, got {arr.dtype}")
        arr = arr.copy()
        arr.flags.writeable = False
        self.pixels = arr

    @classmethod
    def filled(cls, width: int, height: int, rgb: tuple[int, int, int]) -> "Raster":
        return cls(np.broadcast_to(np.array(rgb, dtype=np.uint8), (height, width, 3)))

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    def __eq__(self, other: object) -> bool:
        return isinstance(other, Raster) and np.array_equal(self.pixels, other.pixels)

    def __repr__(self) -> str:
        return f"Raster({self.width}x{self.height})"

    def to_ppm(self) -> bytes:
        header = f"P6\n{self.width} {self.height}\n255\n".encode("ascii")
        return header + self.pixels.tobytes()

    @classmethod
    def from_ppm(cls, data: bytes) -> "Raster":
        if len(data) < 2:
            raise RasterFormatError("truncated header", len(data))
        magic = data[:2]
        if magic == b"P3":
            raise RasterFormatError("unsupported PPM variant P3 (ASCII); only binary P6 is supported", 0)
        if magic != b"P6":
            raise RasterFormatError(f"bad magic number {magic!r}, expected b'P6'", 0)
        pos = 2
        tokens = []
        while len(tokens) < 3:
            # whitespace and comments between header tokens
            while pos < len(data) and (data[pos : pos + 1].isspace() or data[pos : pos + 1] == b"#"):
                if data[pos : pos + 1] == b"#":
                    while pos < len(data) and data[pos : pos + 1] not in (b"\n", b"\r"):
                        pos += 1
                else:
                    pos += 1
            start = pos
            while pos < len(data) and data[pos : pos + 1].isdigit():
                pos += 1
            if start == pos:
                raise RasterFormatError("expected a decimal header token", pos)
            tokens.append(int(data[start:pos]))
        if pos >= len(data) or not data[pos : pos + 1].isspace():
            raise RasterFormatError("expected a single whitespace byte after maxval", pos)
        pos += 1
        width, height, maxval = tokens
        if width < 1 or height < 1:
            raise RasterFormatError(f"invalid size {width}x{height}", pos)
        if maxval != 255:
            raise RasterFormatError(f"unsupported maxval {maxval}, expected 255", pos)
        need = width * height * 3
        payload = data[pos : pos + need]
        if len(payload) < need:
            raise RasterFormatError(f"truncated pixel payload: expected {need} bytes, got {len(payload)}", pos + len(payload))
        return cls(np.frombuffer(payload, dtype=np.uint8).reshape(height, width, 3))


def load_raster(path: PathLike) -> Raster:
    path = Path(path)
    try:
        return Raster.from_ppm(path.read_bytes())
    except RasterFormatError as exc:
        raise RasterFormatError(exc.message, exc.offset, path) from exc


def save_raster(r: Raster, path: PathLike) -> None:
    atomic_write_bytes(path, r.to_ppm())


class RasterNotFoundError(FileNotFoundError):
    def __init__(self, image_id: int, path: PathLike | None = None):
        where = f" ({path})" if path is not None else ""
        super().__init__(f"raster for image {image_id} not found{where}")
        self.image_id = image_id


class DirectoryRasterStore(Mapping[int, Raster]):
    """Lazily loads the PPM raster ``root / file_name`` for each dataset image."""

    def __init__(self, root: PathLike, images: Iterable[ImageRecord]):
        self.root = Path(root)
        self._files = {im.id: im.file_name for im in images}

    def path(self, image_id: int) -> Path:
        return self.root / self._files[image_id]

    def __getitem__(self, image_id: int) -> Raster:
        if image_id not in self._files:
            raise KeyError(image_id)
        path = self.path(image_id)
        if not path.is_file():
            raise RasterNotFoundError(image_id, path)
        return load_raster(path)

    def __contains__(self, image_id: object) -> bool:
        return image_id in self._files

    def __iter__(self):
        return iter(self._files)

    def __len__(self) -> int:
        return len(self._files)


# ---------------------------------------------------------------------------
# Statistics and splitting
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DatasetStats:
    num_images: int
    num_instances: int
    avg_instances_per_image: float
    per_category_counts: dict[str, int]
    defective_image_fraction: float
    box_area_histogram: dict[str, int]

    def to_dict(self) -> dict[str, Any]:
        return {
            "num_images": self.num_images,
            "num_instances": self.num_instances,
            "avg_instances_per_image": self.avg_instances_per_image,
            "per_category_counts": dict(self.per_category_counts),
            "defective_image_fraction": self.defective_image_fraction,
            "box_area_histogram": dict(self.box_area_histogram),
        }

    def table(self) -> str:
        rows = [
            ("images", str(self.num_images)),
            ("instances", str(self.num_instances)),
            ("instances / image", f"{self.avg_instances_per_image:.3f}"),
            ("defective images", f"{self.defective_image_fraction:.2%}"),
        ]
        rows += [(f"area {k}", str(v)) for k, v in self.box_area_histogram.items()]
        rows += [(f"  {k}", str(v)) for k, v in self.per_category_counts.items()]
        width = max(len(k) for k, _ in rows)
        return "\n".join(f"{k.ljust(width)}  {v}" for k, v in rows)


def _bin_label(lo: float, hi: float) -> str:
    fmt = lambda v: "inf" if math.isinf(v) else str(int(v))  # noqa: E731
    return f"[{fmt(lo)},{fmt(hi)})"


def compute_stats(d: Dataset) -> DatasetStats:
    n_images = len(d.images)
    n_inst = len(d.annotations)
    per_cat = Counter(a.category.name for a in d.annotations)
    defective = {a.image_id for a in d.annotations if not a.category.is_normal}
    edges = (0.0,) + AREA_BIN_EDGES
    hist = {_bin_label(lo, hi): 0 for lo, hi in zip(edges[:-1], edges[1:])}
    labels = list(hist)
    for a in d.annotations:
        idx = int(np.searchsorted(AREA_BIN_EDGES, a.box.area, side="right"))
        hist[labels[min(idx, len(labels) - 1)]] += 1
    return DatasetStats(
        num_images=n_images,
        num_instances=n_inst,
        avg_instances_per_image=n_inst / n_images if n_images else 0.0,
        per_category_counts={k: per_cat[k] for k in sorted(per_cat)},
        defective_image_fraction=len(defective) / n_images if n_images else 0.0,
        box_area_histogram=hist,
    )


def split_dataset(d: Dataset, train_fraction: float, rng: np.random.Generator) -> tuple[Dataset, Dataset]:
    """Random image-level partition; annotations follow their image."""
    if not 0.0 < train_fraction < 1.0:
        raise ValidationError(f"train_fraction must be in (0, 1), got {train_fraction}")
    n_train = round_half_up(train_fraction * len(d.images))
    order = rng.permutation(len(d.images))
    train_idx = set(order[:n_train].tolist())
    train_ids = {im.id for i, im in enumerate(d.images) if i in train_idx}

    def part(keep) -> Dataset:
        return Dataset(
            tuple(im for im in d.images if keep(im.id)),
            tuple(a for a in d.annotations if keep(a.image_id)),
            d.registry,
            d.extra,
        )

    return part(lambda i: i in train_ids), part(lambda i: i not in train_ids)
