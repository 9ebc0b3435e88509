"""Consistency-guided pseudo-label calibration.

Per image the pipeline is::

    filter_by_confidence -> context_semantic_calibrate -> spatial_dedup
                         -> visual_semantic_calibrate  -> spatial_dedup

Every stage is a pure function of its input labels.  Boxes and confidences
are never modified; only categories and set membership change.  All
tie-breaks are order-free, so the output does not depend on input order.
"""

from __future__ import annotations

import json
import logging
import math
import os
from collections import defaultdict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Mapping, Protocol, Sequence

import numpy as np

from .core import (
    NORMAL,
    Category,
    CategoryRegistry,
    DataFormatError,
    FoodType,
    GeometryError,
    PseudoLabel,
    ValidationError,
    iou,
    pixel_rect,
)
from .datio import Raster, RasterNotFoundError

logger = logging.getLogger(__name__)

HIST_BINS_PER_CHANNEL = 8
FEATURE_NORM_TOL = 1e-6


class FeatureError(DataFormatError, KeyError):
    def __str__(self) -> str:
        return str(self.args[0]) if self.args else ""


# ---------------------------------------------------------------------------
# Feature providers
# ---------------------------------------------------------------------------


class FeatureProvider(Protocol):
    def extract(self, labels: Sequence[PseudoLabel], rasters: Mapping[int, Raster]) -> dict[str, np.ndarray]: ...


def _l2(v: np.ndarray, key: str) -> np.ndarray:
    norm = float(np.linalg.norm(v))
    if not norm > 0:
        raise FeatureError(f"feature for {key!r} is the zero vector")
    return v / norm


def color_histogram(pixels: np.ndarray, bins: int = HIST_BINS_PER_CHANNEL) -> np.ndarray:
    """Joint RGB histogram with ``bins**3`` cells, L1- then L2-normalised."""
    q = (pixels.reshape(-1, 3).astype(np.int64) * bins) // 256
    idx = (q[:, 0] * bins + q[:, 1]) * bins + q[:, 2]
    hist = np.bincount(idx, minlength=bins**3).astype(np.float64)
    hist /= hist.sum()
    return hist / np.linalg.norm(hist)


class HistogramFeatures:
    """Built-in provider: 8x8x8 colour histogram of the pixels under each box."""

    def extract(self, labels: Sequence[PseudoLabel], rasters: Mapping[int, Raster]) -> dict[str, np.ndarray]:
        out: dict[str, np.ndarray] = {}
        for lab in labels:
            if lab.key in out:
                continue
            if not (lab.box.w > 0 and lab.box.h > 0):
                raise GeometryError(f"region {lab.key} has zero area")
            if lab.image_id not in rasters:
                raise RasterNotFoundError(lab.image_id)
            r = rasters[lab.image_id]
            x0, y0, w, h = pixel_rect(lab.box, r.width, r.height)
            out[lab.key] = color_histogram(r.pixels[y0 : y0 + h, x0 : x0 + w])
        return out


class ArrayFeatures:
    """Provider backed by an in-memory ``key -> vector`` map (vectors are L2-normalised)."""

    def __init__(self, vectors: Mapping[str, Iterable[float]]):
        self.vectors: dict[str, np.ndarray] = {}
        length = None
        for key, vec in vectors.items():
            arr = np.asarray(list(vec), dtype=np.float64)
            if arr.ndim != 1 or arr.size == 0 or not np.all(np.isfinite(arr)):
                raise FeatureError(f"feature for {key!r} must be a non-empty array of finite numbers")
            if length is None:
                length = arr.size
            elif arr.size != length:
                raise FeatureError(f"feature for {key!r} has length {arr.size}, expected {length}")
            self.vectors[key] = _l2(arr, key)

    def extract(self, labels: Sequence[PseudoLabel], rasters: Mapping[int, Raster] | None = None) -> dict[str, np.ndarray]:
        out = {}
        for lab in labels:
            try:
                out[lab.key] = self.vectors[lab.key]
            except KeyError:
                raise FeatureError(f"no feature for region {lab.key!r}") from None
        return out


class ExternalFeatures(ArrayFeatures):
    """Precomputed embeddings from a JSON file ``{"<image_id>:<x>:<y>:<w>:<h>": [floats]}``."""

    def __init__(self, path: str | os.PathLike):
        self.path = Path(path)
        try:
            doc = json.loads(self.path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise FeatureError(f"{self.path}: malformed JSON: {exc}") from exc
        if not isinstance(doc, dict):
            raise FeatureError(f"{self.path}: expected an object mapping region keys to arrays")
        super().__init__(doc)


def compute_region_features(
    provider: FeatureProvider, rasters: Mapping[int, Raster], labels: Sequence[PseudoLabel]
) -> dict[str, np.ndarray]:
    return provider.extract(labels, rasters)


# ---------------------------------------------------------------------------
# Config
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CgpcConfig:
    confidence_threshold: float = 0.35
    similarity_threshold: float = 0.85
    iou_threshold: float = 0.65
    feature_provider: FeatureProvider = field(default_factory=HistogramFeatures, compare=False)

    def __post_init__(self) -> None:
        if not 0.0 <= self.confidence_threshold <= 1.0:
            raise ValidationError(f"confidence_threshold must be in [0, 1], got {self.confidence_threshold}")
        if not -1.0 <= self.similarity_threshold <= 1.0:
            raise ValidationError(f"similarity_threshold must be in [-1, 1], got {self.similarity_threshold}")
        if not 0.0 <= self.iou_threshold <= 1.0:
            raise ValidationError(f"iou_threshold must be in [0, 1], got {self.iou_threshold}")


# ---------------------------------------------------------------------------
# Stages
# ---------------------------------------------------------------------------


def filter_by_confidence(preds: Iterable[PseudoLabel], tau: float) -> list[PseudoLabel]:
    return [p for p in preds if p.confidence >= tau]


def _modal(votes: Iterable[tuple[Any, float]], name=str) -> Any:
    """Most frequent value; ties go to higher summed confidence, then smaller name."""
    confs: dict[Any, list[float]] = defaultdict(list)
    for value, conf in votes:
        confs[value].append(conf)
    # fsum is exactly rounded, so the tie-break cannot depend on input order
    return min(confs, key=lambda v: (-len(confs[v]), -math.fsum(confs[v]), name(v)))


def _food_name(f: FoodType) -> str:
    return f.value


def context_semantic_calibrate(
    labels: Sequence[PseudoLabel], registry: CategoryRegistry | None = None
) -> list[PseudoLabel]:
    """Rewrite every label's food to the image's modal food; conditions are kept.

    If the registry lacks ``<food>__<condition>`` for the new food, the label
    falls back to ``<food>__normal``.
    """
    if not labels:
        return []
    food = _modal(((lab.category.food, lab.confidence) for lab in labels), _food_name)
    out = []
    for lab in labels:
        cat = lab.category.with_food(food)
        if registry is not None and cat not in registry:
            fallback = Category(food, NORMAL)
            logger.warning(
                "image %s: %s has no counterpart for %s, remapped to %s",
                lab.image_id, lab.category.name, food.value, fallback.name,
            )
            cat = fallback
        out.append(lab.relabel(cat))
    return out


def visual_semantic_calibrate(
    labels: Sequence[PseudoLabel], features: Mapping[str, np.ndarray], sim_threshold: float
) -> list[PseudoLabel]:
    """Replace each label's category by the modal category among its visual peers.

    Peers of label i are all labels j (i included) whose features have cosine
    similarity >= ``sim_threshold``.  Votes are taken from the input labels
    simultaneously.
    """
    if not labels:
        return []
    try:
        mat = np.stack([features[lab.key] for lab in labels])
    except KeyError as exc:
        raise FeatureError(f"no feature for region {exc.args[0]!r}") from None
    sim = mat @ mat.T
    out = []
    for i, lab in enumerate(labels):
        peers = [j for j in range(len(labels)) if j == i or sim[i, j] >= sim_threshold]
        cat = _modal(((labels[j].category, labels[j].confidence) for j in peers), lambda c: c.name)
        out.append(lab.relabel(cat))
    return out


def _nms_key(lab: PseudoLabel) -> tuple:
    return (-lab.confidence, lab.box.digest(), lab.category.name, lab.box.to_list())


def spatial_dedup(labels: Sequence[PseudoLabel], iou_threshold: float) -> list[PseudoLabel]:
    """Category-scoped greedy NMS; output is in kept (confidence-descending) order."""
    kept: list[PseudoLabel] = []
    for lab in sorted(labels, key=_nms_key):
        if any(k.category == lab.category and iou(k.box, lab.box) >= iou_threshold for k in kept):
            continue
        kept.append(lab)
    return kept


# ---------------------------------------------------------------------------
# Pipeline
# ---------------------------------------------------------------------------


def label_to_dict(lab: PseudoLabel) -> dict[str, Any]:
    return {
        "image_id": lab.image_id,
        "category": lab.category.name,
        "bbox": lab.box.to_list(),
        "score": lab.confidence,
    }


@dataclass
class StageRecord:
    image_id: int
    stage: str
    before: list[PseudoLabel]
    after: list[PseudoLabel]

    def to_dict(self) -> dict[str, Any]:
        return {
            "image_id": self.image_id,
            "stage": self.stage,
            "before": [label_to_dict(x) for x in self.before],
            "after": [label_to_dict(x) for x in self.after],
        }


def calibrate_image(
    labels: Sequence[PseudoLabel],
    rasters: Mapping[int, Raster],
    cfg: CgpcConfig,
    registry: CategoryRegistry | None = None,
    trace: list[StageRecord] | None = None,
) -> list[PseudoLabel]:
    image_ids = {lab.image_id for lab in labels}
    if len(image_ids) > 1:
        raise ValidationError(f"calibrate_image expects one image, got ids {sorted(image_ids)}")
    image_id = next(iter(image_ids), None)
    cur = list(labels)

    def stage(name: str, new: list[PseudoLabel]) -> list[PseudoLabel]:
        if trace is not None:
            trace.append(StageRecord(image_id, name, cur, new))
        return new

    cur = stage("filter", filter_by_confidence(cur, cfg.confidence_threshold))
    cur = stage("context", context_semantic_calibrate(cur, registry))
    cur = stage("dedup_context", spatial_dedup(cur, cfg.iou_threshold))
    feats = compute_region_features(cfg.feature_provider, rasters, cur) if cur else {}
    cur = stage("visual", visual_semantic_calibrate(cur, feats, cfg.similarity_threshold))
    cur = stage("dedup_visual", spatial_dedup(cur, cfg.iou_threshold))
    return cur


def run_cgpc(
    preds: Iterable[PseudoLabel],
    rasters: Mapping[int, Raster],
    cfg: CgpcConfig,
    registry: CategoryRegistry | None = None,
    *,
    trace: list[StageRecord] | None = None,
    jobs: int = 1,
) -> dict[int, list[PseudoLabel]]:
    """Calibrate predictions image by image; returns ``image_id -> labels`` in ascending id order."""
    by_image: dict[int, list[PseudoLabel]] = defaultdict(list)
    for p in preds:
        by_image[p.image_id].append(p)
    ids = sorted(by_image)

    def work(image_id: int) -> tuple[list[PseudoLabel], list[StageRecord]]:
        local: list[StageRecord] = []
        return calibrate_image(by_image[image_id], rasters, cfg, registry, local), local

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as ex:
            results = list(ex.map(work, ids))
    else:
        results = [work(i) for i in ids]
    out = {}
    for image_id, (labels, records) in zip(ids, results):
        out[image_id] = labels
        if trace is not None:
            trace.extend(records)
    return out


def write_trace(records: Iterable[StageRecord]) -> bytes:
    lines = [json.dumps(r.to_dict(), sort_keys=True) for r in records]
    return ("\n".join(lines) + "\n").encode() if lines else b""
