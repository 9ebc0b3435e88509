"""BBoxMixUp: blend same-class box regions across images.

Boxes of one category are pooled over the whole dataset.  For a target box a
candidate of the same category is drawn from a *different* image, its region
is bilinearly resized to the target's pixel size, and the target region is
replaced by ``lam * target + (1 - lam) * candidate`` with ``lam ~ Beta(a, b)``.
Labels are never touched.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Mapping

import numpy as np

from .core import Annotation, BBox, Category, GeometryError, ValidationError, pixel_rect, rng_stream
from .datio import Dataset, Raster, RasterNotFoundError

MIX_PURPOSE = "bboxmixup"

Ref = tuple[int, int]  # (image_id, annotation_id)


@dataclass(frozen=True)
class MixParams:
    alpha: float = 1.0
    beta: float = 1.0
    apply_prob: float = 0.5
    seed: int = 0
    defects_only: bool = False

    def __post_init__(self) -> None:
        if not (self.alpha > 0 and self.beta > 0):
            raise ValidationError(f"Beta shapes must be positive, got alpha={self.alpha}, beta={self.beta}")
        if not 0.0 <= self.apply_prob <= 1.0:
            raise ValidationError(f"apply_prob must be in [0, 1], got {self.apply_prob}")


ClassPool = dict[Category, list[Ref]]


def build_class_pools(d: Dataset) -> ClassPool:
    pools: ClassPool = {}
    for a in d.annotations:
        if a.id is None:
            continue
        pools.setdefault(a.category, []).append((a.image_id, a.id))
    return pools


def select_candidate(pool: ClassPool, target: Annotation, rng: np.random.Generator) -> Ref | None:
    eligible = [ref for ref in pool.get(target.category, ()) if ref[0] != target.image_id]
    if not eligible:
        return None
    return eligible[int(rng.integers(len(eligible)))]


def sample_mix_ratio(params: MixParams, rng: np.random.Generator) -> float:
    """One Beta(alpha, beta) draw as ``X / (X + Y)`` with Gamma-distributed X, Y."""
    a, b = params.alpha, params.beta
    if not (a > 0 and b > 0):
        raise ValidationError(f"Beta shapes must be positive, got alpha={a}, beta={b}")
    x = rng.standard_gamma(a)
    y = rng.standard_gamma(b)
    total = x + y
    if total == 0.0:
        # both draws underflowed (tiny shapes): the mass sits at the endpoints
        return 1.0 if rng.random() < a / (a + b) else 0.0
    return float(min(1.0, max(0.0, x / total)))


def _check_inside(box: BBox, r: Raster) -> None:
    eps = 1e-9
    if box.w <= 0 or box.h <= 0:
        raise GeometryError(f"box {box.to_list()} has no area")
    if box.x < -eps or box.y < -eps or box.x + box.w > r.width + eps or box.y + box.h > r.height + eps:
        raise GeometryError(f"box {box.to_list()} lies outside the {r.width}x{r.height} raster")


def _round_clip(values: np.ndarray) -> np.ndarray:
    return np.clip(np.floor(values + 0.5), 0, 255).astype(np.uint8)


def resize_region(src: Raster, src_box: BBox, out_w: int, out_h: int) -> Raster:
    """Crop ``src_box`` and resample it bilinearly (pixel-centre aligned) to ``out_w x out_h``."""
    if out_w < 1 or out_h < 1:
        raise GeometryError(f"output size must be at least 1x1, got {out_w}x{out_h}")
    _check_inside(src_box, src)
    x0, y0, w, h = pixel_rect(src_box, src.width, src.height)
    crop = src.pixels[y0 : y0 + h, x0 : x0 + w].astype(np.int64)
    if (w, h) == (out_w, out_h):
        return Raster(crop.astype(np.uint8))

    # Sample positions are ((2j+1)*n_in - n_out) / (2*n_out); keep them as
    # integer numerators so half-way values round exactly.
    def axis(n_in: int, n_out: int) -> tuple[np.ndarray, np.ndarray, np.ndarray, int]:
        den = 2 * n_out
        num = np.clip((2 * np.arange(n_out) + 1) * n_in - n_out, 0, den * (n_in - 1))
        lo = num // den
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, num - lo * den, den

    xl, xh, fx, dx = axis(w, out_w)
    yl, yh, fy, dy = axis(h, out_h)
    fx = fx[None, :, None]
    fy = fy[:, None, None]
    top = crop[yl][:, xl] * (dx - fx) + crop[yl][:, xh] * fx
    bottom = crop[yh][:, xl] * (dx - fx) + crop[yh][:, xh] * fx
    total = top * (dy - fy) + bottom * fy
    scale = dx * dy
    return Raster(np.clip((2 * total + scale) // (2 * scale), 0, 255).astype(np.uint8))


def mix_region(target: Raster, target_box: BBox, patch: Raster, lam: float) -> Raster:
    """Blend ``patch`` into ``target_box``: ``lam`` weights the target, ``1 - lam`` the patch."""
    if not 0.0 <= lam <= 1.0:
        raise ValidationError(f"mixing ratio must be in [0, 1], got {lam}")
    _check_inside(target_box, target)
    x0, y0, w, h = pixel_rect(target_box, target.width, target.height)
    if (patch.width, patch.height) != (w, h):
        raise ValidationError(f"patch is {patch.width}x{patch.height} but target region is {w}x{h}")
    out = target.pixels.copy()
    region = out[y0 : y0 + h, x0 : x0 + w].astype(np.float64)
    out[y0 : y0 + h, x0 : x0 + w] = _round_clip(lam * region + (1.0 - lam) * patch.pixels.astype(np.float64))
    return Raster(out)


@dataclass(frozen=True)
class MixEvent:
    image_id: int
    annotation_id: int
    source: Ref
    ratio: float


def _augment_image(
    image_id: int,
    targets: list[Annotation],
    d_boxes: Mapping[Ref, BBox],
    pool: ClassPool,
    rasters: Mapping[int, Raster],
    params: MixParams,
    mix_ratio: float | None,
) -> tuple[Raster, list[MixEvent]]:
    rng = rng_stream(params.seed, MIX_PURPOSE, image_id)
    out = rasters[image_id]
    events = []
    for ann in sorted(targets, key=lambda a: a.id):
        if params.defects_only and ann.category.is_normal:
            continue
        if rng.random() >= params.apply_prob:
            continue
        ref = select_candidate(pool, ann, rng)
        if ref is None:
            continue
        lam = sample_mix_ratio(params, rng) if mix_ratio is None else mix_ratio
        pix = pixel_rect(ann.box, out.width, out.height)
        # candidates are read from the pristine input so images stay independent
        patch = resize_region(rasters[ref[0]], d_boxes[ref], pix[2], pix[3])
        out = mix_region(out, ann.box, patch, lam)
        events.append(MixEvent(image_id, ann.id, ref, lam))
    return out, events


def apply_bboxmixup(
    d: Dataset,
    rasters: Mapping[int, Raster],
    params: MixParams,
    *,
    jobs: int = 1,
    mix_ratio: float | None = None,
    log: list[MixEvent] | None = None,
) -> dict[int, Raster]:
    """Augment every image of ``d``; returns new rasters keyed by image id.

    ``mix_ratio`` pins the blend ratio instead of sampling it. Results do not
    depend on ``jobs``.  Mix events are appended to ``log`` if given.
    """
    for im in d.images:
        if im.id not in rasters:
            raise RasterNotFoundError(im.id)
    cached = {im.id: rasters[im.id] for im in d.images}
    pool = build_class_pools(d)
    boxes = {(a.image_id, a.id): a.box for a in d.annotations}
    by_image = {k: [a for a in v if a.id is not None] for k, v in d.annotations_by_image().items()}
    ids = sorted(by_image)

    def work(image_id: int) -> tuple[Raster, list[MixEvent]]:
        return _augment_image(image_id, by_image[image_id], boxes, pool, cached, params, mix_ratio)

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as ex:
            results = list(ex.map(work, ids))
    else:
        results = [work(i) for i in ids]
    out = {}
    for image_id, (raster, events) in zip(ids, results):
        out[image_id] = raster
        if log is not None:
            log.extend(events)
    return out
