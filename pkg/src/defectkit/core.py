"""Shared domain types, box geometry, category algebra and RNG substreams."""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Iterable, Mapping, Sequence

import numpy as np

NORMAL = "normal"
CATEGORY_SEP = "__"


class DefectKitError(Exception):
    """Base class for all errors raised by this package."""


class GeometryError(DefectKitError, ValueError):
    pass


class CategoryError(DefectKitError, ValueError):
    pass


class DataFormatError(DefectKitError):
    """Input data is malformed or inconsistent (corrupted file, dangling id, ...)."""


class ValidationError(DefectKitError, ValueError):
    """A value or configuration violates its documented invariants."""


class FoodType(str, Enum):
    APPLE = "apple"
    APRICOT = "apricot"
    BANANA = "banana"
    CANTALOUPE = "cantaloupe"
    CHERRY = "cherry"
    LYCHEE = "lychee"
    MANGO = "mango"
    ORANGE = "orange"
    PEACH = "peach"
    PEAR = "pear"
    PLUM = "plum"
    STRAWBERRY = "strawberry"
    WATERMELON = "watermelon"

    def __str__(self) -> str:
        return self.value


_FOODS = {f.value: f for f in FoodType}


# ---------------------------------------------------------------------------
# Geometry
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class BBox:
    """Axis-aligned box in COCO ``xywh`` convention (top-left corner, pixels)."""

    x: float
    y: float
    w: float
    h: float

    def __post_init__(self) -> None:
        for name in ("x", "y", "w", "h"):
            object.__setattr__(self, name, float(getattr(self, name)))

    @classmethod
    def from_xyxy(cls, x1: float, y1: float, x2: float, y2: float) -> "BBox":
        return cls(x1, y1, x2 - x1, y2 - y1)

    @property
    def area(self) -> float:
        return self.w * self.h

    def xyxy(self) -> tuple[float, float, float, float]:
        return (self.x, self.y, self.x + self.w, self.y + self.h)

    def translate(self, dx: float, dy: float) -> "BBox":
        return BBox(self.x + dx, self.y + dy, self.w, self.h)

    def to_list(self) -> list[float]:
        return [self.x, self.y, self.w, self.h]

    def digest(self) -> str:
        return f"{self.x:.2f}:{self.y:.2f}:{self.w:.2f}:{self.h:.2f}"


def _check_area(b: BBox) -> None:
    if not (b.w > 0 and b.h > 0) or not math.isfinite(b.area):
        raise GeometryError(f"degenerate box {b.to_list()}: width and height must be positive")


def iou(a: BBox, b: BBox) -> float:
    _check_area(a)
    _check_area(b)
    ax1, ay1, ax2, ay2 = a.xyxy()
    bx1, by1, bx2, by2 = b.xyxy()
    iw = min(ax2, bx2) - max(ax1, bx1)
    ih = min(ay2, by2) - max(ay1, by1)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    union = a.area + b.area - inter
    return min(1.0, inter / union)


def round_half_up(v: float) -> int:
    """Round half away from zero (for the non-negative values used here)."""
    return int(math.floor(v + 0.5)) if v >= 0 else -int(math.floor(-v + 0.5))


def pixel_rect(box: BBox, width: int, height: int) -> tuple[int, int, int, int]:
    """Integer ``(x0, y0, w, h)`` pixel rectangle covering ``box`` inside a raster.

    Dimensions are rounded to the nearest integer (at least 1); the origin is
    rounded and then pulled back so the rectangle stays inside the raster.
    """
    w = max(1, round_half_up(box.w))
    h = max(1, round_half_up(box.h))
    if w > width or h > height:
        raise GeometryError(f"box {box.to_list()} does not fit a {width}x{height} raster")
    x0 = min(max(0, round_half_up(box.x)), width - w)
    y0 = min(max(0, round_half_up(box.y)), height - h)
    return x0, y0, w, h


# ---------------------------------------------------------------------------
# Categories
# ---------------------------------------------------------------------------


@dataclass(frozen=True, order=True)
class Category:
    """Composite label ``food x condition``; ``condition == "normal"`` for healthy fruit."""

    food: FoodType
    condition: str = NORMAL

    @property
    def is_normal(self) -> bool:
        return self.condition == NORMAL

    @property
    def name(self) -> str:
        return f"{self.food.value}{CATEGORY_SEP}{self.condition}"

    def with_food(self, food: FoodType) -> "Category":
        return Category(food, self.condition)

    def __str__(self) -> str:
        return self.name


@dataclass(frozen=True)
class CategoryEntry:
    id: int
    name: str
    supercategory: str
    extra: Mapping[str, Any] = field(default_factory=dict, compare=True, hash=False)


class CategoryRegistry:
    """Bidirectional map between COCO category ids and :class:`Category` values."""

    def __init__(self, entries: Iterable[CategoryEntry]):
        self.entries: tuple[CategoryEntry, ...] = tuple(entries)
        self._by_id: dict[int, Category] = {}
        self._by_cat: dict[Category, int] = {}
        self._conditions: set[str] = set()
        for e in self.entries:
            if e.id in self._by_id:
                raise CategoryError(f"duplicate category id {e.id}")
            cat = parse_category_name(e.name)
            if e.supercategory != cat.food.value:
                raise CategoryError(
                    f"category {e.id} ({e.name!r}): supercategory {e.supercategory!r} "
                    f"does not match food {cat.food.value!r}"
                )
            if cat in self._by_cat:
                raise CategoryError(f"category name {e.name!r} registered twice")
            self._by_id[e.id] = cat
            self._by_cat[cat] = e.id
            self._conditions.add(cat.condition)

    @classmethod
    def from_categories(cls, cats: Iterable[Category]) -> "CategoryRegistry":
        ordered = sorted(set(cats))
        return cls(CategoryEntry(i + 1, c.name, c.food.value) for i, c in enumerate(ordered))

    @classmethod
    def product(cls, foods: Sequence[FoodType | str], conditions: Sequence[str]) -> "CategoryRegistry":
        cats = [Category(FoodType(f), c) for f in foods for c in conditions]
        return cls.from_categories(cats)

    def __len__(self) -> int:
        return len(self.entries)

    def __contains__(self, cat: object) -> bool:
        return cat in self._by_cat

    def __iter__(self):
        return iter(self._by_cat)

    def __eq__(self, other: object) -> bool:
        return isinstance(other, CategoryRegistry) and self.entries == other.entries

    @property
    def conditions(self) -> frozenset[str]:
        return frozenset(self._conditions)

    @property
    def categories(self) -> list[Category]:
        return [self._by_id[e.id] for e in self.entries]

    def category(self, category_id: int) -> Category:
        try:
            return self._by_id[category_id]
        except KeyError:
            raise CategoryError(f"unknown category id {category_id}") from None

    def id_of(self, cat: Category) -> int:
        try:
            return self._by_cat[cat]
        except KeyError:
            raise CategoryError(f"category {cat.name!r} is not registered") from None


def parse_category_name(name: str, registry: CategoryRegistry | None = None) -> Category:
    """Parse ``"<food>__<condition>"`` into a :class:`Category`.

    With a registry, defect conditions must be registered for that food.
    ``normal`` is always accepted.
    """
    food_tok, sep, cond_tok = name.partition(CATEGORY_SEP)
    if not sep or not cond_tok:
        raise CategoryError(f"category name {name!r} is not of the form '<food>{CATEGORY_SEP}<condition>'")
    if food_tok not in _FOODS:
        raise CategoryError(f"unknown food {food_tok!r} in category name {name!r}")
    cat = Category(_FOODS[food_tok], cond_tok)
    if registry is None or cat.is_normal:
        return cat
    if cond_tok not in registry.conditions:
        raise CategoryError(f"unknown condition {cond_tok!r} in category name {name!r}")
    if cat not in registry:
        raise CategoryError(f"category {name!r} is not registered (condition {cond_tok!r} not defined for {food_tok!r})")
    return cat


# ---------------------------------------------------------------------------
# Labels
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Annotation:
    id: int
    image_id: int
    box: BBox
    category: Category
    extra: Mapping[str, Any] = field(default_factory=dict, compare=True, hash=False)


@dataclass(frozen=True)
class PseudoLabel:
    box: BBox
    category: Category
    confidence: float
    image_id: int
    id: int | None = None
    extra: Mapping[str, Any] = field(default_factory=dict, compare=True, hash=False)

    def __post_init__(self) -> None:
        if not (0.0 <= self.confidence <= 1.0):
            raise ValidationError(f"confidence {self.confidence} outside [0, 1]")

    @property
    def key(self) -> str:
        """Region key ``"<image_id>:<x>:<y>:<w>:<h>"`` used by feature providers."""
        return f"{self.image_id}:{self.box.digest()}"

    def relabel(self, category: Category) -> "PseudoLabel":
        if category == self.category:
            return self
        return PseudoLabel(self.box, category, self.confidence, self.image_id, self.id, self.extra)


# ---------------------------------------------------------------------------
# Deterministic RNG substreams
# ---------------------------------------------------------------------------


def derive_seed(seed: int, purpose: str, key: int | str = 0) -> int:
    """Stable 64-bit seed for the ``(seed, purpose, key)`` substream."""
    payload = f"{int(seed) & 0xFFFFFFFFFFFFFFFF}|{purpose}|{key}".encode()
    return int.from_bytes(hashlib.blake2b(payload, digest_size=8).digest(), "little")


def rng_stream(seed: int, purpose: str, key: int | str = 0) -> np.random.Generator:
    """Independent generator for one (purpose, image) pair.

    Streams never depend on processing order, so per-image work can be
    scheduled in any order or in parallel with identical results.
    """
    return np.random.Generator(np.random.PCG64(derive_seed(seed, purpose, key)))
