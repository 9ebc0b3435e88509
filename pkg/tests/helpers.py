"""Small constructors shared by the test modules."""

from __future__ import annotations

import zlib

import numpy as np
from hypothesis import strategies as st

from defectkit.cgpc import ArrayFeatures
from defectkit.core import Annotation, BBox, Category, CategoryRegistry, FoodType, PseudoLabel
from defectkit.datio import Dataset, ImageRecord, Raster

FOODS = [FoodType.APPLE, FoodType.PEAR, FoodType.PLUM]
CONDS = ["normal", "rot", "mold", "bruise"]
REG = CategoryRegistry.product(FOODS, CONDS)
CATS = list(REG)

box_st = st.builds(
    lambda x, y, w, h: BBox(x, y, w, h),
    st.integers(0, 6),
    st.integers(0, 6),
    st.integers(3, 8),
    st.integers(3, 8),
)
label_st = st.builds(
    lambda b, c, p: PseudoLabel(b, c, p / 20, 1),
    box_st,
    st.sampled_from(CATS),
    st.integers(0, 20),
)
labels_st = st.lists(label_st, max_size=12)


def features_for(labels, seed=0, dim=4):
    rng = np.random.default_rng(seed)
    # a few direction clusters so that peers exist
    centres = rng.normal(size=(3, dim))
    vecs = {}
    for lab in labels:
        if lab.key not in vecs:
            vecs[lab.key] = centres[zlib.crc32(lab.key.encode()) % 3] + 0.05 * rng.normal(size=dim)
    return ArrayFeatures(vecs)


def cat(name: str) -> Category:
    food, _, cond = name.partition("__")
    return Category(FoodType(food), cond)


def pl(name: str, conf: float, box=(0, 0, 10, 10), image_id: int = 1) -> PseudoLabel:
    return PseudoLabel(BBox(*box), cat(name), conf, image_id)


def random_mix_fixture(seed: int):
    """A small random dataset (2-4 images, 1-4 boxes each) plus noise rasters."""
    rng = np.random.default_rng(seed)
    reg = CategoryRegistry.product([FoodType.APPLE, FoodType.PEAR], ["normal", "rot"])
    cats = list(reg)
    images, anns, rasters = [], [], {}
    next_ann = 1
    for image_id in range(1, int(rng.integers(2, 5)) + 1):
        w, h = int(rng.integers(8, 25)), int(rng.integers(8, 25))
        images.append(ImageRecord(image_id, f"{image_id}.ppm", w, h))
        rasters[image_id] = Raster(rng.integers(0, 256, size=(h, w, 3), dtype=np.uint8))
        for _ in range(int(rng.integers(1, 5))):
            bw, bh = float(rng.integers(1, w + 1)), float(rng.integers(1, h + 1))
            x, y = float(rng.integers(0, w - int(bw) + 1)), float(rng.integers(0, h - int(bh) + 1))
            anns.append(Annotation(next_ann, image_id, BBox(x, y, bw, bh), cats[int(rng.integers(len(cats)))]))
            next_ann += 1
    return Dataset(images, anns, reg), rasters


ACCEPTANCE_LINES: list[str] = []


class criterion:
    """Context manager that logs one PASS/FAIL line for an acceptance check."""

    def __init__(self, name: str):
        self.name = name
        self.notes: list[str] = []

    def note(self, text: str) -> None:
        self.notes.append(text)

    def __enter__(self) -> "criterion":
        import time

        self._t0 = time.perf_counter()
        return self

    def __exit__(self, exc_type, exc, tb) -> bool:
        import time

        took = time.perf_counter() - self._t0
        verdict = "PASS" if exc_type is None else "FAIL"
        extra = "; ".join(self.notes)
        if exc is not None:
            extra = f"{extra}; {exc_type.__name__}: {exc}".lstrip("; ")
        line = f"{verdict} {self.name} ({took:.2f}s){': ' + extra if extra else ''}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        return False
