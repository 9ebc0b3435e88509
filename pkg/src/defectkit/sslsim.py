"""Toy mean-teacher simulation over synthetic region features.

The detector is a nearest-centroid classifier.  Features are standardised by
the model's running mean/variance (its "buffers") before being compared with
the centroids, so a teacher whose buffers are never refreshed keeps using the
labeled-domain statistics while its centroids drift into the coordinates the
student sees.  Under a domain shift that mismatch flattens the teacher's
confidences until nothing survives the threshold.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Any, Iterable, Mapping, Sequence

import numpy as np

from .core import BBox, Category, CategoryRegistry, FoodType, PseudoLabel, ValidationError, rng_stream
from .cgpc import ArrayFeatures, CgpcConfig, run_cgpc

STUDENT_BUFFER_MOMENTUM = 0.9
VAR_FLOOR = 1e-12


# ---------------------------------------------------------------------------
# Model
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class ToyModel:
    categories: tuple[Category, ...]
    centroids: np.ndarray  # (C, D), in normalised coordinates
    running_mean: np.ndarray  # (D,)
    running_var: np.ndarray  # (D,)
    temperature: float = 1.0

    def __post_init__(self) -> None:
        cents = np.array(self.centroids, dtype=np.float64)
        mean = np.array(self.running_mean, dtype=np.float64)
        var = np.array(self.running_var, dtype=np.float64)
        if cents.ndim != 2 or cents.shape[0] != len(self.categories):
            raise ValidationError(f"need one centroid per category, got shape {cents.shape} for {len(self.categories)}")
        if mean.shape != (cents.shape[1],) or var.shape != mean.shape:
            raise ValidationError(f"buffer shapes {mean.shape}/{var.shape} do not match feature dim {cents.shape[1]}")
        if not np.all(var > 0):
            raise ValidationError("running variance must be strictly positive")
        if not self.temperature > 0:
            raise ValidationError(f"temperature must be positive, got {self.temperature}")
        if len(set(self.categories)) != len(self.categories):
            raise ValidationError("duplicate categories")
        for arr in (cents, mean, var):
            arr.flags.writeable = False
        object.__setattr__(self, "categories", tuple(self.categories))
        object.__setattr__(self, "centroids", cents)
        object.__setattr__(self, "running_mean", mean)
        object.__setattr__(self, "running_var", var)
        object.__setattr__(self, "temperature", float(self.temperature))

    @classmethod
    def initial(cls, categories: Sequence[Category], dim: int, temperature: float = 1.0) -> "ToyModel":
        return cls(tuple(categories), np.zeros((len(categories), dim)), np.zeros(dim), np.ones(dim), temperature)

    @property
    def dim(self) -> int:
        return self.centroids.shape[1]

    def index(self, cat: Category) -> int:
        return self.categories.index(cat)

    def allclose(self, other: "ToyModel", atol: float = 0.0) -> bool:
        return (
            self.categories == other.categories
            and self.temperature == other.temperature
            and all(
                np.allclose(a, b, rtol=0.0, atol=atol)
                for a, b in (
                    (self.centroids, other.centroids),
                    (self.running_mean, other.running_mean),
                    (self.running_var, other.running_var),
                )
            )
        )


@dataclass(frozen=True)
class EmaConfig:
    momentum: float = 0.999
    update_buffers: bool = True

    def __post_init__(self) -> None:
        if not 0.0 <= self.momentum <= 1.0:
            raise ValidationError(f"momentum must be in [0, 1], got {self.momentum}")


def ema_update(teacher: ToyModel, student: ToyModel, cfg: EmaConfig) -> ToyModel:
    """``t' = m*t + (1-m)*s`` on the centroids, and on the buffers iff ``cfg.update_buffers``."""
    if teacher.categories != student.categories:
        raise ValidationError("teacher and student cover different categories")
    if teacher.centroids.shape != student.centroids.shape:
        raise ValidationError(f"shape mismatch: {teacher.centroids.shape} vs {student.centroids.shape}")
    m = cfg.momentum

    def blend(t: np.ndarray, s: np.ndarray) -> np.ndarray:
        # exact at the endpoints, never a rounding mix of the two
        if m == 1.0:
            return t
        if m == 0.0:
            return s
        return m * t + (1.0 - m) * s

    if cfg.update_buffers:
        mean, var = blend(teacher.running_mean, student.running_mean), blend(teacher.running_var, student.running_var)
    else:
        mean, var = teacher.running_mean, teacher.running_var
    return ToyModel(teacher.categories, blend(teacher.centroids, student.centroids), mean, var, student.temperature)


def normalize(model: ToyModel, features: np.ndarray) -> np.ndarray:
    return (features - model.running_mean) / np.sqrt(model.running_var)


def predict_proba(model: ToyModel, features: np.ndarray) -> np.ndarray:
    """``(N, D)`` features -> ``(N, C)`` softmax over negative centroid distances."""
    feats = np.asarray(features, dtype=np.float64).reshape(-1, model.dim)
    z = normalize(model, feats)
    dist = np.sqrt(((z[:, None, :] - model.centroids[None, :, :]) ** 2).sum(-1))
    logits = -dist / model.temperature
    logits -= logits.max(axis=1, keepdims=True)
    p = np.exp(logits)
    return p / p.sum(axis=1, keepdims=True)


# ---------------------------------------------------------------------------
# Scenes
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DomainShift:
    offset: np.ndarray
    scale: float = 1.0

    def apply(self, features: np.ndarray) -> np.ndarray:
        return features * self.scale + self.offset


@dataclass(frozen=True, eq=False)
class SyntheticScene:
    image_id: int
    boxes: tuple[BBox, ...]
    features: np.ndarray  # (n, D)
    truth: tuple[Category, ...]
    domain_shift: DomainShift | None = None

    @property
    def regions(self) -> list[tuple[BBox, np.ndarray, Category]]:
        return list(zip(self.boxes, self.features, self.truth))

    def __len__(self) -> int:
        return len(self.boxes)


def toy_predict(model: ToyModel, scene: SyntheticScene) -> list[PseudoLabel]:
    if len(scene) == 0:
        return []
    probs = predict_proba(model, scene.features)
    best = probs.argmax(axis=1)
    return [
        PseudoLabel(box, model.categories[k], min(1.0, float(probs[i, k])), scene.image_id)
        for i, (box, k) in enumerate(zip(scene.boxes, best))
    ]


@dataclass(frozen=True)
class TrainingItem:
    """One scene in a student batch; ``targets[i] is None`` leaves region i unsupervised."""

    scene: SyntheticScene
    targets: tuple[Category | None, ...]
    weight: float = 1.0


def labeled_item(scene: SyntheticScene) -> TrainingItem:
    return TrainingItem(scene, tuple(scene.truth), 1.0)


def student_step(student: ToyModel, batch: Sequence[TrainingItem], lr: float) -> ToyModel:
    """One centroid step plus a buffer refresh.

    Buffers move towards the batch mean/variance (over every region, supervised
    or not) with momentum 0.9.  Each centroid then moves by ``lr`` towards the
    weighted mean of its assigned regions, normalised with the refreshed buffers.
    """
    if lr < 0:
        raise ValidationError(f"lr must be non-negative, got {lr}")
    items = [it for it in batch if len(it.scene)]
    if not items:
        return student
    feats = np.concatenate([it.scene.features for it in items])
    bm = STUDENT_BUFFER_MOMENTUM
    mean = bm * student.running_mean + (1 - bm) * feats.mean(axis=0)
    var = bm * student.running_var + (1 - bm) * feats.var(axis=0)
    var = np.maximum(var, VAR_FLOOR)

    lookup = {c: k for k, c in enumerate(student.categories)}
    idx, wts = [], []
    for it in items:
        if len(it.targets) != len(it.scene):
            raise ValidationError(f"scene {it.scene.image_id}: {len(it.targets)} targets for {len(it.scene)} regions")
        for t in it.targets:
            if t is not None and t not in lookup:
                raise ValidationError(f"category {t.name} is not modelled")
            idx.append(-1 if t is None else lookup[t])
            wts.append(0.0 if t is None else it.weight)
    idx_arr, w_arr = np.asarray(idx), np.asarray(wts)
    z = (feats - mean) / np.sqrt(var)
    cents = student.centroids.copy()
    for k in range(len(student.categories)):
        sel = (idx_arr == k) & (w_arr > 0)
        if sel.any():
            target = (w_arr[sel, None] * z[sel]).sum(axis=0) / w_arr[sel].sum()
            cents[k] += lr * (target - cents[k])
    return ToyModel(student.categories, cents, mean, var, student.temperature)


# ---------------------------------------------------------------------------
# Synthetic stream
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class StreamSpec:
    """Counts and geometry of the synthetic stream.

    Category ``k`` sits at ``separation * e_k`` in the first C ("signal")
    dimensions; the remaining ``nuisance_dims`` carry no class information.
    A shift of magnitude ``s`` adds ``s`` to every nuisance dimension and
    ``+-signal_shift_gain * s`` (alternating sign) to the signal dimensions.
    """

    foods: tuple[str, ...] = ("apple", "pear")
    conditions: tuple[str, ...] = ("normal", "rot", "bruise")
    labeled_scenes: int = 30
    unlabeled_scenes: int = 270
    heldout_scenes: int = 60
    regions_per_scene: int = 10
    nuisance_dims: int = 16
    separation: float = 3.0
    signal_noise: float = 0.5
    nuisance_noise: float = 0.3
    signal_shift_gain: float = 0.5
    scale: float = 1.0

    def __post_init__(self) -> None:
        counts = (self.labeled_scenes, self.unlabeled_scenes, self.heldout_scenes, self.regions_per_scene, self.nuisance_dims)
        if any(c < 0 for c in counts):
            raise ValidationError("stream counts must be non-negative")
        if not self.foods or not self.conditions:
            raise ValidationError("need at least one food and one condition")
        if not (self.signal_noise > 0 and self.nuisance_noise > 0 and self.scale > 0):
            raise ValidationError("noise levels and scale must be positive")
        object.__setattr__(self, "foods", tuple(self.foods))
        object.__setattr__(self, "conditions", tuple(self.conditions))
        for food in self.foods:
            FoodType(food)

    @property
    def categories(self) -> tuple[Category, ...]:
        return tuple(Category(FoodType(f), c) for f in self.foods for c in self.conditions)

    @property
    def dim(self) -> int:
        return len(self.categories) + self.nuisance_dims

    def registry(self) -> CategoryRegistry:
        return CategoryRegistry.product([FoodType(f) for f in self.foods], list(self.conditions))

    def shift_offset(self, magnitude: float) -> np.ndarray:
        n_sig = len(self.categories)
        signs = np.where(np.arange(n_sig) % 2 == 0, 1.0, -1.0)
        return np.concatenate([signs * self.signal_shift_gain * magnitude, np.full(self.nuisance_dims, float(magnitude))])


@dataclass(frozen=True)
class SyntheticStream:
    labeled: list[SyntheticScene]
    unlabeled: list[SyntheticScene]
    heldout: list[SyntheticScene]


def _region_box(j: int) -> BBox:
    # a non-overlapping grid so spatial dedup never merges distinct regions
    return BBox(float((j % 8) * 20), float((j // 8) * 20), 16.0, 16.0)


def _draw_scenes(
    spec: StreamSpec, n: int, first_id: int, rng: np.random.Generator, shift: DomainShift | None
) -> list[SyntheticScene]:
    cats = spec.categories
    n_cond = len(spec.conditions)
    n_sig = len(cats)
    noise = np.concatenate([np.full(n_sig, spec.signal_noise), np.full(spec.nuisance_dims, spec.nuisance_noise)])
    scenes = []
    for i in range(n):
        food_idx = i % len(spec.foods)
        cond = rng.integers(n_cond, size=spec.regions_per_scene)
        k = food_idx * n_cond + cond
        feats = rng.normal(size=(spec.regions_per_scene, spec.dim)) * noise
        feats[np.arange(spec.regions_per_scene), k] += spec.separation
        if shift is not None:
            feats = shift.apply(feats)
        feats.flags.writeable = False
        boxes = tuple(_region_box(j) for j in range(spec.regions_per_scene))
        scenes.append(SyntheticScene(first_id + i, boxes, feats, tuple(cats[c] for c in k), shift))
    return scenes


def gen_synthetic_stream(spec: StreamSpec, shift: float, seed: int) -> SyntheticStream:
    """Labeled, unlabeled and held-out scenes; the last two carry the domain shift.

    Each scene shows one food.  Image ids are unique across the three splits.
    """
    ds = DomainShift(spec.shift_offset(shift), spec.scale)
    n_l, n_u = spec.labeled_scenes, spec.unlabeled_scenes
    return SyntheticStream(
        labeled=_draw_scenes(spec, n_l, 1, rng_stream(seed, "sslsim.stream", "labeled"), None),
        unlabeled=_draw_scenes(spec, n_u, 1 + n_l, rng_stream(seed, "sslsim.stream", "unlabeled"), ds),
        heldout=_draw_scenes(spec, spec.heldout_scenes, 1 + n_l + n_u, rng_stream(seed, "sslsim.stream", "heldout"), ds),
    )


# ---------------------------------------------------------------------------
# Simulation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SimulationConfig:
    stream: StreamSpec = field(default_factory=StreamSpec)
    shift: float = 1.5
    seed: int = 0
    ema: EmaConfig = field(default_factory=lambda: EmaConfig(momentum=0.9, update_buffers=True))
    confidence_threshold: float = 0.35
    calibrate: bool = False
    similarity_threshold: float = 0.85
    iou_threshold: float = 0.65
    iterations: int = 60
    burn_in: int = 20
    lr: float = 0.3
    pseudo_weight: float = 0.001
    temperature: float = 0.75
    collapse_window: int = 5

    def __post_init__(self) -> None:
        if self.iterations < 0 or self.burn_in < 0:
            raise ValidationError("iterations and burn_in must be non-negative")
        if self.collapse_window < 1:
            raise ValidationError(f"collapse_window must be >= 1, got {self.collapse_window}")
        if self.lr < 0 or self.pseudo_weight < 0:
            raise ValidationError("lr and pseudo_weight must be non-negative")
        if not self.temperature > 0:
            raise ValidationError(f"temperature must be positive, got {self.temperature}")
        self.cgpc_config()

    def cgpc_config(self) -> CgpcConfig:
        return CgpcConfig(self.confidence_threshold, self.similarity_threshold, self.iou_threshold)

    def to_dict(self) -> dict[str, Any]:
        d = asdict(self)
        d["stream"]["foods"] = list(self.stream.foods)
        d["stream"]["conditions"] = list(self.stream.conditions)
        return d

    @classmethod
    def from_dict(cls, doc: Mapping[str, Any]) -> "SimulationConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(doc) - known
        if unknown:
            raise ValidationError(f"unknown scenario keys: {sorted(unknown)}")
        kw = dict(doc)
        try:
            if "stream" in kw:
                stream = dict(kw["stream"])
                stream_known = {f.name for f in fields(StreamSpec)}
                bad = set(stream) - stream_known
                if bad:
                    raise ValidationError(f"unknown stream keys: {sorted(bad)}")
                for key in ("foods", "conditions"):
                    if key in stream:
                        stream[key] = tuple(stream[key])
                kw["stream"] = StreamSpec(**stream)
            if "ema" in kw:
                kw["ema"] = EmaConfig(**kw["ema"])
            return cls(**kw)
        except (TypeError, ValueError) as exc:
            if isinstance(exc, ValidationError):
                raise
            raise ValidationError(f"invalid scenario: {exc}") from exc


@dataclass(frozen=True)
class IterationRecord:
    iteration: int
    pseudo_yield: int
    precision: float
    accuracy: float
    collapsed: bool

    def to_dict(self) -> dict[str, Any]:
        return {
            "iteration": self.iteration,
            "yield": self.pseudo_yield,
            "precision": self.precision,
            "accuracy": self.accuracy,
            "collapsed": self.collapsed,
        }


@dataclass
class SimulationReport:
    records: list[IterationRecord] = field(default_factory=list)
    initial_accuracy: float | None = None

    @property
    def collapsed(self) -> bool:
        return any(r.collapsed for r in self.records)

    @property
    def first_collapse(self) -> int | None:
        return next((r.iteration for r in self.records if r.collapsed), None)

    @property
    def final_accuracy(self) -> float | None:
        return self.records[-1].accuracy if self.records else self.initial_accuracy

    def summary(self) -> dict[str, Any]:
        ys = [r.pseudo_yield for r in self.records]
        return {
            "iterations": len(self.records),
            "collapsed": self.collapsed,
            "first_collapse_iteration": self.first_collapse,
            "initial_accuracy": self.initial_accuracy,
            "final_accuracy": self.final_accuracy,
            "final_yield": ys[-1] if ys else None,
            "min_yield": min(ys) if ys else None,
            "total_yield": sum(ys),
        }

    def to_jsonl(self) -> str:
        return "".join(json.dumps(r.to_dict(), sort_keys=True) + "\n" for r in self.records)


def _stack(scenes: Sequence[SyntheticScene], dim: int) -> np.ndarray:
    if not scenes:
        return np.zeros((0, dim))
    return np.concatenate([s.features for s in scenes])


def heldout_accuracy(model: ToyModel, scenes: Sequence[SyntheticScene]) -> float:
    feats = _stack(scenes, model.dim)
    if len(feats) == 0:
        return 0.0
    truth = np.array([model.index(c) for s in scenes for c in s.truth])
    return float((predict_proba(model, feats).argmax(axis=1) == truth).mean())


def _burn_in(cfg: SimulationConfig, stream: SyntheticStream) -> ToyModel:
    model = ToyModel.initial(cfg.stream.categories, cfg.stream.dim, cfg.temperature)
    batch = [labeled_item(s) for s in stream.labeled]
    for _ in range(cfg.burn_in):
        model = student_step(model, batch, cfg.lr)
    return model


def _teacher_labels(
    cfg: SimulationConfig, teacher: ToyModel, scenes: Sequence[SyntheticScene], registry: CategoryRegistry
) -> list[list[Category | None]]:
    """Filtered (and optionally calibrated) pseudo-label targets per scene region."""
    targets: list[list[Category | None]] = [[None] * len(s) for s in scenes]
    feats = _stack(scenes, teacher.dim)
    if len(feats) == 0:
        return targets
    probs = predict_proba(teacher, feats)
    best = probs.argmax(axis=1)
    conf = probs[np.arange(len(best)), best]
    keep = conf >= cfg.confidence_threshold
    if not cfg.calibrate:
        pos = 0
        for si, s in enumerate(scenes):
            for j in range(len(s)):
                if keep[pos]:
                    targets[si][j] = teacher.categories[best[pos]]
                pos += 1
        return targets

    labels, vectors, where = [], {}, {}
    pos = 0
    for si, s in enumerate(scenes):
        for j, box in enumerate(s.boxes):
            if keep[pos]:
                lab = PseudoLabel(box, teacher.categories[best[pos]], min(1.0, float(conf[pos])), s.image_id)
                labels.append(lab)
                vectors[lab.key] = s.features[j]
                where[lab.key] = (si, j)
            pos += 1
    if not labels:
        return targets
    cg = replace(cfg.cgpc_config(), feature_provider=ArrayFeatures(vectors))
    for out in run_cgpc(labels, {}, cg, registry).values():
        for lab in out:
            si, j = where[lab.key]
            targets[si][j] = lab.category
    return targets


def run_ssl_simulation(cfg: SimulationConfig) -> SimulationReport:
    """Burn in on labeled scenes, then iterate teacher -> filter -> student -> EMA."""
    stream = gen_synthetic_stream(cfg.stream, cfg.shift, cfg.seed)
    registry = cfg.stream.registry()
    student = _burn_in(cfg, stream)
    teacher = student
    report = SimulationReport(initial_accuracy=heldout_accuracy(student, stream.heldout))
    labeled = [labeled_item(s) for s in stream.labeled]
    zero_run = 0
    for it in range(cfg.iterations):
        targets = _teacher_labels(cfg, teacher, stream.unlabeled, registry)
        n_yield = n_right = 0
        pseudo = []
        for scene, tg in zip(stream.unlabeled, targets):
            for t, truth in zip(tg, scene.truth):
                if t is not None:
                    n_yield += 1
                    n_right += t == truth
            pseudo.append(TrainingItem(scene, tuple(tg), cfg.pseudo_weight))
        student = student_step(student, labeled + pseudo, cfg.lr)
        teacher = ema_update(teacher, student, cfg.ema)
        zero_run = zero_run + 1 if n_yield == 0 else 0
        report.records.append(
            IterationRecord(
                iteration=it,
                pseudo_yield=n_yield,
                precision=n_right / n_yield if n_yield else 0.0,
                accuracy=heldout_accuracy(student, stream.heldout),
                collapsed=zero_run >= cfg.collapse_window,
            )
        )
    return report


def run_labeled_baseline(cfg: SimulationConfig) -> list[float]:
    """Held-out accuracy per iteration for a student that never sees unlabeled scenes."""
    stream = gen_synthetic_stream(cfg.stream, cfg.shift, cfg.seed)
    student = _burn_in(cfg, stream)
    batch = [labeled_item(s) for s in stream.labeled]
    out = []
    for _ in range(cfg.iterations):
        student = student_step(student, batch, cfg.lr)
        out.append(heldout_accuracy(student, stream.heldout))
    return out


def load_scenario(doc: Mapping[str, Any] | None = None, **overrides: Any) -> SimulationConfig:
    """Shipped default scenario, updated by ``doc`` and then by ``overrides``."""
    merged = SimulationConfig().to_dict()
    for src in (doc or {}, overrides):
        for key, value in src.items():
            if key in ("stream", "ema") and isinstance(value, Mapping) and key in merged:
                merged[key] = {**merged[key], **value}
            else:
                merged[key] = value
    return SimulationConfig.from_dict(merged)


def stream_to_dict(stream: SyntheticStream) -> dict[str, Any]:
    def scene(s: SyntheticScene, split: str) -> dict[str, Any]:
        return {
            "image_id": s.image_id,
            "split": split,
            "regions": [
                {"bbox": b.to_list(), "feature": [float(v) for v in f], "category": c.name}
                for b, f, c in s.regions
            ],
        }

    return {
        "labeled": [scene(s, "labeled") for s in stream.labeled],
        "unlabeled": [scene(s, "unlabeled") for s in stream.unlabeled],
        "heldout": [scene(s, "heldout") for s in stream.heldout],
    }


def accuracy_gap(report: SimulationReport, baseline: Iterable[float]) -> float:
    base = list(baseline)
    if not base or report.final_accuracy is None:
        return math.nan
    return report.final_accuracy - base[-1]
