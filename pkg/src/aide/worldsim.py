"""Deterministic synthetic world plus simulated adapters for every model
capability, making the full engine loop testable at desk scale.

Objects live in a latent feature space: each category owns a unit prototype
vector and every object instance is its prototype plus gaussian noise,
renormalized. The simulated captioner, embedder, proposer, crop classifier
and detector all read that latent geometry, so retrieval precision, pseudo-
label quality, and catastrophic forgetting all emerge mechanically rather
than by scripted outcomes.

Determinism: every operation draws from a named rng stream keyed on
(world seed, stream name, entity), so reordering one stage never perturbs
another. The world itself regenerates byte-identically from (seed, config).

The detector is a linear softmax classifier over latent features with an
explicit background row. It is genuinely trainable by mini-batch SGD (the
hot loop lives in :mod:`aide.kernels`) and exhibits catastrophic forgetting
when trained on novel-only labels, which is exactly the failure mode the
engine's known-label mixing exists to prevent.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass, field, replace
from fractions import Fraction
from pathlib import Path
from typing import Mapping, Optional, Sequence

import numpy as np

from . import kernels
from .adapters import CallLog, TrainingSchedule
from .core import (
    KNOWN,
    NOVEL,
    BoundingBox,
    Category,
    Detection,
    ImageRecord,
    LabelSpace,
    iou,
    normalize_term,
)
from .errors import EmptyTrainingSet, UnknownCategory, UnknownImage
from .fsio import atomic_write_text

BACKGROUND_NAME = "background"

# Softmax logit scale for the simulated zero-shot classifier (CLIP-style
# temperature): sharp enough that confident crops clear the 0.1 score gate.
ZSC_LOGIT_SCALE = 8.0

# Fixed calibration scale on the detector head's logits. The linear head's
# raw margins stay tiny within a 3000-iteration budget; scaling before the
# softmax leaves argmax and ranking untouched but puts confident detections
# above the absolute known-confidence gate, like a calibrated real head.
DETECTOR_LOGIT_SCALE = 160.0

# Perturbation applied to text embeddings of anything longer than a bare
# category name; distinct phrasings retrieve overlapping but distinct sets.
TEXT_STYLE_NOISE = 0.35

# Deterministic GPU-seconds booked per simulated call, for the cost ledger.
SIM_GPU_SECONDS = {
    "caption": Fraction(1, 2),
    "embed_text": Fraction(1, 10),
    "embed_image": Fraction(1, 10),
    "propose": Fraction(1, 1),
    "classify": Fraction(1, 5),
    "detect": Fraction(1, 20),
    "scenarios": Fraction(0),
}
SIM_GPU_SECONDS_PER_TRAIN_EXAMPLE = Fraction(1, 500)

# palette avoids names the naive plural-stripper would mangle (e.g. "bus")
CATEGORY_PALETTE = (
    "car", "truck", "van", "pedestrian", "bicycle", "motorcycle",
    "traffic light", "traffic sign", "trailer", "traffic cone",
    "construction vehicle", "motorcyclist", "bicyclist", "fire hydrant",
    "bench", "animal",
)

DEFAULT_DISTRACTORS = ("zeppelin", "submarine", "igloo", "jukebox", "lighthouse", "carousel")


def default_category_names(count: int) -> tuple[str, ...]:
    names = list(CATEGORY_PALETTE[:count])
    for i in range(len(names), count):
        names.append(f"object {i}")
    return tuple(names)


@dataclass(frozen=True)
class SimWorldConfig:
    """Knobs for world generation and simulated model behavior.

    ``prototype_separation`` mixes a shared direction into every category
    prototype: larger values push prototypes toward mutual orthogonality,
    smaller values cluster them (harder retrieval and classification).
    """

    seed: int = 0
    embedding_dim: int = 32
    num_categories: int = 9
    prototype_separation: float = 3.0
    within_noise: float = 0.25
    num_images: int = 2000
    objects_per_image: tuple[float, ...] = (0.1, 0.5, 0.25, 0.15)
    captioner_recall: float = 0.9
    captioner_hallucination: float = 0.05
    proposer_recall: float = 0.85
    box_jitter: float = 4.0
    false_positive_rate: float = 0.3
    proposer_label_noise: float = 0.9
    zsc_context_noise: float = 0.2
    image_width: int = 640
    image_height: int = 480
    category_names: tuple[str, ...] = ()
    distractor_names: tuple[str, ...] = DEFAULT_DISTRACTORS

    def __post_init__(self) -> None:
        if self.embedding_dim < 2:
            raise ValueError("embedding_dim must be >= 2")
        for name in ("captioner_recall", "captioner_hallucination", "proposer_recall"):
            v = getattr(self, name)
            if not (0.0 <= v <= 1.0):
                raise ValueError(f"{name}={v} outside [0, 1]")
        for name in ("within_noise", "box_jitter", "zsc_context_noise",
                     "prototype_separation", "false_positive_rate",
                     "proposer_label_noise"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        probs = tuple(float(p) for p in self.objects_per_image)
        if not probs or any(p < 0 for p in probs) or abs(sum(probs) - 1.0) > 1e-9:
            raise ValueError("objects_per_image must be a probability distribution")
        object.__setattr__(self, "objects_per_image", probs)
        if not self.category_names:
            object.__setattr__(self, "category_names", default_category_names(self.num_categories))
        if len(self.category_names) != self.num_categories:
            raise ValueError("category_names length must equal num_categories")
        names = [normalize_term(n) for n in self.category_names]
        object.__setattr__(self, "category_names", tuple(names))
        if len(set(names)) != len(names):
            raise ValueError("category names must be distinct after normalization")

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "embedding_dim": self.embedding_dim,
            "num_categories": self.num_categories,
            "prototype_separation": self.prototype_separation,
            "within_noise": self.within_noise,
            "num_images": self.num_images,
            "objects_per_image": list(self.objects_per_image),
            "captioner_recall": self.captioner_recall,
            "captioner_hallucination": self.captioner_hallucination,
            "proposer_recall": self.proposer_recall,
            "box_jitter": self.box_jitter,
            "false_positive_rate": self.false_positive_rate,
            "proposer_label_noise": self.proposer_label_noise,
            "zsc_context_noise": self.zsc_context_noise,
            "image_width": self.image_width,
            "image_height": self.image_height,
            "category_names": list(self.category_names),
            "distractor_names": list(self.distractor_names),
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "SimWorldConfig":
        kwargs = dict(d)
        for key in ("objects_per_image", "category_names", "distractor_names"):
            if key in kwargs:
                kwargs[key] = tuple(kwargs[key])
        return cls(**kwargs)


@dataclass(frozen=True)
class SimObject:
    box: BoundingBox
    category: int  # world category index
    feature: np.ndarray  # unit vector in R^d


@dataclass(frozen=True)
class SimWorld:
    config: SimWorldConfig
    prototypes: np.ndarray  # (C, d), unit rows
    background_vector: np.ndarray  # (d,), unit
    images: tuple[ImageRecord, ...]
    objects: Mapping[str, tuple[SimObject, ...]]

    def image_ids(self) -> list[str]:
        return [img.id for img in self.images]

    def image(self, image_id: str) -> ImageRecord:
        for img in self.images:
            if img.id == image_id:
                return img
        raise UnknownImage(image_id)

    def objects_of(self, image_id: str) -> tuple[SimObject, ...]:
        try:
            return self.objects[image_id]
        except KeyError:
            raise UnknownImage(image_id) from None

    def category_index(self, name: str) -> int:
        norm = normalize_term(name)
        try:
            return self.config.category_names.index(norm)
        except ValueError:
            raise UnknownCategory(name) from None

    def categories_in(self, image_id: str) -> list[int]:
        seen: list[int] = []
        for obj in self.objects_of(image_id):
            if obj.category not in seen:
                seen.append(obj.category)
        return seen


# ---------------------------------------------------------------------------
# rng streams
# ---------------------------------------------------------------------------


def _stream(seed: int, *key_parts) -> np.random.Generator:
    entropy = [seed & 0xFFFFFFFF]
    for part in key_parts:
        if isinstance(part, int):
            entropy.append(part & 0xFFFFFFFF)
        else:
            entropy.append(zlib.crc32(str(part).encode("utf-8")))
    return np.random.default_rng(np.random.SeedSequence(entropy))


def _unit(v: np.ndarray) -> np.ndarray:
    return v / np.linalg.norm(v)


# ---------------------------------------------------------------------------
# world generation
# ---------------------------------------------------------------------------


def generate_world(config: SimWorldConfig) -> SimWorld:
    """Sample prototypes then images; byte-identical for equal configs."""
    d = config.embedding_dim
    rng = _stream(config.seed, "prototypes")
    shared = rng.normal(size=d)
    prototypes = np.stack(
        [_unit(shared + config.prototype_separation * rng.normal(size=d))
         for _ in range(config.num_categories)]
    )
    background = _unit(_stream(config.seed, "background").normal(size=d))

    counts = np.arange(len(config.objects_per_image))
    images: list[ImageRecord] = []
    objects: dict[str, tuple[SimObject, ...]] = {}
    w, h = config.image_width, config.image_height
    for i in range(config.num_images):
        image_id = f"img{i:05d}"
        rng_i = _stream(config.seed, "image", i)
        n_objects = int(rng_i.choice(counts, p=config.objects_per_image))
        objs: list[SimObject] = []
        gts: list[Detection] = []
        for _ in range(n_objects):
            cat = int(rng_i.integers(0, config.num_categories))
            bw = float(rng_i.uniform(40, 160))
            bh = float(rng_i.uniform(40, 160))
            x = float(rng_i.uniform(0, w - bw))
            y = float(rng_i.uniform(0, h - bh))
            box = BoundingBox(x, y, x + bw, y + bh)
            noise = config.within_noise * rng_i.normal(size=d)
            feature = _unit(prototypes[cat] + noise)
            objs.append(SimObject(box=box, category=cat, feature=feature))
            gts.append(Detection(box=box, category=cat, score=1.0))
        images.append(
            ImageRecord(id=image_id, width=w, height=h, source="sim", ground_truth=tuple(gts))
        )
        objects[image_id] = tuple(objs)
    return SimWorld(
        config=config,
        prototypes=prototypes,
        background_vector=background,
        images=tuple(images),
        objects=objects,
    )


def save_world(world: SimWorld, path: str | Path) -> None:
    """Seed + config fully determine the world, so that is all we persist."""
    atomic_write_text(
        path, json.dumps({"format": "aide-world", "version": 1, "config": world.config.to_dict()},
                         indent=2, sort_keys=True) + "\n"
    )


def load_world(path: str | Path) -> SimWorld:
    with open(path, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    if doc.get("format") != "aide-world":
        raise ValueError(f"{path} is not a world file")
    return generate_world(SimWorldConfig.from_dict(doc["config"]))


def dump_world_debug(world: SimWorld, path: str | Path) -> None:
    """Full dump (prototypes, boxes, features) for eyeballing; never read back."""
    doc = {
        "config": world.config.to_dict(),
        "prototypes": world.prototypes.tolist(),
        "background": world.background_vector.tolist(),
        "images": [
            {
                "id": img.id,
                "objects": [
                    {"box": o.box.to_dict(), "category": o.category, "feature": o.feature.tolist()}
                    for o in world.objects_of(img.id)
                ],
            }
            for img in world.images
        ],
    }
    atomic_write_text(path, json.dumps(doc) + "\n")


# ---------------------------------------------------------------------------
# label space and evaluation views
# ---------------------------------------------------------------------------


def initial_label_space(
    world: SimWorld,
    num_known: int,
    synonyms: Optional[Mapping[str, Sequence[str]]] = None,
) -> LabelSpace:
    """Label space over the first ``num_known`` world categories, ids matching
    world category indices."""
    if not (0 < num_known <= world.config.num_categories):
        raise ValueError(f"num_known={num_known} outside 1..{world.config.num_categories}")
    cats = tuple(
        Category(id=i, name=world.config.category_names[i], status=KNOWN)
        for i in range(num_known)
    )
    syn = {k: frozenset(v) for k, v in (synonyms or {}).items()}
    return LabelSpace(categories=cats, synonyms=syn)


def eval_records(world: SimWorld, label_space: LabelSpace) -> list[ImageRecord]:
    """World images with ground truth translated into label-space ids; objects
    of categories outside the label space are dropped (they are unlabeled)."""
    by_name = {normalize_term(c.name): c.id for c in label_space.categories}
    out: list[ImageRecord] = []
    for img in world.images:
        gts = []
        for obj in world.objects_of(img.id):
            cid = by_name.get(world.config.category_names[obj.category])
            if cid is not None:
                gts.append(Detection(box=obj.box, category=cid, score=1.0))
        out.append(ImageRecord(id=img.id, width=img.width, height=img.height,
                               source=img.source, ground_truth=tuple(gts)))
    return out


# ---------------------------------------------------------------------------
# simulated model capabilities
# ---------------------------------------------------------------------------


def _text_hash_vector(world: SimWorld, text: str) -> np.ndarray:
    rng = _stream(world.config.seed, "text", normalize_term(text))
    return _unit(rng.normal(size=world.config.embedding_dim))


def sim_embed_text(world: SimWorld, text: str) -> np.ndarray:
    """Embed text: a bare category name maps exactly to its prototype; longer
    phrases mentioning a category get a deterministic per-phrase perturbation
    so distinct descriptions retrieve distinct neighborhoods."""
    norm = normalize_term(text)
    names = world.config.category_names
    if norm in names:
        return world.prototypes[names.index(norm)].copy()
    tokens = norm.split()
    mentioned = None
    for idx, name in sorted(enumerate(names), key=lambda kv: -len(kv[1].split())):
        parts = name.split()
        for at in range(len(tokens) - len(parts) + 1):
            if tokens[at : at + len(parts)] == parts:
                mentioned = idx
                break
        if mentioned is not None:
            break
    if mentioned is None:
        return _text_hash_vector(world, text)
    return _unit(world.prototypes[mentioned] + TEXT_STYLE_NOISE * _text_hash_vector(world, text))


def sim_embed_image(world: SimWorld, image_id: str) -> np.ndarray:
    objs = world.objects_of(image_id)
    if not objs:
        return world.background_vector.copy()
    return _unit(np.mean([o.feature for o in objs], axis=0))


def sim_caption(world: SimWorld, image_id: str) -> str:
    """Caption listing present categories with recall p_cap; with probability
    q_cap one absent name (world category or distractor) is hallucinated."""
    cfg = world.config
    rng = _stream(cfg.seed, "caption", image_id)
    present = [cfg.category_names[c] for c in world.categories_in(image_id)]
    mentioned = [name for name in present if rng.random() < cfg.captioner_recall]
    if rng.random() < cfg.captioner_hallucination:
        absent = [n for n in cfg.category_names + cfg.distractor_names if n not in present]
        if absent:
            mentioned.append(absent[int(rng.integers(0, len(absent)))])
    if not mentioned:
        return "An image with nothing"
    return "An image with " + ", ".join(mentioned)


def _jitter_box(box: BoundingBox, sigma: float, rng: np.random.Generator,
                w: float, h: float) -> BoundingBox:
    x1, y1, x2, y2 = (box.x_min, box.y_min, box.x_max, box.y_max)
    if sigma > 0:
        dx1, dy1, dx2, dy2 = rng.normal(scale=sigma, size=4)
        x1, y1, x2, y2 = x1 + dx1, y1 + dy1, x2 + dx2, y2 + dy2
    x1, x2 = sorted((x1, x2))
    y1, y2 = sorted((y1, y2))
    x1 = min(max(0.0, x1), w - 1.0)
    y1 = min(max(0.0, y1), h - 1.0)
    x2 = max(min(float(w), x2), x1 + 1.0)
    y2 = max(min(float(h), y2), y1 + 1.0)
    return BoundingBox(x1, y1, x2, y2)


def _nearest_prototype(world: SimWorld, feature: np.ndarray) -> tuple[int, float]:
    scores = world.prototypes @ feature
    idx = int(np.argmax(scores))
    return idx, float(scores[idx])


def sim_propose(world: SimWorld, image_id: str) -> list[tuple[BoundingBox, str, float]]:
    """Zero-shot box proposals: each GT box survives with recall p_box and
    jittered corners; Poisson(q_fp * objects) false boxes land anywhere.

    Labels come from the nearest prototype to a *noised* view of the object
    feature (``proposer_label_noise``), so localization is good while the
    label guesses are unreliable — the failure mode that makes label
    stripping and crop re-classification worthwhile. Scores are clamped
    cosines of that noised view against the assigned prototype.
    """
    cfg = world.config
    rng = _stream(cfg.seed, "propose", image_id)
    w, h = float(cfg.image_width), float(cfg.image_height)
    proposals: list[tuple[BoundingBox, str, float]] = []
    objs = world.objects_of(image_id)
    for obj in objs:
        if rng.random() >= cfg.proposer_recall:
            continue
        box = _jitter_box(obj.box, cfg.box_jitter, rng, w, h)
        seen = _unit(obj.feature + cfg.proposer_label_noise * rng.normal(size=cfg.embedding_dim))
        label_idx, score = _nearest_prototype(world, seen)
        proposals.append((box, cfg.category_names[label_idx], min(1.0, max(0.0, score))))
    if cfg.false_positive_rate > 0 and objs:
        n_fp = int(rng.poisson(cfg.false_positive_rate * len(objs)))
        for _ in range(n_fp):
            bw = float(rng.uniform(40, 160))
            bh = float(rng.uniform(40, 160))
            x = float(rng.uniform(0, w - bw))
            y = float(rng.uniform(0, h - bh))
            feature = _unit(rng.normal(size=cfg.embedding_dim))
            label_idx, score = _nearest_prototype(world, feature)
            proposals.append(
                (BoundingBox(x, y, x + bw, y + bh), cfg.category_names[label_idx],
                 min(1.0, max(0.0, score)))
            )
    return proposals


def _box_key(box: BoundingBox) -> str:
    return ",".join(f"{v:.3f}" for v in (box.x_min, box.y_min, box.x_max, box.y_max))


def _label_prototype(world: SimWorld, name: str) -> np.ndarray:
    norm = normalize_term(name)
    if norm == BACKGROUND_NAME:
        return world.background_vector
    names = world.config.category_names
    if norm in names:
        return world.prototypes[names.index(norm)]
    return _text_hash_vector(world, norm)


def sim_zsc(world: SimWorld, image_id: str, box: BoundingBox, labels: Sequence[str]) -> list[float]:
    """Zero-shot classification of a crop: the max-IoU object's feature (the
    background vector if nothing overlaps by 0.1) plus noise growing with the
    overlap deficit, scored softmax over the label prototypes."""
    cfg = world.config
    best_obj, best_iou = None, 0.0
    for obj in world.objects_of(image_id):
        v = iou(box, obj.box)
        if v > best_iou:
            best_obj, best_iou = obj, v
    if best_obj is None or best_iou < 0.1:
        feature, deficit = world.background_vector, 1.0
    else:
        feature, deficit = best_obj.feature, 1.0 - best_iou
    rng = _stream(cfg.seed, "zsc", image_id, _box_key(box))
    noised = feature + cfg.zsc_context_noise * deficit * rng.normal(size=cfg.embedding_dim)
    noised = _unit(noised)
    logits = np.array([
        ZSC_LOGIT_SCALE * float(noised @ _unit(_label_prototype(world, name))) for name in labels
    ])
    logits -= logits.max()
    p = np.exp(logits)
    p /= p.sum()
    return [float(v) for v in p]


def sim_scenarios(seed: int, category_name: str, n: int) -> list[str]:
    """Scene descriptions from a seeded attribute grid (weather x time x
    surroundings); injective in ``n`` up to the grid size."""
    weather = ("in clear weather", "in heavy rain", "in dense fog", "under snowfall",
               "on an overcast day", "in blowing dust")
    times = ("at dawn", "at midday", "at dusk", "at night", "during rush hour",
             "on a quiet morning")
    places = ("on a multi-lane highway", "at an urban intersection", "in a construction zone",
              "on a narrow residential street", "near a roundabout", "in a parking area")
    grid = [(a, b, c) for a in places for b in weather for c in times]
    rng = _stream(seed, "scenario", normalize_term(category_name))
    order = rng.permutation(len(grid))
    out = []
    for k in range(n):
        place, wth, tm = grid[int(order[k % len(grid)])]
        out.append(f"A photo of a {category_name} {place}, {wth}, {tm}")
    return out


# ---------------------------------------------------------------------------
# simulated detector
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SimDetectorState:
    """Linear softmax detector over latent features.

    Row 0 of ``weights`` is the background class; row 1 + i corresponds to
    ``category_ids[i]`` in the engine's label space. Rows are appended
    zero-initialized when the label space extends.
    """

    weights: np.ndarray  # (1 + len(category_ids), d)
    category_ids: tuple[int, ...]
    steps_trained: int = 0
    last_lr: float = 0.0

    def __post_init__(self) -> None:
        if self.weights.shape[0] != 1 + len(self.category_ids):
            raise ValueError("weights rows must equal 1 + len(category_ids)")
        if not np.all(np.isfinite(self.weights)):
            raise ValueError("non-finite detector weights")

    def row_of(self, category_id: int) -> int:
        try:
            return 1 + self.category_ids.index(category_id)
        except ValueError:
            raise UnknownCategory(f"category id {category_id} not in detector head") from None

    def with_category(self, category_id: int) -> "SimDetectorState":
        if category_id in self.category_ids:
            return self
        zero_row = np.zeros((1, self.weights.shape[1]))
        return replace(
            self,
            weights=np.vstack([self.weights, zero_row]),
            category_ids=self.category_ids + (category_id,),
        )

    def to_dict(self) -> dict:
        return {
            "weights": [[float(v) for v in row] for row in self.weights],
            "category_ids": list(self.category_ids),
            "steps_trained": self.steps_trained,
            "last_lr": self.last_lr,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "SimDetectorState":
        return cls(
            weights=np.asarray(d["weights"], dtype=np.float64),
            category_ids=tuple(int(c) for c in d["category_ids"]),
            steps_trained=int(d.get("steps_trained", 0)),
            last_lr=float(d.get("last_lr", 0.0)),
        )


def new_detector_state(label_space: LabelSpace, embedding_dim: int) -> SimDetectorState:
    ids = tuple(label_space.ids())
    return SimDetectorState(weights=np.zeros((1 + len(ids), embedding_dim)), category_ids=ids)


def class_probabilities(state: SimDetectorState, feature: np.ndarray) -> np.ndarray:
    """softmax over background + category rows, with the head's fixed
    calibration scale applied to the logits (uniform when W = 0)."""
    logits = DETECTOR_LOGIT_SCALE * (state.weights @ feature)
    logits = logits - logits.max()
    p = np.exp(logits)
    return p / p.sum()


def sim_detect(state: SimDetectorState, world: SimWorld, image_id: str) -> list[Detection]:
    """Detector inference: every object yields a deterministic jittered
    proposal, classified by softmax(W @ feature); background wins are dropped.
    An untrained head (W = 0) is uniform over the 1 + C rows, so the argmax
    tie resolves to background and nothing is emitted."""
    cfg = world.config
    rng = _stream(cfg.seed, "detect", image_id)
    w, h = float(cfg.image_width), float(cfg.image_height)
    detections: list[Detection] = []
    for obj in world.objects_of(image_id):
        box = _jitter_box(obj.box, cfg.box_jitter, rng, w, h)
        p = class_probabilities(state, obj.feature)
        row = int(np.argmax(p))
        if row == 0:  # background
            continue
        detections.append(
            Detection(box=box, category=state.category_ids[row - 1], score=float(p[row]))
        )
    return detections


def _resolve_feature(world: SimWorld, image_id: str, box: BoundingBox) -> np.ndarray:
    best_obj, best_iou = None, 0.0
    for obj in world.objects_of(image_id):
        v = iou(box, obj.box)
        if v > best_iou:
            best_obj, best_iou = obj, v
    if best_obj is None or best_iou < 0.1:
        return world.background_vector
    return best_obj.feature


def training_pairs(
    world: SimWorld, state: SimDetectorState, entries: Mapping[str, Sequence]
) -> tuple[np.ndarray, np.ndarray]:
    """Resolve labeled boxes to (feature, class-row) SGD pairs.

    ``entries`` maps image id -> labels carrying ``.detection``; images are
    visited in sorted id order so the pair list is canonical.
    """
    feats: list[np.ndarray] = []
    rows: list[int] = []
    for image_id in sorted(entries.keys()):
        for label in entries[image_id]:
            det = label.detection
            feats.append(_resolve_feature(world, image_id, det.box))
            rows.append(state.row_of(det.category))
    if not feats:
        raise EmptyTrainingSet("no labels resolve to training pairs")
    return np.stack(feats), np.asarray(rows, dtype=np.int64)


def sim_train(
    state: SimDetectorState,
    world: SimWorld,
    entries: Mapping[str, Sequence],
    schedule: TrainingSchedule,
    train_key: str = "train",
) -> tuple[SimDetectorState, Fraction]:
    """Mini-batch SGD on softmax cross-entropy with weight decay.

    Returns the updated state and the elapsed GPU-hours (a deterministic
    function of the schedule, so ledgers reproduce bit-for-bit).
    """
    if schedule.iterations < 0:
        raise ValueError("iterations must be >= 0")
    X, y = training_pairs(world, state, entries)
    if schedule.iterations == 0:
        return state, Fraction(0)
    rng = _stream(world.config.seed, "train", train_key)
    batch_idx = rng.integers(0, X.shape[0], size=(schedule.iterations, schedule.batch_size))
    weights = kernels.sgd_train(
        state.weights, X, y, batch_idx, schedule.learning_rate, schedule.weight_decay
    )
    gpu_hours = (
        schedule.iterations * schedule.batch_size * SIM_GPU_SECONDS_PER_TRAIN_EXAMPLE / 3600
    )
    new_state = replace(
        state,
        weights=weights,
        steps_trained=state.steps_trained + schedule.iterations,
        last_lr=schedule.learning_rate,
    )
    return new_state, gpu_hours


def pretrain_detector(
    world: SimWorld,
    label_space: LabelSpace,
    schedule: TrainingSchedule,
) -> tuple[SimDetectorState, Fraction]:
    """Supervised pretraining on the ground truth of label-space categories.

    This is the deployed closed-set detector every engine run starts from.
    """
    state = new_detector_state(label_space, world.config.embedding_dim)

    class _GT:
        __slots__ = ("detection",)

        def __init__(self, detection: Detection):
            self.detection = detection

    entries: dict[str, list[_GT]] = {}
    for record in eval_records(world, label_space):
        labels = [_GT(g) for g in record.ground_truth or ()]
        if labels:
            entries[record.id] = labels
    return sim_train(state, world, entries, schedule, train_key="pretrain")


# ---------------------------------------------------------------------------
# adapter implementations
# ---------------------------------------------------------------------------


class _SimAdapterBase:
    kind = "sim"

    def __init__(self, world: SimWorld, call_log: Optional[CallLog] = None):
        self.world = world
        self.call_log = call_log

    def _record(self, op: str, payload_bytes: int = 0) -> None:
        if self.call_log is not None:
            self.call_log.record(self.kind, op, 0.0, payload_bytes, SIM_GPU_SECONDS.get(op, Fraction(0)))


class SimCaptioner(_SimAdapterBase):
    kind = "captioner"

    def describe(self, image_id: str) -> str:
        caption = sim_caption(self.world, image_id)
        self._record("caption", len(caption))
        return caption


class SimEmbedder(_SimAdapterBase):
    kind = "embedder"

    def embed_text(self, text: str) -> np.ndarray:
        self._record("embed_text", len(text))
        return sim_embed_text(self.world, text)

    def embed_image(self, image_id: str) -> np.ndarray:
        self._record("embed_image", len(image_id))
        return sim_embed_image(self.world, image_id)


class SimProposer(_SimAdapterBase):
    kind = "proposer"

    def propose(self, image_id: str, prompts: Sequence[str]) -> list[tuple[BoundingBox, str, float]]:
        self._record("propose", len(image_id))
        # prompts steer a real OVD; the simulated one reads the latent scene
        return sim_propose(self.world, image_id)


class SimCropClassifier(_SimAdapterBase):
    kind = "crop_classifier"

    def classify(self, image_id: str, box: BoundingBox, labels: Sequence[str]) -> list[float]:
        self._record("classify", len(labels))
        return sim_zsc(self.world, image_id, box, labels)


class SimScenarioGenerator(_SimAdapterBase):
    kind = "scenario_generator"

    def generate(self, category_name: str, n: int) -> list[str]:
        self._record("scenarios", n)
        return sim_scenarios(self.world.config.seed, category_name, n)


class SimDetector(_SimAdapterBase):
    """Trainable detector adapter; holds the mutable state handle."""

    kind = "detector"

    def __init__(self, world: SimWorld, state: SimDetectorState,
                 call_log: Optional[CallLog] = None, train_round: int = 0):
        super().__init__(world, call_log)
        self.state = state
        self.train_round = train_round

    def detect(self, image_id: str) -> list[Detection]:
        self._record("detect", len(image_id))
        return sim_detect(self.state, self.world, image_id)

    def train(self, training_set, schedule: TrainingSchedule) -> Fraction:
        entries = training_set.entries if hasattr(training_set, "entries") else training_set
        self.train_round += 1
        self.state, gpu_hours = sim_train(
            self.state, self.world, entries, schedule, train_key=f"round{self.train_round}"
        )
        if self.call_log is not None:
            self.call_log.record(self.kind, "train", 0.0, 0, gpu_hours * 3600)
        return gpu_hours

    def extend(self, category_id: int) -> None:
        self.state = self.state.with_category(category_id)


def build_embedding_store(world: SimWorld):
    from .feeder import EmbeddingStore

    store = EmbeddingStore(world.config.embedding_dim)
    for image_id in world.image_ids():
        store.add(image_id, sim_embed_image(world, image_id))
    return store


# ---------------------------------------------------------------------------
# placeholder rasters (PNG) for the review UI
# ---------------------------------------------------------------------------


def _png_chunk(tag: bytes, payload: bytes) -> bytes:
    chunk = tag + payload
    return struct.pack(">I", len(payload)) + chunk + struct.pack(">I", zlib.crc32(chunk))


def _category_color(index: int) -> tuple[int, int, int]:
    rng = _stream(20, "palette", index)
    # bright, stable per-category colors
    return tuple(int(v) for v in rng.integers(70, 255, size=3))


def render_raster(world: SimWorld, image_id: str, scale: int = 4) -> bytes:
    """Placeholder PNG with the image's GT boxes burned in, one color per
    category. ``scale`` shrinks the canvas to keep payloads small."""
    img = world.image(image_id)
    w, h = img.width // scale, img.height // scale
    canvas = np.full((h, w, 3), 34, dtype=np.uint8)
    canvas[::2, ::2] = 40
    for obj in world.objects_of(image_id):
        color = np.array(_category_color(obj.category), dtype=np.uint8)
        x1, y1 = int(obj.box.x_min) // scale, int(obj.box.y_min) // scale
        x2, y2 = max(x1 + 1, int(obj.box.x_max) // scale), max(y1 + 1, int(obj.box.y_max) // scale)
        x2, y2 = min(x2, w), min(y2, h)
        canvas[y1:y2, x1:x2] = (0.35 * color + 0.65 * canvas[y1:y2, x1:x2]).astype(np.uint8)
        canvas[y1:y2, x1:min(x1 + 1, w)] = color
        canvas[y1:y2, max(x2 - 1, 0):x2] = color
        canvas[y1:min(y1 + 1, h), x1:x2] = color
        canvas[max(y2 - 1, 0):y2, x1:x2] = color
    raw = b"".join(b"\x00" + canvas[row].tobytes() for row in range(h))
    header = struct.pack(">IIBBBBB", w, h, 8, 2, 0, 0, 0)
    return b"".join([
        b"\x89PNG\r\n\x1a\n",
        _png_chunk(b"IHDR", header),
        _png_chunk(b"IDAT", zlib.compress(raw, 6)),
        _png_chunk(b"IEND", b""),
    ])
