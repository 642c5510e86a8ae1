"""Geometry, label-space, and matching primitives shared by every stage.

All types here are immutable values and all operations are pure functions,
so they are safe to call from any number of concurrent workers.
"""

from __future__ import annotations

import json
import math
import re
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Mapping, Optional, Sequence

import numpy as np

from . import kernels
from .errors import DuplicateCategory, EmptyCategory, InvalidBox, UnknownCategory
from .fsio import atomic_write_text

CategoryId = int

KNOWN = "known"
NOVEL = "novel"

LABEL_SPACE_FORMAT_VERSION = 1


@dataclass(frozen=True)
class BoundingBox:
    """Axis-aligned pixel box, origin top-left, half-open continuous extent.

    Degenerate (zero-area) boxes are rejected at construction.
    """

    x_min: float
    y_min: float
    x_max: float
    y_max: float

    def __post_init__(self) -> None:
        vals = (self.x_min, self.y_min, self.x_max, self.y_max)
        if not all(math.isfinite(v) for v in vals):
            raise InvalidBox(f"non-finite box {vals}")
        if not (self.x_min < self.x_max and self.y_min < self.y_max):
            raise InvalidBox(f"degenerate box {vals}")

    @property
    def width(self) -> float:
        return self.x_max - self.x_min

    @property
    def height(self) -> float:
        return self.y_max - self.y_min

    @property
    def area(self) -> float:
        return self.width * self.height

    @property
    def center(self) -> tuple[float, float]:
        return (0.5 * (self.x_min + self.x_max), 0.5 * (self.y_min + self.y_max))

    def as_array(self) -> np.ndarray:
        return np.array([self.x_min, self.y_min, self.x_max, self.y_max], dtype=np.float64)

    def to_dict(self) -> dict:
        return {"x_min": self.x_min, "y_min": self.y_min, "x_max": self.x_max, "y_max": self.y_max}

    @classmethod
    def from_dict(cls, d: Mapping) -> "BoundingBox":
        return cls(float(d["x_min"]), float(d["y_min"]), float(d["x_max"]), float(d["y_max"]))


@dataclass(frozen=True)
class Detection:
    """A box with a category id and a confidence score in [0, 1]."""

    box: BoundingBox
    category: CategoryId
    score: float

    def __post_init__(self) -> None:
        if not (0.0 <= self.score <= 1.0):
            raise ValueError(f"score {self.score} outside [0, 1]")

    def to_dict(self) -> dict:
        return {"box": self.box.to_dict(), "category": self.category, "score": self.score}

    @classmethod
    def from_dict(cls, d: Mapping) -> "Detection":
        return cls(BoundingBox.from_dict(d["box"]), int(d["category"]), float(d["score"]))


@dataclass(frozen=True)
class ImageRecord:
    """An image in the pool: opaque id, pixel size, source tag, optional GT.

    Ground-truth detections carry score 1.0 and must lie within the image.
    """

    id: str
    width: int
    height: int
    source: str = "sim"
    ground_truth: Optional[tuple[Detection, ...]] = None

    def __post_init__(self) -> None:
        if self.width <= 0 or self.height <= 0:
            raise ValueError(f"bad image size {self.width}x{self.height}")
        if self.ground_truth is not None:
            object.__setattr__(self, "ground_truth", tuple(self.ground_truth))
            for det in self.ground_truth:
                b = det.box
                if b.x_min < 0 or b.y_min < 0 or b.x_max > self.width or b.y_max > self.height:
                    raise InvalidBox(f"GT box {b} outside image {self.id} ({self.width}x{self.height})")
                if det.score != 1.0:
                    raise ValueError("ground-truth detections must have score 1.0")


# ---------------------------------------------------------------------------
# text normalization
# ---------------------------------------------------------------------------

_PUNCT_RE = re.compile(r"[^\w\s]|_")
_WS_RE = re.compile(r"\s+")
_SIBILANT_ES = ("ses", "xes", "zes", "ches", "shes")


def _strip_plural(token: str) -> str:
    if token.endswith(_SIBILANT_ES):
        return token[:-2]
    if len(token) > 1 and token.endswith("s") and not token.endswith("ss"):
        return token[:-1]
    return token


def normalize_term(text: str, aliases: Optional[Mapping[str, str]] = None) -> str:
    """Canonicalize a term: lowercase, strip punctuation, collapse whitespace,
    strip a trailing plural 's'/'es' per token, then apply the alias table.

    ``aliases`` maps a normalized alias string to its canonical replacement
    (e.g. ``{"cyclist": "bicyclist"}``). The plural strip is deliberately
    naive; replace this function where smarter stemming is needed.
    """
    text = _PUNCT_RE.sub(" ", text.lower())
    tokens = [_strip_plural(t) for t in _WS_RE.split(text) if t]
    term = " ".join(tokens)
    if aliases and term in aliases:
        term = aliases[term]
    return term


Normalizer = Callable[[str], str]


# ---------------------------------------------------------------------------
# label space
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Category:
    id: CategoryId
    name: str
    status: str  # KNOWN or NOVEL

    def __post_init__(self) -> None:
        if self.status not in (KNOWN, NOVEL):
            raise ValueError(f"bad category status {self.status!r}")


@dataclass(frozen=True)
class LabelSpace:
    """Ordered, append-only category registry with a synonym table.

    ``synonyms`` maps canonical name -> aliases; no alias may map to two
    canonical names and every canonical name is unique after normalization.
    """

    categories: tuple[Category, ...] = ()
    synonyms: Mapping[str, frozenset[str]] = field(default_factory=dict)

    def __post_init__(self) -> None:
        object.__setattr__(self, "categories", tuple(self.categories))
        syn = {k: frozenset(v) for k, v in dict(self.synonyms).items()}
        object.__setattr__(self, "synonyms", syn)
        seen: dict[str, str] = {}
        for cat in self.categories:
            norm = normalize_term(cat.name)
            if norm in seen:
                raise DuplicateCategory(f"{cat.name!r} collides with {seen[norm]!r}")
            seen[norm] = cat.name
        owner: dict[str, str] = {}
        for canonical, alias_set in syn.items():
            for alias in alias_set:
                norm = normalize_term(alias)
                if norm in owner and owner[norm] != canonical:
                    raise DuplicateCategory(
                        f"alias {alias!r} maps to both {owner[norm]!r} and {canonical!r}"
                    )
                owner[norm] = canonical

    def __len__(self) -> int:
        return len(self.categories)

    def names(self) -> list[str]:
        return [c.name for c in self.categories]

    def ids(self) -> list[CategoryId]:
        return [c.id for c in self.categories]

    def known_ids(self) -> list[CategoryId]:
        return [c.id for c in self.categories if c.status == KNOWN]

    def novel_ids(self) -> list[CategoryId]:
        return [c.id for c in self.categories if c.status == NOVEL]

    def name_of(self, cid: CategoryId) -> str:
        for c in self.categories:
            if c.id == cid:
                return c.name
        raise UnknownCategory(f"no category with id {cid}")

    def status_of(self, cid: CategoryId) -> str:
        for c in self.categories:
            if c.id == cid:
                return c.status
        raise UnknownCategory(f"no category with id {cid}")

    def has_id(self, cid: CategoryId) -> bool:
        return any(c.id == cid for c in self.categories)

    def alias_map(self) -> dict[str, str]:
        """Normalized alias -> canonical name, for use with normalize_term."""
        out: dict[str, str] = {}
        for canonical, alias_set in self.synonyms.items():
            for alias in alias_set:
                out[normalize_term(alias)] = normalize_term(canonical)
        return out

    def resolve(self, term: str, normalizer: Normalizer | None = None) -> Optional[CategoryId]:
        """Map free text to a category id via normalization and aliases."""
        norm = normalizer(term) if normalizer else normalize_term(term, self.alias_map())
        for c in self.categories:
            if normalize_term(c.name) == norm:
                return c.id
        return None

    def surface_forms(self) -> set[str]:
        """All normalized strings that denote some category here."""
        forms = {normalize_term(c.name) for c in self.categories}
        forms.update(self.alias_map().keys())
        return forms


def extend_label_space(ls: LabelSpace, name: str) -> LabelSpace:
    """Append a novel category with a fresh id; existing ids never change.

    Raises DuplicateCategory when the name (after normalization and alias
    resolution) is already present, signalling the caller to skip.
    """
    if not name or not normalize_term(name):
        raise EmptyCategory("cannot add an empty category name")
    if ls.resolve(name) is not None:
        raise DuplicateCategory(f"{name!r} already present in label space")
    next_id = max((c.id for c in ls.categories), default=-1) + 1
    cat = Category(id=next_id, name=normalize_term(name), status=NOVEL)
    return replace(ls, categories=ls.categories + (cat,))


def label_space_to_json(ls: LabelSpace) -> dict:
    return {
        "version": LABEL_SPACE_FORMAT_VERSION,
        "categories": [
            {
                "id": c.id,
                "name": c.name,
                "status": c.status,
                "aliases": sorted(ls.synonyms.get(c.name, ())),
            }
            for c in ls.categories
        ],
    }


def label_space_from_json(doc: Mapping) -> LabelSpace:
    if doc.get("version") != LABEL_SPACE_FORMAT_VERSION:
        raise ValueError(f"unsupported label-space version {doc.get('version')!r}")
    cats = []
    synonyms: dict[str, frozenset[str]] = {}
    for entry in doc["categories"]:
        cats.append(Category(int(entry["id"]), str(entry["name"]), str(entry["status"])))
        aliases = entry.get("aliases") or []
        if aliases:
            synonyms[str(entry["name"])] = frozenset(str(a) for a in aliases)
    return LabelSpace(categories=tuple(cats), synonyms=synonyms)


def save_label_space(ls: LabelSpace, path: str | Path) -> None:
    """Persist as versioned JSON. Overwriting enforces append-only: the
    categories already on disk must be a prefix of the new ones."""
    path = Path(path)
    if path.exists():
        old = load_label_space(path)
        if len(old.categories) > len(ls.categories) or any(
            o != n for o, n in zip(old.categories, ls.categories)
        ):
            raise DuplicateCategory(
                f"refusing to rewrite {path}: existing categories are not a prefix"
            )
    atomic_write_text(path, json.dumps(label_space_to_json(ls), indent=2) + "\n")


def load_label_space(path: str | Path) -> LabelSpace:
    with open(path, "r", encoding="utf-8") as fh:
        return label_space_from_json(json.load(fh))


# ---------------------------------------------------------------------------
# engine thresholds
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class EngineThresholds:
    """Tunable gates used across the pipeline, with their stock defaults."""

    iou_match: float = 0.5
    retrieval_score_min: float = 0.6
    retrieval_min_fraction: float = 0.01
    crop_scale: float = 1.75
    zsc_score_min: float = 0.1
    known_conf_min: float = 0.6
    top_k: int = 1000
    nms_iou: float = 0.5

    def __post_init__(self) -> None:
        for name in ("iou_match", "retrieval_score_min", "retrieval_min_fraction",
                     "zsc_score_min", "known_conf_min", "nms_iou"):
            v = getattr(self, name)
            if not (0.0 < v <= 1.0):
                raise ValueError(f"{name}={v} outside (0, 1]")
        if self.crop_scale < 1.0:
            raise ValueError(f"crop_scale={self.crop_scale} must be >= 1")
        if self.top_k < 1:
            raise ValueError(f"top_k={self.top_k} must be >= 1")

    def to_dict(self) -> dict:
        return {
            "iou_match": self.iou_match,
            "retrieval_score_min": self.retrieval_score_min,
            "retrieval_min_fraction": self.retrieval_min_fraction,
            "crop_scale": self.crop_scale,
            "zsc_score_min": self.zsc_score_min,
            "known_conf_min": self.known_conf_min,
            "top_k": self.top_k,
            "nms_iou": self.nms_iou,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "EngineThresholds":
        kwargs = dict(d)
        if "top_k" in kwargs:
            kwargs["top_k"] = int(kwargs["top_k"])
        return cls(**{k: (v if k == "top_k" else float(v)) for k, v in kwargs.items()})


# ---------------------------------------------------------------------------
# geometry operations
# ---------------------------------------------------------------------------


def iou(a: BoundingBox, b: BoundingBox) -> float:
    """Intersection area over union area; 0.0 when disjoint."""
    ix = min(a.x_max, b.x_max) - max(a.x_min, b.x_min)
    iy = min(a.y_max, b.y_max) - max(a.y_min, b.y_min)
    if ix <= 0.0 or iy <= 0.0:
        return 0.0
    inter = ix * iy
    union = a.area + b.area - inter
    return inter / union


def scale_box(box: BoundingBox, ratio: float, bounds: tuple[float, float]) -> BoundingBox:
    """Grow a box about its center by ``ratio``, then clip to the image.

    ``bounds`` is (width, height). ``ratio`` must be >= 1, so clipping can
    never produce a degenerate result.
    """
    if ratio < 1.0:
        raise ValueError(f"ratio {ratio} must be >= 1")
    cx, cy = box.center
    half_w = 0.5 * box.width * ratio
    half_h = 0.5 * box.height * ratio
    w, h = bounds
    return BoundingBox(
        max(0.0, cx - half_w),
        max(0.0, cy - half_h),
        min(float(w), cx + half_w),
        min(float(h), cy + half_h),
    )


def _priority_order(dets: Sequence[Detection]) -> list[int]:
    # (score desc, x_min asc, insertion order) everywhere, for determinism.
    return sorted(range(len(dets)), key=lambda i: (-dets[i].score, dets[i].box.x_min, i))


def nms(dets: Sequence[Detection], iou_thresh: float) -> list[Detection]:
    """Greedy per-category suppression; survivors come back in priority order."""
    if not dets:
        return []
    survivors: list[int] = []
    by_cat: dict[CategoryId, list[int]] = {}
    for i, d in enumerate(dets):
        by_cat.setdefault(d.category, []).append(i)
    for indices in by_cat.values():
        order = sorted(indices, key=lambda i: (-dets[i].score, dets[i].box.x_min, i))
        boxes = np.array([dets[i].box.as_array() for i in order])
        keep = kernels.nms_keep(boxes, iou_thresh)
        survivors.extend(idx for idx, kept in zip(order, keep) if kept)
    survivors.sort(key=lambda i: (-dets[i].score, dets[i].box.x_min, i))
    return [dets[i] for i in survivors]


def greedy_match(
    preds: Sequence[Detection],
    gts: Sequence[Detection],
    iou_thresh: float,
) -> list[tuple[int, Optional[int]]]:
    """Match predictions to ground truth greedily, best score first.

    Each prediction takes the highest-IoU unmatched ground-truth box of the
    same category with IoU >= threshold; every GT is used at most once.
    Returns (pred index, gt index or None) pairs in processing order.
    """
    result: list[tuple[int, Optional[int]]] = []
    if not preds:
        return result
    gt_boxes = np.array([g.box.as_array() for g in gts]) if gts else np.zeros((0, 4))
    pred_boxes = np.array([p.box.as_array() for p in preds])
    ious = kernels.iou_matrix(pred_boxes, gt_boxes) if gts else np.zeros((len(preds), 0))
    taken = [False] * len(gts)
    for pi in _priority_order(preds):
        best_gi: Optional[int] = None
        best_iou = -1.0
        for gi, gt in enumerate(gts):
            if taken[gi] or gt.category != preds[pi].category:
                continue
            v = ious[pi, gi]
            if v >= iou_thresh and v > best_iou:
                best_iou = v
                best_gi = gi
        if best_gi is not None:
            taken[best_gi] = True
        result.append((pi, best_gi))
    return result
