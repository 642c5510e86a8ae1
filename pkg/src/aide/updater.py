"""Model updater: two-stage pseudo-labeling (box proposals with labels
stripped, then scaled-crop zero-shot classification with score filtering),
known-category self-labeling, balanced training-set assembly, and the
pseudo-label quality audit.

Per-image propose/classify calls are independent and may fan out across
workers; assembly is a deterministic single-threaded reduction over a
canonically ordered image list.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path
from typing import Mapping, Optional, Sequence

import numpy as np

from . import kernels
from .core import (
    KNOWN,
    BoundingBox,
    CategoryId,
    Detection,
    EngineThresholds,
    ImageRecord,
    LabelSpace,
    greedy_match,
    scale_box,
)
from .errors import EmptyTrainingSet, UnknownCategory
from .fsio import atomic_write_text

BACKGROUND_NAME = "background"

ORIGIN_ZSC = "proposal+zsc"
ORIGIN_KNOWN = "known-self"
ORIGIN_HUMAN = "human-correction"

DEFAULT_CAP_RATIO = 2.0


@dataclass(frozen=True)
class PseudoLabel:
    """A detection plus the provenance of the stage that produced it."""

    image_id: str
    detection: Detection
    origin: str
    proposal_score: float
    zsc_score: Optional[float] = None

    def __post_init__(self) -> None:
        if self.origin not in (ORIGIN_ZSC, ORIGIN_KNOWN, ORIGIN_HUMAN):
            raise ValueError(f"unknown origin {self.origin!r}")
        if self.origin == ORIGIN_ZSC and self.zsc_score is None:
            raise ValueError("proposal+zsc labels must carry a zsc_score")
        if self.origin == ORIGIN_HUMAN and self.detection.score != 1.0:
            raise ValueError("human corrections carry score 1.0")

    def to_dict(self) -> dict:
        return {
            "box": self.detection.box.to_dict(),
            "category": self.detection.category,
            "score": self.detection.score,
            "origin": self.origin,
            "proposal_score": self.proposal_score,
            "zsc_score": self.zsc_score,
        }

    @classmethod
    def from_dict(cls, image_id: str, d: Mapping) -> "PseudoLabel":
        return cls(
            image_id=image_id,
            detection=Detection(
                box=BoundingBox.from_dict(d["box"]),
                category=int(d["category"]),
                score=float(d["score"]),
            ),
            origin=str(d["origin"]),
            proposal_score=float(d["proposal_score"]),
            zsc_score=None if d.get("zsc_score") is None else float(d["zsc_score"]),
        )


@dataclass(frozen=True)
class TrainingSet:
    """Pseudo-labels grouped by image, plus the novel category under update."""

    entries: Mapping[str, tuple[PseudoLabel, ...]]
    target_category: CategoryId

    def __post_init__(self) -> None:
        object.__setattr__(
            self, "entries", {k: tuple(v) for k, v in sorted(self.entries.items())}
        )

    def __len__(self) -> int:
        return sum(len(v) for v in self.entries.values())

    def all_labels(self) -> list[PseudoLabel]:
        return [label for labels in self.entries.values() for label in labels]

    def category_counts(self) -> dict[CategoryId, int]:
        counts: dict[CategoryId, int] = {}
        for label in self.all_labels():
            counts[label.detection.category] = counts.get(label.detection.category, 0) + 1
        return counts

    def to_jsonl(self) -> str:
        lines = []
        for image_id, labels in self.entries.items():
            lines.append(
                json.dumps(
                    {"image_id": image_id, "labels": [l.to_dict() for l in labels]},
                    sort_keys=True,
                )
            )
        lines.append(json.dumps({"target_category": self.target_category}, sort_keys=True))
        return "\n".join(lines) + "\n"

    @classmethod
    def from_jsonl(cls, text: str) -> "TrainingSet":
        entries: dict[str, tuple[PseudoLabel, ...]] = {}
        target: Optional[int] = None
        for line in text.splitlines():
            line = line.strip()
            if not line:
                continue
            obj = json.loads(line)
            if "target_category" in obj:
                target = int(obj["target_category"])
                continue
            image_id = str(obj["image_id"])
            entries[image_id] = tuple(
                PseudoLabel.from_dict(image_id, d) for d in obj["labels"]
            )
        if target is None:
            raise ValueError("training set missing target_category record")
        return cls(entries=entries, target_category=target)


def save_training_set(ts: TrainingSet, path: str | Path) -> None:
    atomic_write_text(path, ts.to_jsonl())


def load_training_set(path: str | Path) -> TrainingSet:
    with open(path, "r", encoding="utf-8") as fh:
        return TrainingSet.from_jsonl(fh.read())


# ---------------------------------------------------------------------------
# two-stage pseudo-labeling
# ---------------------------------------------------------------------------


def _clip_box(box: BoundingBox, width: float, height: float) -> Optional[BoundingBox]:
    x1 = max(0.0, min(box.x_min, float(width)))
    y1 = max(0.0, min(box.y_min, float(height)))
    x2 = max(0.0, min(box.x_max, float(width)))
    y2 = max(0.0, min(box.y_max, float(height)))
    if x2 <= x1 or y2 <= y1:
        return None
    return BoundingBox(x1, y1, x2, y2)


def propose_boxes(
    proposer,
    image: ImageRecord,
    prompt_names: Sequence[str],
) -> list[tuple[BoundingBox, float]]:
    """Stage one: box proposals with the proposer's labels discarded.

    The zero-shot detector is prompted with the label space plus the novel
    name, but its category guesses are unreliable on this domain, so only
    (clipped box, proposal score) survives.
    """
    proposals = proposer.propose(image.id, list(prompt_names))
    out: list[tuple[BoundingBox, float]] = []
    for box, _label, score in proposals:
        clipped = _clip_box(box, image.width, image.height)
        if clipped is not None:
            out.append((clipped, float(score)))
    return out


def _nms_labels(labels: list[PseudoLabel], iou_thresh: float) -> list[PseudoLabel]:
    """Per-category greedy NMS over pseudo-labels. Human corrections take
    priority over any pseudo-label and are never suppressed by one."""
    if not labels:
        return []
    survivors: list[int] = []
    by_cat: dict[CategoryId, list[int]] = {}
    for i, label in enumerate(labels):
        by_cat.setdefault(label.detection.category, []).append(i)

    def priority(i: int):
        label = labels[i]
        return (
            0 if label.origin == ORIGIN_HUMAN else 1,
            -label.detection.score,
            label.detection.box.x_min,
            i,
        )

    for indices in by_cat.values():
        order = sorted(indices, key=priority)
        boxes = np.array([labels[i].detection.box.as_array() for i in order])
        keep = kernels.nms_keep(boxes, iou_thresh)
        for pos, i in enumerate(order):
            if keep[pos]:
                survivors.append(i)
            elif labels[i].origin == ORIGIN_HUMAN:
                # a human correction may only be suppressed by another one
                suppressor_is_human = any(
                    keep[q] and labels[order[q]].origin == ORIGIN_HUMAN
                    for q in range(pos)
                )
                if not suppressor_is_human:
                    survivors.append(i)
    return [labels[i] for i in sorted(survivors)]


def classify_crops(
    zsc,
    image: ImageRecord,
    proposals: Sequence[tuple[BoundingBox, float]],
    label_space: LabelSpace,
    thresholds: EngineThresholds,
) -> list[PseudoLabel]:
    """Stage two: classify each proposal's scaled crop over the label space
    plus an explicit background option.

    The crop is the proposal box grown by ``crop_scale`` (more scene context
    for the classifier); the label is the argmax category, kept only when it
    is not background and its score clears ``zsc_score_min``. Survivors are
    NMS-deduplicated per category.
    """
    names = label_space.names() + [BACKGROUND_NAME]
    ids = label_space.ids()
    labels: list[PseudoLabel] = []
    for box, proposal_score in proposals:
        crop = scale_box(box, thresholds.crop_scale, (image.width, image.height))
        scores = zsc.classify(image.id, crop, names)
        if len(scores) != len(names):
            raise UnknownCategory(
                f"classifier returned {len(scores)} scores for {len(names)} names"
            )
        best = int(np.argmax(scores))
        if best == len(names) - 1:  # background wins: drop the proposal
            continue
        zsc_score = float(scores[best])
        if zsc_score < thresholds.zsc_score_min:
            continue
        labels.append(
            PseudoLabel(
                image_id=image.id,
                detection=Detection(box=box, category=ids[best], score=zsc_score),
                origin=ORIGIN_ZSC,
                proposal_score=proposal_score,
                zsc_score=zsc_score,
            )
        )
    return _nms_labels(labels, thresholds.nms_iou)


def known_pseudo_labels(
    detector,
    image: ImageRecord,
    label_space: LabelSpace,
    thresholds: EngineThresholds,
) -> list[PseudoLabel]:
    """Self-labels for known categories: the current detector's confident
    predictions (score >= known_conf_min), known-status categories only."""
    labels: list[PseudoLabel] = []
    for det in detector.detect(image.id):
        if det.score < thresholds.known_conf_min:
            continue
        if not label_space.has_id(det.category):
            continue
        if label_space.status_of(det.category) != KNOWN:
            continue
        labels.append(
            PseudoLabel(
                image_id=image.id,
                detection=det,
                origin=ORIGIN_KNOWN,
                proposal_score=det.score,
            )
        )
    return labels


def assemble_training_set(
    novel: Sequence[PseudoLabel],
    known: Sequence[PseudoLabel],
    corrections: Sequence[PseudoLabel],
    target_category: CategoryId,
    thresholds: EngineThresholds,
    cap_ratio: float = DEFAULT_CAP_RATIO,
) -> TrainingSet:
    """Merge novel-pipeline labels, known self-labels, and human corrections.

    Balancing: each known category keeps at most ``cap_ratio`` times the
    number of target-category novel labels, dropping lowest scores first
    (cap_ratio ``inf`` disables the cap and leaves the plain union). Human
    corrections are always kept. Images ending up with no labels are
    excluded. Raises EmptyTrainingSet when there are no novel labels and no
    corrections to learn from.
    """
    if not novel and not corrections:
        raise EmptyTrainingSet("nothing to learn: no novel labels and no corrections")
    novel_target_count = sum(
        1 for label in novel if label.detection.category == target_category
    )
    cap = None
    if cap_ratio != float("inf"):
        cap = int(cap_ratio * novel_target_count)
    kept_known: list[PseudoLabel] = []
    by_cat: dict[CategoryId, list[PseudoLabel]] = {}
    for label in known:
        by_cat.setdefault(label.detection.category, []).append(label)
    for cat_labels in by_cat.values():
        if cap is None or len(cat_labels) <= cap:
            kept_known.extend(cat_labels)
        else:
            ranked = sorted(
                cat_labels,
                key=lambda l: (-l.detection.score, l.detection.box.x_min, l.image_id),
            )
            kept_known.extend(ranked[:cap])
    entries: dict[str, list[PseudoLabel]] = {}
    for label in list(novel) + kept_known + list(corrections):
        entries.setdefault(label.image_id, []).append(label)
    deduped: dict[str, tuple[PseudoLabel, ...]] = {}
    for image_id in sorted(entries):
        survivors = _nms_labels(entries[image_id], thresholds.nms_iou)
        if survivors:
            deduped[image_id] = tuple(survivors)
    if not deduped:
        raise EmptyTrainingSet("all labels were suppressed during assembly")
    return TrainingSet(entries=deduped, target_category=target_category)


# ---------------------------------------------------------------------------
# quality audit and training delegation
# ---------------------------------------------------------------------------


def _as_detection(label) -> Detection:
    return label.detection if isinstance(label, PseudoLabel) else label


def pseudo_label_precision(
    labels_by_image: Mapping[str, Sequence],
    gts_by_image: Mapping[str, Sequence[Detection]],
    iou_thresh: float,
) -> dict[CategoryId, float]:
    """Per-category precision of labels against ground truth: TP/(TP+FP)
    under per-image greedy matching at ``iou_thresh``.

    Accepts PseudoLabels or bare Detections. Categories with zero labels are
    absent from the result (undefined precision, not zero).
    """
    tp: dict[CategoryId, int] = {}
    total: dict[CategoryId, int] = {}
    for image_id, labels in labels_by_image.items():
        dets = [_as_detection(l) for l in labels]
        gts = list(gts_by_image.get(image_id, ()))
        matches = greedy_match(dets, gts, iou_thresh)
        for pred_idx, gt_idx in matches:
            cat = dets[pred_idx].category
            total[cat] = total.get(cat, 0) + 1
            if gt_idx is not None:
                tp[cat] = tp.get(cat, 0) + 1
    return {cat: tp.get(cat, 0) / n for cat, n in total.items() if n > 0}


def update_detector(detector, training_set: TrainingSet, schedule) -> tuple[object, Fraction]:
    """Delegate training to the detector adapter; returns (handle, GPU-hours)
    for the cost ledger. A zero-iteration schedule is an identity update."""
    if len(training_set) == 0:
        raise EmptyTrainingSet("refusing to train on an empty training set")
    gpu_hours = detector.train(training_set, schedule)
    return detector, Fraction(gpu_hours)
