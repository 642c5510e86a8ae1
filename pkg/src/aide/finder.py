"""Issue finder: diff dense captions against the label space and the
detector's own predictions to surface categories the detector cannot see.

Mention extraction matches captions against a provided candidate vocabulary
(label space plus a daily-objects list, shipped as data) rather than doing
open noun-phrase chunking: vocabulary matching is deterministic and
testable. A mention-count trigger guards against captioner hallucination.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, Mapping, Optional, Sequence

from .core import LabelSpace, normalize_term
from .fsio import atomic_write_text

DECISION_NOVEL = "novel"
DECISION_IGNORED = "ignored"

DEFAULT_TRIGGER_MIN_MENTIONS = 3


def extract_mentions(
    caption: str,
    vocabulary: Sequence[str],
    aliases: Optional[Mapping[str, str]] = None,
) -> set[str]:
    """Vocabulary terms appearing as token-contiguous substrings of the
    normalized caption; longer terms consume their tokens first, so
    "traffic cone" shadows "cone". Alias surface forms resolve to their
    canonical vocabulary name.

    ``vocabulary`` entries must already be normalized; ``aliases`` maps a
    normalized alias string to its canonical name.
    """
    tokens = normalize_term(caption).split()
    forms: list[tuple[list[str], str]] = [(name.split(), name) for name in vocabulary]
    for alias, canonical in (aliases or {}).items():
        forms.append((alias.split(), canonical))
    consumed = [False] * len(tokens)
    found: set[str] = set()
    for form_tokens, canonical in sorted(forms, key=lambda f: (-len(f[0]), f[0])):
        n = len(form_tokens)
        if n == 0:
            continue
        for at in range(len(tokens) - n + 1):
            if any(consumed[at : at + n]):
                continue
            if tokens[at : at + n] == form_tokens:
                for k in range(at, at + n):
                    consumed[k] = True
                found.add(canonical)
    return found


def find_novel(
    mentions: set[str],
    label_space: LabelSpace,
    predicted_categories: set[str],
) -> set[str]:
    """Mentions minus everything the label space or the detector already
    covers (canonical names, aliases, and predicted category names)."""
    covered = label_space.surface_forms() | {normalize_term(p) for p in predicted_categories}
    return {m for m in mentions if normalize_term(m) not in covered}


@dataclass(frozen=True)
class IssueCandidate:
    name: str
    supporting_images: tuple[str, ...]
    mention_count: int
    already_detectable: bool
    decision: str

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "supporting_images": list(self.supporting_images),
            "mention_count": self.mention_count,
            "already_detectable": self.already_detectable,
            "decision": self.decision,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "IssueCandidate":
        return cls(
            name=str(d["name"]),
            supporting_images=tuple(d["supporting_images"]),
            mention_count=int(d["mention_count"]),
            already_detectable=bool(d["already_detectable"]),
            decision=str(d["decision"]),
        )


@dataclass(frozen=True)
class IssueReport:
    candidates: tuple[IssueCandidate, ...]
    scanned_images: tuple[str, ...]
    trigger_min_mentions: int

    def novel(self) -> list[IssueCandidate]:
        return [c for c in self.candidates if c.decision == DECISION_NOVEL]

    def to_dict(self) -> dict:
        return {
            "candidates": [c.to_dict() for c in self.candidates],
            "scanned_images": list(self.scanned_images),
            "trigger_min_mentions": self.trigger_min_mentions,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "IssueReport":
        return cls(
            candidates=tuple(IssueCandidate.from_dict(c) for c in d["candidates"]),
            scanned_images=tuple(d["scanned_images"]),
            trigger_min_mentions=int(d["trigger_min_mentions"]),
        )


def save_issue_report(report: IssueReport, path: str | Path) -> None:
    atomic_write_text(path, json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n")


def load_issue_report(path: str | Path) -> IssueReport:
    with open(path, "r", encoding="utf-8") as fh:
        return IssueReport.from_dict(json.load(fh))


def issue_scan(
    images: Sequence,
    captioner,
    detector,
    label_space: LabelSpace,
    candidate_vocabulary: Sequence[str],
    trigger_min_mentions: int = DEFAULT_TRIGGER_MIN_MENTIONS,
) -> IssueReport:
    """Caption and detect every image in the batch, then aggregate the
    out-of-label-space mentions. Candidates reaching the mention trigger are
    decided ``novel``; the rest stay ``ignored`` (hallucination guard).

    ``images`` may hold ImageRecords or raw image ids.
    """
    if not images:
        raise ValueError("issue_scan needs a non-empty image batch")
    if trigger_min_mentions < 1:
        raise ValueError("trigger_min_mentions must be >= 1")
    vocabulary = [normalize_term(v) for v in candidate_vocabulary]
    aliases = label_space.alias_map()
    support: dict[str, list[str]] = {}
    detectable: dict[str, bool] = {}
    image_ids: list[str] = []
    for image in images:
        image_id = image.id if hasattr(image, "id") else str(image)
        image_ids.append(image_id)
        caption = captioner.describe(image_id)
        predictions = detector.detect(image_id)
        predicted_names = {label_space.name_of(d.category) for d in predictions
                           if label_space.has_id(d.category)}
        mentions = extract_mentions(caption, vocabulary, aliases)
        for name in find_novel(mentions, label_space, predicted_names):
            support.setdefault(name, []).append(image_id)
            detectable.setdefault(name, False)
        # a mention the detector also predicted is not an issue, but record
        # that it was seen as detectable if it is outside the label space
        for name in mentions & predicted_names:
            if label_space.resolve(name) is None:
                support.setdefault(name, [])
                detectable[name] = True
    candidates = tuple(
        IssueCandidate(
            name=name,
            supporting_images=tuple(ids),
            mention_count=len(ids),
            already_detectable=detectable.get(name, False),
            decision=DECISION_NOVEL if len(ids) >= trigger_min_mentions else DECISION_IGNORED,
        )
        for name, ids in sorted(support.items(), key=lambda kv: (-len(kv[1]), kv[0]))
    )
    return IssueReport(
        candidates=candidates,
        scanned_images=tuple(image_ids),
        trigger_min_mentions=trigger_min_mentions,
    )


def finder_precision(candidate: IssueCandidate, truly_present: Callable[[str], bool]) -> float:
    """Fraction of a candidate's supporting images that truly contain it."""
    if not candidate.supporting_images:
        raise ValueError(f"candidate {candidate.name!r} has no supporting images")
    hits = sum(1 for image_id in candidate.supporting_images if truly_present(image_id))
    return hits / len(candidate.supporting_images)
