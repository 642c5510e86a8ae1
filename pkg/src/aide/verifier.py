"""Verification stage: scenario generation, per-scenario retrieval,
diversity measurement, and the human review workflow whose corrections
trigger retraining.

Cases are independently lockable units; concurrent reviewers are serialized
per case through an optimistic revision counter, so every mutation is
idempotent-checkable.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Callable, Iterable, Mapping, Optional, Sequence

import numpy as np

from .core import BoundingBox, Detection, normalize_term
from .errors import EmptyStore, InvalidCount, InvalidTransition, RevisionConflict
from .feeder import EmbeddingStore
from .fsio import atomic_write_text

STATE_PENDING = "pending"
STATE_PASSED = "passed"
STATE_FAILED = "failed"

GENERATE_RETRY_BOUND = 3

DIVERSITY_DEFAULT_REPEATS = 10
DIVERSITY_DEFAULT_POOL = 100


def _mentions_category(text: str, category: str) -> bool:
    tokens = normalize_term(text).split()
    needle = normalize_term(category).split()
    if not needle:
        return False
    return any(tokens[i : i + len(needle)] == needle for i in range(len(tokens) - len(needle) + 1))


@dataclass(frozen=True)
class ScenarioDescription:
    text: str
    category: str
    generator: str = "sim"

    def __post_init__(self) -> None:
        if not self.text.strip():
            raise ValueError("scenario text must be non-empty")
        if not _mentions_category(self.text, self.category):
            raise ValueError(f"scenario text does not mention {self.category!r}: {self.text!r}")

    def to_dict(self) -> dict:
        return {"text": self.text, "category": self.category, "generator": self.generator}

    @classmethod
    def from_dict(cls, d: Mapping) -> "ScenarioDescription":
        return cls(text=str(d["text"]), category=str(d["category"]),
                   generator=str(d.get("generator", "sim")))


@dataclass(frozen=True)
class ScenarioBatch:
    """Generated descriptions; ``complete`` is False when deduplication left
    the batch short after the retry bound."""

    descriptions: tuple[ScenarioDescription, ...]
    complete: bool = True

    def __iter__(self):
        return iter(self.descriptions)

    def __len__(self) -> int:
        return len(self.descriptions)


def generate_scenarios(generator, category: str, n: int,
                       retry_bound: int = GENERATE_RETRY_BOUND) -> ScenarioBatch:
    """Request n distinct scene descriptions for a category.

    Duplicates (after normalization) are dropped and replacements requested
    up to ``retry_bound`` extra rounds; a still-short batch is returned with
    ``complete=False`` rather than looping forever.
    """
    if n < 1:
        raise InvalidCount(f"need n >= 1 scenarios, got {n}")
    seen: set[str] = set()
    out: list[ScenarioDescription] = []
    attempts = 0
    need = n
    while need > 0 and attempts <= retry_bound:
        raw = generator.generate(category, need)
        for text in raw:
            key = normalize_term(text)
            if key in seen:
                continue
            seen.add(key)
            out.append(ScenarioDescription(text=text, category=category,
                                           generator=type(generator).__name__))
            if len(out) == n:
                break
        need = n - len(out)
        attempts += 1
    return ScenarioBatch(descriptions=tuple(out), complete=len(out) == n)


# ---------------------------------------------------------------------------
# diversity metric
# ---------------------------------------------------------------------------


def _ranked_ids(store: EmbeddingStore, query: np.ndarray, k: int) -> list[str]:
    scores = store.scores_against(query)
    ids = store.ids()
    order = sorted(range(len(ids)), key=lambda i: (-scores[i], i))
    return [ids[i] for i in order[:k]]


def scenario_diversity(
    descriptions: Sequence[ScenarioDescription],
    store: EmbeddingStore,
    embedder,
    per_query_k: int = 10,
    repeats: int = DIVERSITY_DEFAULT_REPEATS,
    pool_per_repeat: int = DIVERSITY_DEFAULT_POOL,
    seed: int = 0,
) -> float:
    """Mean fraction of distinct images among ``pool_per_repeat`` retrieved
    images, over ``repeats`` rounds.

    Each round shuffles the description order (seeded) and fills the pool
    round-robin from each description's top-k list: rank-0 of every
    description, then rank-1, and so on. A description never repeats its own
    images within a round, but two descriptions retrieving the same image
    both contribute it — those collisions are what the metric counts.
    """
    if len(store) == 0:
        raise EmptyStore("diversity needs a populated store")
    if not descriptions:
        raise InvalidCount("diversity needs at least one description")
    if per_query_k < 1 or repeats < 1 or pool_per_repeat < 1:
        raise InvalidCount("per_query_k, repeats, pool_per_repeat must be >= 1")
    ranked = [_ranked_ids(store, embedder.embed_text(d.text), per_query_k) for d in descriptions]
    fractions = []
    for r in range(repeats):
        rng = np.random.default_rng(np.random.SeedSequence([seed, r]))
        order = rng.permutation(len(ranked))
        pool: list[str] = []
        for rank in range(per_query_k):
            for di in order:
                if len(pool) >= pool_per_repeat:
                    break
                if rank < len(ranked[di]):
                    pool.append(ranked[di][rank])
            if len(pool) >= pool_per_repeat:
                break
        fractions.append(len(set(pool)) / pool_per_repeat)
    return float(np.mean(fractions))


# ---------------------------------------------------------------------------
# verification cases
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CaseCorrection:
    """A human-drawn ground-truth box on one of the case's images."""

    image_id: str
    detection: Detection

    def __post_init__(self) -> None:
        if self.detection.score != 1.0:
            object.__setattr__(
                self, "detection",
                Detection(self.detection.box, self.detection.category, 1.0),
            )

    def to_dict(self) -> dict:
        return {"image_id": self.image_id, "detection": self.detection.to_dict()}

    @classmethod
    def from_dict(cls, d: Mapping) -> "CaseCorrection":
        return cls(image_id=str(d["image_id"]), detection=Detection.from_dict(d["detection"]))


@dataclass(frozen=True)
class VerificationCase:
    id: str
    scenario: ScenarioDescription
    image_ids: tuple[str, ...]
    predictions: Mapping[str, tuple[Detection, ...]]
    state: str = STATE_PENDING
    corrections: tuple[CaseCorrection, ...] = ()
    reviewer_note: str = ""
    revision: int = 0

    def __post_init__(self) -> None:
        object.__setattr__(self, "image_ids", tuple(self.image_ids))
        object.__setattr__(
            self, "predictions",
            {k: tuple(v) for k, v in self.predictions.items()},
        )
        object.__setattr__(self, "corrections", tuple(self.corrections))
        if self.state == STATE_PASSED and self.corrections:
            raise ValueError("a passed case cannot carry corrections")

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "scenario": self.scenario.to_dict(),
            "image_ids": list(self.image_ids),
            "predictions": {
                k: [d.to_dict() for d in v] for k, v in self.predictions.items()
            },
            "state": self.state,
            "corrections": [c.to_dict() for c in self.corrections],
            "reviewer_note": self.reviewer_note,
            "revision": self.revision,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "VerificationCase":
        return cls(
            id=str(d["id"]),
            scenario=ScenarioDescription.from_dict(d["scenario"]),
            image_ids=tuple(d["image_ids"]),
            predictions={
                k: tuple(Detection.from_dict(x) for x in v)
                for k, v in d["predictions"].items()
            },
            state=str(d["state"]),
            corrections=tuple(CaseCorrection.from_dict(c) for c in d["corrections"]),
            reviewer_note=str(d.get("reviewer_note", "")),
            revision=int(d["revision"]),
        )


def build_cases(
    descriptions: Iterable[ScenarioDescription],
    store: EmbeddingStore,
    embedder,
    detector,
    k_images: int,
    id_prefix: str = "case",
) -> list[VerificationCase]:
    """One pending case per description: its top-k retrieved images and the
    detector's predictions on each."""
    if k_images < 1:
        raise InvalidCount("k_images must be >= 1")
    cases = []
    for idx, description in enumerate(descriptions):
        image_ids = _ranked_ids(store, embedder.embed_text(description.text), k_images)
        predictions = {image_id: tuple(detector.detect(image_id)) for image_id in image_ids}
        cases.append(
            VerificationCase(
                id=f"{id_prefix}-{idx:04d}",
                scenario=description,
                image_ids=tuple(image_ids),
                predictions=predictions,
            )
        )
    return cases


def record_verdict(
    case: VerificationCase,
    verdict: str,
    corrections: Sequence[CaseCorrection],
    expected_revision: int,
) -> VerificationCase:
    """Apply a reviewer verdict under optimistic concurrency.

    ``expected_revision`` must match the case's current revision or
    RevisionConflict is raised and the case is unchanged. Passed cases are
    terminal (InvalidTransition on any further verdict); failed cases may be
    re-reviewed. Corrections are stored with score forced to 1.0.
    """
    if verdict not in (STATE_PASSED, STATE_FAILED):
        raise ValueError(f"verdict must be {STATE_PASSED!r} or {STATE_FAILED!r}")
    if expected_revision != case.revision:
        raise RevisionConflict(
            f"case {case.id}: expected revision {expected_revision}, have {case.revision}"
        )
    if case.state == STATE_PASSED:
        raise InvalidTransition(f"case {case.id} already passed; reopen is not supported")
    if verdict == STATE_PASSED and corrections:
        raise ValueError("a passing verdict cannot carry corrections")
    unknown = [c.image_id for c in corrections if c.image_id not in case.image_ids]
    if unknown:
        raise ValueError(f"corrections reference images outside the case: {unknown}")
    return replace(
        case,
        state=verdict,
        corrections=tuple(corrections),
        revision=case.revision + 1,
    )


def corrections_for_retraining(cases: Iterable[VerificationCase]) -> list[CaseCorrection]:
    """Union of corrections on failed cases — passed cases contribute nothing."""
    out: list[CaseCorrection] = []
    for case in cases:
        if case.state == STATE_FAILED:
            out.extend(case.corrections)
    return out


@dataclass
class ReviewSession:
    """Ordered review queue over one run's cases."""

    run_id: str
    queue: list[str]

    def __post_init__(self) -> None:
        if len(set(self.queue)) != len(self.queue):
            raise ValueError("queue contains duplicate case ids")

    def stats(self, cases: Mapping[str, VerificationCase]) -> dict:
        counts = {STATE_PENDING: 0, STATE_PASSED: 0, STATE_FAILED: 0}
        for case_id in self.queue:
            counts[cases[case_id].state] += 1
        counts["total"] = len(self.queue)
        return counts


def save_case(case: VerificationCase, directory: str | Path) -> Path:
    path = Path(directory) / f"{case.id}.json"
    atomic_write_text(path, json.dumps(case.to_dict(), indent=2, sort_keys=True) + "\n")
    return path


def load_case(path: str | Path) -> VerificationCase:
    with open(path, "r", encoding="utf-8") as fh:
        return VerificationCase.from_dict(json.load(fh))


def load_cases(directory: str | Path) -> dict[str, VerificationCase]:
    directory = Path(directory)
    cases: dict[str, VerificationCase] = {}
    if directory.is_dir():
        for path in sorted(directory.glob("*.json")):
            case = load_case(path)
            cases[case.id] = case
    return cases
