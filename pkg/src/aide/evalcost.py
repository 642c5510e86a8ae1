"""Detection metrics (AP, known/novel averages, forgetting) and the dollar
cost ledger.

Money is held as exact rationals internally (integer cents per unit,
``fractions.Fraction`` quantities), so every entry satisfies
``dollars == quantity * unit_rate`` with no float drift; rounding happens
once, half-even, when a total is reported.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Iterable, Mapping, Optional, Sequence

import numpy as np

from .core import Detection, ImageRecord, LabelSpace, greedy_match
from .errors import UnknownKind

COCO_IOU_THRESHOLDS = tuple(np.round(np.arange(0.5, 1.0, 0.05), 2))

# ---------------------------------------------------------------------------
# average precision
# ---------------------------------------------------------------------------


def ap_from_flags(scores: Sequence[float], tp_flags: Sequence[bool], n_gt: int) -> Optional[float]:
    """All-points-interpolated AP from per-prediction TP/FP flags.

    ``scores``/``tp_flags`` need not be pre-sorted; sorting is stable on
    descending score. Returns None when the metric is undefined (no ground
    truth and no predictions).
    """
    n = len(scores)
    if n_gt == 0:
        return None if n == 0 else 0.0
    if n == 0:
        return 0.0
    order = sorted(range(n), key=lambda i: (-scores[i], i))
    flags = np.array([bool(tp_flags[i]) for i in order])
    tp = np.cumsum(flags)
    fp = np.cumsum(~flags)
    recall = tp / n_gt
    precision = tp / (tp + fp)
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    prev_recall = np.concatenate(([0.0], recall[:-1]))
    return float(np.sum((recall - prev_recall) * envelope))


def _match_flags(
    preds: Sequence[Detection], gts: Sequence[Detection], iou_thresh: float
) -> tuple[list[float], list[bool]]:
    matches = greedy_match(preds, gts, iou_thresh)
    scores = [preds[pi].score for pi, _ in matches]
    flags = [gi is not None for _, gi in matches]
    return scores, flags


def average_precision(
    preds: Sequence[Detection],
    gts: Sequence[Detection],
    iou_thresh: float = 0.5,
    *,
    coco_mode: bool = False,
) -> Optional[float]:
    """AP for one category over one prediction/GT pool.

    Predictions are greedy-matched to ground truth at ``iou_thresh`` in
    descending score order, then the area under the right-monotone
    precision-recall curve is integrated over all points. With
    ``coco_mode`` the result is instead averaged over IoU thresholds
    0.50:0.05:0.95 and ``iou_thresh`` is ignored.
    """
    if coco_mode:
        values = [average_precision(preds, gts, t) for t in COCO_IOU_THRESHOLDS]
        if values[0] is None:
            return None
        return float(np.mean([v for v in values]))
    scores, flags = _match_flags(preds, gts, iou_thresh)
    return ap_from_flags(scores, flags, len(gts))


# ---------------------------------------------------------------------------
# evaluation report
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class EvalReport:
    """Per-category AP plus the known/novel averages and the forgetting delta."""

    per_category_ap: dict
    novel_avg: Optional[float]
    known_avg: Optional[float]
    forgetting: Optional[float]
    counts: dict

    def to_dict(self) -> dict:
        return {
            "per_category_ap": {str(k): v for k, v in self.per_category_ap.items()},
            "novel_avg": self.novel_avg,
            "known_avg": self.known_avg,
            "forgetting": self.forgetting,
            "counts": dict(self.counts),
        }


def eval_report(
    detector,
    eval_set: Sequence[ImageRecord],
    label_space: LabelSpace,
    baseline_known: Optional[float] = None,
    iou_thresh: float = 0.5,
    *,
    coco_mode: bool = False,
) -> EvalReport:
    """Evaluate a detector against ground truth, per image and per category.

    ``detector`` must expose ``detect(image_id) -> list[Detection]``.
    Categories with neither ground truth nor predictions anywhere in the
    eval set have undefined AP and are excluded from the averages;
    forgetting is ``known_avg - baseline_known`` when a baseline is given.
    """
    thresholds = COCO_IOU_THRESHOLDS if coco_mode else (iou_thresh,)
    cat_ids = label_space.ids()
    # per category, per threshold: merged scores/flags across images
    scores: dict = {c: [[] for _ in thresholds] for c in cat_ids}
    flags: dict = {c: [[] for _ in thresholds] for c in cat_ids}
    n_gt = {c: 0 for c in cat_ids}
    n_pred = {c: 0 for c in cat_ids}
    for record in eval_set:
        preds = detector.detect(record.id)
        gts = list(record.ground_truth or ())
        for gt in gts:
            if gt.category in n_gt:
                n_gt[gt.category] += 1
        for c in cat_ids:
            c_preds = [p for p in preds if p.category == c]
            c_gts = [g for g in gts if g.category == c]
            n_pred[c] += len(c_preds)
            if not c_preds:
                continue
            for ti, t in enumerate(thresholds):
                s, f = _match_flags(c_preds, c_gts, t)
                scores[c][ti].extend(s)
                flags[c][ti].extend(f)
    per_cat: dict = {}
    for c in cat_ids:
        values = [ap_from_flags(scores[c][ti], flags[c][ti], n_gt[c]) for ti in range(len(thresholds))]
        if values[0] is None:
            per_cat[c] = None
        else:
            per_cat[c] = float(np.mean(values))
    known = [per_cat[c] for c in label_space.known_ids() if per_cat[c] is not None]
    novel = [per_cat[c] for c in label_space.novel_ids() if per_cat[c] is not None]
    known_avg = float(np.mean(known)) if known else None
    novel_avg = float(np.mean(novel)) if novel else None
    forgetting = None
    if baseline_known is not None and known_avg is not None:
        forgetting = known_avg - baseline_known
    return EvalReport(
        per_category_ap=per_cat,
        novel_avg=novel_avg,
        known_avg=known_avg,
        forgetting=forgetting,
        counts={"images": len(eval_set), "gt": dict(n_gt), "pred": dict(n_pred)},
    )


# ---------------------------------------------------------------------------
# cost ledger
# ---------------------------------------------------------------------------

DEFAULT_RATES_CENTS = {
    "box_label": 6,  # $0.06 per bounding box
    "gpu_hour": 110,  # $1.10 per GPU-hour
    "image_inspection": 5,  # $0.05 per image looked at
    "llm_call": 0,  # metered free; see flat note below
}

# Scenario-generation LLM usage is booked once per run as a flat cent.
LLM_FLAT_NOTE_CENTS = 1


def _as_fraction(value) -> Fraction:
    if isinstance(value, Fraction):
        return value
    if isinstance(value, int):
        return Fraction(value)
    if isinstance(value, float):
        # decimal-string semantics: charge(2.0) means exactly 2, not the
        # nearest binary float
        return Fraction(str(value))
    if isinstance(value, str):
        return Fraction(value)
    raise TypeError(f"cannot interpret quantity {value!r}")


def round_half_even_cents(value: Fraction) -> int:
    """Banker's rounding of an exact cent amount to integer cents."""
    floor, rem = divmod(value.numerator, value.denominator)
    frac = Fraction(rem, value.denominator)
    if frac > Fraction(1, 2):
        return floor + 1
    if frac < Fraction(1, 2):
        return floor
    return floor if floor % 2 == 0 else floor + 1


def format_dollars(cents: int) -> str:
    sign = "-" if cents < 0 else ""
    cents = abs(cents)
    return f"{sign}${cents // 100}.{cents % 100:02d}"


@dataclass(frozen=True)
class LedgerEntry:
    kind: str
    quantity: Fraction
    unit_rate_cents: int
    stage: str

    @property
    def cents(self) -> Fraction:
        return self.quantity * self.unit_rate_cents

    @property
    def dollars(self) -> Fraction:
        return self.cents / 100

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "quantity": str(self.quantity),
            "unit_rate": f"{self.unit_rate_cents / 100:.4f}".rstrip("0").rstrip(".") or "0",
            "unit_rate_cents": self.unit_rate_cents,
            "dollars": str(self.dollars),
            "stage": self.stage,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "LedgerEntry":
        return cls(
            kind=str(d["kind"]),
            quantity=Fraction(str(d["quantity"])),
            unit_rate_cents=int(d["unit_rate_cents"]),
            stage=str(d["stage"]),
        )


@dataclass
class CostLedger:
    """Append-only dollar accounting, one writer per run."""

    rates_cents: dict = field(default_factory=lambda: dict(DEFAULT_RATES_CENTS))
    entries: list = field(default_factory=list)

    def charge(
        self,
        kind: str,
        quantity,
        stage: str,
        unit_rate_cents: Optional[int] = None,
    ) -> LedgerEntry:
        """Append an entry; dollars are exactly quantity x rate."""
        if kind not in self.rates_cents:
            raise UnknownKind(f"no rate configured for kind {kind!r}")
        q = _as_fraction(quantity)
        if q < 0:
            raise ValueError("quantity must be >= 0")
        rate = self.rates_cents[kind] if unit_rate_cents is None else int(unit_rate_cents)
        entry = LedgerEntry(kind=kind, quantity=q, unit_rate_cents=rate, stage=stage)
        self.entries.append(entry)
        return entry

    def note_llm_flat(self, stage: str) -> LedgerEntry:
        """Book the per-run flat LLM note (negligible, under a cent)."""
        return self.charge("llm_call", 1, stage, unit_rate_cents=LLM_FLAT_NOTE_CENTS)

    def total_cents(self, kinds: Optional[Iterable[str]] = None) -> int:
        wanted = set(kinds) if kinds is not None else None
        acc = Fraction(0)
        for e in self.entries:
            if wanted is None or e.kind in wanted:
                acc += e.cents
        return round_half_even_cents(acc)

    def total_dollars_str(self, kinds: Optional[Iterable[str]] = None) -> str:
        return format_dollars(self.total_cents(kinds))

    def to_jsonl(self) -> str:
        return "".join(json.dumps(e.to_dict(), sort_keys=True) + "\n" for e in self.entries)

    @classmethod
    def from_jsonl(cls, text: str, rates_cents: Optional[dict] = None) -> "CostLedger":
        ledger = cls(rates_cents=dict(rates_cents or DEFAULT_RATES_CENTS))
        for line in text.splitlines():
            line = line.strip()
            if line:
                ledger.entries.append(LedgerEntry.from_dict(json.loads(line)))
        return ledger


# ---------------------------------------------------------------------------
# report rendering
# ---------------------------------------------------------------------------

TRAINING_KINDS = ("gpu_hour",)
LABELING_KINDS = ("box_label", "image_inspection", "llm_call")


def _pct(v: Optional[float]) -> str:
    return "-" if v is None else f"{100.0 * v:.1f}"


def render_report_table(report: EvalReport, ledger: CostLedger) -> tuple[str, str]:
    """Return (tsv, pretty) views: Training $, Labeling $, Novel AP, Known AP,
    Forgetting — AP columns in percent."""
    training = ledger.total_cents(TRAINING_KINDS)
    labeling = ledger.total_cents(LABELING_KINDS)
    header = ["Training $", "Labeling $", "Novel AP", "Known AP", "Forgetting"]
    row = [
        f"{training / 100:.2f}",
        f"{labeling / 100:.2f}",
        _pct(report.novel_avg),
        _pct(report.known_avg),
        _pct(report.forgetting),
    ]
    tsv = "\t".join(header) + "\n" + "\t".join(row) + "\n"
    widths = [max(len(h), len(v)) for h, v in zip(header, row)]
    pretty_rows = [
        "  ".join(h.rjust(w) for h, w in zip(header, widths)),
        "  ".join("-" * w for w in widths),
        "  ".join(v.rjust(w) for v, w in zip(row, widths)),
    ]
    return tsv, "\n".join(pretty_rows) + "\n"
