"""Run manifest: the append-only iteration log and the stage automaton
accepting exactly ``FindIssue Feed Update Verify (Retrain Verify)* Done``.

Every stage commit appends one IterationRecord carrying digests of its
immutable output files plus a hash chained over the whole log, so resume can
detect both tampered artifacts and tampered records. Verification cases are
deliberately outside the digest set: reviewers mutate them by design, and
each case file self-validates through its revision counter.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Mapping, Optional

from ..errors import CorruptManifest, StageOrderError
from ..fsio import atomic_write_text, sha256_bytes, sha256_file

STAGE_FIND_ISSUE = "FindIssue"
STAGE_FEED = "Feed"
STAGE_UPDATE = "Update"
STAGE_VERIFY = "Verify"
STAGE_RETRAIN = "Retrain"
STAGE_DONE = "Done"

MANIFEST_NAME = "manifest.json"


@dataclass(frozen=True)
class IterationRecord:
    stage: str
    round: int  # retrain round this record belongs to (0 = first pass)
    inputs_digest: str
    outputs_digest: str
    outputs: Mapping[str, str]  # relative path -> sha256
    wall_time: float
    cost_entries: tuple = ()  # serialized LedgerEntry dicts
    notes: Mapping[str, object] = field(default_factory=dict)
    record_digest: str = ""

    def core_dict(self) -> dict:
        return {
            "stage": self.stage,
            "round": self.round,
            "inputs_digest": self.inputs_digest,
            "outputs_digest": self.outputs_digest,
            "outputs": dict(sorted(self.outputs.items())),
            "wall_time": self.wall_time,
            "cost_entries": list(self.cost_entries),
            "notes": dict(sorted(self.notes.items())),
        }

    def to_dict(self) -> dict:
        d = self.core_dict()
        d["record_digest"] = self.record_digest
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "IterationRecord":
        return cls(
            stage=str(d["stage"]),
            round=int(d["round"]),
            inputs_digest=str(d["inputs_digest"]),
            outputs_digest=str(d["outputs_digest"]),
            outputs=dict(d["outputs"]),
            wall_time=float(d["wall_time"]),
            cost_entries=tuple(d["cost_entries"]),
            notes=dict(d.get("notes", {})),
            record_digest=str(d["record_digest"]),
        )


def _chain_digest(record: IterationRecord, prev_digest: str) -> str:
    payload = json.dumps({"prev": prev_digest, "record": record.core_dict()}, sort_keys=True)
    return sha256_bytes(payload.encode("utf-8"))


@dataclass
class RunManifest:
    run_id: str
    config: dict  # engine config snapshot, immutable after run start
    base_artifacts: dict = field(default_factory=dict)  # relative path -> sha256
    baseline_known: Optional[float] = None
    label_space_version: int = 0
    records: list = field(default_factory=list)

    # ------------------------------------------------------------------
    # automaton
    # ------------------------------------------------------------------

    def last_stage(self) -> Optional[str]:
        return self.records[-1].stage if self.records else None

    def current_round(self) -> int:
        return self.records[-1].round if self.records else 0

    def next_stage(self, *, has_pending_cases: bool, has_failed_with_corrections: bool,
                   max_rounds: int) -> Optional[str]:
        """The only stage allowed to run next, or None when the run is Done.

        After a Verify pass the automaton loops back to Retrain only when
        failed cases carrying corrections exist and the round budget allows;
        pending cases block advancement entirely.
        """
        last = self.last_stage()
        if last is None:
            return STAGE_FIND_ISSUE
        if last == STAGE_FIND_ISSUE:
            return STAGE_FEED
        if last == STAGE_FEED:
            return STAGE_UPDATE
        if last == STAGE_UPDATE:
            return STAGE_VERIFY
        if last == STAGE_VERIFY:
            if has_pending_cases:
                raise StageOrderError("verification cases are awaiting review")
            if has_failed_with_corrections and self.current_round() + 1 <= max_rounds:
                return STAGE_RETRAIN
            return STAGE_DONE
        if last == STAGE_RETRAIN:
            return STAGE_VERIFY
        if last == STAGE_DONE:
            return None
        raise CorruptManifest(f"unknown stage {last!r} in manifest")

    # ------------------------------------------------------------------
    # record management
    # ------------------------------------------------------------------

    def append_record(self, record: IterationRecord) -> IterationRecord:
        prev = self.records[-1].record_digest if self.records else self.base_digest()
        sealed = replace(record, record_digest=_chain_digest(record, prev))
        self.records.append(sealed)
        return sealed

    def base_digest(self) -> str:
        payload = json.dumps(
            {
                "run_id": self.run_id,
                "config": self.config,
                "base_artifacts": dict(sorted(self.base_artifacts.items())),
                "baseline_known": self.baseline_known,
            },
            sort_keys=True,
        )
        return sha256_bytes(payload.encode("utf-8"))

    def verify_chain(self) -> None:
        prev = self.base_digest()
        for i, record in enumerate(self.records):
            expected = _chain_digest(record, prev)
            if record.record_digest != expected:
                raise CorruptManifest(f"iteration record {i} ({record.stage}) digest mismatch")
            prev = record.record_digest

    def all_cost_entries(self) -> list[dict]:
        out: list[dict] = []
        for record in self.records:
            out.extend(record.cost_entries)
        return out

    # ------------------------------------------------------------------
    # persistence
    # ------------------------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "format": "aide-run-manifest",
            "version": 1,
            "run_id": self.run_id,
            "config": self.config,
            "base_artifacts": dict(sorted(self.base_artifacts.items())),
            "baseline_known": self.baseline_known,
            "label_space_version": self.label_space_version,
            "records": [r.to_dict() for r in self.records],
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "RunManifest":
        if d.get("format") != "aide-run-manifest":
            raise CorruptManifest("not a run manifest")
        return cls(
            run_id=str(d["run_id"]),
            config=dict(d["config"]),
            base_artifacts=dict(d["base_artifacts"]),
            baseline_known=d.get("baseline_known"),
            label_space_version=int(d.get("label_space_version", 0)),
            records=[IterationRecord.from_dict(r) for r in d["records"]],
        )

    def save(self, run_dir: str | Path) -> None:
        atomic_write_text(
            Path(run_dir) / MANIFEST_NAME,
            json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n",
        )

    @classmethod
    def load(cls, run_dir: str | Path) -> "RunManifest":
        path = Path(run_dir) / MANIFEST_NAME
        if not path.exists():
            raise CorruptManifest(f"no manifest at {path}")
        try:
            with open(path, "r", encoding="utf-8") as fh:
                doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise CorruptManifest(f"manifest is not valid JSON: {exc}") from exc
        return cls.from_dict(doc)

    def verify_artifacts(self, run_dir: str | Path) -> None:
        """Check every recorded digest against the files on disk."""
        run_dir = Path(run_dir)
        self.verify_chain()
        expected: dict[str, str] = dict(self.base_artifacts)
        for record in self.records:
            expected.update(record.outputs)
        for rel_path, digest in sorted(expected.items()):
            path = run_dir / rel_path
            if not path.exists():
                raise CorruptManifest(f"missing artifact {rel_path}")
            actual = sha256_file(path)
            if actual != digest:
                raise CorruptManifest(f"artifact {rel_path} digest mismatch")
