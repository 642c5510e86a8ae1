"""The engine loop: stage execution over a file-backed run directory.

Layout of ``runs/{id}/``:

    manifest.json            stage log, config snapshot, digests (commit point)
    labelspace.json          append-only category registry
    worlds/world.json        seed + config (regenerates the world)
    worlds/embeddings.aemb   image embedding pool
    detector-base.json       pretrained head (known categories)
    issues.json              issue-finder report
    retrieval.json           feeder output for the accepted category
    trainingset-r{n}.jsonl   assembled labels per round
    detector-r{n}.json       detector head after round n training
    scenarios-r{n}.json      verification scenarios per round
    cases/                   verification cases (mutable via review)
    ledger.jsonl             derived from manifest cost entries
    report.{json,tsv,txt}    written by `aide report`

Every stage writes its artifacts with atomic temp-then-rename, then commits
by rewriting the manifest; a crash before the commit leaves a replayable
stage whose rerun produces identical bytes, so cost entries and labels are
never duplicated. One writer per run is enforced with an advisory flock.
"""

from __future__ import annotations

import fcntl
import json
import os
import time
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path
from typing import Optional

from ..adapters import (
    CallLog,
    RemoteCaptioner,
    RemoteCropClassifier,
    RemoteEmbedder,
    RemoteProposer,
    RemoteScenarioGenerator,
    TrainingSchedule,
)
from ..core import LabelSpace, extend_label_space, load_label_space, save_label_space
from ..errors import CorruptManifest, StageOrderError
from ..evalcost import CostLedger, EvalReport, eval_report, render_report_table
from ..feeder import (
    EmbeddingStore,
    RetrievalResult,
    build_prompt,
    load_store,
    retrieve,
    save_store,
)
from ..finder import issue_scan, load_issue_report, save_issue_report
from ..fsio import atomic_write_text, sha256_bytes, sha256_file
from ..updater import (
    ORIGIN_HUMAN,
    ORIGIN_KNOWN,
    ORIGIN_ZSC,
    PseudoLabel,
    TrainingSet,
    assemble_training_set,
    classify_crops,
    known_pseudo_labels,
    load_training_set,
    propose_boxes,
    save_training_set,
)
from ..verifier import (
    STATE_FAILED,
    STATE_PASSED,
    STATE_PENDING,
    ScenarioDescription,
    build_cases,
    corrections_for_retraining,
    generate_scenarios,
    load_cases,
    record_verdict,
    save_case,
)
from ..worldsim import (
    CATEGORY_PALETTE,
    SimCaptioner,
    SimCropClassifier,
    SimDetector,
    SimDetectorState,
    SimEmbedder,
    SimProposer,
    SimScenarioGenerator,
    SimWorld,
    build_embedding_store,
    eval_records,
    generate_world,
    initial_label_space,
    load_world,
    pretrain_detector,
    save_world,
)
from .config import EngineConfig, config_digest
from .manifest import (
    STAGE_DONE,
    STAGE_FEED,
    STAGE_FIND_ISSUE,
    STAGE_RETRAIN,
    STAGE_UPDATE,
    STAGE_VERIFY,
    IterationRecord,
    RunManifest,
)


def _case_round(case_id: str) -> int:
    # ids look like "case-r{round}-{index:04d}"
    try:
        return int(case_id.split("-")[1].removeprefix("r"))
    except (IndexError, ValueError):
        return 0


@dataclass
class StageResult:
    outputs: dict  # relative path -> sha256
    notes: dict
    extra_entries: list  # LedgerEntry values beyond the gpu-hour charge


class EngineRun:
    """One run directory plus its in-memory working state."""

    def __init__(self, run_dir: Path, config: EngineConfig, manifest: RunManifest):
        self.run_dir = Path(run_dir)
        self.config = config
        self.manifest = manifest
        self.world: SimWorld = load_world(self.run_dir / "worlds" / "world.json")
        self._images = {img.id: img for img in self.world.images}
        self.store: EmbeddingStore = load_store(self.run_dir / "worlds" / "embeddings.aemb")
        self.label_space: LabelSpace = load_label_space(self.run_dir / "labelspace.json")
        self.call_log = CallLog()
        self._build_adapters()

    # ------------------------------------------------------------------
    # construction
    # ------------------------------------------------------------------

    @classmethod
    def create(cls, run_root: str | Path, run_id: str, config: EngineConfig) -> "EngineRun":
        """Initialize a run: world, embedding pool, label space, pretrained
        detector, and the known-AP baseline that forgetting is measured from."""
        run_dir = Path(run_root) / run_id
        if (run_dir / "manifest.json").exists():
            raise StageOrderError(f"run {run_id!r} already exists under {run_root}")
        (run_dir / "worlds").mkdir(parents=True, exist_ok=True)
        (run_dir / "cases").mkdir(parents=True, exist_ok=True)

        world = generate_world(config.world)
        save_world(world, run_dir / "worlds" / "world.json")
        store = build_embedding_store(world)
        save_store(store, run_dir / "worlds" / "embeddings.aemb")
        label_space = initial_label_space(world, config.num_known)
        save_label_space(label_space, run_dir / "labelspace.json")
        state, _ = pretrain_detector(world, label_space, config.schedule)
        atomic_write_text(
            run_dir / "detector-base.json",
            json.dumps(state.to_dict(), sort_keys=True) + "\n",
        )
        detector = SimDetector(world, state)
        baseline = eval_report(detector, eval_records(world, label_space), label_space)
        base_artifacts = {
            rel: sha256_file(run_dir / rel)
            for rel in ("worlds/world.json", "worlds/embeddings.aemb",
                        "labelspace.json", "detector-base.json")
        }
        manifest = RunManifest(
            run_id=run_id,
            config=config.to_dict(),
            base_artifacts=base_artifacts,
            baseline_known=baseline.known_avg,
            label_space_version=len(label_space),
        )
        manifest.save(run_dir)
        run = cls(run_dir, config, manifest)
        run._rewrite_ledger()
        return run

    @classmethod
    def resume(cls, run_root: str | Path, run_id: str) -> "EngineRun":
        """Rebuild in-memory state from disk, verifying every digest."""
        run_dir = Path(run_root) / run_id
        manifest = RunManifest.load(run_dir)
        manifest.verify_artifacts(run_dir)
        config = EngineConfig.from_dict(manifest.config)
        return cls(run_dir, config, manifest)

    def _build_adapters(self) -> None:
        remote = self.config.remote_config()
        if remote is None:
            self.captioner = SimCaptioner(self.world, self.call_log)
            self.embedder = SimEmbedder(self.world, self.call_log)
            self.proposer = SimProposer(self.world, self.call_log)
            self.zsc = SimCropClassifier(self.world, self.call_log)
            self.scenario_gen = SimScenarioGenerator(self.world, self.call_log)
        else:
            self.captioner = RemoteCaptioner(remote, self.call_log)
            self.embedder = RemoteEmbedder(remote, self.call_log)
            self.proposer = RemoteProposer(remote, self.call_log)
            self.zsc = RemoteCropClassifier(remote, self.call_log)
            self.scenario_gen = RemoteScenarioGenerator(remote, self.call_log)
        state = self._load_detector_state()
        completed_trainings = sum(
            1 for r in self.manifest.records if r.stage in (STAGE_UPDATE, STAGE_RETRAIN)
        )
        self.detector = SimDetector(self.world, state, self.call_log,
                                    train_round=completed_trainings)

    def _load_detector_state(self) -> SimDetectorState:
        latest = self.run_dir / "detector-base.json"
        for record in self.manifest.records:
            for rel in record.outputs:
                if rel.startswith("detector-r"):
                    latest = self.run_dir / rel
        with open(latest, "r", encoding="utf-8") as fh:
            return SimDetectorState.from_dict(json.load(fh))

    # ------------------------------------------------------------------
    # stage machine
    # ------------------------------------------------------------------

    def image_record(self, image_id: str):
        return self._images.get(image_id)

    def cases(self) -> dict:
        return load_cases(self.run_dir / "cases")

    def _latest_round_cases(self) -> dict:
        cases = self.cases()
        current = self.manifest.current_round()
        return {k: v for k, v in cases.items() if _case_round(k) == current}

    def next_stage(self) -> Optional[str]:
        latest = self._latest_round_cases()
        pending = any(c.state == STATE_PENDING for c in latest.values())
        failed = any(
            c.state == STATE_FAILED and c.corrections for c in latest.values()
        )
        return self.manifest.next_stage(
            has_pending_cases=pending,
            has_failed_with_corrections=failed,
            max_rounds=self.config.max_rounds,
        )

    def run_iteration(self, feed_category: Optional[str] = None) -> str:
        """Execute the next stage and commit it atomically. Returns the stage
        name that ran."""
        with self._writer_lock():
            stage = self.next_stage()
            if stage is None:
                raise StageOrderError("run is Done; no stage left to execute")
            started = time.monotonic()
            gpu_before = self.call_log.total_gpu_seconds()
            round_no = self._round_for(stage)
            if stage == STAGE_FIND_ISSUE:
                result = self._stage_find_issue()
            elif stage == STAGE_FEED:
                result = self._stage_feed(feed_category)
            elif stage == STAGE_UPDATE:
                result = self._stage_update()
            elif stage == STAGE_VERIFY:
                result = self._stage_verify(round_no)
            elif stage == STAGE_RETRAIN:
                result = self._stage_retrain(round_no)
            elif stage == STAGE_DONE:
                result = self._stage_done()
            else:  # pragma: no cover
                raise StageOrderError(f"unexpected stage {stage}")

            ledger = CostLedger(rates_cents=dict(self.config.rates_cents))
            gpu_delta = self.call_log.total_gpu_seconds() - gpu_before
            if gpu_delta > 0:
                ledger.charge("gpu_hour", Fraction(gpu_delta) / 3600, stage.lower())
            ledger.entries.extend(result.extra_entries)
            wall = 0.0 if self.config.headless else time.monotonic() - started
            prev = (self.manifest.records[-1].record_digest
                    if self.manifest.records else self.manifest.base_digest())
            inputs_digest = sha256_bytes(json.dumps(
                {"stage": stage, "round": round_no, "prev": prev,
                 "config": config_digest(self.config)},
                sort_keys=True).encode())
            outputs_digest = sha256_bytes(
                json.dumps(dict(sorted(result.outputs.items())), sort_keys=True).encode()
            )
            record = IterationRecord(
                stage=stage,
                round=round_no,
                inputs_digest=inputs_digest,
                outputs_digest=outputs_digest,
                outputs=result.outputs,
                wall_time=wall,
                cost_entries=tuple(e.to_dict() for e in ledger.entries),
                notes=result.notes,
            )
            self.manifest.append_record(record)
            self._rewrite_ledger()
            self.manifest.save(self.run_dir)
            return stage

    def run_until_done(self, feed_category: Optional[str] = None) -> list[str]:
        executed = []
        while True:
            stage = self.next_stage()
            if stage is None:
                return executed
            executed.append(self.run_iteration(feed_category=feed_category))
            feed_category = None

    def _round_for(self, stage: str) -> int:
        if stage == STAGE_RETRAIN:
            return self.manifest.current_round() + 1
        return self.manifest.current_round()

    def _writer_lock(self):
        lock_path = self.run_dir / ".lock"

        class _Lock:
            def __enter__(lock_self):
                lock_self.fh = open(lock_path, "w")
                try:
                    fcntl.flock(lock_self.fh, fcntl.LOCK_EX | fcntl.LOCK_NB)
                except BlockingIOError:
                    lock_self.fh.close()
                    raise StageOrderError(
                        f"another writer holds {lock_path}; one writer per run"
                    ) from None
                return lock_self

            def __exit__(lock_self, *exc):
                fcntl.flock(lock_self.fh, fcntl.LOCK_UN)
                lock_self.fh.close()
                return False

        return _Lock()

    # ------------------------------------------------------------------
    # stages
    # ------------------------------------------------------------------

    def _candidate_vocabulary(self) -> list[str]:
        vocab = set(CATEGORY_PALETTE)
        vocab.update(self.world.config.category_names)
        vocab.update(self.world.config.distractor_names)
        vocab.update(self.label_space.names())
        vocab.update(self.config.extra_vocabulary)
        return sorted(vocab)

    def _write_json(self, rel: str, payload) -> tuple[str, str]:
        path = self.run_dir / rel
        atomic_write_text(path, json.dumps(payload, indent=2, sort_keys=True) + "\n")
        return rel, sha256_file(path)

    def _stage_find_issue(self) -> StageResult:
        batch = self.world.image_ids()[: self.config.scan_batch]
        report = issue_scan(
            batch,
            self.captioner,
            self.detector,
            self.label_space,
            self._candidate_vocabulary(),
            trigger_min_mentions=self.config.trigger_min_mentions,
        )
        save_issue_report(report, self.run_dir / "issues.json")
        outputs = {"issues.json": sha256_file(self.run_dir / "issues.json")}
        notes: dict = {"candidates": len(report.candidates)}
        novel = report.novel()
        if novel and self.config.headless:
            # headless auto-accept: the strongest candidate extends the space;
            # interactive runs pick via `aide feed --category`
            accepted = novel[0]
            self.label_space = extend_label_space(self.label_space, accepted.name)
            save_label_space(self.label_space, self.run_dir / "labelspace.json")
            self.manifest.label_space_version = len(self.label_space)
            new_id = self.label_space.categories[-1].id
            notes.update({"accepted": accepted.name, "accepted_id": new_id,
                          "support": len(accepted.supporting_images)})
            outputs["labelspace.json"] = sha256_file(self.run_dir / "labelspace.json")
        return StageResult(outputs=outputs, notes=notes, extra_entries=[])

    def _accepted_category(self) -> tuple[str, int]:
        for record in reversed(self.manifest.records):
            if record.stage == STAGE_FIND_ISSUE and "accepted" in record.notes:
                return str(record.notes["accepted"]), int(record.notes["accepted_id"])
            if record.stage == STAGE_FEED and "category" in record.notes:
                return str(record.notes["category"]), int(record.notes["category_id"])
        raise StageOrderError(
            "no accepted novel category; run the scan in headless mode or pass "
            "an explicit category to the feed stage"
        )

    def _stage_feed(self, override: Optional[str]) -> StageResult:
        if override:
            if self.label_space.resolve(override) is None:
                self.label_space = extend_label_space(self.label_space, override)
                save_label_space(self.label_space, self.run_dir / "labelspace.json")
                self.manifest.label_space_version = len(self.label_space)
            name = override
            category_id = self.label_space.resolve(override)
        else:
            name, category_id = self._accepted_category()
        prompt = build_prompt(name)
        query = self.embedder.embed_text(prompt)
        result = retrieve(self.store, query, self.config.thresholds, query_text=prompt)
        rel, digest = self._write_json("retrieval.json", result.to_dict())
        outputs = {rel: digest}
        if override:
            outputs["labelspace.json"] = sha256_file(self.run_dir / "labelspace.json")
        return StageResult(
            outputs=outputs,
            notes={"category": name, "category_id": category_id,
                   "retrieved": len(result), "floor_applied": result.floor_applied},
            extra_entries=[],
        )

    def _feed_result(self) -> RetrievalResult:
        with open(self.run_dir / "retrieval.json", "r", encoding="utf-8") as fh:
            return RetrievalResult.from_dict(json.load(fh))

    def _save_detector(self, round_no: int) -> tuple[str, str]:
        rel = f"detector-r{round_no}.json"
        atomic_write_text(
            self.run_dir / rel,
            json.dumps(self.detector.state.to_dict(), sort_keys=True) + "\n",
        )
        return rel, sha256_file(self.run_dir / rel)

    def _stage_update(self) -> StageResult:
        name, category_id = self._accepted_category()
        self.detector.extend(category_id)
        retrieved = self._feed_result().ids()
        prompts = self.label_space.names()
        novel_labels: list[PseudoLabel] = []
        known_labels: list[PseudoLabel] = []
        for image_id in retrieved:
            image = self._images[image_id]
            proposals = propose_boxes(self.proposer, image, prompts)
            if not proposals:
                continue
            novel_labels.extend(
                classify_crops(self.zsc, image, proposals, self.label_space,
                               self.config.thresholds)
            )
            known_labels.extend(
                known_pseudo_labels(self.detector, image, self.label_space,
                                    self.config.thresholds)
            )
        ts = assemble_training_set(
            novel_labels, known_labels, [], category_id,
            self.config.thresholds, cap_ratio=self.config.cap_ratio,
        )
        save_training_set(ts, self.run_dir / "trainingset-r0.jsonl")
        self.detector.train(ts, self.config.schedule)
        det_rel, det_digest = self._save_detector(0)
        outputs = {
            "trainingset-r0.jsonl": sha256_file(self.run_dir / "trainingset-r0.jsonl"),
            det_rel: det_digest,
        }
        counts = ts.category_counts()
        return StageResult(
            outputs=outputs,
            notes={"labels": len(ts), "novel_labels": counts.get(category_id, 0),
                   "images": len(ts.entries)},
            extra_entries=[],
        )

    def _stage_verify(self, round_no: int) -> StageResult:
        name, _category_id = self._accepted_category()
        batch = generate_scenarios(self.scenario_gen, name, self.config.verify_scenarios)
        descriptions = list(batch)
        rel, digest = self._write_json(
            f"scenarios-r{round_no}.json",
            {"category": name, "complete": batch.complete,
             "descriptions": [d.to_dict() for d in descriptions]},
        )
        cases = build_cases(
            descriptions, self.store, self.embedder, self.detector,
            self.config.verify_k_images, id_prefix=f"case-r{round_no}",
        )
        if self.config.headless:
            # CI mode: every case auto-passes; interactive review uses `serve`
            cases = [record_verdict(c, STATE_PASSED, [], expected_revision=0) for c in cases]
        for case in cases:
            save_case(case, self.run_dir / "cases")
        ledger = CostLedger(rates_cents=dict(self.config.rates_cents))
        ledger.charge("llm_call", len(descriptions), "verify")  # metered at $0
        if round_no == 0:
            ledger.note_llm_flat("verify")
        return StageResult(
            outputs={rel: digest},
            notes={"cases": len(cases), "auto_passed": self.config.headless},
            extra_entries=list(ledger.entries),
        )

    def _stage_retrain(self, round_no: int) -> StageResult:
        previous_round = round_no - 1
        cases = {k: v for k, v in self.cases().items() if _case_round(k) == previous_round}
        corrections = corrections_for_retraining(cases.values())
        if not corrections:
            raise StageOrderError("retrain requested without failed-case corrections")
        prior_rel = f"trainingset-r{previous_round}.jsonl" if previous_round > 0 \
            else "trainingset-r0.jsonl"
        prior = load_training_set(self.run_dir / prior_rel)
        novel = [l for l in prior.all_labels() if l.origin == ORIGIN_ZSC]
        known = [l for l in prior.all_labels() if l.origin == ORIGIN_KNOWN]
        kept_human = [l for l in prior.all_labels() if l.origin == ORIGIN_HUMAN]
        human = kept_human + [
            PseudoLabel(image_id=c.image_id, detection=c.detection,
                        origin=ORIGIN_HUMAN, proposal_score=1.0)
            for c in corrections
        ]
        ts = assemble_training_set(
            novel, known, human, prior.target_category,
            self.config.thresholds, cap_ratio=self.config.cap_ratio,
        )
        rel = f"trainingset-r{round_no}.jsonl"
        save_training_set(ts, self.run_dir / rel)
        self.detector.train(ts, self.config.schedule)
        det_rel, det_digest = self._save_detector(round_no)
        ledger = CostLedger(rates_cents=dict(self.config.rates_cents))
        ledger.charge("box_label", len(corrections), "retrain")
        inspected = sum(len(c.image_ids) for c in cases.values())
        if inspected:
            ledger.charge("image_inspection", inspected, "retrain")
        return StageResult(
            outputs={rel: sha256_file(self.run_dir / rel), det_rel: det_digest},
            notes={"corrections": len(corrections), "labels": len(ts)},
            extra_entries=list(ledger.entries),
        )

    def _stage_done(self) -> StageResult:
        cases = self._latest_round_cases()
        ledger = CostLedger(rates_cents=dict(self.config.rates_cents))
        inspected = sum(len(c.image_ids) for c in cases.values())
        if inspected:
            ledger.charge("image_inspection", inspected, "done")
        passed = sum(1 for c in cases.values() if c.state == STATE_PASSED)
        return StageResult(
            outputs={},
            notes={"cases_passed": passed, "cases_total": len(cases)},
            extra_entries=list(ledger.entries),
        )

    # ------------------------------------------------------------------
    # derived artifacts
    # ------------------------------------------------------------------

    def ledger(self) -> CostLedger:
        ledger = CostLedger(rates_cents=dict(self.config.rates_cents))
        from ..evalcost import LedgerEntry

        ledger.entries = [LedgerEntry.from_dict(d) for d in self.manifest.all_cost_entries()]
        return ledger

    def _rewrite_ledger(self) -> None:
        atomic_write_text(self.run_dir / "ledger.jsonl", self.ledger().to_jsonl())

    def report(self) -> tuple[EvalReport, CostLedger]:
        records = eval_records(self.world, self.label_space)
        result = eval_report(
            self.detector, records, self.label_space,
            baseline_known=self.manifest.baseline_known,
        )
        ledger = self.ledger()
        tsv, pretty = render_report_table(result, ledger)
        self._write_json("report.json", result.to_dict())
        atomic_write_text(self.run_dir / "report.tsv", tsv)
        atomic_write_text(self.run_dir / "report.txt", pretty)
        return result, ledger
