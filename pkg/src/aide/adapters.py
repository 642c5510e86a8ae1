"""Adapter contracts for the five external model capabilities the engine
consumes (captioning, embedding, box proposal, crop classification, scenario
generation) plus the trainable detector, and an HTTP client implementation
for each remote-service capability.

Adapters operate on image *ids*; pixel transport is the remote service's
concern. Simulated implementations live in ``aide.worldsim`` behind the same
contracts, so every pipeline test can run without model weights. Adapter
handles are shareable across workers; the remote clients hold no mutable
state beyond the call log, which takes a lock per append.
"""

from __future__ import annotations

import json
import os
import threading
import time
import urllib.error
import urllib.request
from dataclasses import dataclass
from fractions import Fraction
from typing import Optional, Protocol, Sequence, runtime_checkable

import numpy as np

from .core import BoundingBox, Detection
from .errors import AdapterUnavailable

# Exponential backoff base for remote retries; tests shrink this.
BACKOFF_BASE_S = 0.2


@dataclass(frozen=True)
class TrainingSchedule:
    """Detector training knobs passed through to the adapter."""

    iterations: int = 3000
    learning_rate: float = 5e-4
    batch_size: int = 4
    weight_decay: float = 1e-4

    def to_dict(self) -> dict:
        return {
            "iterations": self.iterations,
            "learning_rate": self.learning_rate,
            "batch_size": self.batch_size,
            "weight_decay": self.weight_decay,
        }

    @classmethod
    def from_dict(cls, d) -> "TrainingSchedule":
        return cls(
            iterations=int(d.get("iterations", 3000)),
            learning_rate=float(d.get("learning_rate", 5e-4)),
            batch_size=int(d.get("batch_size", 4)),
            weight_decay=float(d.get("weight_decay", 1e-4)),
        )


@runtime_checkable
class CaptionerAdapter(Protocol):
    def describe(self, image_id: str) -> str: ...


@runtime_checkable
class EmbedderAdapter(Protocol):
    def embed_text(self, text: str) -> np.ndarray: ...

    def embed_image(self, image_id: str) -> np.ndarray: ...


@runtime_checkable
class ProposerAdapter(Protocol):
    def propose(self, image_id: str, prompts: Sequence[str]) -> list[tuple[BoundingBox, str, float]]: ...


@runtime_checkable
class CropClassifierAdapter(Protocol):
    def classify(self, image_id: str, box: BoundingBox, labels: Sequence[str]) -> list[float]: ...


@runtime_checkable
class ScenarioGeneratorAdapter(Protocol):
    def generate(self, category_name: str, n: int) -> list[str]: ...


@runtime_checkable
class TrainableDetectorAdapter(Protocol):
    def detect(self, image_id: str) -> list[Detection]: ...

    def train(self, training_set, schedule: TrainingSchedule) -> Fraction:
        """Train in place; returns elapsed GPU-hours as an exact fraction."""
        ...


# ---------------------------------------------------------------------------
# call accounting
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CallRecord:
    kind: str  # adapter kind, e.g. "captioner"
    op: str
    wall_s: float
    payload_bytes: int
    gpu_seconds: Fraction


class CallLog:
    """Thread-safe append-only record of adapter calls.

    ``gpu_seconds`` feeds the cost ledger; simulated adapters report a fixed
    deterministic figure per call so runs stay reproducible, remote adapters
    report measured wall time.
    """

    def __init__(self) -> None:
        self._records: list[CallRecord] = []
        self._lock = threading.Lock()

    def record(self, kind: str, op: str, wall_s: float, payload_bytes: int,
               gpu_seconds: Fraction) -> None:
        with self._lock:
            self._records.append(CallRecord(kind, op, wall_s, payload_bytes, gpu_seconds))

    def records(self) -> list[CallRecord]:
        with self._lock:
            return list(self._records)

    def __len__(self) -> int:
        with self._lock:
            return len(self._records)

    def total_gpu_seconds(self) -> Fraction:
        with self._lock:
            return sum((r.gpu_seconds for r in self._records), Fraction(0))


# ---------------------------------------------------------------------------
# remote clients
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class RemoteAdapterConfig:
    base_url: str
    timeout_s: float = 30.0
    retries: int = 2
    token_env: Optional[str] = None

    def __post_init__(self) -> None:
        if self.timeout_s <= 0:
            raise ValueError("timeout_s must be > 0")
        if self.retries < 0:
            raise ValueError("retries must be >= 0")


class _RemoteBase:
    kind = "remote"

    def __init__(self, config: RemoteAdapterConfig, call_log: Optional[CallLog] = None):
        self.config = config
        self.call_log = call_log

    def _headers(self) -> dict:
        headers = {"Content-Type": "application/json"}
        if self.config.token_env:
            token = os.environ.get(self.config.token_env)
            if token:
                headers["Authorization"] = f"Bearer {token}"
        return headers

    def _request(self, method: str, path: str, payload: Optional[dict]) -> dict:
        url = self.config.base_url.rstrip("/") + path
        body = json.dumps(payload).encode("utf-8") if payload is not None else None
        last_error: Exception | None = None
        started = time.monotonic()
        for attempt in range(self.config.retries + 1):
            if attempt:
                time.sleep(BACKOFF_BASE_S * (2 ** (attempt - 1)))
            req = urllib.request.Request(url, data=body, headers=self._headers(), method=method)
            try:
                with urllib.request.urlopen(req, timeout=self.config.timeout_s) as resp:
                    raw = resp.read()
                result = json.loads(raw.decode("utf-8"))
                wall = time.monotonic() - started
                if self.call_log is not None:
                    size = len(body or b"") + len(raw)
                    self.call_log.record(self.kind, path, wall, size,
                                         Fraction(wall).limit_denominator(10**6))
                return result
            except (urllib.error.URLError, urllib.error.HTTPError, TimeoutError, OSError,
                    json.JSONDecodeError) as exc:
                last_error = exc
        raise AdapterUnavailable(f"{method} {url} failed after {self.config.retries + 1} attempts: {last_error}")

    def _post(self, path: str, payload: dict) -> dict:
        return self._request("POST", path, payload)

    def _get(self, path: str) -> dict:
        return self._request("GET", path, None)

    def meta(self) -> dict:
        """Service metadata; carries the negotiated embedding dimension."""
        return self._get("/meta")


class RemoteCaptioner(_RemoteBase):
    kind = "captioner"

    def describe(self, image_id: str) -> str:
        return str(self._post("/caption", {"image_id": image_id})["caption"])


class RemoteEmbedder(_RemoteBase):
    kind = "embedder"

    def embed_text(self, text: str) -> np.ndarray:
        out = self._post("/embed", {"kind": "text", "payload": text})
        return np.asarray(out["vector"], dtype=np.float64)

    def embed_image(self, image_id: str) -> np.ndarray:
        out = self._post("/embed", {"kind": "image", "payload": image_id})
        return np.asarray(out["vector"], dtype=np.float64)


class RemoteProposer(_RemoteBase):
    kind = "proposer"

    def propose(self, image_id: str, prompts: Sequence[str]) -> list[tuple[BoundingBox, str, float]]:
        out = self._post("/propose", {"image_id": image_id, "prompts": list(prompts)})
        proposals = []
        for b in out["boxes"]:
            box = BoundingBox(float(b["x_min"]), float(b["y_min"]), float(b["x_max"]), float(b["y_max"]))
            proposals.append((box, str(b["label"]), float(b["score"])))
        return proposals


class RemoteCropClassifier(_RemoteBase):
    kind = "crop_classifier"

    def classify(self, image_id: str, box: BoundingBox, labels: Sequence[str]) -> list[float]:
        out = self._post(
            "/classify",
            {"image_id": image_id, "box": box.to_dict(), "labels": list(labels)},
        )
        scores = [float(s) for s in out["scores"]]
        if len(scores) != len(labels):
            raise AdapterUnavailable(
                f"/classify returned {len(scores)} scores for {len(labels)} labels"
            )
        return scores


class RemoteScenarioGenerator(_RemoteBase):
    kind = "scenario_generator"

    def generate(self, category_name: str, n: int) -> list[str]:
        out = self._post("/scenarios", {"category": category_name, "n": int(n)})
        descriptions = [str(d) for d in out["descriptions"]]
        if len(descriptions) != n or any(not d for d in descriptions):
            raise AdapterUnavailable(f"/scenarios returned a bad batch for n={n}")
        return descriptions
