"""Engine configuration: a TOML-like flat key-value format with sections
mirroring the type names ([world], [thresholds], [schedule], [engine],
[rates], [adapters]).

The parser covers the flat subset this engine needs (scalars, quoted
strings, booleans, and one-line lists); nothing nested.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Optional

from ..adapters import RemoteAdapterConfig, TrainingSchedule
from ..core import EngineThresholds
from ..errors import ConfigError
from ..evalcost import DEFAULT_RATES_CENTS
from ..worldsim import DEFAULT_DISTRACTORS, SimWorldConfig

DEFAULT_SCAN_BATCH = 80
DEFAULT_MAX_ROUNDS = 3
DEFAULT_NUM_KNOWN = 8
DEFAULT_VERIFY_SCENARIOS = 10
DEFAULT_VERIFY_K_IMAGES = 1


@dataclass(frozen=True)
class EngineConfig:
    world: SimWorldConfig = field(default_factory=SimWorldConfig)
    thresholds: EngineThresholds = field(default_factory=EngineThresholds)
    schedule: TrainingSchedule = field(default_factory=TrainingSchedule)
    rates_cents: dict = field(default_factory=lambda: dict(DEFAULT_RATES_CENTS))
    headless: bool = True
    max_rounds: int = DEFAULT_MAX_ROUNDS
    scan_batch: int = DEFAULT_SCAN_BATCH
    num_known: int = DEFAULT_NUM_KNOWN
    verify_scenarios: int = DEFAULT_VERIFY_SCENARIOS
    verify_k_images: int = DEFAULT_VERIFY_K_IMAGES
    trigger_min_mentions: int = 3
    cap_ratio: float = 2.0
    extra_vocabulary: tuple[str, ...] = ()
    adapter_url: Optional[str] = None
    adapter_timeout_s: float = 30.0
    adapter_retries: int = 2
    token_env: Optional[str] = None

    def __post_init__(self) -> None:
        if not (0 < self.num_known <= self.world.num_categories):
            raise ConfigError(
                f"num_known={self.num_known} outside 1..{self.world.num_categories}"
            )
        if self.max_rounds < 0 or self.scan_batch < 1:
            raise ConfigError("max_rounds must be >= 0 and scan_batch >= 1")
        if self.verify_scenarios < 1 or self.verify_k_images < 1:
            raise ConfigError("verify_scenarios and verify_k_images must be >= 1")

    def remote_config(self) -> Optional[RemoteAdapterConfig]:
        if not self.adapter_url:
            return None
        return RemoteAdapterConfig(
            base_url=self.adapter_url,
            timeout_s=self.adapter_timeout_s,
            retries=self.adapter_retries,
            token_env=self.token_env,
        )

    def to_dict(self) -> dict:
        return {
            "world": self.world.to_dict(),
            "thresholds": self.thresholds.to_dict(),
            "schedule": self.schedule.to_dict(),
            "rates_cents": dict(self.rates_cents),
            "engine": {
                "headless": self.headless,
                "max_rounds": self.max_rounds,
                "scan_batch": self.scan_batch,
                "num_known": self.num_known,
                "verify_scenarios": self.verify_scenarios,
                "verify_k_images": self.verify_k_images,
                "trigger_min_mentions": self.trigger_min_mentions,
                "cap_ratio": self.cap_ratio,
                "extra_vocabulary": list(self.extra_vocabulary),
                "adapter_url": self.adapter_url,
                "adapter_timeout_s": self.adapter_timeout_s,
                "adapter_retries": self.adapter_retries,
                "token_env": self.token_env,
            },
        }

    @classmethod
    def from_dict(cls, doc: Mapping) -> "EngineConfig":
        engine = dict(doc.get("engine", {}))
        if "extra_vocabulary" in engine:
            engine["extra_vocabulary"] = tuple(engine["extra_vocabulary"])
        return cls(
            world=SimWorldConfig.from_dict(doc.get("world", {})),
            thresholds=EngineThresholds.from_dict(doc.get("thresholds", {})),
            schedule=TrainingSchedule.from_dict(doc.get("schedule", {})),
            rates_cents=dict(doc.get("rates_cents", DEFAULT_RATES_CENTS)),
            **engine,
        )


def _parse_value(raw: str, path: str, lineno: int):
    raw = raw.strip()
    if raw.startswith("[") and raw.endswith("]"):
        inner = raw[1:-1].strip()
        if not inner:
            return []
        return [_parse_value(part, path, lineno) for part in inner.split(",")]
    if raw.startswith('"') and raw.endswith('"') and len(raw) >= 2:
        return raw[1:-1]
    if raw.lower() in ("true", "false"):
        return raw.lower() == "true"
    try:
        if any(c in raw for c in ".eE") and not raw.lstrip("+-").isdigit():
            return float(raw)
        return int(raw)
    except ValueError:
        raise ConfigError(f"{path}:{lineno}: cannot parse value {raw!r}") from None


def parse_config_text(text: str, path: str = "<config>") -> dict:
    """Parse the flat TOML-like format into {section: {key: value}}."""
    sections: dict[str, dict] = {}
    current: Optional[str] = None
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if stripped.startswith("[") and stripped.endswith("]"):
            current = stripped[1:-1].strip()
            if not current:
                raise ConfigError(f"{path}:{lineno}: empty section name")
            sections.setdefault(current, {})
            continue
        if "=" not in stripped:
            raise ConfigError(f"{path}:{lineno}: expected key = value, got {stripped!r}")
        if current is None:
            raise ConfigError(f"{path}:{lineno}: key outside any [section]")
        key, raw = stripped.split("=", 1)
        sections[current][key.strip()] = _parse_value(raw, path, lineno)
    return sections


_WORLD_KEYS = {
    "seed", "embedding_dim", "num_categories", "prototype_separation", "within_noise",
    "num_images", "objects_per_image", "captioner_recall", "captioner_hallucination",
    "proposer_recall", "box_jitter", "false_positive_rate", "zsc_context_noise",
    "image_width", "image_height", "category_names", "distractor_names",
}
_ENGINE_KEYS = {
    "headless", "max_rounds", "scan_batch", "num_known", "verify_scenarios",
    "verify_k_images", "trigger_min_mentions", "cap_ratio", "extra_vocabulary",
}
_ADAPTER_KEYS = {"base_url", "timeout_s", "retries", "token_env"}


def parse_config(text: str, path: str = "<config>") -> EngineConfig:
    sections = parse_config_text(text, path)
    try:
        world_kwargs = {}
        for key, value in sections.get("world", {}).items():
            if key not in _WORLD_KEYS:
                raise ConfigError(f"{path}: unknown [world] key {key!r}")
            if key in ("objects_per_image", "category_names", "distractor_names"):
                value = tuple(value)
            world_kwargs[key] = value
        thresholds = EngineThresholds.from_dict(sections.get("thresholds", {}))
        schedule = TrainingSchedule.from_dict(sections.get("schedule", {}))
        rates = dict(DEFAULT_RATES_CENTS)
        for key, value in sections.get("rates", {}).items():
            if not key.endswith("_cents"):
                raise ConfigError(f"{path}: [rates] keys end in _cents, got {key!r}")
            rates[key.removesuffix("_cents")] = int(value)
        engine_kwargs = {}
        for key, value in sections.get("engine", {}).items():
            if key not in _ENGINE_KEYS:
                raise ConfigError(f"{path}: unknown [engine] key {key!r}")
            if key == "extra_vocabulary":
                value = tuple(str(v) for v in value)
            engine_kwargs[key] = value
        adapters = sections.get("adapters", {})
        for key in adapters:
            if key not in _ADAPTER_KEYS:
                raise ConfigError(f"{path}: unknown [adapters] key {key!r}")
        return EngineConfig(
            world=SimWorldConfig(**world_kwargs),
            thresholds=thresholds,
            schedule=schedule,
            rates_cents=rates,
            adapter_url=adapters.get("base_url") or None,
            adapter_timeout_s=float(adapters.get("timeout_s", 30.0)),
            adapter_retries=int(adapters.get("retries", 2)),
            token_env=adapters.get("token_env") or None,
            **engine_kwargs,
        )
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{path}: {exc}") from exc


def load_config(path: str | Path) -> EngineConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    return parse_config(path.read_text(encoding="utf-8"), str(path))


def config_digest(config: EngineConfig) -> str:
    from ..fsio import sha256_bytes

    return sha256_bytes(json.dumps(config.to_dict(), sort_keys=True).encode("utf-8"))
