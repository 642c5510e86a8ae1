"""Run orchestration: configuration, the resumable stage machine, the review
HTTP service, and the command-line interface."""

from .config import EngineConfig, load_config, parse_config
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
from .runner import EngineRun

__all__ = [
    "EngineConfig",
    "EngineRun",
    "IterationRecord",
    "RunManifest",
    "STAGE_DONE",
    "STAGE_FEED",
    "STAGE_FIND_ISSUE",
    "STAGE_RETRAIN",
    "STAGE_UPDATE",
    "STAGE_VERIFY",
    "load_config",
    "parse_config",
]
