"""AIDE: a self-improving data engine for open-world object detection.

The engine closes a loop of five stages: find label-space gaps from image
captions, retrieve candidate images by text-guided embedding search,
auto-label them with two-stage pseudo-labeling, continually retrain a
detector without forgetting the known categories, and verify the result
through generated scenarios reviewed by a human. Every stage books its
dollar cost on a ledger.

Real vision-language models are consumed through adapter interfaces; the
``worldsim`` module provides deterministic simulated backends so the whole
loop runs at desk scale.
"""

__version__ = "0.1.0"

from .errors import AideError

__all__ = ["AideError", "__version__"]
