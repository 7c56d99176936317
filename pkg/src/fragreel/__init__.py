"""Desk-scale gameplay-highlight pipeline.

Parses temporal event annotations, samples background intervals from the
gaps, preprocesses one-second clips, classifies them with a prompt-driven
video/text model, and turns per-second predictions into windowed event
detections and a highlight edit decision list. Includes finetuning,
post-training int8 quantization, and classification metrics.
"""

__version__ = "0.1.0"

from .catalogue import GAME_EVENTS, EventLabel, GameId, events_for
from .errors import ConfigError, DataError, FragreelError

__all__ = [
    "__version__",
    "EventLabel",
    "GameId",
    "GAME_EVENTS",
    "events_for",
    "FragreelError",
    "ConfigError",
    "DataError",
]
