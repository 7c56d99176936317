"""Annotated events, VIA project parsing, and reproducible dataset manifests.

The manifest is the unit of reproducibility: built from validated events plus
sampled backgrounds under a fixed seed, serialized with sorted keys and a
trailing newline so equality is a byte comparison.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass

from . import seeds
from .catalogue import EventLabel, GameId, parse_game, parse_label
from .errors import DurationTooShort, MalformedJson, NegativeInterval

logger = logging.getLogger(__name__)

MANIFEST_VERSION = "1"
TRAIN_FRACTION = 0.8


@dataclass(frozen=True)
class AnnotatedEvent:
    """A labeled time interval in one video of one game."""

    video: str
    start_s: float
    end_s: float
    label: EventLabel
    game: GameId

    def __post_init__(self):
        if self.start_s < 0 or self.end_s < self.start_s:
            raise NegativeInterval(
                f"bad interval [{self.start_s}, {self.end_s}] in {self.video!r}"
            )

    @property
    def interval(self) -> tuple[float, float]:
        return (self.start_s, self.end_s)


@dataclass(frozen=True)
class ClipRef:
    """One-second training clip derived from an event or sampled background."""

    video: str
    clip_start_s: float
    label: EventLabel
    game: GameId
    split: str  # "train" | "test"


@dataclass(frozen=True)
class DatasetManifest:
    seed: int
    entries: tuple[ClipRef, ...]
    version: str = MANIFEST_VERSION


def parse_via(json_bytes: bytes, game: GameId) -> list[AnnotatedEvent]:
    """Extract temporal-segment annotations from a VIA-3 project export.

    Only the temporal-segment subset is read: each metadata entry with a
    two-element ``z`` span becomes one event, labeled by the first value of
    its ``av`` attribute map. Unknown labels raise instead of being dropped.
    """
    try:
        project = json.loads(json_bytes)
    except (ValueError, UnicodeDecodeError) as exc:
        raise MalformedJson(f"not a VIA project: {exc}") from exc
    if not isinstance(project, dict):
        raise MalformedJson("VIA project root must be an object")

    files = project.get("file", {})
    if not isinstance(files, dict):
        raise MalformedJson("VIA 'file' section must be an object")
    names = {}
    for fid, entry in files.items():
        if not isinstance(entry, dict) or "fname" not in entry:
            raise MalformedJson(f"VIA file entry {fid!r} lacks fname")
        names[str(fid)] = entry["fname"]

    metadata = project.get("metadata", {})
    if not isinstance(metadata, dict):
        raise MalformedJson("VIA 'metadata' section must be an object")

    events = []
    for mid, record in sorted(metadata.items()):
        if not isinstance(record, dict):
            raise MalformedJson(f"metadata entry {mid!r} is not an object")
        span = record.get("z", [])
        if len(span) != 2:
            continue  # not a temporal segment (point marks, spatial regions)
        vid = str(record.get("vid", ""))
        if vid not in names:
            raise MalformedJson(f"metadata entry {mid!r} references unknown file {vid!r}")
        values = record.get("av", {})
        if not isinstance(values, dict) or not values:
            raise MalformedJson(f"metadata entry {mid!r} has no label attribute")
        raw_label = values[sorted(values)[0]]
        label = parse_label(str(raw_label), game)
        start, end = float(span[0]), float(span[1])
        events.append(AnnotatedEvent(names[vid], start, end, label, game))
    return events


def event_to_clip(event: AnnotatedEvent, video_duration_s: float, split: str = "train") -> ClipRef:
    """One-second clip centered at the event midpoint, clamped into the video."""
    if video_duration_s < 1.0:
        raise DurationTooShort(
            f"{event.video!r} is {video_duration_s}s long; need at least 1s"
        )
    midpoint = 0.5 * (event.start_s + event.end_s)
    start = min(max(midpoint - 0.5, 0.0), video_duration_s - 1.0)
    return ClipRef(event.video, start, event.label, event.game, split)


def build_manifest(
    events: list[AnnotatedEvent],
    backgrounds: list[AnnotatedEvent],
    seed: int,
    durations: dict[str, float] | None = None,
) -> DatasetManifest:
    """Stratified 80/20 split over one clip per event, reproducible by seed.

    Strata are (game, label) pairs, each shuffled by its own seed-derived
    stream; a stratum of fewer than two clips goes wholly to train. When
    ``durations`` omits a video the clip is clamped against the event end
    instead of the true duration.
    """
    durations = durations or {}
    clips = []
    for event in list(events) + list(backgrounds):
        duration = durations.get(event.video, max(event.end_s, 1.0))
        clips.append(event_to_clip(event, duration))

    strata: dict[tuple[str, str], list[ClipRef]] = {}
    for clip in clips:
        strata.setdefault((clip.game.value, clip.label.value), []).append(clip)

    entries = []
    for (game, label), members in sorted(strata.items()):
        members.sort(key=lambda c: (c.video, c.clip_start_s))
        n = len(members)
        if n < 2:
            logger.warning("stratum (%s, %s) has %d clip(s); all go to train", game, label, n)
            n_test = 0
        else:
            n_test = int(round(n * (1.0 - TRAIN_FRACTION)))
            n_test = min(n_test, n - 1)
        rng = seeds.stream(seed, "split", game, label)
        order = rng.permutation(n)
        test_idx = set(order[:n_test].tolist())
        for i, clip in enumerate(members):
            split = "test" if i in test_idx else "train"
            entries.append(ClipRef(clip.video, clip.clip_start_s, clip.label, clip.game, split))

    entries.sort(key=lambda c: (c.game.value, c.label.value, c.video, c.clip_start_s))
    return DatasetManifest(seed=seed, entries=tuple(entries))


def manifest_to_json(manifest: DatasetManifest) -> str:
    payload = {
        "version": manifest.version,
        "seed": manifest.seed,
        "entries": [
            {
                "video": e.video,
                "clip_start_s": e.clip_start_s,
                "label": e.label.value,
                "game": e.game.value,
                "split": e.split,
            }
            for e in manifest.entries
        ],
    }
    return json.dumps(payload, sort_keys=True, ensure_ascii=False) + "\n"


def manifest_from_json(text: str | bytes) -> DatasetManifest:
    try:
        payload = json.loads(text)
        entries = tuple(
            ClipRef(
                video=e["video"],
                clip_start_s=float(e["clip_start_s"]),
                label=EventLabel(e["label"]),
                game=parse_game(e["game"]),
                split=e["split"],
            )
            for e in payload["entries"]
        )
        return DatasetManifest(
            seed=int(payload["seed"]), entries=entries, version=payload["version"]
        )
    except (ValueError, KeyError, TypeError) as exc:
        raise MalformedJson(f"bad manifest: {exc}") from exc


def events_to_json(events: list[AnnotatedEvent]) -> str:
    payload = [
        {
            "video": e.video,
            "start_s": e.start_s,
            "end_s": e.end_s,
            "label": e.label.value,
            "game": e.game.value,
        }
        for e in events
    ]
    return json.dumps(payload, sort_keys=True, ensure_ascii=False) + "\n"


def events_from_json(text: str | bytes) -> list[AnnotatedEvent]:
    try:
        payload = json.loads(text)
        return [
            AnnotatedEvent(
                video=e["video"],
                start_s=float(e["start_s"]),
                end_s=float(e["end_s"]),
                label=EventLabel(e["label"]),
                game=parse_game(e["game"]),
            )
            for e in payload
        ]
    except (ValueError, KeyError, TypeError) as exc:
        raise MalformedJson(f"bad events file: {exc}") from exc
