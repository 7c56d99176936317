"""Games, event labels, and the per-game event catalogue.

Each supported game exposes a subset of the eight labels; ``Unknown`` is an
open game name used for footage from titles outside the catalogue and
accepts every label.
"""

from __future__ import annotations

import enum

from .errors import UnknownLabel

__all__ = ["GameId", "EventLabel", "GAME_EVENTS", "events_for", "parse_label", "parse_game"]


class EventLabel(enum.Enum):
    KILL = "Kill"
    DEATH = "Death"
    GRENADE_THROW = "GrenadeThrow"
    RELOAD = "Reload"
    BOMB_PLANTED = "BombPlanted"
    KNOCKED_DOWN = "KnockedDown"
    POWER_USE = "PowerUse"
    BACKGROUND = "Background"

    @property
    def prompt_text(self) -> str:
        """Lower-case, space-separated form used inside prompt strings."""
        out = []
        for ch in self.value:
            if ch.isupper() and out:
                out.append(" ")
            out.append(ch.lower())
        return "".join(out)


class GameId(enum.Enum):
    CSGO = "CSGO"
    PUBG = "PUBG"
    VALORANT = "Valorant"
    OW2 = "OW2"
    FORTNITE = "Fortnite"
    UNKNOWN = "Unknown"


_E = EventLabel

# Which events exist per game; absent combinations are annotation errors.
GAME_EVENTS: dict[GameId, tuple[EventLabel, ...]] = {
    GameId.CSGO: (_E.KILL, _E.DEATH, _E.GRENADE_THROW, _E.RELOAD, _E.BOMB_PLANTED, _E.BACKGROUND),
    GameId.PUBG: (_E.KILL, _E.DEATH, _E.GRENADE_THROW, _E.RELOAD, _E.KNOCKED_DOWN, _E.BACKGROUND),
    GameId.VALORANT: (_E.KILL, _E.DEATH, _E.RELOAD, _E.BOMB_PLANTED, _E.POWER_USE, _E.BACKGROUND),
    GameId.OW2: (_E.KILL, _E.DEATH, _E.POWER_USE, _E.BACKGROUND),
    GameId.FORTNITE: (_E.KILL, _E.DEATH, _E.RELOAD, _E.KNOCKED_DOWN, _E.BACKGROUND),
}


def events_for(game: GameId) -> tuple[EventLabel, ...]:
    """Labels valid for ``game``; Unknown admits everything."""
    if game is GameId.UNKNOWN:
        return tuple(EventLabel)
    return GAME_EVENTS[game]


def _normalize(text: str) -> str:
    return "".join(ch for ch in text.lower() if ch.isalnum())


_LABEL_BY_KEY = {_normalize(label.value): label for label in EventLabel}


def parse_label(text: str, game: GameId) -> EventLabel:
    """Map a free-form annotation string to a label valid for ``game``.

    Spacing, case, hyphens and underscores are ignored ("knocked down",
    "Knocked_Down" and "knockeddown" all parse). Raises UnknownLabel for
    unrecognised strings and for labels absent from the game's catalogue.
    """
    label = _LABEL_BY_KEY.get(_normalize(text))
    if label is None or label not in events_for(game):
        raise UnknownLabel(text, game.value)
    return label


def parse_game(text: str) -> GameId:
    for game in GameId:
        if game.value.lower() == text.strip().lower():
            return game
    raise UnknownLabel(text, "<game>")
