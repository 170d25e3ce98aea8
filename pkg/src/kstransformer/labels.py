"""The four emotion classes and their fixed integer ids."""

from __future__ import annotations

from enum import IntEnum


class EmotionLabel(IntEnum):
    ANGRY = 0
    NEUTRAL = 1
    HAPPY = 2
    SAD = 3

    @property
    def label_name(self) -> str:
        return self.name.lower()

    @classmethod
    def from_name(cls, name: str) -> "EmotionLabel":
        return cls[name.upper()]


EMOTIONS: tuple[str, ...] = tuple(e.label_name for e in EmotionLabel)
