"""Episode records and windowed success-rate / average-reward metrics."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .world import Terminal


@dataclass
class EpisodeRecord:
    episode: int
    target: tuple
    is_test: bool
    arrival: bool
    total_reward: float
    steps: int
    terminal: Terminal
    trajectory: list | None = field(default=None, repr=False)

    def __post_init__(self):
        self.terminal = Terminal(self.terminal)
        if self.arrival != (self.terminal is Terminal.ARRIVAL):
            raise ValueError("arrival flag must agree with the terminal kind")


@dataclass(frozen=True)
class MetricWindows:
    train: int = 200
    test: int = 100

    def __post_init__(self):
        if self.train < 1 or self.test < 1:
            raise ValueError("metric windows must be at least 1")


def _window(records, window: int):
    if not records:
        raise ValueError("no episode records to summarize")
    if window < 1:
        raise ValueError("window must be at least 1")
    return records[-window:], len(records) < window


def success_rate(records, window: int = 100) -> tuple[float, bool]:
    """Arrival fraction over the last ``window`` records and a provisional flag.

    The flag is set when fewer than ``window`` records exist.
    """
    recent, provisional = _window(records, window)
    return sum(r.arrival for r in recent) / len(recent), provisional


def average_reward(records, window: int = 100) -> tuple[float, bool]:
    recent, provisional = _window(records, window)
    return float(np.mean([r.total_reward for r in recent])), provisional


def terminal_breakdown(records) -> dict:
    counts = {t.value: 0 for t in Terminal if t is not Terminal.NONE}
    for r in records:
        counts[r.terminal.value] = counts.get(r.terminal.value, 0) + 1
    return counts
