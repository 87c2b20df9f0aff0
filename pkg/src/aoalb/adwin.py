"""ADWIN adaptive-window change detector.

The window is stored as an exponential histogram: level ``i`` holds at most
``max_buckets`` buckets of ``2**i`` observations, each summarised by its sum
and its sum of squared deviations.  Every ``clock`` updates the detector tests
all split points of the window and drops the oldest bucket while the two
sub-window means differ by more than the adaptive threshold.
"""
from __future__ import annotations

import math
from collections import deque

from .errors import InvalidDelta


class Adwin:
    def __init__(self, delta: float = 0.002, clock: int = 32, max_buckets: int = 5, min_window: int = 5,
                 grace_period: int = 10):
        if not 0 < delta < 1:
            raise InvalidDelta(f"delta must lie in (0, 1), got {delta}")
        self.delta = delta
        self.clock = clock
        self.max_buckets = max_buckets
        self.min_window = min_window
        self.grace_period = grace_period
        # rows[i]: deque of [total, m2] for buckets of 2**i items, oldest on the left
        self.rows: list[deque] = [deque()]
        self.width = 0
        self.total = 0.0
        self.m2 = 0.0
        self.ticks = 0
        self.checks = 0
        self.drift_detected = False

    @property
    def estimation(self) -> float:
        return self.total / self.width if self.width else 0.0

    @property
    def variance(self) -> float:
        return self.m2 / self.width if self.width else 0.0

    def update(self, value: float) -> bool:
        """Add one observation; True when a change was detected at this step."""
        value = float(value)
        if self.width:
            mean = self.total / self.width
            self.m2 += self.width * (value - mean) ** 2 / (self.width + 1)
        self.width += 1
        self.total += value
        self.rows[0].append([value, 0.0])
        self._compress()
        self.ticks += 1
        self.drift_detected = False
        if self.ticks % self.clock == 0 and self.width > self.grace_period:
            self.checks += 1
            while self._cut_once():
                self.drift_detected = True
        return self.drift_detected

    def _compress(self):
        level = 0
        while len(self.rows[level]) > self.max_buckets:
            if level + 1 == len(self.rows):
                self.rows.append(deque())
            t1, v1 = self.rows[level].popleft()
            t2, v2 = self.rows[level].popleft()
            n = 2 ** level
            merged = v1 + v2 + n * n * (t1 / n - t2 / n) ** 2 / (2 * n)
            self.rows[level + 1].append([t1 + t2, merged])
            level += 1

    def _drop_oldest(self):
        level = len(self.rows) - 1
        total, m2 = self.rows[level].popleft()
        n = 2 ** level
        self.width -= n
        self.total -= total
        if self.width:
            self.m2 -= m2 + n * self.width * (total / n - self.total / self.width) ** 2 / (n + self.width)
            self.m2 = max(self.m2, 0.0)
        else:
            self.m2 = 0.0
        while len(self.rows) > 1 and not self.rows[-1]:
            self.rows.pop()

    def _cut_once(self) -> bool:
        """Test every split point, oldest first; drop the oldest bucket on a cut."""
        if self.width < 2 * self.min_window:
            return False
        n0, u0 = 0, 0.0
        n1, u1 = self.width, self.total
        log_term = math.log(2.0 * math.log(self.width) / self.delta)
        var = self.variance
        for level in range(len(self.rows) - 1, -1, -1):
            size = 2 ** level
            for total, _ in self.rows[level]:
                n0 += size
                n1 -= size
                u0 += total
                u1 -= total
                if n1 < self.min_window:
                    return False
                if n0 < self.min_window:
                    continue
                m = 1.0 / (n0 - self.min_window + 1) + 1.0 / (n1 - self.min_window + 1)
                eps = math.sqrt(2.0 * m * var * log_term) + 2.0 / 3.0 * log_term * m
                if abs(u0 / n0 - u1 / n1) > eps:
                    self._drop_oldest()
                    return True
        return False
