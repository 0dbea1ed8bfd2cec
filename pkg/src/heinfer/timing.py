"""Wall-clock accounting per named phase; nested phases are exclusive."""
from __future__ import annotations

import time
from collections import defaultdict
from contextlib import contextmanager


class PhaseTimer:
    def __init__(self):
        self.totals = defaultdict(float)
        self._stack = []  # [name, started_at]

    @contextmanager
    def phase(self, name: str):
        now = time.perf_counter()
        if self._stack:
            outer = self._stack[-1]
            self.totals[outer[0]] += now - outer[1]
        self._stack.append([name, now])
        try:
            yield self
        finally:
            end = time.perf_counter()
            self.totals[name] += end - self._stack.pop()[1]
            if self._stack:
                self._stack[-1][1] = end

    def wrap_iter(self, name: str, iterable):
        it = iter(iterable)
        while True:
            with self.phase(name):
                try:
                    item = next(it)
                except StopIteration:
                    return
            yield item

    def __getitem__(self, name: str) -> float:
        return self.totals.get(name, 0.0)

    def as_dict(self) -> dict:
        return dict(self.totals)
