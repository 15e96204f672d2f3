"""Exact-match thumbprint table (the allow-list the switch consults)."""

from __future__ import annotations

import threading
from dataclasses import dataclass

DEFAULT_CAPACITY = 1024


class TableFull(RuntimeError):
    pass


@dataclass(frozen=True)
class TableView:
    """Immutable snapshot; a lookup against a view sees exactly one generation."""

    entries: frozenset
    generation: int

    def __contains__(self, thumbprint: bytes) -> bool:
        return thumbprint in self.entries


class ThumbprintTable:
    """Set of 20-byte thumbprints with a bounded size.

    Writers are serialized by a lock and publish a fresh frozen view;
    readers just grab the current view reference, so they never block and
    never observe a half-applied update.
    """

    def __init__(self, capacity: int = DEFAULT_CAPACITY, entries=()):
        self.capacity = capacity
        self._lock = threading.Lock()
        entries = frozenset(bytes(e) for e in entries)
        if len(entries) > capacity:
            raise TableFull(f"{len(entries)} entries exceed capacity {capacity}")
        self._view = TableView(entries, 0)

    @property
    def view(self) -> TableView:
        return self._view

    @property
    def generation(self) -> int:
        return self._view.generation

    @property
    def entries(self) -> frozenset:
        return self._view.entries

    def __len__(self) -> int:
        return len(self._view.entries)

    def __contains__(self, thumbprint: bytes) -> bool:
        return thumbprint in self._view.entries

    def lookup(self, thumbprint: bytes) -> bool:
        return thumbprint in self._view.entries

    def install(self, thumbprint: bytes) -> None:
        thumbprint = bytes(thumbprint)
        if len(thumbprint) != 20:
            raise ValueError("thumbprints are 20 bytes")
        with self._lock:
            cur = self._view
            if thumbprint not in cur.entries and len(cur.entries) >= self.capacity:
                raise TableFull(f"table at capacity {self.capacity}")
            self._view = TableView(cur.entries | {thumbprint}, cur.generation + 1)

    def remove(self, thumbprint: bytes) -> None:
        with self._lock:
            cur = self._view
            self._view = TableView(cur.entries - {bytes(thumbprint)}, cur.generation + 1)

    def replace(self, thumbprints) -> None:
        new = frozenset(bytes(t) for t in thumbprints)
        if len(new) > self.capacity:
            raise TableFull(f"{len(new)} entries exceed capacity {self.capacity}")
        with self._lock:
            self._view = TableView(new, self._view.generation + 1)


def lookup(table: ThumbprintTable, thumbprint: bytes) -> bool:
    return table.lookup(thumbprint)


def install_entry(table: ThumbprintTable, thumbprint: bytes) -> ThumbprintTable:
    table.install(thumbprint)
    return table


def remove_entry(table: ThumbprintTable, thumbprint: bytes) -> ThumbprintTable:
    table.remove(thumbprint)
    return table
