"""Single-producer single-consumer ring buffer.

The producer only writes ``_tail`` and the consumer only writes ``_head``;
each side reads the other's index, so neither ever waits on the other.
Under CPython an int store is atomic, which is all the protocol needs.
"""
from __future__ import annotations

from typing import Generic, TypeVar

T = TypeVar("T")


class RingBuffer(Generic[T]):
    __slots__ = ("capacity", "_slots", "_head", "_tail")

    def __init__(self, capacity: int):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        self._slots: list = [None] * (capacity + 1)
        self._head = 0
        self._tail = 0

    def try_push(self, item: T) -> bool:
        tail = self._tail
        nxt = tail + 1
        if nxt == len(self._slots):
            nxt = 0
        if nxt == self._head:
            return False
        self._slots[tail] = item
        self._tail = nxt
        return True

    def try_pop(self) -> tuple[bool, T | None]:
        head = self._head
        if head == self._tail:
            return False, None
        item = self._slots[head]
        self._slots[head] = None
        nxt = head + 1
        if nxt == len(self._slots):
            nxt = 0
        self._head = nxt
        return True, item

    def drain(self, limit: int | None = None) -> list[T]:
        out = []
        while limit is None or len(out) < limit:
            ok, item = self.try_pop()
            if not ok:
                break
            out.append(item)
        return out

    def __len__(self) -> int:
        n = self._tail - self._head
        return n if n >= 0 else n + len(self._slots)

    def empty(self) -> bool:
        return self._head == self._tail

    def full(self) -> bool:
        return len(self) == self.capacity
