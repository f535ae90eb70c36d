"""Versioned block store: an ordered key index over a linear byte arena."""

from __future__ import annotations

import bisect
import struct
from pathlib import Path
from typing import Iterable, Iterator, NamedTuple

from .crypto import BLOCK_SIZE

COMPACT_DEAD_RATIO = 0.5
_KEY = struct.Struct(">QQI")


class BlockKey(NamedTuple):
    de: int
    block: int
    version: int

    def pack(self) -> bytes:
        return _KEY.pack(self.de, self.block, self.version)

    @classmethod
    def unpack(cls, raw: bytes) -> "BlockKey":
        return cls(*_KEY.unpack(raw))


class BlockStoreError(Exception):
    pass


class SizeMismatch(BlockStoreError):
    pass


class ConflictingContent(BlockStoreError):
    pass


class NotFound(BlockStoreError, KeyError):
    pass


class BlockStore:
    def __init__(self, path: str | Path | None = None):
        self._keys: list[BlockKey] = []  # sorted
        self._index: dict[BlockKey, int] = {}  # key -> extent number
        self._arena = bytearray()
        self._dead = 0  # extents no longer referenced
        self.path = Path(path) if path is not None else None
        if self.path is not None and self.path.exists():
            self.load(self.path)

    def __len__(self) -> int:
        return len(self._index)

    def __contains__(self, key) -> bool:
        return key in self._index

    def __iter__(self) -> Iterator[BlockKey]:
        return iter(list(self._keys))

    @property
    def bytes_live(self) -> int:
        return BLOCK_SIZE * len(self._index)

    @property
    def bytes_dead(self) -> int:
        return BLOCK_SIZE * self._dead

    def put(self, key: BlockKey, ciphertext: bytes) -> None:
        key = BlockKey(*key)
        if len(ciphertext) != BLOCK_SIZE:
            raise SizeMismatch(f"{key}: expected {BLOCK_SIZE} bytes, got {len(ciphertext)}")
        slot = self._index.get(key)
        if slot is not None:
            if self._extent(slot) != ciphertext:
                raise ConflictingContent(f"{key} already stored with different bytes")
            return
        self._index[key] = len(self._arena) // BLOCK_SIZE
        self._arena += ciphertext
        bisect.insort(self._keys, key)

    def get(self, key: BlockKey) -> bytes:
        slot = self._index.get(key)
        if slot is None:
            raise NotFound(key)
        return self._extent(slot)

    def latest_version(self, de: int, block: int) -> int:
        i = bisect.bisect_right(self._keys, BlockKey(de, block, 0xFFFFFFFF))
        if i == 0:
            raise NotFound((de, block))
        k = self._keys[i - 1]
        if k.de != de or k.block != block:
            raise NotFound((de, block))
        return k.version

    def versions(self, de: int, block: int) -> list[int]:
        lo = bisect.bisect_left(self._keys, BlockKey(de, block, 0))
        hi = bisect.bisect_right(self._keys, BlockKey(de, block, 0xFFFFFFFF))
        return [k.version for k in self._keys[lo:hi]]

    def keys_for(self, de: int) -> list[BlockKey]:
        lo = bisect.bisect_left(self._keys, BlockKey(de, 0, 0))
        hi = bisect.bisect_left(self._keys, BlockKey(de + 1, 0, 0))
        return self._keys[lo:hi]

    def gc(self, eligible: Iterable[BlockKey]) -> int:
        removed = 0
        for key in eligible:
            if self._index.pop(key, None) is not None:
                i = bisect.bisect_left(self._keys, key)
                del self._keys[i]
                removed += 1
        self._dead += removed
        total = len(self._arena) // BLOCK_SIZE
        if total and self._dead / total > COMPACT_DEAD_RATIO:
            self._compact()
        return removed * BLOCK_SIZE

    def _extent(self, slot: int) -> bytes:
        off = slot * BLOCK_SIZE
        return bytes(self._arena[off:off + BLOCK_SIZE])

    def _compact(self) -> None:
        arena = bytearray()
        for n, key in enumerate(self._keys):
            arena += self._extent(self._index[key])
            self._index[key] = n
        self._arena = arena
        self._dead = 0

    # -- persistence -------------------------------------------------------

    def save(self, path: str | Path | None = None) -> None:
        path = Path(path or self.path)
        with path.open("wb") as fh:
            for key in self._keys:
                fh.write(key.pack())
                fh.write(self._extent(self._index[key]))

    def load(self, path: str | Path) -> None:
        raw = Path(path).read_bytes()
        rec = _KEY.size + BLOCK_SIZE
        if len(raw) % rec:
            raise BlockStoreError(f"{path}: truncated record")
        self._keys, self._index, self._arena, self._dead = [], {}, bytearray(), 0
        for off in range(0, len(raw), rec):
            self.put(BlockKey.unpack(raw[off:off + _KEY.size]), raw[off + _KEY.size:off + rec])
