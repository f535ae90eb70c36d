"""Storage abstractions built on DEs.

UBD maps a whole block device onto one DE, so every device touching it
contends for one lease. UFS gives every file its own DE; a translation DE
holds the name table and the bootstrap DE (id 0) hands out fresh DE ids.
All calls are generators run inside the owning device's process.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

from .crypto import BLOCK_SIZE
from .device import Device, OutOfRange

BOOTSTRAP_DE = 0
BOOTSTRAP_SIZE = BLOCK_SIZE
TRANSLATION_SIZE = 64 * BLOCK_SIZE


class MapperError(Exception):
    pass


class NameExists(MapperError):
    pass


class NameNotFound(MapperError):
    pass


def split_range(offset: int, length: int) -> list[tuple[int, int, int]]:
    """Cut a byte range into (block, offset-in-block, length) pieces."""
    out = []
    end = offset + length
    while offset < end:
        block, off = divmod(offset, BLOCK_SIZE)
        n = min(BLOCK_SIZE - off, end - offset)
        out.append((block, off, n))
        offset += n
    return out


def _block_io(dev: Device, de: int, size: int, offset: int, payload, is_write: bool):
    length = len(payload) if is_write else payload
    if offset < 0 or length < 0 or offset + length > size:
        raise OutOfRange(f"range {offset}+{length} outside {size} bytes")
    out = bytearray()
    pos = 0
    for block, off, n in split_range(offset, length):
        if is_write:
            yield from dev.write(de, block, off, payload[pos:pos + n])
        else:
            out += yield from dev.read(de, block, off, n)
        pos += n
    return None if is_write else bytes(out)


# ---------------------------------------------------------------------------
# UBD
# ---------------------------------------------------------------------------

@dataclass
class UbdMapping:
    de: int
    size: int

    def locate(self, addr: int) -> tuple[int, int]:
        return divmod(addr, BLOCK_SIZE)


def ubd_io(dev: Device, mapping: UbdMapping, byte_offset: int, data, is_write: bool):
    """Read (``data`` = length) or write (``data`` = bytes) through the DE."""
    return (yield from _block_io(dev, mapping.de, mapping.size, byte_offset, data, is_write))


# ---------------------------------------------------------------------------
# bootstrap DE
# ---------------------------------------------------------------------------

_BOOT = struct.Struct(">QQ")  # largest used DE id, translation DE id


def bootstrap(dev: Device):
    """Create the bootstrap DE with its counter at zero."""
    yield from dev.create_entity(BOOTSTRAP_DE, BOOTSTRAP_SIZE)
    yield from dev.write(BOOTSTRAP_DE, 0, 0, _BOOT.pack(0, 0))


def _read_boot(dev: Device):
    raw = yield from dev.read(BOOTSTRAP_DE, 0, 0, _BOOT.size)
    return _BOOT.unpack(raw)


def alloc_de_id(dev: Device):
    """Read, increment and write back the bootstrap counter under its lease."""
    yield from dev.begin_atomic(BOOTSTRAP_DE)
    try:
        counter, translation = yield from _read_boot(dev)
        counter += 1
        yield from dev.write(BOOTSTRAP_DE, 0, 0, _BOOT.pack(counter, translation))
    finally:
        dev.end_atomic(BOOTSTRAP_DE)
    return counter


# ---------------------------------------------------------------------------
# UFS
# ---------------------------------------------------------------------------

def encode_table(entries: dict[str, tuple[int, int]]) -> bytes:
    out = [struct.pack(">I", len(entries))]
    for name in sorted(entries):
        raw = name.encode()
        de, size = entries[name]
        out.append(struct.pack(">H", len(raw)) + raw + struct.pack(">QQ", de, size))
    return b"".join(out)


def decode_table(raw: bytes) -> dict[str, tuple[int, int]]:
    (count,) = struct.unpack_from(">I", raw, 0)
    pos = 4
    out = {}
    for _ in range(count):
        (n,) = struct.unpack_from(">H", raw, pos)
        name = raw[pos + 2:pos + 2 + n].decode()
        de, size = struct.unpack_from(">QQ", raw, pos + 2 + n)
        out[name] = (de, size)
        pos += 2 + n + 16
    return out


def _table_length(raw: bytes, have: int) -> int | None:
    """Bytes needed to decode a table whose prefix ``raw`` is known."""
    if len(raw) < 4:
        return None
    (count,) = struct.unpack_from(">I", raw, 0)
    pos = 4
    for _ in range(count):
        if pos + 2 > have:
            return None
        (n,) = struct.unpack_from(">H", raw, pos)
        pos += 2 + n + 16
        if pos > have:
            return None
    return pos


@dataclass
class UFS:
    """A per-device handle on the shared file namespace."""

    dev: Device
    translation_de: int = 0
    cache: dict[str, tuple[int, int]] = field(default_factory=dict)

    def format(self):
        yield from bootstrap(self.dev)
        de = yield from alloc_de_id(self.dev)
        yield from self.dev.create_entity(de, TRANSLATION_SIZE)
        yield from self.dev.begin_atomic(BOOTSTRAP_DE)
        try:
            counter, _ = yield from _read_boot(self.dev)
            yield from self.dev.write(BOOTSTRAP_DE, 0, 0, _BOOT.pack(counter, de))
        finally:
            self.dev.end_atomic(BOOTSTRAP_DE)
        self.translation_de = de
        yield from self._write_table({}, b"")

    def mount(self):
        _, self.translation_de = yield from _read_boot(self.dev)
        if not self.translation_de:
            raise MapperError("file system not formatted")

    def _read_table(self):
        raw = b""
        block = 0
        while True:
            need = _table_length(raw, len(raw))
            if need is not None:
                break
            raw += yield from self.dev.read(self.translation_de, block)
            block += 1
        return decode_table(raw[:need]), raw

    def _write_table(self, entries, old_raw: bytes):
        raw = encode_table(entries)
        if len(raw) > TRANSLATION_SIZE:
            raise MapperError("translation table full")
        padded = raw + bytes(-len(raw) % BLOCK_SIZE)
        for i in range(0, len(padded), BLOCK_SIZE):
            chunk = padded[i:i + BLOCK_SIZE]
            if old_raw[i:i + BLOCK_SIZE].ljust(BLOCK_SIZE, b"\0") != chunk:
                yield from self.dev.write(self.translation_de, i // BLOCK_SIZE, 0, chunk)

    def create(self, name: str, size: int):
        """Create file ``name`` of ``size`` bytes; returns its DE id."""
        tde = self.translation_de
        yield from self.dev.begin_atomic(tde)
        try:
            entries, raw = yield from self._read_table()
            if name in entries:
                raise NameExists(name)
            de = yield from alloc_de_id(self.dev)
            yield from self.dev.create_entity(de, size)
            entries[name] = (de, size)
            yield from self._write_table(entries, raw)
        finally:
            self.dev.end_atomic(tde)
        self.cache[name] = (de, size)
        return de

    def delete(self, name: str):
        tde = self.translation_de
        yield from self.dev.begin_atomic(tde)
        try:
            entries, raw = yield from self._read_table()
            if name not in entries:
                raise NameNotFound(name)
            del entries[name]
            yield from self._write_table(entries, raw)
        finally:
            self.dev.end_atomic(tde)
        self.cache.pop(name, None)

    def lookup(self, name: str):
        if name in self.cache:
            return self.cache[name]
        entries, _ = yield from self._read_table()
        if name not in entries:
            raise NameNotFound(name)
        self.cache[name] = entries[name]
        return entries[name]

    def io(self, name: str, offset: int, data, is_write: bool):
        de, size = yield from self.lookup(name)
        return (yield from _block_io(self.dev, de, size, offset, data, is_write))


def ufs_create(fs: UFS, name: str, size: int):
    return (yield from fs.create(name, size))


def ufs_delete(fs: UFS, name: str):
    yield from fs.delete(name)


def ufs_lookup(fs: UFS, name: str):
    return (yield from fs.lookup(name))


def ufs_io(fs: UFS, name: str, offset: int, data, is_write: bool):
    return (yield from fs.io(name, offset, data, is_write))
