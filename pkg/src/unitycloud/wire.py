"""Protocol messages and their exact on-the-wire sizes.

Every message has a 24-byte header (kind 4, de 8, sender 8, body length 4)
followed by a fixed big-endian body layout per kind. Updates travelling in a
batch or a state-fetch response are framed individually, each with its own
header, and signed kinds append a signature of the scheme's size.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import NamedTuple

from .crypto import BLOCK_SIZE, SigScheme, signature_size
from .state_log import TransferSeal, Update, UpdateKind

HEADER_SIZE = 24
TABLE_ENTRY_SIZE = 21  # device 8, status 1, heartbeat period 4, last seen 8
CATALOG_ENTRY_SIZE = 24  # de 8, creator 8, size 8

_UPDATE_BODY = {
    UpdateKind.NOOP: 8,
    UpdateKind.LEASE_HOLDER: 8 + 8 + 8,
    UpdateKind.REPLICATION: 8 + 4 + 8,
}


class MsgKind(enum.IntEnum):
    STATE_FETCH = 1
    STATE_RESPONSE = 2
    BLOCK_REQUEST = 3
    BLOCK_RESPONSE = 4
    BLOCK_NOT_FOUND = 5
    UPDATE_BATCH = 6
    BATCH_ACK = 7
    BATCH_REJECT = 8
    LH_SWITCH = 9
    LH_GRANT_PENDING = 10
    LH_NACK = 11
    LH_RECOVERY_NEEDED = 12
    LH_GRANTED = 13
    LH_REVOCATION = 14
    LH_TRANSFER = 15
    HEARTBEAT = 16
    HEARTBEAT_ACK = 17
    CATALOG_FETCH = 18
    CATALOG_RESPONSE = 19
    CREATE_DE = 20
    CREATE_ACK = 21
    CREATE_DUPLICATE = 22
    PING = 23
    PONG = 24
    RECOVER_LEASE = 25
    UNKNOWN_DE = 26


class TableEntry(NamedTuple):
    device: int
    live: bool
    heartbeat_period: int
    last_seen: int


class CatalogEntry(NamedTuple):
    de: int
    creator: int
    size: int


@dataclass
class Message:
    kind: MsgKind
    src: int
    dst: int
    de: int = 0
    value: int = 0  # since / requester / new holder / head / size, per kind
    block: int = 0
    version: int = 0
    content: bytes = b""
    updates: tuple[Update, ...] = ()
    seal: TransferSeal | None = None
    table: tuple[TableEntry, ...] = ()
    catalog: tuple[CatalogEntry, ...] = ()
    own_block: bool = False  # BLOCK_RESPONSE serving a block-version the sender wrote
    msg_id: int = 0
    reply_to: int = 0  # msg_id of the request being answered (transport-level, not on the wire)


def update_frame_size(upd: Update, scheme: SigScheme) -> int:
    """Size of one framed update, not counting records attached to it."""
    if upd.kind is UpdateKind.WRITE:
        body = 8 + 4 + 8 + 20 + 2 + 8 * len(upd.replicas)
    else:
        body = _UPDATE_BODY[upd.kind]
    return HEADER_SIZE + body + signature_size(scheme)


def _updates_size(upds, scheme: SigScheme) -> int:
    total = 0
    for u in upds:
        total += update_frame_size(u, scheme)
        for r in u.attached:
            total += update_frame_size(r, scheme)
    return total


def body_size(msg: Message, scheme: SigScheme) -> int:
    k = msg.kind
    if k in (MsgKind.STATE_RESPONSE, MsgKind.UPDATE_BATCH):
        return _updates_size(msg.updates, scheme)
    if k is MsgKind.BLOCK_RESPONSE:
        return 8 + 4 + BLOCK_SIZE
    if k in (MsgKind.BLOCK_REQUEST, MsgKind.BLOCK_NOT_FOUND):
        return 8 + 4
    if k is MsgKind.LH_TRANSFER:
        return 8 + signature_size(scheme)
    if k is MsgKind.HEARTBEAT_ACK:
        return 4 + TABLE_ENTRY_SIZE * len(msg.table) + 4
    if k is MsgKind.CATALOG_RESPONSE:
        return 4 + CATALOG_ENTRY_SIZE * len(msg.catalog)
    if k in (
        MsgKind.STATE_FETCH,
        MsgKind.BATCH_ACK,
        MsgKind.LH_SWITCH,
        MsgKind.LH_REVOCATION,
        MsgKind.CATALOG_FETCH,
        MsgKind.CREATE_DE,
        MsgKind.RECOVER_LEASE,
        MsgKind.PING,
    ):
        return 8
    if k is MsgKind.PONG:
        return 1
    return 0


def wire_size(msg: Message, scheme: SigScheme) -> int:
    return HEADER_SIZE + body_size(msg, scheme)


def block_bytes(msg: Message, scheme: SigScheme) -> int:
    """Bytes of ``msg`` that count as block payload rather than control."""
    if msg.kind is MsgKind.BLOCK_RESPONSE:
        return body_size(msg, scheme)
    return 0


def signed_records(msg: Message) -> int:
    if msg.kind in (MsgKind.STATE_RESPONSE, MsgKind.UPDATE_BATCH):
        return sum(1 + len(u.attached) for u in msg.updates)
    if msg.kind is MsgKind.LH_TRANSFER:
        return 1
    return 0
