"""The provider's bulk block store.

The cloud node holds no keys. Every 10 s it heartbeats the coordinator,
pulls new DE state and requests each block-version it lacks from a device
that has it (the writer if live, else another listed replica). Blocks are
stored unverified. Its replica membership is announced by the serving
device, which signs a REPLICATION update on its behalf.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

from .block_store import BlockKey, BlockStore, NotFound
from .crypto import KeyRing, SigScheme
from .simnet import Node, seconds
from .state_log import DEState, UpdateKind
from .wire import Message, MsgKind

log = logging.getLogger(__name__)

CLOUD_HEARTBEAT = seconds(10)


@dataclass
class CloudPolicy:
    corrupt_blocks: set[BlockKey] = field(default_factory=set)
    drop_blocks: set[BlockKey] = field(default_factory=set)

    @property
    def honest(self) -> bool:
        return not (self.corrupt_blocks or self.drop_blocks)


class CloudNode(Node):
    role = "cloud"

    def __init__(
        self,
        node_id: int,
        coordinator_id: int,
        devices: list[int],
        replication_target: int = 3,
        scheme: SigScheme = SigScheme.SYM_HMAC_SHA1,
        keys: KeyRing | None = None,
        heartbeat_period: int = CLOUD_HEARTBEAT,
    ):
        super().__init__(node_id)
        self.coordinator_id = coordinator_id
        self.devices = sorted(devices)
        self.target = replication_target
        self.scheme = scheme
        self.keys = keys
        self.heartbeat_period = heartbeat_period
        self.store = BlockStore()
        self.states: dict[int, DEState] = {}
        self.policy = CloudPolicy()
        self.live: set[int] = set(self.devices)
        self.ever_stored: set[BlockKey] = set()
        self.gc_freed = 0
        self._inflight: dict[BlockKey, int] = {}  # key -> time requested

    def start(self) -> None:
        self._inflight.clear()
        self.every(self.heartbeat_period, self.replication_tick, phase=seconds(0.5))

    # -- replication ---------------------------------------------------------

    def replication_tick(self) -> None:
        c = self.coordinator_id
        self.send(MsgKind.HEARTBEAT, c)
        self.send(MsgKind.CATALOG_FETCH, c, value=len(self.states))
        for de in sorted(self.states):
            self.send(MsgKind.STATE_FETCH, c, de=de, value=self.fetch_cursor(de))

    def fetch_cursor(self, de: int) -> int:
        state = self.states[de]
        lo = state.oldest_under_replicated(self.target)
        for u in state.log:
            if u.kind is UpdateKind.WRITE and BlockKey(de, u.block, u.version) not in self.ever_stored:
                lo = u.seq if lo == 0 else min(lo, u.seq)
                break
        return lo - 1 if lo else state.head

    def missing(self, de: int) -> list:
        state = self.states[de]
        return [
            w for w in state.writes()
            if BlockKey(de, w.block, w.version) not in self.ever_stored
        ]

    def _request_missing(self, de: int) -> None:
        now = self.now
        for w in self.missing(de):
            key = BlockKey(de, w.block, w.version)
            sent = self._inflight.get(key)
            if sent is not None and now - sent < 2 * self.heartbeat_period:
                continue
            source = self._source_for(w)
            if source is None:
                continue  # nobody reachable has it; retry next tick
            self._inflight[key] = now
            self.send(MsgKind.BLOCK_REQUEST, source, de=de, block=w.block, version=w.version)

    def _source_for(self, w) -> int | None:
        if w.signer in self.live:
            return w.signer
        for r in w.replicas:
            if r != self.node_id and r in self.live:
                return r
        return None

    def _gc(self, de: int) -> None:
        eligible = [BlockKey(de, b, v) for b, v in sorted(self.states[de].gc_eligible(self.target))]
        freed = self.store.gc(eligible)
        self.gc_freed += freed
        if freed and self.sim is not None:
            for obs in self.sim.gc_observers:
                obs(self, de)

    # -- serving -------------------------------------------------------------

    def serve_block_request(self, key: BlockKey, requester: int) -> bytes:
        key = BlockKey(*key)
        if key in self.policy.drop_blocks:
            raise NotFound(key)
        data = self.store.get(key)
        if key in self.policy.corrupt_blocks:
            data = bytes([data[0] ^ 0xFF]) + data[1:]
        return data

    # -- message handlers ----------------------------------------------------

    def on_heartbeat_ack(self, msg: Message) -> None:
        self.live = {e.device for e in msg.table if e.live and e.device in self.devices}

    def on_catalog_response(self, msg: Message) -> None:
        for e in msg.catalog:
            if e.de not in self.states:
                self.states[e.de] = DEState(e.de, e.creator, -(-e.size // 4096))

    def on_state_response(self, msg: Message) -> None:
        state = self.states.get(msg.de)
        if state is None:
            return
        report = state.ingest_remote(msg.updates, self.keys, self.scheme, verify_signatures=False)
        if not report.ok:
            log.info("cloud: de %d fetch: %s", msg.de, report.detail)
        self._request_missing(msg.de)
        self._gc(msg.de)

    def on_block_response(self, msg: Message) -> None:
        key = BlockKey(msg.de, msg.block, msg.version)
        self._inflight.pop(key, None)
        if key in self.store or key in self.ever_stored:
            return
        self.store.put(key, msg.content)
        self.ever_stored.add(key)

    def on_block_not_found(self, msg: Message) -> None:
        self._inflight.pop(BlockKey(msg.de, msg.block, msg.version), None)

    def on_block_request(self, msg: Message) -> None:
        try:
            data = self.serve_block_request(BlockKey(msg.de, msg.block, msg.version), msg.src)
        except NotFound:
            self.send(MsgKind.BLOCK_NOT_FOUND, msg.src, de=msg.de, block=msg.block, version=msg.version)
            return
        self.send(
            MsgKind.BLOCK_RESPONSE, msg.src, de=msg.de, block=msg.block, version=msg.version, content=data
        )
