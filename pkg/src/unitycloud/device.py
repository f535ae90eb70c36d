"""Unityd: the per-device daemon.

A :class:`Device` is one simulator actor combining the three roles of the
daemon: the client library (Table-2 style calls ``create_entity``, ``read``,
``write``), the replication scheduler and the controller loop that
heartbeats, flushes signed batches and fetches state every heartbeat
period. Client calls are generators driven by the simulator::

    data = yield from device.read(de, block, 0, 4096)

Lease handling follows the switch protocol: LH_SWITCH to the coordinator,
revocation of the old holder, a LEASE_HOLDER update plus a signed transfer
seal sent directly to the new holder, then a catch-up fetch until the local
log reaches the sealed sequence number.
"""

from __future__ import annotations

import enum
import hashlib
import logging
import struct
from collections import Counter, defaultdict, deque
from dataclasses import dataclass, field
from typing import Callable, Iterable

from .block_store import BlockKey, BlockStore, NotFound
from .crypto import BLOCK_SIZE, KeyRing, SigScheme, content_hash, decrypt_block, encrypt_block
from .simnet import TIMEOUT, Future, Node, Sleep, WaitFor, seconds
from .state_log import (
    DEState,
    TransferSeal,
    Update,
    UpdateKind,
    lease_holder_update,
    noop_update,
    replication_update,
    write_update,
)
from .wire import Message, MsgKind

log = logging.getLogger(__name__)

REQUEST_TIMEOUT = seconds(5)
PING_TIMEOUT = seconds(1)
NACK_BACKOFF = seconds(1)
NACK_BACKOFF_CAP = seconds(32)
BLOCK_TIMEOUT = seconds(2)
BLOCK_DEADLINE = seconds(30)
REPL_TIMEOUT = seconds(5)
NOT_FOUND_RETRY = seconds(2)
MONITOR_PERIOD = seconds(1)
DISCONNECT_MARGIN = seconds(2)
PROBE_LEAD = seconds(2)
CATCH_UP_RETRY = seconds(0.5)
ZERO_BLOCK = bytes(BLOCK_SIZE)


class DeviceError(Exception):
    pass


class IntegrityViolation(DeviceError):
    pass


class Unavailable(DeviceError):
    pass


class OutOfRange(DeviceError):
    pass


class HumanInterventionRequired(DeviceError):
    pass


class ConflictDetected(DeviceError):
    pass


class DuplicateDE(DeviceError):
    pass


class SuspectTruncation(DeviceError):
    pass


class ProviderFailed(DeviceError):
    pass


class DataLoss(DeviceError):
    def __init__(self, de: int, missing: list):
        super().__init__(f"de {de}: {len(missing)} block-versions unrecoverable")
        self.de = de
        self.missing = missing


class LeaseState(enum.Enum):
    NOT_HELD = "NOT_HELD"
    ACQUIRING = "ACQUIRING"
    HELD = "HELD"
    REVOKING = "REVOKING"


@dataclass
class DeviceConfig:
    device: int
    heartbeat_period: int = 0  # 0 picks 30 s, or 60 s when battery powered
    battery_powered: bool = False
    replication_target: int = 3
    scheme: SigScheme = SigScheme.SYM_HMAC_SHA1
    keys: KeyRing | None = None
    io_time: int = seconds(0.001)

    def __post_init__(self):
        if not self.heartbeat_period:
            self.heartbeat_period = seconds(60 if self.battery_powered else 30)
        if self.heartbeat_period <= 0:
            raise ValueError("heartbeat_period must be positive")
        if self.replication_target < 2:
            raise ValueError("replication_target must be at least 2")


@dataclass
class PendingWrite:
    """A write completed locally but never acknowledged by the coordinator."""

    de: int
    block: int
    plaintext: bytes
    version: int = 0  # version it had when rolled back; 0 if written offline
    digest: bytes = b""
    base_seq: int = 0  # last acknowledged seq when it became pending


def assignment_hash(key: BlockKey) -> int:
    return struct.unpack(">Q", hashlib.sha1(BlockKey(*key).pack()).digest()[:8])[0]


def replication_assignment(
    state: DEState,
    me: int,
    eligible: list[int],
    target: int = 3,
    failed: Iterable[int] = (),
    start_seq: int = 0,
) -> list[BlockKey]:
    """Under-replicated block-versions this device is responsible for.

    ``eligible`` is the sorted list of live user devices other than the
    lease-holder. A WRITE is hashed onto the eligible devices that do not
    already replicate it, so assignments of different devices are disjoint.
    """
    failed = frozenset(failed)
    out = []
    pos = state.by_seq.get(start_seq, 0) if start_seq else 0
    for u in state.log[pos:]:
        if u.kind is not UpdateKind.WRITE:
            continue
        reps = set(state.replicas(u.block, u.version))
        if me in reps or len(reps - failed) >= target:
            continue
        cands = [d for d in eligible if d not in reps]
        if not cands:
            continue
        key = BlockKey(state.de, u.block, u.version)
        if cands[assignment_hash(key) % len(cands)] == me:
            out.append(key)
    return out


class Device(Node):
    role = "device"

    def __init__(self, config: DeviceConfig, coordinator_id: int, cloud_id: int, peers: dict[int, int]):
        """``peers`` maps every user device id (this one included) to its
        heartbeat period."""
        super().__init__(config.device)
        self.config = config
        self.keys = config.keys
        self.scheme = config.scheme
        self.target = config.replication_target
        self.period = config.heartbeat_period
        self.coordinator_id = coordinator_id
        self.cloud_id = cloud_id
        self.peers = dict(peers)
        self.peers.setdefault(self.node_id, self.period)
        # persistent state: survives crashes
        self.states: dict[int, DEState] = {}
        self.store = BlockStore()
        self.acked: dict[int, int] = defaultdict(int)
        self.pending: dict[int, list[PendingWrite]] = {}
        self.quarantined: dict[int, list[PendingWrite]] = defaultdict(list)
        self.unacked_repl: dict[int, dict[int, list[Update]]] = defaultdict(dict)
        self.catalog_len = 0
        # observable
        self.faults_seen: set[tuple[str, int]] = set()
        self.provider_failed: set[int] = set()
        self.history: list[tuple] = []
        self.gc_freed = 0
        self.on_revoke: Callable[[int], None] | None = None  # callback_revoke_lease
        self.ignore_revocations = False  # misbehaving device, for failure tests
        self._reset_volatile()

    def _reset_volatile(self) -> None:
        self.lease: dict[int, LeaseState] = {}
        self.busy: Counter = Counter()
        self.revoke_pending: dict[int, int] = {}
        self.handed_to: dict[int, tuple[int, int]] = {}  # de -> (new holder, LH update seq)
        self.acquiring: dict = {}
        self.reconnecting: dict = {}
        self.lease_inbox: dict[int, deque] = defaultdict(deque)
        self._lease_waiter: dict[int, Future] = {}
        self._waiters: dict[tuple, list[Future]] = defaultdict(list)
        self.repl_inflight: dict[BlockKey, int] = {}
        self.bad_keys: set[BlockKey] = set()
        self.table: dict[int, object] = {}
        self.live: set[int] = set(self.peers)
        self.connected = True
        self.last_ack_sent = 0
        self.hb_sent: dict[int, int] = {}
        self.last_ingest: dict[int, int] = {}
        self.pongs: dict[tuple[int, int], tuple[int, int]] = {}
        self._wd_token: Counter = Counter()
        self._ctl_token = 0

    # -- Table-2 lifecycle -----------------------------------------------------

    def init(self, sim) -> "Device":
        sim.add(self)
        return self

    def start(self) -> None:
        self._reset_volatile()
        self.last_ack_sent = self.now
        for de in self.states:
            self.last_ingest[de] = self.now
        self.controller_start()

    def cleanup(self) -> None:
        self.controller_stop()
        for de in list(self.lease):
            self._set_lease(de, LeaseState.NOT_HELD)

    def controller_start(self) -> None:
        self._ctl_token += 1
        token = self._ctl_token

        def guarded(fn):
            def run():
                if self._ctl_token == token:
                    fn()
            return run

        phase = 1 + (self.node_id * 7919) % seconds(1)
        self.every(self.period, guarded(self.controller_tick), phase=phase)
        self.every(MONITOR_PERIOD, guarded(self._monitor), phase=phase)

    def controller_stop(self) -> None:
        self._ctl_token += 1

    def crash(self) -> None:
        for de in sorted(self.states):
            self._demote(de)
        super().crash()

    # -- helpers ---------------------------------------------------------------

    @property
    def oracles(self):
        return self.sim.oracles

    def _set_lease(self, de: int, st: LeaseState) -> None:
        old = self.lease.get(de, LeaseState.NOT_HELD)
        self.lease[de] = st
        if st is LeaseState.HELD:
            self.handed_to.pop(de, None)
        if (old is LeaseState.HELD) != (st is LeaseState.HELD):
            self.oracles.lease(self.node_id, de, st is LeaseState.HELD)

    def holds(self, de: int) -> bool:
        return self.lease.get(de) is LeaseState.HELD

    def _wait(self, key: tuple) -> Future:
        fut = self.future()
        self._waiters[key].append(fut)
        return fut

    def _wake(self, key: tuple, value=None, error: BaseException | None = None) -> None:
        for fut in self._waiters.pop(key, []):
            if error is not None:
                fut.fail(error)
            else:
                fut.resolve(value)

    def _provider_fault(self, kind: str, de: int, detail: str = "") -> None:
        if (kind, de) in self.faults_seen:
            return
        self.faults_seen.add((kind, de))
        if kind in ("ForkDetected", "GapDetected", "BadSignature", "SuspectTruncation",
                    "IntegrityViolation"):
            self.provider_failed.add(de)
        self.fault(kind, de, detail)

    def _log_new(self, state: DEState, start: int) -> None:
        for u in state.log[start:]:
            self.oracles.log_entry(self.node_id, u)

    def _check_range(self, de: int, block: int, offset: int, size: int) -> DEState:
        state = self.states.get(de)
        if state is None:
            raise Unavailable(f"de {de} unknown to device {self.node_id}")
        if block < 0 or block >= state.block_count:
            raise OutOfRange(f"block {block} outside de {de} ({state.block_count} blocks)")
        if offset < 0 or size < 0 or offset + size > BLOCK_SIZE:
            raise OutOfRange(f"range {offset}+{size} exceeds block size")
        return state

    def live_devices(self) -> set[int]:
        return {d for d in self.live if d in self.peers}

    # -- client API ------------------------------------------------------------

    def create_entity(self, de: int, entity_size: int):
        if de in self.states:
            raise DuplicateDE(de)
        fut = self._wait(("create", de))
        self.send(MsgKind.CREATE_DE, self.coordinator_id, de=de, value=entity_size)
        reply = yield WaitFor(fut, REQUEST_TIMEOUT)
        if reply is TIMEOUT:
            raise Unavailable("coordinator did not answer CREATE_DE")
        if reply.kind is MsgKind.CREATE_DUPLICATE:
            raise DuplicateDE(de)
        self.states[de] = DEState(de, self.node_id, -(-entity_size // BLOCK_SIZE))
        self.last_ingest[de] = self.now
        self._set_lease(de, LeaseState.HELD)

    def ensure_known(self, de: int):
        deadline = self.now + REQUEST_TIMEOUT
        while de not in self.states:
            if self.now >= deadline:
                raise Unavailable(f"de {de} not in catalog")
            fut = self._wait(("catalog",))
            self.send(MsgKind.CATALOG_FETCH, self.coordinator_id, value=self.catalog_len)
            yield WaitFor(fut, seconds(1))

    def read(self, de: int, block: int, offset: int = 0, size: int = BLOCK_SIZE):
        if de not in self.states:
            yield from self.ensure_known(de)
        state = self._check_range(de, block, offset, size)
        self.busy[de] += 1
        try:
            if not self.connected:
                data = yield from self._offline_read(state, block)
            else:
                yield from self.ensure_lease(de)
                data = yield from self._read_block(de, block)
            yield Sleep(self.config.io_time)
            w = state.latest_write(block)
            self.history.append(("read", self.now, de, block, w.version if w else 0, state.head, data))
            return data[offset:offset + size]
        finally:
            self._release(de)

    def write(self, de: int, block: int, offset: int, data: bytes, size: int | None = None):
        if size is not None:
            data = data[:size]
        if de not in self.states:
            yield from self.ensure_known(de)
        state = self._check_range(de, block, offset, len(data))
        self.busy[de] += 1
        try:
            if not self.connected:
                if state.current_lh != self.node_id:
                    raise Unavailable("disconnected and not the lease-holder")
                old = yield from self._offline_read(state, block)
                new = old[:offset] + data + old[offset + len(data):]
                self.pending.setdefault(de, []).append(
                    PendingWrite(de, block, new, base_seq=self.acked[de])
                )
            else:
                yield from self.ensure_lease(de)
                if offset == 0 and len(data) == BLOCK_SIZE:
                    old = ZERO_BLOCK
                else:
                    old = yield from self._read_block(de, block)
                new = old[:offset] + data + old[offset + len(data):]
                self._local_write(de, block, new)
            yield Sleep(self.config.io_time)
        finally:
            self._release(de)

    def begin_atomic(self, de: int):
        """Hold the lease on ``de`` across several calls until end_atomic."""
        self.busy[de] += 1
        try:
            if de not in self.states:
                yield from self.ensure_known(de)
            yield from self.ensure_lease(de)
        except BaseException:
            self._release(de)
            raise

    def end_atomic(self, de: int) -> None:
        self._release(de)

    def _release(self, de: int) -> None:
        self.busy[de] -= 1
        if self.busy[de] <= 0:
            del self.busy[de]
            new = self.revoke_pending.get(de)
            if new is not None and self.holds(de):
                self._hand_over(de, new)

    def _offline_read(self, state: DEState, block: int):
        for p in reversed(self.pending.get(state.de, [])):
            if p.block == block:
                return p.plaintext
        w = state.latest_write(block)
        if w is None:
            return ZERO_BLOCK
        key = BlockKey(state.de, block, w.version)
        if key not in self.store:
            raise Unavailable(f"{key} not stored locally while disconnected")
        return decrypt_block(self.store.get(key), state.de, block, w.version, self.keys)
        yield  # pragma: no cover

    def _local_write(self, de: int, block: int, plaintext: bytes) -> Update:
        state = self.states[de]
        version = state.latest_version(block) + 1
        ct = encrypt_block(plaintext, de, block, version, self.keys)
        digest = content_hash(ct)
        seq = state.append_local(write_update(de, block, version, digest, self.node_id))
        upd = state.log[state.by_seq[seq]]
        self.oracles.log_entry(self.node_id, upd)
        key = BlockKey(de, block, version)
        self.store.put(key, ct)
        self.oracles.stored(self.node_id, key, digest)
        self.sim.metrics.write_created[(de, block, version)] = self.now
        self.history.append(("write", self.now, de, block, version, seq, plaintext))
        return upd

    def _read_block(self, de: int, block: int):
        state = self.states[de]
        w = state.latest_write(block)
        if w is None:
            return ZERO_BLOCK
        key = BlockKey(de, block, w.version)
        if key in self.store:
            ct = self.store.get(key)
        else:
            ct = yield from self._fetch_block(key, state.write_for(block, w.version))
        return decrypt_block(ct, de, block, w.version, self.keys)

    def _block_sources(self, w: Update) -> list[int]:
        out = [self.cloud_id]
        for r in w.replicas:
            if r not in (self.node_id, self.cloud_id) and r in self.live:
                out.append(r)
        return out

    def _fetch_block(self, key: BlockKey, w: Update):
        deadline = self.now + BLOCK_DEADLINE
        while True:
            for src in self._block_sources(w):
                fut = self._wait(("block", key))
                self.send(MsgKind.BLOCK_REQUEST, src, de=key.de, block=key.block, version=key.version)
                res = yield WaitFor(fut, BLOCK_TIMEOUT)
                if res is TIMEOUT or res is None:
                    continue
                return res
            if self.now >= deadline:
                raise Unavailable(f"{tuple(key)} could not be fetched")
            yield Sleep(seconds(1))

    # -- leases ----------------------------------------------------------------

    def ensure_lease(self, de: int):
        while not self.holds(de):
            if not self.connected:
                raise Unavailable("disconnected")
            proc = self.acquiring.get(de)
            if proc is None or not proc.alive:
                proc = self.spawn(self.acquire_lease(de), name=f"acquire-{self.node_id}-{de}")
                self.acquiring[de] = proc
            yield proc

    def _next_lease_msg(self, de: int, timeout: int):
        inbox = self.lease_inbox[de]
        if not inbox:
            fut = self.future()
            self._lease_waiter[de] = fut
            res = yield WaitFor(fut, timeout)
            self._lease_waiter.pop(de, None)
            if res is TIMEOUT:
                return None
        return inbox.popleft()

    def _lease_msg(self, msg: Message) -> None:
        self.lease_inbox[msg.de].append(msg)
        fut = self._lease_waiter.pop(msg.de, None)
        if fut is not None:
            fut.resolve(True)

    def acquire_lease(self, de: int):
        """Become lease-holder of ``de`` (LH_SWITCH protocol)."""
        state = self.states[de]
        self.lease_inbox[de].clear()
        self._set_lease(de, LeaseState.ACQUIRING)
        backoff = NACK_BACKOFF
        regranted = False
        try:
            while not self.holds(de):
                if not self.connected:
                    raise Unavailable("disconnected")
                if de in self.provider_failed:
                    raise ProviderFailed(f"provider flagged for de {de}")
                started = self.now
                self.send(MsgKind.LH_SWITCH, self.coordinator_id, de=de, value=self.node_id)
                reply = yield from self._next_lease_msg(de, REQUEST_TIMEOUT)
                if reply is None:
                    continue
                kind = reply.kind
                if kind is MsgKind.LH_NACK:
                    yield Sleep(backoff)
                    backoff = min(2 * backoff, NACK_BACKOFF_CAP)
                elif kind is MsgKind.LH_GRANTED:
                    yield from self._catch_up(de)
                    if state.current_lh == self.node_id:
                        regranted = True
                        break
                    yield Sleep(CATCH_UP_RETRY)
                elif kind is MsgKind.LH_RECOVERY_NEEDED:
                    yield from self.recover_lease_holder(de, started)
                elif kind is MsgKind.LH_TRANSFER:
                    # the old holder was quicker than the coordinator's reply
                    self.lease_inbox[de].appendleft(reply)
                    yield from self._await_transfer(de, REQUEST_TIMEOUT)
                elif kind is MsgKind.LH_GRANT_PENDING:
                    old = state.current_lh
                    wait = 2 * self.peers.get(old, self.period) + REQUEST_TIMEOUT
                    yield from self._await_transfer(de, wait)
        except BaseException:
            if self.lease.get(de) is LeaseState.ACQUIRING:
                self._set_lease(de, LeaseState.NOT_HELD)
            raise
        if not self.holds(de):
            self._set_lease(de, LeaseState.HELD)
        if regranted and not any(u.has_seq for u in state.batch.front):
            # no LH update marks a re-grant, so tell watchers we are active
            start = len(state.log)
            state.append_local(noop_update(de, self.node_id))
            self._log_new(state, start)
            self._flush(de)
        if not self.busy.get(de) and de in self.revoke_pending:
            self._hand_over(de, self.revoke_pending[de])

    def _await_transfer(self, de: int, timeout: int):
        """Wait for the old holder's seal, then catch up to it."""
        state = self.states[de]
        deadline = self.now + timeout
        while self.now < deadline:
            msg = yield from self._next_lease_msg(de, deadline - self.now)
            if msg is None:
                return
            if msg.kind is MsgKind.LH_RECOVERY_NEEDED:
                yield from self.recover_lease_holder(de, self.now)
                return
            if msg.kind is not MsgKind.LH_TRANSFER:
                continue
            seal = msg.seal
            if seal is None or seal.signer != msg.src or not seal.verify(self.scheme, self.keys):
                self._provider_fault("BadSignature", de, f"transfer seal from {msg.src}")
                raise ProviderFailed("bad transfer seal")
            limit = self.now + 2 * self.peers.get(seal.signer, self.period)
            reached = yield from self._catch_up_to(de, seal.seq, limit)
            if not reached:
                self._provider_fault(
                    "SuspectTruncation", de, f"log stops at {state.head}, transfer sealed {seal.seq}"
                )
                raise SuspectTruncation(de)
            if state.current_lh == self.node_id:
                self._set_lease(de, LeaseState.HELD)
            return

    def _catch_up(self, de: int):
        fut = self._wait(("fetch", de))
        self.send(MsgKind.STATE_FETCH, self.coordinator_id, de=de, value=self.states[de].head)
        res = yield WaitFor(fut, REQUEST_TIMEOUT)
        return None if res is TIMEOUT else res

    def _catch_up_to(self, de: int, seq: int, deadline: int):
        state = self.states[de]
        while True:
            report = yield from self._catch_up(de)
            if state.head >= seq:
                return True
            if report is not None and not report.ok:
                return False
            if self.now >= deadline:
                return False
            yield Sleep(min(CATCH_UP_RETRY, max(1, deadline - self.now)))

    def _ping(self, de: int, target: int, value: int = 0):
        fut = self._wait(("pong", de, target))
        self.send(MsgKind.PING, target, de=de, value=value)
        res = yield WaitFor(fut, PING_TIMEOUT)
        return None if res is TIMEOUT else res

    def recover_lease_holder(self, de: int, started: int = 0):
        """Coordinator reports the holder failed: verify, then walk back the
        lease-holder chain to the most recent live previous holder."""
        state = self.states[de]
        yield from self._catch_up(de)
        holder = state.current_lh
        if holder == self.node_id:
            return
        pong = yield from self._ping(de, holder, started)
        if pong is not None:
            # alive after all (the report may be stale, or false): ask it directly
            self.send(MsgKind.LH_REVOCATION, holder, de=de, value=self.node_id)
            yield from self._await_transfer(de, 2 * self.peers.get(holder, self.period))
            return
        chain = state.holders()
        visited = {holder}
        for cand in reversed(chain[:-1]):
            if cand in visited:
                break
            visited.add(cand)
            if cand == self.node_id:
                self._take_over(de, holder)
                return
            alive = yield from self._ping(de, cand)
            if alive is not None:
                self.send(MsgKind.RECOVER_LEASE, cand, de=de, value=holder)
                yield Sleep(seconds(1))
                return
        self._provider_fault("HumanInterventionRequired", de, f"no live previous holder of de {de}")
        raise HumanInterventionRequired(de)

    def _take_over(self, de: int, failed: int) -> None:
        state = self.states[de]
        start = len(state.log)
        state.append_local(lease_holder_update(de, failed, self.node_id, self.node_id))
        self._log_new(state, start)
        self._set_lease(de, LeaseState.HELD)
        self._flush(de)

    def _recover_as_candidate(self, de: int, failed: int):
        state = self.states.get(de)
        if state is None:
            return
        yield from self._catch_up(de)
        if state.current_lh != failed or self.holds(de) or not self.connected:
            return
        self._take_over(de, failed)

    def _hand_over(self, de: int, new: int) -> None:
        state = self.states[de]
        self.revoke_pending.pop(de, None)
        if state.current_lh != self.node_id:
            return
        self._set_lease(de, LeaseState.REVOKING)
        if self.on_revoke is not None:
            self.on_revoke(de)
        start = len(state.log)
        seq = state.append_local(lease_holder_update(de, self.node_id, new, self.node_id))
        self.handed_to[de] = (new, seq)
        self._log_new(state, start)
        self._set_lease(de, LeaseState.NOT_HELD)
        self._flush(de)
        seal = TransferSeal(de, seq, self.node_id).signed(self.scheme, self.keys)
        self.send(MsgKind.LH_TRANSFER, new, de=de, seal=seal)

    def _demote(self, de: int) -> None:
        """Give up the lease locally and turn unacknowledged writes into
        PendingWrites (crash or lost connectivity)."""
        if self.lease.get(de, LeaseState.NOT_HELD) is not LeaseState.NOT_HELD:
            self._set_lease(de, LeaseState.NOT_HELD)
        self.revoke_pending.pop(de, None)
        state = self.states[de]
        base = self.acked[de]
        removed = state.rollback_after(base)
        for u in removed:
            self.oracles.unlog_entry(self.node_id, u)
            if u.kind is not UpdateKind.WRITE or u.signer != self.node_id:
                continue
            key = BlockKey(de, u.block, u.version)
            try:
                plain = decrypt_block(self.store.get(key), de, u.block, u.version, self.keys)
            except NotFound:
                continue
            self.store.gc([key])
            self.pending.setdefault(de, []).append(
                PendingWrite(de, u.block, plain, u.version, u.digest, base)
            )

    # -- reconnection ------------------------------------------------------------

    def reconnect(self, de: int):
        """Publish PendingWrites after regaining connectivity.

        Returns "ok" or raises ConflictDetected when another device wrote the
        DE meanwhile; conflicting writes are quarantined, never merged.
        """
        state = self.states[de]
        report = yield from self._catch_up(de)
        if report is None:
            raise Unavailable("catch-up failed")
        remaining = []
        for p in self.pending.get(de, []):
            w = state.write_for(p.block, p.version) if p.version else None
            if w is not None and w.signer == self.node_id and w.digest == p.digest:
                key = BlockKey(de, p.block, p.version)
                ct = encrypt_block(p.plaintext, de, p.block, p.version, self.keys)
                if key not in self.store:
                    self.store.put(key, ct)
                    self.oracles.stored(self.node_id, key, w.digest)
                continue
            remaining.append(p)
        if not remaining:
            self.pending.pop(de, None)
            return "ok"
        self._check_conflict(state, remaining)
        self.busy[de] += 1
        try:
            yield from self.ensure_lease(de)
            # the previous holder may have flushed more writes during the hand-over
            self._check_conflict(state, remaining)
            for p in remaining:
                self._local_write(de, p.block, p.plaintext)
            self.pending.pop(de, None)
        finally:
            self._release(de)
        return "ok"

    def _check_conflict(self, state: DEState, remaining: list[PendingWrite]) -> None:
        base = min(p.base_seq for p in remaining)
        foreign = [
            u.seq for u in state.log
            if u.seq > base and u.kind is UpdateKind.WRITE and u.signer != self.node_id
        ]
        if foreign:
            self.pending.pop(state.de, None)
            self.quarantined[state.de].extend(remaining)
            self.fault("ConflictDetected", state.de, f"{len(remaining)} offline writes vs foreign seq {foreign[0]}")
            raise ConflictDetected(state.de)

    def _start_reconnects(self) -> None:
        for de in sorted(self.pending):
            proc = self.reconnecting.get(de)
            if proc is not None and proc.alive:
                continue
            proc = self.spawn(self.reconnect(de), name=f"reconnect-{self.node_id}-{de}")
            proc.result.add_callback(lambda f: None)  # failures are reported as faults
            self.reconnecting[de] = proc

    # -- controller --------------------------------------------------------------

    def controller_tick(self) -> None:
        hb = self.send(MsgKind.HEARTBEAT, self.coordinator_id)
        self.hb_sent[hb.msg_id] = self.now
        for de in sorted(self.states):
            state = self.states[de]
            if self.holds(de) and not any(u.has_seq for u in state.batch.front):
                start = len(state.log)
                state.append_local(noop_update(de, self.node_id))
                self._log_new(state, start)
            self._flush(de)
        for de in sorted(self.states):
            if de in self.provider_failed:
                continue
            self.send(MsgKind.STATE_FETCH, self.coordinator_id, de=de, value=self.fetch_cursor(de))

    def failed_devices(self) -> frozenset[int]:
        return frozenset(d for d in self.peers if d not in self.live)

    def fetch_cursor(self, de: int) -> int:
        state = self.states[de]
        lo = state.oldest_under_replicated(self.target, self.failed_devices())
        return lo - 1 if lo else state.head

    def _flush(self, de: int) -> None:
        state = self.states[de]
        fresh = state.sign_batch(state.swap_out_batch(), self.scheme, self.keys)
        acked = self.acked[de]
        seq_part = []
        pos = state.by_seq.get(acked + 1)
        if pos is not None:
            seq_part = [u for u in state.log[pos:] if u.signer == self.node_id]
        old_repl = [u for batch in self.unacked_repl[de].values() for u in batch]
        repl = old_repl + [u for u in fresh if not u.has_seq]
        payload = seq_part + repl
        if not payload:
            return
        msg = self.send(MsgKind.UPDATE_BATCH, self.coordinator_id, de=de, updates=tuple(payload))
        self.unacked_repl[de] = {msg.msg_id: repl} if repl else {}

    def _monitor(self) -> None:
        if self.connected and self.now > self.last_ack_sent + 2 * self.period - DISCONNECT_MARGIN:
            log.info("t=%d device %d lost contact with the coordinator", self.now, self.node_id)
            self.connected = False
            for de in sorted(self.states):
                self._demote(de)

    def _replicate(self, de: int) -> None:
        state = self.states[de]
        if de in self.provider_failed or not self.connected:
            return
        eligible = sorted(d for d in self.live_devices() if d != state.current_lh)
        if self.node_id not in eligible:
            return
        now = self.now
        start = state.oldest_under_replicated(self.target, self.failed_devices())
        if not start:
            return
        for key in replication_assignment(state, self.node_id, eligible, self.target, self.failed_devices(), start):
            if key in self.bad_keys:
                continue
            if key in self.store:
                self._announce(state, key)
                continue
            t = self.repl_inflight.get(key)
            if t is not None and now - t < REPL_TIMEOUT:
                continue
            self.repl_inflight[key] = now
            self.send(MsgKind.BLOCK_REQUEST, self.cloud_id, de=de, block=key.block, version=key.version)

    def _announce(self, state: DEState, key: BlockKey) -> None:
        if self.node_id not in state.replicas(key.block, key.version):
            state.append_local(replication_update(key.de, key.block, key.version, self.node_id, self.node_id))

    def _gc(self, de: int) -> None:
        eligible = [BlockKey(de, b, v) for b, v in sorted(self.states[de].gc_eligible(self.target))]
        freed = self.store.gc(eligible)
        if freed:
            self.gc_freed += freed
            for obs in self.sim.gc_observers:
                obs(self, de)

    # -- truncation watchdog -----------------------------------------------------

    def _arm_watchdog(self, de: int) -> None:
        self._wd_token[de] += 1
        token = self._wd_token[de]
        state = self.states[de]
        lh = state.current_lh
        if lh == self.node_id or lh not in self.peers:
            return
        deadline = self.last_ingest[de] + 2 * self.peers[lh]
        now = self.now
        self.after(max(0, deadline - PROBE_LEAD - now), self._wd_probe, de, token)
        self.after(max(0, deadline + 1 - now), self._wd_check, de, token)

    def _wd_probe(self, de: int, token: int) -> None:
        if self._wd_token[de] != token or de in self.provider_failed or not self.connected:
            return
        state = self.states[de]
        self.send(MsgKind.STATE_FETCH, self.coordinator_id, de=de, value=state.head)
        self.send(MsgKind.PING, state.current_lh, de=de)

    def _wd_check(self, de: int, token: int) -> None:
        if self._wd_token[de] != token or de in self.provider_failed:
            return
        state = self.states[de]
        lh = state.current_lh
        if lh == self.node_id or lh not in self.peers:
            return
        pong = self.pongs.get((de, lh))
        period = self.peers[lh]
        holding = pong is not None and pong[1] == 1 and pong[0] >= self.now - PROBE_LEAD - seconds(1)
        if self.connected and holding and self.now - self.last_ingest[de] > 2 * period:
            self._provider_fault(
                "SuspectTruncation", de, f"no update from holder {lh} for {self.now - self.last_ingest[de]} us"
            )
            return
        # holder idle, unreachable or we are offline: restart the window
        self.last_ingest[de] = self.now
        self._arm_watchdog(de)

    # -- message handlers ----------------------------------------------------------

    def on_heartbeat_ack(self, msg: Message) -> None:
        sent = self.hb_sent.pop(msg.reply_to, None)
        if sent is not None:
            self.last_ack_sent = max(self.last_ack_sent, sent)
        self.table = {e.device: e for e in msg.table}
        self.live = {e.device for e in msg.table if e.live}
        self.live.add(self.node_id)
        if not self.connected:
            self.connected = True
            log.info("t=%d device %d reconnected", self.now, self.node_id)
        if self.pending:
            self._start_reconnects()
        if msg.value > self.catalog_len:
            self.send(MsgKind.CATALOG_FETCH, self.coordinator_id, value=self.catalog_len)

    def on_catalog_response(self, msg: Message) -> None:
        for e in msg.catalog:
            if e.de not in self.states:
                self.states[e.de] = DEState(e.de, e.creator, -(-e.size // BLOCK_SIZE))
                self.last_ingest[e.de] = self.now
                self._arm_watchdog(e.de)
        self.catalog_len = max(self.catalog_len, msg.value + len(msg.catalog))
        self._wake(("catalog",), True)

    def on_state_response(self, msg: Message) -> None:
        de = msg.de
        state = self.states.get(de)
        if state is None:
            return
        start = len(state.log)
        report = state.ingest_remote(
            msg.updates, self.keys, self.scheme, proxy_replicators=frozenset({self.cloud_id})
        )
        self._log_new(state, start)
        if report.ok:
            seqs = [u.seq for u in msg.updates if u.has_seq]
            if seqs:
                self.acked[de] = max(self.acked[de], min(max(seqs), state.head))
        else:
            self._provider_fault(report.fault.value, de, report.detail)
        if report.accepted:
            self.last_ingest[de] = self.now
            self._arm_watchdog(de)
            if self.holds(de) and state.current_lh != self.node_id:
                self._set_lease(de, LeaseState.NOT_HELD)
        self._wake(("fetch", de), report)
        self._replicate(de)
        self._gc(de)

    def on_unknown_de(self, msg: Message) -> None:
        self._wake(("fetch", msg.de), None)

    def on_batch_ack(self, msg: Message) -> None:
        self.acked[msg.de] = max(self.acked[msg.de], msg.value)
        self.unacked_repl[msg.de].pop(msg.reply_to, None)

    def on_batch_reject(self, msg: Message) -> None:
        log.info("t=%d device %d: batch for de %d rejected", self.now, self.node_id, msg.de)
        if msg.de in self.states:
            self._demote(msg.de)

    def on_create_ack(self, msg: Message) -> None:
        self._wake(("create", msg.de), msg)

    def on_create_duplicate(self, msg: Message) -> None:
        self._wake(("create", msg.de), msg)

    on_lh_grant_pending = _lease_msg
    on_lh_nack = _lease_msg
    on_lh_recovery_needed = _lease_msg
    on_lh_granted = _lease_msg
    on_lh_transfer = _lease_msg

    def on_lh_revocation(self, msg: Message) -> None:
        de, new = msg.de, msg.value
        if self.ignore_revocations or de not in self.states or new == self.node_id:
            return
        st = self.lease.get(de, LeaseState.NOT_HELD)
        if st is LeaseState.HELD:
            if self.busy.get(de):
                self.revoke_pending[de] = new
            else:
                self._hand_over(de, new)
        elif st is LeaseState.ACQUIRING:
            handed = self.handed_to.get(de)
            if handed is not None and handed[0] == new and self.acked[de] < handed[1]:
                return  # sent before the coordinator saw our hand-over to the same device
            self.revoke_pending[de] = new
        elif self.states[de].current_lh == self.node_id and self.connected:
            self._hand_over(de, new)  # holder of record that is not using the lease
        else:
            log.debug("device %d ignores stale revocation for de %d", self.node_id, de)

    def on_ping(self, msg: Message) -> None:
        if self.ignore_revocations:
            return
        self.send(MsgKind.PONG, msg.src, de=msg.de, value=1 if self.holds(msg.de) else 0)

    def on_pong(self, msg: Message) -> None:
        self.pongs[(msg.de, msg.src)] = (self.now, msg.value)
        self._wake(("pong", msg.de, msg.src), msg)

    def on_recover_lease(self, msg: Message) -> None:
        if msg.de in self.states:
            proc = self.spawn(self._recover_as_candidate(msg.de, msg.value), name="recover")
            proc.result.add_callback(lambda f: None)

    def on_block_request(self, msg: Message) -> None:
        key = BlockKey(msg.de, msg.block, msg.version)
        if key not in self.store:
            self.send(MsgKind.BLOCK_NOT_FOUND, msg.src, de=msg.de, block=msg.block, version=msg.version)
            return
        state = self.states.get(msg.de)
        w = state.write_for(msg.block, msg.version) if state else None
        self.send(
            MsgKind.BLOCK_RESPONSE, msg.src, de=msg.de, block=msg.block, version=msg.version,
            content=self.store.get(key), own_block=w is not None and w.signer == self.node_id,
        )
        if msg.src == self.cloud_id and w is not None and self.cloud_id not in w.replicas:
            state.append_local(replication_update(msg.de, msg.block, msg.version, self.cloud_id, self.node_id))

    def on_block_response(self, msg: Message) -> None:
        key = BlockKey(msg.de, msg.block, msg.version)
        state = self.states.get(msg.de)
        w = state.write_for(msg.block, msg.version) if state else None
        replicating = self.repl_inflight.pop(key, None) is not None
        if w is None:
            self._wake(("block", key), None)
            return
        if content_hash(msg.content) != w.digest:
            self.bad_keys.add(key)
            self._provider_fault("IntegrityViolation", msg.de, f"{tuple(key)} from node {msg.src}")
            self._wake(("block", key), error=IntegrityViolation(tuple(key)))
            return
        if key not in self.store:
            self.store.put(key, msg.content)
            self.oracles.stored(self.node_id, key, w.digest)
        if replicating:
            self._announce(state, key)
        self._wake(("block", key), msg.content)

    def on_block_not_found(self, msg: Message) -> None:
        key = BlockKey(msg.de, msg.block, msg.version)
        if key in self.repl_inflight:
            # retry in NOT_FOUND_RETRY rather than waiting for the next tick
            self.repl_inflight[key] = self.now - REPL_TIMEOUT + NOT_FOUND_RETRY
            self.after(NOT_FOUND_RETRY, self._replicate, msg.de)
        self._wake(("block", key), None)


# ---------------------------------------------------------------------------
# provider rebuild
# ---------------------------------------------------------------------------

@dataclass
class ProviderSnapshot:
    states: dict[int, DEState] = field(default_factory=dict)
    store: BlockStore = field(default_factory=BlockStore)
    frontier: dict[int, int] = field(default_factory=dict)
    missing_head: dict[int, list[BlockKey]] = field(default_factory=dict)

    def read_block(self, de: int, block: int, keys: KeyRing, seq: int | None = None) -> bytes:
        state = self.states[de]
        snap = state.snapshot_at(state.head if seq is None else seq)
        w = snap.get(block)
        if w is None:
            return ZERO_BLOCK
        return decrypt_block(self.store.get(BlockKey(de, block, w.version)), de, block, w.version, keys)


def rebuild_from_devices(devices: list[Device], target: int = 3) -> ProviderSnapshot:
    """Rebuild the provider's DE states and block store from device caches.

    Each DE takes the longest log held by any device (all logs must be
    prefix-related), the union of replication records and the union of all
    stored blocks. Raises DataLoss if the snapshot at some DE's stable
    frontier cannot be materialized.
    """
    snap = ProviderSnapshot()
    des = sorted({de for d in devices for de in d.states})
    for de in des:
        views = [d.states[de] for d in devices if de in d.states]
        best = max(views, key=lambda s: (s.head, -views.index(s)))
        for v in views:
            for u in v.log:
                mine = best.log[best.by_seq[u.seq]]
                if mine.canonical() != u.canonical():
                    raise DeviceError(f"de {de}: devices disagree at seq {u.seq}")
        rebuilt = DEState(de, best.creator, best.block_count)
        rebuilt.ingest_remote([u.bare() for u in best.log], None, SigScheme.OFF, verify_signatures=False)
        for v in views:
            for w in v.writes():
                for r in w.attached:
                    rebuilt.attach(r)
        snap.states[de] = rebuilt
    for d in devices:
        for key in d.store:
            if key not in snap.store:
                snap.store.put(key, d.store.get(key))
    for de, state in snap.states.items():
        frontier = state.stable_frontier(target)
        snap.frontier[de] = frontier
        need = [BlockKey(de, w.block, w.version) for w in state.snapshot_at(frontier).values()]
        lost = [k for k in need if k not in snap.store]
        if lost:
            raise DataLoss(de, lost)
        head_need = [BlockKey(de, w.block, w.version) for w in state.snapshot_at(state.head).values()]
        snap.missing_head[de] = [k for k in head_need if k not in snap.store]
    return snap
