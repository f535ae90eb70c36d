"""The provider's metadata service.

It keeps every DE's update log (signatures stored verbatim, never checked),
serves state fetches, arbitrates lease switches and tracks device liveness
through heartbeats. An :class:`AdversaryPolicy` turns on misbehaviour for
fault-injection scenarios.
"""

from __future__ import annotations

import enum
import logging
from dataclasses import dataclass, field, replace

from .crypto import SigScheme
from .simnet import Node, seconds
from .state_log import DEState, Update, UpdateKind
from .wire import CatalogEntry, Message, MsgKind, TableEntry

log = logging.getLogger(__name__)

TICK = seconds(1)
REVOCATION_RESEND = seconds(5)


class CoordinatorError(Exception):
    pass


class NotLeaseHolder(CoordinatorError):
    pass


class UnknownDE(CoordinatorError):
    pass


class UnknownDevice(CoordinatorError):
    pass


class DuplicateDE(CoordinatorError):
    pass


class DeviceStatus(enum.Enum):
    LIVE = "LIVE"
    SUSPECT_FAILED = "SUSPECT_FAILED"


class LeaseReply(enum.Enum):
    GRANT_PENDING = MsgKind.LH_GRANT_PENDING
    NACK = MsgKind.LH_NACK
    RECOVERY_NEEDED = MsgKind.LH_RECOVERY_NEEDED
    GRANTED = MsgKind.LH_GRANTED


@dataclass
class DeviceTableEntry:
    device: int
    address: int
    heartbeat_period: int
    last_seen: int = 0
    # set when the device ignored a revocation; cleared when it hands over
    unresponsive: bool = False

    def status(self, now: int) -> DeviceStatus:
        if self.unresponsive or now - self.last_seen > 2 * self.heartbeat_period:
            return DeviceStatus.SUSPECT_FAILED
        return DeviceStatus.LIVE


@dataclass
class LeaseRecord:
    de: int
    holder: int
    switch_in_progress: tuple[int, int] | None = None  # (requester, started)


@dataclass
class AdversaryPolicy:
    omit_updates: set[tuple[int, int, int]] = field(default_factory=set)  # (de, lo, hi) inclusive
    truncate_at: dict[int, int] = field(default_factory=dict)
    forge_replication: list[Update] = field(default_factory=list)
    equivocate: dict[tuple[int, int], list[Update]] = field(default_factory=dict)
    drop_lh_revocations: bool = False
    # (time, requester, de) for every response that hid an existing update
    withheld: list[tuple[int, int, int]] = field(default_factory=list)

    @property
    def honest(self) -> bool:
        return not (
            self.omit_updates
            or self.truncate_at
            or self.forge_replication
            or self.equivocate
            or self.drop_lh_revocations
        )


class Coordinator(Node):
    role = "coordinator"

    def __init__(
        self,
        node_id: int,
        devices: dict[int, int],
        replication_target: int = 3,
        scheme: SigScheme = SigScheme.SYM_HMAC_SHA1,
    ):
        """``devices`` maps every node that heartbeats (user devices and the
        cloud node) to its heartbeat period."""
        super().__init__(node_id)
        self.scheme = scheme
        self.replication_target = replication_target
        self.states: dict[int, DEState] = {}
        self.sizes: dict[int, int] = {}
        self.catalog: list[CatalogEntry] = []
        self.leases: dict[int, LeaseRecord] = {}
        self.table: dict[int, DeviceTableEntry] = {
            d: DeviceTableEntry(d, d, p) for d, p in sorted(devices.items())
        }
        self.policy = AdversaryPolicy()

    def start(self) -> None:
        self.every(TICK, self._tick, phase=TICK)

    def _clock(self) -> int:
        return self.sim.now if self.sim is not None else 0

    def _state(self, de: int) -> DEState:
        try:
            return self.states[de]
        except KeyError:
            raise UnknownDE(de) from None

    # -- operations ------------------------------------------------------------

    def create_de(self, de: int, creator: int, size: int) -> None:
        if de in self.states:
            raise DuplicateDE(de)
        blocks = -(-size // 4096)
        self.states[de] = DEState(de, creator, blocks)
        self.sizes[de] = size
        self.leases[de] = LeaseRecord(de, creator)
        self.catalog.append(CatalogEntry(de, creator, size))

    def handle_update_batch(self, de: int, sender: int, upds: list[Update]) -> int:
        """Store a batch verbatim; returns the resulting log head."""
        state = self._state(de)
        rec = self.leases[de]
        seq_upds = [u for u in upds if u.has_seq]
        if seq_upds and sender != rec.holder and not self._is_recovery(rec, sender, seq_upds[0]):
            if self.policy.honest:
                raise NotLeaseHolder(f"{sender} is not the lease-holder of de {de}")
        before = state.head
        report = state.ingest_remote(upds, None, self.scheme, verify_signatures=False)
        if not report.ok:
            log.warning("coordinator: batch for de %d from %d: %s", de, sender, report.detail)
        for u in state.log[before:]:
            if u.kind is UpdateKind.LEASE_HOLDER:
                self._lease_moved(rec, u)
        if self.sim is not None:
            self._note_replication(state, upds)
        return state.head

    def _is_recovery(self, rec: LeaseRecord, sender: int, first: Update) -> bool:
        if first.kind is not UpdateKind.LEASE_HOLDER:
            return False
        if first.old_lh != rec.holder or first.new_lh != sender:
            return False
        entry = self.table.get(rec.holder)
        return entry is None or entry.status(self._clock()) is DeviceStatus.SUSPECT_FAILED

    def _lease_moved(self, rec: LeaseRecord, u: Update) -> None:
        old = self.table.get(rec.holder)
        if old is not None and u.old_lh == rec.holder:
            old.unresponsive = False
        rec.holder = u.new_lh
        rec.switch_in_progress = None
        if self.sim is not None:
            self.sim.metrics.lease_switches[rec.de] += 1
            self.sim.metrics.lease_acquired[u.new_lh] += 1

    def _note_replication(self, state: DEState, upds: list[Update]) -> None:
        m = self.sim.metrics
        keys = set()
        for u in upds:
            if u.kind in (UpdateKind.WRITE, UpdateKind.REPLICATION):
                keys.add(u.key)
        for block, version in sorted(keys):
            k = (state.de, block, version)
            if k in m.replication_latency or k not in m.write_created:
                continue
            if len(state.replicas(block, version)) >= self.replication_target:
                m.replication_latency[k] = self.sim.now - m.write_created[k]

    def handle_state_fetch(self, de: int, since: int, requester: int) -> list[Update]:
        state = self._state(de)
        pol = self.policy
        alt = pol.equivocate.get((de, requester))
        if alt is not None:
            view = [u for u in alt if u.seq > since]
        else:
            view = state.fetch_since(since)
        if pol.honest:
            return view
        full = len(view)
        cut = pol.truncate_at.get(de)
        if cut is not None:
            view = [u for u in view if u.seq <= cut]
        omitted = [(lo, hi) for d, lo, hi in pol.omit_updates if d == de]
        if omitted:
            view = [u for u in view if not any(lo <= u.seq <= hi for lo, hi in omitted)]
        forged = [f for f in pol.forge_replication if f.de == de]
        if forged:
            out = []
            for u in view:
                extra = tuple(f for f in forged if u.kind is UpdateKind.WRITE and f.key == u.key)
                out.append(replace(u, attached=u.attached + extra) if extra else u)
            view = out
        if len(view) < full:
            pol.withheld.append((self._clock(), requester, de))
        return view

    def handle_lease_switch(self, de: int, requester: int) -> LeaseReply:
        self._state(de)
        rec = self.leases[de]
        if rec.switch_in_progress is not None:
            return LeaseReply.NACK
        if rec.holder == requester:
            return LeaseReply.GRANTED
        holder = self.table.get(rec.holder)
        if holder is not None and holder.status(self._clock()) is DeviceStatus.SUSPECT_FAILED:
            return LeaseReply.RECOVERY_NEEDED
        rec.switch_in_progress = (requester, self._clock())
        if not self.policy.drop_lh_revocations and self.sim is not None:
            self.send(MsgKind.LH_REVOCATION, rec.holder, de=de, value=requester)
        return LeaseReply.GRANT_PENDING

    def handle_heartbeat(self, device: int, now: int) -> None:
        entry = self.table.get(device)
        if entry is None:
            raise UnknownDevice(device)
        entry.last_seen = now

    def serve_device_table(self) -> list[DeviceTableEntry]:
        return list(self.table.values())

    def status(self, device: int) -> DeviceStatus:
        return self.table[device].status(self._clock())

    # -- timers ---------------------------------------------------------------

    def _tick(self) -> None:
        now = self.now
        for de in sorted(self.leases):
            rec = self.leases[de]
            if rec.switch_in_progress is None:
                continue
            requester, started = rec.switch_in_progress
            holder = self.table.get(rec.holder)
            period = holder.heartbeat_period if holder else TICK
            if now - started > 2 * period:
                if holder is not None:
                    holder.unresponsive = True
                rec.switch_in_progress = None
                self.send(MsgKind.LH_RECOVERY_NEEDED, requester, de=de)
            elif (now - started) // REVOCATION_RESEND > (now - TICK - started) // REVOCATION_RESEND and not (
                self.policy.drop_lh_revocations
            ):
                # the holder may have been briefly unreachable; ask again
                self.send(MsgKind.LH_REVOCATION, rec.holder, de=de, value=requester)

    # -- message handlers ----------------------------------------------------

    def on_heartbeat(self, msg: Message) -> None:
        try:
            self.handle_heartbeat(msg.src, self.now)
        except UnknownDevice:
            return
        now = self.now
        table = tuple(
            TableEntry(e.device, e.status(now) is DeviceStatus.LIVE, e.heartbeat_period, e.last_seen)
            for e in self.table.values()
        )
        self.send(MsgKind.HEARTBEAT_ACK, msg.src, table=table, value=len(self.catalog), reply_to=msg.msg_id)

    def on_catalog_fetch(self, msg: Message) -> None:
        self.send(MsgKind.CATALOG_RESPONSE, msg.src, value=msg.value, catalog=tuple(self.catalog[msg.value:]))

    def on_create_de(self, msg: Message) -> None:
        try:
            self.create_de(msg.de, msg.src, msg.value)
        except DuplicateDE:
            self.send(MsgKind.CREATE_DUPLICATE, msg.src, de=msg.de)
            return
        self.send(MsgKind.CREATE_ACK, msg.src, de=msg.de)

    def on_update_batch(self, msg: Message) -> None:
        try:
            head = self.handle_update_batch(msg.de, msg.src, list(msg.updates))
        except (NotLeaseHolder, UnknownDE) as exc:
            log.info("coordinator rejects batch: %s", exc)
            self.send(MsgKind.BATCH_REJECT, msg.src, de=msg.de, reply_to=msg.msg_id)
            return
        self.send(MsgKind.BATCH_ACK, msg.src, de=msg.de, value=head, reply_to=msg.msg_id)

    def on_state_fetch(self, msg: Message) -> None:
        try:
            view = self.handle_state_fetch(msg.de, msg.value, msg.src)
        except UnknownDE:
            self.send(MsgKind.UNKNOWN_DE, msg.src, de=msg.de)
            return
        self.send(
            MsgKind.STATE_RESPONSE, msg.src, de=msg.de, value=msg.value, updates=tuple(view), reply_to=msg.msg_id
        )

    def on_lh_switch(self, msg: Message) -> None:
        try:
            reply = self.handle_lease_switch(msg.de, msg.src)
        except UnknownDE:
            self.send(MsgKind.UNKNOWN_DE, msg.src, de=msg.de)
            return
        self.send(reply.value, msg.src, de=msg.de)
