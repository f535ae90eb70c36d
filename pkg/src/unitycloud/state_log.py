"""Per-DE append-only state log.

The log holds the sequence-numbered updates (WRITE, NOOP, LEASE_HOLDER) of
one data entity in sequence order, starting at seq 1. REPLICATION updates
carry no sequence number; they are attached to the WRITE they refer to.
"""

from __future__ import annotations

import enum
import struct
from dataclasses import dataclass, field, replace
from typing import Iterable

from .crypto import KeyRing, SigScheme, sign, verify


class UpdateKind(enum.IntEnum):
    WRITE = 1
    NOOP = 2
    LEASE_HOLDER = 3
    REPLICATION = 4


SEQ_KINDS = frozenset({UpdateKind.WRITE, UpdateKind.NOOP, UpdateKind.LEASE_HOLDER})


class StateLogError(Exception):
    pass


class DuplicateBlockVersion(StateLogError):
    pass


@dataclass(frozen=True)
class Update:
    kind: UpdateKind
    de: int
    seq: int = 0
    block: int = 0
    version: int = 0
    digest: bytes = b""
    old_lh: int = 0
    new_lh: int = 0
    replicator: int = 0
    signer: int = 0
    sig: bytes = b""
    # REPLICATION records riding along with a WRITE; not covered by its signature
    attached: tuple["Update", ...] = ()

    @property
    def has_seq(self) -> bool:
        return self.kind in SEQ_KINDS

    @property
    def key(self) -> tuple[int, int]:
        return (self.block, self.version)

    @property
    def replicas(self) -> tuple[int, ...]:
        if self.kind is not UpdateKind.WRITE:
            return ()
        out = [self.signer]
        for r in self.attached:
            if r.replicator not in out:
                out.append(r.replicator)
        return tuple(out)

    def canonical(self) -> bytes:
        head = struct.pack(">BQ", self.kind, self.de)
        k = self.kind
        if k is UpdateKind.WRITE:
            body = struct.pack(">QQI20sQ", self.seq, self.block, self.version, self.digest, self.signer)
        elif k is UpdateKind.NOOP:
            body = struct.pack(">QQ", self.seq, self.signer)
        elif k is UpdateKind.LEASE_HOLDER:
            body = struct.pack(">QQQQ", self.seq, self.old_lh, self.new_lh, self.signer)
        else:
            body = struct.pack(">QIQQ", self.block, self.version, self.replicator, self.signer)
        return head + body

    def signed(self, scheme: SigScheme, keys: KeyRing) -> "Update":
        return replace(self, sig=sign(self.canonical(), scheme, keys, self.signer))

    def verify(self, scheme: SigScheme, keys: KeyRing) -> bool:
        return verify(self.canonical(), self.sig, scheme, keys, self.signer)

    def bare(self) -> "Update":
        return replace(self, attached=()) if self.attached else self


def write_update(de: int, block: int, version: int, digest: bytes, signer: int) -> Update:
    return Update(UpdateKind.WRITE, de, block=block, version=version, digest=digest, signer=signer)


def noop_update(de: int, signer: int) -> Update:
    return Update(UpdateKind.NOOP, de, signer=signer)


def lease_holder_update(de: int, old: int, new: int, signer: int) -> Update:
    return Update(UpdateKind.LEASE_HOLDER, de, old_lh=old, new_lh=new, signer=signer)


def replication_update(de: int, block: int, version: int, replicator: int, signer: int) -> Update:
    return Update(
        UpdateKind.REPLICATION, de, block=block, version=version, replicator=replicator, signer=signer
    )


@dataclass(frozen=True)
class TransferSeal:
    """Signed "last sequence number" handed directly from old to new lease-holder."""

    de: int
    seq: int
    signer: int
    sig: bytes = b""

    def canonical(self) -> bytes:
        return b"T" + struct.pack(">QQQ", self.de, self.seq, self.signer)

    def signed(self, scheme: SigScheme, keys: KeyRing) -> "TransferSeal":
        return replace(self, sig=sign(self.canonical(), scheme, keys, self.signer))

    def verify(self, scheme: SigScheme, keys: KeyRing) -> bool:
        return verify(self.canonical(), self.sig, scheme, keys, self.signer)


class Fault(enum.Enum):
    BAD_SIGNATURE = "BadSignature"
    FORK = "ForkDetected"
    GAP = "GapDetected"


@dataclass
class IngestReport:
    accepted: int = 0
    fault: Fault | None = None
    fault_seq: int = 0
    attached: int = 0
    detail: str = ""

    @property
    def ok(self) -> bool:
        return self.fault is None


class TruncationStatus(enum.Enum):
    OK = "ok"
    SUSPECT = "SuspectTruncation"


def truncation_check(now: int, last_ingest_time: int, lh_heartbeat: int, ingested: int = 0) -> TruncationStatus:
    if ingested:
        return TruncationStatus.OK
    if now - last_ingest_time > 2 * lh_heartbeat:
        return TruncationStatus.SUSPECT
    return TruncationStatus.OK


@dataclass
class OutBatch:
    """Double buffer between update producers and the controller."""

    front: list[Update] = field(default_factory=list)
    back: list[Update] = field(default_factory=list)

    def push(self, upd: Update) -> None:
        self.front.append(upd)

    def swap(self) -> list[Update]:
        self.front, self.back = [], self.front
        out, self.back = self.back, []
        return out

    def __len__(self) -> int:
        return len(self.front)


class DEState:
    """Append-only log of one DE with its block-version and sequence indexes."""

    def __init__(self, de: int, creator: int, block_count: int = 0):
        self.de = de
        self.creator = creator
        self.block_count = block_count
        self.log: list[Update] = []
        self.by_seq: dict[int, int] = {}
        self.by_block_version: dict[tuple[int, int], int] = {}
        self.batch = OutBatch()
        self._latest: dict[int, int] = {}  # block -> position of newest WRITE
        self._replications: dict[tuple[int, int], dict[int, Update]] = {}
        self._pending: dict[tuple[int, int], dict[int, Update]] = {}
        self._frontier_pos: dict[int, int] = {}
        self.current_lh = creator

    # -- queries -----------------------------------------------------------

    @property
    def head(self) -> int:
        return self.log[-1].seq if self.log else 0

    def __len__(self) -> int:
        return len(self.log)

    def entry(self, seq: int) -> Update:
        """The log entry at ``seq`` with its replications attached."""
        return self._materialize(self.log[self.by_seq[seq]])

    def write_for(self, block: int, version: int) -> Update | None:
        pos = self.by_block_version.get((block, version))
        return None if pos is None else self._materialize(self.log[pos])

    def latest_write(self, block: int) -> Update | None:
        pos = self._latest.get(block)
        return None if pos is None else self.log[pos]

    def latest_version(self, block: int) -> int:
        w = self.latest_write(block)
        return 0 if w is None else w.version

    def replicas(self, block: int, version: int) -> tuple[int, ...]:
        pos = self.by_block_version.get((block, version))
        if pos is None:
            return ()
        return self._materialize(self.log[pos]).replicas

    def writes(self) -> Iterable[Update]:
        for u in self.log:
            if u.kind is UpdateKind.WRITE:
                yield self._materialize(u)

    def holders(self) -> list[int]:
        """Lease-holders in log order, starting with the creator."""
        chain = [self.creator]
        for u in self.log:
            if u.kind is UpdateKind.LEASE_HOLDER:
                chain.append(u.new_lh)
        return chain

    def _materialize(self, upd: Update) -> Update:
        if upd.kind is not UpdateKind.WRITE:
            return upd
        reps = self._replications.get(upd.key)
        if not reps:
            return upd
        return replace(upd, attached=tuple(reps.values()))

    # -- local production --------------------------------------------------

    def append_local(self, upd: Update) -> int:
        """Append an update produced on this node; returns its sequence number.

        REPLICATION updates are attached and queued but get no sequence number.
        """
        if upd.kind is UpdateKind.REPLICATION:
            self.attach(upd)
            self.batch.push(upd)
            return 0
        if upd.kind is UpdateKind.WRITE and upd.key in self.by_block_version:
            raise DuplicateBlockVersion(f"de {self.de}: block {upd.block} version {upd.version} exists")
        upd = replace(upd, de=self.de, seq=self.head + 1, attached=())
        self._append(upd)
        self.batch.push(upd)
        return upd.seq

    def swap_out_batch(self) -> list[Update]:
        return self.batch.swap()

    def sign_batch(self, upds: list[Update], scheme: SigScheme, keys: KeyRing) -> list[Update]:
        """Sign drained updates and store the signed copies back in the log."""
        out = []
        for u in upds:
            s = u.signed(scheme, keys)
            if s.has_seq:
                pos = self.by_seq.get(s.seq)
                if pos is not None and self.log[pos].canonical() == s.canonical():
                    self.log[pos] = s
            else:
                reps = self._replications.get(s.key)
                if reps is not None and s.replicator in reps:
                    reps[s.replicator] = s
            out.append(s)
        return out

    def rollback_after(self, seq: int) -> list[Update]:
        """Remove never-acknowledged local entries with seq > ``seq``.

        Only used for entries the coordinator never confirmed (crash or
        disconnection of the lease-holder); published history is untouched.
        """
        if seq >= self.head:
            return []
        cut = self.by_seq[seq + 1]
        removed = self.log[cut:]
        del self.log[cut:]
        for u in removed:
            del self.by_seq[u.seq]
            if u.kind is UpdateKind.WRITE:
                del self.by_block_version[u.key]
                reps = self._replications.pop(u.key, None)
                if reps:
                    self._pending[u.key] = reps
        self._latest = {}
        for pos, u in enumerate(self.log):
            if u.kind is UpdateKind.WRITE:
                self._latest[u.block] = pos
        self._recompute_lh()
        self._frontier_pos.clear()
        removed_seqs = {u.seq for u in removed}
        self.batch.front = [u for u in self.batch.front if not (u.has_seq and u.seq in removed_seqs)]
        return removed

    # -- remote ingestion --------------------------------------------------

    def ingest_remote(
        self,
        upds: Iterable[Update],
        keys: KeyRing | None,
        scheme: SigScheme,
        *,
        verify_signatures: bool = True,
        proxy_replicators: frozenset[int] = frozenset(),
    ) -> IngestReport:
        """Verify and merge updates returned by a state fetch.

        Stops at the first fault. Already-held updates are accepted silently
        when their canonical bytes match, and raise a fork fault otherwise.
        """
        rep = IngestReport()
        check = verify_signatures and scheme is not SigScheme.OFF
        for upd in upds:
            if upd.de != self.de:
                rep.fault, rep.fault_seq = Fault.BAD_SIGNATURE, upd.seq
                rep.detail = f"update for de {upd.de} in fetch of de {self.de}"
                return rep
            if upd.kind is UpdateKind.REPLICATION:
                if not self._ingest_replication(upd, keys, scheme, check, proxy_replicators, rep):
                    return rep
                continue
            head = self.head
            if upd.seq <= head:
                mine = self.log[self.by_seq[upd.seq]]
                if mine.canonical() != upd.canonical():
                    rep.fault, rep.fault_seq = Fault.FORK, upd.seq
                    rep.detail = "two distinct updates share a sequence number"
                    return rep
            elif upd.seq == head + 1:
                if check and (keys is None or not upd.verify(scheme, keys)):
                    rep.fault, rep.fault_seq = Fault.BAD_SIGNATURE, upd.seq
                    rep.detail = f"signature of seq {upd.seq} does not verify"
                    return rep
                if verify_signatures and not self._authorized(upd):
                    rep.fault, rep.fault_seq = Fault.BAD_SIGNATURE, upd.seq
                    rep.detail = f"seq {upd.seq} signed by {upd.signer}, not the lease-holder"
                    return rep
                if upd.kind is UpdateKind.WRITE and upd.key in self.by_block_version:
                    rep.fault, rep.fault_seq = Fault.FORK, upd.seq
                    rep.detail = f"second WRITE for block {upd.block} version {upd.version}"
                    return rep
                self._append(upd.bare())
                rep.accepted += 1
            else:
                rep.fault, rep.fault_seq = Fault.GAP, upd.seq
                rep.detail = f"log ends at {head}, fetch resumed at {upd.seq}"
                return rep
            for r in upd.attached:
                if not self._ingest_replication(r, keys, scheme, check, proxy_replicators, rep):
                    return rep
        return rep

    def _ingest_replication(self, r, keys, scheme, check, proxies, rep) -> bool:
        known = self._replications.get(r.key) or self._pending.get(r.key) or {}
        if r.replicator in known:
            return True
        if check:
            signer_ok = r.signer == r.replicator or r.replicator in proxies
            if not signer_ok or keys is None or not r.verify(scheme, keys):
                rep.fault = Fault.BAD_SIGNATURE
                rep.detail = f"replication of ({r.block},{r.version}) by {r.replicator} does not verify"
                return False
        if self.attach(r):
            rep.attached += 1
        return True

    def _authorized(self, upd: Update) -> bool:
        if upd.kind is UpdateKind.LEASE_HOLDER:
            return upd.old_lh == self.current_lh and upd.signer in (upd.old_lh, upd.new_lh)
        return upd.signer == self.current_lh

    def attach(self, r: Update) -> bool:
        """Attach a REPLICATION record; returns True if it was new."""
        target = self._replications if r.key in self.by_block_version else self._pending
        slot = target.setdefault(r.key, {})
        if r.replicator in slot:
            return False
        slot[r.replicator] = r.bare()
        return target is self._replications

    def _append(self, upd: Update) -> None:
        pos = len(self.log)
        self.log.append(upd)
        self.by_seq[upd.seq] = pos
        if upd.kind is UpdateKind.WRITE:
            self.by_block_version[upd.key] = pos
            self._latest[upd.block] = pos
            pending = self._pending.pop(upd.key, None)
            if pending:
                self._replications[upd.key] = pending
        elif upd.kind is UpdateKind.LEASE_HOLDER:
            self.current_lh = upd.new_lh

    def _recompute_lh(self) -> None:
        self.current_lh = self.holders()[-1]

    # -- serving -----------------------------------------------------------

    def fetch_since(self, since: int) -> list[Update]:
        start = self.by_seq.get(since + 1)
        if start is None:
            return [] if since >= self.head else [self._materialize(u) for u in self.log]
        return [self._materialize(u) for u in self.log[start:]]

    # -- durability --------------------------------------------------------

    def stable_frontier(self, target: int) -> int:
        """Largest seq S such that every WRITE with seq <= S has >= target replicas."""
        pos = self._frontier_pos.get(target, 0)
        log = self.log
        while pos < len(log):
            u = log[pos]
            if u.kind is UpdateKind.WRITE and len(self._replica_set(u)) < target:
                break
            pos += 1
        self._frontier_pos[target] = pos
        if pos == len(log):
            return self.head
        return log[pos].seq - 1

    def _replica_set(self, u: Update) -> set[int]:
        reps = self._replications.get(u.key)
        s = {u.signer}
        if reps:
            s.update(reps)
        return s

    def gc_eligible(self, target: int) -> set[tuple[int, int]]:
        frontier = self.stable_frontier(target)
        newest: dict[int, int] = {}
        for u in self.log:
            if u.seq > frontier:
                break
            if u.kind is UpdateKind.WRITE:
                newest[u.block] = u.version
        out = set()
        for u in self.log:
            if u.seq > frontier:
                break
            if u.kind is UpdateKind.WRITE and newest[u.block] != u.version:
                out.add(u.key)
        return out

    def snapshot_at(self, seq: int) -> dict[int, Update]:
        """Newest WRITE per block among entries with seq <= ``seq``."""
        snap: dict[int, Update] = {}
        for u in self.log:
            if u.seq > seq:
                break
            if u.kind is UpdateKind.WRITE:
                snap[u.block] = u
        return snap

    def oldest_under_replicated(self, target: int, exclude: frozenset[int] = frozenset()) -> int:
        """Seq of the oldest WRITE short of ``target`` replicas, or 0 if none."""
        for u in self.log:
            if u.kind is UpdateKind.WRITE and len(self._replica_set(u) - exclude) < target:
                return u.seq
        return 0
