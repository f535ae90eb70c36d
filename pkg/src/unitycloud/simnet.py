"""Deterministic discrete-event network simulator.

Virtual time is an integer number of microseconds. Events are ordered by
(time, node id, insertion counter), so a run is fully determined by its seed,
its configuration and its workload. Node actors exchange :class:`Message`
objects through :meth:`Simulator.send`, which applies latency, optional
bandwidth caps, partitions and crashes, and does the byte accounting.

Long-running activities on a node (client operations, lease acquisition)
are written as generators that ``yield`` :class:`Sleep`, :class:`Future` or
:class:`WaitFor` objects; :meth:`Simulator.spawn` drives them.
"""

from __future__ import annotations

import heapq
import logging
import random
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from typing import Any, Callable, Generator, NamedTuple

from .crypto import SigScheme
from .wire import Message, MsgKind, block_bytes, signed_records, wire_size

log = logging.getLogger(__name__)

US = 1_000_000


def seconds(x: float) -> int:
    return int(round(x * US))


class InvariantViolation(Exception):
    def __init__(self, description: str, trace: list | None = None):
        super().__init__(description)
        self.description = description
        self.trace = trace or []


# ---------------------------------------------------------------------------
# processes
# ---------------------------------------------------------------------------

class Sleep(NamedTuple):
    duration: int


TIMEOUT = object()


class Future:
    __slots__ = ("sim", "done", "value", "error", "_callbacks")

    def __init__(self, sim: "Simulator"):
        self.sim = sim
        self.done = False
        self.value: Any = None
        self.error: BaseException | None = None
        self._callbacks: list[Callable[["Future"], None]] = []

    def resolve(self, value: Any = None) -> None:
        if self.done:
            return
        self.done, self.value = True, value
        self._fire()

    def fail(self, error: BaseException) -> None:
        if self.done:
            return
        self.done, self.error = True, error
        self._fire()

    def _fire(self) -> None:
        cbs, self._callbacks = self._callbacks, []
        for cb in cbs:
            cb(self)

    def add_callback(self, cb: Callable[["Future"], None]) -> None:
        if self.done:
            cb(self)
        else:
            self._callbacks.append(cb)


class WaitFor(NamedTuple):
    future: Future
    timeout: int


class Process:
    """Drives a generator on behalf of a node; dies when the node crashes."""

    def __init__(self, sim: "Simulator", node: "Node", gen: Generator, name: str = ""):
        self.sim, self.node, self.gen, self.name = sim, node, gen, name
        self.epoch = node.epoch
        self.result = Future(sim)
        self._token = 0

    @property
    def alive(self) -> bool:
        return self.epoch == self.node.epoch and not self.result.done

    def start(self) -> "Process":
        self.sim.schedule(self.sim.now, self.node.node_id, self._step, None, None)
        return self

    def _step(self, value: Any, error: BaseException | None) -> None:
        if not self.alive:
            return
        self._token += 1
        try:
            req = self.gen.throw(error) if error is not None else self.gen.send(value)
        except StopIteration as stop:
            self.result.resolve(stop.value)
            return
        except Exception as exc:  # surfaced to whoever waits on the process
            watched = bool(self.result._callbacks)
            self.result.fail(exc)
            if not watched and self.sim.strict_processes:
                raise
            return
        self._wait(req)

    def _wait(self, req: Any) -> None:
        token = self._token
        sim, nid = self.sim, self.node.node_id
        if isinstance(req, Sleep):
            sim.schedule(sim.now + req.duration, nid, self._resume, token, None, None)
        elif isinstance(req, Future):
            req.add_callback(lambda f: sim.schedule(sim.now, nid, self._resume, token, f.value, f.error))
        elif isinstance(req, WaitFor):
            req.future.add_callback(
                lambda f: sim.schedule(sim.now, nid, self._resume, token, f.value, f.error)
            )
            sim.schedule(sim.now + req.timeout, nid, self._resume, token, TIMEOUT, None)
        elif isinstance(req, Process):
            self._wait(req.result)
        else:
            raise TypeError(f"process {self.name} yielded {req!r}")

    def _resume(self, token: int, value: Any, error: BaseException | None) -> None:
        if token == self._token:
            self._step(value, error)


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------

@dataclass
class NodeCounters:
    up_block: int = 0
    up_control: int = 0
    down_block: int = 0
    down_control: int = 0
    up_new_block: int = 0
    signed_sent: int = 0
    msgs_sent: int = 0

    @property
    def up(self) -> int:
        return self.up_block + self.up_control

    @property
    def down(self) -> int:
        return self.down_block + self.down_control


class FaultEvent(NamedTuple):
    time: int
    node: int
    kind: str
    de: int
    detail: str


@dataclass
class OpRecord:
    device: int
    kind: str
    start: int
    end: int
    ok: bool
    phase: str = "io"


@dataclass
class ScenarioMetrics:
    nodes: dict[int, NodeCounters] = field(default_factory=lambda: defaultdict(NodeCounters))
    write_created: dict[tuple[int, int, int], int] = field(default_factory=dict)
    replication_latency: dict[tuple[int, int, int], int] = field(default_factory=dict)
    lease_switches: Counter = field(default_factory=Counter)  # per DE
    lease_acquired: Counter = field(default_factory=Counter)  # per new holder
    faults: list[FaultEvent] = field(default_factory=list)
    ops: list[OpRecord] = field(default_factory=list)
    sent_bytes: int = 0
    delivered_bytes: int = 0
    dropped_bytes: int = 0
    in_flight_bytes: int = 0

    def reset_traffic(self) -> None:
        """Zero byte counters and latencies (used after a setup phase).

        Lease-switch counts cover the whole run and are kept."""
        self.nodes = defaultdict(NodeCounters)
        self.sent_bytes = self.delivered_bytes = self.dropped_bytes = 0
        self.in_flight_bytes = 0
        self.replication_latency = {}
        self.write_created = {}

    def fault_kinds(self) -> list[str]:
        return [f.kind for f in self.faults]


# ---------------------------------------------------------------------------
# oracles
# ---------------------------------------------------------------------------

class Oracles:
    """Global safety checks, fed by node hooks as state changes.

    * lease exclusivity: at most one device HELD per DE,
    * prefix consistency: no two honest views disagree on a (de, seq),
    * store integrity: no device stores bytes whose hash differs from the log.
    """

    def __init__(self, sim: "Simulator"):
        self.sim = sim
        self.check_lease = True
        self.check_prefix = True
        self.check_store = True
        self.holders: dict[int, set[int]] = defaultdict(set)
        self._entries: dict[tuple[int, int], tuple[bytes, set[int]]] = {}
        self._digests: dict[tuple[int, int, int], bytes] = {}
        self.max_holders = 0

    def fail(self, description: str) -> None:
        raise InvariantViolation(description, list(self.sim.trace))

    def lease(self, device: int, de: int, held: bool) -> None:
        hs = self.holders[de]
        if held:
            hs.add(device)
        else:
            hs.discard(device)
        self.max_holders = max(self.max_holders, len(hs))
        if self.check_lease and len(hs) > 1:
            self.fail(f"t={self.sim.now}: lease exclusivity broken for de {de}: {sorted(hs)} hold it")

    def log_entry(self, node: int, upd) -> None:
        key = (upd.de, upd.seq)
        canon = upd.canonical()
        prev = self._entries.get(key)
        if prev is None:
            self._entries[key] = (canon, {node})
        elif prev[0] != canon:
            if self.check_prefix:
                self.fail(f"t={self.sim.now}: node {node} holds a divergent entry at de {upd.de} seq {upd.seq}")
            return
        else:
            prev[1].add(node)
        if upd.kind == 1:  # WRITE
            self._digests[(upd.de, upd.block, upd.version)] = upd.digest

    def unlog_entry(self, node: int, upd) -> None:
        key = (upd.de, upd.seq)
        prev = self._entries.get(key)
        if prev is None or prev[0] != upd.canonical():
            return
        prev[1].discard(node)
        if not prev[1]:
            del self._entries[key]
            if upd.kind == 1:
                self._digests.pop((upd.de, upd.block, upd.version), None)

    def stored(self, node: int, key, digest: bytes) -> None:
        if not self.check_store:
            return
        want = self._digests.get(tuple(key))
        if want is None or want != digest:
            self.fail(f"t={self.sim.now}: node {node} stored {tuple(key)} with unverified content")


# ---------------------------------------------------------------------------
# nodes and the simulator
# ---------------------------------------------------------------------------

class Node:
    role = "node"

    def __init__(self, node_id: int):
        self.node_id = node_id
        self.sim: Simulator | None = None
        self.epoch = 0
        self.crashed = False

    def attach(self, sim: "Simulator") -> None:
        self.sim = sim

    def start(self) -> None:
        pass

    @property
    def now(self) -> int:
        return self.sim.now

    def send(self, kind: MsgKind, dst: int, **fields) -> Message:
        msg = Message(kind, self.node_id, dst, **fields)
        self.sim.send(msg)
        return msg

    def after(self, delay: int, fn: Callable, *args) -> None:
        epoch = self.epoch

        def fire():
            if self.epoch == epoch and not self.crashed:
                fn(*args)

        self.sim.schedule(self.sim.now + delay, self.node_id, fire)

    def every(self, period: int, fn: Callable, phase: int = 0) -> None:
        def tick():
            fn()
            self.after(period, tick)

        self.after(phase, tick)

    def spawn(self, gen: Generator, name: str = "") -> Process:
        return Process(self.sim, self, gen, name).start()

    def future(self) -> Future:
        return Future(self.sim)

    def receive(self, msg: Message) -> None:
        handler = getattr(self, "on_" + msg.kind.name.lower(), None)
        if handler is None:
            log.debug("%s %d ignores %s", self.role, self.node_id, msg.kind.name)
            return
        handler(msg)

    def crash(self) -> None:
        self.crashed = True
        self.epoch += 1

    def recover(self) -> None:
        self.crashed = False
        self.start()

    def fault(self, kind: str, de: int = 0, detail: str = "") -> None:
        self.sim.metrics.faults.append(FaultEvent(self.sim.now, self.node_id, kind, de, detail))
        log.info("t=%d node %d fault %s de=%d %s", self.sim.now, self.node_id, kind, de, detail)


class Simulator:
    def __init__(
        self,
        seed: int = 0,
        scheme: SigScheme = SigScheme.SYM_HMAC_SHA1,
        latency: tuple[int, int] = (seconds(0.010), seconds(0.050)),
        caps: dict[int, tuple[float | None, float | None]] | None = None,
        trace: bool = False,
        trace_limit: int = 2000,
    ):
        self.seed = seed
        self.scheme = scheme
        self.latency = latency
        self.caps = caps or {}
        self.rng = random.Random(seed)
        self.now = 0
        self.nodes: dict[int, Node] = {}
        self.metrics = ScenarioMetrics()
        self.oracles = Oracles(self)
        self.partitioned: set[int] = set()
        self.strict_processes = True
        self.gc_observers: list[Callable] = []
        self._queue: list = []
        self._counter = 0
        self._msg_ids = 0
        self._link_free: dict[tuple[int, int], int] = {}
        self._up_free: dict[int, int] = defaultdict(int)
        self._down_free: dict[int, int] = defaultdict(int)
        self.events = 0
        self.trace_enabled = trace
        self.trace: list[tuple] = []
        self._trace_limit = trace_limit

    # -- setup ---------------------------------------------------------------

    def add(self, node: Node) -> Node:
        if node.node_id in self.nodes:
            raise ValueError(f"duplicate node id {node.node_id}")
        self.nodes[node.node_id] = node
        node.attach(self)
        return node

    def start(self) -> None:
        for nid in sorted(self.nodes):
            self.nodes[nid].start()

    # -- scheduling ----------------------------------------------------------

    def schedule(self, at: int, node_id: int, fn: Callable, *args) -> None:
        self._counter += 1
        heapq.heappush(self._queue, (at, node_id, self._counter, fn, args))

    def at(self, time: int, fn: Callable, *args) -> None:
        """Schedule a harness-level action (faults, workload starts)."""
        self.schedule(time, -1, fn, *args)

    def run(self, until: int | None = None, stop: Callable[[], bool] | None = None, max_events: int | None = None) -> int:
        """Process events in order; returns the virtual time reached."""
        q = self._queue
        while q:
            t = q[0][0]
            if until is not None and t > until:
                self.now = until
                break
            at, _, _, fn, args = heapq.heappop(q)
            self.now = at
            self.events += 1
            fn(*args)
            if stop is not None and stop():
                break
            if max_events is not None and self.events >= max_events:
                break
        return self.now

    # -- network -------------------------------------------------------------

    def is_up(self, node_id: int) -> bool:
        node = self.nodes.get(node_id)
        return node is not None and not node.crashed and node_id not in self.partitioned

    def send(self, msg: Message) -> None:
        self._msg_ids += 1
        msg.msg_id = self._msg_ids
        size = wire_size(msg, self.scheme)
        blk = block_bytes(msg, self.scheme)
        src = self.metrics.nodes[msg.src]
        src.up_block += blk
        src.up_control += size - blk
        src.msgs_sent += 1
        src.signed_sent += signed_records(msg)
        if blk and msg.own_block:
            src.up_new_block += blk
        self.metrics.sent_bytes += size
        self._trace("send", msg, size)
        if not (self.is_up(msg.src) and self.is_up(msg.dst)):
            self.metrics.dropped_bytes += size
            self._trace("drop", msg, size)
            return
        self.metrics.in_flight_bytes += size
        depart = self.now
        up_cap = self.caps.get(msg.src, (None, None))[0]
        if up_cap:
            start = max(self.now, self._up_free[msg.src])
            depart = start + int(size * 8 * US / up_cap)
            self._up_free[msg.src] = depart
        arrive = depart + self.rng.randint(*self.latency)
        down_cap = self.caps.get(msg.dst, (None, None))[1]
        if down_cap:
            start = max(arrive, self._down_free[msg.dst])
            arrive = start + int(size * 8 * US / down_cap)
            self._down_free[msg.dst] = arrive
        link = (msg.src, msg.dst)
        arrive = max(arrive, self._link_free.get(link, 0))  # per-link FIFO
        self._link_free[link] = arrive
        self.schedule(arrive, msg.dst, self._deliver, msg, size, blk)

    def _deliver(self, msg: Message, size: int, blk: int) -> None:
        self.metrics.in_flight_bytes -= size
        if not (self.is_up(msg.src) and self.is_up(msg.dst)):
            self.metrics.dropped_bytes += size
            self._trace("drop", msg, size)
            return
        dst = self.metrics.nodes[msg.dst]
        dst.down_block += blk
        dst.down_control += size - blk
        self.metrics.delivered_bytes += size
        self._trace("recv", msg, size)
        self.nodes[msg.dst].receive(msg)

    def _trace(self, what: str, msg: Message, size: int) -> None:
        if not self.trace_enabled:
            return
        self.trace.append((self.now, what, msg.src, msg.dst, msg.kind.name, msg.de, size))
        if len(self.trace) > self._trace_limit:
            del self.trace[: len(self.trace) - self._trace_limit]

    def note(self, text: str) -> None:
        if self.trace_enabled:
            self.trace.append((self.now, "note", -1, -1, text, 0, 0))

    # -- faults --------------------------------------------------------------

    def crash(self, node_id: int) -> None:
        self.note(f"crash {node_id}")
        self.nodes[node_id].crash()

    def recover(self, node_id: int) -> None:
        self.note(f"recover {node_id}")
        self.nodes[node_id].recover()

    def partition(self, node_ids) -> None:
        self.note(f"partition {sorted(node_ids)}")
        self.partitioned |= set(node_ids)

    def heal(self, node_ids=None) -> None:
        self.note("heal")
        if node_ids is None:
            self.partitioned.clear()
        else:
            self.partitioned -= set(node_ids)
