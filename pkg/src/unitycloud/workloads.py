"""Client workloads driven through the device API.

Each workload is split into a setup generator (creates DEs and seeds data,
run before traffic counters are reset) and one I/O generator per worker
device. Every client call is recorded as an :class:`OpRecord`.
"""

from __future__ import annotations

import random
from dataclasses import dataclass, field
from typing import Callable, Generator

from .crypto import BLOCK_SIZE
from .device import Device, DeviceError
from .mappers import UFS, MapperError, UbdMapping, ubd_io
from .simnet import OpRecord, Sleep, seconds

UBD_DE = 100  # DE id used by UBD workloads (UFS allocates its own)

FULL_COMPILE_WRITES = 28_274
FULL_STREAM_BLOCKS = 60_811
DEFAULT_SCALE = 1 / 50


@dataclass
class WorkloadPlan:
    setup: Callable[[], Generator] | None = None
    setup_device: int = 0
    io: dict[int, Callable[[], Generator]] = field(default_factory=dict)


def recorded(dev: Device, kind: str, gen: Generator, phase: str = "io"):
    start = dev.now
    ok = True
    result = None
    try:
        result = yield from gen
    except (DeviceError, MapperError):
        ok = False
    dev.sim.metrics.ops.append(OpRecord(dev.node_id, kind, start, dev.now, ok, phase))
    return result


def block_payload(tag: int, block: int, version: int) -> bytes:
    head = f"{tag}:{block}:{version};".encode()
    return (head * (BLOCK_SIZE // len(head) + 1))[:BLOCK_SIZE]


def _ubd_write(dev, mapping, block, data, phase="io"):
    return recorded(dev, "write", ubd_io(dev, mapping, block * BLOCK_SIZE, data, True), phase)


def _ubd_read(dev, mapping, block, phase="io"):
    return recorded(dev, "read", ubd_io(dev, mapping, block * BLOCK_SIZE, BLOCK_SIZE, False), phase)


def _scaled(n: int, scale: float) -> int:
    return max(1, int(round(n * scale)))


# ---------------------------------------------------------------------------
# the three bandwidth workloads (UBD)
# ---------------------------------------------------------------------------

def compile_like(devices: dict[int, Device], params: dict, rng: random.Random) -> WorkloadPlan:
    """Mixed reads and writes: reads of seeded source blocks and of earlier
    output, writes of fresh output blocks with occasional rewrites."""
    writes = _scaled(params.get("writes", FULL_COMPILE_WRITES), params.get("scale", DEFAULT_SCALE))
    read_ratio = params.get("read_ratio", 0.7)
    worker, seeder = params.get("worker", 2), params.get("seeder", 3)
    sources = params.get("source_blocks", max(1, writes // 2))
    mapping = UbdMapping(UBD_DE, (sources + writes) * BLOCK_SIZE)
    total = int(round(writes / (1 - read_ratio)))
    ops = ["w"] * writes + ["r"] * (total - writes)
    rng.shuffle(ops)
    seed_dev, dev = devices[seeder], devices[worker]

    def setup():
        yield from seed_dev.create_entity(UBD_DE, mapping.size)
        for b in range(sources):
            yield from _ubd_write(seed_dev, mapping, b, block_payload(seeder, b, 1), "setup")

    def io():
        written: list[int] = []
        nxt = sources
        for i, op in enumerate(ops):
            if op == "w":
                if written and rng.random() < 0.2:
                    b = rng.choice(written[-32:])
                else:
                    b, nxt = nxt, nxt + 1
                    written.append(b)
                yield from _ubd_write(dev, mapping, b, block_payload(worker, b, i))
            else:
                if written and rng.random() < 0.3:
                    b = rng.choice(written)
                else:
                    b = rng.randrange(sources)
                yield from _ubd_read(dev, mapping, b)

    return WorkloadPlan(setup, seeder, {worker: io})


def swrite(devices: dict[int, Device], params: dict, rng: random.Random) -> WorkloadPlan:
    blocks = _scaled(params.get("blocks", FULL_STREAM_BLOCKS), params.get("scale", DEFAULT_SCALE))
    worker = params.get("worker", 2)
    mapping = UbdMapping(UBD_DE, blocks * BLOCK_SIZE)
    dev = devices[worker]

    def setup():
        yield from dev.create_entity(UBD_DE, mapping.size)

    def io():
        for b in range(blocks):
            yield from _ubd_write(dev, mapping, b, block_payload(worker, b, 1))

    return WorkloadPlan(setup, worker, {worker: io})


def sread(devices: dict[int, Device], params: dict, rng: random.Random) -> WorkloadPlan:
    """Sequential read of a file written (and replicated) during setup by
    another device, so every block comes from the cloud node."""
    blocks = _scaled(params.get("blocks", FULL_STREAM_BLOCKS), params.get("scale", DEFAULT_SCALE))
    worker, seeder = params.get("worker", 2), params.get("seeder", 3)
    mapping = UbdMapping(UBD_DE, blocks * BLOCK_SIZE)
    seed_dev, dev = devices[seeder], devices[worker]

    def setup():
        yield from seed_dev.create_entity(UBD_DE, mapping.size)
        for b in range(blocks):
            yield from _ubd_write(seed_dev, mapping, b, block_payload(seeder, b, 1), "setup")

    def io():
        for b in range(blocks):
            yield from _ubd_read(dev, mapping, b)

    return WorkloadPlan(setup, seeder, {worker: io})


# ---------------------------------------------------------------------------
# false sharing: n devices, disjoint data, UBD or UFS
# ---------------------------------------------------------------------------

def false_sharing(devices: dict[int, Device], params: dict, rng: random.Random) -> WorkloadPlan:
    mapper = params.get("mapper", "ubd")
    n = params.get("devices", 3)
    ops = params.get("ops", 100)
    region = params.get("region_blocks", 8)
    think = seconds(params.get("think_ms", 50) / 1000)
    ids = sorted(devices)
    if not 1 <= n <= len(ids):
        raise ValueError(f"false-sharing needs 1..{len(ids)} devices, got {n}")
    if mapper not in ("ubd", "ufs"):
        raise ValueError(f"unknown mapper {mapper!r}")
    workers = ids[:n]
    first = devices[workers[0]]

    def op_sequence(dev, do_write, do_read):
        for i in range(ops):
            yield Sleep(think)
            b = i % region
            if i % 2 == 0:
                yield from recorded(dev, "write", do_write(b, block_payload(dev.node_id, b, i)))
            else:
                yield from recorded(dev, "read", do_read(b))

    if mapper == "ubd":
        mapping = UbdMapping(UBD_DE, n * region * BLOCK_SIZE)

        def setup():
            yield from first.create_entity(UBD_DE, mapping.size)

        def make_io(k, dev):
            base = k * region * BLOCK_SIZE

            def io():
                yield from op_sequence(
                    dev,
                    lambda b, data: ubd_io(dev, mapping, base + b * BLOCK_SIZE, data, True),
                    lambda b: ubd_io(dev, mapping, base + b * BLOCK_SIZE, BLOCK_SIZE, False),
                )
            return io

        return WorkloadPlan(setup, workers[0], {w: make_io(k, devices[w]) for k, w in enumerate(workers)})

    filesystems = {w: UFS(devices[w]) for w in workers}

    def setup():
        fs0 = filesystems[workers[0]]
        yield from fs0.format()
        for w in workers:
            fs = filesystems[w]
            if fs is not fs0:
                yield devices[w].spawn(fs.mount())
            yield devices[w].spawn(recorded(devices[w], "create", fs.create(f"file-{w}", region * BLOCK_SIZE), "setup"))

    def make_ufs_io(w):
        fs, dev = filesystems[w], devices[w]
        name = f"file-{w}"

        def io():
            yield from op_sequence(
                dev,
                lambda b, data: fs.io(name, b * BLOCK_SIZE, data, True),
                lambda b: fs.io(name, b * BLOCK_SIZE, BLOCK_SIZE, False),
            )
        return io

    return WorkloadPlan(setup, workers[0], {w: make_ufs_io(w) for w in workers})


def idle(devices: dict[int, Device], params: dict, rng: random.Random) -> WorkloadPlan:
    return WorkloadPlan()


def random_ops(devices: dict[int, Device], params: dict, rng: random.Random) -> WorkloadPlan:
    """Small randomized multi-device workload over a few shared DEs."""
    des = params.get("des", 2)
    blocks = params.get("blocks", 4)
    ops = params.get("ops", 6)
    ids = sorted(devices)
    creators = {100 + i: ids[i % len(ids)] for i in range(des)}
    write_ratio = params.get("write_ratio", 0.5)
    workers = ids[: params.get("devices", len(ids))]
    max_gap = seconds(params.get("gap_s", 20))
    plans = {d: [(rng.choice(list(creators)), rng.randrange(blocks), rng.random() < write_ratio)
                 for _ in range(ops)] for d in workers}
    gaps = {d: [rng.randint(0, max_gap) for _ in range(ops)] for d in workers}

    def setup():
        for de, c in sorted(creators.items()):
            yield devices[c].spawn(devices[c].create_entity(de, blocks * BLOCK_SIZE))

    def make_io(d):
        dev = devices[d]

        def io():
            for (de, b, is_write), gap in zip(plans[d], gaps[d]):
                yield Sleep(gap)
                if is_write:
                    data = block_payload(d, b, dev.now)
                    yield from recorded(dev, "write", dev.write(de, b, 0, data))
                else:
                    yield from recorded(dev, "read", dev.read(de, b, 0, BLOCK_SIZE))
        return io

    return WorkloadPlan(setup, ids[0], {d: make_io(d) for d in workers})


def _mixed_ops(dev, n, write_ratio, rng, targets, do_write, do_read):
    for i in range(n):
        t = rng.choice(targets)
        if rng.random() < write_ratio:
            yield from recorded(dev, "write", do_write(t, block_payload(dev.node_id, i, 0)))
        else:
            yield from recorded(dev, "read", do_read(t))


def ubd_mixed(devices: dict[int, Device], params: dict, rng: random.Random) -> WorkloadPlan:
    """Random block reads and writes on one UBD volume shared by ``devices`` devices."""
    blocks = params.get("blocks", 16)
    ops = params.get("ops", 50)
    ratio = params.get("write_ratio", 0.5)
    workers = sorted(devices)[: params.get("devices", 1)]
    mapping = UbdMapping(UBD_DE, blocks * BLOCK_SIZE)

    def setup():
        yield from devices[workers[0]].create_entity(UBD_DE, mapping.size)

    def make_io(w):
        dev, local = devices[w], random.Random(rng.random())

        def io():
            yield from _mixed_ops(
                dev, ops, ratio, local, list(range(blocks)),
                lambda b, data: ubd_io(dev, mapping, b * BLOCK_SIZE, data, True),
                lambda b: ubd_io(dev, mapping, b * BLOCK_SIZE, BLOCK_SIZE, False),
            )
        return io

    return WorkloadPlan(setup, workers[0], {w: make_io(w) for w in workers})


def ufs_mixed(devices: dict[int, Device], params: dict, rng: random.Random) -> WorkloadPlan:
    """Random whole-block I/O over ``files`` UFS files from ``devices`` devices."""
    files = params.get("files", 4)
    size = params.get("file_blocks", 4)
    ops = params.get("ops", 50)
    ratio = params.get("write_ratio", 0.5)
    workers = sorted(devices)[: params.get("devices", 1)]
    filesystems = {w: UFS(devices[w]) for w in workers}
    names = [f"f{i}" for i in range(files)]
    targets = [(name, b) for name in names for b in range(size)]

    def setup():
        fs0 = filesystems[workers[0]]
        yield from fs0.format()
        for name in names:
            yield from recorded(devices[workers[0]], "create", fs0.create(name, size * BLOCK_SIZE), "setup")
        for w in workers[1:]:
            yield devices[w].spawn(filesystems[w].mount())

    def make_io(w):
        fs, dev, local = filesystems[w], devices[w], random.Random(rng.random())

        def io():
            yield from _mixed_ops(
                dev, ops, ratio, local, targets,
                lambda t, data: fs.io(t[0], t[1] * BLOCK_SIZE, data, True),
                lambda t: fs.io(t[0], t[1] * BLOCK_SIZE, BLOCK_SIZE, False),
            )
        return io

    return WorkloadPlan(setup, workers[0], {w: make_io(w) for w in workers})


WORKLOADS = {
    "ubd": ubd_mixed,
    "ufs": ufs_mixed,
    "compile-like": compile_like,
    "swrite": swrite,
    "sread": sread,
    "false-sharing": false_sharing,
    "random": random_ops,
    "idle": idle,
}
