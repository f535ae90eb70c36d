"""Acceptance suite: one test (or group of tests) per criterion.

Each test records its outcome; the terminal summary prints one PASS/FAIL
line per criterion.
"""

import contextlib
import hashlib
import random
import time
from dataclasses import replace
from pathlib import Path

import pytest

from conftest import ACCEPTANCE, Net, block, prefix_consistent, store_mismatches, brute_frontier
from unitycloud import scenario as S
from unitycloud.block_store import BlockKey
from unitycloud.crypto import SigScheme, content_hash
from unitycloud.device import rebuild_from_devices
from unitycloud.simnet import seconds
from unitycloud.state_log import UpdateKind, replication_update, write_update
from unitycloud.wire import Message, MsgKind, update_frame_size, wire_size

GOLDEN = Path(__file__).parent / "golden"
DE = 100
LH_PERIOD = seconds(30)


@contextlib.contextmanager
def criterion(n, part=""):
    """Record the enclosed assertions as (part of) criterion ``n``."""
    note = {"detail": ""}
    try:
        yield note
    except BaseException as exc:
        ACCEPTANCE.setdefault(n, {})[part] = (False, f"{type(exc).__name__}: {exc}".splitlines()[0][:160])
        print(f"criterion {n}{part} FAIL")
        raise
    ACCEPTANCE.setdefault(n, {})[part] = (True, note["detail"] or "ok")
    print(f"criterion {n}{part} PASS {note['detail']}")


# ---------------------------------------------------------------------------
# 1. safety over randomized seeds
# ---------------------------------------------------------------------------

def random_fault_scenario(seed):
    rng = random.Random(seed)
    dev = rng.choice([2, 3, 4])
    at = rng.uniform(0, 20)
    faults = [{"at": at, "crash": dev}, {"at": at + rng.uniform(5, 60), "recover": dev}]
    if rng.random() < 0.5:
        p = rng.choice([2, 3, 4])
        at = rng.uniform(0, 30)
        faults += [{"at": at, "partition": [p]}, {"at": at + rng.uniform(5, 90), "heal": [p]}]
    return S.from_dict({
        "seed": seed,
        "workload": {"name": "random", "ops": 4, "des": 2, "blocks": 3},
        "faults": faults, "settle": 0, "quiet": 30, "io_limit": 120, "trace": False,
    })


def test_1_safety_suite():
    with criterion(1) as note:
        start = time.perf_counter()
        bad = []
        max_holders = 0
        for seed in range(1000):
            r = S.run(random_fault_scenario(seed))
            sysm = r.system
            if not r.ok:
                bad.append((seed, r.violation.description))
                continue
            max_holders = max(max_holders, sysm.sim.oracles.max_holders)
            for de in sysm.coordinator.states:
                views = {d: dev.states[de] for d, dev in sysm.devices.items() if de in dev.states}
                views[0] = sysm.coordinator.states[de]
                if prefix_consistent(views):
                    bad.append((seed, f"prefix divergence in de {de}"))
            if store_mismatches(sysm.devices.values()):
                bad.append((seed, "hash-mismatched bytes in a store"))
        elapsed = time.perf_counter() - start
        note["detail"] = f"1000 seeds, {len(bad)} violations, max concurrent holders {max_holders}, {elapsed:.1f}s"
        assert not bad, bad[:5]
        assert max_holders <= 1
        assert elapsed <= 30


# ---------------------------------------------------------------------------
# 2. adversary detection
# ---------------------------------------------------------------------------

def test_2a_truncation_and_omission():
    with criterion(2, "a") as note:
        sc = S.from_dict({"seed": 3, "workload": {"name": "swrite", "blocks": 5, "scale": 1},
                          "faults": [{"at": 5, "adversary": {"truncate_at": {DE: "head"}}}], "quiet": 200})
        r = S.run(sc)
        assert r.ok
        withheld = r.system.coordinator.policy.withheld
        # the writer holds its own updates; the others depend on the coordinator
        victims = sorted({d for _, d, de in withheld if d in r.system.devices and d != 2 and de == DE})
        assert victims, "the coordinator never withheld anything"
        delays = {}
        for d in victims:
            t0 = min(t for t, dd, _ in withheld if dd == d)
            hits = [f for f in r.metrics.faults
                    if f.node == d and f.kind in ("GapDetected", "SuspectTruncation") and f.time >= t0]
            assert hits, f"device {d} never detected the truncation"
            delays[d] = (hits[0].time - t0) / 1e6
            assert hits[0].time - t0 <= 2 * LH_PERIOD
        # omission of a middle range shows up as a sequence gap
        sc = S.from_dict({"seed": 4, "workload": {"name": "swrite", "blocks": 8, "scale": 1},
                          "faults": [{"at": 0.0001, "adversary": {"omit": [[DE, 3, 4]]}}], "quiet": 200})
        r2 = S.run(sc)
        gaps = [f for f in r2.metrics.faults if f.kind == "GapDetected"]
        assert gaps and {f.de for f in gaps} == {DE}
        note["detail"] = "truncation detected after " + ", ".join(f"dev{d} {s:.1f}s" for d, s in delays.items()) \
            + f"; omission -> GapDetected at {sorted({f.node for f in gaps})}"


def _seeded_de(n, blocks=2):
    n.do(2, n.dev[2].create_entity(DE, 4 * 4096))
    for b in range(blocks):
        n.do(2, n.dev[2].write(DE, b, 0, block(b + 1)))
    n.advance(70)


def test_2b_equivocation():
    with criterion(2, "b") as note:
        n = Net(seed=1)
        n.sim.oracles.check_prefix = False  # the provider is lying on purpose
        _seeded_de(n)
        co = n.co
        honest = co.states[DE]
        h = honest.head
        forged = write_update(DE, 3, 1, content_hash(b"other view"), 2)
        forged = replace(forged, seq=h + 1).signed(n.sim.scheme, n.keys[2])
        co.policy.equivocate[(DE, 3)] = list(honest.log) + [forged]
        n.advance(40)
        victim = n.dev[3].states[DE]
        assert victim.head == h + 1 and victim.entry(h + 1).canonical() == forged.canonical()
        assert not n.faults()
        co.policy.equivocate.clear()

        cross = []
        real = n.dev[3].on_state_response

        def spy(msg):
            if not cross and any(u.seq == h + 1 and u.canonical() != forged.canonical() for u in msg.updates):
                cross.append(n.sim.now)
            real(msg)

        n.dev[3].on_state_response = spy
        n.do(2, n.dev[2].write(DE, 0, 0, block(9)))
        n.advance(70)
        forks = n.faults("ForkDetected")
        assert cross, "the victim never fetched the other view"
        assert forks and forks[0].node == 3 and forks[0].de == DE
        assert forks[0].time == cross[0]
        assert {f.kind for f in n.faults() if f.node == 3} <= {"ForkDetected"}
        note["detail"] = f"ForkDetected at dev3 on first cross-view fetch (t={cross[0] / 1e6:.2f}s)"


def test_2c_forged_replication():
    with criterion(2, "c") as note:
        n = Net(seed=2)
        _seeded_de(n)
        n.sim.crash(4)  # the claimed replicator never really holds the block
        n.advance(130)
        key = (1, 2)  # block 1, version 2: not written yet
        forged = replication_update(DE, *key, 4, 4)
        forged = replace(forged, sig=bytes(20))  # not a valid HMAC
        n.co.policy.forge_replication.append(forged)
        n.do(2, n.dev[2].write(DE, 1, 0, block(50)))
        n.advance(70)
        victim = n.dev[3].states[DE]
        bad = [f for f in n.faults() if f.node == 3]
        assert bad and bad[0].kind == "BadSignature" and bad[0].de == DE
        assert 4 not in victim.replicas(*key)
        honest = set(n.co.states[DE].replicas(*key))
        assert set(victim.replicas(*key)) <= honest
        for w in victim.writes():
            for rec in w.attached:
                assert rec.verify(n.sim.scheme, n.keys[3])
        note["detail"] = f"BadSignature at dev3, replicas of (1,2) at victim {sorted(set(victim.replicas(*key)))}"


def test_2d_corrupted_block():
    with criterion(2, "d") as note:
        sc = S.from_dict({"seed": 5, "workload": {"name": "sread", "blocks": 6, "scale": 1},
                          "faults": [{"at": 0, "cloud": {"corrupt": [[DE, 0, 1]]}}], "quiet": 60})
        r = S.run(sc)
        assert r.ok  # the store oracle checks every put
        hits = [f for f in r.metrics.faults if f.kind == "IntegrityViolation"]
        assert hits and hits[0].node == 2 and hits[0].de == DE
        dev = r.system.devices[2]
        key = BlockKey(DE, 0, 1)
        want = r.system.coordinator.states[DE].write_for(0, 1).digest
        assert key not in dev.store or hashlib.sha1(dev.store.get(key)).digest() == want
        assert not store_mismatches(r.system.devices.values())
        note["detail"] = f"IntegrityViolation at dev{hits[0].node}, corrupted bytes never stored"


# ---------------------------------------------------------------------------
# 3. durability
# ---------------------------------------------------------------------------

def _durability_run(seed):
    rng = random.Random(seed)
    n = Net(seed=seed)
    des = {100: 6, 101: 4, 102: 3}
    ref = {}
    for i, (de, size) in enumerate(des.items()):
        creator = 2 + i % 3
        n.do(creator, n.dev[creator].create_entity(de, size * 4096))
    for _ in range(120):
        d = rng.choice([2, 3, 4])
        de = rng.choice(sorted(des))
        b = rng.randrange(des[de])
        data = rng.randbytes(4096)
        n.do(d, n.dev[d].write(de, b, 0, data), limit=seconds(900))
        ref[(de, b)] = data
    # quiescence: every write at or above target
    co = n.co

    def replicated():
        return all(len(set(st.replicas(w.block, w.version))) >= 3 for st in co.states.values() for w in st.writes())

    for _ in range(60):
        if replicated():
            break
        n.advance(10)
    assert replicated()
    n.advance(130)  # every device polls at least twice more and learns the last records
    n.sim.crash(0)
    n.sim.crash(1)
    keys = n.keys[2]

    def check(devs):
        snap = rebuild_from_devices(devs)
        for de, size in des.items():
            assert snap.frontier[de] == snap.states[de].head
            assert not snap.missing_head[de]
            for b in range(size):
                assert snap.read_block(de, b, keys) == ref.get((de, b), bytes(4096)), (de, b)

    check(list(n.dev.values()))
    for gone in n.dev:
        check([d for i, d in n.dev.items() if i != gone])


@pytest.mark.parametrize("seed", range(5))
def test_3_durability(seed):
    with criterion(3, f"seed{seed}") as note:
        start = time.perf_counter()
        _durability_run(seed)
        elapsed = time.perf_counter() - start
        note["detail"] = f"bit-exact with all devices and each single-device loss, {elapsed:.2f}s"
        assert elapsed < 5


# ---------------------------------------------------------------------------
# 4. replication convergence
# ---------------------------------------------------------------------------

@pytest.mark.parametrize("preset", ["swrite", "compile-like", "random"])
def test_4_replication_convergence(preset):
    with criterion(4, preset) as note:
        if preset == "random":
            sc = S.from_dict({"seed": 7, "workload": {"name": "random", "ops": 40, "des": 3, "blocks": 5,
                                                      "write_ratio": 0.8, "gap_s": 5}, "quiet": 300})
        else:
            sc = S.load(preset)
        r = S.run(sc)
        assert r.ok
        m = r.metrics
        assert m.write_created
        missing = set(m.write_created) - set(m.replication_latency)
        assert not missing, f"{len(missing)} writes never reached the target"
        worst = max(m.replication_latency.values())
        s = S.latency_summary(r)
        note["detail"] = f"{s['writes']} writes, mean {s['mean_s']:.2f}s p95 {s['p95_s']:.2f}s max {s['max_s']:.2f}s"
        assert worst <= 3 * seconds(60) + seconds(10)


# ---------------------------------------------------------------------------
# 5. GC safety
# ---------------------------------------------------------------------------

def test_5_gc_safety(monkeypatch):
    with criterion(5) as note:
        checks = {"gc": 0, "bad": []}
        real_build = S.build_system

        def build(sc):
            system = real_build(sc)
            nodes = [system.cloud, *system.devices.values()]

            def observe(node, de):
                checks["gc"] += 1
                st = node.states[de]
                frontier, snap = brute_frontier(st, 3)
                if frontier != st.stable_frontier(3):
                    checks["bad"].append((node.node_id, de, "frontier", frontier, st.stable_frontier(3)))
                for w in snap.values():
                    key = BlockKey(de, w.block, w.version)
                    if not any(key in x.store and hashlib.sha1(x.store.get(key)).digest() == w.digest
                               for x in nodes):
                        checks["bad"].append((node.node_id, de, tuple(key)))

            system.sim.gc_observers.append(observe)
            return system

        monkeypatch.setattr(S, "build_system", build)
        sc = S.from_dict({"seed": 5, "trace": False, "quiet": 300,
                          "workload": {"name": "random", "ops": 300, "des": 2, "blocks": 6,
                                       "write_ratio": 0.9, "gap_s": 2, "devices": 2}})
        r = S.run(sc)
        writes = len(r.metrics.write_created)
        note["detail"] = f"{writes} writes, {checks['gc']} GC passes checked, {len(checks['bad'])} bad"
        assert r.ok
        assert writes >= 500
        assert checks["gc"] > 0
        assert not checks["bad"], checks["bad"][:5]


# ---------------------------------------------------------------------------
# 6. bandwidth accounting
# ---------------------------------------------------------------------------

def test_6a_wire_size_examples():
    with criterion(6, "a") as note:
        w = write_update(DE, 1, 1, bytes(20), 2)
        w = replace(w, seq=5, attached=(replication_update(DE, 1, 1, 3, 3),))
        # a framed WRITE with two replicas listed (writer + one attached)
        assert update_frame_size(w, SigScheme.ASYM_RSA2048) == 24 + (8 + 4 + 8 + 20 + 2 + 16) + 256 == 338
        assert update_frame_size(w, SigScheme.SYM_HMAC_SHA1) == 24 + 58 + 20 == 102
        resp = Message(MsgKind.BLOCK_RESPONSE, 1, 2, de=DE, block=0, version=1, content=bytes(4096))
        assert wire_size(resp, SigScheme.ASYM_RSA2048) == 4132
        note["detail"] = "338 / 102 / 4132 bytes"


def _control(r):
    return sum(c.up_control for c in r.metrics.nodes.values())


def _signed(r):
    return sum(c.signed_sent for c in r.metrics.nodes.values())


@pytest.mark.parametrize("preset,scale", [("swrite", 0.005), ("compile-like", 0.005)])
def test_6b_scheme_delta(preset, scale):
    with criterion(6, preset) as note:
        runs = {}
        for scheme in ("RSA", "HMAC", "OFF"):
            sc = S.load(preset, [f"scheme={scheme}", "network=UNLIMITED", f"workload.scale={scale}"])
            runs[scheme] = S.run(sc)
            assert runs[scheme].ok
        signed = _signed(runs["HMAC"])
        assert signed == _signed(runs["RSA"]) == _signed(runs["OFF"]) > 0
        delta = _control(runs["RSA"]) - _control(runs["HMAC"])
        assert delta == 236 * signed
        assert _control(runs["HMAC"]) - _control(runs["OFF"]) == 20 * signed
        assert _control(runs["RSA"]) > _control(runs["HMAC"]) > _control(runs["OFF"])
        rsa = runs["RSA"].metrics.nodes
        ctrl = sum(c.up_control + c.down_control for c in rsa.values())
        blk = sum(c.up_block + c.down_block for c in rsa.values())
        note["detail"] = f"delta {delta} = 236 x {signed}; RSA control/block {ctrl / blk:.2f}"
        if preset == "swrite":
            assert ctrl > blk  # control data dominates under RSA when writing


# ---------------------------------------------------------------------------
# 7. false sharing
# ---------------------------------------------------------------------------

def _fs(mapper, n, ops):
    r = S.run(S.load("false-sharing", [f"workload.mapper={mapper}", f"workload.devices={n}", f"workload.ops={ops}"]))
    assert r.ok and not r.unfinished
    tp = S.throughput(r)
    return sum(r.metrics.lease_switches.values()), min(tp.values())


def test_7_false_sharing():
    with criterion(7) as note:
        grid = {(m, n, k): _fs(m, n, k) for m in ("ubd", "ufs") for n in (1, 2, 3) for k in (40, 80)}
        sw = {key: v[0] for key, v in grid.items()}
        tp = {key: v[1] for key, v in grid.items()}
        for k in (40, 80):
            assert sw[("ubd", 1, k)] == 0
            for n in (2, 3):
                assert sw[("ubd", n, k)] >= 0.5 * n * k
            assert sw[("ubd", 3, k)] > sw[("ubd", 2, k)]
        for n in (2, 3):
            assert sw[("ubd", n, 80)] >= 1.8 * sw[("ubd", n, 40)]
        ubd_drop = tp[("ubd", 1, 80)] / tp[("ubd", 3, 80)]
        assert ubd_drop >= 5
        for n in (1, 2, 3):
            # one file creation per device plus a constant
            assert sw[("ufs", n, 40)] == sw[("ufs", n, 80)] <= n + 2
        ufs_drop = tp[("ufs", 1, 80)] / tp[("ufs", 3, 80)]
        assert ufs_drop <= 1.2
        note["detail"] = (
            "UBD switches " + " ".join(f"{n}x{k}:{sw[('ubd', n, k)]}" for n in (1, 2, 3) for k in (40, 80))
            + f"; UBD drop {ubd_drop:.1f}x; UFS switches {[sw[('ufs', n, 80)] for n in (1, 2, 3)]}"
            + f"; UFS drop {ufs_drop:.2f}x"
        )


# ---------------------------------------------------------------------------
# 8. upload savings
# ---------------------------------------------------------------------------

@pytest.mark.parametrize("preset", ["swrite", "compile-like"])
def test_8_upload_savings(preset):
    with criterion(8, preset) as note:
        r = S.run(S.load(preset, ["workload.scale=0.005"]))
        assert r.ok
        lh = 2
        c = r.metrics.nodes[lh]
        new_blocks = {k for k in r.metrics.write_created if k[0] == DE}
        assert c.up_new_block > 0
        # the writer ships each new block-version exactly once, to the cloud
        assert c.up_new_block == len(new_blocks) * (4096 + 12)
        assert S.upload_savings(c.up_new_block, 3) == c.up_new_block
        assert str(c.up_new_block) in S.text_report(r)
        note["detail"] = f"LH savings {c.up_new_block} bytes = its new-block bytes"


# ---------------------------------------------------------------------------
# 9. determinism
# ---------------------------------------------------------------------------

@pytest.mark.parametrize("preset", ["compile-like", "swrite", "sread", "false-sharing"])
def test_9_golden_csv(preset):
    with criterion(9, preset) as note:
        got = S.metrics_csv(S.run(S.load(preset)))
        assert got == (GOLDEN / f"{preset}.csv").read_text()
        note["detail"] = "identical"


def test_9_rerun_identical():
    with criterion(9, "rerun") as note:
        a = S.run(random_fault_scenario(42))
        b = S.run(random_fault_scenario(42))
        assert S.metrics_csv(a) == S.metrics_csv(b)
        assert a.metrics.faults == b.metrics.faults
        note["detail"] = "same seed, same CSV"
