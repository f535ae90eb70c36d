import hashlib

from conftest import Net, block
from unitycloud.block_store import BlockKey, NotFound
from unitycloud.simnet import seconds

DE = 100


def _write_blocks(n, writer=2, count=3):
    n.do(writer, n.dev[writer].create_entity(DE, count * 4096))
    for b in range(count):
        n.do(writer, n.dev[writer].write(DE, b, 0, block(b + 1)))


def test_cloud_pulls_every_write(net):
    _write_blocks(net)
    net.advance(40)
    for b in range(3):
        key = BlockKey(DE, b, 1)
        # the cloud only ever sees ciphertext
        stored = net.cloud.store.get(key)
        assert stored == net.dev[2].store.get(key)
        assert stored != block(b + 1)
        assert hashlib.sha1(stored).digest() == net.co.states[DE].write_for(b, 1).digest
    assert net.cloud.missing(DE) == []


def test_cloud_counts_as_replica(net):
    _write_blocks(net)
    net.advance(200)
    st = net.co.states[DE]
    for w in st.writes():
        assert 1 in st.replicas(w.block, w.version)
        assert len(set(st.replicas(w.block, w.version))) >= 3


def test_cloud_falls_back_to_replica_when_writer_down():
    n = Net()
    _write_blocks(n)
    # let another device replicate before the writer vanishes
    n.advance(100)
    n.cloud.store = type(n.cloud.store)()
    n.cloud.ever_stored.clear()
    n.sim.crash(2)
    n.advance(60)
    assert n.cloud._source_for(n.co.states[DE].write_for(0, 1)) != 2
    for b in range(3):
        assert BlockKey(DE, b, 1) in n.cloud.store


def test_policy_corrupt_and_drop(net):
    _write_blocks(net, count=1)
    net.advance(40)
    key = BlockKey(DE, 0, 1)
    good = net.cloud.serve_block_request(key, 3)
    net.cloud.policy.corrupt_blocks.add(key)
    assert not net.cloud.policy.honest
    bad = net.cloud.serve_block_request(key, 3)
    assert bad != good and len(bad) == len(good)
    net.cloud.policy.corrupt_blocks.clear()
    net.cloud.policy.drop_blocks.add(key)
    try:
        net.cloud.serve_block_request(key, 3)
        raise AssertionError("expected NotFound")
    except NotFound:
        pass


def test_cloud_gc_keeps_frontier_versions(net):
    net.do(2, net.dev[2].create_entity(DE, 4096))
    for v in range(4):
        net.do(2, net.dev[2].write(DE, 0, 0, block(v)))
        net.advance(120)
    net.advance(300)
    cloud = net.cloud
    kept = [k for k in cloud.store if k.de == DE]
    assert cloud.gc_freed > 0
    latest = net.co.states[DE].write_for(0, net.co.states[DE].latest_version(0))
    assert BlockKey(DE, 0, latest.version) in kept
    assert hashlib.sha1(cloud.store.get(BlockKey(DE, 0, latest.version))).digest() == latest.digest


def test_heartbeat_period_is_ten_seconds(net):
    assert net.cloud.heartbeat_period == seconds(10)
