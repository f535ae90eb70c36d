import pytest
from hypothesis import given, settings, strategies as st

from unitycloud.block_store import BlockKey, BlockStore, ConflictingContent, NotFound, SizeMismatch

B = 4096


def blk(x: int) -> bytes:
    return bytes([x % 256]) * B


def test_put_get_and_idempotent_put():
    s = BlockStore()
    k = BlockKey(1, 2, 3)
    s.put(k, blk(5))
    s.put(k, blk(5))
    assert s.get(k) == blk(5) and len(s) == 1 and k in s
    with pytest.raises(ConflictingContent):
        s.put(k, blk(6))


def test_size_and_missing():
    s = BlockStore()
    with pytest.raises(SizeMismatch):
        s.put(BlockKey(1, 0, 1), b"x")
    with pytest.raises(NotFound):
        s.get(BlockKey(1, 0, 1))
    with pytest.raises(NotFound):
        s.latest_version(1, 0)


def test_versions_and_latest():
    s = BlockStore()
    for v in (1, 3, 2):
        s.put(BlockKey(4, 7, v), blk(v))
    s.put(BlockKey(4, 8, 9), blk(9))
    assert s.versions(4, 7) == [1, 2, 3]
    assert s.latest_version(4, 7) == 3
    assert s.keys_for(4) == [BlockKey(4, 7, 1), BlockKey(4, 7, 2), BlockKey(4, 7, 3), BlockKey(4, 8, 9)]


def test_gc_and_compaction_keep_survivors():
    s = BlockStore()
    keys = [BlockKey(1, b, 1) for b in range(10)]
    for i, k in enumerate(keys):
        s.put(k, blk(i))
    freed = s.gc(keys[:7] + [BlockKey(9, 9, 9)])
    assert freed == 7 * B
    assert s.bytes_dead == 0  # more than half was dead, so the arena was compacted
    assert [s.get(k) for k in keys[7:]] == [blk(7), blk(8), blk(9)]


def test_save_load_roundtrip(tmp_path):
    path = tmp_path / "store.bin"
    s = BlockStore(path)
    s.put(BlockKey(1, 1, 1), blk(1))
    s.put(BlockKey(2, 0, 5), blk(2))
    s.save()
    t = BlockStore(path)
    assert list(t) == list(s)
    assert t.get(BlockKey(2, 0, 5)) == blk(2)


def test_key_pack_roundtrip():
    k = BlockKey(2**40, 17, 2**31)
    assert BlockKey.unpack(k.pack()) == k


@settings(max_examples=60, deadline=None)
@given(st.lists(st.tuples(st.sampled_from(["put", "gc"]), st.integers(0, 3), st.integers(0, 3), st.integers(1, 3))))
def test_matches_dict_model(script):
    s, model = BlockStore(), {}
    for op, de, b, v in script:
        k = BlockKey(de, b, v)
        if op == "put":
            s.put(k, blk(de * 16 + b * 4 + v))
            model[k] = blk(de * 16 + b * 4 + v)
        else:
            s.gc([k])
            model.pop(k, None)
        assert sorted(model) == list(s)
        assert all(s.get(x) == model[x] for x in model)
