import hashlib
import hmac as hmac_ref

import pytest
from hypothesis import given, settings, strategies as st

from unitycloud.crypto import (
    BLOCK_SIZE,
    KeyRing,
    SigScheme,
    UnknownSigner,
    content_hash,
    decrypt_block,
    encrypt_block,
    make_keyrings,
    sign,
    signature_size,
    verify,
)


@pytest.fixture(scope="module")
def rings():
    return make_keyrings([2, 3], [0, 1], seed=7)


def test_sha1_known_vectors():
    # FIPS 180 test vectors
    assert content_hash(b"abc").hex() == "a9993e364706816aba3e25717850c26c9cd0d89d"
    assert content_hash(b"").hex() == "da39a3ee5e6b4b0d3255bfef95601890afd80709"


def test_signature_sizes():
    assert signature_size(SigScheme.ASYM_RSA2048) == 256
    assert signature_size(SigScheme.SYM_HMAC_SHA1) == 20
    assert signature_size(SigScheme.OFF) == 0


def test_scheme_aliases():
    assert SigScheme.parse("rsa") is SigScheme.ASYM_RSA2048
    assert SigScheme.parse("hmac-sha1") is SigScheme.SYM_HMAC_SHA1
    assert SigScheme.parse("off") is SigScheme.OFF
    with pytest.raises(ValueError):
        SigScheme.parse("md5")


def test_hmac_matches_reference(rings):
    payload = b"write 1 2 3"
    sig = sign(payload, SigScheme.SYM_HMAC_SHA1, rings[2], 2)
    assert sig == hmac_ref.new(rings[2].shared_mac_key, payload, hashlib.sha1).digest()
    assert verify(payload, sig, SigScheme.SYM_HMAC_SHA1, rings[3], 2)
    assert not verify(payload + b"x", sig, SigScheme.SYM_HMAC_SHA1, rings[3], 2)


def test_rsa_sign_verify(rings):
    payload = b"lease 5"
    sig = sign(payload, SigScheme.ASYM_RSA2048, rings[2], 2)
    assert len(sig) == 256
    assert verify(payload, sig, SigScheme.ASYM_RSA2048, rings[1], 2)  # providers can verify
    assert not verify(payload, sig, SigScheme.ASYM_RSA2048, rings[1], 3)
    tampered = bytes([sig[0] ^ 1]) + sig[1:]
    assert not verify(payload, tampered, SigScheme.ASYM_RSA2048, rings[3], 2)


def test_rsa_is_deterministic_per_seed():
    a = make_keyrings([2], [], seed=3)[2]
    b = make_keyrings([2], [], seed=3)[2]
    assert sign(b"x", SigScheme.ASYM_RSA2048, a, 2) == sign(b"x", SigScheme.ASYM_RSA2048, b, 2)


def test_cannot_sign_for_someone_else(rings):
    with pytest.raises(UnknownSigner):
        sign(b"x", SigScheme.SYM_HMAC_SHA1, rings[2], 3)
    with pytest.raises(UnknownSigner):
        sign(b"x", SigScheme.SYM_HMAC_SHA1, rings[1], 1)  # providers hold no MAC key


def test_provider_holds_no_data_key(rings):
    assert not rings[0].is_user_device
    assert rings[2].is_user_device
    assert isinstance(rings[2].provider_view(9), KeyRing)
    assert rings[2].provider_view(9).shared_data_key is None


@settings(max_examples=25, deadline=None)
@given(st.binary(min_size=1, max_size=64), st.integers(0, 2**40), st.integers(0, 2**20),
       st.integers(1, 2**31))
def test_encrypt_roundtrip(seedbytes, de, blk, version):
    data = (seedbytes * (BLOCK_SIZE // len(seedbytes) + 1))[:BLOCK_SIZE]
    ring = make_keyrings([2], [], seed=1, with_rsa=False)[2]
    ct = encrypt_block(data, de, blk, version, ring)
    assert len(ct) == BLOCK_SIZE
    assert decrypt_block(ct, de, blk, version, ring) == data


def test_distinct_versions_encrypt_differently(rings):
    data = bytes(BLOCK_SIZE)
    assert encrypt_block(data, 1, 0, 1, rings[2]) != encrypt_block(data, 1, 0, 2, rings[2])


def test_block_size_enforced(rings):
    with pytest.raises(ValueError):
        encrypt_block(b"short", 1, 0, 1, rings[2])
