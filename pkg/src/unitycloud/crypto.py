"""Signature schemes, content hashing and block encryption.

Three signing schemes are supported so bandwidth can be compared between
them: RSA-2048 (256-byte signatures), HMAC-SHA1 with a key shared by all
user devices (20-byte tags), and OFF (no signature at all).

Keys are derived deterministically from a seed so that a simulation replayed
with the same seed produces byte-identical signatures.
"""

from __future__ import annotations

import enum
import hashlib
import hmac
import random
import struct
from dataclasses import dataclass, field
from functools import lru_cache

import gmpy2
from cryptography.exceptions import InvalidSignature
from cryptography.hazmat.primitives import hashes
from cryptography.hazmat.primitives.asymmetric import padding, rsa
from cryptography.hazmat.primitives.ciphers import Cipher, algorithms, modes

BLOCK_SIZE = 4096
DIGEST_SIZE = 20
RSA_BITS = 2048
RSA_EXPONENT = 65537


class SigScheme(enum.Enum):
    ASYM_RSA2048 = "RSA2048"
    SYM_HMAC_SHA1 = "HMAC_SHA1"
    OFF = "OFF"

    @classmethod
    def parse(cls, text: str) -> "SigScheme":
        aliases = {
            "RSA": cls.ASYM_RSA2048,
            "RSA2048": cls.ASYM_RSA2048,
            "ASYM_RSA2048": cls.ASYM_RSA2048,
            "HMAC": cls.SYM_HMAC_SHA1,
            "HMAC_SHA1": cls.SYM_HMAC_SHA1,
            "SYM_HMAC_SHA1": cls.SYM_HMAC_SHA1,
            "OFF": cls.OFF,
            "NONE": cls.OFF,
        }
        try:
            return aliases[text.strip().upper().replace("-", "_")]
        except KeyError:
            raise ValueError(f"unknown signature scheme {text!r}") from None


_SIG_SIZES = {
    SigScheme.ASYM_RSA2048: 256,
    SigScheme.SYM_HMAC_SHA1: 20,
    SigScheme.OFF: 0,
}


def signature_size(scheme: SigScheme) -> int:
    return _SIG_SIZES[scheme]


class CryptoError(Exception):
    pass


class UnknownSigner(CryptoError):
    pass


class NoDataKey(CryptoError):
    pass


@dataclass
class KeyRing:
    """Key material held by one node.

    User devices get a signing key, every device's verification key and the
    two shared symmetric keys. Provider nodes (coordinator, cloud node) get
    verification keys only.
    """

    owner: int
    device_signing_key: rsa.RSAPrivateKey | None = None
    device_verify_keys: dict[int, rsa.RSAPublicKey] = field(default_factory=dict)
    shared_data_key: bytes | None = None
    shared_mac_key: bytes | None = None

    @property
    def is_user_device(self) -> bool:
        return self.shared_data_key is not None

    def provider_view(self, owner: int) -> "KeyRing":
        return KeyRing(owner=owner, device_verify_keys=dict(self.device_verify_keys))


def content_hash(data: bytes) -> bytes:
    return hashlib.sha1(data).digest()


def sign(payload: bytes, scheme: SigScheme, keys: KeyRing, signer: int) -> bytes:
    if scheme is SigScheme.OFF:
        return b""
    if signer != keys.owner:
        raise UnknownSigner(f"keyring of {keys.owner} cannot sign as {signer}")
    if scheme is SigScheme.SYM_HMAC_SHA1:
        if keys.shared_mac_key is None:
            raise UnknownSigner(f"node {signer} holds no MAC key")
        return hmac.new(keys.shared_mac_key, payload, hashlib.sha1).digest()
    if keys.device_signing_key is None:
        raise UnknownSigner(f"node {signer} holds no signing key")
    # PKCS#1 v1.5 is deterministic, which keeps replays byte-identical.
    return keys.device_signing_key.sign(payload, padding.PKCS1v15(), hashes.SHA256())


def verify(payload: bytes, sig: bytes, scheme: SigScheme, keys: KeyRing, signer: int) -> bool:
    if scheme is SigScheme.OFF:
        return True
    if len(sig) != signature_size(scheme):
        return False
    if scheme is SigScheme.SYM_HMAC_SHA1:
        if keys.shared_mac_key is None:
            return False
        expected = hmac.new(keys.shared_mac_key, payload, hashlib.sha1).digest()
        return hmac.compare_digest(expected, sig)
    pub = keys.device_verify_keys.get(signer)
    if pub is None:
        return False
    try:
        pub.verify(sig, payload, padding.PKCS1v15(), hashes.SHA256())
    except InvalidSignature:
        return False
    return True


def _block_nonce(de: int, block: int, version: int) -> bytes:
    return hashlib.sha256(struct.pack(">QQI", de, block, version)).digest()[:16]


def _ctr(keys: KeyRing, de: int, block: int, version: int) -> Cipher:
    if keys.shared_data_key is None:
        raise NoDataKey(f"node {keys.owner} holds no data key")
    return Cipher(algorithms.AES(keys.shared_data_key), modes.CTR(_block_nonce(de, block, version)))


def encrypt_block(plaintext: bytes, de: int, block: int, version: int, keys: KeyRing) -> bytes:
    if len(plaintext) != BLOCK_SIZE:
        raise ValueError(f"block must be {BLOCK_SIZE} bytes, got {len(plaintext)}")
    enc = _ctr(keys, de, block, version).encryptor()
    return enc.update(plaintext) + enc.finalize()


def decrypt_block(ciphertext: bytes, de: int, block: int, version: int, keys: KeyRing) -> bytes:
    if len(ciphertext) != BLOCK_SIZE:
        raise ValueError(f"block must be {BLOCK_SIZE} bytes, got {len(ciphertext)}")
    dec = _ctr(keys, de, block, version).decryptor()
    return dec.update(ciphertext) + dec.finalize()


# ---------------------------------------------------------------------------
# deterministic key generation
# ---------------------------------------------------------------------------

def _prime(rng: random.Random, bits: int) -> int:
    while True:
        # top two bits set so p*q has exactly 2*bits bits
        candidate = rng.getrandbits(bits) | (3 << (bits - 2)) | 1
        p = int(gmpy2.next_prime(candidate))
        if p.bit_length() == bits and gmpy2.gcd(RSA_EXPONENT, p - 1) == 1:
            return p


@lru_cache(maxsize=64)
def deterministic_rsa_key(seed: int, device: int) -> rsa.RSAPrivateKey:
    rng = random.Random(f"unity-rsa:{seed}:{device}")
    half = RSA_BITS // 2
    p = _prime(rng, half)
    q = _prime(rng, half)
    while q == p:
        q = _prime(rng, half)
    n = p * q
    d = pow(RSA_EXPONENT, -1, (p - 1) * (q - 1))
    numbers = rsa.RSAPrivateNumbers(
        p=p,
        q=q,
        d=d,
        dmp1=rsa.rsa_crt_dmp1(d, p),
        dmq1=rsa.rsa_crt_dmq1(d, q),
        iqmp=rsa.rsa_crt_iqmp(p, q),
        public_numbers=rsa.RSAPublicNumbers(RSA_EXPONENT, n),
    )
    return numbers.private_key()


def make_keyrings(
    devices: list[int],
    providers: list[int],
    seed: int = 0,
    with_rsa: bool = True,
) -> dict[int, KeyRing]:
    """Build one keyring per node id.

    ``with_rsa=False`` skips RSA key generation when the run will never use
    the asymmetric scheme.
    """
    rng = random.Random(f"unity-shared:{seed}")
    data_key = rng.randbytes(32)
    mac_key = rng.randbytes(20)
    signing = {d: deterministic_rsa_key(seed, d) for d in devices} if with_rsa else {}
    verify_keys = {d: k.public_key() for d, k in signing.items()}
    rings: dict[int, KeyRing] = {}
    for d in devices:
        rings[d] = KeyRing(
            owner=d,
            device_signing_key=signing.get(d),
            device_verify_keys=dict(verify_keys),
            shared_data_key=data_key,
            shared_mac_key=mac_key,
        )
    for p in providers:
        rings[p] = KeyRing(owner=p, device_verify_keys=dict(verify_keys))
    return rings
