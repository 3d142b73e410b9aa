"""Hash, key derivation and AEAD primitives.

Fixed project-wide choices: SHA-256 for hashing, HKDF-SHA256 (RFC 5869) for key
derivation and AES-256-GCM-SIV (RFC 8452) for authenticated encryption.
GCM-SIV is nonce-misuse resistant, which matters here: a prover that aborts
and retries from unchanged NVM re-derives the same session key and counter.
"""

from __future__ import annotations

import enum
import hashlib
import hmac
from dataclasses import dataclass, field
from typing import NamedTuple

from cryptography.exceptions import InvalidTag
from cryptography.hazmat.primitives import hashes
from cryptography.hazmat.primitives.ciphers.aead import AESGCMSIV
from cryptography.hazmat.primitives.kdf.hkdf import HKDF

from .errors import AuthFailure, LengthExceeded, NonceReuse

DIGEST_SIZE = 32
KEY_SIZE = 32
TAG_SIZE = 16
NONCE_SIZE = 12
# HKDF-Expand can produce at most 255 hash blocks.
MAX_KDF_BITS = 255 * DIGEST_SIZE * 8
PROTOCOL_LABEL = b"PhenoAuth/v1"

# AEAD plaintexts: one role byte, binds message direction.
AUTH_REQ = 0x01
AUTH_OK = 0x02


def digest(data: bytes) -> bytes:
    """SHA-256 of ``data``."""
    return hashlib.sha256(data).digest()


class KeyRole(enum.Enum):
    SESSION = "mk"
    SUBKEY = "derived"


@dataclass(eq=False)
class SymmetricKey:
    """Key material held in a mutable buffer so it can be wiped."""

    material: bytearray
    role: KeyRole = KeyRole.SESSION

    def __post_init__(self) -> None:
        self.material = bytearray(self.material)

    def __bytes__(self) -> bytes:
        return bytes(self.material)

    def __len__(self) -> int:
        return len(self.material)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, SymmetricKey):
            return NotImplemented
        return hmac.compare_digest(bytes(self.material), bytes(other.material))

    def __repr__(self) -> str:
        return f"SymmetricKey(role={self.role.value}, len={len(self.material)})"

    def wipe(self) -> None:
        for i in range(len(self.material)):
            self.material[i] = 0

    @property
    def wiped(self) -> bool:
        return not any(self.material)


def kdf(seed: bytes, length: int, salt: bytes, context: bytes,
        role: KeyRole = KeyRole.SESSION) -> SymmetricKey:
    """HKDF-SHA256 extract-then-expand.

    ``length`` is in bits and must be a whole number of bytes.
    """
    if not seed:
        raise ValueError("kdf seed must be nonempty")
    if length <= 0 or length % 8:
        raise ValueError(f"kdf length must be a positive multiple of 8 bits, got {length}")
    if length > MAX_KDF_BITS:
        raise LengthExceeded(f"{length} bits exceeds HKDF-SHA256 bound of {MAX_KDF_BITS}")
    okm = HKDF(algorithm=hashes.SHA256(), length=length // 8, salt=salt, info=context).derive(bytes(seed))
    return SymmetricKey(bytearray(okm), role)


class AeadOutput(NamedTuple):
    ciphertext: bytes
    tag: bytes


class NonceCounter:
    """Per-session AEAD counter; the prover walks even values, the verifier odd."""

    def __init__(self, prover: bool, start: int = 0) -> None:
        self.parity = 0 if prover else 1
        self.value = start * 2 + self.parity

    def next(self) -> int:
        n = self.value
        if n >= 1 << 64:
            raise OverflowError("nonce counter exhausted")
        self.value += 2
        return n


def _nonce(n: int) -> bytes:
    if not 0 <= n < 1 << 64:
        raise ValueError("nonce counter must fit in 64 bits")
    return n.to_bytes(8, "little") + bytes(NONCE_SIZE - 8)


def aead_encrypt(key: SymmetricKey | bytes, n: int, ad: bytes, m: bytes) -> AeadOutput:
    ct = AESGCMSIV(bytes(key)).encrypt(_nonce(n), m, ad)
    return AeadOutput(ct[:-TAG_SIZE], ct[-TAG_SIZE:])


def aead_decrypt(key: SymmetricKey | bytes, n: int, ad: bytes, c: AeadOutput) -> bytes:
    ciphertext, tag = c
    if len(tag) != TAG_SIZE:
        raise AuthFailure("malformed tag")
    try:
        return AESGCMSIV(bytes(key)).decrypt(_nonce(n), ciphertext + tag, ad)
    except InvalidTag:
        raise AuthFailure("tag verification failed") from None


def aead_verify(key: SymmetricKey | bytes, n: int, ad: bytes, m: bytes, c: AeadOutput) -> bool:
    """Check ``c`` by re-encrypting the known plaintext and comparing in constant time."""
    expected = aead_encrypt(key, n, ad, m)
    ciphertext, tag = c
    ok_ct = hmac.compare_digest(expected.ciphertext, bytes(ciphertext))
    ok_tag = hmac.compare_digest(expected.tag, bytes(tag))
    return ok_ct and ok_tag


@dataclass
class NonceLedger:
    """Harness-side detector for (key, counter) reuse with differing inputs."""

    seen: dict[tuple[bytes, int], bytes] = field(default_factory=dict)

    def record(self, key: SymmetricKey | bytes, n: int, ad: bytes, m: bytes) -> None:
        slot = (digest(bytes(key)), n)
        fingerprint = digest(len(ad).to_bytes(8, "little") + ad + m)
        prev = self.seen.setdefault(slot, fingerprint)
        if prev != fingerprint:
            raise NonceReuse(f"counter {n} reused under one key with different inputs")
