"""Deterministic signing and hashing primitives used by every other module.

The whole system depends on replayability: re-executing the same transaction
sequence must reproduce byte-identical ledger blocks. Ed25519 signatures are
deterministic and key generation here is seeded, so fixtures and simulations
are fully reproducible. SHA-256 is the single content hash.
"""

from __future__ import annotations

from dataclasses import dataclass
import hashlib

from cryptography.exceptions import InvalidSignature
from cryptography.hazmat.primitives import serialization
from cryptography.hazmat.primitives.asymmetric.ed25519 import (
    Ed25519PrivateKey,
    Ed25519PublicKey,
)

SEED_SIZE = 32
DIGEST_SIZE = 32
PUBLIC_KEY_SIZE = 32
SIGNATURE_SIZE = 64


class CryptoError(Exception):
    """Base error for this module."""


class InvalidSeedError(CryptoError):
    """Key generation seed has the wrong length."""


class InvalidKeyError(CryptoError):
    """Key material is malformed or has the wrong length."""


@dataclass(frozen=True)
class Digest:
    """A fixed-length SHA-256 digest."""

    bytes: bytes

    def __post_init__(self) -> None:
        if len(self.bytes) != DIGEST_SIZE:
            raise ValueError(f"digest must be {DIGEST_SIZE} bytes, got {len(self.bytes)}")

    @property
    def hex(self) -> str:
        return self.bytes.hex()


@dataclass(frozen=True)
class Signature:
    """A detached signature plus the fingerprint of the signing key."""

    bytes: bytes
    signer_key_id: str


@dataclass(frozen=True)
class KeyPair:
    """Raw Ed25519 key material. The private key never leaves the client side."""

    private_key: bytes
    public_key: bytes
    key_id: str


ZERO_DIGEST = Digest(b"\x00" * DIGEST_SIZE)


def hash_bytes(message: bytes) -> Digest:
    """Hash a byte string. Pure, fixed 32-byte output."""
    return Digest(hashlib.sha256(message).digest())


def fingerprint(public_key: bytes) -> str:
    """Short printable key identifier: first 8 bytes of the key's hash, hex."""
    return hash_bytes(public_key).bytes[:8].hex()


def keygen(seed: bytes) -> KeyPair:
    """Derive a key pair from a 32-byte seed.

    Deterministic: the same seed always yields the same pair, which is what
    makes ledger fixtures and Monte Carlo runs reproducible.
    """
    if not isinstance(seed, (bytes, bytearray)) or len(seed) != SEED_SIZE:
        raise InvalidSeedError(f"seed must be exactly {SEED_SIZE} bytes")
    private = Ed25519PrivateKey.from_private_bytes(bytes(seed))
    public = private.public_key().public_bytes(
        encoding=serialization.Encoding.Raw,
        format=serialization.PublicFormat.Raw,
    )
    return KeyPair(private_key=bytes(seed), public_key=public, key_id=fingerprint(public))


def _load_private(private_key: bytes) -> Ed25519PrivateKey:
    if not isinstance(private_key, (bytes, bytearray)) or len(private_key) != SEED_SIZE:
        raise InvalidKeyError(f"private key must be {SEED_SIZE} raw bytes")
    try:
        return Ed25519PrivateKey.from_private_bytes(bytes(private_key))
    except Exception as exc:  # pragma: no cover - length check above catches the common case
        raise InvalidKeyError(f"malformed private key: {exc}") from exc


def sign(private_key: bytes, message: bytes) -> Signature:
    """Sign a message. Ed25519 is deterministic, so equal inputs give equal output."""
    key = _load_private(private_key)
    public = key.public_key().public_bytes(
        encoding=serialization.Encoding.Raw,
        format=serialization.PublicFormat.Raw,
    )
    return Signature(bytes=key.sign(bytes(message)), signer_key_id=fingerprint(public))


def verify(public_key: bytes, message: bytes, signature: Signature | bytes) -> bool:
    """Check a signature. Malformed input of any kind returns False, never raises."""
    sig_bytes = signature.bytes if isinstance(signature, Signature) else signature
    if not isinstance(public_key, (bytes, bytearray)) or len(public_key) != PUBLIC_KEY_SIZE:
        return False
    if not isinstance(sig_bytes, (bytes, bytearray)) or len(sig_bytes) != SIGNATURE_SIZE:
        return False
    try:
        key = Ed25519PublicKey.from_public_bytes(bytes(public_key))
        key.verify(bytes(sig_bytes), bytes(message))
        return True
    except (InvalidSignature, ValueError):
        return False
