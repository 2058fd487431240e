"""Origination tags: salted hash, encrypted originator, server signature.

Wire form of a tag::

    version (1) | r (32) | len(e) (2, big-endian) | e | sigma (64)

where ``e = nonce (12) | ChaCha20-Poly1305 ciphertext+tag`` and ``sigma`` is
an Ed25519 signature over ``h | e`` with ``h = SHA3-256(r | x)``.  The
serialized tag doubles as the CCBF item key.
"""

from __future__ import annotations

import hashlib
import os
import struct
from dataclasses import dataclass

from cryptography.exceptions import InvalidSignature, InvalidTag
from cryptography.hazmat.primitives.asymmetric.ed25519 import (
    Ed25519PrivateKey,
    Ed25519PublicKey,
)
from cryptography.hazmat.primitives.ciphers.aead import ChaCha20Poly1305
from cryptography.hazmat.primitives.serialization import Encoding, PublicFormat

__all__ = [
    "SALT_LEN",
    "SIG_LEN",
    "TAG_VERSION",
    "ServerKeys",
    "Tag",
    "TagError",
    "audit_open",
    "hash_message",
    "new_salt",
    "public_key_bytes",
    "server_issue_tag",
    "verify_tag",
]

TAG_VERSION = 1
SALT_LEN = 32
SIG_LEN = 64
NONCE_LEN = 12
MAX_ID_LEN = 32
_AD = bytes([TAG_VERSION])


class TagError(ValueError):
    """A tag failed to parse, verify, or decrypt."""


@dataclass(frozen=True)
class Tag:
    r: bytes
    e: bytes
    sigma: bytes

    def __post_init__(self) -> None:
        if len(self.r) != SALT_LEN:
            raise TagError(f"salt must be {SALT_LEN} bytes, got {len(self.r)}")
        if len(self.sigma) != SIG_LEN:
            raise TagError(f"signature must be {SIG_LEN} bytes, got {len(self.sigma)}")
        if not 0 < len(self.e) < 1 << 16:
            raise TagError(f"identity ciphertext length {len(self.e)} out of range")

    def to_bytes(self) -> bytes:
        return bytes([TAG_VERSION]) + self.r + struct.pack(">H", len(self.e)) + self.e + self.sigma

    @classmethod
    def from_bytes(cls, data: bytes) -> "Tag":
        if len(data) < 1 + SALT_LEN + 2 + SIG_LEN:
            raise TagError("tag too short")
        if data[0] != TAG_VERSION:
            raise TagError(f"unknown tag version {data[0]}")
        r = data[1:1 + SALT_LEN]
        (elen,) = struct.unpack_from(">H", data, 1 + SALT_LEN)
        off = 1 + SALT_LEN + 2
        if len(data) != off + elen + SIG_LEN:
            raise TagError("tag length does not match its ciphertext length field")
        return cls(r, data[off:off + elen], data[off + elen:])

    def hex(self) -> str:
        return self.to_bytes().hex()


@dataclass(frozen=True)
class ServerKeys:
    """Server secrets.  Only :attr:`public_key` ever leaves the server."""

    sign_key: Ed25519PrivateKey
    id_key: bytes
    derive_key: bytes

    @classmethod
    def generate(cls) -> "ServerKeys":
        return cls(Ed25519PrivateKey.generate(), ChaCha20Poly1305.generate_key(), os.urandom(32))

    @property
    def public_key(self) -> Ed25519PublicKey:
        return self.sign_key.public_key()

    def rotated(self) -> "ServerKeys":
        return ServerKeys(self.sign_key, self.id_key, os.urandom(32))


def public_key_bytes(pk: Ed25519PublicKey) -> bytes:
    return pk.public_bytes(Encoding.Raw, PublicFormat.Raw)


def new_salt() -> bytes:
    return os.urandom(SALT_LEN)


def hash_message(r: bytes, x: bytes) -> bytes:
    if len(r) != SALT_LEN:
        raise TagError(f"salt must be {SALT_LEN} bytes, got {len(r)}")
    return hashlib.sha3_256(r + x).digest()


def _encode_id(originator: str) -> bytes:
    raw = originator.encode("utf-8")
    if not 0 < len(raw) <= MAX_ID_LEN:
        raise TagError(f"identity must encode to 1..{MAX_ID_LEN} bytes")
    return raw


def server_issue_tag(keys: ServerKeys, originator: str, h: bytes) -> tuple[bytes, bytes]:
    """Encrypt the originator id and sign ``h | e``.  Returns ``(e, sigma)``."""
    if len(h) != 32:
        raise TagError(f"digest must be 32 bytes, got {len(h)}")
    nonce = os.urandom(NONCE_LEN)
    e = nonce + ChaCha20Poly1305(keys.id_key).encrypt(nonce, _encode_id(originator), _AD)
    return e, keys.sign_key.sign(h + e)


def _check(pubkey: Ed25519PublicKey, tag: Tag, x: bytes) -> None:
    h = hash_message(tag.r, x)
    try:
        pubkey.verify(tag.sigma, h + tag.e)
    except InvalidSignature as exc:
        raise TagError("signature does not verify") from exc


def verify_tag(pubkey: Ed25519PublicKey, tag: Tag | bytes, x: bytes) -> bool:
    try:
        if not isinstance(tag, Tag):
            tag = Tag.from_bytes(tag)
        _check(pubkey, tag, x)
    except TagError:
        return False
    return True


def audit_open(keys: ServerKeys, tag: Tag | bytes, x: bytes) -> str:
    """Verify the tag against ``x`` and reveal the originator; raises :class:`TagError`."""
    if not isinstance(tag, Tag):
        tag = Tag.from_bytes(tag)
    _check(keys.public_key, tag, x)
    if len(tag.e) <= NONCE_LEN:
        raise TagError("identity ciphertext too short")
    nonce, body = tag.e[:NONCE_LEN], tag.e[NONCE_LEN:]
    try:
        raw = ChaCha20Poly1305(keys.id_key).decrypt(nonce, body, _AD)
    except InvalidTag as exc:
        raise TagError("identity ciphertext failed authentication") from exc
    return raw.decode("utf-8")
