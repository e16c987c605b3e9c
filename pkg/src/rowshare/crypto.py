"""Cryptographic envelopes for shared rows.

Rows are sealed with AES-128-GCM under a fresh per-row key. Row keys travel
to their receiver wrapped with an X25519 + HKDF + AES-GCM hybrid
construction, and every record the synchronizer stores carries an Ed25519
origin signature.

Layouts::

    ciphertext  = nonce(12) || aes_gcm(row_key, nonce, plaintext)
    wrapped key = ephemeral_pub(32) || nonce(12) || aes_gcm(kek, nonce, row_key)
"""

from __future__ import annotations

import os
import re
import struct
from dataclasses import dataclass
from typing import Optional

from cryptography.exceptions import InvalidSignature, InvalidTag
from cryptography.hazmat.primitives import hashes
from cryptography.hazmat.primitives.asymmetric.ed25519 import (
    Ed25519PrivateKey,
    Ed25519PublicKey,
)
from cryptography.hazmat.primitives.asymmetric.x25519 import (
    X25519PrivateKey,
    X25519PublicKey,
)
from cryptography.hazmat.primitives.ciphers.aead import AESGCM
from cryptography.hazmat.primitives.kdf.hkdf import HKDF
from cryptography.hazmat.primitives.serialization import (
    Encoding,
    NoEncryption,
    PrivateFormat,
    PublicFormat,
)

ROW_KEY_SIZE = 16
NONCE_SIZE = 12
TAG_SIZE = 16
PUBLIC_KEY_SIZE = 32
SIGNATURE_SIZE = 64
WRAPPED_KEY_SIZE = PUBLIC_KEY_SIZE + NONCE_SIZE + ROW_KEY_SIZE + TAG_SIZE

_WRAP_INFO = b"rowshare/v1/key-wrap"


class CryptoError(Exception):
    pass


class AuthenticationError(CryptoError):
    """Ciphertext or wrapped key failed authentication (wrong key or tampered)."""


class CryptoInputError(CryptoError, ValueError):
    """Malformed key material handed to a crypto operation."""


def to_hex(data: bytes) -> str:
    return data.hex().upper()


_CANONICAL_HEX = re.compile(r"(?:[0-9A-F]{2})*\Z")


def from_hex(text: str) -> bytes:
    """Inverse of :func:`to_hex`; only the canonical uppercase form is accepted."""
    if not isinstance(text, str) or not _CANONICAL_HEX.match(text):
        raise CryptoInputError("expected uppercase hexadecimal with an even number of digits")
    return bytes.fromhex(text)


# --------------------------------------------------------------------------
# key material


def generate_row_key() -> bytes:
    return os.urandom(ROW_KEY_SIZE)


@dataclass(frozen=True)
class KeyPair:
    """Raw 32-byte private/public halves of an X25519 or Ed25519 key."""

    private_part: bytes
    public_part: bytes


def generate_encryption_keypair() -> KeyPair:
    sk = X25519PrivateKey.generate()
    return KeyPair(
        sk.private_bytes(Encoding.Raw, PrivateFormat.Raw, NoEncryption()),
        sk.public_key().public_bytes(Encoding.Raw, PublicFormat.Raw),
    )


def generate_signing_keypair() -> KeyPair:
    sk = Ed25519PrivateKey.generate()
    return KeyPair(
        sk.private_bytes(Encoding.Raw, PrivateFormat.Raw, NoEncryption()),
        sk.public_key().public_bytes(Encoding.Raw, PublicFormat.Raw),
    )


def _check_row_key(key: bytes) -> None:
    if not isinstance(key, (bytes, bytearray)) or len(key) != ROW_KEY_SIZE:
        raise CryptoInputError(f"row key must be {ROW_KEY_SIZE} bytes")


def _x25519_public(raw: bytes) -> X25519PublicKey:
    try:
        return X25519PublicKey.from_public_bytes(bytes(raw))
    except (ValueError, TypeError) as exc:
        raise CryptoInputError(f"malformed encryption public key: {exc}") from None


def _x25519_private(raw: bytes) -> X25519PrivateKey:
    try:
        return X25519PrivateKey.from_private_bytes(bytes(raw))
    except (ValueError, TypeError) as exc:
        raise CryptoInputError(f"malformed encryption private key: {exc}") from None


# --------------------------------------------------------------------------
# row encryption


def encrypt_row(plaintext: bytes, key: bytes) -> bytes:
    _check_row_key(key)
    nonce = os.urandom(NONCE_SIZE)
    return nonce + AESGCM(key).encrypt(nonce, plaintext, None)


def decrypt_row(cipher: bytes, key: bytes) -> bytes:
    _check_row_key(key)
    if len(cipher) < NONCE_SIZE + TAG_SIZE:
        raise AuthenticationError("ciphertext too short")
    try:
        return AESGCM(key).decrypt(cipher[:NONCE_SIZE], cipher[NONCE_SIZE:], None)
    except InvalidTag:
        raise AuthenticationError("row ciphertext failed authentication") from None


# --------------------------------------------------------------------------
# key wrapping


def _derive_kek(shared: bytes, ephemeral_pub: bytes, receiver_pub: bytes) -> bytes:
    return HKDF(
        algorithm=hashes.SHA256(),
        length=ROW_KEY_SIZE,
        salt=ephemeral_pub + receiver_pub,
        info=_WRAP_INFO,
    ).derive(shared)


class KeyWrapper:
    """Wraps row keys for receivers, reusing one ephemeral X25519 key per receiver.

    Each wrapped blob is self-contained (it carries the ephemeral public key)
    and only the receiver's private key can recover the row key. Reusing the
    ephemeral key for a batch avoids one Diffie-Hellman per row; every wrap
    still uses a fresh random nonce.
    """

    def __init__(self, max_uses: int = 4096):
        self.max_uses = max_uses
        self._sessions: dict[bytes, tuple[bytes, AESGCM, int]] = {}

    def _session(self, receiver_public: bytes) -> tuple[bytes, AESGCM]:
        receiver_public = bytes(receiver_public)
        entry = self._sessions.get(receiver_public)
        if entry is None or entry[2] >= self.max_uses:
            peer = _x25519_public(receiver_public)
            eph = X25519PrivateKey.generate()
            eph_pub = eph.public_key().public_bytes(Encoding.Raw, PublicFormat.Raw)
            kek = _derive_kek(eph.exchange(peer), eph_pub, receiver_public)
            entry = (eph_pub, AESGCM(kek), 0)
        eph_pub, aead, uses = entry
        self._sessions[receiver_public] = (eph_pub, aead, uses + 1)
        return eph_pub, aead

    def wrap(self, row_key: bytes, receiver_public: bytes) -> bytes:
        _check_row_key(row_key)
        eph_pub, aead = self._session(receiver_public)
        nonce = os.urandom(NONCE_SIZE)
        return eph_pub + nonce + aead.encrypt(nonce, row_key, eph_pub)


class KeyUnwrapper:
    """Receiver side of :class:`KeyWrapper`; caches the derived key per ephemeral key."""

    def __init__(self, receiver_private: bytes, cache_size: int = 1024):
        self._private = _x25519_private(receiver_private)
        self._public = self._private.public_key().public_bytes(Encoding.Raw, PublicFormat.Raw)
        self._cache: dict[bytes, AESGCM] = {}
        self._cache_size = cache_size

    def unwrap(self, wrapped: bytes) -> bytes:
        if len(wrapped) != WRAPPED_KEY_SIZE:
            raise AuthenticationError("wrapped key has wrong length")
        eph_pub = bytes(wrapped[:PUBLIC_KEY_SIZE])
        nonce = wrapped[PUBLIC_KEY_SIZE:PUBLIC_KEY_SIZE + NONCE_SIZE]
        aead = self._cache.get(eph_pub)
        if aead is None:
            try:
                peer = X25519PublicKey.from_public_bytes(eph_pub)
                shared = self._private.exchange(peer)
            except ValueError:
                raise AuthenticationError("wrapped key carries an invalid ephemeral key") from None
            aead = AESGCM(_derive_kek(shared, eph_pub, self._public))
            if len(self._cache) >= self._cache_size:
                self._cache.pop(next(iter(self._cache)))
            self._cache[eph_pub] = aead
        try:
            return aead.decrypt(nonce, wrapped[PUBLIC_KEY_SIZE + NONCE_SIZE:], eph_pub)
        except InvalidTag:
            raise AuthenticationError("wrapped key failed authentication") from None


def wrap_key(row_key: bytes, receiver_public: bytes) -> bytes:
    """Wrap ``row_key`` so that only the holder of the matching private key can recover it."""
    return KeyWrapper().wrap(row_key, receiver_public)


def unwrap_key(wrapped: bytes, receiver_private: bytes) -> bytes:
    return KeyUnwrapper(receiver_private, cache_size=1).unwrap(wrapped)


# --------------------------------------------------------------------------
# signatures


class Signer:
    def __init__(self, private_part: bytes):
        try:
            self._key = Ed25519PrivateKey.from_private_bytes(bytes(private_part))
        except (ValueError, TypeError) as exc:
            raise CryptoInputError(f"malformed signing key: {exc}") from None

    def sign(self, payload: bytes) -> bytes:
        return self._key.sign(payload)


def sign_payload(payload: bytes, sender_private: bytes) -> bytes:
    return Signer(sender_private).sign(payload)


def verify_payload(payload: bytes, sig: bytes, sender_public: bytes) -> bool:
    """Return True iff ``sig`` is a valid signature of ``payload``; never raises on bad input."""
    try:
        key = Ed25519PublicKey.from_public_bytes(bytes(sender_public))
        key.verify(bytes(sig), payload)
    except (InvalidSignature, ValueError, TypeError):
        return False
    return True


def origin_payload(tag: str, *parts: Optional[bytes | str | int | float]) -> bytes:
    """Unambiguous byte encoding of the fields an origin signature covers.

    Each part is length-prefixed; ``None`` encodes distinctly from empty.
    """
    out = [tag.encode("ascii"), b"\x00"]
    for part in parts:
        if part is None:
            out.append(b"\xff\xff\xff\xff")
            continue
        if isinstance(part, str):
            raw = part.encode("utf-8")
        elif isinstance(part, (bytes, bytearray)):
            raw = bytes(part)
        else:
            raw = repr(part).encode("ascii")
        out.append(struct.pack(">I", len(raw)))
        out.append(raw)
    return b"".join(out)
