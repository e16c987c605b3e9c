"""Records held by the synchronizer, and the bytes their origin signatures cover."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Optional

from .crypto import origin_payload


def pending_row_signed_bytes(sender: str, receiver: str, encrypted_row: bytes) -> bytes:
    # the pending-row id is assigned by the service, so it is not covered
    return origin_payload("pending-row", sender, receiver, encrypted_row)


def key_record_signed_bytes(
    id_row: int, sender: str, receiver: str, expiry: Optional[float], wrapped_key: bytes
) -> bytes:
    return origin_payload(
        "wrapped-key", int(id_row), sender, receiver,
        None if expiry is None else float(expiry), wrapped_key,
    )


@dataclass(frozen=True)
class UserRecord:
    user_id: str
    auth_digest: str
    enc_public: bytes
    sig_public: bytes
    registered_at: float


@dataclass(frozen=True)
class PendingRow:
    id_pending_row: int
    sender: str
    receiver: str
    submitted_at: float
    encrypted_row: bytes
    origin_sig: bytes

    def signed_bytes(self) -> bytes:
        return pending_row_signed_bytes(self.sender, self.receiver, self.encrypted_row)

    def to_payload(self) -> dict:
        return asdict(self)

    @classmethod
    def from_payload(cls, payload: dict) -> "PendingRow":
        return cls(**payload)


@dataclass(frozen=True)
class WrappedKeyRecord:
    id_row: int
    sender: str
    receiver: str
    expiry: Optional[float]
    wrapped_key: bytes
    origin_sig: bytes

    def signed_bytes(self) -> bytes:
        return key_record_signed_bytes(
            self.id_row, self.sender, self.receiver, self.expiry, self.wrapped_key
        )

    def to_payload(self) -> dict:
        return asdict(self)

    @classmethod
    def from_payload(cls, payload: dict) -> "WrappedKeyRecord":
        return cls(**payload)
