"""The synchronizer: an untrusted mailbox for encrypted rows and wrapped keys.

It stores users with their public keys, pending rows awaiting pickup, and
wrapped row keys. Every stored row and key record must carry a valid origin
signature from its sender. The service never sees row plaintext or an
unwrapped key.

State is made durable by an append-only JSON-lines log that is replayed on
startup. Sessions are not persisted; clients log in again after a restart.
"""

from __future__ import annotations

import hashlib
import hmac
import json
import logging
import os
import secrets
import threading
import time
from dataclasses import asdict, replace
from pathlib import Path
from typing import Callable, Optional, Union

from .crypto import PUBLIC_KEY_SIZE, CryptoInputError, verify_payload
from .errors import ErrorCode, ServiceError
from .records import PendingRow, UserRecord, WrappedKeyRecord
from .wire import METHODS, Request, Response, WireError, decode_request, encode_response

logger = logging.getLogger(__name__)

DEFAULT_KDF_ITERATIONS = 100_000


def hash_password(password: str, iterations: int = DEFAULT_KDF_ITERATIONS) -> str:
    salt = os.urandom(16)
    digest = hashlib.pbkdf2_hmac("sha256", password.encode("utf-8"), salt, iterations)
    return f"pbkdf2_sha256${iterations}${salt.hex()}${digest.hex()}"


def check_password(password: str, encoded: str) -> bool:
    try:
        scheme, iterations, salt, digest = encoded.split("$")
    except ValueError:
        return False
    if scheme != "pbkdf2_sha256":
        return False
    candidate = hashlib.pbkdf2_hmac("sha256", password.encode("utf-8"), bytes.fromhex(salt), int(iterations))
    return hmac.compare_digest(candidate.hex(), digest)


def _hexify(record) -> dict:
    return {k: (v.hex().upper() if isinstance(v, bytes) else v) for k, v in asdict(record).items()}


def _unhex(cls, data: dict):
    fields = dict(data)
    for name in ("enc_public", "sig_public", "encrypted_row", "origin_sig", "wrapped_key"):
        if name in fields:
            fields[name] = bytes.fromhex(fields[name])
    return cls(**fields)


class Synchronizer:
    """In-process synchronizer state and operations.

    Each public method is atomic under one lock. ``caller`` is the
    authenticated user id; :meth:`dispatch` derives it from the session token.
    """

    def __init__(
        self,
        log_path: Union[str, os.PathLike, None] = None,
        *,
        clock: Callable[[], float] = time.time,
        kdf_iterations: int = DEFAULT_KDF_ITERATIONS,
        max_page_rows: int = 500,
        max_page_bytes: int = 600_000,
        fsync: bool = False,
    ):
        self.clock = clock
        self.kdf_iterations = kdf_iterations
        self.max_page_rows = max_page_rows
        self.max_page_bytes = max_page_bytes
        self.fsync = fsync
        self.users: dict[str, UserRecord] = {}
        self.pending: dict[int, PendingRow] = {}
        self.archive: dict[int, PendingRow] = {}
        self.keys: dict[tuple[int, str], WrappedKeyRecord] = {}
        self.next_id = 1
        # receiver -> undelivered rows in id order
        self._inbox: dict[str, dict[int, PendingRow]] = {}
        self._sessions: dict[str, str] = {}
        self._lock = threading.RLock()
        self._log = None
        self.log_path = Path(log_path) if log_path else None
        if self.log_path is not None:
            self._replay()
            self._log = open(self.log_path, "a", encoding="utf-8")

    # -- persistence -------------------------------------------------------

    def _replay(self) -> None:
        if not self.log_path.exists():
            return
        with open(self.log_path, encoding="utf-8") as fh:
            lines = fh.read().split("\n")
        for lineno, line in enumerate(lines, 1):
            if not line:
                continue
            try:
                self._apply(json.loads(line))
            except (ValueError, KeyError, TypeError) as exc:
                if lineno >= len(lines) - 1:
                    # torn final write from a crash
                    logger.warning("ignoring incomplete log tail at line %d: %s", lineno, exc)
                    break
                raise

    def _apply(self, event: dict) -> None:
        kind = event["ev"]
        data = event["data"]
        if kind == "user":
            user = _unhex(UserRecord, data)
            self.users[user.user_id] = user
        elif kind == "pending":
            row = _unhex(PendingRow, data)
            self.pending[row.id_pending_row] = row
            self._inbox.setdefault(row.receiver, {})[row.id_pending_row] = row
            self.next_id = max(self.next_id, row.id_pending_row + 1)
        elif kind == "delivered":
            row = self.pending.pop(data["id_pending_row"], None)
            if row is not None:
                self.archive[row.id_pending_row] = row
                del self._inbox[row.receiver][row.id_pending_row]
        elif kind == "key":
            rec = _unhex(WrappedKeyRecord, data)
            self.keys[(rec.id_row, rec.receiver)] = rec
        elif kind == "key_del":
            self.keys.pop((data["id_row"], data["receiver"]), None)
        else:
            raise ValueError(f"unknown log event {kind!r}")

    def _record(self, kind: str, data: dict) -> None:
        event = {"ev": kind, "data": data}
        self._apply(event)
        if self._log is not None:
            self._log.write(json.dumps(event, sort_keys=True, separators=(",", ":")) + "\n")
            self._log.flush()
            if self.fsync:
                os.fsync(self._log.fileno())

    def close(self) -> None:
        with self._lock:
            if self._log is not None:
                self._log.flush()
                os.fsync(self._log.fileno())
                self._log.close()
                self._log = None

    def state(self) -> dict:
        """Durable state, for equality checks across restarts."""
        with self._lock:
            return {
                "users": dict(self.users),
                "pending": dict(self.pending),
                "archive": dict(self.archive),
                "keys": dict(self.keys),
                "next_id": self.next_id,
            }

    def audit(self) -> list[str]:
        """Re-verify every stored origin signature; returns a list of problems."""
        problems = []
        with self._lock:
            for row in list(self.pending.values()) + list(self.archive.values()):
                sender = self.users.get(row.sender)
                if sender is None or not verify_payload(row.signed_bytes(), row.origin_sig, sender.sig_public):
                    problems.append(f"pending row {row.id_pending_row}: bad origin signature")
            for rec in self.keys.values():
                sender = self.users.get(rec.sender)
                if sender is None or not verify_payload(rec.signed_bytes(), rec.origin_sig, sender.sig_public):
                    problems.append(f"key record ({rec.id_row}, {rec.receiver}): bad origin signature")
        return problems

    # -- registration ------------------------------------------------------

    def register_user(self, user_id: str, password: str, enc_public: bytes, sig_public: bytes) -> None:
        if not user_id:
            raise ServiceError(ErrorCode.SCHEMA_ERROR, "user id must be non-empty")
        for name, key in (("enc_public", enc_public), ("sig_public", sig_public)):
            if len(key) != PUBLIC_KEY_SIZE:
                raise ServiceError(ErrorCode.SCHEMA_ERROR, f"{name} must be {PUBLIC_KEY_SIZE} bytes")
        digest = hash_password(password, self.kdf_iterations)
        with self._lock:
            if user_id in self.users:
                raise ServiceError(ErrorCode.SCHEMA_ERROR, f"user {user_id!r} already registered")
            user = UserRecord(user_id, digest, bytes(enc_public), bytes(sig_public), self.clock())
            self._record("user", _hexify(user))

    def authenticate_user(self, user_id: str, password: str) -> str:
        with self._lock:
            user = self.users.get(user_id)
        if user is None or not check_password(password, user.auth_digest):
            raise ServiceError(ErrorCode.AUTH_FAILED, "invalid user id or password")
        token = secrets.token_hex(16)
        with self._lock:
            self._sessions[token] = user_id
        return token

    def session_user(self, token: Optional[str]) -> str:
        with self._lock:
            user_id = self._sessions.get(token) if token else None
        if user_id is None:
            raise ServiceError(ErrorCode.AUTH_FAILED, "missing or unknown session token")
        return user_id

    def get_public_keys(self, caller: str, user_id: str) -> tuple[bytes, bytes]:
        with self._lock:
            user = self.users.get(user_id)
        if user is None:
            raise ServiceError(ErrorCode.NOT_FOUND, f"unknown user {user_id!r}")
        return user.enc_public, user.sig_public

    def get_all_users(self, caller: str) -> list[str]:
        with self._lock:
            return sorted(self.users)

    # -- keys --------------------------------------------------------------

    def _verify_origin(self, sender: str, payload: bytes, sig: bytes) -> None:
        user = self.users.get(sender)
        if user is None or not verify_payload(payload, sig, user.sig_public):
            raise ServiceError(ErrorCode.SIGNATURE_INVALID, "origin signature does not verify")

    def deposit_key(self, caller: str, record: WrappedKeyRecord) -> None:
        if caller != record.sender:
            raise ServiceError(ErrorCode.AUTH_FAILED, "keys can only be deposited by their sender")
        with self._lock:
            if record.receiver not in self.users:
                raise ServiceError(ErrorCode.NOT_FOUND, f"unknown receiver {record.receiver!r}")
            self._verify_origin(record.sender, record.signed_bytes(), record.origin_sig)
            self._record("key", _hexify(record))

    def get_decrypting_key(self, caller: str, id_row: int) -> Optional[WrappedKeyRecord]:
        """The caller's key record for ``id_row``, or None when absent or expired."""
        with self._lock:
            rec = self.keys.get((id_row, caller))
        if rec is None:
            return None
        if rec.expiry is not None and rec.expiry <= self.clock():
            return None
        return rec

    def delete_decrypting_key(self, caller: str, id_row: int, receiver: str) -> None:
        with self._lock:
            rec = self.keys.get((id_row, receiver))
            if rec is None:
                return
            if rec.sender != caller:
                raise ServiceError(ErrorCode.AUTH_FAILED, "only the sender may revoke a key")
            self._record("key_del", {"id_row": id_row, "receiver": receiver})

    # -- pending rows ------------------------------------------------------

    def send_row(
        self, caller: str, sender: str, receiver: str, encrypted_row: bytes, origin_sig: bytes
    ) -> int:
        if caller != sender:
            raise ServiceError(ErrorCode.AUTH_FAILED, "rows can only be sent by their sender")
        with self._lock:
            if receiver not in self.users:
                raise ServiceError(ErrorCode.NOT_FOUND, f"unknown receiver {receiver!r}")
            row = PendingRow(self.next_id, sender, receiver, self.clock(), bytes(encrypted_row), bytes(origin_sig))
            self._verify_origin(sender, row.signed_bytes(), row.origin_sig)
            self._record("pending", _hexify(row))
            return row.id_pending_row

    def get_pending_rows(
        self, caller: str, after: Optional[int] = None, limit: Optional[int] = None
    ) -> list[PendingRow]:
        """Undelivered rows for ``caller`` in id order, one page at a time."""
        limit = self.max_page_rows if limit is None else max(1, min(limit, self.max_page_rows))
        after = after or 0
        out: list[PendingRow] = []
        budget = self.max_page_bytes
        with self._lock:
            for id_, row in self._inbox.get(caller, {}).items():
                if id_ <= after:
                    continue
                budget -= 2 * (len(row.encrypted_row) + len(row.origin_sig)) + 200
                if out and budget < 0:
                    break
                out.append(row)
                if len(out) >= limit:
                    break
        return out

    def delete_pending_row(self, caller: str, id_pending_row: int) -> None:
        with self._lock:
            row = self.pending.get(id_pending_row) or self.archive.get(id_pending_row)
            if row is None:
                return
            if row.receiver != caller:
                raise ServiceError(ErrorCode.AUTH_FAILED, "only the receiver may remove a pending row")
            if id_pending_row in self.pending:
                self._record("delivered", {"id_pending_row": id_pending_row})

    def resend_row(self, caller: str, id_pending_row: int) -> int:
        """Re-queue a (possibly delivered) row for its receiver under a new id."""
        with self._lock:
            row = self.pending.get(id_pending_row) or self.archive.get(id_pending_row)
            if row is None:
                raise ServiceError(ErrorCode.NOT_FOUND, f"no pending row {id_pending_row}")
            if row.sender != caller:
                raise ServiceError(ErrorCode.AUTH_FAILED, "only the sender may resend a row")
            fresh = replace(row, id_pending_row=self.next_id, submitted_at=self.clock())
            self._record("pending", _hexify(fresh))
            return fresh.id_pending_row

    # -- wire dispatch -----------------------------------------------------

    def dispatch(self, req: Request) -> Response:
        try:
            spec = METHODS.get(req.method)
            if spec is None:
                raise ServiceError(ErrorCode.METHOD_UNKNOWN, f"unknown method {req.method!r}")
            caller = self.session_user(req.token) if spec.auth else None
            result = self._HANDLERS[req.method](self, caller, req.payload)
            return Response(req.request_id, result)
        except ServiceError as exc:
            return Response(req.request_id, error=ServiceError(exc.code, exc.message))
        except CryptoInputError as exc:
            return Response(req.request_id, error=ServiceError(ErrorCode.SCHEMA_ERROR, str(exc)))
        except Exception as exc:  # noqa: BLE001
            logger.exception("internal error handling %s", req.method)
            return Response(req.request_id, error=ServiceError(ErrorCode.INTERNAL, type(exc).__name__))

    def handle_frame(self, data: bytes) -> bytes:
        """One request frame in, one response frame out."""
        try:
            req = decode_request(data)
        except WireError as exc:
            err = ServiceError(exc.code, exc.message)
            return encode_response(Response(exc.request_id or 0, error=err))
        resp = self.dispatch(req)
        try:
            return encode_response(resp, req.method)
        except WireError as exc:
            return encode_response(Response(req.request_id, error=ServiceError(exc.code, exc.message)))

    def _h_register(self, caller, p):
        self.register_user(p["user_id"], p["password"], p["enc_public"], p["sig_public"])

    def _h_login(self, caller, p):
        return {"token": self.authenticate_user(p["user_id"], p["password"])}

    def _h_public_keys(self, caller, p):
        enc, sig = self.get_public_keys(caller, p["user_id"])
        return {"enc_public": enc, "sig_public": sig}

    def _h_deposit(self, caller, p):
        self.deposit_key(caller, WrappedKeyRecord.from_payload(p))

    def _h_get_key(self, caller, p):
        rec = self.get_decrypting_key(caller, p["id_row"])
        if rec is None:
            raise ServiceError(ErrorCode.AFFIRMATIVELY_ABSENT, f"no key for row {p['id_row']}")
        return rec.to_payload()

    def _h_delete_key(self, caller, p):
        self.delete_decrypting_key(caller, p["id_row"], p["receiver"])

    def _h_send(self, caller, p):
        return {"id_pending_row": self.send_row(caller, p["sender"], p["receiver"], p["encrypted_row"], p["origin_sig"])}

    def _h_pending(self, caller, p):
        rows = self.get_pending_rows(caller, p["after"], p["limit"])
        return {"rows": [r.to_payload() for r in rows]}

    def _h_delete_pending(self, caller, p):
        self.delete_pending_row(caller, p["id_pending_row"])

    def _h_resend(self, caller, p):
        return {"id_pending_row": self.resend_row(caller, p["id_pending_row"])}

    def _h_users(self, caller, p):
        return {"users": self.get_all_users(caller)}

    _HANDLERS = {
        "reg.registerUser": _h_register,
        "reg.selectUserByIdAndPassword": _h_login,
        "key.getPublicKeyByUser": _h_public_keys,
        "key.depositKey": _h_deposit,
        "key.getDecryptingKeyByIdPendingRow": _h_get_key,
        "key.deleteDecryptingKey": _h_delete_key,
        "syn.sendRow": _h_send,
        "syn.getPendingRowForUser": _h_pending,
        "syn.deletePendingRow": _h_delete_pending,
        "syn.resendRow": _h_resend,
        "syn.getAllUsers": _h_users,
    }
