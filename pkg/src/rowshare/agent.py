"""The trusted client agent.

An agent owns a local :class:`~rowshare.store.Store` and talks to the
synchronizer through a :class:`~rowshare.transport.SyncClient`. Owners grant,
send, modify and revoke their dossiers; receivers pick up pending rows and
decrypt them on use.

Beside the journal the agent keeps ``<journal>.state`` (schema, access lists,
sent-row bookkeeping including the owner's row keys, and the retry queue for
offline work) and ``<journal>.quarantine`` (shared lines that failed
authentication). Neither holds plaintext of rows received from others.
"""

from __future__ import annotations

import json
import logging
import os
import time
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Any, Iterable, Mapping, Optional, Sequence, Union

from .crypto import (
    AuthenticationError,
    KeyPair,
    KeyUnwrapper,
    KeyWrapper,
    Signer,
    decrypt_row,
    encrypt_row,
    from_hex,
    generate_encryption_keypair,
    generate_row_key,
    generate_signing_keypair,
    to_hex,
    verify_payload,
)
from .errors import (
    KeyUnavailableError,
    OwnershipConflict,
    RowshareError,
    SchemaError,
    ServiceError,
    TransportError,
)
from .records import WrappedKeyRecord, key_record_signed_bytes, pending_row_signed_bytes
from .store import (
    LoadReport,
    Row,
    Store,
    atomic_write_text,
    deserialize_row,
    load_script,
    save_script,
    serialize_row,
)
from .transport import SyncClient

logger = logging.getLogger(__name__)

DossierRef = tuple[str, Any]
REVOKED_POLICIES = ("delete", "retain")


class AgentError(RowshareError):
    pass


class RevokedError(AgentError):
    def __init__(self, id_pending_row: int):
        self.id_pending_row = id_pending_row
        super().__init__(f"access to shared row {id_pending_row} has been revoked")


class UnavailableError(AgentError):
    def __init__(self, id_pending_row: int, reason: str = "synchronizer unreachable"):
        self.id_pending_row = id_pending_row
        super().__init__(f"shared row {id_pending_row} unavailable: {reason}")


class IntegrityError(AgentError):
    def __init__(self, id_pending_row: int, reason: str):
        self.id_pending_row = id_pending_row
        super().__init__(f"shared row {id_pending_row} quarantined: {reason}")


class UnknownRowError(AgentError, KeyError):
    pass


class NotOwnedError(AgentError):
    pass


def _fault(point: str) -> None:
    """Crash hard at a named point when ROWSHARE_FAULT selects it (used by crash tests)."""
    if os.environ.get("ROWSHARE_FAULT") == point:
        os._exit(86)


@dataclass(frozen=True)
class Identity:
    user_id: str
    encryption: KeyPair
    signing: KeyPair

    @classmethod
    def generate(cls, user_id: str) -> "Identity":
        return cls(user_id, generate_encryption_keypair(), generate_signing_keypair())

    def save(self, path: Union[str, os.PathLike]) -> None:
        data = {
            "user_id": self.user_id,
            "enc_private": to_hex(self.encryption.private_part),
            "enc_public": to_hex(self.encryption.public_part),
            "sig_private": to_hex(self.signing.private_part),
            "sig_public": to_hex(self.signing.public_part),
        }
        atomic_write_text(path, json.dumps(data, indent=2) + "\n")
        os.chmod(path, 0o600)

    @classmethod
    def load(cls, path: Union[str, os.PathLike]) -> "Identity":
        data = json.loads(Path(path).read_text(encoding="utf-8"))
        return cls(
            data["user_id"],
            KeyPair(from_hex(data["enc_private"]), from_hex(data["enc_public"])),
            KeyPair(from_hex(data["sig_private"]), from_hex(data["sig_public"])),
        )


@dataclass
class SentRecord:
    """Owner-side memory of one pending row: needed to revoke and to re-grant."""

    id_pending_row: int
    table: str
    pk: Any
    receiver: str
    fields: tuple[str, ...]
    row_key: bytes
    deposited: bool = False
    revoked: bool = False

    @property
    def ref(self) -> DossierRef:
        return (self.table, self.pk)


class Agent:
    def __init__(
        self,
        identity: Identity,
        journal_path: Union[str, os.PathLike],
        client: Optional[SyncClient] = None,
        *,
        revoked_policy: str = "delete",
    ):
        if revoked_policy not in REVOKED_POLICIES:
            raise ValueError(f"revoked_policy must be one of {REVOKED_POLICIES}")
        self.identity = identity
        self.journal_path = Path(journal_path)
        self.client = client
        self.revoked_policy = revoked_policy
        self.store = Store()
        self.access: dict[DossierRef, dict[str, tuple[str, ...]]] = {}
        self.sent: dict[int, SentRecord] = {}
        self._sent_by_pair: dict[tuple[DossierRef, str], list[int]] = {}
        self.retry: list[dict] = []
        self.revoked_ids: set[int] = set()
        self.key_cache: dict[int, tuple[bytes, float]] = {}
        self.stats = {"key_fetches": 0, "decrypts": 0}
        self._public_keys: dict[str, tuple[bytes, bytes]] = {}
        self._wrapper = KeyWrapper()
        self._unwrapper = KeyUnwrapper(identity.encryption.private_part)
        self._signer = Signer(identity.signing.private_part)

    @property
    def user_id(self) -> str:
        return self.identity.user_id

    @property
    def state_path(self) -> Path:
        return self.journal_path.with_name(self.journal_path.name + ".state")

    @property
    def quarantine_path(self) -> Path:
        return self.journal_path.with_name(self.journal_path.name + ".quarantine")

    def _remember(self, rec: SentRecord) -> None:
        self.sent[rec.id_pending_row] = rec
        self._sent_by_pair.setdefault((rec.ref, rec.receiver), []).append(rec.id_pending_row)

    def _sent_to(self, ref: DossierRef, receiver: str) -> list[SentRecord]:
        return [self.sent[i] for i in self._sent_by_pair.get((ref, receiver), ())]

    def _require_client(self) -> SyncClient:
        if self.client is None:
            raise TransportError("agent has no synchronizer connection")
        return self.client

    # -- session -----------------------------------------------------------

    def register(self, password: str) -> None:
        self._require_client().register(
            self.user_id, password, self.identity.encryption.public_part, self.identity.signing.public_part
        )

    def login(self, password: str) -> None:
        self._require_client().login(self.user_id, password)

    def public_keys(self, user_id: str) -> tuple[bytes, bytes]:
        keys = self._public_keys.get(user_id)
        if keys is None:
            keys = self._require_client().get_public_keys(user_id)
            self._public_keys[user_id] = keys
        return keys

    # -- persistence -------------------------------------------------------

    def _state(self) -> dict:
        return {
            "tables": [{"name": t.name, "columns": list(t.columns)} for t in self.store.tables.values()],
            "access": [
                {"table": ref[0], "pk": ref[1], "receiver": r, "fields": list(f)}
                for ref, receivers in self.access.items()
                for r, f in receivers.items()
            ],
            "sent": [
                {
                    "id": s.id_pending_row, "table": s.table, "pk": s.pk, "receiver": s.receiver,
                    "fields": list(s.fields), "row_key": to_hex(s.row_key),
                    "deposited": s.deposited, "revoked": s.revoked,
                }
                for s in self.sent.values()
            ],
            "retry": self.retry,
            "revoked_ids": sorted(self.revoked_ids),
        }

    def save_state(self) -> None:
        atomic_write_text(self.state_path, json.dumps(self._state(), sort_keys=True) + "\n")
        if self.store.quarantined:
            lines = "".join(f"${i}@{to_hex(c)}\n" for i, c in sorted(self.store.quarantined.items()))
            atomic_write_text(self.quarantine_path, lines)

    def _key_for_save(self, id_pending_row: int) -> Optional[bytes]:
        entry = self.key_cache.get(id_pending_row)
        return entry[0] if entry else None

    def save(self) -> int:
        """Persist journal then state; returns the number of journal lines."""
        lines = save_script(self.store, self.journal_path, self._key_for_save)
        self.save_state()
        return lines

    def _restore_state(self) -> None:
        self.store = Store()
        self.access, self.sent, self.retry, self.revoked_ids = {}, {}, [], set()
        self._sent_by_pair = {}
        if not self.state_path.exists():
            return
        state = json.loads(self.state_path.read_text(encoding="utf-8"))
        for t in state["tables"]:
            self.store.create_table(t["name"], t["columns"], t["columns"][0])
        for a in state["access"]:
            self.access.setdefault((a["table"], a["pk"]), {})[a["receiver"]] = tuple(a["fields"])
        for s in state["sent"]:
            self._remember(SentRecord(
                s["id"], s["table"], s["pk"], s["receiver"], tuple(s["fields"]),
                from_hex(s["row_key"]), s["deposited"], s["revoked"],
            ))
        self.retry = state["retry"]
        self.revoked_ids = set(state["revoked_ids"])
        if self.quarantine_path.exists():
            for line in self.quarantine_path.read_text().split("\n"):
                if line:
                    head, _, hexpart = line.partition("@")
                    self.store.quarantined[int(head[1:])] = from_hex(hexpart)

    def load(self) -> LoadReport:
        """Start a session: rebuild the store from disk, fetching keys for shared lines."""
        self._restore_state()
        self.key_cache = {}
        shared_ids = _scan_shared_ids(self.journal_path)
        prefetched: Optional[dict[int, Optional[WrappedKeyRecord]]] = None
        if shared_ids and self.client is not None:
            try:
                prefetched = self.client.get_decrypting_keys(shared_ids)
                self.stats["key_fetches"] += len(shared_ids)
            except TransportError as exc:
                logger.warning("load: synchronizer unreachable, shared lines stay sealed (%s)", exc)

        def resolve(id_pending_row: int) -> Optional[bytes]:
            if prefetched is None or id_pending_row not in prefetched:
                raise TransportError("key not obtainable")
            rec = prefetched[id_pending_row]
            if rec is None:
                return None
            key = self._open_key_record(rec, id_pending_row)
            self.key_cache[id_pending_row] = (key, time.time())
            return key

        on_absent = "drop" if self.revoked_policy == "delete" else "retain"
        _, report = load_script(self.journal_path, resolve, self.store, on_absent=on_absent)
        self.stats["decrypts"] += report.decrypts
        self.revoked_ids.update(report.dropped_ids)
        return report

    def _open_key_record(self, rec: WrappedKeyRecord, id_pending_row: int) -> bytes:
        """Check a key record's origin and unwrap it; raises AuthenticationError."""
        if rec.receiver != self.user_id or rec.id_row != id_pending_row:
            raise AuthenticationError("key record is not addressed to this row and user")
        _, sig_public = self.public_keys(rec.sender)
        if not verify_payload(rec.signed_bytes(), rec.origin_sig, sig_public):
            raise AuthenticationError("key record origin signature does not verify")
        return self._unwrapper.unwrap(rec.wrapped_key)

    # -- local data --------------------------------------------------------

    def create_table(self, name: str, columns: Sequence[str], pk: str) -> None:
        self.store.create_table(name, columns, pk)

    def put(self, table: str, values: Mapping[str, Any]) -> Row:
        """Insert or replace an owned row; ``values`` must name every column."""
        t = self.store.table(table)
        if set(values) != set(t.columns):
            raise SchemaError(f"values must cover exactly the columns {t.columns}")
        row = Row(table, tuple((c, values[c]) for c in t.columns))
        self.store.upsert_row(row)
        return row

    def rows(self, table: Optional[str] = None) -> list[Row]:
        names = [table] if table else list(self.store.tables)
        return [r for name in names for r in self.store.query(name)]

    def _owned_row(self, ref: DossierRef) -> Row:
        row = self.store.get_row(*ref)
        if row is None:
            raise UnknownRowError(f"no row {ref[0]}[{ref[1]!r}]")
        if not row.owned:
            raise NotOwnedError(f"{ref[0]}[{ref[1]!r}] belongs to another owner")
        return row

    # -- owner operations --------------------------------------------------

    def grant(self, ref: DossierRef, receiver: str, fields: Iterable[str]) -> None:
        """Allow ``receiver`` to see ``fields`` of an owned dossier.

        The key for a concrete pending row is deposited by :meth:`send`. If the
        receiver was revoked earlier, keys for rows it still holds (and whose
        fields fit the new permission) are deposited again so access returns
        without re-sending.
        """
        self.grant_many([(ref, receiver, fields)])

    def grant_many(self, grants: Iterable[tuple[DossierRef, str, Iterable[str]]]) -> None:
        restore: list[SentRecord] = []
        for ref, receiver, fields in grants:
            restore.extend(self._grant(ref, receiver, fields))
        self._deposit(restore)
        self.save_state()

    def _grant(self, ref: DossierRef, receiver: str, fields: Iterable[str]) -> list[SentRecord]:
        self._owned_row(ref)
        if receiver == self.user_id:
            raise ValueError("cannot grant a dossier to its owner")
        table = self.store.table(ref[0])
        fields = set(fields)
        unknown = fields - set(table.columns)
        if unknown:
            raise SchemaError(f"fields {sorted(unknown)} are not columns of {table.name}")
        fields.add(table.pk)
        self.public_keys(receiver)
        self.access.setdefault(ref, {})[receiver] = tuple(c for c in table.columns if c in fields)

        restore = [s for s in self._sent_to(ref, receiver) if s.revoked and set(s.fields) <= fields]
        for s in restore:
            s.revoked = False
            s.deposited = False
        return restore

    def send(self, ref: DossierRef) -> dict[str, int]:
        """Send the current version of a dossier to every receiver in its access list."""
        return self.send_many([ref]).get(ref, {})

    def send_many(self, refs: Iterable[DossierRef]) -> dict[DossierRef, dict[str, int]]:
        items = []
        for ref in refs:
            self._owned_row(ref)
            for receiver, fields in self.access.get(ref, {}).items():
                items.append((ref, receiver, fields))
        if not items:
            return {}
        out = self._share(items)
        self.save_state()
        return out

    def _queue(self, entry: dict) -> None:
        if entry not in self.retry:
            self.retry.append(entry)

    def _share(self, items: list[tuple[DossierRef, str, tuple[str, ...]]]) -> dict[DossierRef, dict[str, int]]:
        out: dict[DossierRef, dict[str, int]] = {}
        try:
            client = self._require_client()
            for receiver in {r for _, r, _ in items}:
                self.public_keys(receiver)
        except TransportError:
            for ref, receiver, _ in items:
                self._queue({"op": "send", "table": ref[0], "pk": ref[1], "receiver": receiver})
            return out

        prepared = []
        for ref, receiver, fields in items:
            row = self._owned_row(ref).project(fields)
            key = generate_row_key()
            cipher = encrypt_row(serialize_row(row), key)
            sig = self._signer.sign(pending_row_signed_bytes(self.user_id, receiver, cipher))
            prepared.append((ref, receiver, fields, key, cipher, sig))
        try:
            ids = client.send_rows([(self.user_id, r, c, s) for _, r, _, _, c, s in prepared])
        except TransportError:
            for ref, receiver, _, _, _, _ in prepared:
                self._queue({"op": "send", "table": ref[0], "pk": ref[1], "receiver": receiver})
            return out

        new_records = []
        for (ref, receiver, fields, key, _, _), id_or_err in zip(prepared, ids):
            if isinstance(id_or_err, ServiceError):
                logger.error("send of %s to %s rejected: %s", ref, receiver, id_or_err)
                continue
            rec = SentRecord(id_or_err, ref[0], ref[1], receiver, fields, key)
            self._remember(rec)
            new_records.append(rec)
            out.setdefault(ref, {})[receiver] = rec.id_pending_row
        self._deposit(new_records)
        return out

    def _key_record(self, sent: SentRecord, expiry: Optional[float] = None) -> WrappedKeyRecord:
        enc_public, _ = self.public_keys(sent.receiver)
        wrapped = self._wrapper.wrap(sent.row_key, enc_public)
        sig = self._signer.sign(
            key_record_signed_bytes(sent.id_pending_row, self.user_id, sent.receiver, expiry, wrapped)
        )
        return WrappedKeyRecord(sent.id_pending_row, self.user_id, sent.receiver, expiry, wrapped, sig)

    def _deposit(self, records: list[SentRecord]) -> None:
        if not records:
            return
        try:
            errors = self._require_client().deposit_keys([self._key_record(s) for s in records])
        except TransportError:
            for s in records:
                self._queue({"op": "deposit", "id": s.id_pending_row})
            return
        for s, err in zip(records, errors):
            if err is None:
                s.deposited = True
            else:
                logger.error("key deposit for row %d rejected: %s", s.id_pending_row, err)

    def revoke(self, ref: DossierRef, receiver: str) -> int:
        """Delete the receiver's keys for every pending row of this dossier; returns how many."""
        self._owned_row(ref)
        receivers = self.access.get(ref, {})
        receivers.pop(receiver, None)
        if not receivers:
            self.access.pop(ref, None)
        self.retry = [
            e for e in self.retry
            if not (e["op"] == "send" and (e["table"], e["pk"]) == ref and e["receiver"] == receiver)
        ]
        targets = [s for s in self._sent_to(ref, receiver) if not s.revoked]
        for s in targets:
            self.retry = [e for e in self.retry if not (e["op"] == "deposit" and e["id"] == s.id_pending_row)]
            self._revoke_key(s)
        self.save_state()
        return len(targets)

    def _revoke_key(self, s: SentRecord) -> None:
        try:
            self._require_client().delete_decrypting_key(s.id_pending_row, s.receiver)
        except TransportError:
            self._queue({"op": "revoke", "id": s.id_pending_row})
            return
        s.revoked = True

    def modify_and_sync(self, ref: DossierRef, values: Mapping[str, Any]) -> dict[str, int]:
        """Update an owned dossier locally, then push the new version to its receivers."""
        row = self._owned_row(ref)
        current = row.as_dict()
        unknown = set(values) - set(current)
        if unknown:
            raise SchemaError(f"unknown columns {sorted(unknown)}")
        if row.fields[0][0] in values and values[row.fields[0][0]] != row.primary_key:
            raise SchemaError("primary key cannot be modified")
        current.update(values)
        self.put(ref[0], current)
        if not self.access.get(ref):
            return {}
        self.flush_retry()
        return self.send(ref)

    def pending_retries(self) -> int:
        return len(self.retry)

    def flush_retry(self) -> int:
        """Replay queued offline work; returns the number of operations that completed."""
        if not self.retry or self.client is None:
            return 0
        queued, self.retry = self.retry, []
        done = 0
        sends = []
        for entry in queued:
            op = entry["op"]
            if op == "send":
                ref = (entry["table"], entry["pk"])
                fields = self.access.get(ref, {}).get(entry["receiver"])
                row = self.store.get_row(*ref) if ref[0] in self.store.tables else None
                if fields is not None and row is not None and row.owned:
                    sends.append((ref, entry["receiver"], fields))
            elif op == "deposit":
                s = self.sent.get(entry["id"])
                if s is not None and not s.revoked and not s.deposited:
                    self._deposit([s])
                    done += s.deposited
            elif op == "revoke":
                s = self.sent.get(entry["id"])
                if s is not None and not s.revoked:
                    self._revoke_key(s)
                    done += s.revoked
        if sends:
            shared = self._share(sends)
            done += sum(len(v) for v in shared.values())
        self.save_state()
        return done

    # -- receiver operations -----------------------------------------------

    def receive(self) -> int:
        """Store every pending row addressed to us (still sealed), then clear the mailbox."""
        client = self._require_client()
        self.flush_retry()
        rows = list(client.iter_pending_rows())
        if not rows:
            return 0
        known = self.store.known_shared_ids() | self.revoked_ids
        new = 0
        for p in rows:
            if p.id_pending_row in known:
                continue
            self.store.sealed[p.id_pending_row] = p.encrypted_row
            known.add(p.id_pending_row)
            new += 1
        self.save()
        _fault("receive-after-store")
        try:
            client.delete_pending_rows([p.id_pending_row for p in rows])
        except TransportError as exc:
            # rows are stored; the next receive dedupes them
            logger.warning("receive: could not clear mailbox (%s)", exc)
        return new

    def use(self, id_pending_row: int, *, revalidate: bool = False) -> Row:
        """Decrypt a shared row.

        The key is fetched once per session and cached; ``revalidate=True``
        asks the synchronizer again even when a cached key exists. Raises
        :class:`RevokedError`, :class:`UnavailableError` or
        :class:`IntegrityError`.
        """
        row = self.store.find_shared(id_pending_row)
        if row is not None and id_pending_row in self.key_cache and not revalidate:
            return row
        if row is None and id_pending_row not in self.store.sealed:
            if id_pending_row in self.revoked_ids:
                raise RevokedError(id_pending_row)
            if id_pending_row in self.store.quarantined:
                raise IntegrityError(id_pending_row, "previously failed authentication")
            raise UnknownRowError(f"no shared row {id_pending_row}")
        if self.client is None:
            raise UnavailableError(id_pending_row)
        try:
            rec = self.client.get_decrypting_key(id_pending_row)
            self.stats["key_fetches"] += 1
            if rec is None:
                self._on_revoked(id_pending_row)
                raise RevokedError(id_pending_row)
            key = self._open_key_record(rec, id_pending_row)
        except TransportError as exc:
            raise UnavailableError(id_pending_row, str(exc)) from None
        except AuthenticationError as exc:
            self._quarantine(id_pending_row)
            raise IntegrityError(id_pending_row, str(exc)) from None

        if row is not None:
            self.key_cache[id_pending_row] = (key, time.time())
            return row
        cipher = self.store.sealed[id_pending_row]
        try:
            self.stats["decrypts"] += 1
            decoded = deserialize_row(decrypt_row(cipher, key))
        except (AuthenticationError, ValueError) as exc:
            self._quarantine(id_pending_row)
            raise IntegrityError(id_pending_row, str(exc)) from None
        decoded = replace(decoded, id_pending_row_received=id_pending_row)
        try:
            self.store.prepare_for(decoded)
            stored = self.store.upsert_row(decoded)
        except (SchemaError, OwnershipConflict) as exc:
            raise IntegrityError(id_pending_row, str(exc)) from None
        if not stored:
            # a newer version of this dossier is already loaded
            self.store.sealed.pop(id_pending_row, None)
            return self.store.get_row(decoded.table, decoded.primary_key)
        self.key_cache[id_pending_row] = (key, time.time())
        return decoded

    def _on_revoked(self, id_pending_row: int) -> None:
        cached = self.key_cache.pop(id_pending_row, None)
        if self.revoked_policy == "delete":
            self.store.remove_shared(id_pending_row)
            self.revoked_ids.add(id_pending_row)
        elif cached is not None:
            self.store.seal(id_pending_row, cached[0])

    def _quarantine(self, id_pending_row: int) -> None:
        cipher = self.store.sealed.pop(id_pending_row, None)
        if cipher is None:
            entry = self.key_cache.pop(id_pending_row, None)
            row = self.store.find_shared(id_pending_row)
            if row is None or entry is None:
                return
            cipher = encrypt_row(serialize_row(row), entry[0])
            self.store.remove_shared(id_pending_row)
        self.store.quarantined[id_pending_row] = cipher


def _scan_shared_ids(path: Path) -> list[int]:
    try:
        text = path.read_text(encoding="utf-8")
    except FileNotFoundError:
        return []
    ids = []
    for line in text.split("\n"):
        if line.startswith("$"):
            head, sep, _ = line.partition("@")
            if sep and head[1:].isdigit():
                ids.append(int(head[1:]))
    return ids


__all__ = [
    "Agent",
    "AgentError",
    "Identity",
    "IntegrityError",
    "KeyUnavailableError",
    "NotOwnedError",
    "RevokedError",
    "SentRecord",
    "UnavailableError",
    "UnknownRowError",
]
