"""In-memory table store persisted as a line journal.

Owned rows are written as plain ``INSERT`` statements. Rows received from
other owners are written as ``$<id_pending_row>@<HEX>`` lines, where HEX is
the whole serialized row sealed under that row's key. Shared lines whose key
cannot be obtained at load time stay sealed in :attr:`Store.sealed` and are
written back verbatim.
"""

from __future__ import annotations

import os
import tempfile
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Callable, Iterable, Mapping, Optional, Union

from . import codec
from .crypto import AuthenticationError, decrypt_row, encrypt_row
from .errors import (
    DuplicateTableError,
    JournalParseError,
    KeyUnavailableError,
    OwnershipConflict,
    SchemaError,
    TransportError,
    UnknownTableError,
)

PROVENANCE_COLUMN = "id_pending_row_received"
SERIAL_VERSION = 1

KeyResolver = Callable[[int], Optional[bytes]]
"""Returns the row key for a pending-row id, ``None`` when the key is
affirmatively absent (revoked or never granted), and raises
:class:`~rowshare.errors.TransportError` when the synchronizer is unreachable."""


@dataclass(frozen=True)
class Row:
    """One dossier. The first field is always the primary key."""

    table: str
    fields: tuple[tuple[str, Any], ...]
    id_pending_row_received: Optional[int] = None

    @property
    def primary_key(self) -> Any:
        return self.fields[0][1]

    @property
    def columns(self) -> tuple[str, ...]:
        return tuple(name for name, _ in self.fields)

    @property
    def owned(self) -> bool:
        return self.id_pending_row_received is None

    def get(self, name: str, default: Any = None) -> Any:
        for col, value in self.fields:
            if col == name:
                return value
        return default

    def as_dict(self) -> dict[str, Any]:
        return dict(self.fields)

    def project(self, columns: Iterable[str]) -> "Row":
        """Copy restricted to ``columns`` (primary key always kept), without provenance."""
        keep = set(columns)
        pk_name = self.fields[0][0]
        pairs = tuple(
            (name, value) for i, (name, value) in enumerate(self.fields) if i == 0 or name in keep
        )
        assert pairs[0][0] == pk_name
        return Row(self.table, pairs)


@dataclass
class Table:
    name: str
    columns: tuple[str, ...]
    rows: dict[Any, Row] = field(default_factory=dict)

    @property
    def pk(self) -> str:
        return self.columns[0]


def serialize_row(row: Row) -> bytes:
    """Canonical bytes of a row: a version byte followed by its INSERT statement."""
    columns = [name for name, _ in row.fields]
    values = [value for _, value in row.fields]
    if row.id_pending_row_received is not None:
        columns.append(PROVENANCE_COLUMN)
        values.append(int(row.id_pending_row_received))
    text = codec.format_insert(row.table, columns, values)
    return bytes((SERIAL_VERSION,)) + text.encode("utf-8")


def deserialize_row(data: bytes) -> Row:
    if not data or data[0] != SERIAL_VERSION:
        raise JournalParseError("unknown serialized row version")
    try:
        table, columns, values = codec.parse_insert(data[1:].decode("utf-8"))
    except (UnicodeDecodeError, ValueError) as exc:
        raise JournalParseError(f"corrupt serialized row: {exc}") from None
    provenance = None
    if columns and columns[-1] == PROVENANCE_COLUMN:
        provenance = values.pop()
        columns.pop()
        if type(provenance) is not int:
            raise JournalParseError("provenance id must be an integer")
    if not columns:
        raise JournalParseError("row has no columns")
    return Row(table, tuple(zip(columns, values)), provenance)


def _pk_order(value: Any) -> tuple:
    if isinstance(value, (int, float)):
        return (0, value)
    return (1, str(value))


@dataclass
class Store:
    tables: dict[str, Table] = field(default_factory=dict)
    sealed: dict[int, bytes] = field(default_factory=dict)
    quarantined: dict[int, bytes] = field(default_factory=dict, compare=False)
    _shared_index: dict[int, tuple[str, Any]] = field(default_factory=dict, compare=False, repr=False)

    # -- schema ------------------------------------------------------------

    def create_table(self, name: str, columns: Iterable[str], pk: str) -> Table:
        """Register an empty table. Columns are reordered so the primary key comes first."""
        codec.check_identifier(name)
        columns = list(columns)
        if name in self.tables:
            raise DuplicateTableError(f"table {name!r} already exists")
        if pk not in columns:
            raise SchemaError(f"primary key {pk!r} is not a column of {name!r}")
        if len(set(columns)) != len(columns):
            raise SchemaError("duplicate column names")
        for col in columns:
            codec.check_identifier(col)
            if col == PROVENANCE_COLUMN:
                raise SchemaError(f"{PROVENANCE_COLUMN} is implicit and reserved")
        ordered = (pk,) + tuple(c for c in columns if c != pk)
        table = Table(name, ordered)
        self.tables[name] = table
        return table

    def prepare_for(self, row: Row) -> Table:
        """Make sure a shared row fits: create its table, or widen a table holding no owned rows."""
        if row.table not in self.tables:
            return self.create_table(row.table, row.columns, row.columns[0])
        table = self.tables[row.table]
        extra = [c for c in row.columns if c not in table.columns]
        if extra and row.columns[0] == table.pk and all(not r.owned for r in table.rows.values()):
            for col in extra:
                codec.check_identifier(col)
            table.columns += tuple(extra)
        return table

    def table(self, name: str) -> Table:
        try:
            return self.tables[name]
        except KeyError:
            raise UnknownTableError(f"unknown table {name!r}") from None

    # -- rows --------------------------------------------------------------

    def upsert_row(self, row: Row) -> bool:
        """Insert or replace by primary key. Returns False if a newer shared version is kept."""
        table = self.table(row.table)
        cols = row.columns
        if row.id_pending_row_received is None:
            if cols != table.columns:
                raise SchemaError(f"row columns {cols} do not match {table.columns}")
        elif cols[0] != table.pk or not set(cols) <= set(table.columns) or len(set(cols)) != len(cols):
            raise SchemaError(f"shared row columns {cols} do not fit {table.columns}")
        pk = row.primary_key
        if pk is None:
            raise SchemaError("primary key may not be NULL")
        existing = table.rows.get(pk)
        if existing is not None:
            old_id = existing.id_pending_row_received
            new_id = row.id_pending_row_received
            if (old_id is None) != (new_id is None):
                raise OwnershipConflict(f"{row.table}[{pk!r}] is owned by a different party")
            if old_id is not None:
                if old_id > new_id:
                    return False
                del self._shared_index[old_id]
        table.rows[pk] = row
        if row.id_pending_row_received is not None:
            self._shared_index[row.id_pending_row_received] = (row.table, pk)
            self.sealed.pop(row.id_pending_row_received, None)
        return True

    def get_row(self, table: str, pk: Any) -> Optional[Row]:
        return self.table(table).rows.get(pk)

    def delete_row(self, table: str, pk: Any) -> Optional[Row]:
        row = self.table(table).rows.pop(pk, None)
        if row is not None and row.id_pending_row_received is not None:
            self._shared_index.pop(row.id_pending_row_received, None)
        return row

    def query(
        self, table: str, where: Union[Mapping[str, Any], Callable[[Row], bool], None] = None
    ) -> list[Row]:
        """Rows of ``table`` in primary-key order, filtered by column equality or a predicate."""
        rows = sorted(self.table(table).rows.values(), key=lambda r: _pk_order(r.primary_key))
        if where is None:
            return rows
        if callable(where):
            return [r for r in rows if where(r)]
        items = list(where.items())
        return [r for r in rows if all(r.get(k, _MISSING) == v for k, v in items)]

    # -- shared rows -------------------------------------------------------

    def find_shared(self, id_pending_row: int) -> Optional[Row]:
        loc = self._shared_index.get(id_pending_row)
        if loc is None:
            return None
        return self.tables[loc[0]].rows.get(loc[1])

    def shared_rows(self) -> list[Row]:
        return [self.find_shared(i) for i in sorted(self._shared_index)]

    def known_shared_ids(self) -> set[int]:
        return set(self._shared_index) | set(self.sealed) | set(self.quarantined)

    def remove_shared(self, id_pending_row: int) -> bool:
        found = self.sealed.pop(id_pending_row, None) is not None
        loc = self._shared_index.get(id_pending_row)
        if loc is not None:
            self.delete_row(*loc)
            found = True
        return found

    def seal(self, id_pending_row: int, key: bytes) -> None:
        """Move a decrypted shared row back to its encrypted form."""
        row = self.find_shared(id_pending_row)
        if row is None:
            return
        self.sealed[id_pending_row] = encrypt_row(serialize_row(row), key)
        self.delete_row(row.table, row.primary_key)

    def row_count(self) -> int:
        return sum(len(t.rows) for t in self.tables.values())


_MISSING = object()


# --------------------------------------------------------------------------
# journal persistence


@dataclass
class LoadReport:
    plain_rows: int = 0
    shared_rows: int = 0
    decrypts: int = 0
    key_requests: int = 0
    dropped_ids: list[int] = field(default_factory=list)
    retained_ids: list[int] = field(default_factory=list)
    revoked_retained_ids: list[int] = field(default_factory=list)
    quarantined_ids: list[int] = field(default_factory=list)
    stale_ids: list[int] = field(default_factory=list)
    conflict_ids: list[int] = field(default_factory=list)
    errors: list[tuple[int, str]] = field(default_factory=list)

    @property
    def rows_loaded(self) -> int:
        return self.plain_rows + self.shared_rows


def journal_lines(store: Store, key_resolver: KeyResolver) -> list[str]:
    lines: list[str] = []
    for table in store.tables.values():
        for pk in sorted(table.rows, key=_pk_order):
            row = table.rows[pk]
            if row.id_pending_row_received is None:
                lines.append(codec.format_insert(table.name, table.columns, [v for _, v in row.fields]))
                continue
            key = key_resolver(row.id_pending_row_received)
            if key is None:
                raise KeyUnavailableError(f"no key for shared row {row.id_pending_row_received}")
            lines.append(
                codec.format_shared(row.id_pending_row_received, encrypt_row(serialize_row(row), key))
            )
    for id_pending_row in sorted(store.sealed):
        lines.append(codec.format_shared(id_pending_row, store.sealed[id_pending_row]))
    return lines


def atomic_write_text(path: Union[str, os.PathLike], text: str) -> None:
    path = Path(path)
    fd, tmp = tempfile.mkstemp(prefix=path.name + ".", suffix=".tmp", dir=path.parent or ".")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        try:
            os.unlink(tmp)
        except FileNotFoundError:
            pass
        raise


def save_script(store: Store, path: Union[str, os.PathLike], key_resolver: KeyResolver) -> int:
    """Write the journal atomically; returns the number of lines.

    Every key is resolved before the file is touched, so a resolver failure
    leaves the previous journal intact.
    """
    lines = journal_lines(store, key_resolver)
    atomic_write_text(path, "".join(line + "\n" for line in lines))
    return len(lines)


def load_script(
    path: Union[str, os.PathLike],
    key_resolver: KeyResolver,
    store: Optional[Store] = None,
    *,
    on_absent: str = "drop",
) -> tuple[Store, LoadReport]:
    """Rebuild a store from a journal.

    ``on_absent`` selects what happens to a shared line whose key is
    affirmatively absent: ``"drop"`` discards it, ``"retain"`` keeps it sealed.
    A missing file yields an empty store.
    """
    if on_absent not in ("drop", "retain"):
        raise ValueError("on_absent must be 'drop' or 'retain'")
    store = store if store is not None else Store()
    report = LoadReport()
    try:
        text = Path(path).read_text(encoding="utf-8")
    except FileNotFoundError:
        return store, report

    seen: set[int] = set()
    for lineno, line in enumerate(text.split("\n"), 1):
        if not line:
            continue
        if line[0] == "$":
            _load_shared_line(store, report, lineno, line, key_resolver, on_absent, seen)
            continue
        try:
            table, columns, values = codec.parse_insert(line)
            if PROVENANCE_COLUMN in columns:
                raise ValueError(f"{PROVENANCE_COLUMN} not allowed in a plaintext line")
            row = Row(table, tuple(zip(columns, values)))
            if table not in store.tables:
                store.create_table(table, columns, columns[0])
            store.upsert_row(row)
        except (ValueError, OwnershipConflict) as exc:
            report.errors.append((lineno, str(exc)))
            continue
        report.plain_rows += 1
    return store, report


def _load_shared_line(store, report, lineno, line, key_resolver, on_absent, seen) -> None:
    try:
        id_pending_row, cipher = codec.parse_shared(line)
    except ValueError as exc:
        report.errors.append((lineno, str(exc)))
        return
    if id_pending_row in seen:
        report.errors.append((lineno, f"duplicate shared line {id_pending_row}"))
        return
    seen.add(id_pending_row)

    report.key_requests += 1
    try:
        key = key_resolver(id_pending_row)
    except TransportError:
        store.sealed[id_pending_row] = cipher
        report.retained_ids.append(id_pending_row)
        return
    except AuthenticationError as exc:
        store.quarantined[id_pending_row] = cipher
        report.quarantined_ids.append(id_pending_row)
        report.errors.append((lineno, f"key for {id_pending_row} rejected: {exc}"))
        return
    if key is None:
        if on_absent == "retain":
            store.sealed[id_pending_row] = cipher
            report.revoked_retained_ids.append(id_pending_row)
        else:
            report.dropped_ids.append(id_pending_row)
        return

    report.decrypts += 1
    try:
        row = deserialize_row(decrypt_row(cipher, key))
        if row.id_pending_row_received not in (None, id_pending_row):
            raise JournalParseError("header id does not match sealed provenance id")
    except (AuthenticationError, JournalParseError) as exc:
        store.quarantined[id_pending_row] = cipher
        report.quarantined_ids.append(id_pending_row)
        report.errors.append((lineno, str(exc)))
        return
    row = replace(row, id_pending_row_received=id_pending_row)
    try:
        store.prepare_for(row)
        stored = store.upsert_row(row)
    except (SchemaError, OwnershipConflict) as exc:
        store.sealed[id_pending_row] = cipher
        report.conflict_ids.append(id_pending_row)
        report.errors.append((lineno, str(exc)))
        return
    if stored:
        report.shared_rows += 1
    else:
        report.stale_ids.append(id_pending_row)
