"""Pure-Python journal line codec (fallback for the compiled ``_codec``).

Grammar of a plain line::

    INSERT INTO <table>(<col>,<col>,...) VALUES(<lit>,<lit>,...);

Literals are ``NULL``, ``TRUE``, ``FALSE``, integers, floats (Python
``repr``) and single-quoted strings. Inside a string ``'`` is doubled and
backslash, newline and carriage return are written ``\\\\``, ``\\n`` and
``\\r`` so every statement stays on one line.
"""

import math
import re

_IDENT = re.compile(r"[A-Za-z_][A-Za-z0-9_]*\Z")
_HEADER = re.compile(r"INSERT INTO ([A-Za-z_][A-Za-z0-9_]*)\(([^)]*)\) VALUES\(")
_TOKEN = re.compile(
    r"""(?:
        (?P<str>'(?:[^'\\]|''|\\[\\nr])*')
      | (?P<num>-?(?:\d+\.?\d*(?:[eE][+-]?\d+)?|\.\d+(?:[eE][+-]?\d+)?))
      | (?P<kw>NULL|TRUE|FALSE)
    )""",
    re.VERBOSE,
)
_UNESCAPE = re.compile(r"''|\\[\\nr]")
_UNESCAPES = {"''": "'", "\\\\": "\\", "\\n": "\n", "\\r": "\r"}
_KEYWORDS = {"NULL": None, "TRUE": True, "FALSE": False}
_SHARED = re.compile(r"\$([0-9]+)@([0-9A-F]+)\Z")


def check_identifier(name):
    if not isinstance(name, str) or not _IDENT.match(name):
        raise ValueError(f"invalid identifier: {name!r}")
    return name


def format_value(value):
    if value is None:
        return "NULL"
    if value is True:
        return "TRUE"
    if value is False:
        return "FALSE"
    if isinstance(value, int):
        return str(int(value))
    if isinstance(value, float):
        if not math.isfinite(value):
            raise ValueError(f"non-finite float not representable: {value!r}")
        text = repr(value)
        # keep floats distinguishable from integers on the way back
        if "." not in text and "e" not in text:
            text += ".0"
        return text
    if isinstance(value, str):
        return "'" + (
            value.replace("\\", "\\\\")
            .replace("'", "''")
            .replace("\n", "\\n")
            .replace("\r", "\\r")
        ) + "'"
    raise TypeError(f"unsupported column value type: {type(value).__name__}")


def format_insert(table, columns, values):
    if len(columns) != len(values):
        raise ValueError("column/value count mismatch")
    check_identifier(table)
    for col in columns:
        check_identifier(col)
    return (
        "INSERT INTO " + table + "(" + ",".join(columns) + ") VALUES("
        + ",".join([format_value(v) for v in values]) + ");"
    )


def _unescape(body):
    if "'" not in body and "\\" not in body:
        return body
    return _UNESCAPE.sub(lambda m: _UNESCAPES[m.group(0)], body)


def parse_insert(line):
    """Parse one plain statement into ``(table, columns, values)``; raises ValueError."""
    m = _HEADER.match(line)
    if m is None:
        raise ValueError("not an INSERT statement")
    table = m.group(1)
    columns = m.group(2).split(",")
    for col in columns:
        check_identifier(col)
    values = []
    pos = m.end()
    end = len(line)
    while True:
        t = _TOKEN.match(line, pos)
        if t is None:
            raise ValueError(f"bad literal at offset {pos}")
        kind = t.lastgroup
        text = t.group(kind)
        if kind == "str":
            values.append(_unescape(text[1:-1]))
        elif kind == "kw":
            values.append(_KEYWORDS[text])
        elif "." in text or "e" in text or "E" in text:
            values.append(float(text))
        else:
            values.append(int(text))
        pos = t.end()
        if pos < end and line[pos] == ",":
            pos += 1
            continue
        break
    if line[pos:] != ");":
        raise ValueError(f"unexpected trailing text at offset {pos}")
    if len(values) != len(columns):
        raise ValueError("column/value count mismatch")
    return table, columns, values


def format_shared(id_pending_row, cipher):
    return "$" + str(int(id_pending_row)) + "@" + cipher.hex().upper()


def parse_shared(line):
    """Parse ``$id@HEX`` into ``(id, cipher_bytes)``; raises ValueError."""
    m = _SHARED.match(line)
    if m is None or len(m.group(2)) % 2:
        raise ValueError("malformed shared line")
    return int(m.group(1)), bytes.fromhex(m.group(2))
