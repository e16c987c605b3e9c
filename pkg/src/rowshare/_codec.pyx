# cython: language_level=3, boundscheck=False, wraparound=False
"""Compiled journal line codec. Behaviour matches ``_codec_py`` exactly."""

from libc.math cimport isfinite

_HEXDIGITS = "0123456789ABCDEF"


cdef inline bint _ident_start(Py_UCS4 c):
    return (c >= u'A' and c <= u'Z') or (c >= u'a' and c <= u'z') or c == u'_'


cdef inline bint _ident_char(Py_UCS4 c):
    return _ident_start(c) or (c >= u'0' and c <= u'9')


cdef inline bint _digit(Py_UCS4 c):
    return c >= u'0' and c <= u'9'


cpdef str check_identifier(name):
    cdef str s
    cdef Py_ssize_t i, n
    if not isinstance(name, str):
        raise ValueError(f"invalid identifier: {name!r}")
    s = <str>name
    n = len(s)
    if n == 0 or not _ident_start(s[0]):
        raise ValueError(f"invalid identifier: {name!r}")
    for i in range(1, n):
        if not _ident_char(s[i]):
            raise ValueError(f"invalid identifier: {name!r}")
    return s


cdef str _escape(str value):
    cdef Py_ssize_t i, n = len(value)
    cdef Py_UCS4 c
    cdef list parts
    for i in range(n):
        c = value[i]
        if c == u"'" or c == u"\\" or c == u"\n" or c == u"\r":
            break
    else:
        return "'" + value + "'"
    parts = ["'"]
    for i in range(n):
        c = value[i]
        if c == u"'":
            parts.append("''")
        elif c == u"\\":
            parts.append("\\\\")
        elif c == u"\n":
            parts.append("\\n")
        elif c == u"\r":
            parts.append("\\r")
        else:
            parts.append(c)
    parts.append("'")
    return "".join(parts)


cpdef str format_value(value):
    cdef double d
    cdef str text
    if value is None:
        return "NULL"
    if value is True:
        return "TRUE"
    if value is False:
        return "FALSE"
    if isinstance(value, str):
        return _escape(<str>value)
    if isinstance(value, int):
        return str(int(value))
    if isinstance(value, float):
        d = value
        if not isfinite(d):
            raise ValueError(f"non-finite float not representable: {value!r}")
        text = repr(value)
        if "." not in text and "e" not in text:
            text += ".0"
        return text
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


cdef Py_ssize_t _expect(str line, Py_ssize_t pos, str word) except -1:
    cdef Py_ssize_t n = len(word)
    if line[pos:pos + n] != word:
        raise ValueError(f"expected {word!r} at offset {pos}")
    return pos + n


def parse_insert(str line):
    """Parse one plain statement into ``(table, columns, values)``; raises ValueError."""
    cdef Py_ssize_t n = len(line)
    cdef Py_ssize_t pos, start, i
    cdef Py_UCS4 c
    cdef bint is_float, escaped
    cdef list columns = []
    cdef list values = []
    cdef list buf
    cdef str table, text

    if not line.startswith("INSERT INTO "):
        raise ValueError("not an INSERT statement")
    pos = 12
    start = pos
    if pos >= n or not _ident_start(line[pos]):
        raise ValueError("not an INSERT statement")
    while pos < n and _ident_char(line[pos]):
        pos += 1
    table = line[start:pos]
    pos = _expect(line, pos, "(")
    while True:
        start = pos
        if pos >= n or not _ident_start(line[pos]):
            raise ValueError(f"invalid identifier at offset {pos}")
        while pos < n and _ident_char(line[pos]):
            pos += 1
        columns.append(line[start:pos])
        if pos < n and line[pos] == u",":
            pos += 1
            continue
        break
    pos = _expect(line, pos, ") VALUES(")

    while True:
        if pos >= n:
            raise ValueError(f"bad literal at offset {pos}")
        c = line[pos]
        if c == u"'":
            pos += 1
            start = pos
            escaped = False
            while True:
                if pos >= n:
                    raise ValueError(f"bad literal at offset {start - 1}")
                c = line[pos]
                if c == u"'":
                    if pos + 1 < n and line[pos + 1] == u"'":
                        escaped = True
                        pos += 2
                        continue
                    break
                if c == u"\\":
                    if pos + 1 < n and (line[pos + 1] == u"\\" or line[pos + 1] == u"n" or line[pos + 1] == u"r"):
                        escaped = True
                        pos += 2
                        continue
                    raise ValueError(f"bad literal at offset {start - 1}")
                pos += 1
            if not escaped:
                values.append(line[start:pos])
            else:
                buf = []
                i = start
                while i < pos:
                    c = line[i]
                    if c == u"'":
                        buf.append("'")
                        i += 2
                    elif c == u"\\":
                        c = line[i + 1]
                        buf.append("\\" if c == u"\\" else ("\n" if c == u"n" else "\r"))
                        i += 2
                    else:
                        buf.append(c)
                        i += 1
                values.append("".join(buf))
            pos += 1
        elif c == u"-" or c == u"." or _digit(c):
            start = pos
            is_float = False
            if c == u"-":
                pos += 1
            if pos < n and _digit(line[pos]):
                while pos < n and _digit(line[pos]):
                    pos += 1
                if pos < n and line[pos] == u".":
                    is_float = True
                    pos += 1
                    while pos < n and _digit(line[pos]):
                        pos += 1
            elif pos < n and line[pos] == u"." and pos + 1 < n and _digit(line[pos + 1]):
                is_float = True
                pos += 1
                while pos < n and _digit(line[pos]):
                    pos += 1
            else:
                raise ValueError(f"bad literal at offset {start}")
            if pos < n and (line[pos] == u"e" or line[pos] == u"E"):
                i = pos + 1
                if i < n and (line[i] == u"+" or line[i] == u"-"):
                    i += 1
                if i < n and _digit(line[i]):
                    is_float = True
                    pos = i
                    while pos < n and _digit(line[pos]):
                        pos += 1
            text = line[start:pos]
            values.append(float(text) if is_float else int(text))
        elif line.startswith("NULL", pos):
            values.append(None)
            pos += 4
        elif line.startswith("TRUE", pos):
            values.append(True)
            pos += 4
        elif line.startswith("FALSE", pos):
            values.append(False)
            pos += 5
        else:
            raise ValueError(f"bad literal at offset {pos}")
        if pos < n and line[pos] == u",":
            pos += 1
            continue
        break
    if line[pos:] != ");":
        raise ValueError(f"unexpected trailing text at offset {pos}")
    if len(values) != len(columns):
        raise ValueError("column/value count mismatch")
    return table, columns, values


def format_shared(id_pending_row, cipher):
    return "$" + str(int(id_pending_row)) + "@" + bytes(cipher).hex().upper()


def parse_shared(str line):
    """Parse ``$id@HEX`` into ``(id, cipher_bytes)``; raises ValueError."""
    cdef Py_ssize_t n = len(line)
    cdef Py_ssize_t pos = 1, at
    cdef Py_UCS4 c
    if n < 4 or line[0] != u"$":
        raise ValueError("malformed shared line")
    while pos < n and _digit(line[pos]):
        pos += 1
    if pos == 1 or pos >= n or line[pos] != u"@":
        raise ValueError("malformed shared line")
    at = pos
    pos += 1
    if pos >= n or (n - pos) % 2:
        raise ValueError("malformed shared line")
    for pos in range(at + 1, n):
        c = line[pos]
        if not (_digit(c) or (c >= u"A" and c <= u"F")):
            raise ValueError("malformed shared line")
    return int(line[1:at]), bytes.fromhex(line[at + 1:])
