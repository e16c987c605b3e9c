"""Journal line codec: golden lines plus a differential check of both backends."""

import math
import os

import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st

from rowshare import _codec_py, codec

try:
    from rowshare import _codec as compiled
except ImportError:  # extension not built
    compiled = None

BACKENDS = [pytest.param(_codec_py, id="python")]
if compiled is not None:
    BACKENDS.append(pytest.param(compiled, id="compiled"))

needs_compiled = pytest.mark.skipif(compiled is None, reason="compiled codec not built")

identifiers = st.from_regex(r"[A-Za-z_][A-Za-z0-9_]{0,12}", fullmatch=True)
values = st.one_of(
    st.none(),
    st.booleans(),
    st.integers(min_value=-(2**70), max_value=2**70),
    st.floats(allow_nan=False, allow_infinity=False),
    st.text(max_size=60),
)


@st.composite
def statements(draw):
    table = draw(identifiers)
    columns = draw(st.lists(identifiers, min_size=1, max_size=6, unique=True))
    row = draw(st.lists(values, min_size=len(columns), max_size=len(columns)))
    return table, columns, row


def same_values(a, b):
    assert len(a) == len(b)
    for x, y in zip(a, b):
        assert type(x) is type(y)
        assert x == y
        if isinstance(x, float):
            assert math.copysign(1, x) == math.copysign(1, y)


def test_default_backend_is_compiled_when_built():
    if compiled is None or os.environ.get("ROWSHARE_PURE_PYTHON"):
        assert codec.IMPLEMENTATION == "python"
    else:
        assert codec.IMPLEMENTATION == "compiled"


@pytest.mark.parametrize("impl", BACKENDS)
class TestGolden:
    def test_known_statements(self, impl):
        assert impl.format_insert("students", ["id", "name"], [12, "Alice"]) == \
            "INSERT INTO students(id,name) VALUES(12,'Alice');"
        assert impl.parse_insert("INSERT INTO students(id,name) VALUES(23,'Carol');") == \
            ("students", ["id", "name"], [23, "Carol"])

    def test_literals(self, impl):
        line = impl.format_insert("t", ["a", "b", "c", "d", "e"], [None, True, False, -4, 2.0])
        assert line == "INSERT INTO t(a,b,c,d,e) VALUES(NULL,TRUE,FALSE,-4,2.0);"
        assert impl.parse_insert(line)[2] == [None, True, False, -4, 2.0]

    def test_escapes(self, impl):
        text = "O'Brien\\path\nline\rend"
        line = impl.format_insert("t", ["s"], [text])
        assert "\n" not in line and "\r" not in line
        assert line == "INSERT INTO t(s) VALUES('O''Brien\\\\path\\nline\\rend');"
        assert impl.parse_insert(line)[2] == [text]

    def test_empty_string(self, impl):
        assert impl.parse_insert(impl.format_insert("t", ["s"], [""]))[2] == [""]

    def test_shared_line(self, impl):
        assert impl.format_shared(27, b"\x5d\xaa") == "$27@5DAA"
        assert impl.parse_shared("$27@5DAAAED5") == (27, bytes.fromhex("5DAAAED5"))

    @pytest.mark.parametrize("line", [
        "", "INSERT INTO t(a) VALUES(1)", "INSERT INTO t(a)VALUES(1);", "INSERT INTO t(a) VALUES('x);",
        "INSERT INTO t(a,b) VALUES(1);", "INSERT INTO t(a) VALUES(1,2);", "INSERT INTO 1t(a) VALUES(1);",
        "INSERT INTO t(a) VALUES(1); ", "INSERT INTO t(a) VALUES(x);", "UPDATE t SET a=1;",
        "INSERT INTO t(a) VALUES('a\\q');",
    ])
    def test_malformed_statements(self, impl, line):
        with pytest.raises(ValueError):
            impl.parse_insert(line)

    @pytest.mark.parametrize("line", ["$27@5daa", "$27@ABC", "$@AB", "$27@", "27@AB", "$27@AB ", "$-1@AB", "$2 7@AB"])
    def test_malformed_shared(self, impl, line):
        with pytest.raises(ValueError):
            impl.parse_shared(line)

    @pytest.mark.parametrize("bad", [float("inf"), float("nan"), b"bytes", [1]])
    def test_unrepresentable_values(self, impl, bad):
        with pytest.raises((ValueError, TypeError)):
            impl.format_value(bad)

    @pytest.mark.parametrize("name", ["", "1a", "a-b", "a b", "é"])
    def test_bad_identifiers(self, impl, name):
        with pytest.raises(ValueError):
            impl.check_identifier(name)


@pytest.mark.parametrize("impl", BACKENDS)
@settings(max_examples=300, deadline=None)
@given(stmt=statements())
def test_roundtrip_property(impl, stmt):
    table, columns, row = stmt
    parsed = impl.parse_insert(impl.format_insert(table, columns, row))
    assert parsed[0] == table and parsed[1] == columns
    same_values(parsed[2], row)


@needs_compiled
class TestDifferential:
    @settings(max_examples=500, deadline=None)
    @given(stmt=statements())
    def test_format_identical(self, stmt):
        assert compiled.format_insert(*stmt) == _codec_py.format_insert(*stmt)

    @settings(max_examples=500, deadline=None)
    @given(stmt=statements(), cut=st.integers(min_value=0, max_value=400), junk=st.text(max_size=3))
    def test_parse_agrees_on_mutated_lines(self, stmt, cut, junk):
        line = _codec_py.format_insert(*stmt)
        cut = min(cut, len(line))
        mutated = line[:cut] + junk + line[cut:]
        outcomes = []
        for impl in (compiled, _codec_py):
            try:
                outcomes.append(("ok", impl.parse_insert(mutated)))
            except ValueError:
                outcomes.append(("error", None))
        assert outcomes[0][0] == outcomes[1][0], mutated
        if outcomes[0][0] == "ok":
            assert outcomes[0][1][:2] == outcomes[1][1][:2]
            same_values(outcomes[0][1][2], outcomes[1][1][2])

    @settings(max_examples=300, deadline=None)
    @given(st.text(alphabet="$@0123456789ABCDEFabcdef ", max_size=20))
    def test_shared_parse_agrees(self, line):
        results = []
        for impl in (compiled, _codec_py):
            try:
                results.append(impl.parse_shared(line))
            except ValueError:
                results.append("error")
        assert results[0] == results[1]

    @settings(max_examples=300, deadline=None)
    @given(st.integers(min_value=0, max_value=2**63), st.binary(max_size=300))
    def test_shared_format_identical(self, ident, blob):
        assert compiled.format_shared(ident, blob) == _codec_py.format_shared(ident, blob)

    @given(values)
    def test_value_format_identical(self, value):
        assume(not isinstance(value, float) or math.isfinite(value))
        assert compiled.format_value(value) == _codec_py.format_value(value)
