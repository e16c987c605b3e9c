"""Request/response envelopes and their length-prefixed framing.

A frame is a 4-byte big-endian payload length followed by that many bytes of
canonical JSON (sorted keys, no whitespace, UTF-8). Requests::

    {"id": 7, "method": "syn.sendRow", "payload": {...}, "token": "..."|null}

Responses mirror the request id and carry exactly one of ``result`` or
``error``::

    {"id": 7, "result": {...}}
    {"error": {"code": "NOT_FOUND", "message": "..."}, "id": 7}

Binary fields (ciphertexts, wrapped keys, signatures, public keys) travel as
uppercase hex. Each method's payload and result shapes are listed in
:data:`METHODS`; anything that does not match is a ``SCHEMA_ERROR``.
"""

from __future__ import annotations

import json
import re
import struct
from dataclasses import dataclass, field
from typing import Any, Iterator, Optional

from .errors import ErrorCode, ServiceError

HEADER = struct.Struct(">I")
HEADER_SIZE = HEADER.size
MAX_FRAME_SIZE = 1 << 20


class WireError(ServiceError):
    """Envelope could not be encoded or decoded. ``request_id`` is set when it was readable."""

    def __init__(self, code: ErrorCode, message: str = "", request_id: Optional[int] = None):
        super().__init__(code, message)
        self.request_id = request_id


# --------------------------------------------------------------------------
# payload schemas

STR, INT, NUM, HEX = "str", "int", "num", "hex"
_UPPER_HEX = re.compile(r"(?:[0-9A-F]{2})*\Z")


@dataclass(frozen=True)
class Opt:
    inner: Any


@dataclass(frozen=True)
class ListOf:
    inner: Any


USER_KEYS = {"enc_public": HEX, "sig_public": HEX}
PENDING_ROW = {
    "id_pending_row": INT,
    "sender": STR,
    "receiver": STR,
    "submitted_at": NUM,
    "encrypted_row": HEX,
    "origin_sig": HEX,
}
KEY_RECORD = {
    "id_row": INT,
    "sender": STR,
    "receiver": STR,
    "expiry": Opt(NUM),
    "wrapped_key": HEX,
    "origin_sig": HEX,
}


@dataclass(frozen=True)
class Method:
    request: dict
    result: Any
    auth: bool = True


METHODS: dict[str, Method] = {
    "reg.registerUser": Method(
        {"user_id": STR, "password": STR, "enc_public": HEX, "sig_public": HEX}, None, auth=False
    ),
    "reg.selectUserByIdAndPassword": Method(
        {"user_id": STR, "password": STR}, {"token": STR}, auth=False
    ),
    "key.getPublicKeyByUser": Method({"user_id": STR}, USER_KEYS),
    "key.depositKey": Method(KEY_RECORD, None),
    "key.getDecryptingKeyByIdPendingRow": Method({"id_row": INT}, KEY_RECORD),
    "key.deleteDecryptingKey": Method({"id_row": INT, "receiver": STR}, None),
    "syn.sendRow": Method(
        {"sender": STR, "receiver": STR, "encrypted_row": HEX, "origin_sig": HEX},
        {"id_pending_row": INT},
    ),
    "syn.getPendingRowForUser": Method(
        {"after": Opt(INT), "limit": Opt(INT)}, {"rows": ListOf(PENDING_ROW)}
    ),
    "syn.deletePendingRow": Method({"id_pending_row": INT}, None),
    "syn.resendRow": Method({"id_pending_row": INT}, {"id_pending_row": INT}),
    "syn.getAllUsers": Method({}, {"users": ListOf(STR)}),
}


def _to_wire(schema: Any, value: Any, where: str) -> Any:
    if isinstance(schema, Opt):
        return None if value is None else _to_wire(schema.inner, value, where)
    if isinstance(schema, ListOf):
        if not isinstance(value, (list, tuple)):
            raise WireError(ErrorCode.SCHEMA_ERROR, f"{where}: expected list")
        return [_to_wire(schema.inner, v, f"{where}[{i}]") for i, v in enumerate(value)]
    if isinstance(schema, dict):
        if not isinstance(value, dict) or set(value) != set(schema):
            got = sorted(value) if isinstance(value, dict) else type(value).__name__
            raise WireError(ErrorCode.SCHEMA_ERROR, f"{where}: expected fields {sorted(schema)}, got {got}")
        return {k: _to_wire(schema[k], value[k], f"{where}.{k}") for k in schema}
    if schema is None:
        if value is not None:
            raise WireError(ErrorCode.SCHEMA_ERROR, f"{where}: expected null")
        return None
    _check_scalar(schema, value, where, hex_as_bytes=True)
    return value.hex().upper() if schema == HEX else value


def _from_wire(schema: Any, value: Any, where: str) -> Any:
    if isinstance(schema, Opt):
        return None if value is None else _from_wire(schema.inner, value, where)
    if isinstance(schema, ListOf):
        if not isinstance(value, list):
            raise WireError(ErrorCode.SCHEMA_ERROR, f"{where}: expected list")
        return [_from_wire(schema.inner, v, f"{where}[{i}]") for i, v in enumerate(value)]
    if isinstance(schema, dict):
        if not isinstance(value, dict) or set(value) != set(schema):
            raise WireError(ErrorCode.SCHEMA_ERROR, f"{where}: expected fields {sorted(schema)}")
        return {k: _from_wire(schema[k], value[k], f"{where}.{k}") for k in schema}
    if schema is None:
        if value is not None:
            raise WireError(ErrorCode.SCHEMA_ERROR, f"{where}: expected null")
        return None
    _check_scalar(schema, value, where, hex_as_bytes=False)
    if schema == HEX:
        return bytes.fromhex(value)
    return value


def _check_scalar(schema: str, value: Any, where: str, hex_as_bytes: bool) -> None:
    ok = True
    if schema == STR:
        ok = isinstance(value, str)
    elif schema == INT:
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif schema == NUM:
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
    elif schema == HEX:
        if hex_as_bytes:
            ok = isinstance(value, (bytes, bytearray))
        else:
            ok = isinstance(value, str) and _UPPER_HEX.match(value) is not None
    if not ok:
        raise WireError(ErrorCode.SCHEMA_ERROR, f"{where}: expected {schema}")


# --------------------------------------------------------------------------
# envelopes


@dataclass
class Request:
    request_id: int
    method: str
    payload: dict = field(default_factory=dict)
    token: Optional[str] = None


@dataclass
class Response:
    request_id: int
    result: Any = None
    error: Optional[ServiceError] = None

    @property
    def ok(self) -> bool:
        return self.error is None

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Response):
            return NotImplemented
        mine = (self.error.code, self.error.message) if self.error else None
        theirs = (other.error.code, other.error.message) if other.error else None
        return (self.request_id, self.result, mine) == (other.request_id, other.result, theirs)


def _dumps(obj: Any) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False).encode("utf-8")


def frame(body: bytes) -> bytes:
    if len(body) > MAX_FRAME_SIZE:
        raise WireError(ErrorCode.FRAME_TOO_LARGE, f"{len(body)} bytes exceeds {MAX_FRAME_SIZE}")
    return HEADER.pack(len(body)) + body


def unframe(data: bytes) -> bytes:
    """Body of exactly one complete frame."""
    if len(data) < HEADER_SIZE:
        raise WireError(ErrorCode.SCHEMA_ERROR, "truncated frame header")
    (length,) = HEADER.unpack_from(data)
    if length > MAX_FRAME_SIZE:
        raise WireError(ErrorCode.FRAME_TOO_LARGE, f"{length} bytes exceeds {MAX_FRAME_SIZE}")
    if len(data) - HEADER_SIZE != length:
        raise WireError(ErrorCode.SCHEMA_ERROR, "frame length does not match header")
    return data[HEADER_SIZE:]


def _load_json(body: bytes) -> dict:
    try:
        obj = json.loads(body.decode("utf-8"))
    except (UnicodeDecodeError, ValueError) as exc:
        raise WireError(ErrorCode.SCHEMA_ERROR, f"invalid JSON: {exc}") from None
    if not isinstance(obj, dict):
        raise WireError(ErrorCode.SCHEMA_ERROR, "envelope must be an object")
    return obj


def encode_request(req: Request) -> bytes:
    spec = METHODS.get(req.method)
    if spec is None:
        raise WireError(ErrorCode.METHOD_UNKNOWN, req.method, req.request_id)
    payload = _to_wire(spec.request, req.payload, req.method)
    return frame(_dumps({"id": req.request_id, "method": req.method, "payload": payload, "token": req.token}))


def decode_request(data: bytes) -> Request:
    obj = _load_json(unframe(data))
    request_id = obj.get("id")
    if not isinstance(request_id, int) or isinstance(request_id, bool):
        raise WireError(ErrorCode.SCHEMA_ERROR, "request id must be an integer")
    if set(obj) != {"id", "method", "payload", "token"}:
        raise WireError(ErrorCode.SCHEMA_ERROR, "malformed request envelope", request_id)
    method, token = obj["method"], obj["token"]
    spec = METHODS.get(method) if isinstance(method, str) else None
    if spec is None:
        raise WireError(ErrorCode.METHOD_UNKNOWN, f"unknown method {method!r}", request_id)
    if token is not None and not isinstance(token, str):
        raise WireError(ErrorCode.SCHEMA_ERROR, "token must be a string", request_id)
    try:
        payload = _from_wire(spec.request, obj["payload"], method)
    except WireError as exc:
        exc.request_id = request_id
        raise
    return Request(request_id, method, payload, token)


def encode_response(resp: Response, method: Optional[str] = None) -> bytes:
    """Encode a response; ``method`` selects the result schema (required for results)."""
    if resp.error is not None:
        err = {"code": resp.error.code.value, "message": resp.error.message}
        return frame(_dumps({"id": resp.request_id, "error": err}))
    spec = METHODS.get(method) if method else None
    if spec is None:
        raise WireError(ErrorCode.METHOD_UNKNOWN, f"cannot encode result for {method!r}", resp.request_id)
    result = _to_wire(spec.result, resp.result, f"{method} result")
    return frame(_dumps({"id": resp.request_id, "result": result}))


def decode_response(data: bytes, method: Optional[str] = None) -> Response:
    obj = _load_json(unframe(data))
    request_id = obj.get("id")
    if not isinstance(request_id, int) or isinstance(request_id, bool):
        raise WireError(ErrorCode.SCHEMA_ERROR, "response id must be an integer")
    if set(obj) == {"id", "error"}:
        err = obj["error"]
        if not isinstance(err, dict) or set(err) != {"code", "message"}:
            raise WireError(ErrorCode.SCHEMA_ERROR, "malformed error object", request_id)
        try:
            code = ErrorCode(err["code"])
        except ValueError:
            raise WireError(ErrorCode.SCHEMA_ERROR, f"unknown error code {err['code']!r}", request_id) from None
        return Response(request_id, None, ServiceError(code, str(err["message"])))
    if set(obj) != {"id", "result"}:
        raise WireError(ErrorCode.SCHEMA_ERROR, "malformed response envelope", request_id)
    spec = METHODS.get(method) if method else None
    if spec is None:
        raise WireError(ErrorCode.METHOD_UNKNOWN, f"cannot decode result for {method!r}", request_id)
    return Response(request_id, _from_wire(spec.result, obj["result"], f"{method} result"))


class FrameDecoder:
    """Incremental splitter for a byte stream of frames.

    Partial frames stay buffered until the rest arrives. An over-length
    header raises ``FRAME_TOO_LARGE``; the stream cannot be resynchronised
    after that.
    """

    def __init__(self, max_frame: int = MAX_FRAME_SIZE):
        self.max_frame = max_frame
        self._buf = bytearray()

    def feed(self, data: bytes) -> Iterator[bytes]:
        self._buf += data
        while len(self._buf) >= HEADER_SIZE:
            (length,) = HEADER.unpack_from(self._buf)
            if length > self.max_frame:
                raise WireError(ErrorCode.FRAME_TOO_LARGE, f"{length} bytes exceeds {self.max_frame}")
            end = HEADER_SIZE + length
            if len(self._buf) < end:
                break
            chunk = bytes(self._buf[:end])
            del self._buf[:end]
            yield chunk

    @property
    def pending(self) -> int:
        return len(self._buf)
