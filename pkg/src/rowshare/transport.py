"""Client side of the synchronizer protocol.

:class:`SyncClient` turns service operations into wire calls over a
:class:`Connection`. Requests can be pipelined: a batch is written in one go
and the responses are read back in order.

Transport problems raise :class:`~rowshare.errors.TransportError`; answers
from the service that carry an error code raise
:class:`~rowshare.errors.ServiceError`. A missing key is the one error turned
into a value (``None``) because it is the revocation signal.
"""

from __future__ import annotations

import socket
from typing import Callable, Iterable, Iterator, Optional, Sequence, Union

from .errors import ErrorCode, ServiceError, TransportError
from .records import PendingRow, WrappedKeyRecord
from .wire import FrameDecoder, Request, Response, WireError, decode_response, encode_request

Tap = Callable[[str, bytes], None]


class Connection:
    """Carries request frames to a synchronizer and returns response frames in order."""

    window = 128

    def __init__(self, tap: Optional[Tap] = None):
        self.tap = tap
        self._next_id = 1

    def exchange(self, frames: Sequence[bytes]) -> list[bytes]:
        raise NotImplementedError

    def close(self) -> None:
        pass

    def call_many(
        self, calls: Sequence[tuple[str, dict]], token: Optional[str] = None
    ) -> list[Response]:
        responses: list[Response] = []
        for start in range(0, len(calls), self.window):
            chunk = calls[start:start + self.window]
            requests = []
            for method, payload in chunk:
                requests.append(Request(self._next_id, method, payload, token))
                self._next_id += 1
            frames = [encode_request(r) for r in requests]
            if self.tap:
                for f in frames:
                    self.tap("request", f)
            replies = self.exchange(frames)
            if len(replies) != len(frames):
                raise TransportError("connection returned fewer responses than requests")
            for req, raw in zip(requests, replies):
                if self.tap:
                    self.tap("response", raw)
                try:
                    resp = decode_response(raw, req.method)
                except WireError as exc:
                    raise TransportError(f"undecodable response: {exc}") from None
                if resp.request_id != req.request_id:
                    raise TransportError(
                        f"response id {resp.request_id} does not match request {req.request_id}"
                    )
                responses.append(resp)
        return responses


class LocalConnection(Connection):
    """Feeds frames straight into an in-process service. ``online=False`` simulates an outage."""

    def __init__(self, service, tap: Optional[Tap] = None):
        super().__init__(tap)
        self.service = service
        self.online = True

    def exchange(self, frames: Sequence[bytes]) -> list[bytes]:
        if not self.online:
            raise TransportError("synchronizer unreachable (offline)")
        return [self.service.handle_frame(f) for f in frames]


class TcpConnection(Connection):
    def __init__(self, host: str, port: int, timeout: float = 60.0, tap: Optional[Tap] = None):
        super().__init__(tap)
        self.host = host
        self.port = port
        self.timeout = timeout
        self._sock: Optional[socket.socket] = None
        self._decoder = FrameDecoder()

    def _connect(self) -> socket.socket:
        if self._sock is None:
            try:
                sock = socket.create_connection((self.host, self.port), timeout=self.timeout)
            except OSError as exc:
                raise TransportError(f"cannot reach synchronizer at {self.host}:{self.port}: {exc}") from None
            sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            self._sock = sock
            self._decoder = FrameDecoder()
        return self._sock

    def exchange(self, frames: Sequence[bytes]) -> list[bytes]:
        sock = self._connect()
        replies: list[bytes] = []
        try:
            sock.sendall(b"".join(frames))
            while len(replies) < len(frames):
                data = sock.recv(262144)
                if not data:
                    raise OSError("connection closed by synchronizer")
                replies.extend(self._decoder.feed(data))
        except (OSError, WireError) as exc:
            self.close()
            raise TransportError(f"synchronizer connection failed: {exc}") from None
        return replies

    def close(self) -> None:
        if self._sock is not None:
            try:
                self._sock.close()
            finally:
                self._sock = None


def _result(resp: Response):
    if resp.error is not None:
        raise resp.error
    return resp.result


class SyncClient:
    def __init__(self, connection: Connection):
        self.connection = connection
        self.token: Optional[str] = None
        self.user_id: Optional[str] = None

    def _call(self, method: str, payload: dict):
        return _result(self.connection.call_many([(method, payload)], self.token)[0])

    def _call_many(self, method: str, payloads: Iterable[dict]) -> list[Response]:
        return self.connection.call_many([(method, p) for p in payloads], self.token)

    # -- registration ------------------------------------------------------

    def register(self, user_id: str, password: str, enc_public: bytes, sig_public: bytes) -> None:
        self._call(
            "reg.registerUser",
            {"user_id": user_id, "password": password, "enc_public": enc_public, "sig_public": sig_public},
        )

    def login(self, user_id: str, password: str) -> str:
        self.token = self._call("reg.selectUserByIdAndPassword", {"user_id": user_id, "password": password})["token"]
        self.user_id = user_id
        return self.token

    def get_public_keys(self, user_id: str) -> tuple[bytes, bytes]:
        res = self._call("key.getPublicKeyByUser", {"user_id": user_id})
        return res["enc_public"], res["sig_public"]

    def get_all_users(self) -> list[str]:
        return self._call("syn.getAllUsers", {})["users"]

    # -- keys --------------------------------------------------------------

    def deposit_key(self, record: WrappedKeyRecord) -> None:
        self._call("key.depositKey", record.to_payload())

    def deposit_keys(self, records: Sequence[WrappedKeyRecord]) -> list[Optional[ServiceError]]:
        return [r.error for r in self._call_many("key.depositKey", [rec.to_payload() for rec in records])]

    def get_decrypting_key(self, id_row: int) -> Optional[WrappedKeyRecord]:
        return self.get_decrypting_keys([id_row])[id_row]

    def get_decrypting_keys(self, ids: Sequence[int]) -> dict[int, Optional[WrappedKeyRecord]]:
        out: dict[int, Optional[WrappedKeyRecord]] = {}
        responses = self._call_many("key.getDecryptingKeyByIdPendingRow", [{"id_row": i} for i in ids])
        for id_row, resp in zip(ids, responses):
            if resp.error is not None:
                if resp.error.code is ErrorCode.AFFIRMATIVELY_ABSENT:
                    out[id_row] = None
                    continue
                raise resp.error
            out[id_row] = WrappedKeyRecord.from_payload(resp.result)
        return out

    def delete_decrypting_key(self, id_row: int, receiver: str) -> None:
        self._call("key.deleteDecryptingKey", {"id_row": id_row, "receiver": receiver})

    # -- rows --------------------------------------------------------------

    def send_row(self, sender: str, receiver: str, encrypted_row: bytes, origin_sig: bytes) -> int:
        payload = {"sender": sender, "receiver": receiver, "encrypted_row": encrypted_row, "origin_sig": origin_sig}
        return self._call("syn.sendRow", payload)["id_pending_row"]

    def send_rows(
        self, rows: Sequence[tuple[str, str, bytes, bytes]]
    ) -> list[Union[int, ServiceError]]:
        payloads = [
            {"sender": s, "receiver": r, "encrypted_row": ct, "origin_sig": sig} for s, r, ct, sig in rows
        ]
        out: list[Union[int, ServiceError]] = []
        for resp in self._call_many("syn.sendRow", payloads):
            out.append(resp.error if resp.error is not None else resp.result["id_pending_row"])
        return out

    def get_pending_rows(self, after: Optional[int] = None, limit: Optional[int] = None) -> list[PendingRow]:
        res = self._call("syn.getPendingRowForUser", {"after": after, "limit": limit})
        return [PendingRow.from_payload(r) for r in res["rows"]]

    def iter_pending_rows(self) -> Iterator[PendingRow]:
        after = None
        while True:
            page = self.get_pending_rows(after)
            if not page:
                return
            yield from page
            after = page[-1].id_pending_row

    def delete_pending_row(self, id_pending_row: int) -> None:
        self._call("syn.deletePendingRow", {"id_pending_row": id_pending_row})

    def delete_pending_rows(self, ids: Sequence[int]) -> list[Optional[ServiceError]]:
        return [r.error for r in self._call_many("syn.deletePendingRow", [{"id_pending_row": i} for i in ids])]

    def resend_row(self, id_pending_row: int) -> int:
        return self._call("syn.resendRow", {"id_pending_row": id_pending_row})["id_pending_row"]

    def close(self) -> None:
        self.connection.close()
