"""TCP listener exposing a :class:`~rowshare.service.Synchronizer`."""

from __future__ import annotations

import logging
import socket
import socketserver
import threading
from typing import Optional

from .errors import ServiceError
from .service import Synchronizer
from .wire import FrameDecoder, Response, WireError, encode_response

logger = logging.getLogger(__name__)


class _ConnectionHandler(socketserver.BaseRequestHandler):
    def handle(self) -> None:
        service: Synchronizer = self.server.service
        sock: socket.socket = self.request
        sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        decoder = FrameDecoder()
        while True:
            try:
                data = sock.recv(262144)
            except OSError:
                return
            if not data:
                return
            out = []
            try:
                for frame in decoder.feed(data):
                    out.append(service.handle_frame(frame))
            except WireError as exc:
                # oversized frame: the stream cannot be resynchronised
                out.append(encode_response(Response(0, error=ServiceError(exc.code, exc.message))))
                self._send(sock, out)
                return
            if out:
                if not self._send(sock, out):
                    return

    @staticmethod
    def _send(sock: socket.socket, frames: list) -> bool:
        try:
            sock.sendall(b"".join(frames))
        except OSError:
            return False
        return True


class SynchronizerServer(socketserver.ThreadingTCPServer):
    daemon_threads = True
    allow_reuse_address = True

    def __init__(self, address: tuple[str, int], service: Synchronizer):
        self.service = service
        super().__init__(address, _ConnectionHandler)

    @property
    def address(self) -> tuple[str, int]:
        host, port = self.server_address[:2]
        return host, port

    def start_background(self) -> threading.Thread:
        thread = threading.Thread(target=self.serve_forever, name="synchronizer", daemon=True)
        thread.start()
        return thread

    def stop(self) -> None:
        self.shutdown()
        self.server_close()
        self.service.close()


def parse_address(text: str, default_port: int = 7431) -> tuple[str, int]:
    host, sep, port = text.rpartition(":")
    if not sep:
        return text or "127.0.0.1", default_port
    return host or "127.0.0.1", int(port)


def serve(listen: str, log_path: Optional[str], **service_kwargs) -> SynchronizerServer:
    """Bind a server (raises OSError if the address is taken); caller runs ``serve_forever``."""
    service = Synchronizer(log_path, **service_kwargs)
    try:
        return SynchronizerServer(parse_address(listen), service)
    except OSError:
        service.close()
        raise

