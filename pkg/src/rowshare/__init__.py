"""Field-level sharing of table rows between mutually distrusting users.

Rows are encrypted on the owner's machine, relayed through an untrusted
synchronizer, and decrypted by the receiver only while the owner keeps the
row key deposited.
"""

from .agent import Agent, Identity, IntegrityError, RevokedError, UnavailableError
from .errors import ErrorCode, ServiceError, TransportError
from .service import Synchronizer
from .store import LoadReport, Row, Store, load_script, save_script
from .transport import LocalConnection, SyncClient, TcpConnection

__version__ = "0.1.0"

__all__ = [
    "Agent",
    "ErrorCode",
    "Identity",
    "IntegrityError",
    "LoadReport",
    "LocalConnection",
    "RevokedError",
    "Row",
    "ServiceError",
    "Store",
    "SyncClient",
    "Synchronizer",
    "TcpConnection",
    "TransportError",
    "UnavailableError",
    "load_script",
    "save_script",
]
