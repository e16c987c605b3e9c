"""Journal line codec, backed by the compiled ``_codec`` extension when it imports.

Set ``ROWSHARE_PURE_PYTHON=1`` to force the pure-Python implementation.
``IMPLEMENTATION`` names the backend that was selected.
"""

import os

if os.environ.get("ROWSHARE_PURE_PYTHON"):
    from . import _codec_py as _impl
else:
    try:
        from . import _codec as _impl
    except ImportError:
        from . import _codec_py as _impl

IMPLEMENTATION = "compiled" if _impl.__name__.endswith("._codec") else "python"

check_identifier = _impl.check_identifier
format_value = _impl.format_value
format_insert = _impl.format_insert
parse_insert = _impl.parse_insert
format_shared = _impl.format_shared
parse_shared = _impl.parse_shared

__all__ = [
    "IMPLEMENTATION",
    "check_identifier",
    "format_value",
    "format_insert",
    "parse_insert",
    "format_shared",
    "parse_shared",
]
