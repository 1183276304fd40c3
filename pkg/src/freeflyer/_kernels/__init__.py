"""Kernel backend selection.

Two interchangeable implementations of the hot dynamics kernels exist: the
compiled Cython module ``_core`` and the pure-numpy module ``reference``.
The compiled one is used when importable; set ``FREEFLYER_BACKEND=pure`` or
``FREEFLYER_BACKEND=compiled`` to force a choice. ``K`` is the selected
module; the public packages import kernels through it.
"""

import os

from . import reference
from ..errors import ConfigurationError

_choice = os.environ.get("FREEFLYER_BACKEND", "").strip().lower()

if _choice == "pure":
    K = reference
elif _choice == "compiled":
    from . import _core as K  # ImportError here means the extension is absent
elif _choice in ("", "auto"):
    try:
        from . import _core as K
    except ImportError:
        K = reference
else:
    raise ConfigurationError(
        f"FREEFLYER_BACKEND={_choice!r}: expected 'pure', 'compiled' or 'auto'")


def backend_name():
    """Name of the kernel backend selected at import time."""
    return K.BACKEND_NAME
