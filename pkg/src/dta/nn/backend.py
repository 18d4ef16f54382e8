"""Kernel backend selection.

The compiled extension is preferred when it built successfully; the
pure-numpy fallback is always available. ``DTA_NN_BACKEND=python`` or
``=compiled`` forces a choice (the latter raises if the extension is
missing).
"""

import os

from . import _lstm_py
from ..errors import ConfigError

try:
    from . import _lstm_cy
except ImportError:
    _lstm_cy = None

_choice = os.environ.get("DTA_NN_BACKEND", "auto").lower()
if _choice == "python":
    kernels = _lstm_py
elif _choice == "compiled":
    if _lstm_cy is None:
        raise ConfigError("DTA_NN_BACKEND=compiled but the extension is not built")
    kernels = _lstm_cy
elif _choice == "auto":
    kernels = _lstm_cy if _lstm_cy is not None else _lstm_py
else:
    raise ConfigError(f"unknown DTA_NN_BACKEND value: {_choice!r}")

BACKEND_NAME = "compiled" if kernels is _lstm_cy else "python"


def get_kernels(name="active"):
    """Return a kernel module by name ('active', 'python', 'compiled')."""
    if name == "active":
        return kernels
    if name == "python":
        return _lstm_py
    if name == "compiled":
        if _lstm_cy is None:
            raise ConfigError("compiled backend is not built")
        return _lstm_cy
    raise ConfigError(f"unknown backend name: {name!r}")
