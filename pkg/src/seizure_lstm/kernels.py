"""Kernel backend selection.

The compiled Cython kernels are used when importable; otherwise the NumPy
implementation. Set ``SEIZURE_LSTM_BACKEND=python`` to force the fallback,
or ``=cython`` to make a missing extension an import error.
"""

import importlib
import os

from . import _kernels_py
from .errors import ConfigError

KNOWN = ("python", "cython")

_AVAILABLE = {"python": _kernels_py}
try:
    _AVAILABLE["cython"] = importlib.import_module("seizure_lstm._kernels_c")
except ImportError:
    pass


def available_backends():
    return sorted(_AVAILABLE)


def get_backend(name=None):
    """Return the kernel module named ``name`` (default: best available)."""
    if name is None:
        name = "cython" if "cython" in _AVAILABLE else "python"
    if name not in KNOWN:
        raise ConfigError(f"unknown kernel backend {name!r}; expected one of {KNOWN}")
    try:
        return _AVAILABLE[name]
    except KeyError:
        raise ImportError(f"kernel backend {name!r} is not available") from None


_requested = os.environ.get("SEIZURE_LSTM_BACKEND", "auto").lower()
if _requested in ("", "auto"):
    BACKEND = "cython" if "cython" in _AVAILABLE else "python"
else:
    get_backend(_requested)
    BACKEND = _requested

active = _AVAILABLE[BACKEND]
