"""Select the per-pixel filter implementation at import time.

The compiled core (``_cfilter``) is preferred. Set ``NIGHTLIFT_BACKEND=python``
to force the numpy fallback.
"""
import os

from . import _pyfilter

_forced = os.environ.get("NIGHTLIFT_BACKEND", "").strip().lower()

_cfilter = None
if _forced != "python":
    try:
        from . import _cfilter
    except ImportError:
        if _forced == "cython":
            raise

BACKENDS = {"python": _pyfilter}
if _cfilter is not None:
    BACKENDS["cython"] = _cfilter

NAME = "cython" if _cfilter is not None else "python"
impl = BACKENDS[NAME]


def get(name=None):
    """Return the backend module ``name`` (default: the active one)."""
    if name is None:
        return impl
    try:
        return BACKENDS[name]
    except KeyError:
        raise ValueError(f"backend {name!r} unavailable; have {sorted(BACKENDS)}") from None
