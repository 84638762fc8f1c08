"""Kernel backend selection.

The compiled extension is used when it imported cleanly; otherwise the numpy
fallback is used. Both produce bitwise-identical results, so switching only
changes speed.
"""

import logging
from contextlib import contextmanager

from . import _kernels_py

log = logging.getLogger(__name__)

try:
    from . import _kernels as _compiled
except ImportError:  # extension not built
    _compiled = None

_BACKENDS = {"python": _kernels_py}
if _compiled is not None:
    _BACKENDS["compiled"] = _compiled

_active = _compiled if _compiled is not None else _kernels_py


def available() -> list[str]:
    return sorted(_BACKENDS)


def backend():
    return _active


def use(name: str) -> None:
    """Select a backend by name ("compiled" or "python")."""
    global _active
    try:
        _active = _BACKENDS[name]
    except KeyError:
        raise ValueError(f"backend {name!r} unavailable; have {available()}") from None
    log.debug("kernel backend: %s", name)


@contextmanager
def using(name: str):
    previous = _active.NAME
    use(name)
    try:
        yield
    finally:
        use(previous)
