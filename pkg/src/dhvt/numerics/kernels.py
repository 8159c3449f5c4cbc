"""Kernel backend selection.

The compiled extension is used when it imports; set ``DHVT_KERNELS=python`` to
force the numpy fallback (``DHVT_KERNELS=compiled`` makes a missing extension an
import error instead of a silent fallback).
"""

import logging
import os

from . import _kernels_py

logger = logging.getLogger(__name__)

_choice = os.environ.get("DHVT_KERNELS", "auto").lower()

compiled = None
if _choice != "python":
    try:
        from . import _kernels as compiled  # type: ignore[attr-defined]
    except ImportError:
        if _choice == "compiled":
            raise
        logger.debug("compiled kernels unavailable; using numpy fallback")

_backend = compiled if compiled is not None else _kernels_py
BACKEND = "compiled" if compiled is not None else "python"


def use(name: str) -> None:
    """Switch backend at runtime ('compiled' or 'python')."""
    global _backend, BACKEND
    if name == "compiled":
        if compiled is None:
            raise RuntimeError("compiled kernels are not built; run `pip install -e . --no-build-isolation`")
        _backend = compiled
    elif name == "python":
        _backend = _kernels_py
    else:
        raise ValueError(f"unknown kernel backend {name!r}")
    BACKEND = name


def im2col(xp, kh, kw, stride, ho, wo):
    return _backend.im2col(xp, kh, kw, stride, ho, wo)


def col2im(cols, c, hp, wp, kh, kw, stride, ho, wo):
    return _backend.col2im(cols, c, hp, wp, kh, kw, stride, ho, wo)


def dwconv_forward(xp, w, stride, ho, wo):
    return _backend.dwconv_forward(xp, w, stride, ho, wo)


def dwconv_backward(g, xp, w, stride):
    return _backend.dwconv_backward(g, xp, w, stride)
