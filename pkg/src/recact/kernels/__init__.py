"""Scan-kernel backend selection.

The compiled extension is used when it imported cleanly; set
RECACT_KERNELS=python (or =cython) to force a backend. The chunkwise kernel
is batched numpy either way -- its work is matmul-shaped and already fast.
"""

from __future__ import annotations

import os

from . import py as _py

mlstm_chunk = _py.mlstm_chunk
DENOM_EPS = _py.DENOM_EPS

_requested = os.environ.get("RECACT_KERNELS", "auto").lower()

_compiled = None
if _requested in ("auto", "cython"):
    try:
        from . import _scan as _compiled
    except ImportError:
        _compiled = None
        if _requested == "cython":
            raise

if _compiled is not None:
    BACKEND = "cython"
    mlstm_scan = _compiled.mlstm_scan
    slstm_scan = _compiled.slstm_scan
else:
    BACKEND = "python"
    mlstm_scan = _py.mlstm_scan
    slstm_scan = _py.slstm_scan


def get_scan_fns(backend: str | None = None):
    """Return (mlstm_scan, slstm_scan) for an explicit backend choice."""
    if backend in (None, "auto"):
        return mlstm_scan, slstm_scan
    if backend == "python":
        return _py.mlstm_scan, _py.slstm_scan
    if backend == "cython":
        if _compiled is None:
            raise RuntimeError("compiled kernels are not available in this install")
        return _compiled.mlstm_scan, _compiled.slstm_scan
    raise ValueError(f"unknown kernel backend: {backend!r}")


def available_backends() -> list[str]:
    return ["python", "cython"] if _compiled is not None else ["python"]
