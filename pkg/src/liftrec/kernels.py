"""Pick the compiled retrieval kernel when available, else the numpy one.

Set ``LIFTREC_PURE_PYTHON=1`` to force the fallback.
"""

import os

from . import _kernels_py

try:
    if os.environ.get("LIFTREC_PURE_PYTHON", "") not in ("", "0"):
        raise ImportError("pure-python kernels requested")
    from . import _kernels as _compiled
except ImportError:
    _compiled = None

BACKENDS = {"python": _kernels_py.topk_batch}
if _compiled is not None:
    BACKENDS["cython"] = _compiled.topk_batch

BACKEND = "cython" if _compiled is not None else "python"
topk_batch = BACKENDS[BACKEND]


def get_topk(backend: str | None = None):
    if backend is None:
        return topk_batch
    try:
        return BACKENDS[backend]
    except KeyError:
        raise ValueError(f"backend {backend!r} unavailable; have {sorted(BACKENDS)}") from None
