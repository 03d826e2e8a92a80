"""Selects the compiled query kernels, or the pure-Python ones when unavailable.

Set ``DNDREC_PURE=1`` to force the fallback (used by the tests and the benchmark
to exercise both paths).
"""

from __future__ import annotations

import os

from . import _fallback

try:
    if os.environ.get("DNDREC_PURE") == "1":
        raise ImportError("pure-Python kernels requested")
    from . import _kernels as _impl

    BACKEND = "compiled"
except ImportError:
    _impl = _fallback
    BACKEND = "python"

topl_select = _impl.topl_select
LayeredGraph = _impl.LayeredGraph

fallback = _fallback
