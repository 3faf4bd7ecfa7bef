"""Pick the compiled core when available, otherwise the NumPy fallback.

Set ``MLKRIG_PURE=1`` to force the fallback (used by the benchmark and the
backend-equivalence tests).
"""

from __future__ import annotations

import os

from . import _fallback

fallback = _fallback

if os.environ.get("MLKRIG_PURE", "") not in ("", "0"):
    core = _fallback
    NAME = "python"
else:
    try:
        from . import _core as core  # type: ignore[attr-defined]

        NAME = "cython"
    except ImportError:  # extension not built
        core = _fallback
        NAME = "python"

compiled = core is not _fallback
