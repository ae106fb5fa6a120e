"""Hot access kernel with a compiled core and a pure-Python fallback.

The compiled ``_chase`` extension is used when it imports; otherwise (or when
``GPULEAK_PURE_PYTHON=1``) the reference implementation in ``_pychase`` is
used. Both produce bit-identical results.
"""
import os

from . import _pychase

if os.environ.get("GPULEAK_PURE_PYTHON"):
    _compiled = None
else:
    try:
        from . import _chase as _compiled
    except ImportError:
        _compiled = None

if _compiled is not None:
    chase = _compiled.chase
    BACKEND = "cython"
else:
    chase = _pychase.chase
    BACKEND = "python"

python_chase = _pychase.chase
compiled_chase = _compiled.chase if _compiled is not None else None

__all__ = ["chase", "BACKEND", "python_chase", "compiled_chase"]
