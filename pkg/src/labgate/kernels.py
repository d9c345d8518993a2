"""Hot byte kernels with a compiled core and a pure-Python fallback.

The compiled module is picked at import time. Set ``LABGATE_PURE=1`` to force
the fallback (useful for benchmarking and for checking both paths agree).
"""
import os

from . import _purekernels as pure

compiled = None
if os.environ.get("LABGATE_PURE", "") not in ("1", "true", "yes"):
    try:
        from . import _speedups as compiled  # type: ignore[no-redef]
    except ImportError:  # extension not built
        compiled = None

_impl = compiled if compiled is not None else pure
IMPLEMENTATION = "compiled" if compiled is not None else "pure"

sum_mod256 = _impl.sum_mod256
xor_all = _impl.xor_all
find_any = _impl.find_any

__all__ = ["IMPLEMENTATION", "sum_mod256", "xor_all", "find_any", "pure", "compiled"]
