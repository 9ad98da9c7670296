"""Hot-loop kernels: compiled extension when available, numpy otherwise.

Set ``CHIPMUNK_SIM_PURE=1`` to force the fallback.
"""

import os

from . import _pykernels as pure

compiled = None
if os.environ.get("CHIPMUNK_SIM_PURE", "") not in ("1", "true", "yes"):
    try:
        from . import _ckernels as compiled
    except ImportError:  # extension not built
        compiled = None

_impl = compiled if compiled is not None else pure
BACKEND = "cython" if compiled is not None else "numpy"

block_mac = _impl.block_mac
sat_add = _impl.sat_add

__all__ = ["BACKEND", "block_mac", "sat_add", "compiled", "pure"]
