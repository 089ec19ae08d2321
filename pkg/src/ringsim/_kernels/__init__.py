"""Hot-kernel selection.

The simulator spends most of its time in keyed hashing, pad generation, and
fixed-layout bit packing. Those five functions are implemented twice: a C
extension (``_core``, built with Cython) and a pure-Python fallback
(``_pure``). The compiled lane is used when present; set
``RINGSIM_PURE_KERNELS=1`` to force the fallback. Both lanes are bit-exact
equivalents.
"""

import os

if os.environ.get("RINGSIM_PURE_KERNELS"):
    from . import _pure as _impl
else:
    try:
        from . import _core as _impl  # type: ignore[no-redef]
    except ImportError:
        from . import _pure as _impl  # type: ignore[no-redef]

BACKEND: str = _impl.BACKEND
prf_tag = _impl.prf_tag
prf_block = _impl.prf_block
xor_pad = _impl.xor_pad
seal_slot = _impl.seal_slot
check_slot = _impl.check_slot
pack_fields = _impl.pack_fields
unpack_fields = _impl.unpack_fields

__all__ = [
    "BACKEND",
    "prf_tag",
    "prf_block",
    "xor_pad",
    "seal_slot",
    "check_slot",
    "pack_fields",
    "unpack_fields",
]
