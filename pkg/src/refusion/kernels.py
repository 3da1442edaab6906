"""Voxel-kernel backend selection.

The compiled extension is preferred when it imported cleanly; the numpy
fallback is always available.  Both produce bit-identical volumes.  Set
``REFUSION_BACKEND`` to ``python`` or ``compiled`` to force one (``auto``
or unset keeps the default preference); forcing ``compiled`` raises if the
extension is missing rather than silently degrading.
"""

import os

from . import _kernels_py

try:
    from . import _kernels_cy
except ImportError:  # pragma: no cover - depends on build environment
    _kernels_cy = None

_choice = os.environ.get("REFUSION_BACKEND", "auto").strip().lower()
if _choice in ("", "auto"):
    _impl = _kernels_cy if _kernels_cy is not None else _kernels_py
elif _choice == "python":
    _impl = _kernels_py
elif _choice == "compiled":
    if _kernels_cy is None:
        raise ImportError(
            "REFUSION_BACKEND=compiled but the refusion._kernels_cy "
            "extension is not built"
        )
    _impl = _kernels_cy
else:
    raise ValueError(
        f"REFUSION_BACKEND must be 'auto', 'python' or 'compiled', "
        f"got {_choice!r}"
    )

BACKEND = _impl.BACKEND_NAME
fuse_block = _impl.fuse_block
nn_min_d2 = _impl.nn_min_d2

__all__ = ["BACKEND", "fuse_block", "nn_min_d2"]
