"""Numeric kernel backend selection.

The compiled extension (`gridsynth.kernels._fast`) is preferred when it
imported cleanly; otherwise the pure numpy implementation is used.  Set
GRIDSYNTH_KERNELS=pure or GRIDSYNTH_KERNELS=fast to force a backend (forcing
"fast" raises if the extension is missing, instead of silently degrading).
"""

import os

from . import _pure

_choice = os.environ.get("GRIDSYNTH_KERNELS", "auto").lower()

if _choice == "pure":
    _impl = _pure
elif _choice == "fast":
    from . import _fast as _impl
elif _choice == "auto":
    try:
        from . import _fast as _impl
    except ImportError:
        _impl = _pure
    else:
        if not hasattr(_impl, "calc_injections"):  # stale or partial build
            _impl = _pure
else:
    raise ValueError(f"GRIDSYNTH_KERNELS must be 'auto', 'pure', or 'fast', got {_choice!r}")

BACKEND = _impl.BACKEND_NAME
calc_injections = _impl.calc_injections
balance_vjp = _impl.balance_vjp
jacobian_blocks = _impl.jacobian_blocks
branch_flow = _impl.branch_flow
branch_flow_vjp = _impl.branch_flow_vjp

__all__ = [
    "BACKEND",
    "calc_injections",
    "balance_vjp",
    "jacobian_blocks",
    "branch_flow",
    "branch_flow_vjp",
]
