"""Kernel backend selection.

The compiled ``_kernels`` extension is used when it was built; otherwise the
numpy implementations in ``_kernels_py`` take over. ``OCFSL_PURE_PYTHON=1``
forces the fallback.
"""
import os

from . import _kernels_py

BACKEND = "python"
_impl = _kernels_py

if os.environ.get("OCFSL_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _kernels as _compiled
    except ImportError:
        pass
    else:
        _impl = _compiled
        BACKEND = "compiled"

_NAMES = (
    "slot_sqdist_fwd", "slot_sqdist_bwd",
    "slot_cosine_fwd", "slot_cosine_bwd",
    "proto_update_fwd", "proto_update_bwd",
    "lstm_gates_fwd", "lstm_gates_bwd",
)


def use(backend: str) -> None:
    """Switch backends at runtime (``"python"`` or ``"compiled"``)."""
    global _impl, BACKEND
    if backend == "python":
        _impl = _kernels_py
    elif backend == "compiled":
        from . import _kernels as _compiled
        _impl = _compiled
    else:
        raise ValueError(f"unknown kernel backend {backend!r}")
    BACKEND = backend
    g = globals()
    for name in _NAMES:
        g[name] = getattr(_impl, name)


def available() -> list:
    out = ["python"]
    try:
        from . import _kernels  # noqa: F401
    except ImportError:
        return out
    return out + ["compiled"]


slot_sqdist_fwd = _impl.slot_sqdist_fwd
slot_sqdist_bwd = _impl.slot_sqdist_bwd
slot_cosine_fwd = _impl.slot_cosine_fwd
slot_cosine_bwd = _impl.slot_cosine_bwd
proto_update_fwd = _impl.proto_update_fwd
proto_update_bwd = _impl.proto_update_bwd
lstm_gates_fwd = _impl.lstm_gates_fwd
lstm_gates_bwd = _impl.lstm_gates_bwd
