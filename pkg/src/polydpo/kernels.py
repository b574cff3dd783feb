"""Backend selection for the MLP kernel.

The compiled extension is used when importable. Set ``POLYDPO_BACKEND=python``
to force the numpy fallback (``=cython`` makes a missing build an error).
"""

import os

from ._ext import _mlp_py

_requested = os.environ.get("POLYDPO_BACKEND", "auto").lower()

if _requested == "python":
    _impl = _mlp_py
else:
    try:
        from ._ext import _mlp_cy as _impl
    except ImportError:
        if _requested == "cython":
            raise
        _impl = _mlp_py

BACKEND = "cython" if _impl is not _mlp_py else "python"

mlp_forward = _impl.mlp_forward
mlp_predict = _impl.mlp_predict
mlp_backward = _impl.mlp_backward


def get_backend(name: str):
    """Return the kernel module for ``name`` ("python" or "cython")."""
    if name == "python":
        return _mlp_py
    if name == "cython":
        from ._ext import _mlp_cy

        return _mlp_cy
    raise ValueError(f"unknown backend {name!r}")
