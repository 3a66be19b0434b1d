"""Kernel backend selection.

The compiled Cython core is preferred when it was built; otherwise the numpy
fallback is used. ``METAINR_KERNELS`` overrides the choice:

* ``auto`` (default) - compiled if available, numpy otherwise,
* ``compiled``       - require the extension, raise if missing,
* ``python``         - force the numpy fallback.

``BACKEND`` names the active implementation.
"""

import os

_FUNCTIONS = (
    "matmul",
    "add",
    "sub",
    "mul",
    "add_row",
    "mul_row",
    "scale",
    "sin",
    "cos",
    "relu",
    "square",
    "sin_bw",
    "cos_bw",
    "relu_bw",
    "square_bw",
    "sum_all",
    "sum_axis0",
    "sum_axis1",
    "index_mean",
    "index_mean_bw",
)


def _select():
    requested = os.environ.get("METAINR_KERNELS", "auto").lower()
    if requested not in ("auto", "compiled", "python"):
        raise ValueError(
            f"METAINR_KERNELS must be auto, compiled, or python (got {requested!r})"
        )
    if requested in ("auto", "compiled"):
        try:
            from . import _fast

            return _fast, "compiled"
        except ImportError:
            if requested == "compiled":
                raise ImportError(
                    "METAINR_KERNELS=compiled but the extension is not built; "
                    "reinstall with a working C toolchain or unset the variable"
                ) from None
    from . import numpy_backend

    return numpy_backend, "python"


_impl, BACKEND = _select()

for _name in _FUNCTIONS:
    globals()[_name] = getattr(_impl, _name)

__all__ = list(_FUNCTIONS) + ["BACKEND"]
