"""Kernel backend selection.

The hot kernels (conv2d, ROI-Align, NMS) exist twice: a compiled Cython
core (``_core``) and a pure-NumPy fallback (``numpy_ref``). The compiled
core is preferred when importable; set ``TINYDET_KERNELS=numpy`` or
``TINYDET_KERNELS=cython`` to force one side (forcing an unbuilt core is
an import error). ``benchmarks/bench_kernels.py`` compares the two.
"""

import importlib
import os

_CHOICES = ("auto", "cython", "numpy")


def load_backend(name):
    """Import one kernel backend by name ('cython' or 'numpy')."""
    if name == "cython":
        return importlib.import_module("tinydet._kernels._core")
    if name == "numpy":
        return importlib.import_module("tinydet._kernels.numpy_ref")
    raise ValueError(f"unknown kernel backend {name!r}; expected one of {_CHOICES}")


_requested = os.environ.get("TINYDET_KERNELS", "auto").strip().lower()
if _requested not in _CHOICES:
    raise ImportError(
        f"TINYDET_KERNELS={_requested!r} not understood; expected one of {_CHOICES}"
    )

if _requested == "numpy":
    _impl = load_backend("numpy")
    BACKEND = "numpy"
elif _requested == "cython":
    _impl = load_backend("cython")
    BACKEND = "cython"
else:
    try:
        _impl = load_backend("cython")
        BACKEND = "cython"
    except ImportError:
        _impl = load_backend("numpy")
        BACKEND = "numpy"

conv2d_forward = _impl.conv2d_forward
conv2d_backward = _impl.conv2d_backward
roi_align_forward = _impl.roi_align_forward
roi_align_backward = _impl.roi_align_backward
nms_keep = _impl.nms_keep
