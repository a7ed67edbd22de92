"""Geometry and voxel kernels.

Two interchangeable backends: numba-compiled loops (default) and a pure
numpy/scipy path. Set ``BAGGAGEDET_NUMBA=0`` before import to force numpy;
the numpy path is also used when numba is not installed.
"""
import os

from . import _numpy

BACKEND = "numpy"
if os.environ.get("BAGGAGEDET_NUMBA", "1").strip().lower() not in ("0", "false", "off", "no"):
    try:
        from . import _numba as _impl

        BACKEND = "numba"
    except ImportError:  # pragma: no cover
        _impl = _numpy
else:
    _impl = _numpy

iou_matrix = _impl.iou_matrix
nms_greedy = _impl.nms_greedy
block_mean = _impl.block_mean
label_components = _impl.label_components

__all__ = ["BACKEND", "iou_matrix", "nms_greedy", "block_mean", "label_components"]
