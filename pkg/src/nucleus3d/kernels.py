"""Kernel dispatch: compiled core when available, pure fallback otherwise.

Set ``NUCLEUS3D_PURE=1`` before import to force the fallback.
"""
import os

import numpy as np

from . import _pure

if os.environ.get("NUCLEUS3D_PURE"):
    _impl = _pure
    BACKEND = "python"
else:
    try:
        from . import _core as _impl
        BACKEND = "cython"
    except ImportError:  # extension not built
        _impl = _pure
        BACKEND = "python"


def _flat_u8(mask):
    return np.ascontiguousarray(np.asarray(mask, dtype=bool).ravel(order="F"), dtype=np.uint8)


def label(mask, connectivity=26, impl=None):
    """Connected-component labels of a boolean ``[x, y, z]`` array.

    Labels run 1..K in order of each component's first voxel in x-fastest
    linear order. Returns ``(labels uint32 array, K)``.
    """
    impl = impl or _impl
    X, Y, Z = mask.shape
    flat, n = impl.label_components(_flat_u8(mask), X, Y, Z, connectivity)
    return np.asarray(flat).reshape((X, Y, Z), order="F"), n


def squared_edt(mask, impl=None):
    impl = impl or _impl
    X, Y, Z = mask.shape
    flat = impl.squared_edt(_flat_u8(mask), X, Y, Z)
    return np.asarray(flat).reshape((X, Y, Z), order="F")


def flood(height, seeds, mask, connectivity=26, impl=None):
    """Priority-flood ``seeds`` over ``mask``, highest ``height`` first.

    Ties pop in ascending linear index; each voxel takes the label of the
    first labeled neighbor that reaches it.
    """
    impl = impl or _impl
    X, Y, Z = mask.shape
    h = np.ascontiguousarray(np.asarray(height, dtype=np.float64).ravel(order="F"))
    lab = np.ascontiguousarray(np.asarray(seeds, dtype=np.uint32).ravel(order="F"))
    out = impl.flood(h, lab, _flat_u8(mask), X, Y, Z, connectivity)
    return np.asarray(out).reshape((X, Y, Z), order="F")
