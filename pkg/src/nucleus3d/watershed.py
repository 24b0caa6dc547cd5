"""Marker-based watershed baseline.

Threshold the intensity volume, take the exact Euclidean distance to the
background, seed one marker per distance maximum and flood the foreground
from the markers, highest distance first.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from . import kernels
from .errors import ConfigError

_OFFSETS = [(dx, dy, dz) for dz in (-1, 0, 1) for dy in (-1, 0, 1) for dx in (-1, 0, 1)
            if (dx, dy, dz) != (0, 0, 0)]


@dataclass(frozen=True)
class WatershedConfig:
    threshold: int = 64
    min_separation: float = 2.0
    connectivity: int = 26

    def __post_init__(self):
        if not 0 <= self.threshold <= 255:
            raise ConfigError(f"threshold {self.threshold} outside [0, 255]")
        if self.connectivity not in (6, 26):
            raise ConfigError("connectivity must be 6 or 26")
        if self.min_separation < 0:
            raise ConfigError("min_separation must be >= 0")


def distance_transform(mask):
    """Euclidean distance from each foreground voxel to the nearest background voxel.

    Background is 0. A volume with no background at all is +inf everywhere.
    """
    return np.sqrt(kernels.squared_edt(np.asarray(mask) != 0))


def _shifted(arr, off, fill):
    """``out[v] = arr[v + off]`` with ``fill`` outside the volume."""
    out = np.full_like(arr, fill)
    src, dst = [], []
    for o, n in zip(off, arr.shape):
        src.append(slice(max(o, 0), n + min(o, 0)))
        dst.append(slice(max(-o, 0), n - max(o, 0)))
    out[tuple(dst)] = arr[tuple(src)]
    return out


def regional_maxima(dist, mask):
    """Label connected plateaus of ``dist`` that no 26-neighbour exceeds.

    Returns ``(labels, n)``; plateau labels follow first-voxel linear order.
    """
    mask = np.asarray(mask, dtype=bool)
    d = np.where(mask, dist, -np.inf)
    peak = ndimage.maximum_filter(d, size=3, mode="constant", cval=-np.inf)
    cand = mask & (d >= peak)
    # a plateau leaking into an equal-valued non-candidate has a higher voxel nearby
    leak = np.zeros_like(cand)
    other = mask & ~cand
    for off in _OFFSETS:
        leak |= cand & _shifted(other, off, False) & (_shifted(d, off, -np.inf) == d)
    lab, n = kernels.label(cand, 26)
    bad = np.unique(lab[leak])
    if bad.size:
        drop = np.zeros(n + 1, dtype=bool)
        drop[bad] = True
        drop[0] = False
        lab = np.where(drop[lab], 0, lab)
        keep = np.unique(lab[lab != 0])
        lut = np.zeros(n + 1, dtype=np.uint32)
        lut[keep] = np.arange(1, keep.size + 1, dtype=np.uint32)
        lab, n = lut[lab], int(keep.size)
    return lab, n


def find_markers(dist, mask, min_separation=2.0):
    """Seed volume: one label per kept maximum plateau.

    Plateaus are visited by descending height (ties by label); a plateau is
    dropped when its centroid lies closer than ``min_separation`` to an
    already kept one in the same foreground component.
    """
    plat, n = regional_maxima(dist, mask)
    if n == 0:
        return np.zeros(plat.shape, dtype=np.uint32), 0
    idx = np.arange(1, n + 1)
    centroids = np.stack(ndimage.center_of_mass(np.ones(plat.shape), plat, idx)).reshape(n, 3)
    height = ndimage.maximum(dist, plat, idx)
    comp, _ = kernels.label(np.asarray(mask) != 0, 26)
    first = ndimage.minimum(np.arange(plat.size).reshape(plat.shape, order="F"), plat, idx)
    owner = comp.ravel(order="F")[np.asarray(first, dtype=np.int64)]
    order = np.lexsort((idx, -height, owner))  # grouped by component, then by height
    kept = []
    starts = np.flatnonzero(np.r_[True, owner[order][1:] != owner[order][:-1]])
    for group in np.split(order, starts[1:]):
        chosen = [group[0]]
        for j in group[1:]:
            if np.min(np.linalg.norm(centroids[chosen] - centroids[j], axis=1)) >= min_separation:
                chosen.append(j)
        kept.extend(chosen)
    lut = np.zeros(n + 1, dtype=np.uint32)
    for new, j in enumerate(sorted(kept), start=1):
        lut[j + 1] = new
    return lut[plat], len(kept)


def watershed_segment(vol, cfg: WatershedConfig | None = None):
    """Label volume (uint32, dense from 1) of the thresholded intensity volume."""
    cfg = cfg or WatershedConfig()
    fg = np.asarray(vol) >= cfg.threshold
    dist = distance_transform(fg)
    seeds, n = find_markers(dist, fg, cfg.min_separation)
    if n == 0:
        return np.zeros(fg.shape, dtype=np.uint32)
    height = np.where(np.isinf(dist), np.finfo(np.float64).max, dist)
    return kernels.flood(height, seeds, fg, cfg.connectivity)
