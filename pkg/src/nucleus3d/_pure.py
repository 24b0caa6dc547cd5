"""Pure numpy/Python versions of the compiled kernels.

Same signatures and bit-identical outputs as ``_core``; used when the
extension is not built or ``NUCLEUS3D_PURE=1`` is set.
"""
import heapq

import numpy as np
from scipy import sparse
from scipy.sparse import csgraph


def _backward_offsets(connectivity):
    if connectivity == 6:
        return [(-1, 0, 0), (0, -1, 0), (0, 0, -1)]
    if connectivity == 26:
        offs = []
        for dz in (-1, 0):
            for dy in (-1, 0, 1):
                for dx in (-1, 0, 1):
                    if dz == 0 and (dy > 0 or (dy == 0 and dx >= 0)):
                        continue
                    offs.append((dx, dy, dz))
        return offs
    raise ValueError("connectivity must be 6 or 26")


def _all_offsets(connectivity):
    offs = []
    for dz in (-1, 0, 1):
        for dy in (-1, 0, 1):
            for dx in (-1, 0, 1):
                if dx == dy == dz == 0:
                    continue
                if connectivity == 6 and abs(dx) + abs(dy) + abs(dz) != 1:
                    continue
                offs.append((dx, dy, dz))
    return offs


def _pair_slices(n, d):
    # (source slice, shifted slice) so that src[i] pairs with dst[i + d]
    if d >= 0:
        return slice(0, n - d), slice(d, n)
    return slice(-d, n), slice(0, n + d)


def label_components(fg, X, Y, Z, connectivity):
    vol = np.asarray(fg, dtype=bool).reshape((X, Y, Z), order="F")
    n = X * Y * Z
    idx = np.arange(n, dtype=np.int64).reshape((X, Y, Z), order="F")
    rows, cols = [], []
    for dx, dy, dz in _backward_offsets(connectivity):
        sx, tx = _pair_slices(X, dx)
        sy, ty = _pair_slices(Y, dy)
        sz, tz = _pair_slices(Z, dz)
        both = vol[sx, sy, sz] & vol[tx, ty, tz]
        rows.append(idx[sx, sy, sz][both])
        cols.append(idx[tx, ty, tz][both])
    rows = np.concatenate(rows) if rows else np.empty(0, np.int64)
    cols = np.concatenate(cols) if cols else np.empty(0, np.int64)
    graph = sparse.coo_matrix((np.ones(rows.size, np.int8), (rows, cols)), shape=(n, n))
    _, comp = csgraph.connected_components(graph, directed=False)
    flat_fg = vol.ravel(order="F")
    out = np.zeros(n, dtype=np.uint32)
    fg_idx = np.flatnonzero(flat_fg)
    if fg_idx.size == 0:
        return out, 0
    comp_fg = comp[fg_idx]
    # number components by first appearance in linear order
    uniq, first = np.unique(comp_fg, return_index=True)
    order = np.argsort(first, kind="stable")
    rank = np.empty(uniq.size, dtype=np.uint32)
    rank[order] = np.arange(1, uniq.size + 1, dtype=np.uint32)
    out[fg_idx] = rank[np.searchsorted(uniq, comp_fg)]
    return out, int(uniq.size)


def _min_plus_axis(g, axis, chunk_bytes=1 << 26):
    moved = np.moveaxis(g, axis, -1)
    shape = moved.shape
    lines = np.ascontiguousarray(moved).reshape(-1, shape[-1])
    n = shape[-1]
    pos = np.arange(n, dtype=np.float64)
    sq = (pos[:, None] - pos[None, :]) ** 2
    out = np.empty_like(lines)
    step = max(1, chunk_bytes // (8 * n * n))
    for start in range(0, lines.shape[0], step):
        block = lines[start:start + step]
        out[start:start + step] = (block[:, None, :] + sq[None, :, :]).min(axis=2)
    return np.moveaxis(out.reshape(shape), -1, axis)


def squared_edt(fg, X, Y, Z):
    vol = np.asarray(fg, dtype=bool).reshape((X, Y, Z), order="F")
    g = np.where(vol, np.inf, 0.0)
    for axis in range(3):
        g = _min_plus_axis(g, axis)
    return np.asfortranarray(g).ravel(order="F")


def flood(height, labels, mask, X, Y, Z, connectivity):
    offs = _all_offsets(connectivity)
    n = X * Y * Z
    height = np.asarray(height)
    mask = np.asarray(mask)
    queued = labels != 0
    claim = np.zeros(n, dtype=np.uint32)
    heap = []

    def neighbors(i):
        x = i % X
        r = i // X
        y = r % Y
        z = r // Y
        for dx, dy, dz in offs:
            nx, ny, nz = x + dx, y + dy, z + dz
            if 0 <= nx < X and 0 <= ny < Y and 0 <= nz < Z:
                yield nx + X * (ny + Y * nz)

    for i in np.flatnonzero(labels).tolist():
        for j in neighbors(i):
            if mask[j] and not queued[j]:
                queued[j] = True
                claim[j] = labels[i]
                heapq.heappush(heap, (-height[j], j))
    while heap:
        _, i = heapq.heappop(heap)
        labels[i] = claim[i]
        for j in neighbors(i):
            if mask[j] and not queued[j]:
                queued[j] = True
                claim[j] = labels[i]
                heapq.heappush(heap, (-height[j], j))
    return labels
