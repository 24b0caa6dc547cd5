# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled kernels: union-find labeling, exact squared EDT, priority flooding.

All kernels work on flat arrays in x-fastest order, linear index
``i = x + X * (y + Y * z)``.
"""
import numpy as np
cimport numpy as cnp
from libc.math cimport INFINITY
from libc.stdlib cimport malloc, free

cnp.import_array()

ctypedef cnp.int64_t i64


cdef inline i64 _find(i64* parent, i64 i) noexcept nogil:
    cdef i64 root = i
    while parent[root] != root:
        root = parent[root]
    cdef i64 nxt
    while parent[i] != root:
        nxt = parent[i]
        parent[i] = root
        i = nxt
    return root


def label_components(const cnp.uint8_t[::1] fg, Py_ssize_t X, Py_ssize_t Y,
                     Py_ssize_t Z, int connectivity):
    """Label foreground components; labels follow first appearance."""
    cdef Py_ssize_t n = X * Y * Z
    cdef cnp.ndarray[cnp.int64_t, ndim=1] parent_arr = np.arange(n, dtype=np.int64)
    cdef i64* parent = <i64*> parent_arr.data
    cdef cnp.ndarray[cnp.uint32_t, ndim=1] out = np.zeros(n, dtype=np.uint32)
    cdef int offs[13][3]
    cdef int noff = 0
    cdef int dx, dy, dz, k
    if connectivity == 26:
        for dz in range(-1, 1):
            for dy in range(-1, 2):
                for dx in range(-1, 2):
                    if dz == 0 and (dy > 0 or (dy == 0 and dx >= 0)):
                        continue
                    offs[noff][0] = dx
                    offs[noff][1] = dy
                    offs[noff][2] = dz
                    noff += 1
    elif connectivity == 6:
        for k in range(3):
            offs[k][0] = -1 if k == 0 else 0
            offs[k][1] = -1 if k == 1 else 0
            offs[k][2] = -1 if k == 2 else 0
        noff = 3
    else:
        raise ValueError("connectivity must be 6 or 26")

    cdef Py_ssize_t x, y, z, i, j, nx, ny, nz
    cdef i64 ri, rj
    cdef cnp.uint32_t nlab = 0
    with nogil:
        for z in range(Z):
            for y in range(Y):
                for x in range(X):
                    i = x + X * (y + Y * z)
                    if not fg[i]:
                        continue
                    for k in range(noff):
                        nx = x + offs[k][0]
                        ny = y + offs[k][1]
                        nz = z + offs[k][2]
                        if nx < 0 or ny < 0 or nz < 0 or nx >= X or ny >= Y:
                            continue
                        j = nx + X * (ny + Y * nz)
                        if not fg[j]:
                            continue
                        ri = _find(parent, i)
                        rj = _find(parent, j)
                        if ri < rj:
                            parent[rj] = ri
                        elif rj < ri:
                            parent[ri] = rj
        # roots are component minima, so ascending scan numbers by first appearance
        for i in range(n):
            if not fg[i]:
                continue
            ri = _find(parent, i)
            if ri == i:
                nlab += 1
                out[i] = nlab
            else:
                out[i] = out[ri]
    return out, int(nlab)


cdef void _edt_line(double* f, double* d, Py_ssize_t n, Py_ssize_t stride,
                    Py_ssize_t* v, double* zb) noexcept nogil:
    cdef Py_ssize_t q, k = -1
    cdef double s, fq
    for q in range(n):
        fq = f[q * stride]
        if fq == INFINITY:
            continue
        if k < 0:
            k = 0
            v[0] = q
            zb[0] = -INFINITY
            zb[1] = INFINITY
            continue
        while k >= 0:
            s = ((fq + <double>(q * q)) - (f[v[k] * stride] + <double>(v[k] * v[k]))) / (2.0 * (q - v[k]))
            if s <= zb[k]:
                k -= 1
            else:
                break
        if k < 0:
            k = 0
            v[0] = q
            zb[0] = -INFINITY
            zb[1] = INFINITY
        else:
            k += 1
            v[k] = q
            zb[k] = s
            zb[k + 1] = INFINITY
    if k < 0:
        for q in range(n):
            d[q] = INFINITY
        return
    k = 0
    for q in range(n):
        while zb[k + 1] < q:
            k += 1
        d[q] = <double>((q - v[k]) * (q - v[k])) + f[v[k] * stride]


def squared_edt(const cnp.uint8_t[::1] fg, Py_ssize_t X, Py_ssize_t Y, Py_ssize_t Z):
    """Exact squared Euclidean distance to the nearest background voxel."""
    cdef Py_ssize_t n = X * Y * Z
    cdef cnp.ndarray[cnp.float64_t, ndim=1] g_arr = np.empty(n, dtype=np.float64)
    cdef double* g = <double*> g_arr.data
    cdef Py_ssize_t i, a, b, q, m = max(X, max(Y, Z))
    for i in range(n):
        g[i] = INFINITY if fg[i] else 0.0
    cdef Py_ssize_t* v = <Py_ssize_t*> malloc(m * sizeof(Py_ssize_t))
    cdef double* zb = <double*> malloc((m + 1) * sizeof(double))
    cdef double* d = <double*> malloc(m * sizeof(double))
    cdef double* base
    try:
        with nogil:
            # x lines
            for b in range(Z):
                for a in range(Y):
                    base = g + X * (a + Y * b)
                    _edt_line(base, d, X, 1, v, zb)
                    for q in range(X):
                        base[q] = d[q]
            # y lines
            for b in range(Z):
                for a in range(X):
                    base = g + a + X * Y * b
                    _edt_line(base, d, Y, X, v, zb)
                    for q in range(Y):
                        base[q * X] = d[q]
            # z lines
            for b in range(Y):
                for a in range(X):
                    base = g + a + X * b
                    _edt_line(base, d, Z, X * Y, v, zb)
                    for q in range(Z):
                        base[q * X * Y] = d[q]
    finally:
        free(v)
        free(zb)
        free(d)
    return g_arr


cdef inline bint _before(double ka, i64 ia, double kb, i64 ib) noexcept nogil:
    # max-heap on distance, ascending linear index on ties
    return ka > kb or (ka == kb and ia < ib)


cdef inline void _push(double* keys, i64* ids, Py_ssize_t* size, double key, i64 idx) noexcept nogil:
    cdef Py_ssize_t c = size[0], p
    size[0] += 1
    while c > 0:
        p = (c - 1) >> 1
        if _before(key, idx, keys[p], ids[p]):
            keys[c] = keys[p]
            ids[c] = ids[p]
            c = p
        else:
            break
    keys[c] = key
    ids[c] = idx


cdef inline i64 _pop(double* keys, i64* ids, Py_ssize_t* size) noexcept nogil:
    cdef i64 top = ids[0]
    size[0] -= 1
    cdef Py_ssize_t n = size[0]
    if n == 0:
        return top
    cdef double key = keys[n]
    cdef i64 idx = ids[n]
    cdef Py_ssize_t c = 0, ch
    while True:
        ch = 2 * c + 1
        if ch >= n:
            break
        if ch + 1 < n and _before(keys[ch + 1], ids[ch + 1], keys[ch], ids[ch]):
            ch += 1
        if _before(keys[ch], ids[ch], key, idx):
            keys[c] = keys[ch]
            ids[c] = ids[ch]
            c = ch
        else:
            break
    keys[c] = key
    ids[c] = idx
    return top


def flood(const double[::1] height, cnp.uint32_t[::1] labels, const cnp.uint8_t[::1] mask,
          Py_ssize_t X, Py_ssize_t Y, Py_ssize_t Z, int connectivity):
    """Grow seed labels over ``mask`` in descending ``height`` order (in place)."""
    cdef Py_ssize_t n = X * Y * Z
    cdef cnp.ndarray[cnp.uint8_t, ndim=1] queued_arr = np.zeros(n, dtype=np.uint8)
    cdef cnp.ndarray[cnp.uint32_t, ndim=1] claim_arr = np.zeros(n, dtype=np.uint32)
    cdef cnp.uint8_t* queued = <cnp.uint8_t*> queued_arr.data
    cdef cnp.uint32_t* claim = <cnp.uint32_t*> claim_arr.data
    cdef double* keys = <double*> malloc((n + 1) * sizeof(double))
    cdef i64* ids = <i64*> malloc((n + 1) * sizeof(i64))
    cdef Py_ssize_t size = 0
    cdef int offs[26][3]
    cdef int noff = 0, dx, dy, dz, k
    for dz in range(-1, 2):
        for dy in range(-1, 2):
            for dx in range(-1, 2):
                if dx == 0 and dy == 0 and dz == 0:
                    continue
                if connectivity == 6 and abs(dx) + abs(dy) + abs(dz) != 1:
                    continue
                offs[noff][0] = dx
                offs[noff][1] = dy
                offs[noff][2] = dz
                noff += 1
    cdef Py_ssize_t i, j, x, y, z, nx, ny, nz, r
    try:
        with nogil:
            for i in range(n):
                if labels[i]:
                    queued[i] = 1
            for i in range(n):
                if labels[i] == 0:
                    continue
                x = i % X
                r = i // X
                y = r % Y
                z = r // Y
                for k in range(noff):
                    nx = x + offs[k][0]
                    ny = y + offs[k][1]
                    nz = z + offs[k][2]
                    if nx < 0 or ny < 0 or nz < 0 or nx >= X or ny >= Y or nz >= Z:
                        continue
                    j = nx + X * (ny + Y * nz)
                    if mask[j] and not queued[j]:
                        queued[j] = 1
                        claim[j] = labels[i]
                        _push(keys, ids, &size, height[j], j)
            while size > 0:
                i = _pop(keys, ids, &size)
                labels[i] = claim[i]
                x = i % X
                r = i // X
                y = r % Y
                z = r // Y
                for k in range(noff):
                    nx = x + offs[k][0]
                    ny = y + offs[k][1]
                    nz = z + offs[k][2]
                    if nx < 0 or ny < 0 or nz < 0 or nx >= X or ny >= Y or nz >= Z:
                        continue
                    j = nx + X * (ny + Y * nz)
                    if mask[j] and not queued[j]:
                        queued[j] = 1
                        claim[j] = labels[i]
                        _push(keys, ids, &size, height[j], j)
    finally:
        free(keys)
        free(ids)
    return labels


# --- dilated convolution (stride 1) -------------------------------------------
# Thin wrappers over the C kernels in _conv.h (register-tiled direct
# convolution). The input gradient reuses the forward kernel on the fully
# padded upstream gradient with a flipped, transposed kernel.

cdef extern from "_conv.h" nogil:
    void n3d_conv3d_forward(const double* xp, const double* w, const double* zeros, double* out,
                            long N, long Ci, long Co, long Dp, long Hp, long Wp, long Do,
                            long Ho, long Wo, long k, long d)
    void n3d_conv3d_backward_weight(const double* g, const double* xp, double* gw, long N,
                                    long Ci, long Co, long Dp, long Hp, long Wp, long Do,
                                    long Ho, long Wo, long k, long d)


def conv3d_forward(const double[:, :, :, :, ::1] xp, const double[:, :, :, :, ::1] w,
                   double[:, :, :, :, ::1] out, int dilation):
    """Accumulate the dilated convolution of padded ``xp`` with ``w`` into ``out``."""
    if w.shape[1] != xp.shape[1] or w.shape[0] != out.shape[1] or xp.shape[0] != out.shape[0]:
        raise ValueError("conv3d_forward: inconsistent shapes")
    cdef long k = w.shape[2]
    for ax in range(3):
        if xp.shape[2 + ax] != out.shape[2 + ax] + dilation * (k - 1):
            raise ValueError("conv3d_forward: padded input and output sizes disagree")
    cdef double[::1] zeros = np.zeros(w.shape[1] * k * k * k)
    with nogil:
        n3d_conv3d_forward(&xp[0, 0, 0, 0, 0], &w[0, 0, 0, 0, 0], &zeros[0], &out[0, 0, 0, 0, 0],
                           out.shape[0], xp.shape[1], out.shape[1], xp.shape[2], xp.shape[3],
                           xp.shape[4], out.shape[2], out.shape[3], out.shape[4], k, dilation)


def conv3d_backward_weight(const double[:, :, :, :, ::1] g, const double[:, :, :, :, ::1] xp,
                           double[:, :, :, :, ::1] gw, int dilation):
    """Accumulate d(loss)/d(weight) into ``gw``."""
    if gw.shape[1] != xp.shape[1] or gw.shape[0] != g.shape[1] or xp.shape[0] != g.shape[0]:
        raise ValueError("conv3d_backward_weight: inconsistent shapes")
    cdef long k = gw.shape[2]
    for ax in range(3):
        if xp.shape[2 + ax] != g.shape[2 + ax] + dilation * (k - 1):
            raise ValueError("conv3d_backward_weight: padded input and gradient sizes disagree")
    with nogil:
        n3d_conv3d_backward_weight(&g[0, 0, 0, 0, 0], &xp[0, 0, 0, 0, 0], &gw[0, 0, 0, 0, 0],
                                   g.shape[0], xp.shape[1], g.shape[1], xp.shape[2], xp.shape[3],
                                   xp.shape[4], g.shape[2], g.shape[3], g.shape[4], k, dilation)
