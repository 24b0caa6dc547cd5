import itertools
from collections import deque

import numpy as np
import pytest


def bfs_components(mask, connectivity=26):
    """Reference labeling by breadth-first flood fill, first-seen x-fastest order."""
    mask = np.asarray(mask, dtype=bool)
    X, Y, Z = mask.shape
    if connectivity == 6:
        offs = [(1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0), (0, 0, 1), (0, 0, -1)]
    else:
        offs = [o for o in itertools.product((-1, 0, 1), repeat=3) if o != (0, 0, 0)]
    lab = np.zeros(mask.shape, dtype=np.int64)
    n = 0
    for z in range(Z):
        for y in range(Y):
            for x in range(X):
                if not mask[x, y, z] or lab[x, y, z]:
                    continue
                n += 1
                lab[x, y, z] = n
                q = deque([(x, y, z)])
                while q:
                    v = q.popleft()
                    for o in offs:
                        w = (v[0] + o[0], v[1] + o[1], v[2] + o[2])
                        if all(0 <= w[i] < mask.shape[i] for i in range(3)) and mask[w] and not lab[w]:
                            lab[w] = n
                            q.append(w)
    return lab, n


def same_partition(a, b):
    """True when two label arrays induce the same partition of the foreground."""
    a, b = np.asarray(a).ravel(), np.asarray(b).ravel()
    if not np.array_equal(a != 0, b != 0):
        return False
    pairs = set(zip(a[a != 0].tolist(), b[b != 0].tolist()))
    return len(pairs) == len(set(a[a != 0].tolist())) == len(set(b[b != 0].tolist()))


def ball(shape, center, radius):
    g = np.indices(shape)
    return sum((g[i] - center[i]) ** 2 for i in range(3)) <= radius * radius


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
