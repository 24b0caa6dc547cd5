"""Dense 3D volumes: regions, cropping, component analysis and file I/O.

Arrays are indexed ``vol[x, y, z]`` with shape ``(X, Y, Z)``. On disk and
wherever a linear voxel index is needed the order is x fastest, then y,
then z (``i = x + X * (y + Y * z)``). Coordinates are 0-based everywhere
except :meth:`Region.from_text`, which accepts 1-based inclusive slices.
"""
from __future__ import annotations

import hashlib
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import kernels
from .errors import FormatError, RangeError

DTYPES = {
    "u8": np.dtype("<u1"),
    "f64": np.dtype("<f8"),
    "u1": np.dtype("<u1"),
    "u32": np.dtype("<u4"),
}


@dataclass(frozen=True)
class Volume:
    """A 3D array tagged with its on-disk dtype kind (u8, f64, u1, u32)."""

    data: np.ndarray
    kind: str

    def __post_init__(self):
        if self.kind not in DTYPES:
            raise FormatError(f"unknown dtype kind {self.kind!r}")
        arr = np.asarray(self.data)
        if arr.ndim != 3 or min(arr.shape) < 1:
            raise FormatError(f"volume must be 3D with positive dims, got {arr.shape}")
        if self.kind == "u1":
            if arr.dtype != bool and not np.isin(arr, (0, 1)).all():
                raise FormatError("binary volume holds values other than 0/1")
        arr = arr.astype(DTYPES[self.kind].newbyteorder("="), copy=False)
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)

    @property
    def dims(self):
        return tuple(int(s) for s in self.data.shape)

    def __array__(self, dtype=None, copy=None):
        return self.data if dtype is None else self.data.astype(dtype)

    @classmethod
    def binary(cls, arr):
        return cls(np.asarray(arr, dtype=bool).astype(np.uint8), "u1")

    @classmethod
    def labels(cls, arr):
        return cls(np.asarray(arr, dtype=np.uint32), "u32")

    @classmethod
    def probability(cls, arr):
        return cls(np.asarray(arr, dtype=np.float64), "f64")

    @classmethod
    def intensity(cls, arr):
        return cls(np.asarray(arr, dtype=np.uint8), "u8")


@dataclass(frozen=True)
class Region:
    """Inclusive 0-based bounds ``[x0, x1] x [y0, y1] x [z0, z1]``."""

    x0: int
    x1: int
    y0: int
    y1: int
    z0: int
    z1: int

    def __post_init__(self):
        for axis in "xyz":
            lo, hi = getattr(self, axis + "0"), getattr(self, axis + "1")
            if lo > hi:
                raise RangeError(f"{axis}: lower bound {lo} exceeds upper bound {hi}")

    @classmethod
    def full(cls, dims):
        X, Y, Z = dims
        return cls(0, X - 1, 0, Y - 1, 0, Z - 1)

    @classmethod
    def from_text(cls, text):
        """Parse 1-based inclusive ``"qi:qf,ri:rf,pi:pf"``."""
        try:
            parts = [tuple(int(v) for v in p.split(":")) for p in text.split(",")]
            (qi, qf), (ri, rf), (pi, pf) = parts
        except ValueError as exc:
            raise RangeError(f"cannot parse region {text!r}") from exc
        return cls(qi - 1, qf - 1, ri - 1, rf - 1, pi - 1, pf - 1)

    @classmethod
    def focal_plane(cls, dims, z):
        X, Y, _ = dims
        return cls(0, X - 1, 0, Y - 1, z, z)

    def to_text(self):
        return (f"{self.x0 + 1}:{self.x1 + 1},{self.y0 + 1}:{self.y1 + 1},"
                f"{self.z0 + 1}:{self.z1 + 1}")

    @property
    def dims(self):
        return (self.x1 - self.x0 + 1, self.y1 - self.y0 + 1, self.z1 - self.z0 + 1)

    @property
    def origin(self):
        return (self.x0, self.y0, self.z0)

    def slices(self):
        return (slice(self.x0, self.x1 + 1), slice(self.y0, self.y1 + 1),
                slice(self.z0, self.z1 + 1))

    def check(self, dims):
        for axis, lo, hi, n in zip("xyz", (self.x0, self.y0, self.z0),
                                   (self.x1, self.y1, self.z1), dims):
            if lo < 0 or hi >= n:
                raise RangeError(f"{axis}: region [{lo}, {hi}] outside [0, {n - 1}]")

    def within(self, outer: Region) -> Region:
        """Translate a region given relative to ``outer`` into outer's parent frame."""
        return Region(self.x0 + outer.x0, self.x1 + outer.x0, self.y0 + outer.y0,
                      self.y1 + outer.y0, self.z0 + outer.z0, self.z1 + outer.z0)


def crop(vol, region: Region):
    """Return the subvolume covered by ``region`` (same type as ``vol``)."""
    arr = np.asarray(vol)
    region.check(arr.shape)
    sub = arr[region.slices()].copy()
    if isinstance(vol, Volume):
        return Volume(sub, vol.kind)
    return sub


@dataclass
class ComponentTable:
    """Per-component statistics; row ``k`` describes label ``labels[k]``."""

    labels: np.ndarray      # (K,) uint32, ascending
    counts: np.ndarray      # (K,) int64
    centroids: np.ndarray   # (K, 3) float64, (x, y, z)
    bbox_min: np.ndarray    # (K, 3) int64
    bbox_max: np.ndarray    # (K, 3) int64, inclusive

    def __len__(self):
        return int(self.labels.size)


def component_table(labels) -> ComponentTable:
    """Voxel counts, centroids and bounding boxes of every nonzero label."""
    lab = np.asarray(labels)
    nz = np.flatnonzero(lab)
    vals = lab.ravel()[nz]
    if vals.size == 0:
        z = np.zeros((0, 3))
        return ComponentTable(np.zeros(0, np.uint32), np.zeros(0, np.int64), z,
                              z.astype(np.int64), z.astype(np.int64))
    ids, inv, counts = np.unique(vals, return_inverse=True, return_counts=True)
    coords = np.stack(np.unravel_index(nz, lab.shape), axis=1)
    k = ids.size
    sums = np.zeros((k, 3))
    for a in range(3):
        sums[:, a] = np.bincount(inv, weights=coords[:, a], minlength=k)
    lo = np.full((k, 3), np.iinfo(np.int64).max)
    hi = np.full((k, 3), -1, dtype=np.int64)
    np.minimum.at(lo, inv, coords)
    np.maximum.at(hi, inv, coords)
    return ComponentTable(ids.astype(np.uint32), counts.astype(np.int64),
                          sums / counts[:, None], lo, hi)


def connected_components(mask, connectivity=26):
    """Label the foreground of a binary array.

    Returns ``(labels, table)``; labels are dense 1..K, numbered by first
    appearance in x-fastest linear order.
    """
    if connectivity not in (6, 26):
        raise ValueError("connectivity must be 6 or 26")
    lab, _ = kernels.label(np.asarray(mask) != 0, connectivity)
    return lab, component_table(lab)


def remove_small_components(vol, min_voxels, connectivity=26):
    """Zero every component smaller than ``min_voxels``.

    Binary input (bool, or values only 0/1 with non-u32 dtype) is split into
    connected components; integer label input treats each label id as one
    component. Output keeps the input dtype.
    """
    if min_voxels < 0:
        raise ValueError("min_voxels must be >= 0")
    arr = np.asarray(vol)
    if min_voxels == 0:
        return arr.copy()
    binary = arr.dtype == bool or (arr.dtype != np.uint32 and arr.max(initial=0) <= 1)
    lab = kernels.label(arr != 0, connectivity)[0] if binary else arr
    counts = np.bincount(lab.ravel().astype(np.int64))
    keep = counts >= min_voxels
    keep[0] = False
    out = np.where(keep[lab], arr, 0).astype(arr.dtype)
    return out


def relabel_sequential(labels):
    """Map nonzero labels to 1..K preserving ascending order."""
    lab = np.asarray(labels)
    ids = np.unique(lab[lab != 0])
    lut = np.zeros(int(ids.max(initial=0)) + 1, dtype=np.uint32)
    lut[ids] = np.arange(1, ids.size + 1, dtype=np.uint32)
    return lut[lab]


def round_half_up(coords):
    return np.floor(np.asarray(coords, dtype=np.float64) + 0.5).astype(np.int64)


# --- file I/O -------------------------------------------------------------

def _stem(path):
    p = os.fspath(path)
    for ext in (".volh", ".vol"):
        if p.endswith(ext):
            return p[: -len(ext)]
    return p


def write_volume(vol: Volume, path):
    """Write ``NAME.vol`` (raw little-endian payload) and ``NAME.volh``."""
    if not isinstance(vol, Volume):
        raise TypeError("write_volume expects a Volume")
    stem = _stem(path)
    Path(stem).parent.mkdir(parents=True, exist_ok=True)
    X, Y, Z = vol.dims
    payload = np.asarray(vol.data, dtype=DTYPES[vol.kind]).tobytes(order="F")
    with open(stem + ".vol", "wb") as fh:
        fh.write(payload)
    with open(stem + ".volh", "w") as fh:
        fh.write(f"dims={X},{Y},{Z}\ndtype={vol.kind}\norder=xyz-row-major\n")
    return stem + ".vol"


def read_volume(path) -> Volume:
    stem = _stem(path)
    header = {}
    try:
        with open(stem + ".volh") as fh:
            for line in fh:
                line = line.strip()
                if line and not line.startswith("#"):
                    key, _, val = line.partition("=")
                    header[key.strip()] = val.strip()
    except FileNotFoundError as exc:
        raise FormatError(f"missing header {stem}.volh") from exc
    try:
        dims = tuple(int(v) for v in header["dims"].split(","))
        kind = header["dtype"]
    except (KeyError, ValueError) as exc:
        raise FormatError(f"bad header in {stem}.volh: {header}") from exc
    if len(dims) != 3 or min(dims) < 1:
        raise FormatError(f"dims must be three positive ints, got {dims}")
    if kind not in DTYPES:
        raise FormatError(f"unknown dtype {kind!r}")
    if header.get("order", "xyz-row-major") != "xyz-row-major":
        raise FormatError(f"unsupported order {header['order']!r}")
    raw = Path(stem + ".vol").read_bytes()
    dt = DTYPES[kind]
    expected = int(np.prod(dims)) * dt.itemsize
    if len(raw) != expected:
        raise FormatError(f"payload is {len(raw)} bytes, header implies {expected}")
    arr = np.frombuffer(raw, dtype=dt).reshape(dims, order="F")
    return Volume(arr.astype(dt.newbyteorder("="), copy=True), kind)


def file_digest(path):
    return hashlib.sha256(Path(_stem(path) + ".vol").read_bytes()).hexdigest()


# --- slice export -----------------------------------------------------------

def label_palette(labels):
    """Deterministic label -> RGB colors; label 0 is black."""
    lab = np.asarray(labels, dtype=np.uint64)
    h = lab * np.uint64(2654435761) ^ (lab >> np.uint64(3)) * np.uint64(40503)
    rgb = np.stack([(h >> np.uint64(s)) & np.uint64(0xFF) for s in (0, 8, 16)], axis=-1)
    rgb = (rgb.astype(np.uint16) // 2 + 96).astype(np.uint8)  # keep colors bright
    rgb[lab == 0] = 0
    return rgb


def export_slices(vol: Volume, out_dir, axis="z", prefix="slice"):
    """Write one PNG per slice along ``axis``; returns the written paths."""
    from PIL import Image

    ax = "xyz".index(axis)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    arr = np.moveaxis(np.asarray(vol.data), ax, 0)
    paths = []
    if vol.kind == "f64":
        hi = float(arr.max()) if arr.size and np.isfinite(arr).all() and arr.max() > 1 else 1.0
        img8 = np.clip(np.nan_to_num(arr) / hi * 255.0 + 0.5, 0, 255).astype(np.uint8)
    elif vol.kind == "u1":
        img8 = (arr != 0).astype(np.uint8) * 255
    else:
        img8 = arr
    for k in range(arr.shape[0]):
        # rows are y, columns x
        if vol.kind == "u32":
            img = Image.fromarray(np.ascontiguousarray(label_palette(arr[k]).swapaxes(0, 1)), "RGB")
        else:
            img = Image.fromarray(np.ascontiguousarray(img8[k].T.astype(np.uint8)), "L")
        p = out / f"{prefix}_{axis}{k:04d}.png"
        img.save(p)
        paths.append(p)
    return paths
