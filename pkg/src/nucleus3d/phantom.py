"""Synthetic nuclei phantoms with paired mask / central-region ground truth.

Nuclei are drawn one at a time and kept only when they share no voxel with
the nuclei already placed. Each kept nucleus also contributes a small
concentric ball (its central region) to the detection ground truth; the
half-radius keeps central regions apart even when nuclei touch.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from . import seeding
from .errors import ConfigError
from .volume import Region, Volume, crop, write_volume

_TOL = 1e-9


@dataclass(frozen=True)
class NucleusSpec:
    index: int
    shape: str                      # "sphere" or "ellipsoid"
    center: tuple                   # integer voxel (x, y, z)
    radii: tuple                    # semi-axes (a, b, c); equal for spheres
    rotation: tuple = (0.0, 0.0, 0.0)  # radians about x, then y, then z

    @property
    def central_radius(self):
        if self.shape == "sphere":
            return self.radii[0] / 2.0
        return float(math.floor(min(self.radii) / 2.0))


@dataclass(frozen=True)
class DegradationParams:
    foreground_mean: float = 200.0
    background_mean: float = 40.0
    blur_sigma: tuple = (1.0, 1.0, 1.0)
    noise_sigma: float = 10.0

    def __post_init__(self):
        for name in ("foreground_mean", "background_mean"):
            if not 0 <= getattr(self, name) <= 255:
                raise ConfigError(f"{name} must lie in [0, 255]")
        if len(self.blur_sigma) != 3 or min(self.blur_sigma) < 0:
            raise ConfigError("blur_sigma needs three values >= 0")
        if self.noise_sigma < 0:
            raise ConfigError("noise_sigma must be >= 0")


@dataclass(frozen=True)
class PhantomConfig:
    dims: tuple = (128, 128, 128)
    n: int = 1000
    r_min: float = 4.0
    r_max: float = 6.0
    shape_model: str = "sphere"
    seed: int = 0
    degradation: DegradationParams = field(default_factory=DegradationParams)

    def __post_init__(self):
        problems = self.problems()
        if problems:
            raise ConfigError("; ".join(problems))

    def problems(self):
        out = []
        if not 1 <= self.r_min <= self.r_max:
            out.append(f"need 1 <= r_min <= r_max (r_min={self.r_min}, r_max={self.r_max})")
        if self.n < 0:
            out.append("n must be >= 0")
        if self.shape_model not in ("sphere", "ellipsoid"):
            out.append(f"shape_model must be sphere or ellipsoid, not {self.shape_model!r}")
        if len(self.dims) != 3 or any(d < 2 * self.r_max for d in self.dims):
            out.append(f"every dim must be >= 2*r_max ({self.dims})")
        return out


@dataclass
class Phantom:
    mask: np.ndarray        # bool, union of accepted nuclei
    det: np.ndarray         # bool, union of central regions
    labels: np.ndarray      # uint32, nucleus k of ``nuclei`` has label k+1
    nuclei: list

    def __iter__(self):
        return iter((self.mask, self.det, self.nuclei))


def rotation_matrix(angles):
    """Rotation applying x, then y, then z (``R = Rz @ Ry @ Rx``)."""
    ax, ay, az = angles
    cx, sx = math.cos(ax), math.sin(ax)
    cy, sy = math.cos(ay), math.sin(ay)
    cz, sz = math.cos(az), math.sin(az)
    rx = np.array([[1, 0, 0], [0, cx, -sx], [0, sx, cx]])
    ry = np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]])
    rz = np.array([[cz, -sz, 0], [sz, cz, 0], [0, 0, 1]])
    return rz @ ry @ rx


def _ball(center, radius, dims):
    """(slices, local mask) for a ball; voxel centers within ``radius``."""
    return _shape_local(center, (radius,) * 3, None, dims)


def _shape_local(center, radii, rotation, dims):
    ext = int(math.ceil(max(radii)))
    lo = [max(0, c - ext) for c in center]
    hi = [min(d - 1, c + ext) for c, d in zip(center, dims)]
    if any(h < l for l, h in zip(lo, hi)):
        return None, None
    axes = [np.arange(l, h + 1) - c for l, h, c in zip(lo, hi, center)]
    px, py, pz = np.meshgrid(*axes, indexing="ij")
    pts = np.stack([px, py, pz], axis=-1).astype(np.float64)
    if rotation is not None and any(rotation):
        # canonical coordinates: inverse rotation R^T p
        pts = pts @ rotation_matrix(rotation)
    a = np.asarray(radii, dtype=np.float64)
    # a zero radius keeps only the points on that axis' center plane
    q = np.divide(pts, a, out=np.where(pts == 0, 0.0, np.inf), where=a > 0)
    local = (q ** 2).sum(axis=-1) <= 1.0 + _TOL
    slices = tuple(slice(l, h + 1) for l, h in zip(lo, hi))
    return slices, local


def voxelize(spec: NucleusSpec, dims):
    """Binary mask of one nucleus; a voxel is inside when its center is."""
    out = np.zeros(dims, dtype=bool)
    rot = spec.rotation if spec.shape == "ellipsoid" else None
    sl, local = _shape_local(spec.center, spec.radii, rot, dims)
    if sl is not None:
        out[sl] = local
    return out


def central_region(spec: NucleusSpec, dims):
    out = np.zeros(dims, dtype=bool)
    sl, local = _ball(spec.center, spec.central_radius, dims)
    if sl is not None:
        out[sl] = local
    return out


def _draw(rng, cfg: PhantomConfig, index):
    if cfg.shape_model == "sphere":
        r = float(rng.uniform(cfg.r_min, cfg.r_max))
        radii, rotation = (r, r, r), (0.0, 0.0, 0.0)
        central = r / 2.0
    else:
        radii = tuple(float(v) for v in rng.uniform(cfg.r_min, cfg.r_max, size=3))
        rotation = tuple(float(v) for v in rng.uniform(0.0, math.pi, size=3))
        central = math.floor(min(radii) / 2.0)
    margin = max(1, int(math.ceil(central)))
    center = tuple(int(rng.integers(margin, d - margin)) for d in cfg.dims)
    return NucleusSpec(index, cfg.shape_model, center, radii, rotation)


def generate_phantom(cfg: PhantomConfig) -> Phantom:
    """Sequential rejection sampling of ``cfg.n`` nucleus attempts."""
    dims = tuple(cfg.dims)
    rng = seeding.rng(cfg.seed, "phantom")
    mask = np.zeros(dims, dtype=bool)
    det = np.zeros(dims, dtype=bool)
    labels = np.zeros(dims, dtype=np.uint32)
    accepted = []
    for i in range(cfg.n):
        spec = _draw(rng, cfg, i)
        rot = spec.rotation if spec.shape == "ellipsoid" else None
        sl, local = _shape_local(spec.center, spec.radii, rot, dims)
        if sl is None or (mask[sl] & local).any():
            continue
        mask[sl] |= local
        labels[sl][local] = len(accepted) + 1
        csl, clocal = _ball(spec.center, spec.central_radius, dims)
        det[csl] |= clocal
        accepted.append(spec)
    return Phantom(mask, det, labels, accepted)


def gaussian_kernel1d(sigma):
    """Gaussian taps truncated at 3 sigma and renormalized to sum 1."""
    if sigma <= 0:
        return np.ones(1)
    radius = int(math.ceil(3.0 * sigma))
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def blur(vol, sigmas):
    """Separable truncated-Gaussian blur with mirrored borders."""
    out = np.asarray(vol, dtype=np.float64)
    for axis, s in enumerate(sigmas):
        if s > 0:
            out = ndimage.correlate1d(out, gaussian_kernel1d(s), axis=axis, mode="reflect")
    return out


def degrade(mask, params: DegradationParams, seed):
    """Real-valued appearance before quantization."""
    two_level = np.where(np.asarray(mask) != 0, params.foreground_mean, params.background_mean)
    out = blur(two_level, params.blur_sigma)
    if params.noise_sigma > 0:
        out = out + seeding.rng(seed, "noise").normal(0.0, params.noise_sigma, size=out.shape)
    return out


def synthesize_appearance(mask, params: DegradationParams, seed):
    """Stand-in microscopy appearance: blur, additive noise, clamp to u8."""
    out = degrade(mask, params, seed)
    return np.clip(np.rint(out), 0, 255).astype(np.uint8)


def phantom_seed(base_seed, k):
    return seeding.derive_seed(base_seed, "phantom-set", k)


def octant_regions(dims, size):
    """Disjoint ``size``-cubed tiles covering ``dims`` in x-fastest order."""
    counts = [d // size for d in dims]
    if any(d % size for d in dims):
        raise ConfigError(f"dims {dims} are not multiples of {size}")
    regions = []
    for oz in range(counts[2]):
        for oy in range(counts[1]):
            for ox in range(counts[0]):
                regions.append(Region(ox * size, (ox + 1) * size - 1, oy * size,
                                      (oy + 1) * size - 1, oz * size, (oz + 1) * size - 1))
    return regions


def make_phantom_volumes(cfg: PhantomConfig):
    """Generate one phantom plus its synthetic appearance."""
    ph = generate_phantom(cfg)
    syn = synthesize_appearance(ph.mask, cfg.degradation, seeding.derive_seed(cfg.seed, "appearance"))
    return syn, ph


def make_training_set(cfg: PhantomConfig, out_dir, count=20, split_to=64):
    """Write ``count`` phantoms and their ``split_to``-cubed tiles to disk.

    Produces ``phantoms.tsv`` (syn, mask, det, labels per full volume) and
    ``manifest.tsv`` (syn, mask, det per tile). Phantom ``k`` uses seed
    ``phantom_seed(cfg.seed, k)``. Returns the manifest path.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    regions = octant_regions(cfg.dims, split_to) if split_to else []
    full_rows, tile_rows = [], []
    for k in range(count):
        kcfg = PhantomConfig(cfg.dims, cfg.n, cfg.r_min, cfg.r_max, cfg.shape_model,
                             phantom_seed(cfg.seed, k), cfg.degradation)
        syn, ph = make_phantom_volumes(kcfg)
        vols = {
            "syn": Volume.intensity(syn),
            "mask": Volume.binary(ph.mask),
            "det": Volume.binary(ph.det),
            "labels": Volume.labels(ph.labels),
        }
        paths = {key: write_volume(v, out / f"phantom_{k:03d}_{key}") for key, v in vols.items()}
        full_rows.append([paths[key] for key in ("syn", "mask", "det", "labels")])
        for t, region in enumerate(regions):
            row = []
            for key in ("syn", "mask", "det"):
                row.append(write_volume(crop(vols[key], region), out / "tiles" / f"phantom_{k:03d}_t{t}_{key}"))
            tile_rows.append(row)
    _write_tsv(out / "phantoms.tsv", full_rows, out)
    _write_tsv(out / "manifest.tsv", tile_rows, out)
    return out / "manifest.tsv"


def _write_tsv(path, rows, base):
    with open(path, "w") as fh:
        for row in rows:
            fh.write("\t".join(str(Path(p).relative_to(base)) for p in row) + "\n")


def read_manifest(path):
    """Rows of absolute paths from a tab-separated manifest."""
    base = Path(path).parent
    rows = []
    with open(path) as fh:
        for line in fh:
            line = line.rstrip("\n")
            if line.strip():
                rows.append([p if Path(p).is_absolute() else str(base / p) for p in line.split("\t")])
    return rows
