"""First network: dual-head 3D U-Net for central regions and nucleus mask.

Also holds sliding-window whole-volume inference and the post-processing
that turns the two probability volumes into centroids.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import seeding
from .errors import ConfigError, DimensionError
from .nn import Adam, Conv3d, ConvBlock, Module, Tensor, UpBlock, no_grad
from .nn import functional as F
from .volume import ComponentTable, connected_components, remove_small_components

log = logging.getLogger(__name__)

WINDOW = 64


@dataclass
class DetectNetConfig:
    widths: tuple = (32, 64, 128)
    input_size: int = WINDOW
    lr: float = 0.001
    epochs: int = 10
    seed: int = 0

    def __post_init__(self):
        self.widths = tuple(int(w) for w in self.widths)
        if not self.widths or min(self.widths) < 1:
            raise ConfigError("widths must be positive")
        if self.input_size % 2 ** (len(self.widths) - 1):
            raise ConfigError(
                f"input size {self.input_size} not divisible by 2^{len(self.widths) - 1}")

    def as_dict(self):
        return {"widths": ",".join(map(str, self.widths)), "input_size": self.input_size,
                "lr": self.lr, "epochs": self.epochs, "seed": self.seed}

    @classmethod
    def from_dict(cls, d):
        return cls(widths=tuple(int(w) for w in str(d["widths"]).split(",")),
                   input_size=int(d.get("input_size", WINDOW)), lr=float(d.get("lr", 0.001)),
                   epochs=int(d.get("epochs", 10)), seed=int(d.get("seed", 0)))


class DetectNet(Module):
    """Encoder: two conv blocks then 2x pooling per level. Decoder: transposed
    conv block, skip concatenation, two conv blocks. Two 1x1x1 sigmoid heads
    (detection, mask) share the decoder."""

    def __init__(self, cfg: DetectNetConfig):
        super().__init__()
        self.cfg = cfg
        rng = seeding.rng(cfg.seed, "detect-init")
        w = cfg.widths
        self.levels = len(w)
        cin = 1
        for i, width in enumerate(w):
            setattr(self, f"enc{i}a", ConvBlock(cin, width, rng=rng))
            setattr(self, f"enc{i}b", ConvBlock(width, width, rng=rng))
            cin = width
        for i in reversed(range(self.levels - 1)):
            setattr(self, f"up{i}", UpBlock(w[i + 1], w[i], rng=rng))
            setattr(self, f"dec{i}a", ConvBlock(2 * w[i], w[i], rng=rng))
            setattr(self, f"dec{i}b", ConvBlock(w[i], w[i], rng=rng))
        self.head_det = Conv3d(w[0], 1, kernel=1, padding=0, rng=rng)
        self.head_mask = Conv3d(w[0], 1, kernel=1, padding=0, rng=rng)

    def forward(self, x):
        shape = x.shape[2:]
        div = 2 ** (self.levels - 1)
        for axis, n in zip("DHW", shape):
            if n % div:
                raise DimensionError(f"axis {axis} size {n} not divisible by {div}")
        skips = []
        h = x
        for i in range(self.levels):
            h = getattr(self, f"enc{i}b")(getattr(self, f"enc{i}a")(h))
            if i < self.levels - 1:
                skips.append(h)
                h = F.max_pool3d(h)
        for i in reversed(range(self.levels - 1)):
            h = getattr(self, f"up{i}")(h)
            h = F.cat([skips[i], h], axis=1)
            h = getattr(self, f"dec{i}b")(getattr(self, f"dec{i}a")(h))
        return F.sigmoid(self.head_det(h)), F.sigmoid(self.head_mask(h))


def build_detect_net(cfg: DetectNetConfig | None = None) -> DetectNet:
    return DetectNet(cfg or DetectNetConfig())


def expected_parameter_count(widths, cin=1):
    """Closed-form parameter count of :class:`DetectNet`."""
    def conv(a, b, k=3):
        return a * b * k ** 3 + b

    def bn(c):
        return 2 * c

    total, c = 0, cin
    for w in widths:
        total += conv(c, w) + bn(w) + conv(w, w) + bn(w)
        c = w
    for i in range(len(widths) - 1):
        a, b = widths[i + 1], widths[i]
        total += a * b * 8 + b + bn(b)
        total += conv(2 * b, b) + bn(b) + conv(b, b) + bn(b)
    total += 2 * conv(widths[0], 1, k=1)
    return total


def to_input(syn):
    """u8 ``[x, y, z]`` volume(s) -> network input scaled to [0, 1]."""
    arr = np.asarray(syn, dtype=np.float64) / 255.0
    if arr.ndim == 3:
        arr = arr[None]
    return Tensor(arr[:, None])


@dataclass
class TrainResult:
    model: Module
    losses: list = field(default_factory=list)


def train_detect(model: DetectNet, samples, epochs, seed, lr=0.001, progress=None) -> TrainResult:
    """Train on ``(syn, mask_gt, det_gt)`` triples, one volume per step.

    Loss per step is BCE(detection head) + BCE(mask head). The visiting
    order is reshuffled each epoch from ``seed``. Returns the per-epoch
    mean losses.
    """
    samples = list(samples)
    if not samples:
        raise ConfigError("empty training set")
    opt = Adam(model.parameters(), lr=lr)
    model.train()
    losses = []
    for epoch in range(epochs):
        order = seeding.rng(seed, "detect-epoch", epoch).permutation(len(samples))
        total = 0.0
        for k in order:
            syn, mask_gt, det_gt = samples[k]
            loss = detect_loss(model, syn, mask_gt, det_gt)
            loss.backward()
            opt.step()
            total += loss.item()
        losses.append(total / len(samples))
        log.info("detect epoch %d/%d loss %.5f", epoch + 1, epochs, losses[-1])
        if progress:
            progress(epoch, losses[-1])
    model.eval()
    return TrainResult(model, losses)


def detect_loss(model, syn, mask_gt, det_gt):
    det_p, mask_p = model(to_input(syn))
    det_t = np.asarray(det_gt, dtype=np.float64)[None, None]
    mask_t = np.asarray(mask_gt, dtype=np.float64)[None, None]
    return F.add(F.bce_loss(det_p, det_t), F.bce_loss(mask_p, mask_t))


def window_starts(n, window=WINDOW):
    """Stride-``window`` offsets along one axis, last one flush with the end."""
    if n < window:
        raise DimensionError(f"axis length {n} < window {window}; pad the volume first")
    starts = list(range(0, n - window + 1, window))
    if starts[-1] + window < n:
        starts.append(n - window)
    return starts


def window_positions(dims, window=WINDOW):
    """All window origins, x fastest; later windows overwrite earlier ones."""
    for axis, n in zip("xyz", dims):
        if n < window:
            raise DimensionError(f"axis {axis} length {n} < window {window}; pad the volume first")
    xs, ys, zs = (window_starts(n, window) for n in dims)
    return [(x, y, z) for z in zs for y in ys for x in xs]


def sliding_window_inference(model, vol, window=WINDOW, predict=None):
    """Whole-volume detection and mask probabilities by non-overlapping tiling.

    ``predict`` maps a u8 window to ``(det_prob, mask_prob)``; it defaults
    to running ``model`` in eval mode.
    """
    vol = np.asarray(vol)
    if predict is None:
        model.eval()

        def predict(tile):
            with no_grad():
                d, m = model(to_input(tile))
            return d.data[0, 0], m.data[0, 0]

    det = np.zeros(vol.shape)
    mask = np.zeros(vol.shape)
    for x, y, z in window_positions(vol.shape, window):
        sl = (slice(x, x + window), slice(y, y + window), slice(z, z + window))
        d, m = predict(vol[sl])
        det[sl] = d
        mask[sl] = m
    return det, mask


@dataclass
class DetectionResult:
    centroids: np.ndarray     # (K, 3) float64 (x, y, z)
    mask: np.ndarray          # bool I^mask
    detection: np.ndarray     # bool I^det after gating and size filtering
    table: ComponentTable


def postprocess(det_prob, mask_prob, threshold=0.5, T=10, connectivity=26) -> DetectionResult:
    """Binarize, gate detection by mask, drop detection components below ``T`` voxels."""
    det_prob, mask_prob = np.asarray(det_prob), np.asarray(mask_prob)
    if det_prob.shape != mask_prob.shape:
        raise DimensionError(f"detection {det_prob.shape} and mask {mask_prob.shape} differ")
    mask = mask_prob >= threshold
    det = (det_prob >= threshold) & mask
    det = remove_small_components(det, T, connectivity)
    labels, table = connected_components(det, connectivity)
    return DetectionResult(table.centroids.copy(), mask, det, table)


def write_centroids(path, centroids):
    with open(path, "w") as fh:
        for c in np.asarray(centroids, dtype=np.float64).reshape(-1, 3).tolist():
            fh.write(f"{c[0]!r} {c[1]!r} {c[2]!r}\n")


def read_centroids(path):
    rows = []
    with open(path) as fh:
        for line in fh:
            if line.strip():
                rows.append([float(v) for v in line.split()])
    return np.asarray(rows, dtype=np.float64).reshape(-1, 3)
