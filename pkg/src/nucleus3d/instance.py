"""Second network: per-nucleus patch segmentation with dilated convolutions.

Given a binary mask patch centered on one detected nucleus, the network
keeps that nucleus and erases whatever parts of its neighbours fall inside
the patch. Predictions are pasted back into a label volume.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import seeding
from .errors import ConfigError
from .nn import Adam, Conv3d, ConvBlock, Module, Tensor, no_grad
from .nn import functional as F
from .volume import round_half_up

log = logging.getLogger(__name__)

DEFAULT_DILATIONS = {32: (1, 2, 4, 8, 1), 16: (1, 2, 4, 1)}


def receptive_field(dilations, kernel=3):
    return 1 + (kernel - 1) * int(sum(dilations))


@dataclass
class InstanceNetConfig:
    patch: int = 32
    dilations: tuple | None = None
    width: int = 64
    lr: float = 0.001
    patches: int = 300
    epochs: int = 20
    batch: int = 4
    seed: int = 0

    def __post_init__(self):
        if self.patch < 2 or self.patch % 2:
            raise ConfigError(f"patch size must be even and >= 2, got {self.patch}")
        if self.dilations is None:
            if self.patch not in DEFAULT_DILATIONS:
                raise ConfigError(f"no default dilations for patch {self.patch}; pass them explicitly")
            self.dilations = DEFAULT_DILATIONS[self.patch]
        self.dilations = tuple(int(d) for d in self.dilations)
        if not self.dilations or min(self.dilations) < 1:
            raise ConfigError("dilations must be >= 1")
        rf = receptive_field(self.dilations)
        if rf <= self.patch:
            raise ConfigError(f"receptive field {rf} must exceed patch size {self.patch}")
        if self.width < 1 or self.batch < 1 or self.patches < 1:
            raise ConfigError("width, batch and patches must be >= 1")

    def as_dict(self):
        return {"patch": self.patch, "dilations": ",".join(map(str, self.dilations)),
                "width": self.width, "lr": self.lr, "patches": self.patches,
                "epochs": self.epochs, "batch": self.batch, "seed": self.seed}

    @classmethod
    def from_dict(cls, d):
        dil = d.get("dilations")
        return cls(patch=int(d.get("patch", 32)),
                   dilations=tuple(int(v) for v in str(dil).split(",")) if dil else None,
                   width=int(d.get("width", 64)), lr=float(d.get("lr", 0.001)),
                   patches=int(d.get("patches", 300)), epochs=int(d.get("epochs", 20)),
                   batch=int(d.get("batch", 4)), seed=int(d.get("seed", 0)))


class InstanceNet(Module):
    """Stack of dilated 3x3x3 conv blocks, then a 1x1x1 conv and sigmoid."""

    def __init__(self, cfg: InstanceNetConfig):
        super().__init__()
        self.cfg = cfg
        rng = seeding.rng(cfg.seed, "instance-init")
        cin = 1
        for i, d in enumerate(cfg.dilations):
            setattr(self, f"conv{i}", ConvBlock(cin, cfg.width, dilation=d, rng=rng))
            cin = cfg.width
        self.head = Conv3d(cin, 1, kernel=1, padding=0, rng=rng)

    def forward(self, x):
        h = x
        for i in range(len(self.cfg.dilations)):
            h = getattr(self, f"conv{i}")(h)
        return F.sigmoid(self.head(h))


def build_instance_net(cfg: InstanceNetConfig | None = None) -> InstanceNet:
    return InstanceNet(cfg or InstanceNetConfig())


def patch_origin(center, P):
    return round_half_up(center) - P // 2


def extract_patch(vol, center, P):
    """``P``-cubed patch whose voxel ``p`` is ``vol[origin + p]``; outside reads are 0.

    ``origin = round_half_up(center) - P // 2``, so the center sits at ``P // 2``.
    """
    vol = np.asarray(vol)
    origin = patch_origin(center, P)
    out = np.zeros((P, P, P), dtype=vol.dtype)
    src, dst = _overlap(origin, P, vol.shape)
    if src is not None:
        out[dst] = vol[src]
    return out


def _overlap(origin, P, dims):
    src, dst = [], []
    for o, n in zip(origin, dims):
        lo, hi = max(o, 0), min(o + P, n)
        if lo >= hi:
            return None, None
        src.append(slice(lo, hi))
        dst.append(slice(lo - o, hi - o))
    return tuple(src), tuple(dst)


def paste_patch(vol, patch, center):
    """Inverse of :func:`extract_patch` on the in-bounds part (in place)."""
    P = patch.shape[0]
    src, dst = _overlap(patch_origin(center, P), P, vol.shape)
    if src is not None:
        vol[src] = patch[dst]
    return vol


# --- training ------------------------------------------------------------------

def training_patches(phantoms, count, P, seed):
    """``count`` (input, target) pairs drawn without replacement over all nuclei.

    Input is the mask patch around a ground-truth center; the target keeps
    only that nucleus. ``phantoms`` yields objects with ``mask``, ``labels``
    and ``nuclei`` (nucleus ``k`` has label ``k + 1``).
    """
    phantoms = list(phantoms)
    pool = [(p, k) for p, ph in enumerate(phantoms) for k in range(len(ph.nuclei))]
    if len(pool) < count:
        raise ConfigError(f"need {count} nuclei for training, phantoms provide {len(pool)}")
    pick = seeding.rng(seed, "instance-patches").choice(len(pool), size=count, replace=False)
    xs, ys = [], []
    for i in np.sort(pick):
        p, k = pool[i]
        ph = phantoms[p]
        c = ph.nuclei[k].center
        xs.append(extract_patch(ph.mask, c, P).astype(np.float64))
        ys.append((extract_patch(ph.labels, c, P) == k + 1).astype(np.float64))
    return np.stack(xs), np.stack(ys)


@dataclass
class InstanceTrainResult:
    model: Module
    losses: list = field(default_factory=list)


def train_instance(model: InstanceNet, inputs, targets, epochs, seed, lr=0.001, batch=4,
                   progress=None) -> InstanceTrainResult:
    """Mini-batch BCE training; batches reshuffled every epoch from ``seed``."""
    inputs, targets = np.asarray(inputs, np.float64), np.asarray(targets, np.float64)
    n = len(inputs)
    if n == 0:
        raise ConfigError("empty training set")
    opt = Adam(model.parameters(), lr=lr)
    model.train()
    losses = []
    for epoch in range(epochs):
        order = seeding.rng(seed, "instance-epoch", epoch).permutation(n)
        total = 0.0
        for s in range(0, n, batch):
            idx = order[s:s + batch]
            out = model(Tensor(inputs[idx][:, None]))
            loss = F.bce_loss(out, targets[idx][:, None])
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
        losses.append(total / n)
        log.info("instance epoch %d/%d loss %.5f", epoch + 1, epochs, losses[-1])
        if progress:
            progress(epoch, losses[-1])
    model.eval()
    return InstanceTrainResult(model, losses)


# --- inference -----------------------------------------------------------------

@dataclass
class PasteRecord:
    label: int            # 0 when nothing was written
    centroid_index: int
    origin: tuple         # patch origin (x, y, z), may lie outside the volume
    voxels: int           # voxels written under this label
    conflicts: int        # predicted voxels already claimed by an earlier label


@dataclass
class InstanceLabeling:
    labels: np.ndarray
    records: list
    conflicts: int
    empty: int

    @property
    def count(self):
        return int(self.labels.max(initial=0))


def keep_center_component(pred):
    """Keep the 26-connected component holding the patch center.

    When the center voxel is background the component closest to it is
    kept instead (smallest label on ties).
    """
    from .volume import connected_components

    lab, table = connected_components(pred, 26)
    if len(table) == 0:
        return np.zeros(pred.shape, dtype=bool)
    c = pred.shape[0] // 2
    keep = lab[c, c, c]
    if keep == 0:
        pts = np.argwhere(lab > 0)
        d2 = ((pts - c) ** 2).sum(axis=1)
        hits = lab[tuple(pts[d2 == d2.min()].T)]
        keep = hits.min()
    return lab == keep


def model_predictor(model, batch=16):
    """Wrap ``model`` as a function mapping a stack of mask patches to probabilities."""
    model.eval()

    def predict(patches):
        out = []
        with no_grad():
            for s in range(0, len(patches), batch):
                x = Tensor(np.asarray(patches[s:s + batch], dtype=np.float64)[:, None])
                out.append(model(x).data[:, 0])
        return np.concatenate(out) if out else np.zeros((0,) + np.shape(patches)[1:])
    return predict


def segment_and_paste(predict, mask, centroids, P, threshold=0.5) -> InstanceLabeling:
    """Segment every centroid's patch and paste it, first writer wins.

    ``predict`` maps an ``(n, P, P, P)`` stack of binary mask patches to
    probabilities (see :func:`model_predictor`). Predictions are gated by
    the input patch, so output labels never leave the mask.
    """
    mask = np.asarray(mask, dtype=bool)
    centroids = np.asarray(centroids, dtype=np.float64).reshape(-1, 3)
    iseg = np.zeros(mask.shape, dtype=np.uint32)
    patches = np.stack([extract_patch(mask, c, P) for c in centroids]) if len(centroids) else \
        np.zeros((0, P, P, P), dtype=bool)
    probs = predict(patches)
    records, conflicts, empty, next_label = [], 0, 0, 1
    for j, c in enumerate(centroids):
        pred = keep_center_component((probs[j] >= threshold) & patches[j])
        origin = tuple(int(v) for v in patch_origin(c, P))
        src, dst = _overlap(origin, P, mask.shape)
        if src is None or not pred.any():
            empty += 1
            records.append(PasteRecord(0, j, origin, 0, 0))
            continue
        region = iseg[src]
        pv = pred[dst]
        free = pv & (region == 0)
        n_conf = int((pv & (region != 0)).sum())
        conflicts += n_conf
        n_new = int(free.sum())
        if n_new == 0:
            empty += 1
            records.append(PasteRecord(0, j, origin, 0, n_conf))
            continue
        region[free] = next_label
        records.append(PasteRecord(next_label, j, origin, n_new, n_conf))
        next_label += 1
    if empty:
        log.info("%d of %d centroids produced no voxels", empty, len(centroids))
    log.info("paste-back conflicts: %d voxels", conflicts)
    return InstanceLabeling(iseg, records, conflicts, empty)
