"""Object-wise evaluation with the 50 % intersection rule."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionError
from .volume import Region, crop, remove_small_components

TP, FN = "TP", "FN"


def filter_for_eval(labels, region: Region | None = None, min_voxels=50):
    """Crop to ``region`` and drop labels with fewer than ``min_voxels`` voxels inside it."""
    lab = np.asarray(labels, dtype=np.uint32)
    if region is not None:
        lab = crop(lab, region)
    return remove_small_components(lab, min_voxels)


@dataclass
class MatchRow:
    gt_label: int
    seg_label: int | None   # best-overlap candidate, None when nothing overlaps
    intersection: int
    gt_voxels: int
    seg_voxels: int
    verdict: str

    @property
    def coverage(self):
        return self.intersection / self.gt_voxels

    @property
    def iou(self):
        union = self.gt_voxels + self.seg_voxels - self.intersection
        return self.intersection / union if union else 0.0


@dataclass
class MatchTable:
    rows: list = field(default_factory=list)
    false_positives: list = field(default_factory=list)   # seg labels never matched

    @property
    def n_tp(self):
        return sum(r.verdict == TP for r in self.rows)

    @property
    def n_fn(self):
        return sum(r.verdict == FN for r in self.rows)

    @property
    def n_fp(self):
        return len(self.false_positives)

    def matched_iou(self):
        return np.array([r.iou for r in self.rows if r.verdict == TP])

    def to_tsv(self):
        lines = ["gt_label\tseg_label\tintersection\tgt_voxels\tcoverage\tverdict"]
        for r in self.rows:
            seg = "-" if r.seg_label is None else str(r.seg_label)
            lines.append(f"{r.gt_label}\t{seg}\t{r.intersection}\t{r.gt_voxels}\t{r.coverage:.4f}\t{r.verdict}")
        for s in self.false_positives:
            lines.append(f"-\t{s}\t0\t0\t0.0000\tFP")
        return "\n".join(lines)


def match_objects(seg, gt) -> MatchTable:
    """Greedy one-to-one matching of gt nuclei (ascending label) to seg objects.

    The candidate for a gt nucleus is the seg label with the largest overlap
    (smaller id on ties). It is a true positive when the overlap covers at
    least half of the gt nucleus and the candidate is still unclaimed.
    """
    seg, gt = np.asarray(seg), np.asarray(gt)
    if seg.shape != gt.shape:
        raise DimensionError(f"seg dims {seg.shape} differ from gt dims {gt.shape}")
    s = seg.ravel().astype(np.int64)
    g = gt.ravel().astype(np.int64)
    gt_ids, gt_counts = np.unique(g[g != 0], return_counts=True)
    seg_ids, seg_counts = np.unique(s[s != 0], return_counts=True)
    seg_size = dict(zip(seg_ids.tolist(), seg_counts.tolist()))
    both = (g != 0) & (s != 0)
    pairs, inter = np.unique(np.stack([g[both], s[both]]), axis=1, return_counts=True)
    best = {}
    # pairs are sorted by (gt, seg): a strict > keeps the smaller seg id on ties
    for gl, sl, n in zip(pairs[0].tolist(), pairs[1].tolist(), inter.tolist()):
        if gl not in best or n > best[gl][1]:
            best[gl] = (sl, n)
    table = MatchTable()
    used = set()
    for gl, gn in zip(gt_ids.tolist(), gt_counts.tolist()):
        sl, n = best.get(gl, (None, 0))
        ok = sl is not None and 2 * n >= gn and sl not in used
        if ok:
            used.add(sl)
        table.rows.append(MatchRow(gl, sl, n, gn, seg_size.get(sl, 0), TP if ok else FN))
    table.false_positives = [sl for sl in seg_ids.tolist() if sl not in used]
    return table


def f1_score(p, r):
    return 0.0 if p + r == 0 else 2.0 * p * r / (p + r)


@dataclass
class EvalReport:
    n_tp: int
    n_fp: int
    n_fn: int
    precision: float
    recall: float
    f1: float
    notes: list = field(default_factory=list)
    table: MatchTable | None = None

    def to_text(self, with_table=True):
        lines = [f"NTP={self.n_tp}", f"NFP={self.n_fp}", f"NFN={self.n_fn}",
                 f"P={100 * self.precision:.2f}%", f"R={100 * self.recall:.2f}%",
                 f"F1={100 * self.f1:.2f}%"]
        lines += [f"note={n}" for n in self.notes]
        if with_table and self.table is not None:
            lines += ["", self.table.to_tsv()]
        return "\n".join(lines) + "\n"


def score(table: MatchTable) -> EvalReport:
    tp, fp, fn = table.n_tp, table.n_fp, table.n_fn
    notes = []
    if tp + fp == 0:
        notes.append("no segmented objects: P set to 0")
    if tp + fn == 0:
        notes.append("no ground-truth objects: R set to 0")
    p = tp / (tp + fp) if tp + fp else 0.0
    r = tp / (tp + fn) if tp + fn else 0.0
    if p + r == 0:
        notes.append("P + R = 0: F1 set to 0")
    return EvalReport(tp, fp, fn, p, r, f1_score(p, r), notes, table)


def parse_report(text):
    """Key-value header of a report written by :meth:`EvalReport.to_text`."""
    out = {}
    for line in text.splitlines():
        if not line.strip():
            break
        key, _, val = line.partition("=")
        if key == "note":
            continue
        out[key] = float(val.rstrip("%")) / 100 if val.endswith("%") else int(val)
    return out


def evaluate(seg, gt, region: Region | None = None, min_voxels=50) -> EvalReport:
    """Filter both volumes and score them."""
    return score(match_objects(filter_for_eval(seg, region, min_voxels),
                               filter_for_eval(gt, region, min_voxels)))
