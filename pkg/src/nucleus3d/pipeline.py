"""End-to-end run: phantom -> detection -> instance segmentation -> evaluation."""
from __future__ import annotations

import dataclasses
import logging
import platform
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__, kernels, seeding
from .config import PipelineConfig, config_hash, dump_kv
from .detect import (DetectNetConfig, build_detect_net, postprocess, sliding_window_inference,
                     train_detect, write_centroids)
from .errors import Nucleus3DError
from .evaluate import EvalReport, evaluate
from .instance import (InstanceNetConfig, build_instance_net, extract_patch, model_predictor,
                       segment_and_paste, train_instance, training_patches)
from .nn import checkpoint
from .phantom import PhantomConfig, make_phantom_volumes, octant_regions, phantom_seed
from .volume import Volume, export_slices, file_digest, round_half_up, write_volume
from .watershed import WatershedConfig, watershed_segment

log = logging.getLogger(__name__)


class StageError(Nucleus3DError):
    def __init__(self, stage, cause):
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage = stage
        self.cause = cause


def stage_seeds(seed):
    """Per-stage seeds split from the global seed."""
    return {name: seeding.derive_seed(seed, name)
            for name in ("train-phantoms", "test-phantom", "detect", "instance")}


@dataclass
class PipelineResult:
    report: EvalReport
    baseline: EvalReport | None
    centroids: np.ndarray
    labels: np.ndarray
    gt_labels: np.ndarray
    n_true: int
    baseline_labels: int | None = None
    files: dict = field(default_factory=dict)
    timings: dict = field(default_factory=dict)

    def median_iou(self):
        iou = self.report.table.matched_iou()
        return float(np.median(iou)) if iou.size else 0.0


def _with_seed(cfg: PhantomConfig, seed):
    return dataclasses.replace(cfg, seed=seed)


def training_phantoms(cfg: PhantomConfig, count, base_seed):
    for k in range(count):
        yield make_phantom_volumes(_with_seed(cfg, phantom_seed(base_seed, k)))


def train_models(cfg: PipelineConfig, seeds, progress=None):
    """Train both networks on ``cfg.train_count`` fresh phantoms."""
    samples, phantoms = [], []
    for syn, ph in training_phantoms(cfg.phantom, cfg.train_count, seeds["train-phantoms"]):
        for r in octant_regions(cfg.phantom.dims, cfg.detect.input_size):
            sl = r.slices()
            samples.append((syn[sl], ph.mask[sl], ph.det[sl]))
        phantoms.append(ph)
    dcfg = dataclasses.replace(cfg.detect, seed=seeds["detect"])
    det_net = build_detect_net(dcfg)
    log.info("training detection net on %d tiles, %d params", len(samples), det_net.num_parameters())
    dres = train_detect(det_net, samples, dcfg.epochs, dcfg.seed, dcfg.lr,
                        progress=progress and (lambda e, l: progress("detect", e, l)))
    del samples
    icfg = dataclasses.replace(cfg.instance, seed=seeds["instance"])
    inst_net = build_instance_net(icfg)
    xs, ys = training_patches(phantoms, icfg.patches, icfg.patch, icfg.seed)
    log.info("training instance net on %d patches, %d params", len(xs), inst_net.num_parameters())
    ires = train_instance(inst_net, xs, ys, icfg.epochs, icfg.seed, icfg.lr, icfg.batch,
                          progress=progress and (lambda e, l: progress("instance", e, l)))
    return det_net, dcfg, dres.losses, inst_net, icfg, ires.losses


def load_models(cfg: PipelineConfig):
    if not cfg.detect_checkpoint or not cfg.instance_checkpoint:
        raise Nucleus3DError("detect.checkpoint and instance.checkpoint are required without --train")
    _, dconf = checkpoint.read_header(cfg.detect_checkpoint)[:2]
    det_net = build_detect_net(DetectNetConfig.from_dict(dconf))
    checkpoint.load_into(det_net, cfg.detect_checkpoint)
    _, iconf = checkpoint.read_header(cfg.instance_checkpoint)[:2]
    icfg = InstanceNetConfig.from_dict(iconf)
    if icfg.patch != cfg.instance.patch:
        raise Nucleus3DError(f"instance checkpoint has P={icfg.patch}, config says P={cfg.instance.patch}")
    inst_net = build_instance_net(icfg)
    checkpoint.load_into(inst_net, cfg.instance_checkpoint)
    return det_net, inst_net, icfg


def oracle_predictor(gt_labels, centroids, P):
    """Instance "model" returning the true nucleus under each centroid."""
    gt = np.asarray(gt_labels)
    targets = []
    for c in np.asarray(centroids).reshape(-1, 3):
        v = tuple(round_half_up(c))
        lab = gt[v]
        targets.append((extract_patch(gt, c, P) == lab).astype(np.float64) if lab else np.zeros((P,) * 3))

    def predict(patches):
        return np.stack(targets) if targets else np.zeros((0, P, P, P))
    return predict


def run_pipeline(cfg: PipelineConfig, train=False, oracle=False, progress=None) -> PipelineResult:
    """Run every stage; intermediates, report and manifest go to ``cfg.out_dir``.

    ``oracle`` replaces both networks by the ground truth of the test phantom.
    """
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    seeds = stage_seeds(cfg.seed)
    timings, files = {}, {}
    stage = "setup"

    def mark(name, t0):
        timings[name] = round(time.perf_counter() - t0, 3)

    def save(name, vol, force=False):
        if cfg.intermediates or force:
            files[name] = write_volume(vol, out / name)

    try:
        stage = "generate"
        t0 = time.perf_counter()
        syn, ph = make_phantom_volumes(_with_seed(cfg.phantom, seeds["test-phantom"]))
        save("input_syn", Volume.intensity(syn))
        save("gt_mask", Volume.binary(ph.mask))
        save("gt_det", Volume.binary(ph.det))
        save("gt_labels", Volume.labels(ph.labels))
        mark(stage, t0)

        P = cfg.instance.patch
        if oracle:
            det_prob, mask_prob = ph.det.astype(np.float64), ph.mask.astype(np.float64)
            predict = None
        else:
            stage = "train" if train else "load-models"
            t0 = time.perf_counter()
            if train:
                det_net, dcfg, dloss, inst_net, icfg, iloss = train_models(cfg, seeds, progress)
                (out / "models").mkdir(exist_ok=True)
                checkpoint.save(det_net, out / "models" / "detect.ckpt", "detect", dcfg.as_dict())
                checkpoint.save(inst_net, out / "models" / "instance.ckpt", "instance", icfg.as_dict())
                with open(out / "models" / "losses.tsv", "w") as fh:
                    for net_name, losses in (("detect", dloss), ("instance", iloss)):
                        for e, v in enumerate(losses):
                            fh.write(f"{net_name}\t{e}\t{v!r}\n")
            else:
                det_net, inst_net, icfg = load_models(cfg)
            mark(stage, t0)
            stage = "detect"
            t0 = time.perf_counter()
            det_prob, mask_prob = sliding_window_inference(det_net, syn, cfg.detect.input_size)
            predict = model_predictor(inst_net)
            mark(stage, t0)
        save("det_prob", Volume.probability(det_prob))
        save("mask_prob", Volume.probability(mask_prob))

        stage = "postprocess"
        t0 = time.perf_counter()
        det = postprocess(det_prob, mask_prob, cfg.threshold, cfg.T)
        save("mask", Volume.binary(det.mask))
        save("det", Volume.binary(det.detection))
        write_centroids(out / "centroids.txt", det.centroids)
        mark(stage, t0)

        stage = "instance"
        t0 = time.perf_counter()
        if predict is None:
            predict = oracle_predictor(ph.labels, det.centroids, P)
        inst = segment_and_paste(predict, det.mask, det.centroids, P)
        save("iseg", Volume.labels(inst.labels), force=True)
        mark(stage, t0)

        stage = "evaluate"
        t0 = time.perf_counter()
        report = evaluate(inst.labels, ph.labels, cfg.region, cfg.min_voxels)
        (out / "report.txt").write_text(report.to_text())
        mark(stage, t0)

        baseline, n_ws = None, None
        if cfg.baseline:
            stage = "baseline"
            t0 = time.perf_counter()
            ws = watershed_segment(syn, WatershedConfig(threshold=cfg.watershed_threshold))
            n_ws = int(ws.max(initial=0))
            save("watershed", Volume.labels(ws))
            baseline = evaluate(ws, ph.labels, cfg.region, cfg.min_voxels)
            (out / "baseline_report.txt").write_text(baseline.to_text())
            mark(stage, t0)

        if cfg.export_slices:
            stage = "export"
            t0 = time.perf_counter()
            export_slices(Volume.intensity(syn), out / "slices", prefix="syn")
            export_slices(Volume.labels(inst.labels), out / "slices", prefix="iseg")
            mark(stage, t0)
    except Nucleus3DError as exc:
        raise StageError(stage, exc) from exc
    except (OSError, ValueError, MemoryError) as exc:
        raise StageError(stage, exc) from exc

    _write_manifest(out, cfg, seeds, files, report, oracle, train)
    (out / "timings.txt").write_text("".join(f"{k}={v}\n" for k, v in timings.items()))
    return PipelineResult(report, baseline, det.centroids, inst.labels, ph.labels,
                          len(ph.nuclei), n_ws, files, timings)


def _write_manifest(out, cfg, seeds, files, report, oracle, train):
    import scipy

    lines = [
        f"nucleus3d={__version__}",
        f"numpy={np.__version__}",
        f"scipy={scipy.__version__}",
        f"python={platform.python_version()}",
        f"backend={kernels.BACKEND}",
        f"config_sha256={config_hash(cfg.raw)}",
        f"seed={cfg.seed}",
        f"mode={'oracle' if oracle else 'train' if train else 'checkpoint'}",
    ]
    lines += [f"stage_seed.{k}={v}" for k, v in seeds.items()]
    lines += [f"file.{name}={Path(p).name} sha256={file_digest(p)}" for name, p in sorted(files.items())]
    lines += [f"result.{k}" for k in report.to_text(with_table=False).splitlines()]
    (out / "manifest.txt").write_text("\n".join(lines) + "\n")
    (out / "config.txt").write_text(dump_kv(cfg.raw))
