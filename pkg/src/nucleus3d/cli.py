"""``nucleus3d`` command line.

Exit codes: 0 success, 1 runtime failure, 2 configuration error.
"""
from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from pathlib import Path
from types import SimpleNamespace

import numpy as np
from scipy import ndimage

from . import __version__, kernels
from .errors import ConfigError, Nucleus3DError

log = logging.getLogger("nucleus3d")

EXIT_OK, EXIT_RUNTIME, EXIT_CONFIG = 0, 1, 2


def _vol(path):
    from .volume import read_volume
    return read_volume(path)


# --- phantom -------------------------------------------------------------------

def cmd_phantom_generate(args):
    from .config import load_kv, phantom_config_from
    from .phantom import make_phantom_volumes
    from .volume import Volume, write_volume

    cfg = phantom_config_from(load_kv(args.config))
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
    syn, ph = make_phantom_volumes(cfg)
    out = Path(args.out)
    paths = [write_volume(Volume.intensity(syn), out / "syn"),
             write_volume(Volume.binary(ph.mask), out / "mask"),
             write_volume(Volume.binary(ph.det), out / "det")]
    write_volume(Volume.labels(ph.labels), out / "labels")
    with open(out / "nuclei.tsv", "w") as fh:
        fh.write("label\tshape\tcx\tcy\tcz\ta\tb\tc\trx\try\trz\n")
        for k, n in enumerate(ph.nuclei, start=1):
            vals = [k, n.shape, *n.center, *n.radii, *n.rotation]
            fh.write("\t".join(str(v) for v in vals) + "\n")
    (out / "manifest.tsv").write_text("\t".join(Path(p).name for p in paths) + "\n")
    print(f"accepted {len(ph.nuclei)} of {cfg.n} nuclei -> {out}")


def cmd_phantom_training_set(args):
    from .config import load_kv, phantom_config_from
    from .phantom import make_training_set

    cfg = phantom_config_from(load_kv(args.config))
    manifest = make_training_set(cfg, args.out, args.count, args.split_to)
    print(f"wrote {manifest}")


# --- detect ----------------------------------------------------------------------

def cmd_detect_train(args):
    from .detect import DetectNetConfig, build_detect_net, train_detect
    from .nn import checkpoint
    from .phantom import read_manifest

    rows = read_manifest(args.data)
    if not rows:
        raise ConfigError(f"{args.data}: empty manifest")
    samples = [tuple(_vol(p).data for p in row[:3]) for row in rows]
    size = samples[0][0].shape[0]
    cfg = DetectNetConfig(widths=tuple(int(w) for w in args.widths.split(",")), input_size=size,
                          lr=args.lr, epochs=args.epochs, seed=args.seed)
    net = build_detect_net(cfg)
    res = train_detect(net, samples, cfg.epochs, cfg.seed, cfg.lr,
                       progress=lambda e, l: print(f"epoch {e + 1} loss {l:.6f}", flush=True))
    checkpoint.save(net, args.out, "detect", cfg.as_dict())
    print(f"final loss {res.losses[-1]:.6f} -> {args.out}")


def _load_detect(path):
    from .detect import DetectNetConfig, build_detect_net
    from .nn import checkpoint

    kind, conf = checkpoint.read_header(path)[:2]
    if kind != "detect":
        raise ConfigError(f"{path} holds a {kind!r} model, expected 'detect'")
    net = build_detect_net(DetectNetConfig.from_dict(conf))
    checkpoint.load_into(net, path)
    return net


def cmd_detect_infer(args):
    from .detect import postprocess, sliding_window_inference, write_centroids
    from .volume import Volume, write_volume

    net = _load_detect(args.model)
    vol = _vol(args.input)
    det_p, mask_p = sliding_window_inference(net, vol.data, net.cfg.input_size)
    res = postprocess(det_p, mask_p, args.threshold, args.T)
    out = Path(args.out_dir)
    write_volume(Volume.probability(det_p), out / "det_prob")
    write_volume(Volume.probability(mask_p), out / "mask_prob")
    write_volume(Volume.binary(res.detection), out / "det")
    write_volume(Volume.binary(res.mask), out / "mask")
    write_centroids(out / "centroids.txt", res.centroids)
    print(f"{len(res.centroids)} centroids -> {out}")


# --- instance --------------------------------------------------------------------

def _phantoms_from_manifest(path):
    from .phantom import read_manifest

    path = Path(path)
    rows = read_manifest(path)
    if rows and len(rows[0]) < 4:
        alt = path.parent / "phantoms.tsv"
        if not alt.exists():
            raise ConfigError(f"{path}: need rows with labels volumes (or a sibling phantoms.tsv)")
        rows = read_manifest(alt)
    phantoms = []
    for row in rows:
        mask = _vol(row[1]).data != 0
        det = _vol(row[2]).data != 0
        labels = _vol(row[3]).data
        n = int(labels.max(initial=0))
        centers = ndimage.center_of_mass(det, labels, np.arange(1, n + 1)) if n else []
        nuclei = [SimpleNamespace(center=tuple(int(v) for v in np.floor(np.asarray(c) + 0.5)))
                  for c in centers]
        phantoms.append(SimpleNamespace(mask=mask, labels=labels, nuclei=nuclei))
    return phantoms


def cmd_instance_train(args):
    from .instance import InstanceNetConfig, build_instance_net, train_instance, training_patches
    from .nn import checkpoint

    dil = tuple(int(v) for v in args.dilations.split(",")) if args.dilations else None
    cfg = InstanceNetConfig(patch=args.P, dilations=dil, width=args.width, lr=args.lr,
                            patches=args.patches, epochs=args.epochs, batch=args.batch, seed=args.seed)
    xs, ys = training_patches(_phantoms_from_manifest(args.data), cfg.patches, cfg.patch, cfg.seed)
    net = build_instance_net(cfg)
    res = train_instance(net, xs, ys, cfg.epochs, cfg.seed, cfg.lr, cfg.batch,
                         progress=lambda e, l: print(f"epoch {e + 1} loss {l:.6f}", flush=True))
    checkpoint.save(net, args.out, "instance", cfg.as_dict())
    print(f"final loss {res.losses[-1]:.6f} -> {args.out}")


def cmd_instance_segment(args):
    from .detect import read_centroids
    from .instance import InstanceNetConfig, build_instance_net, model_predictor, segment_and_paste
    from .nn import checkpoint
    from .volume import Volume, write_volume

    kind, conf = checkpoint.read_header(args.model)[:2]
    if kind != "instance":
        raise ConfigError(f"{args.model} holds a {kind!r} model, expected 'instance'")
    cfg = InstanceNetConfig.from_dict(conf)
    net = build_instance_net(cfg)
    checkpoint.load_into(net, args.model)
    mask = _vol(args.mask).data != 0
    res = segment_and_paste(model_predictor(net), mask, read_centroids(args.centroids), cfg.patch)
    write_volume(Volume.labels(res.labels), args.out)
    print(f"labels={res.count} empty={res.empty} conflicts={res.conflicts}")


# --- baseline / eval / misc ---------------------------------------------------------

def cmd_baseline_watershed(args):
    from .volume import Volume, write_volume
    from .watershed import WatershedConfig, watershed_segment

    labels = watershed_segment(_vol(args.input).data, WatershedConfig(threshold=args.threshold))
    write_volume(Volume.labels(labels), args.out)
    print(f"{int(labels.max(initial=0))} labels -> {args.out}")


def cmd_eval_score(args):
    from .evaluate import evaluate
    from .volume import Region

    region = Region.from_text(args.region) if args.region else None
    rep = evaluate(_vol(args.seg).data, _vol(args.gt).data, region, args.min_voxels)
    text = rep.to_text()
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(text)
    print(rep.to_text(with_table=False), end="")


def cmd_pipeline(args):
    from .config import load_kv, pipeline_config_from
    from .pipeline import run_pipeline

    cfg = pipeline_config_from(load_kv(args.config), Path(args.config).parent)
    if args.out_dir:
        cfg.out_dir = args.out_dir
    if args.no_intermediates:
        cfg.intermediates = False
    res = run_pipeline(cfg, train=args.train, oracle=args.oracle,
                       progress=lambda net, e, l: print(f"{net} epoch {e + 1} loss {l:.6f}", flush=True))
    print(res.report.to_text(with_table=False), end="")
    if res.baseline is not None:
        print("baseline " + " ".join(res.baseline.to_text(with_table=False).split()))
    print(f"-> {cfg.out_dir}")


def cmd_version(args):
    import scipy

    print(f"nucleus3d {__version__}")
    print(f"backend {kernels.BACKEND}")
    print(f"numpy {np.__version__}")
    print(f"scipy {scipy.__version__}")


def cmd_config_validate(args):
    from .config import validate

    problems = validate(args.config, args.kind)
    if problems:
        for p in problems:
            print(f"invalid: {p}", file=sys.stderr)
        return EXIT_CONFIG
    print(f"{args.config}: ok")
    return EXIT_OK


def cmd_export_slices(args):
    from .volume import export_slices

    paths = export_slices(_vol(args.input), args.out_dir, args.axis)
    print(f"{len(paths)} slices -> {args.out_dir}")


def build_parser():
    p = argparse.ArgumentParser(prog="nucleus3d", description="3D nuclei instance segmentation toolkit")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    ph = sub.add_parser("phantom", help="synthetic phantoms").add_subparsers(dest="action", required=True)
    g = ph.add_parser("generate", help="one phantom (syn, mask, det, labels)")
    g.add_argument("--config", required=True, help="flat key=value phantom config")
    g.add_argument("--out", required=True, help="output directory")
    g.add_argument("--seed", type=int, help="override the config seed")
    g.set_defaults(func=cmd_phantom_generate)
    g = ph.add_parser("training-set", help="COUNT phantoms plus their tiles and manifests")
    g.add_argument("--config", required=True)
    g.add_argument("--out", required=True)
    g.add_argument("--count", type=int, default=20)
    g.add_argument("--split-to", type=int, default=64, help="tile edge length (0: no tiles)")
    g.set_defaults(func=cmd_phantom_training_set)

    de = sub.add_parser("detect", help="first network").add_subparsers(dest="action", required=True)
    g = de.add_parser("train", help="train on a tile manifest")
    g.add_argument("--data", required=True, help="manifest.tsv of (syn, mask, det) tiles")
    g.add_argument("--epochs", type=int, default=10)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--widths", default="32,64,128", help="channel width per level")
    g.add_argument("--lr", type=float, default=0.001)
    g.add_argument("--out", required=True, help="checkpoint path")
    g.set_defaults(func=cmd_detect_train)
    g = de.add_parser("infer", help="sliding-window inference and post-processing")
    g.add_argument("--model", required=True)
    g.add_argument("--in", dest="input", required=True, help="u8 volume")
    g.add_argument("--T", type=int, default=10, help="minimum detection component size")
    g.add_argument("--threshold", type=float, default=0.5)
    g.add_argument("--out-dir", required=True)
    g.set_defaults(func=cmd_detect_infer)

    ins = sub.add_parser("instance", help="second network").add_subparsers(dest="action", required=True)
    g = ins.add_parser("train", help="train on ground-truth patches")
    g.add_argument("--data", required=True, help="phantoms.tsv (or a manifest next to one)")
    g.add_argument("--patches", type=int, default=300)
    g.add_argument("--P", type=int, default=32, choices=(16, 32), help="patch edge length")
    g.add_argument("--dilations", help="comma-separated dilation factors (default by P)")
    g.add_argument("--width", type=int, default=64)
    g.add_argument("--epochs", type=int, default=20)
    g.add_argument("--batch", type=int, default=4)
    g.add_argument("--lr", type=float, default=0.001)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_instance_train)
    g = ins.add_parser("segment", help="segment each centroid and paste labels")
    g.add_argument("--model", required=True)
    g.add_argument("--mask", required=True)
    g.add_argument("--centroids", required=True, help="text file, one 'x y z' per line")
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_instance_segment)

    bl = sub.add_parser("baseline", help="comparison methods").add_subparsers(dest="action", required=True)
    g = bl.add_parser("watershed", help="threshold + distance-transform watershed")
    g.add_argument("--in", dest="input", required=True)
    g.add_argument("--threshold", type=int, default=64)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_baseline_watershed)

    ev = sub.add_parser("eval", help="object-wise evaluation").add_subparsers(dest="action", required=True)
    g = ev.add_parser("score", help="match seg against gt and report P/R/F1")
    g.add_argument("--seg", required=True)
    g.add_argument("--gt", required=True)
    g.add_argument("--region", help="1-based inclusive qi:qf,ri:rf,pi:pf")
    g.add_argument("--min-voxels", type=int, default=50)
    g.add_argument("--out", help="report file")
    g.set_defaults(func=cmd_eval_score)

    g = sub.add_parser("pipeline", help="generate, detect, segment and evaluate")
    g.add_argument("--config", required=True)
    g.add_argument("--train", action="store_true", help="train both networks first")
    g.add_argument("--oracle", action="store_true", help="use ground truth in place of both networks")
    g.add_argument("--out-dir", help="override out_dir")
    g.add_argument("--no-intermediates", action="store_true", help="only write labels and reports")
    g.set_defaults(func=cmd_pipeline)

    g = sub.add_parser("version", help="print build metadata")
    g.set_defaults(func=cmd_version)

    g = sub.add_parser("config-validate", help="check a config file without running it")
    g.add_argument("config")
    g.add_argument("--kind", choices=("phantom", "pipeline"), help="default: inferred from the keys")
    g.set_defaults(func=cmd_config_validate)

    g = sub.add_parser("export-slices", help="PNG slices of a volume")
    g.add_argument("--in", dest="input", required=True)
    g.add_argument("--axis", choices=("x", "y", "z"), default="z")
    g.add_argument("--out-dir", required=True)
    g.set_defaults(func=cmd_export_slices)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args) or EXIT_OK
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (Nucleus3DError, OSError, ValueError, IndexError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
