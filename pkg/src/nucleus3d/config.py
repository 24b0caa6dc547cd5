"""Flat ``key=value`` configuration files.

Blank lines and ``#`` comments are ignored. Pipeline files group settings
with dotted prefixes (``phantom.r_min``, ``detect.widths``, ...); phantom
files use the bare keys.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from pathlib import Path

from .detect import DetectNetConfig
from .errors import ConfigError
from .instance import InstanceNetConfig
from .phantom import DegradationParams, PhantomConfig
from .volume import Region

PHANTOM_REQUIRED = ("dims", "n", "r_min", "r_max", "shape_model", "seed")
PHANTOM_OPTIONAL = ("foreground_mean", "background_mean", "blur_sigma", "noise_sigma")
PIPELINE_REQUIRED = ("seed", "out_dir") + tuple(f"phantom.{k}" for k in PHANTOM_REQUIRED if k != "seed")


def parse_kv(text, source="<config>"):
    out = {}
    for no, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, val = line.partition("=")
        key, val = key.strip(), val.strip()
        if not sep or not key:
            raise ConfigError(f"{source}:{no}: expected key=value, got {raw.strip()!r}")
        if key in out:
            raise ConfigError(f"{source}:{no}: duplicate key {key!r}")
        out[key] = val
    return out


def load_kv(path):
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_kv(text, str(path))


def dump_kv(d):
    return "".join(f"{k}={v}\n" for k, v in sorted(d.items()))


def config_hash(d):
    return hashlib.sha256(dump_kv(d).encode()).hexdigest()


def _floats(text, n=None):
    vals = tuple(float(v) for v in str(text).split(","))
    if n is not None and len(vals) == 1:
        vals = vals * n
    return vals


def _ints(text, n=None):
    vals = tuple(int(v) for v in str(text).split(","))
    if n is not None and len(vals) == 1:
        vals = vals * n
    return vals


def missing_keys(d, required):
    return [k for k in required if k not in d]


def phantom_config_from(d, prefix="", seed=None) -> PhantomConfig:
    """Build a :class:`PhantomConfig` from (optionally prefixed) keys."""
    get = {k[len(prefix):]: v for k, v in d.items() if k.startswith(prefix)}
    required = [k for k in PHANTOM_REQUIRED if not (k == "seed" and seed is not None)]
    miss = missing_keys(get, required)
    if miss:
        raise ConfigError("missing keys: " + ", ".join(prefix + k for k in miss))
    unknown = set(get) - set(PHANTOM_REQUIRED) - set(PHANTOM_OPTIONAL)
    if unknown:
        raise ConfigError("unknown keys: " + ", ".join(sorted(prefix + k for k in unknown)))
    base = DegradationParams()
    try:
        deg = DegradationParams(
            foreground_mean=float(get.get("foreground_mean", base.foreground_mean)),
            background_mean=float(get.get("background_mean", base.background_mean)),
            blur_sigma=_floats(get.get("blur_sigma", "1"), 3),
            noise_sigma=float(get.get("noise_sigma", base.noise_sigma)),
        )
        return PhantomConfig(dims=_ints(get["dims"], 3), n=int(get["n"]), r_min=float(get["r_min"]),
                             r_max=float(get["r_max"]), shape_model=get["shape_model"],
                             seed=int(get["seed"]) if seed is None else seed, degradation=deg)
    except ValueError as exc:
        raise ConfigError(f"bad value: {exc}") from exc


@dataclass
class PipelineConfig:
    seed: int
    out_dir: str
    phantom: PhantomConfig
    train_count: int = 20
    detect: DetectNetConfig = field(default_factory=DetectNetConfig)
    detect_checkpoint: str | None = None
    instance: InstanceNetConfig = field(default_factory=InstanceNetConfig)
    instance_checkpoint: str | None = None
    threshold: float = 0.5
    T: int = 10
    region: Region | None = None
    min_voxels: int = 50
    baseline: bool = True
    watershed_threshold: int = 64
    export_slices: bool = True
    intermediates: bool = True
    raw: dict = field(default_factory=dict)


def _bool(v):
    v = str(v).strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {v!r}")


PIPELINE_KEYS = {
    *(f"detect.{k}" for k in ("widths", "input_size", "lr", "epochs", "checkpoint")),
    *(f"instance.{k}" for k in ("patch", "dilations", "width", "lr", "patches", "epochs", "batch",
                                "checkpoint")),
    "train.count", "postprocess.threshold", "postprocess.T", "eval.region", "eval.min_voxels",
    "baseline.enabled", "baseline.threshold",
}


def pipeline_config_from(d, base_dir=".") -> PipelineConfig:
    miss = missing_keys(d, PIPELINE_REQUIRED)
    if miss:
        raise ConfigError("missing keys: " + ", ".join(miss))
    if "phantom.seed" in d:
        raise ConfigError("phantom.seed is derived from the global seed; remove it")
    bare = {"seed", "out_dir", "export_slices", "intermediates"}
    unknown = [k for k in d if k not in bare and k not in PIPELINE_KEYS
               and not (k.startswith("phantom.") and k != "phantom.seed")]
    if unknown:
        raise ConfigError("unknown keys: " + ", ".join(sorted(unknown)))
    seed = int(d["seed"])

    def path(key):
        v = d.get(key)
        if not v:
            return None
        p = Path(v)
        return str(p if p.is_absolute() else Path(base_dir) / p)

    def sub(prefix):
        return {k[len(prefix):]: v for k, v in d.items() if k.startswith(prefix) and k != prefix + "checkpoint"}

    try:
        det = sub("detect.")
        det.setdefault("widths", ",".join(map(str, DetectNetConfig.widths)))
        cfg = PipelineConfig(
            seed=seed,
            out_dir=path("out_dir"),
            phantom=phantom_config_from(d, "phantom.", seed=0),
            train_count=int(d.get("train.count", 20)),
            detect=DetectNetConfig.from_dict(det),
            detect_checkpoint=path("detect.checkpoint"),
            instance=InstanceNetConfig.from_dict(sub("instance.")),
            instance_checkpoint=path("instance.checkpoint"),
            threshold=float(d.get("postprocess.threshold", 0.5)),
            T=int(d.get("postprocess.T", 10)),
            region=Region.from_text(d["eval.region"]) if d.get("eval.region") else None,
            min_voxels=int(d.get("eval.min_voxels", 50)),
            baseline=_bool(d.get("baseline.enabled", "1")),
            watershed_threshold=int(d.get("baseline.threshold", 64)),
            export_slices=_bool(d.get("export_slices", "1")),
            intermediates=_bool(d.get("intermediates", "1")),
            raw=dict(d),
        )
    except ValueError as exc:
        raise ConfigError(f"bad value: {exc}") from exc
    if cfg.train_count < 1:
        raise ConfigError("train.count must be >= 1")
    if cfg.region is not None:
        cfg.region.check(cfg.phantom.dims)
    return cfg


def detect_kind(d):
    return "pipeline" if any("." in k for k in d) or "out_dir" in d else "phantom"


def validate(path, kind=None):
    """Problems found in a config file (empty list when valid)."""
    try:
        d = load_kv(path)
    except ConfigError as exc:
        return [str(exc)]
    kind = kind or detect_kind(d)
    try:
        if kind == "phantom":
            phantom_config_from(d)
        else:
            pipeline_config_from(d, Path(path).parent)
    except ConfigError as exc:
        return [str(exc)]
    except IndexError as exc:   # region bounds
        return [str(exc)]
    return []
