import numpy as np
import pytest

from nucleus3d.config import ConfigError, parse_kv, pipeline_config_from
from nucleus3d.pipeline import StageError, run_pipeline, stage_seeds

BASE = """seed=2
out_dir=run
phantom.dims=64,64,64
phantom.n=150
phantom.r_min=4
phantom.r_max=6
phantom.shape_model={model}
baseline.enabled={baseline}
export_slices=0
intermediates=0
instance.patch={P}
"""


def config(tmp_path, model="sphere", P=16, baseline=0, extra=""):
    d = parse_kv(BASE.format(model=model, P=P, baseline=baseline) + extra)
    cfg = pipeline_config_from(d, tmp_path)
    cfg.out_dir = str(tmp_path / "out")
    return cfg


def test_stage_seeds_distinct_and_stable():
    a, b = stage_seeds(0), stage_seeds(0)
    assert a == b and len(set(a.values())) == 4
    assert stage_seeds(1) != a


@pytest.mark.parametrize("model,P", [("sphere", 16), ("ellipsoid", 16), ("sphere", 32)])
def test_oracle_run_is_perfect(tmp_path, model, P):
    res = run_pipeline(config(tmp_path, model, P), oracle=True)
    assert res.report.f1 == 1.0 and res.report.n_fp == res.report.n_fn == 0
    assert res.median_iou() == 1.0
    assert len(res.centroids) == res.n_true


def test_oracle_with_region_and_baseline(tmp_path):
    res = run_pipeline(config(tmp_path, baseline=1, extra="eval.region=1:64,1:64,17:48\n"), oracle=True)
    assert res.report.f1 == 1.0
    assert res.baseline is not None and res.baseline_labels >= 1
    assert set(res.timings) >= {"generate", "postprocess", "instance", "evaluate", "baseline"}


def test_missing_checkpoint_names_stage(tmp_path):
    with pytest.raises(StageError) as exc:
        run_pipeline(config(tmp_path))
    assert exc.value.stage == "load-models"


def test_bad_pipeline_keys(tmp_path):
    with pytest.raises(ConfigError):
        pipeline_config_from(parse_kv(BASE.format(model="sphere", P=16, baseline=0) + "detect.width=3\n"))
    with pytest.raises(ConfigError):
        pipeline_config_from(parse_kv("seed=0\nout_dir=x\n"))
