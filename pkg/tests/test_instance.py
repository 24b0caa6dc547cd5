import numpy as np
import pytest

from nucleus3d.errors import ConfigError
from nucleus3d.instance import (InstanceNetConfig, build_instance_net, extract_patch,
                                keep_center_component, model_predictor, paste_patch,
                                receptive_field, segment_and_paste, train_instance,
                                training_patches)
from nucleus3d.nn import Tensor, no_grad
from nucleus3d.phantom import NucleusSpec, Phantom, PhantomConfig, generate_phantom, voxelize


def test_default_dilations_and_receptive_field():
    assert InstanceNetConfig().dilations == (1, 2, 4, 8, 1)
    assert InstanceNetConfig(patch=16).dilations == (1, 2, 4, 1)
    assert receptive_field((1, 2, 4, 8, 1)) == 33 and receptive_field((1, 2, 4, 1)) == 17


@pytest.mark.parametrize("kw", [dict(patch=32, dilations=(1, 2, 4, 8)),    # rf 31
                                dict(patch=16, dilations=(1, 2, 4)),       # rf 15
                                dict(patch=24), dict(patch=15), dict(width=0)])
def test_config_errors(kw):
    with pytest.raises(ConfigError):
        InstanceNetConfig(**kw)


def test_config_dict_roundtrip():
    cfg = InstanceNetConfig(patch=16, width=8, epochs=3, seed=2)
    assert InstanceNetConfig.from_dict({k: str(v) for k, v in cfg.as_dict().items()}) == cfg


@pytest.mark.parametrize("patch,support", [(32, 33), (16, 17)])
def test_impulse_response_support(patch, support):
    net = build_instance_net(InstanceNetConfig(patch=patch, width=2)).eval()
    for name, p in net.named_parameters():
        if name.endswith("conv.weight"):
            p.data[...] = 1.0
    n = 41
    x = np.zeros((1, 1, n, n, n))
    x[0, 0, n // 2, n // 2, n // 2] = 1.0
    h = Tensor(x)
    with no_grad():
        for i in range(len(net.cfg.dilations)):
            h = getattr(net, f"conv{i}")(h)
    nz = np.argwhere(h.data[0, 0] > 1e-12)
    assert (nz.max(axis=0) - nz.min(axis=0) + 1).tolist() == [support] * 3


@pytest.mark.parametrize("patch", [32, 16])
def test_output_shape(patch):
    net = build_instance_net(InstanceNetConfig(patch=patch, width=2)).eval()
    with no_grad():
        y = net(Tensor(np.ones((2, 1, patch, patch, patch))))
    assert y.shape == (2, 1, patch, patch, patch)


def test_extract_constant_field():
    assert extract_patch(np.ones((40, 40, 40), bool), (20, 20, 20), 16).all()


def test_extract_at_corner_zero_fills():
    vol = np.arange(1, 10 * 10 * 10 + 1).reshape(10, 10, 10)
    patch = extract_patch(vol, (0, 0, 0), 8)
    assert not patch[:4].any() and not patch[:, :4].any() and not patch[:, :, :4].any()
    assert np.array_equal(patch[4:, 4:, 4:], vol[:4, :4, :4])


def test_extract_index_mapping():
    vol = np.random.default_rng(0).random((20, 21, 22))
    c = (9.5, 10.49, 3.0)                   # rounds to (10, 10, 3)
    patch = extract_patch(vol, c, 8)
    for p in [(0, 0, 0), (7, 7, 7), (4, 4, 4), (3, 5, 6)]:
        v = np.array([10, 10, 3]) - 4 + np.array(p)
        expect = vol[tuple(v)] if (v >= 0).all() else 0
        assert patch[p] == expect


def test_extract_then_paste_is_identity():
    rng = np.random.default_rng(1)
    vol = rng.random((12, 12, 12))
    for c in [(6, 6, 6), (0, 11, 3), (11, 0, 11)]:
        out = np.full_like(vol, -1.0)
        paste_patch(out, extract_patch(vol, c, 8), c)
        written = out != -1.0
        assert written.any() and np.array_equal(out[written], vol[written])


def _two_touching():
    dims = (24, 24, 24)
    a = NucleusSpec(0, "sphere", (8, 12, 12), (4.0,) * 3)
    b = NucleusSpec(1, "sphere", (16, 12, 12), (4.0,) * 3)
    ma, mb = voxelize(a, dims), voxelize(b, dims) & ~voxelize(a, dims)
    labels = ma.astype(np.uint32) + 2 * mb.astype(np.uint32)
    return Phantom(mask=labels > 0, labels=labels, det=None, nuclei=[a, b]), ma, mb


def test_training_target_isolated_nucleus_equals_input():
    ph = generate_phantom(PhantomConfig(dims=(32, 32, 32), n=1, seed=0))
    xs, ys = training_patches([ph], 1, 16, 0)
    assert np.array_equal(xs[0], ys[0]) and xs[0].any()


def test_training_target_erases_neighbour():
    ph, ma, mb = _two_touching()
    xs, ys = training_patches([ph], 2, 16, 0)
    for k, own, other in [(0, ma, mb), (1, mb, ma)]:
        c = ph.nuclei[k].center
        assert np.array_equal(ys[k], extract_patch(own, c, 16))
        assert np.array_equal(xs[k] - ys[k], extract_patch(other, c, 16).astype(float))
        assert (xs[k] - ys[k]).any()


def test_training_insufficient_nuclei():
    ph, _, _ = _two_touching()
    with pytest.raises(ConfigError):
        training_patches([ph], 3, 16, 0)


def test_training_patches_deterministic():
    phs = [generate_phantom(PhantomConfig(dims=(32, 32, 32), n=30, seed=s)) for s in range(2)]
    a = training_patches(phs, 10, 16, 5)
    b = training_patches(phs, 10, 16, 5)
    assert all(np.array_equal(u, v) for u, v in zip(a, b))


def test_train_instance_reduces_loss():
    ph, _, _ = _two_touching()
    xs, ys = training_patches([ph], 2, 16, 0)
    net = build_instance_net(InstanceNetConfig(patch=16, width=4, seed=0))
    res = train_instance(net, xs, ys, 30, 0, lr=0.01, batch=2)
    assert res.losses[-1] < 0.5 * res.losses[0]
    with pytest.raises(ConfigError):
        train_instance(net, np.zeros((0, 16, 16, 16)), np.zeros((0, 16, 16, 16)), 1, 0)


def test_keep_center_component():
    p = np.zeros((8, 8, 8), bool)
    p[3:6, 3:6, 3:6] = True
    p[0, 0, 0] = True
    assert keep_center_component(p).sum() == 27
    q = np.zeros((8, 8, 8), bool)
    q[0, 0, 0] = True
    q[6, 4, 4] = True                       # nearest to center (4, 4, 4)
    kept = keep_center_component(q)
    assert kept.sum() == 1 and kept[6, 4, 4]
    assert not keep_center_component(np.zeros((8, 8, 8), bool)).any()


def identity(patches):
    return np.asarray(patches, dtype=float)


def oracle_for(gt, centroids, P):
    def predict(patches):
        out = []
        for c in centroids:
            lab = extract_patch(gt, c, P)
            out.append((lab == lab[P // 2, P // 2, P // 2]) & (lab > 0))
        return np.asarray(out, float)
    return predict


def test_single_nucleus_gets_one_label():
    m = voxelize(NucleusSpec(0, "sphere", (10, 10, 10), (4.0,) * 3), (20, 20, 20))
    res = segment_and_paste(identity, m, [(10, 10, 10)], 16)
    assert res.count == 1 and np.array_equal(res.labels == 1, m)


def test_two_touching_nuclei_get_two_labels():
    ph, ma, mb = _two_touching()
    cents = [s.center for s in ph.nuclei]
    res = segment_and_paste(oracle_for(ph.labels, cents, 16), ph.mask, cents, 16)
    assert res.count == 2 and res.conflicts == 0
    assert np.array_equal(res.labels == 1, ma) and np.array_equal(res.labels == 2, mb)
    assert not (res.labels.astype(bool) & ~ph.mask).any()


def test_identity_predictor_counts_conflicts():
    ph, ma, mb = _two_touching()
    res = segment_and_paste(identity, ph.mask, [s.center for s in ph.nuclei], 16)
    # the first patch claims the whole mask it sees; the second only keeps what is left
    assert res.conflicts > 0 and res.records[1].conflicts == res.conflicts
    assert len(np.unique(res.labels)) == 3


def test_zero_centroids():
    res = segment_and_paste(identity, np.ones((10, 10, 10), bool), np.zeros((0, 3)), 16)
    assert res.count == 0 and not res.labels.any() and res.records == []


def test_empty_prediction_is_logged_not_labelled():
    m = np.zeros((20, 20, 20), bool)
    m[2:5, 2:5, 2:5] = True
    m[14:17, 14:17, 14:17] = True
    cents = [(3, 3, 3), (10, 10, 10), (15, 15, 15)]
    res = segment_and_paste(lambda p: np.zeros(np.shape(p)), m, cents, 8)
    assert res.empty == 3 and res.count == 0
    res = segment_and_paste(identity, m, cents, 8)
    assert res.empty == 1 and res.count == 2 and res.records[1].label == 0
    assert sorted(np.unique(res.labels)) == [0, 1, 2]


def test_paste_invariants_random():
    rng = np.random.default_rng(3)
    for seed in range(4):
        ph = generate_phantom(PhantomConfig(dims=(40, 40, 40), n=60, seed=seed))
        cents = np.array([s.center for s in ph.nuclei], float) + rng.uniform(-0.5, 0.5, (len(ph.nuclei), 3))
        noisy = lambda p: np.clip(np.asarray(p, float) * rng.uniform(0.3, 1.2, np.shape(p)), 0, 1)
        res = segment_and_paste(noisy, ph.mask, cents, 16)
        assert not (res.labels.astype(bool) & ~ph.mask).any()
        assert res.count == len(cents) - res.empty
        assert sorted(np.unique(res.labels))[1:] == list(range(1, res.count + 1))
        for rec in res.records:
            if rec.label:
                pts = np.argwhere(res.labels == rec.label)
                assert (pts >= np.array(rec.origin)).all() and (pts < np.array(rec.origin) + 16).all()
                assert len(pts) == rec.voxels


def test_model_predictor_batches():
    net = build_instance_net(InstanceNetConfig(patch=16, width=2))
    patches = (np.random.default_rng(0).random((5, 16, 16, 16)) < 0.5)
    a = model_predictor(net, batch=2)(patches)
    b = model_predictor(net, batch=5)(patches)
    assert a.shape == (5, 16, 16, 16)
    np.testing.assert_allclose(a, b, atol=1e-12)
