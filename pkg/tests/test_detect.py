import numpy as np
import pytest

from nucleus3d.detect import (DetectNetConfig, build_detect_net, expected_parameter_count,
                              postprocess, read_centroids, sliding_window_inference, to_input,
                              train_detect, window_positions, window_starts, write_centroids)
from nucleus3d.errors import ConfigError, DimensionError
from nucleus3d.nn import Tensor, no_grad
from nucleus3d.phantom import PhantomConfig, generate_phantom, make_phantom_volumes


@pytest.fixture(scope="module")
def tiny_triple():
    syn, ph = make_phantom_volumes(PhantomConfig(dims=(32, 32, 32), n=30, r_min=3, r_max=4, seed=3))
    sl = (slice(0, 16),) * 3
    return syn[sl], ph.mask[sl], ph.det[sl]


def test_parameter_count_closed_form():
    for widths in [(32, 64, 128), (8, 16, 32), (4, 8)]:
        net = build_detect_net(DetectNetConfig(widths=widths))
        assert net.num_parameters() == expected_parameter_count(widths)
    # hand count for widths (2,): two 3^3 convs with BN, two 1^3 heads
    assert expected_parameter_count((2,)) == (27 * 2 + 2 + 4) + (2 * 2 * 27 + 2 + 4) + 2 * 3


def test_output_shapes_and_range():
    net = build_detect_net(DetectNetConfig(widths=(2, 4, 8), seed=1)).eval()
    with no_grad():
        d, m = net(to_input(np.full((64, 64, 64), 128, np.uint8)))
    assert d.shape == m.shape == (1, 1, 64, 64, 64)
    for t in (d, m):
        assert np.isfinite(t.data).all() and (t.data > 0).all() and (t.data < 1).all()


def test_indivisible_input():
    with pytest.raises(ConfigError):
        DetectNetConfig(widths=(2, 4, 8), input_size=62)
    net = build_detect_net(DetectNetConfig(widths=(2, 4, 8)))
    with pytest.raises(DimensionError):
        net(Tensor(np.zeros((1, 1, 16, 16, 18))))


def test_empty_training_set():
    with pytest.raises(ConfigError):
        train_detect(build_detect_net(DetectNetConfig(widths=(2, 4))), [], 1, 0)


def test_config_dict_roundtrip():
    cfg = DetectNetConfig(widths=(8, 16, 32), epochs=3, seed=9)
    assert DetectNetConfig.from_dict({k: str(v) for k, v in cfg.as_dict().items()}) == cfg


def test_single_sample_overfit(tiny_triple):
    # reduced-scale stand-in for the 64^3 overfit run: 16^3 triple, widths (8, 16)
    net = build_detect_net(DetectNetConfig(widths=(8, 16), input_size=16, seed=0))
    losses = train_detect(net, [tiny_triple], 200, 0, lr=0.01).losses
    assert len(losses) == 200
    assert losses[-1] < 0.02
    assert np.diff(losses[10:]).max() < 1e-3


def test_training_is_deterministic(tiny_triple):
    runs = []
    for _ in range(2):
        net = build_detect_net(DetectNetConfig(widths=(2, 4), input_size=16, seed=4))
        runs.append(train_detect(net, [tiny_triple, tiny_triple], 3, 7).losses)
    assert runs[0] == runs[1]


def test_window_starts():
    assert window_starts(64) == [0]
    assert window_starts(128) == [0, 64]
    assert window_starts(100) == [0, 36]
    assert window_starts(150) == [0, 64, 86]
    with pytest.raises(DimensionError):
        window_starts(63)


@pytest.mark.parametrize("n", [64, 100, 128, 150])
def test_tiling_covers_every_voxel(n):
    cover = np.zeros((n, n, n), np.int32)
    pos = window_positions((n, n, n))
    for x, y, z in pos:
        cover[x:x + 64, y:y + 64, z:z + 64] += 1
    assert (cover >= 1).all()
    assert max(p[0] for p in pos) + 64 == n
    if n % 64 == 0:
        assert (cover == 1).all() and len(pos) == (n // 64) ** 3


def test_tiling_rejects_small_axis():
    with pytest.raises(DimensionError, match="y"):
        window_positions((64, 50, 64))


def test_later_window_wins_overlap():
    vol = np.zeros((100, 64, 64), np.uint8)
    calls = []

    def predict(tile):
        calls.append(1)
        v = np.full(tile.shape, float(len(calls)))
        return v, v

    det, _ = sliding_window_inference(None, vol, predict=predict)
    assert len(calls) == 2
    assert (det[:36] == 1).all() and (det[36:] == 2).all()


def test_sliding_window_equals_per_octant():
    net = build_detect_net(DetectNetConfig(widths=(2, 4), input_size=16, seed=2)).eval()
    vol = np.random.default_rng(0).integers(0, 256, (32, 32, 32)).astype(np.uint8)
    det, mask = sliding_window_inference(net, vol, window=16)
    for x in (0, 16):
        for y in (0, 16):
            for z in (0, 16):
                sl = (slice(x, x + 16), slice(y, y + 16), slice(z, z + 16))
                with no_grad():
                    d, m = net(to_input(vol[sl]))
                assert np.array_equal(det[sl], d.data[0, 0]) and np.array_equal(mask[sl], m.data[0, 0])


def test_postprocess_gating():
    det = np.zeros((10, 10, 10))
    mask = np.zeros((10, 10, 10))
    det[2:5, 2:5, 2:5] = 0.9
    mask[2:5, 2:5, 2:4] = 0.9
    res = postprocess(det, mask, T=0)
    assert res.detection.sum() == 18 and not (res.detection & ~res.mask).any()


def test_postprocess_size_filter():
    det = np.zeros((20, 20, 20))
    det[0:3, 0:3, 0] = 1.0            # 9 voxels
    det[10:13, 10:15, 10] = 1.0       # 15 voxels
    res = postprocess(det, np.ones_like(det), T=10)
    assert len(res.centroids) == 1
    np.testing.assert_allclose(res.centroids[0], [11, 12, 10])


def test_postprocess_empty():
    res = postprocess(np.zeros((8, 8, 8)), np.zeros((8, 8, 8)))
    assert res.centroids.shape == (0, 3) and not res.mask.any()


def test_postprocess_shape_mismatch():
    with pytest.raises(DimensionError):
        postprocess(np.zeros((8, 8, 8)), np.zeros((8, 8, 9)))


def test_perfect_model_recovers_centers():
    for seed in range(3):
        ph = generate_phantom(PhantomConfig(dims=(64, 64, 64), n=120, seed=seed))
        res = postprocess(ph.det.astype(float), ph.mask.astype(float), T=10)
        centers = np.array([s.center for s in ph.nuclei], float)
        assert len(res.centroids) == len(centers)
        d = np.abs(res.centroids[:, None] - centers[None]).max(axis=2)
        assert (d.min(axis=1) <= 1).all() and len(set(d.argmin(axis=1))) == len(centers)


def test_centroid_file_roundtrip(tmp_path):
    c = np.array([[1.5, 2.25, 3.0], [0.1, 1 / 3, 7.0]])
    write_centroids(tmp_path / "c.txt", c)
    assert np.array_equal(read_centroids(tmp_path / "c.txt"), c)
    write_centroids(tmp_path / "e.txt", np.zeros((0, 3)))
    assert read_centroids(tmp_path / "e.txt").shape == (0, 3)
