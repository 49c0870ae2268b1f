import numpy as np
import pytest

from ccsnet.ccs import sample_planes
from ccsnet.cluster import ClusterConfig, reduce_ccs
from ccsnet.features import FeatureMap, export_maps, export_pgm, extract_features, read_pgm, to_pixels
from ccsnet.nn import Dense, Network


def test_pixel_endpoints():
    assert to_pixels(np.array([-2.0, 0.0, 2.0])).tolist() == [0, 128, 255]
    assert to_pixels(np.zeros(3)).tolist() == [128, 128, 128]
    assert to_pixels(np.array([1.0, -4.0]), scale=2.0).tolist() == [192, 0]


def test_sign_symmetry_and_scale_invariance():
    v = np.random.default_rng(0).standard_normal(200)
    p, n = to_pixels(v).astype(int), to_pixels(-v).astype(int)
    assert np.all(np.abs(n - (255 - p)) <= 1)
    # exact mirror about 128 away from the saturated top end
    assert np.all((p + n == 256) | (p == 255) | (n == 255))
    np.testing.assert_array_equal(to_pixels(v), to_pixels(7.5 * v))


def test_pgm_roundtrip(tmp_path):
    g = np.linspace(-1, 1, 12)
    fmap = FeatureMap(0, 3, g, 4, 3)
    path = export_pgm(fmap, tmp_path / fmap.filename())
    assert path.name == "feat_out0_cluster3.pgm"
    assert path.read_bytes().startswith(b"P5\n4 3\n255\n")
    np.testing.assert_array_equal(read_pgm(path), to_pixels(g).reshape(3, 4))


def test_shape_checks():
    with pytest.raises(ValueError):
        FeatureMap(0, 0, np.zeros(10), 3, 3)
    with pytest.raises(ValueError):
        to_pixels(np.array([np.nan]))


def test_linear_network_gives_identical_maps(tmp_path):
    w = np.random.default_rng(0).standard_normal((2, 16))
    net = Network([Dense(w, np.zeros(2))])
    anchors = np.random.default_rng(1).standard_normal((30, 16))
    red = reduce_ccs(sample_planes(net, anchors, 0.0), ClusterConfig(4, restarts=1))
    maps = extract_features(red, 1)
    assert len(maps) == 4
    for m in maps:
        np.testing.assert_allclose(m.gradient, w[1], atol=1e-12)
    paths = export_maps(maps, tmp_path, global_norm=True, csv_dump=True)
    images = [read_pgm(p) for p in paths]
    assert all(np.array_equal(images[0], im) for im in images)
    assert (tmp_path / "feat_out1_cluster0.csv").exists()


def test_select_subset_is_seeded():
    w = np.random.default_rng(0).standard_normal((1, 9))
    net = Network([Dense(w, np.zeros(1), "sigmoid"), Dense(np.ones((1, 1)), np.zeros(1))])
    anchors = np.random.default_rng(1).standard_normal((20, 9))
    red = reduce_ccs(sample_planes(net, anchors, 0.1), ClusterConfig(6, restarts=1))
    a = [m.cluster_index for m in extract_features(red, 0, select=3, seed=2)]
    assert a == [m.cluster_index for m in extract_features(red, 0, select=3, seed=2)]
    assert len(a) == 3 and a == sorted(a)
