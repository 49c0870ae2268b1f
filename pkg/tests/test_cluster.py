import numpy as np
import pytest

from ccsnet.ccs import estimate_all_c, eval_ccs, sample_planes
from ccsnet.cluster import ClusterConfig, _sq_dists, kmeans, plane_descriptors, reduce_ccs, sweep_k, write_sweep_csv

from conftest import blob_data, tiny_net


def _model(n=40):
    net = tiny_net(0, (4, 6, 3))
    anchors = np.random.default_rng(0).standard_normal((n, 4))
    return sample_planes(net, anchors, estimate_all_c(net, anchors).c)


def test_three_blobs_recovered():
    rng = np.random.default_rng(0)
    centres = np.array([[0.0, 0.0], [10.0, 0.0], [0.0, 10.0]])
    pts = np.repeat(centres, 30, axis=0) + 0.1 * rng.standard_normal((90, 2))
    res = kmeans(pts, ClusterConfig(3, restarts=5))
    got = sorted(map(tuple, np.round(res.centroids)))
    assert got == sorted(map(tuple, centres))
    assert len(set(res.assignments[:30])) == 1


def test_k1_is_the_mean_and_kn_is_zero():
    pts = np.random.default_rng(1).standard_normal((25, 3))
    np.testing.assert_allclose(kmeans(pts, ClusterConfig(1)).centroids[0], pts.mean(0), atol=1e-14)
    assert kmeans(pts, ClusterConfig(25, restarts=1)).inertia == 0.0
    with pytest.raises(ValueError):
        kmeans(pts, ClusterConfig(26))


def test_lloyd_history_monotone_and_assignments_optimal():
    pts = np.random.default_rng(2).standard_normal((400, 5))
    res = kmeans(pts, ClusterConfig(12, restarts=3, tolerance=0.0))
    h = np.array(res.history)
    assert np.all(np.diff(h) <= 1e-9 * h[:-1])
    d = ((pts[:, None, :] - res.centroids[None]) ** 2).sum(-1)
    np.testing.assert_array_equal(res.assignments, d.argmin(1))


def test_best_restart_is_kept_and_deterministic():
    pts = np.random.default_rng(3).standard_normal((200, 2))
    cfg = ClusterConfig(7, restarts=6, seed=4)
    a, b = kmeans(pts, cfg), kmeans(pts, cfg)
    assert a.inertia == min(a.restart_inertias)
    np.testing.assert_array_equal(a.centroids, b.centroids)


def test_duplicate_points():
    pts = np.vstack([np.zeros((10, 2)), np.ones((10, 2))])
    res = kmeans(pts, ClusterConfig(3, restarts=2))
    assert res.inertia == 0.0
    assert np.bincount(res.assignments, minlength=3).min() >= 0


def test_sq_dists_nonnegative():
    pts = np.full((3, 2), 1e8)
    assert np.all(_sq_dists(pts, (pts**2).sum(1), pts[:1]) >= 0)


def test_full_k_reduction_is_bit_identical():
    model = _model()
    red = reduce_ccs(model, ClusterConfig(40, restarts=1))
    x = np.random.default_rng(0).standard_normal((20, 4))
    for p, q in zip(model.planes, red.model.planes):
        np.testing.assert_array_equal(p.anchors, q.anchors)
        np.testing.assert_array_equal(p.values, q.values)
        np.testing.assert_array_equal(p.gradients, q.gradients)
    np.testing.assert_array_equal(eval_ccs(red.model, x), eval_ccs(model, x))


def test_single_cluster_is_the_descriptor_mean():
    model = _model()
    red = reduce_ccs(model, ClusterConfig(1))
    mean = plane_descriptors(model.planes[2]).mean(0)
    np.testing.assert_allclose(red.outputs[2].gradients[0], mean[:4], atol=1e-14)
    np.testing.assert_allclose(red.outputs[2].anchors[0], mean[5:], atol=1e-14)
    assert red.model.support_counts == [1, 1, 1]


def test_reduced_plane_offsets_are_consistent():
    model = _model()
    red = reduce_ccs(model, ClusterConfig(5, restarts=2))
    for out, planes in zip(red.outputs, red.model.planes):
        np.testing.assert_allclose(
            planes.values, out.offsets + np.einsum("kd,kd->k", out.gradients, out.anchors), atol=1e-13
        )
        assert sorted(np.unique(out.assignments)) == list(range(5))


def test_sweep_and_csv(tmp_path):
    model = _model()
    data = blob_data(30)
    rows, summary, best = sweep_k(model, data, [2, 40], ClusterConfig(2, restarts=3))
    assert [r.k for r in rows] == [2, 2, 2, 40, 40, 40]
    assert summary[1][2] == 0.0  # k = N is deterministic
    assert set(best) == {2, 40}
    write_sweep_csv(rows, summary, tmp_path / "r.csv", tmp_path / "a.csv", "prov")
    lines = (tmp_path / "a.csv").read_text().splitlines()
    assert lines[:2] == ["# prov", "k,mean_acc,std_acc"] and len(lines) == 4
    with pytest.raises(ValueError):
        reduce_ccs(model, ClusterConfig(41))


@pytest.mark.parametrize("n", [40, 5])
def test_descriptor_space_is_an_isometry(n):
    from ccsnet.cluster import DescriptorSpace

    model = _model(n)
    desc = plane_descriptors(model.planes[0])
    space = DescriptorSpace.from_planes(model.planes[0])
    assert space.basis.shape[1] <= min(n - 1, desc.shape[1])
    np.testing.assert_allclose(space.lift(space.coords), desc, atol=1e-12)
    full = ((desc[:, None] - desc[None]) ** 2).sum(-1)
    proj = ((space.coords[:, None] - space.coords[None]) ** 2).sum(-1)
    np.testing.assert_allclose(proj, full, rtol=1e-10, atol=1e-12)


def test_projected_clustering_matches_raw_descriptors():
    model = _model(60)
    red = reduce_ccs(model, ClusterConfig(6, restarts=3, seed=1))
    seeds = np.random.SeedSequence(1).generate_state(3)
    raw = kmeans(plane_descriptors(model.planes[0]), ClusterConfig(6, restarts=3, seed=int(seeds[0])))
    assert red.outputs[0].inertia == pytest.approx(raw.inertia, rel=1e-9)
