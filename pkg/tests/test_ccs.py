import numpy as np
import pytest

from ccsnet.ccs import (
    C_MARGIN,
    CCSModel,
    OutputPlanes,
    ccs_accuracy,
    estimate_all_c,
    estimate_c,
    eval_ccs,
    eval_parts,
    hull_violation,
    load_ccs,
    sample_planes,
    save_ccs,
)
from ccsnet.errors import FormatError, LengthError, ShapeError
from ccsnet.nn import Dense, Network, forward

from conftest import blob_data, tiny_net


def _model(seed=0, n=60):
    net = tiny_net(seed, (4, 6, 3))
    anchors = np.random.default_rng(seed).standard_normal((n, 4))
    rep = estimate_all_c(net, anchors)
    return net, anchors, sample_planes(net, anchors, rep.c)


def test_exact_at_anchors():
    net, anchors, model = _model()
    np.testing.assert_allclose(eval_ccs(model, anchors), forward(net, anchors), rtol=1e-12, atol=1e-13)


def test_winners_at_anchor_are_the_anchor_plane():
    net, anchors, model = _model(1)
    _, i, j = eval_ccs(model, anchors[:5], return_planes=True)
    np.testing.assert_array_equal(i[:, 0], np.arange(5))
    np.testing.assert_array_equal(j[:, 0], np.arange(5))


def test_linear_net_is_reproduced_everywhere():
    rng = np.random.default_rng(0)
    net = Network([Dense(rng.standard_normal((2, 3)), rng.standard_normal(2))])
    anchors = rng.standard_normal((5, 3))
    rep = estimate_all_c(net, anchors)
    np.testing.assert_array_equal(rep.c, 0.0)
    model = sample_planes(net, anchors, rep.c)
    x = 10 * rng.standard_normal((50, 3))
    np.testing.assert_allclose(eval_ccs(model, x), forward(net, x), atol=1e-12)


def test_single_and_duplicate_anchors():
    net = tiny_net(2)
    a = np.random.default_rng(0).standard_normal((1, 4))
    one = sample_planes(net, a, 0.5)
    x = np.random.default_rng(1).standard_normal((10, 4))
    # with one support the convex and concave parts share it; the quadratic cancels
    np.testing.assert_allclose(
        eval_ccs(one, x)[:, 0],
        forward(net, a[0])[0] + (x - a[0]) @ one.planes[0].gradients[0],
        atol=1e-12,
    )
    dup = sample_planes(net, np.vstack([a, a]), 0.5)
    np.testing.assert_allclose(eval_ccs(dup, x), eval_ccs(one, x), atol=1e-12)


def test_parts_combine():
    _, anchors, model = _model(3)
    x = np.random.default_rng(2).standard_normal((8, 4))
    convex, concave = eval_parts(model, x, 1)
    assert np.all(convex >= concave - 1e-12)
    np.testing.assert_allclose(0.5 * (convex + concave), eval_ccs(model, x)[:, 1], atol=1e-12)


def test_scalar_sigmoid_curvature():
    net = Network([Dense(np.eye(1), np.zeros(1), "sigmoid"), Dense(np.eye(1), np.zeros(1))])
    anchors = np.linspace(-4, 4, 4001)[:, None]
    # max |s''| = 1 / (6 sqrt 3), attained at ln(2 +- sqrt 3)
    assert estimate_c(net, anchors, 0) == pytest.approx((1 + C_MARGIN) / (6 * np.sqrt(3)), rel=1e-6)


def test_curvature_scales_with_output_weight():
    net = tiny_net(4)
    anchors = np.random.default_rng(0).standard_normal((20, 4))
    c1 = estimate_c(net, anchors, 0, tol=1e-10)
    net.layers[-1].weights[0] *= 3.0
    assert estimate_c(net, anchors, 0, tol=1e-10) == pytest.approx(3 * c1, rel=1e-7)


def test_anchor_permutation_invariance():
    net, anchors, model = _model(5)
    perm = np.random.default_rng(0).permutation(len(anchors))
    other = sample_planes(net, anchors[perm], model.c)
    x = np.random.default_rng(3).standard_normal((30, 4))
    np.testing.assert_allclose(eval_ccs(other, x), eval_ccs(model, x), atol=1e-13)


def test_hull_property_holds_with_estimated_c():
    _, anchors, model = _model(6, n=80)
    rng = np.random.default_rng(0)
    pairs = rng.integers(0, 80, size=(500, 2))
    for k in range(model.output_dim):
        assert hull_violation(model, k, pairs) <= 1e-8


def test_hull_property_fails_without_curvature():
    net, anchors, model = _model(7, n=80)
    flat = sample_planes(net, anchors, 0.0)
    pairs = np.array([(i, j) for i in range(80) for j in range(80)])
    assert max(hull_violation(flat, k, pairs) for k in range(3)) > 1e-6


def test_accuracy_matches_network_on_anchors():
    data = blob_data(60)
    net = tiny_net(0, (4, 5, 3))
    model = sample_planes(net, data.inputs, estimate_all_c(net, data.inputs).c)
    assert ccs_accuracy(model, data) == pytest.approx(
        float(np.mean(forward(net, data.inputs).argmax(1) == data.labels))
    )


def test_model_validation():
    p = OutputPlanes(np.zeros((2, 3)), np.zeros(2), np.zeros((2, 3)))
    with pytest.raises(ShapeError):
        CCSModel(np.ones(2), [p])
    with pytest.raises(ValueError):
        CCSModel(np.array([-1.0]), [p])
    with pytest.raises(ShapeError):
        OutputPlanes(np.zeros((2, 3)), np.zeros(3), np.zeros((2, 3)))


@pytest.mark.parametrize("shared", [True, False])
def test_ccs1_roundtrip(tmp_path, shared):
    net, anchors, model = _model(8, n=10)
    if not shared:
        model = CCSModel(model.c, [p.take(np.arange(k + 3)) for k, p in enumerate(model.planes)])
    save_ccs(model, tmp_path / "m.ccs")
    back = load_ccs(tmp_path / "m.ccs")
    assert back.shared_anchors == shared
    np.testing.assert_array_equal(back.c, model.c)
    x = np.random.default_rng(0).standard_normal((5, 4))
    np.testing.assert_array_equal(eval_ccs(back, x), eval_ccs(model, x))
    raw = (tmp_path / "m.ccs").read_bytes()
    (tmp_path / "t.ccs").write_bytes(raw[:-1])
    with pytest.raises(LengthError):
        load_ccs(tmp_path / "t.ccs")
    (tmp_path / "b.ccs").write_bytes(b"NNC1" + raw[4:])
    with pytest.raises(FormatError):
        load_ccs(tmp_path / "b.ccs")


def test_sample_planes_shape_check():
    with pytest.raises(ShapeError):
        sample_planes(tiny_net(), np.zeros((3, 5)), 1.0)
