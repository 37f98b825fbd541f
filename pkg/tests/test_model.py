import numpy as np
import pytest

from binloc import nn
from binloc.geometry import SectorGrid
from binloc.model import AuralNet, AuralNetConfig
from binloc.nn import Tensor

SMALL = dict(n_frames=6, n_bands=8, n_cc=5, d_model=8, heads=2, agg_hidden=(12,), agg_out=10, branch_dim=6, head_hidden=4, dtype="float64")


def inputs(b=3, t=6, bands=8, cc=5, seed=0):
    rng = np.random.default_rng(seed)
    return rng.standard_normal((b, t, bands)), rng.standard_normal((b, t, bands)), rng.standard_normal((b, cc))


def small(variant="full", grid=SectorGrid(), seed=0):
    return AuralNet(AuralNetConfig(grid=grid, variant=variant, seed=seed, **SMALL))


def test_pooled_width_reference_config():
    assert AuralNetConfig().pooled_width == 3 * 64 + 33 == 225
    model = AuralNet(AuralNetConfig(agg_hidden=(16,), agg_out=16, branch_dim=8, head_hidden=8))
    rng = np.random.default_rng(0)
    l, r = rng.standard_normal((2, 39, 64)), rng.standard_normal((2, 39, 64))
    f, extra = model.aggregate_features(l, r, rng.standard_normal((2, 33)), return_streams=True)
    assert extra["pooled_input"].shape == (2, 225) and f.shape == (2, 16)


def test_forward_shape_reference_config():
    model = AuralNet(AuralNetConfig(agg_hidden=(16,), agg_out=16, branch_dim=8, head_hidden=8))
    rng = np.random.default_rng(1)
    out = model.predict(rng.standard_normal((1, 39, 64)), rng.standard_normal((1, 39, 64)), rng.standard_normal((1, 33)))
    assert out.shape == (1, 8, 10)
    assert np.all((out > 0) & (out < 1))


def test_identical_ears_zero_difference_stream():
    model = small()
    l, _, cc = inputs()
    _, extra = model.aggregate_features(l, l, cc, return_streams=True)
    assert not extra["streams"]["diff"].data.any()


def test_aggregate_independent_of_t():
    model = small()
    for t in (1, 6, 11):
        l, r, cc = inputs(t=t)
        assert model.aggregate_features(l, r, cc).shape == (3, 10)


def test_shape_errors():
    model = small()
    l, r, cc = inputs()
    with pytest.raises(nn.ShapeMismatch):
        model(l[..., :7], r[..., :7], cc)
    with pytest.raises(nn.ShapeMismatch):
        model(l, r, cc[:, :4])


def test_coarse_branch_range_and_zero_head():
    model = small()
    f = model.aggregate_features(*inputs())
    _, prob = model.coarse_branch(f)
    assert prob.shape == (8, 3, 1) and np.all((prob.data > 0) & (prob.data < 1))
    model.coarse_head.weight.data[:] = 0
    model.coarse_head.bias.data[:] = 0
    _, prob = model.coarse_branch(f)
    np.testing.assert_array_equal(prob.data, 0.5)


def test_coarse_branches_disjoint():
    model = small()
    l, r, cc = inputs()
    before = model.predict(l, r, cc)
    model.coarse_mlp.layers[0].weight.data[0] += 0.5
    after = model.predict(l, r, cc)
    assert not np.allclose(before[:, 0], after[:, 0])
    np.testing.assert_array_equal(before[:, 1:], after[:, 1:])


def test_fine_branches_disjoint():
    model = small()
    l, r, cc = inputs()
    before = model.predict(l, r, cc)
    model.fine_head.layers[0].weight.data[2, 1] += 0.5
    after = model.predict(l, r, cc)
    changed = ~np.isclose(before, after, rtol=0, atol=0)
    # only the (det, azi, ele) columns of fine sector (2, 1) move
    assert changed[:, 2, 4:7].all()
    changed[:, 2, 4:7] = False
    assert not changed.any()


@pytest.mark.parametrize("bias, which", [(-50.0, "f_coarse"), (50.0, "f_fine")])
def test_gate_limits(bias, which):
    model = small()
    _, feats = model.forward(*inputs(), return_features=True)
    model.gate.weight.data[:] = 0
    model.gate.bias.data[:] = bias
    fused, g = model.gate_fuse(feats["f_coarse"], feats["f_fine"])
    ref = feats[which].data
    if which == "f_coarse":
        ref = np.broadcast_to(ref[:, None], fused.shape)
    np.testing.assert_allclose(fused.data, ref, rtol=0, atol=1e-9)


def test_gate_equal_inputs():
    model = small()
    v = Tensor(np.random.default_rng(2).standard_normal((8, 3, 6)))
    fused, _ = model.gate_fuse(v, nn.broadcast_to(nn.reshape(v, (8, 1, 3, 6)), (8, 3, 3, 6)))
    np.testing.assert_allclose(fused.data, np.broadcast_to(v.data[:, None], (8, 3, 3, 6)), atol=1e-12)


def test_fine_branch_zero_heads():
    model = small()
    for layer in model.fine_head.layers:
        layer.weight.data[:] = 0
        layer.bias.data[:] = 0
    out = model.fine_branch(Tensor(np.random.default_rng(3).standard_normal((8, 3, 2, 6))))
    np.testing.assert_array_equal(out.data, 0.5)


def test_variants():
    l, r, cc = inputs()
    full, rl = small("full"), small("regular_loss")
    np.testing.assert_array_equal(full.predict(l, r, cc), rl.predict(l, r, cc))
    sizes = {v: small(v).num_parameters() for v in ("full", "no_coarse", "non_hierarchical")}
    assert sizes["no_coarse"] < sizes["full"]
    for v in ("no_coarse", "non_hierarchical"):
        assert small(v).predict(l, r, cc).shape == (3, 8, 10)


def test_other_grid():
    model = small(grid=SectorGrid(4, 2))
    assert model.predict(*inputs()).shape == (3, 4, 7)


def test_prior_init_sets_base_rate():
    model = small()
    targets = np.zeros((10, 8, 10))
    targets[:5, 0, 1] = 1
    targets[:5, 0, 0] = 1
    model.init_detection_prior(targets)
    p = 5 / (10 * 24)
    np.testing.assert_allclose(model.fine_head.layers[-1].bias.data[..., 0], np.log(p / (1 - p)))
    q = 5 / 80
    np.testing.assert_allclose(model.coarse_head.bias.data, np.log(q / (1 - q)))


def test_save_load_roundtrip(tmp_path):
    model = small("no_coarse", seed=4)
    model.save(tmp_path / "m.ckpt")
    back = AuralNet.load(tmp_path / "m.ckpt")
    assert back.config == model.config
    l, r, cc = inputs()
    np.testing.assert_allclose(back.predict(l, r, cc), model.predict(l, r, cc), atol=1e-6)
