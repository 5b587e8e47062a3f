import numpy as np
import pytest

from idsds import attribution as A
from idsds.attribution import ABS, SG, MethodSpec, Wrapper, attribute, spec
from idsds.autodiff import Tensor
from idsds.errors import ConfigError
from idsds.models import ModelConfig, build_model, predict
from idsds.patches import Baseline, PatchGrid
from idsds.protocols import patch_drops, spearman

from .oracles import central_difference, relative_error


def linear_model(shape=(3, 4, 4), classes=3, seed=0):
    return build_model(ModelConfig("mlp", depth=0, use_bias=False, num_classes=classes, input_shape=shape), seed=seed)


def toy_cnn(seed=0, shape=(3, 16, 16), bn=False):
    return build_model(ModelConfig("cnn", depth=2, use_batchnorm=bn, num_classes=4, input_shape=shape), seed=seed)


def toy_bagnet(seed=0, bias=False):
    cfg = ModelConfig("bagnet_local", depth=2, use_bias=bias, num_classes=4, input_shape=(3, 16, 16), patch_size=4)
    return build_model(cfg, seed=seed)


def logit(model, x, t):
    return float(predict(model, x[None])[0, t])


def _x(seed=0, shape=(3, 16, 16)):
    return np.random.default_rng(seed).normal(size=shape)


# gradients


def test_linear_gradient_is_channel_sum_of_weights():
    m = linear_model()
    w = m.params["head.weight"].data
    x = _x(1, (3, 4, 4))
    for t in range(3):
        g = A.gradient(m, x, t).map
        # head weight rows index classes, columns the flattened C×H×W input
        expected = w[t].reshape(3, 4, 4).sum(axis=0)
        np.testing.assert_allclose(g, expected, rtol=0, atol=1e-12)


def test_saliency_is_nonnegative():
    assert np.all(A.saliency(toy_cnn(), _x(), 2).map >= 0)


def test_gradient_matches_finite_differences():
    m = toy_cnn(seed=3)
    x = _x(4)
    rng = np.random.default_rng(0)
    g, _ = A.input_gradients(m, x[None], 1)
    for _ in range(5):
        idx = (int(rng.integers(3)), int(rng.integers(16)), int(rng.integers(16)))
        numeric = central_difference(lambda: logit(m, x, 1), x, idx)
        assert relative_error(g[0][idx], numeric) <= 1e-4


def test_target_out_of_range():
    with pytest.raises(ConfigError):
        A.gradient(toy_cnn(), _x(), 4)
    with pytest.raises(ConfigError):
        A.gradient(toy_cnn(), _x(), -1)


def test_map_shape_is_spatial():
    m = toy_cnn()
    for mid in ("gradient", "ixg", "grad_cam", "occlusion"):
        assert attribute(m, _x(), 0, mid).map.shape == (16, 16)


# input x gradient


def test_ixg_of_zero_input_is_zero():
    assert np.all(A.input_x_gradient(toy_cnn(), np.zeros((3, 16, 16)), 0).map == 0.0)


def test_ixg_equals_separately_computed_product():
    m = build_model(ModelConfig("cnn", depth=1, num_classes=3, input_shape=(3, 4, 4)), seed=2)
    x = _x(5, (3, 4, 4))
    xt = Tensor(x[None], requires_grad=True)
    m.eval()
    m(xt)[0, 2].backward()
    brute = np.zeros((4, 4))
    for c in range(3):
        for i in range(4):
            for j in range(4):
                brute[i, j] += x[c, i, j] * xt.grad[0, c, i, j]
    np.testing.assert_allclose(A.input_x_gradient(m, x, 2).map, brute, rtol=0, atol=1e-12)


def test_ixg_patch_sums_equal_drops_for_linear_model():
    m = linear_model((3, 8, 8))
    grid = PatchGrid(2, 8, 8)
    x = _x(6, (3, 8, 8))
    sums = grid.patch_sums(A.input_x_gradient(m, x, 1).map)
    np.testing.assert_allclose(sums, patch_drops(m, x, 1, grid, Baseline.zero()), rtol=0, atol=1e-12)


# integrated gradients


def test_ig_completeness_on_toy_cnn():
    m = toy_cnn(seed=1, bn=True)
    x = _x(7)
    b = np.zeros_like(x)
    ig = A.integrated_gradients(m, x, 3, steps=128).map
    gap = logit(m, x, 3) - logit(m, b, 3)
    assert abs(ig.sum() - gap) <= 1e-3 * abs(gap)


def test_ig_equals_ixg_for_linear_model():
    m = linear_model()
    x = _x(8, (3, 4, 4))
    np.testing.assert_allclose(A.integrated_gradients(m, x, 0).map, A.input_x_gradient(m, x, 0).map, rtol=0, atol=1e-12)


def test_ig_at_baseline_is_zero():
    x = _x(9)
    assert np.all(A.integrated_gradients(toy_cnn(), x, 0, baseline=x.copy()).map == 0.0)


def test_ig_needs_eight_steps():
    with pytest.raises(ConfigError):
        A.integrated_gradients(toy_cnn(), _x(), 0, steps=7)
    with pytest.raises(ConfigError):
        spec("integrated_gradients", steps=4)


def test_ig_uniform_baseline_is_seeded():
    m = toy_cnn()
    a = A.integrated_gradients(m, _x(), 0, baseline="uniform", steps=8, seed=1, image_id=5).map
    b = A.integrated_gradients(m, _x(), 0, baseline="uniform", steps=8, seed=1, image_id=5).map
    c = A.integrated_gradients(m, _x(), 0, baseline="uniform", steps=8, seed=1, image_id=6).map
    assert a.tobytes() == b.tobytes() and a.tobytes() != c.tobytes()


# CAM family


def test_grad_cam_single_channel_is_proportional_to_map():
    rng = np.random.default_rng(0)
    acts = rng.uniform(0.1, 1.0, size=(1, 4, 4))
    grads = rng.uniform(0.1, 1.0, size=(1, 4, 4))
    cam = A.cam_map(acts, grads, "grad_cam")
    np.testing.assert_allclose(cam, grads.mean() * acts[0], rtol=1e-12)
    assert np.all(cam >= 0)


def test_xgrad_cam_with_constant_totals_is_scaled_grad_cam():
    rng = np.random.default_rng(1)
    acts = rng.uniform(0.1, 1.0, size=(3, 4, 4))
    acts *= 5.0 / acts.sum(axis=(1, 2), keepdims=True)  # Z = 5 for every channel
    grads = rng.normal(size=(3, 4, 4))
    # with constant Z, weights are sum(A G) / Z; grad_cam uses mean(G)
    w = (acts * grads).sum(axis=(1, 2)) / (5.0 + 1e-7)
    expected = np.maximum(np.tensordot(w, acts, axes=1), 0)
    np.testing.assert_allclose(A.cam_map(acts, grads, "xgrad_cam"), expected, rtol=1e-9, atol=1e-12)
    # spatially flat maps make A/Z = 1/16, so the weights reduce to mean(G) up to the epsilon
    flat = np.full((3, 4, 4), 5.0 / 16)
    np.testing.assert_allclose(
        A.cam_map(flat, grads, "xgrad_cam"), A.cam_map(flat, grads, "grad_cam") * 5.0 / (5.0 + 1e-7), rtol=1e-9, atol=1e-12
    )


def test_layer_cam_and_grad_cam_pp_are_nonnegative():
    m = toy_cnn(seed=2)
    for variant in ("layer_cam", "grad_cam_pp", "xgrad_cam"):
        amap = A.cam_family(m, _x(1), 1, variant=variant).map
        assert amap.shape == (16, 16) and np.all(amap >= 0)


def test_grad_cam_pp_matches_hand_formula():
    acts = np.array([[[1.0, 2.0], [0.0, 1.0]]])
    grads = np.array([[[0.5, -1.0], [2.0, 0.0]]])
    g2, g3 = grads**2, grads**3
    denom = 2 * g2 + (acts * g3).sum()
    alpha = np.where(g2 > 0, g2 / np.where(denom == 0, 1, denom), 0)
    w = (alpha * np.maximum(grads, 0)).sum()
    np.testing.assert_allclose(A.cam_map(acts, grads, "grad_cam_pp"), np.maximum(w * acts[0], 0), rtol=1e-12)


def test_all_zero_feature_maps_warn():
    m = toy_cnn()
    for k in m.params:
        m.params[k].data[...] = 0.0
    res = A.cam_family(m, _x(), 0)
    assert np.all(res.map == 0.0) and res.warnings == ["all-zero feature maps"]


def test_cam_layer_must_be_conv():
    with pytest.raises(ConfigError, match="conv1"):
        A.cam_family(toy_cnn(), _x(), 0, layer="head")


def test_bilinear_resize_preserves_constants_and_shape():
    out = A.bilinear_resize(np.full((2, 3, 3), 2.5), 16, 12)
    assert out.shape == (2, 16, 12)
    np.testing.assert_allclose(out, 2.5, atol=1e-12)


# perturbation methods


def test_rise_with_all_ones_masks_is_constant_output():
    m = toy_cnn()
    x = _x(2)
    amap = A.rise(m, x, 1, num_masks=10, keep_prob=1.0).map
    np.testing.assert_allclose(amap, logit(m, x, 1), rtol=1e-12)


def test_rise_is_deterministic_under_seed():
    m = toy_cnn()
    a = A.rise(m, _x(), 0, num_masks=20, seed=3).map
    b = A.rise(m, _x(), 0, num_masks=20, seed=3).map
    c = A.rise(m, _x(), 0, num_masks=20, seed=4).map
    assert a.tobytes() == b.tobytes() and a.tobytes() != c.tobytes()


def test_rise_parameter_checks():
    with pytest.raises(ConfigError):
        spec("rise", num_masks=9)
    with pytest.raises(ConfigError):
        spec("rise", keep_prob=0.0)


def test_rise_masks_lie_in_unit_interval():
    masks = A.rise_masks(30, 7, 0.5, 16, 16, np.random.default_rng(0))
    assert masks.shape == (30, 16, 16) and masks.min() >= 0 and masks.max() <= 1


def test_occlusion_on_bagnet_equals_patch_drops():
    m = toy_bagnet(bias=True)
    grid = PatchGrid(4, 16, 16)
    for seed in range(3):
        x = _x(seed)
        amap = A.occlusion(m, x, 2, window=4, stride=4).map
        drops = patch_drops(m, x, 2, grid, Baseline.zero())
        np.testing.assert_allclose(grid.patch_sums(amap) / 16, drops, rtol=0, atol=1e-12)


# wrappers


def test_smoothgrad_with_zero_sigma_is_base():
    m = toy_cnn()
    base = attribute(m, _x(), 1, spec("input_x_gradient")).map
    sg = attribute(m, _x(), 1, spec("input_x_gradient", [Wrapper("smoothgrad", 4, 0.0)])).map
    assert sg.tobytes() == base.tobytes()


def test_smoothgrad_squared_is_nonnegative():
    m = toy_cnn()
    amap = attribute(m, _x(), 1, A.wrap_smoothgrad(spec("gradient"), n=4, sigma=0.2, squared=True)).map
    assert np.all(amap >= 0)


def test_smoothgrad_concentrates():
    m = toy_cnn(seed=5)
    ms = A.wrap_smoothgrad(spec("gradient"), n=64, sigma=0.1)
    a = attribute(m, _x(3), 0, ms, seed=0).map
    b = attribute(m, _x(3), 0, ms, seed=1).map
    # per-pixel variance of the two draws, summed, against the squared norm of their mean
    variance = (((a - b) / 2) ** 2).sum()
    assert variance <= 0.1 * (((a + b) / 2) ** 2).sum()


def test_abs_must_be_last():
    with pytest.raises(ConfigError):
        MethodSpec("gradient", (), (ABS, SG))
    with pytest.raises(ConfigError):
        A.wrap_smoothgrad(A.wrap_abs(spec("gradient")))
    with pytest.raises(ConfigError):
        MethodSpec("gradient", (), (ABS, ABS))


def test_abs_variants_are_nonnegative_and_reuse_cache():
    m = toy_cnn()
    cache = {}
    raw = attribute(m, _x(), 0, "ixg_sg", cache=cache).map
    ab = attribute(m, _x(), 0, "ixg_sg_abs", cache=cache).map
    assert np.all(ab >= 0)
    np.testing.assert_array_equal(ab, np.abs(raw))
    assert len(cache) == 1
    np.testing.assert_array_equal(attribute(m, _x(), 0, "ixg_sg_abs").map, ab)


def test_unknown_method_lists_registry():
    with pytest.raises(ConfigError, match="grad_cam"):
        A.get_method("lrp")


def test_every_registered_method_is_deterministic():
    m = toy_cnn(seed=4)
    small = {"num_masks": 10}
    for mid in A.PAPER_ROSTER:
        ms = A.get_method(mid)
        if ms.base == "rise":
            ms = MethodSpec(ms.base, tuple(sorted({**ms.kwargs, **small}.items())), ms.wrappers, mid)
        a = attribute(m, _x(1), 2, ms, seed=7, image_id=3).map
        b = attribute(m, _x(1), 2, ms, seed=7, image_id=3).map
        assert a.shape == (16, 16) and a.tobytes() == b.tobytes(), mid


# intrinsic readout


def test_bagnet_native_sums_to_logit():
    m = toy_bagnet()
    x = _x(4)
    np.testing.assert_allclose(A.bagnet_native(m, x, 3).map.sum(), logit(m, x, 3), rtol=1e-12, atol=1e-12)


def test_bagnet_native_ranks_patches_like_drops():
    m = toy_bagnet(seed=2, bias=True)
    grid = PatchGrid(4, 16, 16)
    rs = []
    for seed in range(20):
        x = _x(100 + seed)
        rs.append(spearman(grid.patch_sums(A.bagnet_native(m, x, 1).map), patch_drops(m, x, 1, grid, Baseline.zero())))
    assert min(rs) >= 0.95


def test_bagnet_native_needs_bagnet():
    with pytest.raises(ConfigError, match="bagnet_local"):
        A.bagnet_native(toy_cnn(), _x(), 0)


# softmax switch and export


def test_post_softmax_gradient_agrees_in_direction_with_pre():
    m = linear_model((3, 4, 4), classes=3, seed=1)
    x = _x(2, (3, 4, 4))
    top = int(np.argmax(predict(m, x[None])[0]))
    x = x * 20  # scaling a no-bias linear model makes one logit dominate
    pre, _ = A.input_gradients(m, x[None], top, "pre")
    post, _ = A.input_gradients(m, x[None], top, "post")
    assert pre.shape == post.shape
    assert float((pre * post).sum()) >= 0


def test_post_mode_changes_maps_not_shapes():
    m = toy_cnn()
    a = A.gradient(m, _x(), 0, "pre").map
    b = A.gradient(m, _x(), 0, "post").map
    assert a.shape == b.shape and not np.allclose(a, b)
    with pytest.raises(ConfigError):
        A.gradient(m, _x(), 0, "logit")


def test_map_export_round_trip(tmp_path):
    res = attribute(toy_cnn(), _x(), 1, "ig_abs")
    raw, meta = A.save_map(res, tmp_path / "ig")
    assert raw.stat().st_size == 16 * 16 * 8
    np.testing.assert_array_equal(np.fromfile(raw, "<f8").reshape(16, 16), res.map)
    back = A.load_map(tmp_path / "ig")
    assert back.map.tobytes() == res.map.tobytes()
    assert (back.method, back.target, back.softmax_mode, back.wrappers) == ("ig_abs", 1, "pre", ("abs",))


def test_pgm_scaling():
    amap = np.array([[0.0, 1.0], [2.0, 4.0]])
    pgm = A.to_pgm(amap)
    header, pixels = pgm[:11], pgm[11:]
    assert header == b"P5\n2 2\n255\n"
    assert list(pixels) == [0, 64, 128, 255]
    assert A.to_pgm(np.full((3, 2), 7.0)) == b"P5\n2 3\n255\n" + bytes(6)
