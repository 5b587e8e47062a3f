import numpy as np
import pytest

from idsds.autodiff import Tensor
from idsds.data import Dataset
from idsds.errors import ConfigError, NumericFault
from idsds.models import (
    Model,
    ModelConfig,
    PatchDeleteAugmentation,
    PatchDeletionSampler,
    TrainConfig,
    accuracy,
    build_model,
    capture_activations,
    count_parameters,
    finetune_in_domain,
    fit,
    predict,
    train,
)
from idsds.patches import Baseline, PatchGrid


def blobs(n=200, seed=0, shape=(1, 4, 4)):
    """Two Gaussian blobs separated along a fixed direction."""
    rng = np.random.default_rng(seed)
    labels = rng.integers(0, 2, size=n)
    direction = np.ones(shape) / np.sqrt(np.prod(shape))
    images = rng.normal(scale=0.3, size=(n, *shape)) + (2 * labels - 1)[:, None, None, None] * 2.0 * direction
    return Dataset(images, labels, np.arange(n))


def test_param_count_hand_example():
    cfg = ModelConfig("cnn", depth=2, num_classes=8, input_shape=(3, 32, 32), base_width=8)
    # conv 3->8: 9*3*8+8, conv 8->16: 9*8*16+16, head 16->8: 16*8+8
    assert count_parameters(cfg) == 224 + 1168 + 136
    wide = ModelConfig("cnn", depth=2, width_multiplier=2.0, num_classes=8, input_shape=(3, 32, 32), base_width=8)
    assert count_parameters(wide) == 448 + 4640 + 264


@pytest.mark.parametrize(
    "cfg",
    [
        ModelConfig("mlp", depth=0, num_classes=3, input_shape=(1, 4, 4)),
        ModelConfig("mlp", depth=3, width_multiplier=1.5, use_bias=False, input_shape=(2, 4, 4)),
        ModelConfig("cnn", depth=1, input_shape=(3, 8, 8)),
        ModelConfig("cnn", depth=5, use_batchnorm=True, width_multiplier=0.5, input_shape=(3, 16, 16)),
        ModelConfig("cnn", depth=8, use_bias=False, input_shape=(3, 16, 16)),
        ModelConfig("bagnet_local", depth=3, use_batchnorm=True, patch_size=4, input_shape=(3, 16, 16)),
    ],
)
def test_closed_form_count_matches_built_model(cfg):
    assert count_parameters(cfg) == build_model(cfg).num_parameters()


def test_width_doubling_scales_as_predicted():
    for family in ("cnn", "bagnet_local", "mlp"):
        a = ModelConfig(family, depth=3, input_shape=(3, 16, 16), patch_size=4)
        b = ModelConfig(family, depth=3, width_multiplier=2.0, input_shape=(3, 16, 16), patch_size=4)
        assert build_model(b).num_parameters() == count_parameters(b)
        assert count_parameters(b) > count_parameters(a)


@pytest.mark.parametrize("family", ["mlp", "cnn", "bagnet_local"])
def test_no_bias_no_bn_maps_zero_to_zero(family):
    cfg = ModelConfig(family, depth=3, use_bias=False, input_shape=(3, 16, 16), patch_size=4)
    out = predict(build_model(cfg, seed=3), np.zeros((2, 3, 16, 16)))
    assert np.all(out == 0.0)


def test_post_softmax_sums_to_one():
    m = build_model(ModelConfig("cnn", depth=2, num_classes=2, input_shape=(3, 8, 8)), seed=1)
    p = predict(m, np.random.default_rng(0).normal(size=(4, 3, 8, 8)), "post")
    np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-12)


def test_capture_last_conv_shape():
    m = build_model(ModelConfig("cnn", depth=2, base_width=4, input_shape=(3, 8, 8)))
    x, maps = capture_activations(m, np.ones((3, 8, 8)), m.default_cam_layer)
    assert m.default_cam_layer == "conv2"
    # second block runs after one 2x2 pool: 8 channels on a 4x4 grid
    assert maps.shape == (1, 8, 4, 4)
    m(x)  # the capture graph stays usable


def test_capture_gradients_reach_feature_maps():
    m = build_model(ModelConfig("cnn", depth=2, input_shape=(3, 8, 8)), seed=2)
    x = Tensor(np.random.default_rng(1).normal(size=(1, 3, 8, 8)), requires_grad=True)
    logits, caps = m.forward(x, capture=("conv2",))
    logits[0, 1].backward()
    assert caps["conv2"].grad.shape == caps["conv2"].shape
    assert x.grad.shape == x.shape


def test_unknown_layer_lists_valid_layers():
    m = build_model(ModelConfig("cnn", depth=2, input_shape=(3, 8, 8)))
    with pytest.raises(ConfigError, match="conv1"):
        capture_activations(m, np.zeros((3, 8, 8)), "conv9")


def test_bagnet_locality_is_exact():
    cfg = ModelConfig("bagnet_local", depth=3, input_shape=(3, 16, 16), patch_size=4)
    m = build_model(cfg, seed=5)
    rng = np.random.default_rng(0)
    x = rng.normal(size=(1, 3, 16, 16))
    _, caps = m.forward(Tensor(x), capture=("local_logits",))
    base = caps["local_logits"].data
    x2 = x.copy()
    x2[0, :, 0:4, 4:8] = 0.0  # pixels of location (0, 1) only
    _, caps2 = m.forward(Tensor(x2), capture=("local_logits",))
    diff = np.abs(caps2["local_logits"].data - base)
    assert np.all(diff[..., 0, 1] > 0) or diff[..., 0, 1].max() > 0
    diff[..., 0, 1] = 0
    assert diff.max() == 0.0


def test_blobs_are_learned_by_linear_model():
    ds = blobs()
    res = train(ModelConfig("mlp", depth=1, num_classes=2, input_shape=(1, 4, 4)), TrainConfig(epochs=20, lr=0.05), ds)
    assert accuracy(res.model, ds) >= 0.99
    assert len(res.history) == 20 and set(res.history[0]) == {"epoch", "lr", "loss", "accuracy"}


def test_zero_epochs_returns_initial_model():
    ds = blobs(20)
    cfg = ModelConfig("mlp", depth=1, num_classes=2, input_shape=(1, 4, 4))
    res = train(cfg, TrainConfig(epochs=0, seed=4), ds)
    assert res.model.weights_bytes() == build_model(cfg, seed=4).weights_bytes()


def test_same_seed_same_weights():
    ds = blobs(64, shape=(3, 8, 8))
    cfg = ModelConfig("cnn", depth=2, use_batchnorm=True, num_classes=2, input_shape=(3, 8, 8))
    aug = PatchDeleteAugmentation(4, 0.5, Baseline.uniform(seed=2))
    tc = TrainConfig(epochs=2, lr=0.02, batch_size=16, seed=9, augmentation=aug)
    a = train(cfg, tc, ds).model
    b = train(cfg, tc, ds).model
    assert a.content_hash() == b.content_hash()
    c = train(cfg, TrainConfig(epochs=2, lr=0.02, batch_size=16, seed=10, augmentation=aug), ds).model
    assert c.content_hash() != a.content_hash()


def test_sgd_step_matches_hand_update():
    # one full-batch step on a linear model: w <- w - lr * (grad + wd * w)
    ds = blobs(8)
    cfg = ModelConfig("mlp", depth=0, num_classes=2, input_shape=(1, 4, 4))
    m = build_model(cfg, seed=1)
    w0 = m.params["head.weight"].data.copy()
    probe = m.copy()
    logits = probe(Tensor(ds.images))
    from idsds import autodiff as ad

    ad.cross_entropy(logits, ds.labels).backward()
    g = probe.params["head.weight"].grad
    fit(m, TrainConfig(epochs=1, lr=0.1, weight_decay=0.01, batch_size=8, seed=0), ds)
    np.testing.assert_allclose(m.params["head.weight"].data, w0 - 0.1 * (g + 0.01 * w0), atol=1e-12)


def test_divergence_is_reported_with_epoch_and_batch():
    ds = blobs(64, shape=(3, 8, 8))
    ds.images[:] = 1e308  # the first convolution overflows
    with pytest.raises(NumericFault, match=r"epoch 0, batch \d"):
        train(ModelConfig("cnn", depth=1, num_classes=2, input_shape=(3, 8, 8)), TrainConfig(epochs=1, lr=1.0), ds)


def test_labels_out_of_range_rejected():
    ds = blobs(10)
    with pytest.raises(ConfigError):
        train(ModelConfig("mlp", depth=0, num_classes=2, input_shape=(1, 4, 4)), TrainConfig(epochs=1), Dataset(ds.images, ds.labels + 5, ds.ids))


def test_augmentation_probability_validated():
    with pytest.raises(ConfigError):
        PatchDeleteAugmentation(16, 1.5)
    with pytest.raises(ConfigError):
        PatchDeletionSampler(16, -0.1)


def test_sampler_frequencies():
    draws = np.concatenate([PatchDeletionSampler(16, 0.5, seed=0).epoch_draws(e, 10_000) for e in range(10)])
    assert abs(np.mean(draws == 0) - 0.5) <= 0.01
    for m in range(1, 17):
        assert abs(np.mean(draws == m) - 0.03125) <= 0.005


def test_sampler_draw_independent_of_batch_size_and_label():
    s = PatchDeletionSampler(16, 0.5, seed=3)
    full = s.epoch_draws(2, 500)
    np.testing.assert_array_equal(s.epoch_draws(2, 100), full[:100])
    assert [s(label, 2, i) for i, label in enumerate([0, 7, 3, 3, 1])] == full[:5].tolist()
    assert s(0, 2, 17) == s(5, 2, 17)


def test_finetune_leaves_input_model_untouched():
    ds = blobs(32, shape=(3, 8, 8))
    m = build_model(ModelConfig("cnn", depth=1, num_classes=2, input_shape=(3, 8, 8)))
    before = m.content_hash()
    res = finetune_in_domain(m, TrainConfig(epochs=1, lr=0.01, batch_size=8), ds, PatchGrid(2, 8, 8), Baseline.zero())
    assert m.content_hash() == before
    assert res.model.content_hash() != before


def test_save_load_round_trip(tmp_path):
    cfg = ModelConfig("bagnet_local", depth=2, use_batchnorm=True, input_shape=(3, 8, 8), patch_size=4)
    m = build_model(cfg, seed=7)
    m.buffers["bn1.running_mean"] += 0.25
    m.save(tmp_path / "m.atb", {"seed": 7})
    back = Model.load(tmp_path / "m.atb")
    assert back.config == cfg
    assert back.content_hash() == m.content_hash()
    x = np.random.default_rng(0).normal(size=(2, 3, 8, 8))
    np.testing.assert_array_equal(predict(back, x), predict(m, x))


def test_invalid_configs():
    with pytest.raises(ConfigError):
        ModelConfig("resnet")
    with pytest.raises(ConfigError):
        ModelConfig("mlp", use_batchnorm=True)
    with pytest.raises(ConfigError):
        ModelConfig("bagnet_local", input_shape=(3, 30, 30), patch_size=8)
    with pytest.raises(ConfigError):
        ModelConfig("cnn", width_multiplier=0)
