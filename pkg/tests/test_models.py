"""Network forwards: shape arithmetic, determinism, compositional oracles,
the FC/1x1-conv discriminator equivalence, and checkpoint handling."""

import numpy as np
import pytest

from segadapt.autodiff import Tensor, backward, bilinear_upsample, leaky_relu, linear, softmax_channel, sum_all
from segadapt.networks import (
    LEAKY_SLOPE,
    CheckpointError,
    ClassifierHead,
    FeatureGenerator,
    GlobalDiscriminator,
    ModelConfig,
    SemanticDiscriminatorConv,
    SemanticDiscriminatorFC,
    load_checkpoint,
    predict,
    save_checkpoint,
)


def small_config():
    # narrow widths keep the forward tests fast; shapes scale the same way
    return ModelConfig(feature_channels=16, generator_widths=(8, 12, 12), semantic_hidden=32)


# ---------------------------------------------------------------------------
# feature generator
# ---------------------------------------------------------------------------

def test_generator_output_shape_at_default_width():
    gen = FeatureGenerator()
    out = gen.forward(np.zeros((3, 32, 32), dtype=np.float32))
    assert out.shape == (64, 8, 8)


@pytest.mark.parametrize("stride,hw", [(1, (24, 24)), (2, (12, 12)), (4, (6, 6)), (8, (3, 3))])
def test_generator_stride_options(stride, hw):
    gen = FeatureGenerator(ModelConfig(feature_channels=16, stride=stride, generator_widths=(8, 8, 8)))
    out = gen.forward(np.zeros((3, 24, 24), dtype=np.float32))
    assert out.shape == (16, *hw)


def test_generator_rejects_indivisible_input():
    gen = FeatureGenerator(small_config())
    with pytest.raises(ValueError, match="divisible"):
        gen.forward(np.zeros((3, 30, 30), dtype=np.float32))
    with pytest.raises(ValueError, match="image"):
        gen.forward(np.zeros((1, 32, 32), dtype=np.float32))


def test_generator_rejects_unknown_stride():
    with pytest.raises(ValueError, match="stride"):
        FeatureGenerator(ModelConfig(stride=3))


def test_generator_is_deterministic():
    rng = np.random.default_rng(0)
    image = rng.random((3, 24, 24)).astype(np.float32)
    a = FeatureGenerator(small_config(), seed=5)
    b = FeatureGenerator(small_config(), seed=5)
    np.testing.assert_array_equal(a.forward(image).data, b.forward(image).data)
    for (ka, pa), (kb, pb) in zip(sorted(a.parameters().items()), sorted(b.parameters().items())):
        assert ka == kb
        np.testing.assert_array_equal(pa.data, pb.data)
    c = FeatureGenerator(small_config(), seed=6)
    assert not np.array_equal(a.parameters()["conv0.kernel"].data, c.parameters()["conv0.kernel"].data)


def test_generator_biases_start_at_zero():
    gen = FeatureGenerator(small_config())
    for name, p in gen.parameters().items():
        if name.endswith(".bias"):
            np.testing.assert_array_equal(p.data, 0.0)


def test_gradient_reaches_first_layer_kernel():
    gen = FeatureGenerator(small_config(), seed=2, dtype=np.float64)
    image = np.random.default_rng(1).random((3, 16, 16))
    backward(sum_all(gen.forward(image)))
    kernel = gen.parameters()["conv0.kernel"]
    assert kernel.grad is not None and np.abs(kernel.grad).max() > 0

    # finite-difference spot check on one kernel entry
    grad = kernel.grad[0, 0, 0, 0]
    step = 1e-5
    orig = kernel.data[0, 0, 0, 0]
    kernel.data[0, 0, 0, 0] = orig + step
    up = gen.forward(image).data.sum()
    kernel.data[0, 0, 0, 0] = orig - step
    down = gen.forward(image).data.sum()
    kernel.data[0, 0, 0, 0] = orig
    fd = (up - down) / (2 * step)
    assert abs(grad - fd) / max(1.0, abs(fd)) < 1e-4


# ---------------------------------------------------------------------------
# classifier head
# ---------------------------------------------------------------------------

def test_head_score_map_is_per_pixel_simplex():
    cfg = small_config()
    head = ClassifierHead(4, cfg, dtype=np.float64)
    features = Tensor(np.random.default_rng(2).random((cfg.feature_channels, 6, 6)))
    scores = head.score_map(features, (24, 24))
    assert scores.shape == (4, 24, 24)
    np.testing.assert_allclose(scores.data.sum(axis=0), 1.0, atol=1e-9)
    assert scores.data.min() > 0


def test_head_with_zeroed_weights_is_uniform():
    cfg = small_config()
    head = ClassifierHead(5, cfg)
    for p in head.parameters().values():
        p.data = np.zeros_like(p.data)
    features = Tensor(np.random.default_rng(3).random((cfg.feature_channels, 4, 4)).astype(np.float32))
    scores = head.score_map(features, (8, 8))
    np.testing.assert_allclose(scores.data, 1.0 / 5.0, atol=1e-9)


def test_head_matches_explicit_composition():
    cfg = small_config()
    head = ClassifierHead(3, cfg, seed=9, dtype=np.float64)
    features = Tensor(np.random.default_rng(4).random((cfg.feature_channels, 5, 7)))
    got = head.score_map(features, (10, 14))
    expected = softmax_channel(bilinear_upsample(head.logits(features), 10, 14))
    np.testing.assert_allclose(got.data, expected.data, atol=1e-15)


def test_head_rejects_single_class():
    with pytest.raises(ValueError, match="classes"):
        ClassifierHead(1, small_config())


# ---------------------------------------------------------------------------
# global discriminator
# ---------------------------------------------------------------------------

def test_global_discriminator_shape_arithmetic():
    disc = GlobalDiscriminator(4)
    out = disc.forward(Tensor(np.random.default_rng(5).random((4, 32, 32)).astype(np.float32)))
    assert out.shape == (2, 4, 4)  # three stride-2 layers: 32 -> 16 -> 8 -> 4


def test_global_discriminator_outputs_per_location_simplex():
    disc = GlobalDiscriminator(3, small_config(), dtype=np.float64)
    out = disc.forward(Tensor(np.random.default_rng(6).random((3, 16, 16))))
    assert out.shape[0] == 2
    np.testing.assert_allclose(out.data.sum(axis=0), 1.0, atol=1e-9)


def test_global_discriminator_is_deterministic():
    score = Tensor(np.random.default_rng(7).random((4, 16, 16)).astype(np.float32))
    disc = GlobalDiscriminator(4, small_config(), seed=11)
    np.testing.assert_array_equal(disc.forward(score).data, disc.forward(score).data)


def test_global_discriminator_rejects_wrong_channels():
    disc = GlobalDiscriminator(4, small_config())
    with pytest.raises(ValueError, match="score map"):
        disc.forward(Tensor(np.zeros((3, 16, 16), dtype=np.float32)))


# ---------------------------------------------------------------------------
# semantic discriminators
# ---------------------------------------------------------------------------

def test_fc_discriminator_output_is_simplex_and_deterministic():
    cfg = small_config()
    disc = SemanticDiscriminatorFC(4, cfg, dtype=np.float64)
    vec = Tensor(np.random.default_rng(8).random(cfg.feature_channels))
    out = disc.forward(vec)
    assert out.shape == (8,)
    np.testing.assert_allclose(out.data.sum(), 1.0, atol=1e-9)
    np.testing.assert_array_equal(out.data, disc.forward(vec).data)


def test_fc_discriminator_matches_manual_composition():
    cfg = small_config()
    disc = SemanticDiscriminatorFC(3, cfg, dtype=np.float64)
    params = disc.parameters()
    vec = Tensor(np.random.default_rng(9).random(cfg.feature_channels))
    hidden = leaky_relu(linear(vec, params["fc0.weight"], params["fc0.bias"]), LEAKY_SLOPE)
    expected = softmax_channel(linear(hidden, params["fc1.weight"], params["fc1.bias"]))
    np.testing.assert_allclose(disc.forward(vec).data, expected.data, atol=1e-15)


def test_fc_discriminator_rejects_wrong_length():
    disc = SemanticDiscriminatorFC(4, small_config())
    with pytest.raises(ValueError, match="feature vector"):
        disc.forward(Tensor(np.zeros(7, dtype=np.float32)))


def test_conv_discriminator_shape_and_simplex():
    cfg = small_config()
    disc = SemanticDiscriminatorConv(4, cfg, dtype=np.float64)
    feats = Tensor(np.random.default_rng(10).random((cfg.feature_channels, 5, 6)))
    out = disc.forward(feats)
    assert out.shape == (8, 5, 6)
    np.testing.assert_allclose(out.data.sum(axis=0), 1.0, atol=1e-9)


def test_conv_discriminator_rejects_wrong_channels():
    disc = SemanticDiscriminatorConv(4, small_config())
    with pytest.raises(ValueError, match="features"):
        disc.forward(Tensor(np.zeros((3, 5, 5), dtype=np.float32)))


def test_transplanted_conv_matches_fc_per_pixel():
    # the 1x1-conv discriminator with FC weights must compute the FC forward
    # at every pixel (tolerance 1e-10, so run in float64)
    cfg = small_config()
    fc = SemanticDiscriminatorFC(4, cfg, seed=13, dtype=np.float64)
    conv = SemanticDiscriminatorConv.from_fc(fc, config=cfg)
    feats = np.random.default_rng(11).standard_normal((cfg.feature_channels, 4, 5))
    out = conv.forward(Tensor(feats)).data
    for i in range(4):
        for j in range(5):
            per_pixel = fc.forward(Tensor(feats[:, i, j])).data
            np.testing.assert_allclose(out[:, i, j], per_pixel, atol=1e-10)


# ---------------------------------------------------------------------------
# prediction helper
# ---------------------------------------------------------------------------

def test_predict_returns_hard_labels_without_gradients():
    cfg = small_config()
    gen = FeatureGenerator(cfg)
    head = ClassifierHead(4, cfg)
    image = np.random.default_rng(12).random((3, 24, 24)).astype(np.float32)
    pred = predict(gen, head, image)
    assert pred.shape == (24, 24)
    assert pred.dtype == np.uint8
    assert pred.max() < 4
    assert all(p.grad is None for p in gen.parameters().values())
    np.testing.assert_array_equal(pred, predict(gen, head, image))


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def test_checkpoint_round_trip(tmp_path):
    path = tmp_path / "ckpt.npz"
    arrays = {"gen/conv0.kernel": np.arange(12.0).reshape(3, 4), "gen/conv0.bias": np.zeros(3)}
    save_checkpoint(path, arrays, meta={"iteration": 7, "fingerprint": "abc123"})
    loaded, meta = load_checkpoint(path)
    assert meta["iteration"] == 7
    assert meta["format_version"] == 1
    np.testing.assert_array_equal(loaded["gen/conv0.kernel"], arrays["gen/conv0.kernel"])
    # fingerprint check
    load_checkpoint(path, expected_fingerprint="abc123")
    with pytest.raises(CheckpointError, match="fingerprint"):
        load_checkpoint(path, expected_fingerprint="other")


def test_checkpoint_rejects_wrong_version(tmp_path):
    import json

    path = tmp_path / "ckpt.npz"
    np.savez(path, _checkpoint_meta=np.array(json.dumps({"format_version": 99})))
    with pytest.raises(CheckpointError, match="version"):
        load_checkpoint(path)


def test_checkpoint_rejects_foreign_npz(tmp_path):
    path = tmp_path / "other.npz"
    np.savez(path, weights=np.ones(3))
    with pytest.raises(CheckpointError, match="metadata"):
        load_checkpoint(path)


def test_checkpoint_rejects_garbage_file(tmp_path):
    path = tmp_path / "broken.npz"
    path.write_bytes(b"not an npz archive")
    with pytest.raises(CheckpointError, match="cannot read"):
        load_checkpoint(path)


def test_load_parameters_round_trip_and_validation():
    cfg = small_config()
    a = FeatureGenerator(cfg, seed=1)
    b = FeatureGenerator(cfg, seed=2)
    arrays = {f"g/{k}": v.data.copy() for k, v in a.parameters().items()}
    b.load_parameters(arrays, prefix="g/")
    for k, v in a.parameters().items():
        np.testing.assert_array_equal(v.data, b.parameters()[k].data)
    with pytest.raises(CheckpointError, match="missing"):
        b.load_parameters({}, prefix="g/")
    bad = dict(arrays)
    bad["g/conv0.kernel"] = np.zeros((1, 1, 1, 1))
    with pytest.raises(CheckpointError, match="shape"):
        b.load_parameters(bad, prefix="g/")
