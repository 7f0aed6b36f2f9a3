import numpy as np
import pytest

from horkd.losses import FeatureBatch
from horkd.models import (
    ImageBatch,
    Model,
    ModelSpec,
    build_model,
    degrade,
    forward,
    load_model,
    save_model,
)
from horkd.tensor import Tensor, backward, gradient_check, softmax_cross_entropy


def small_spec(**overrides):
    base = dict(input_dims=(8, 8, 1), hidden_layers=(16,), embedding_dim=8,
                num_classes=4, seed=42)
    base.update(overrides)
    return ModelSpec(**base)


def random_batch(rng, m, dims=(8, 8, 1), num_classes=4):
    return ImageBatch(rng.uniform(0, 1, size=(m, *dims)),
                      rng.integers(0, num_classes, size=m))


class TestBuildModel:
    def test_seeded_reproducibility(self):
        a = build_model(small_spec())
        b = build_model(small_spec())
        for pa, pb in zip(a.parameters, b.parameters):
            np.testing.assert_array_equal(pa.values, pb.values)

    def test_parameter_shapes(self):
        model = build_model(small_spec())
        shapes = [p.shape for p in model.parameters]
        assert shapes == [(64, 16), (16,), (16, 8), (8,), (8, 4), (4,)]

    def test_zero_model_zero_logits(self):
        model = build_model(small_spec())
        for p in model.parameters:
            p.values[:] = 0.0
        batch = ImageBatch(np.zeros((2, 8, 8, 1)), np.zeros(2, dtype=int))
        _, logits = forward(model, batch)
        np.testing.assert_array_equal(logits.values, np.zeros((2, 4)))

    def test_zero_width_rejected(self):
        with pytest.raises(ValueError, match="zero-width"):
            small_spec(hidden_layers=(16, 0))

    def test_hidden_layer_required(self):
        with pytest.raises(ValueError, match="hidden"):
            small_spec(hidden_layers=())


class TestForward:
    def test_replicated_example_identical_rows(self):
        rng = np.random.default_rng(0)
        model = build_model(small_spec())
        one = rng.uniform(0, 1, size=(1, 8, 8, 1))
        batch = ImageBatch(np.repeat(one, 5, axis=0), np.zeros(5, dtype=int))
        emb, logits = forward(model, batch)
        for i in range(1, 5):
            np.testing.assert_array_equal(emb.values[i], emb.values[0])
            np.testing.assert_array_equal(logits.values[i], logits.values[0])

    def test_batch_decomposable_bit_exact(self):
        rng = np.random.default_rng(1)
        model = build_model(small_spec())
        batch = random_batch(rng, 6)
        emb_all, logits_all = forward(model, batch)
        for i in range(6):
            emb_i, logits_i = forward(model, batch.subset([i]))
            np.testing.assert_array_equal(emb_i.values[0], emb_all.values[i])
            np.testing.assert_array_equal(logits_i.values[0], logits_all.values[i])

    def test_frozen_model_gets_no_grads(self):
        rng = np.random.default_rng(2)
        model = build_model(small_spec())
        model.freeze()
        batch = random_batch(rng, 3)
        _, logits = forward(model, batch)
        backward(softmax_cross_entropy(logits, batch.labels))
        assert all(p.grad is None for p in model.parameters)

    def test_input_dimension_mismatch(self):
        model = build_model(small_spec())
        batch = ImageBatch(np.zeros((2, 4, 4, 1)), np.zeros(2, dtype=int))
        with pytest.raises(ValueError, match="input-dimension mismatch"):
            forward(model, batch)

    def test_gradient_through_model(self):
        rng = np.random.default_rng(3)
        spec = ModelSpec(input_dims=(3, 3, 1), hidden_layers=(5,),
                         embedding_dim=4, num_classes=3, seed=1)
        model = build_model(spec)
        batch = ImageBatch(rng.uniform(0, 1, size=(3, 3, 3, 1)),
                           rng.integers(0, 3, size=3))
        w1 = model.parameters[0]

        def f(t):
            model.parameters[0] = t
            _, logits = forward(model, batch)
            return softmax_cross_entropy(logits, batch.labels)

        err = gradient_check(f, w1)
        model.parameters[0] = w1
        assert err < 1e-4

    def test_determinism(self):
        rng = np.random.default_rng(4)
        model = build_model(small_spec())
        batch = random_batch(rng, 4)
        emb1, logits1 = forward(model, batch)
        emb2, logits2 = forward(model, batch)
        np.testing.assert_array_equal(emb1.values, emb2.values)
        np.testing.assert_array_equal(logits1.values, logits2.values)

    def test_embeddings_feed_feature_batch(self):
        rng = np.random.default_rng(5)
        model = build_model(small_spec())
        batch = random_batch(rng, 4)
        emb, _ = forward(model, batch)
        fb = FeatureBatch(emb.values, batch.labels)
        assert fb.features.shape == (4, 8)


class TestDegrade:
    def test_factor_one_identity(self):
        rng = np.random.default_rng(6)
        batch = random_batch(rng, 3)
        out = degrade(batch, 1)
        np.testing.assert_array_equal(out.images, batch.images)

    def test_checkerboard_mean(self):
        img = np.array([[0.0, 1.0], [1.0, 0.0]]).reshape(1, 2, 2, 1)
        out = degrade(ImageBatch(img, np.array([0])), 2)
        np.testing.assert_array_equal(out.images, [[[[0.5]]]])

    def test_constant_image_any_factor(self):
        img = np.full((1, 8, 8, 1), 0.37)
        for factor in (1, 2, 4, 8):
            out = degrade(ImageBatch(img, np.array([0])), factor)
            np.testing.assert_allclose(out.images, 0.37, atol=1e-15)

    def test_preserves_range_and_mean(self):
        rng = np.random.default_rng(7)
        batch = random_batch(rng, 5, dims=(12, 12, 2))
        out = degrade(batch, 3)
        assert out.images.min() >= 0.0 and out.images.max() <= 1.0
        for i in range(5):
            assert abs(out.images[i].mean() - batch.images[i].mean()) <= 1e-12

    def test_labels_and_alignment_preserved(self):
        rng = np.random.default_rng(8)
        batch = random_batch(rng, 4)
        out = degrade(batch, 2)
        np.testing.assert_array_equal(out.labels, batch.labels)
        np.testing.assert_allclose(out.images[2].mean(), batch.images[2].mean(),
                                   atol=1e-12)

    def test_non_divisible_rejected(self):
        rng = np.random.default_rng(9)
        with pytest.raises(ValueError, match="divide"):
            degrade(random_batch(rng, 2), 3)


class TestCheckpoints:
    def test_round_trip_bit_exact(self, tmp_path):
        model = build_model(small_spec(seed=77))
        path = tmp_path / "model.bin"
        save_model(model, path)
        loaded = load_model(path)
        assert loaded.spec == model.spec
        assert loaded.frozen == model.frozen
        for pa, pb in zip(model.parameters, loaded.parameters):
            np.testing.assert_array_equal(pa.values, pb.values)

    def test_frozen_flag_persisted(self, tmp_path):
        model = build_model(small_spec())
        model.freeze()
        path = tmp_path / "frozen.bin"
        save_model(model, path)
        loaded = load_model(path)
        assert loaded.frozen
        assert all(not p.requires_grad for p in loaded.parameters)

    def test_bad_header_rejected(self, tmp_path):
        path = tmp_path / "junk.bin"
        path.write_bytes(b"not a checkpoint\n\x00\x00")
        with pytest.raises(ValueError, match="header"):
            load_model(path)

    def test_truncated_rejected(self, tmp_path):
        model = build_model(small_spec())
        path = tmp_path / "model.bin"
        save_model(model, path)
        data = path.read_bytes()
        path.write_bytes(data[:-16])
        with pytest.raises(ValueError, match="floats"):
            load_model(path)


class TestImageBatch:
    def test_rejects_out_of_range(self):
        with pytest.raises(ValueError, match=r"\[0, 1\]"):
            ImageBatch(np.full((1, 2, 2, 1), 1.5), np.array([0]))

    def test_rejects_label_mismatch(self):
        with pytest.raises(ValueError, match="labels"):
            ImageBatch(np.zeros((2, 2, 2, 1)), np.array([0]))
