import numpy as np
import pytest
from conftest import finite_difference_gradient, max_relative_error

from dpsgd import models
from dpsgd.errors import PrivacyViolationError, ShapeError


def tiny_cnn_spec():
    """Small enough for finite differences, still conv + group_norm + pool."""
    layers = (
        models.LayerSpec("conv2d", out_channels=4, kernel=3, stride=1, padding=1),
        models.LayerSpec("group_norm", groups=2),
        models.LayerSpec("relu"),
        models.LayerSpec("max_pool", size=2),
        models.LayerSpec("flatten"),
        models.LayerSpec("linear", out_features=3),
    )
    return models.ModelSpec(layers, (2, 4, 4), 3)


class TestBuildModel:
    def test_mlp_parameter_count(self):
        spec = models.mlp_spec(784, [128], 10)
        params = models.build_model(spec, seed=0)
        assert params.dim == 784 * 128 + 128 + 128 * 10 + 10 == 101770

    def test_same_seed_bitwise_identical(self):
        spec = models.mlp_spec(20, [8], 4)
        a = models.build_model(spec, seed=42)
        b = models.build_model(spec, seed=42)
        assert np.array_equal(a.flat, b.flat)

    def test_different_seed_differs(self):
        spec = models.mlp_spec(20, [8], 4)
        a = models.build_model(spec, seed=1)
        b = models.build_model(spec, seed=2)
        assert not np.array_equal(a.flat, b.flat)

    def test_batch_norm_rejected(self):
        spec = models.ModelSpec(
            (models.LayerSpec("linear", out_features=4), models.LayerSpec("batch_norm")),
            (4,),
            4,
        )
        with pytest.raises(PrivacyViolationError, match="batch normalization"):
            models.build_model(spec, seed=0)

    def test_biases_zero_and_gamma_one(self):
        spec = tiny_cnn_spec()
        params = models.build_model(spec, seed=3)
        views = params.views(params.layout_for(1))
        assert np.array_equal(views["gamma"], np.ones(4, dtype=np.float32))
        assert np.array_equal(views["beta"], np.zeros(4, dtype=np.float32))

    def test_flat_dim_matches_extent_sum(self):
        for spec in (models.mlp_spec(30, [16, 8], 5), tiny_cnn_spec(), models.mlp_spec(9, [], 3)):
            params = models.build_model(spec, seed=0)
            assert sum(length for _, length in params.layer_extents) == params.dim

    def test_shape_mismatch_in_spec_rejected(self):
        spec = models.ModelSpec((models.LayerSpec("linear", out_features=4),), (3, 4, 4), 4)
        with pytest.raises(ShapeError):
            models.build_model(spec, seed=0)


class TestPerExampleGradient:
    def test_zero_head_gives_uniform_softmax_loss(self):
        spec = models.mlp_spec(12, [6], 10)
        params = models.build_model(spec, seed=0)
        head = params.layouts[-1]
        params.flat[head.offset : head.offset + head.length] = 0.0
        x = np.random.default_rng(0).standard_normal(12).astype(np.float32)
        loss, _ = models.per_example_gradient(spec, params, x, 7)
        assert loss == pytest.approx(np.log(10), rel=1e-6)

    def test_label_out_of_range_rejected(self):
        spec = models.mlp_spec(4, [], 3)
        params = models.build_model(spec, seed=0)
        with pytest.raises(ValueError, match="label"):
            models.per_example_gradient(spec, params, np.zeros(4, dtype=np.float32), 3)

    def test_gradient_dim_equals_param_dim(self):
        for spec in (models.mlp_spec(10, [7], 4), tiny_cnn_spec()):
            params = models.build_model(spec, seed=1)
            x = np.random.default_rng(1).standard_normal(spec.input_shape).astype(np.float32)
            _, grad = models.per_example_gradient(spec, params, x, 0)
            assert grad.dim == params.dim
            assert grad.layer_extents == params.layer_extents

    def test_repeated_calls_bitwise_identical(self):
        spec = tiny_cnn_spec()
        params = models.build_model(spec, seed=2)
        x = np.random.default_rng(2).standard_normal(spec.input_shape).astype(np.float32)
        loss_a, grad_a = models.per_example_gradient(spec, params, x, 1)
        loss_b, grad_b = models.per_example_gradient(spec, params, x, 1)
        assert loss_a == loss_b
        assert np.array_equal(grad_a.values, grad_b.values)

    def test_gradient_independent_of_batch_context(self):
        # Gradients computed alone vs inside a shuffled loop are identical.
        spec = models.mlp_spec(8, [5], 3)
        params = models.build_model(spec, seed=3)
        rng = np.random.default_rng(3)
        xs = rng.standard_normal((6, 8)).astype(np.float32)
        ys = rng.integers(0, 3, size=6)
        alone = [models.per_example_gradient(spec, params, x, y)[1].values for x, y in zip(xs, ys)]
        order = rng.permutation(6)
        shuffled = {}
        for idx in order:
            shuffled[int(idx)] = models.per_example_gradient(spec, params, xs[idx], ys[idx])[1].values
        for i in range(6):
            assert np.array_equal(alone[i], shuffled[i])

    @pytest.mark.parametrize("which", ["mlp", "cnn"])
    def test_matches_finite_differences(self, which):
        spec = models.mlp_spec(6, [5], 3) if which == "mlp" else tiny_cnn_spec()
        params = models.build_model(spec, seed=4, dtype=np.float64)
        rng = np.random.default_rng(4)
        x = rng.standard_normal(spec.input_shape)
        label = 1
        _, grad = models.per_example_gradient(spec, params, x, label)

        def objective():
            return models.per_example_gradient(spec, params, x, label)[0]

        fd = finite_difference_gradient(objective, params.flat)
        assert max_relative_error(grad.values, fd) < 1e-4


def test_group_norm_model_isolation_across_examples():
    # Changing a different example never changes this example's gradient.
    spec = tiny_cnn_spec()
    params = models.build_model(spec, seed=5)
    rng = np.random.default_rng(5)
    xs = rng.standard_normal((3, 2, 4, 4)).astype(np.float32)
    before = models.per_example_gradient(spec, params, xs[0], 2)[1].values
    xs[1] *= 1000.0
    after = models.per_example_gradient(spec, params, xs[0], 2)[1].values
    assert np.array_equal(before, after)


def test_evaluate_accuracy_counts_argmax_matches():
    spec = models.mlp_spec(4, [], 2)
    params = models.build_model(spec, seed=6)
    views = params.views(params.layout_for(0))
    views["weight"][:] = np.array([[1, 0, 0, 0], [0, 1, 0, 0]], dtype=np.float32)
    views["bias"][:] = 0
    examples = np.array([[3, 0, 0, 0], [0, 3, 0, 0], [3, 0, 0, 0]], dtype=np.float32)
    labels = np.array([0, 1, 1])
    assert models.evaluate_accuracy(spec, params, examples, labels) == pytest.approx(2 / 3)
