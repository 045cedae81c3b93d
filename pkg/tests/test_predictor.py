"""Attribute predictor: architecture contract, parameter partitioning, gradients."""

import numpy as np
import pytest

from efadiff.bias import BiasSpec
from efadiff.errors import DomainError, ShapeError
from efadiff.predictor import (
    INIT_HEAD_BIAS,
    init_attribute_predictor,
    predict,
    predict_batch,
    trainable_parameters,
)
from efadiff.tensor import Tensor, grad_check

COLOR = BiasSpec("color", ("red", "blue"), "{} subject")


@pytest.fixture
def ap():
    return init_attribute_predictor(
        "ap8", COLOR, feat_dim=6, heads=2, token_count=3, input_resolution=(4, 4),
        hidden=5, rng=np.random.default_rng(0),
    )


def test_initial_logits_are_the_head_bias(ap):
    rng = np.random.default_rng(1)
    z = Tensor(rng.standard_normal((16, 6)))
    out = predict(ap, "red", z)
    assert out.shape == (2, 16, 3)
    np.testing.assert_allclose(out.data, INIT_HEAD_BIAS)


def test_zeroed_head_gives_zero_logits(ap):
    ap.head_convs["red"]["b"].data[:] = 0.0
    z = Tensor(np.random.default_rng(2).standard_normal((16, 6)))
    np.testing.assert_allclose(predict(ap, "red", z).data, 0.0)


def test_unknown_attribute_and_bad_shape(ap):
    z = Tensor(np.zeros((16, 6)))
    with pytest.raises(DomainError):
        predict(ap, "green", z)
    with pytest.raises(ShapeError):
        predict(ap, "red", Tensor(np.zeros((15, 6))))


def test_three_convs_two_silus_per_path(ap):
    # architecture count: 3 conv weight tensors + 3 biases on any attribute's path
    names = set(trainable_parameters(ap, "red"))
    weights = {n for n in names if n.endswith(".w")}
    biases = {n for n in names if n.endswith(".b")}
    assert len(weights) == 3 and len(biases) == 3


def test_backbone_shared_heads_distinct(ap):
    red = trainable_parameters(ap, "red")
    blue = trainable_parameters(ap, "blue")
    shared = set(red) & set(blue)
    assert shared == {f"ap8.backbone.{k}" for k in ("c1.w", "c1.b", "c2.w", "c2.b")}
    assert "ap8.head.red.w" in red and "ap8.head.red.w" not in blue


def test_gradient_flows_to_selected_head_only(ap):
    rng = np.random.default_rng(3)
    z = Tensor(rng.standard_normal((16, 6)))
    for p in ap.parameters().values():
        p.zero_grad()
    predict(ap, "red", z).sum().backward()
    assert ap.head_convs["red"]["b"].grad is not None
    assert ap.head_convs["blue"]["b"].grad is None
    assert ap.backbone["c1.w"].grad is not None


def test_joint_step_leaves_other_head_bits(ap):
    # a loss on red's path must not touch blue's head values at all
    rng = np.random.default_rng(4)
    z = Tensor(rng.standard_normal((16, 6)))
    before = ap.head_convs["blue"]["w"].data.tobytes()
    predict(ap, "red", z).sum().backward()
    for key in ("w", "b"):
        t = ap.head_convs["red"][key]
        t.data -= 0.1 * t.grad
    assert ap.head_convs["blue"]["w"].data.tobytes() == before


def test_predict_gradcheck_against_finite_differences():
    rng = np.random.default_rng(5)
    ap = init_attribute_predictor(
        "ap", COLOR, feat_dim=3, heads=1, token_count=2, input_resolution=(3, 3),
        hidden=3, rng=rng,
    )
    # non-degenerate head so the check exercises all three convs
    ap.head_convs["red"]["w"].data[:] = rng.standard_normal(ap.head_convs["red"]["w"].shape) * 0.3
    z = Tensor(rng.standard_normal((9, 3)))
    m = Tensor(rng.standard_normal((1, 9, 2)))
    params = trainable_parameters(ap, "red")

    report = grad_check(lambda p: (predict(ap, "red", z) * m).sum(), params, epsilon=1e-6)
    assert report.max_relative_error < 1e-6, report.per_parameter_errors


def test_predict_batch_matches_single(ap):
    rng = np.random.default_rng(6)
    z = Tensor(rng.standard_normal((5, 16, 6)))
    attrs = ["red", "blue", "red", "red", "blue"]
    # perturb heads so the two attributes actually differ
    ap.head_convs["red"]["w"].data[:] = rng.standard_normal(ap.head_convs["red"]["w"].shape) * 0.2
    ap.head_convs["blue"]["w"].data[:] = rng.standard_normal(ap.head_convs["blue"]["w"].shape) * 0.2
    batched = predict_batch(ap, attrs, z)
    assert batched.shape == (5, 2, 16, 3)
    for i, a in enumerate(attrs):
        single = predict(ap, a, z[i])
        np.testing.assert_allclose(batched.data[i], single.data, atol=1e-12)
    assert np.abs(batched.data[0] - batched.data[1]).max() > 0
