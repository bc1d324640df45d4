import numpy as np
import pytest
import torch

from adrm.errors import InvalidArgument, UnsupportedArchitecture
from adrm.models import ARCHITECTURES, forward, init_model, loss_and_grads

from oracles import finite_difference_check


@pytest.mark.parametrize("arch", ["linear", "mlp", "small-cnn"])
def test_gradients_match_finite_differences(arch):
    torch.manual_seed(0)
    model = init_model(arch, 4, init_seed=1, input_shape=(3, 8, 8))
    x = torch.rand(6, 3, 8, 8)
    y = torch.tensor([0, 1, 2, 3, 0, 1])
    errors, _ = finite_difference_check(model, x, y, n_coords=60)
    assert len(errors) == 60 and errors.max() < 1e-2


@pytest.mark.parametrize("arch", ARCHITECTURES)
def test_shapes_and_features(arch):
    model = init_model(arch, 3, input_shape=(3, 16, 16))
    out = forward(model, torch.rand(5, 3, 16, 16))
    assert out.logits.shape == (5, 3)
    assert out.features.shape == (5, model.feature_dim)


def test_init_is_deterministic_per_seed():
    a = init_model("small-cnn", 5, init_seed=4, input_shape=(3, 8, 8))
    b = init_model("small-cnn", 5, init_seed=4, input_shape=(3, 8, 8))
    c = init_model("small-cnn", 5, init_seed=5, input_shape=(3, 8, 8))
    for (n, p), q in zip(a.state_dict().items(), b.state_dict().values()):
        assert torch.equal(p, q), n
    assert not torch.equal(a.head.blocks[0].weight, c.head.blocks[0].weight)


def test_expand_preserves_old_logits():
    model = init_model("mlp", 2, input_shape=(1, 4, 4))
    x = torch.rand(3, 1, 4, 4)
    before = forward(model, x).logits
    model.expand(3)
    after = forward(model, x).logits
    assert model.n_classes == 5
    torch.testing.assert_close(after[:, :2], before, rtol=0, atol=0)


def test_forward_restores_training_mode():
    model = init_model("resnet32", 2, input_shape=(3, 8, 8))
    model.train()
    forward(model, torch.rand(2, 3, 8, 8))
    assert model.training


def test_loss_and_grads_does_not_touch_param_grads():
    model = init_model("linear", 3, input_shape=(1, 2, 2))
    res = loss_and_grads(model, torch.rand(4, 1, 2, 2), torch.tensor([0, 1, 2, 0]))
    assert all(p.grad is None for p in model.parameters())
    assert res.input_grads.shape == (4, 1, 2, 2)
    assert set(res.param_grads) == {n for n, _ in model.named_parameters()}


def test_linear_model_gradient_closed_form():
    # softmax regression: dL/dW = (p - onehot)^T x / B
    model = init_model("linear", 3, input_shape=(1, 2, 2)).double()
    x = torch.rand(5, 1, 2, 2, dtype=torch.float64)
    y = torch.tensor([0, 2, 1, 1, 0])
    res = loss_and_grads(model, x, y)
    p = torch.softmax(model(x), 1).detach()
    resid = p - torch.nn.functional.one_hot(y, 3).double()
    expected = resid.T @ x.flatten(1) / 5
    torch.testing.assert_close(res.param_grads["head.blocks.0.weight"], expected)


def test_errors():
    with pytest.raises(UnsupportedArchitecture):
        init_model("vit", 3)
    with pytest.raises(InvalidArgument):
        init_model("mlp", 1)
    model = init_model("mlp", 3, input_shape=(3, 8, 8))
    with pytest.raises(InvalidArgument):
        forward(model, torch.rand(2, 3, 4, 4))
    with pytest.raises(InvalidArgument):
        loss_and_grads(model, torch.rand(2, 3, 8, 8), torch.tensor([0, 3]))


def test_xavier_variance_of_dense_layer():
    from adrm.models import MLPTrunk
    trunk = MLPTrunk((1, 8, 8), hidden=(128,))  # a 64 -> 128 dense layer
    from adrm.models import _xavier_init
    _xavier_init(trunk, torch.Generator().manual_seed(0))
    w = next(m for m in trunk.modules() if isinstance(m, torch.nn.Linear)).weight
    assert w.shape == (128, 64)
    assert w.var().item() == pytest.approx(2 / (64 + 128), rel=0.1)


def test_linear_logits_are_matrix_product():
    model = init_model("linear", 3, input_shape=(1, 2, 2))
    W = torch.arange(12, dtype=torch.float32).view(3, 4) / 10
    with torch.no_grad():
        model.head.blocks[0].weight.copy_(W)
    x = torch.rand(5, 1, 2, 2)
    torch.testing.assert_close(forward(model, x).logits, x.flatten(1) @ W.T)


def test_batch_independence_and_zero_weights():
    model = init_model("mlp", 4, input_shape=(3, 4, 4))
    x = torch.rand(1, 3, 4, 4).repeat(3, 1, 1, 1)
    logits = forward(model, x).logits
    assert torch.equal(logits[0], logits[1]) and torch.equal(logits[1], logits[2])
    with torch.no_grad():
        for p in model.parameters():
            p.zero_()
    assert torch.count_nonzero(forward(model, x).logits) == 0


def test_cross_entropy_limits():
    model = init_model("linear", 10, input_shape=(1, 2, 2))
    with torch.no_grad():
        for p in model.parameters():
            p.zero_()
    res = loss_and_grads(model, torch.rand(4, 1, 2, 2), torch.tensor([0, 3, 5, 9]))
    assert res.loss == pytest.approx(np.log(10), abs=1e-6)
    with torch.no_grad():
        model.head.blocks[0].bias.copy_(torch.tensor([100.0] + [0.0] * 9))
    res = loss_and_grads(model, torch.rand(4, 1, 2, 2), torch.zeros(4, dtype=torch.long))
    assert res.loss < 1e-30
    assert all(g.abs().max() < 1e-30 for g in res.param_grads.values())


def test_non_finite_forward_raises():
    from adrm.errors import NumericFailure
    model = init_model("linear", 2, input_shape=(1, 1, 1))
    with torch.no_grad():
        model.head.blocks[0].weight.fill_(float("inf"))
    with pytest.raises(NumericFailure):
        loss_and_grads(model, torch.ones(1, 1, 1, 1), torch.tensor([0]))
