import numpy as np
import pytest
import torch
from torch import nn

from adrm.attacks import predict
from adrm.diversify import DiversificationSpec, DiversifiedBatch, diversify, mix_rehearsal
from adrm.errors import InvalidArgument
from adrm.models import init_model


class Threshold1D(nn.Module):
    """Two-class model on a single pixel: logit difference 10 * (x - 0.5)."""

    def forward(self, x):
        z = 10 * (x.flatten(1)[:, :1] - 0.5)
        return torch.cat([-z, z], 1)


def test_partition_matches_boundary_enumeration():
    # the FGSM step moves x toward the boundary by eps; a sample is fooled
    # exactly when it crosses x = 0.5 (ties at 0.5 predict class 0)
    model = Threshold1D()
    xs = torch.linspace(0.40, 0.60, 41).view(-1, 1, 1, 1)
    ys = (xs.flatten() > 0.5).long()
    spec = DiversificationSpec(epsilon_low=0.03, epsilon_high=0.07)
    div = diversify(model, xs, ys, spec, rng=5)
    for x, y, eps, fooled in zip(xs.flatten(), ys, div.epsilons, div.fooled_mask):
        moved = x - eps if y == 1 else x + eps
        assert bool(fooled) == bool((moved > 0.5).long() != y)


@pytest.mark.parametrize("seed", range(5))
def test_partition_properties(seed):
    g = torch.Generator().manual_seed(seed)
    model = init_model("mlp", 5, init_seed=seed, input_shape=(3, 4, 4))
    x = torch.rand(40, 3, 4, 4, generator=g)
    y = torch.randint(0, 5, (40,), generator=g)
    div = diversify(model, x, y, DiversificationSpec(rng_seed=seed))
    f, r = set(div.fooled_idx.tolist()), set(div.resisted_idx.tolist())
    assert f | r == set(range(40)) and not f & r
    assert torch.equal(div.labels, y)
    assert div.epsilons.min() >= 1 / 255 and div.epsilons.max() <= 16 / 255
    assert torch.all((div.perturbed - x).flatten(1).abs().max(1).values <= div.epsilons + 1e-6)
    d = div.diagnostics()
    assert d["n_fooled"] + d["n_resisted"] == 40
    assert d["fooling_rate"] == pytest.approx(d["n_fooled"] / 40)


def test_zero_epsilon_partition_is_clean_prediction():
    model = init_model("mlp", 3, init_seed=0, input_shape=(1, 3, 3))
    x = torch.rand(30, 1, 3, 3)
    y = torch.randint(0, 3, (30,))
    div = diversify(model, x, y, DiversificationSpec(epsilon_low=0, epsilon_high=0))
    assert torch.equal(div.fooled_mask, predict(model, x) != y)
    assert torch.equal(div.perturbed, x)


def _fake(n_fooled, n_resisted):
    n = n_fooled + n_resisted
    x = torch.arange(n, dtype=torch.float32).view(n, 1, 1, 1)
    mask = torch.tensor([True] * n_fooled + [False] * n_resisted)
    return DiversifiedBatch(x, torch.arange(n), x + 100, torch.zeros(n), mask)


@pytest.mark.parametrize("ratio,B,nf,nr,expected", [
    (0.1, 20, 5, 15, 2 + 2),
    (0.5, 20, 3, 17, 3 + 10),
    (1.0, 8, 8, 0, 8),
    (0.25, 3, 1, 2, 0),
])
def test_mix_counts(ratio, B, nf, nr, expected):
    div = _fake(nf, nr)
    x, y = mix_rehearsal(div.originals[:B], div.labels[:B], div, ratio, 0)
    assert len(y) == B + expected
    assert torch.equal(x[:B], div.originals[:B])
    extra = x[B:].flatten() - 100
    assert torch.equal(y[B:], extra.long())


def test_ratio_zero_returns_inputs_untouched():
    div = _fake(4, 4)
    rng = np.random.default_rng(0)
    state = rng.bit_generator.state
    x, y = mix_rehearsal(div.originals, div.labels, div, 0.0, rng)
    assert x is div.originals and y is div.labels
    assert rng.bit_generator.state == state


def test_errors():
    with pytest.raises(InvalidArgument):
        DiversificationSpec(ratio=1.5)
    with pytest.raises(InvalidArgument):
        DiversificationSpec(epsilon_low=0.2, epsilon_high=0.1)
    model = init_model("linear", 2, input_shape=(1, 1, 1))
    with pytest.raises(InvalidArgument):
        diversify(model, torch.zeros(0, 1, 1, 1), torch.zeros(0, dtype=torch.long), DiversificationSpec())


class Constant(nn.Module):
    """Logits that ignore the input and always favor class 1 by a wide margin."""

    def __init__(self):
        super().__init__()
        self.w = nn.Parameter(torch.zeros(1))

    def forward(self, x):
        z = x.flatten(1)[:, :1] * self.w
        return torch.cat([z - 50, z + 50], 1)


def test_unbeatable_margins_fool_nothing():
    x = torch.rand(12, 1, 2, 2)
    div = diversify(Constant(), x, torch.ones(12, dtype=torch.long), DiversificationSpec())
    assert len(div.fooled_idx) == 0 and len(div.resisted_idx) == 12


def test_hand_computed_quota():
    # B = 20, r = 0.1 -> quota 2 per subset; only 1 fooled exists
    div = _fake(1, 7)
    base_x = torch.zeros(20, 1, 1, 1)
    x, y = mix_rehearsal(base_x, torch.zeros(20, dtype=torch.long), div, 0.1, 0)
    assert len(y) == 23
    added = div.fooled_mask[(x[20:].flatten() - 100).long()]
    assert added.tolist().count(True) == 1 and added.tolist().count(False) == 2


def test_full_ratio_triples_batch():
    div = _fake(6, 6)
    x, _ = mix_rehearsal(torch.zeros(6, 1, 1, 1), torch.zeros(6, dtype=torch.long), div, 1.0, 0)
    assert len(x) == 18
