"""Image classifiers with a growable single head and an input-gradient facility."""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import InvalidArgument, NumericFailure, UnsupportedArchitecture

ARCHITECTURES = ("linear", "mlp", "small-cnn", "resnet32")


class Standardize(nn.Module):
    """Fixed per-channel standardization; a no-op when ``mean`` is None."""

    def __init__(self, mean=None, std=None, channels=3):
        super().__init__()
        self.enabled = mean is not None
        mean = torch.as_tensor(mean if mean is not None else [0.0] * channels, dtype=torch.float32)
        std = torch.as_tensor(std if std is not None else [1.0] * channels, dtype=torch.float32)
        self.register_buffer("mean", mean.view(1, -1, 1, 1))
        self.register_buffer("std", std.view(1, -1, 1, 1))

    def forward(self, x):
        return (x - self.mean) / self.std if self.enabled else x


class IncrementalHead(nn.Module):
    """Single classifier over every class seen so far, grown one block per task."""

    def __init__(self, in_features):
        super().__init__()
        self.in_features = in_features
        self.blocks = nn.ModuleList()

    @property
    def n_classes(self):
        return sum(b.out_features for b in self.blocks)

    def expand(self, n_new, generator=None):
        block = nn.Linear(self.in_features, n_new)
        ref = next(self.parameters(), None)
        if ref is not None:
            block = block.to(ref.dtype)
        with torch.no_grad():
            nn.init.xavier_uniform_(block.weight, generator=generator)
            block.bias.zero_()
        self.blocks.append(block)
        return block

    def forward(self, features):
        return torch.cat([b(features) for b in self.blocks], dim=1)


class Trunk(nn.Module):
    def feature_dim(self):
        raise NotImplementedError


class Flatten(Trunk):
    def __init__(self, input_shape):
        super().__init__()
        self.dim = int(torch.tensor(input_shape).prod())

    def feature_dim(self):
        return self.dim

    def forward(self, x):
        return x.flatten(1)


class MLPTrunk(Trunk):
    def __init__(self, input_shape, hidden=(256, 128)):
        super().__init__()
        dims = [int(torch.tensor(input_shape).prod())] + list(hidden)
        layers = []
        for a, b in zip(dims[:-1], dims[1:]):
            layers += [nn.Linear(a, b), nn.ReLU()]
        self.net = nn.Sequential(nn.Flatten(), *layers)
        self.dim = dims[-1]

    def feature_dim(self):
        return self.dim

    def forward(self, x):
        return self.net(x)


class SmallCNN(Trunk):
    """Two conv/ReLU/max-pool blocks and a dense feature layer."""

    def __init__(self, input_shape, width=32, hidden=128):
        super().__init__()
        c, h, w = input_shape
        self.conv = nn.Sequential(
            nn.Conv2d(c, width, 3, padding=1), nn.ReLU(), nn.MaxPool2d(2),
            nn.Conv2d(width, 2 * width, 3, padding=1), nn.ReLU(), nn.MaxPool2d(2),
        )
        self.fc = nn.Sequential(nn.Flatten(), nn.Linear(2 * width * (h // 4) * (w // 4), hidden), nn.ReLU())
        self.dim = hidden

    def feature_dim(self):
        return self.dim

    def forward(self, x):
        return self.fc(self.conv(x))


class BasicBlock(nn.Module):
    def __init__(self, cin, cout, stride):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cout, 3, stride, 1, bias=False)
        self.bn1 = nn.BatchNorm2d(cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, 1, 1, bias=False)
        self.bn2 = nn.BatchNorm2d(cout)
        self.shortcut = None
        if stride != 1 or cin != cout:
            self.shortcut = nn.Sequential(nn.Conv2d(cin, cout, 1, stride, bias=False), nn.BatchNorm2d(cout))

    def forward(self, x):
        out = F.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        return F.relu(out + (x if self.shortcut is None else self.shortcut(x)))


class ResNet32(Trunk):
    """CIFAR-style ResNet-32: three stages of five basic blocks (16/32/64 channels)."""

    def __init__(self, input_shape, blocks_per_stage=5):
        super().__init__()
        c = input_shape[0]
        self.stem = nn.Sequential(nn.Conv2d(c, 16, 3, 1, 1, bias=False), nn.BatchNorm2d(16), nn.ReLU())
        layers, cin = [], 16
        for cout, stride in ((16, 1), (32, 2), (64, 2)):
            for i in range(blocks_per_stage):
                layers.append(BasicBlock(cin, cout, stride if i == 0 else 1))
                cin = cout
        self.stages = nn.Sequential(*layers)
        self.dim = 64

    def feature_dim(self):
        return self.dim

    def forward(self, x):
        return F.adaptive_avg_pool2d(self.stages(self.stem(x)), 1).flatten(1)


@dataclass
class ForwardOutput:
    logits: torch.Tensor
    features: torch.Tensor


class Classifier(nn.Module):
    """Standardize -> trunk -> incremental head.

    ``features`` are the trunk outputs feeding the head (penultimate layer).
    """

    def __init__(self, architecture_id, input_shape, trunk, normalizer, init_seed):
        super().__init__()
        self.architecture_id = architecture_id
        self.input_shape = tuple(input_shape)
        self.init_seed = init_seed
        self.normalize = normalizer
        self.trunk = trunk
        self.head = IncrementalHead(trunk.feature_dim())

    @property
    def n_classes(self):
        return self.head.n_classes

    @property
    def feature_dim(self):
        return self.trunk.feature_dim()

    def expand(self, n_new):
        """Add ``n_new`` output units with a deterministic, block-specific init."""
        g = torch.Generator().manual_seed(self.init_seed * 1000 + 1 + len(self.head.blocks))
        return self.head.expand(n_new, g)

    def features(self, x):
        _check_input(self, x)
        return self.trunk(self.normalize(x))

    def forward(self, x):
        return self.head(self.features(x))


def _check_input(model, x):
    if tuple(x.shape[1:]) != model.input_shape:
        raise InvalidArgument(f"expected input [B, {', '.join(map(str, model.input_shape))}], "
                              f"got {list(x.shape)}")


def _xavier_init(module, generator):
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.Linear)):
            nn.init.xavier_uniform_(m.weight, generator=generator)
            if m.bias is not None:
                nn.init.zeros_(m.bias)


def init_model(architecture_id, n_classes, init_seed=0, input_shape=(3, 32, 32),
               mean=None, std=None, **trunk_kwargs):
    """Build a classifier with Xavier-initialised weights, fully determined by ``init_seed``.

    ``mean``/``std`` set the fixed standardization layer; by default the
    convolutional models standardize with mean 0.5 / std 0.25 and the
    linear/mlp models see raw pixels.
    """
    if n_classes < 2:
        raise InvalidArgument("n_classes must be >= 2")
    input_shape = tuple(input_shape)
    if architecture_id == "linear":
        trunk = Flatten(input_shape)
    elif architecture_id == "mlp":
        trunk = MLPTrunk(input_shape, **trunk_kwargs)
    elif architecture_id == "small-cnn":
        trunk = SmallCNN(input_shape, **trunk_kwargs)
    elif architecture_id == "resnet32":
        trunk = ResNet32(input_shape, **trunk_kwargs)
    else:
        raise UnsupportedArchitecture(f"unknown architecture {architecture_id!r}; "
                                      f"choose from {ARCHITECTURES}")
    if mean is None and architecture_id in ("small-cnn", "resnet32"):
        mean, std = [0.5] * input_shape[0], [0.25] * input_shape[0]
    normalizer = Standardize(mean, std, input_shape[0])
    _xavier_init(trunk, torch.Generator().manual_seed(init_seed))
    model = Classifier(architecture_id, input_shape, trunk, normalizer, init_seed)
    model.expand(n_classes)
    return model


def forward(model, images):
    """Logits and penultimate features in inference mode (model mode is restored)."""
    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            feats = model.features(torch.as_tensor(images))
            logits = model.head(feats)
    finally:
        model.train(was_training)
    return ForwardOutput(logits, feats)


@dataclass
class LossAndGrads:
    loss: float
    param_grads: dict
    input_grads: torch.Tensor


def loss_and_grads(model, images, labels):
    """Mean cross-entropy and its exact gradients w.r.t. parameters and inputs.

    Does not touch ``.grad`` on the model's parameters.
    """
    x = torch.as_tensor(images).detach().clone().requires_grad_(True)
    labels = torch.as_tensor(labels)
    if labels.numel() and (labels.min() < 0 or labels.max() >= model.n_classes):
        raise InvalidArgument("labels outside the model's class range")
    logits = model(x)
    if not torch.isfinite(logits).all():
        raise NumericFailure("non-finite logits")
    loss = F.cross_entropy(logits, labels)
    names, params = zip(*[(n, p) for n, p in model.named_parameters() if p.requires_grad])
    grads = torch.autograd.grad(loss, (x,) + params)
    return LossAndGrads(loss.item(), dict(zip(names, grads[1:])), grads[0])


class eval_mode:
    """Context manager putting a model in eval mode and restoring its prior mode."""

    def __init__(self, model):
        self.model = model

    def __enter__(self):
        self.was_training = self.model.training
        self.model.eval()
        return self.model

    def __exit__(self, *exc):
        self.model.train(self.was_training)
        return False
