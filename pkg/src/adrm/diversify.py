"""Adversarial diversification of rehearsal batches.

A memory batch is perturbed with one FGSM step using an independent,
uniformly drawn epsilon per sample. Perturbed samples the model now
misclassifies form the *fooled* subset, the rest the *resisted* subset;
``mix_rehearsal`` appends ``floor(r * B)`` of each to the clean batch.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

from .attacks import fgsm, predict
from .errors import InvalidArgument


@dataclass(frozen=True)
class DiversificationSpec:
    ratio: float = 0.1
    epsilon_low: float = 1 / 255
    epsilon_high: float = 16 / 255
    rng_seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.ratio <= 1.0:
            raise InvalidArgument(f"ratio must be in [0, 1], got {self.ratio}")
        if not 0.0 <= self.epsilon_low <= self.epsilon_high:
            raise InvalidArgument("need 0 <= epsilon_low <= epsilon_high")


@dataclass
class DiversifiedBatch:
    originals: torch.Tensor
    labels: torch.Tensor
    perturbed: torch.Tensor
    epsilons: torch.Tensor
    fooled_mask: torch.Tensor

    @property
    def fooled_idx(self):
        return torch.nonzero(self.fooled_mask).flatten()

    @property
    def resisted_idx(self):
        return torch.nonzero(~self.fooled_mask).flatten()

    @property
    def fooled(self):
        i = self.fooled_idx
        return self.perturbed[i], self.labels[i]

    @property
    def resisted(self):
        i = self.resisted_idx
        return self.perturbed[i], self.labels[i]

    def diagnostics(self):
        n = len(self.labels)
        n_fooled = int(self.fooled_mask.sum())
        return {
            "n_fooled": n_fooled,
            "n_resisted": n - n_fooled,
            "mean_epsilon": float(self.epsilons.mean()),
            "fooling_rate": n_fooled / n,
        }


def draw_epsilons(n, spec, rng):
    """Per-sample epsilons from Uniform(epsilon_low, epsilon_high)."""
    return torch.from_numpy(rng.uniform(spec.epsilon_low, spec.epsilon_high, size=n))


def diversify(model, images, labels, spec, rng=None, loss_fn=None):
    """FGSM-perturb a memory batch and split it by post-perturbation correctness.

    ``rng`` is the epsilon stream (int seed or ``numpy.random.Generator``);
    it defaults to ``spec.rng_seed``.
    """
    images = torch.as_tensor(images)
    labels = torch.as_tensor(labels)
    if len(labels) == 0:
        raise InvalidArgument("cannot diversify an empty batch")
    rng = np.random.default_rng(spec.rng_seed if rng is None else rng)
    eps = draw_epsilons(len(labels), spec, rng).to(images.dtype)
    perturbed = fgsm(model, images, labels, eps, loss_fn)
    fooled = predict(model, perturbed) != labels
    return DiversifiedBatch(images, labels, perturbed, eps, fooled)


def mix_rehearsal(images, labels, diversified, ratio, rng):
    """Append up to ``floor(ratio * B)`` fooled and resisted samples to the clean batch.

    A subset smaller than the quota contributes all of its samples; the
    shortfall is not borrowed from the other subset.
    """
    if not 0.0 <= ratio <= 1.0:
        raise InvalidArgument(f"ratio must be in [0, 1], got {ratio}")
    images = torch.as_tensor(images)
    labels = torch.as_tensor(labels)
    quota = math.floor(ratio * len(labels) + 1e-9)
    if quota == 0:
        return images, labels
    rng = np.random.default_rng(rng)
    parts_x, parts_y = [images], [labels]
    for idx in (diversified.fooled_idx, diversified.resisted_idx):
        take = min(quota, len(idx))
        if take:
            chosen = idx[torch.from_numpy(rng.choice(len(idx), size=take, replace=False))]
            parts_x.append(diversified.perturbed[chosen])
            parts_y.append(diversified.labels[chosen])
    return torch.cat(parts_x), torch.cat(parts_y)
