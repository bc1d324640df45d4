"""FGSM and PGD (L-inf / L2) input-space attacks in [0, 1] pixel space."""

from __future__ import annotations

import csv
from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .errors import InvalidArgument, NumericFailure
from .models import eval_mode

ATTACK_KINDS = ("fgsm", "pgd_linf", "pgd_l2")


@dataclass(frozen=True)
class AttackSpec:
    """Attack parameters; ``steps``/``step_size`` default to 10 and 2.5*eps/steps for PGD."""

    kind: str
    epsilon: float
    steps: int | None = None
    step_size: float | None = None
    random_start: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ATTACK_KINDS:
            raise InvalidArgument(f"unknown attack kind {self.kind!r}")
        if self.epsilon < 0:
            raise InvalidArgument("epsilon must be >= 0")
        steps = 1 if self.kind == "fgsm" else (10 if self.steps is None else self.steps)
        if self.kind == "fgsm" and self.steps not in (None, 1):
            raise InvalidArgument("fgsm is single-step")
        if steps < 1:
            raise InvalidArgument("steps must be >= 1")
        object.__setattr__(self, "steps", steps)
        if self.step_size is None:
            object.__setattr__(self, "step_size", 2.5 * self.epsilon / steps)
        if self.kind != "fgsm" and self.epsilon > 0 and self.step_size <= 0:
            raise InvalidArgument("step_size must be > 0")

    @property
    def norm(self):
        return "l2" if self.kind == "pgd_l2" else "linf"


def input_gradient(model, images, labels, loss_fn=None):
    """Gradient of the batch loss w.r.t. the inputs, leaving parameter grads untouched."""
    x = images.detach().clone().requires_grad_(True)
    out = model(x)
    loss = F.cross_entropy(out, labels) if loss_fn is None else loss_fn(out, labels)
    (grad,) = torch.autograd.grad(loss, x)
    if not torch.isfinite(grad).all():
        raise NumericFailure("non-finite input gradient")
    return grad


def _per_sample(eps, x):
    eps = torch.as_tensor(eps, dtype=x.dtype)
    return eps.view(-1, *([1] * (x.dim() - 1))) if eps.dim() else eps


def fgsm(model, images, labels, epsilon, loss_fn=None):
    """One gradient-sign step, ``clip(x + eps * sign(grad_x loss), 0, 1)``.

    ``epsilon`` may be a scalar or a per-sample tensor of shape ``[B]``.
    The model is evaluated in eval mode and its mode is restored afterwards.
    """
    x = torch.as_tensor(images)
    eps = _per_sample(epsilon, x)
    if (eps < 0).any():
        raise InvalidArgument("epsilon must be >= 0")
    with eval_mode(model):
        grad = input_gradient(model, x, torch.as_tensor(labels), loss_fn)
    return (x + eps * grad.sign()).clamp(0.0, 1.0).detach()


def _l2_normalize(v):
    norms = v.flatten(1).norm(dim=1).clamp_min(1e-12)
    return v / norms.view(-1, *([1] * (v.dim() - 1)))


def _project(delta, eps, norm):
    if norm == "linf":
        return torch.maximum(torch.minimum(delta, eps), -eps)
    norms = delta.flatten(1).norm(dim=1).view(-1, *([1] * (delta.dim() - 1)))
    scale = torch.where(norms > eps, eps / norms.clamp_min(1e-12), torch.ones_like(norms))
    return delta * scale


def pgd(model, images, labels, spec, loss_fn=None):
    """Projected gradient ascent inside the ``spec.epsilon`` ball, clipped to [0, 1]."""
    if spec.kind == "fgsm":
        raise InvalidArgument("pgd requires a pgd_* AttackSpec")
    x = torch.as_tensor(images).detach()
    labels = torch.as_tensor(labels)
    eps = _per_sample(spec.epsilon, x)
    delta = torch.zeros_like(x)
    if spec.random_start and spec.epsilon > 0:
        g = torch.Generator().manual_seed(spec.seed)
        if spec.norm == "linf":
            delta = (2 * torch.rand(x.shape, generator=g, dtype=x.dtype) - 1) * eps
        else:
            direction = _l2_normalize(torch.randn(x.shape, generator=g, dtype=x.dtype))
            radius = torch.rand(x.shape[0], generator=g, dtype=x.dtype) ** (1.0 / x[0].numel())
            delta = direction * radius.view(-1, *([1] * (x.dim() - 1))) * eps
        delta = (x + delta).clamp(0.0, 1.0) - x
    adv = x.clone()
    with eval_mode(model):
        for _ in range(spec.steps):
            grad = input_gradient(model, x + delta, labels, loss_fn)
            step = grad.sign() if spec.norm == "linf" else _l2_normalize(grad)
            delta = _project(delta + spec.step_size * step, eps, spec.norm)
            adv = (x + delta).clamp(0.0, 1.0)
            delta = adv - x
    return adv.detach()


def attack(model, images, labels, spec, loss_fn=None):
    if spec.kind == "fgsm":
        return fgsm(model, images, labels, spec.epsilon, loss_fn)
    return pgd(model, images, labels, spec, loss_fn)


def predict(model, images, batch_size=512):
    with eval_mode(model), torch.no_grad():
        return torch.cat([model(images[i:i + batch_size]).argmax(1)
                          for i in range(0, len(images), batch_size)])


def evaluate_under_attack(model, images, labels, spec, batch_size=256):
    """Fraction of examples still classified correctly after the attack."""
    images = torch.as_tensor(images)
    labels = torch.as_tensor(labels)
    if len(labels) == 0:
        raise InvalidArgument("cannot evaluate on an empty subset")
    correct = 0
    for i in range(0, len(labels), batch_size):
        x, y = images[i:i + batch_size], labels[i:i + batch_size]
        x_adv = x if spec.epsilon == 0 else attack(model, x, y, spec)
        correct += int((predict(model, x_adv) == y).sum())
    return correct / len(labels)


SWEEP_HEADER = ("model_id", "attack", "epsilon", "accuracy", "n", "seed")


def write_attack_sweep(path, rows):
    """Write robustness rows (dicts keyed by :data:`SWEEP_HEADER`) as CSV."""
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=SWEEP_HEADER)
        w.writeheader()
        for row in rows:
            w.writerow({k: row[k] for k in SWEEP_HEADER})
