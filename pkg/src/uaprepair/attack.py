"""Universal adversarial perturbation attacks.

All noise attacks take signed-gradient steps on a single shared ``delta`` over
minibatches of the attacker's data and project it back into the l-inf ball
after every step. They differ in the loss and in which samples contribute:

* ``targeted``     cross-entropy toward ``y_t`` on the samples that are not
                   yet fooled (fooled samples drop out of the step)
* ``spgd``         cross-entropy toward ``y_t`` averaged over the whole batch
* ``nontargeted``  negated cross-entropy on the true labels
* ``adaptive``     ``(1 - rho) * targeted loss - rho * deep-probe entropy``
* ``patch``        masked replacement of a small square, values kept in [0, 1]
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .data import LabeledDataset
from .entropy import probe_entropy
from .perturbation import (  # noqa: F401  (re-exported)
    Perturbation,
    apply_perturbation,
    clamp_to_budget,
    load_perturbation,
    project_linf,
    save_perturbation,
    zero_perturbation,
)

log = logging.getLogger(__name__)

ATTACK_KINDS = ("targeted", "spgd", "patch", "nontargeted", "adaptive")
CORNERS = ("top-left", "top-right", "bottom-left", "bottom-right")


@dataclass
class AttackConfig:
    iterations: int = 1
    step_size: float | None = None  # None -> epsilon / 10
    batch_size: int = 64
    seed: int = 0
    rho: float = 0.0
    epochs_over_data: int = 3
    patch_step: float = 0.05
    patch_corner: str = "top-left"

    def __post_init__(self):
        if self.iterations < 0 or self.epochs_over_data < 0:
            raise ValueError("iterations and epochs_over_data must be non-negative")
        if self.batch_size < 1:
            raise ValueError("batch_size must be positive")
        if not 0.0 <= self.rho < 1.0:
            raise ValueError(f"rho must lie in [0, 1), got {self.rho}")
        if self.patch_corner not in CORNERS:
            raise ValueError(f"patch_corner must be one of {CORNERS}")

    def step_for(self, eps: float) -> float:
        step = eps / 10 if self.step_size is None else self.step_size
        if step > eps:
            raise ValueError(f"step_size {step} exceeds epsilon {eps}")
        return step


def _check_target(y_t, num_classes):
    if not 0 <= int(y_t) < num_classes:
        raise ValueError(f"target class {y_t} outside [0, {num_classes})")


def _steps(images, cfg: AttackConfig):
    gen = torch.Generator().manual_seed(cfg.seed)
    n = len(images)
    for _ in range(cfg.epochs_over_data):
        order = torch.randperm(n, generator=gen)
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            for _ in range(cfg.iterations):
                yield idx


def _signed_descent(model, images, labels, delta, loss_fn, step, cfg, project, history=None):
    model.eval()
    for p in model.parameters():
        p.requires_grad_(False)
    try:
        for idx in _steps(images, cfg):
            d = delta.clone().requires_grad_(True)
            loss = loss_fn(images[idx], labels[idx], d)
            if loss is None:
                continue
            (grad,) = torch.autograd.grad(loss, d)
            delta = project(delta - step * grad.sign())
            if history is not None:
                history.append(float(delta.abs().max()))
    finally:
        for p in model.parameters():
            p.requires_grad_(True)
    return delta


def _attack_pool(data: LabeledDataset, y_t=None):
    if y_t is None:
        return data.images, data.labels
    keep = data.labels != int(y_t)
    return data.images[keep], data.labels[keep]


def _targeted_loss(model, y_t, rho=0.0, probe=None):
    def loss_fn(xb, _yb, d):
        x_adv = (xb + d).clamp(0.0, 1.0)
        if rho > 0:
            logits, acts = model.forward_with_probes(x_adv, [probe])
        else:
            logits = model(x_adv)
        target = torch.full((len(xb),), int(y_t), dtype=torch.long)
        ce = F.cross_entropy(logits, target, reduction="none")
        active = (logits.argmax(dim=1) != int(y_t)).to(ce.dtype)
        ce_term = (ce * active).sum() / len(xb)
        if rho > 0:
            from .entropy import entropy_of_activations

            ent = entropy_of_activations(acts[probe]).mean()
            return (1.0 - rho) * ce_term - rho * ent
        if not bool(active.any()):
            return None
        return ce_term

    return loss_fn


def craft_targeted_uap(model, data: LabeledDataset, y_t: int, eps: float, cfg: AttackConfig) -> Perturbation:
    """Targeted UAP by signed-gradient descent of cross-entropy toward ``y_t``."""
    return _craft_targeted(model, data, y_t, eps, cfg, rho=0.0, kind="targeted")


def craft_adaptive_uap(model, data: LabeledDataset, y_t: int, eps: float, cfg: AttackConfig,
                       probe: str | None = None) -> Perturbation:
    """Entropy-aware targeted UAP that also keeps deep-probe entropy high.

    Minimises ``(1 - rho) * CE(x + delta, y_t) - rho * H(x + delta)`` where
    ``H`` is the layer entropy at ``probe`` (the deepest probe by default).
    With ``rho == 0`` this is exactly :func:`craft_targeted_uap`.
    """
    if not 0.0 <= cfg.rho < 1.0:
        raise ValueError(f"rho must lie in [0, 1), got {cfg.rho}")
    return _craft_targeted(model, data, y_t, eps, cfg, rho=cfg.rho, kind="adaptive",
                           probe=probe or model.deepest_probe)


def _craft_targeted(model, data, y_t, eps, cfg, rho, kind, probe=None):
    _check_target(y_t, data.num_classes)
    if eps < 0:
        raise ValueError("epsilon must be non-negative")
    shape = data.input_shape
    if eps == 0:
        return zero_perturbation(shape, 0.0, int(y_t), cfg.seed, kind)
    step = cfg.step_for(eps)
    images, labels = _attack_pool(data, y_t)
    delta = torch.zeros(shape)
    delta = _signed_descent(model, images, labels, delta, _targeted_loss(model, y_t, rho, probe), step, cfg,
                            lambda d: project_linf(d, eps))
    return Perturbation(delta.detach(), float(eps), target_class=int(y_t), seed=cfg.seed, kind=kind,
                        name=f"{kind}-t{int(y_t)}")


def craft_spgd_uap(model, data: LabeledDataset, y_t: int, eps: float, cfg: AttackConfig) -> Perturbation:
    """Stochastic PGD: batch-averaged cross-entropy toward ``y_t``, projected every step.

    ``Perturbation.history`` records ``|delta|_inf`` after each step.
    """
    _check_target(y_t, data.num_classes)
    if eps < 0:
        raise ValueError("epsilon must be non-negative")
    if eps == 0:
        return zero_perturbation(data.input_shape, 0.0, int(y_t), cfg.seed, "spgd")
    step = cfg.step_for(eps)
    images, labels = _attack_pool(data, y_t)

    def loss_fn(xb, _yb, d):
        target = torch.full((len(xb),), int(y_t), dtype=torch.long)
        return F.cross_entropy(model((xb + d).clamp(0.0, 1.0)), target)

    history = []
    delta = _signed_descent(model, images, labels, torch.zeros(data.input_shape), loss_fn, step, cfg,
                            lambda d: project_linf(d, eps), history)
    pert = Perturbation(delta.detach(), float(eps), target_class=int(y_t), seed=cfg.seed, kind="spgd",
                        name=f"spgd-t{int(y_t)}")
    pert.history = history
    return pert


def craft_nontargeted_uap(model, data: LabeledDataset, eps: float, cfg: AttackConfig) -> Perturbation:
    """Non-targeted UAP: ascend cross-entropy on the true labels."""
    if eps < 0:
        raise ValueError("epsilon must be non-negative")
    if eps == 0:
        return zero_perturbation(data.input_shape, 0.0, None, cfg.seed, "nontargeted")
    step = cfg.step_for(eps)

    def loss_fn(xb, yb, d):
        return -F.cross_entropy(model((xb + d).clamp(0.0, 1.0)), yb)

    delta = _signed_descent(model, data.images, data.labels, torch.zeros(data.input_shape), loss_fn, step, cfg,
                            lambda d: project_linf(d, eps))
    return Perturbation(delta.detach(), float(eps), target_class=None, seed=cfg.seed, kind="nontargeted",
                        name="nontargeted")


def patch_side(fraction: float, height: int, width: int) -> int:
    """Smallest square side whose area covers ``fraction`` of the image."""
    return math.ceil(math.sqrt(fraction * height * width) - 1e-12)


def patch_mask(shape, fraction: float, corner: str = "top-left") -> torch.Tensor:
    if not 0 < fraction <= 0.1:
        raise ValueError(f"patch_area_fraction must lie in (0, 0.1], got {fraction}")
    _, h, w = shape
    s = patch_side(fraction, h, w)
    if s > min(h, w):
        raise ValueError(f"patch side {s} exceeds image size {h}x{w}")
    mask = torch.zeros(h, w, dtype=torch.bool)
    rows = slice(0, s) if corner.startswith("top") else slice(h - s, h)
    cols = slice(0, s) if corner.endswith("left") else slice(w - s, w)
    mask[rows, cols] = True
    return mask


def craft_patch_uap(model, data: LabeledDataset, y_t: int, patch_area_fraction: float,
                    cfg: AttackConfig) -> Perturbation:
    """Localized universal patch toward ``y_t``, initialised to mid-gray."""
    _check_target(y_t, data.num_classes)
    mask = patch_mask(data.input_shape, patch_area_fraction, cfg.patch_corner)
    m = mask.to(torch.float32)
    delta = 0.5 * m.expand(data.input_shape).clone()
    images, labels = _attack_pool(data, y_t)

    def loss_fn(xb, _yb, d):
        target = torch.full((len(xb),), int(y_t), dtype=torch.long)
        return F.cross_entropy(model(apply_perturbation(xb, d, mask)), target)

    delta = _signed_descent(model, images, labels, delta, loss_fn, cfg.patch_step, cfg,
                            lambda d: (d.clamp(0.0, 1.0) * m))
    return Perturbation(delta.detach(), 1.0, patch_mask=mask, target_class=int(y_t), seed=cfg.seed,
                        kind="patch", name=f"patch-t{int(y_t)}")


def craft(kind: str, model, data: LabeledDataset, y_t, eps, cfg: AttackConfig, patch_fraction=0.02,
          probe=None) -> Perturbation:
    """Dispatch on ``kind`` (one of :data:`ATTACK_KINDS`)."""
    if kind == "targeted":
        return craft_targeted_uap(model, data, y_t, eps, cfg)
    if kind == "spgd":
        return craft_spgd_uap(model, data, y_t, eps, cfg)
    if kind == "patch":
        return craft_patch_uap(model, data, y_t, patch_fraction, cfg)
    if kind == "nontargeted":
        return craft_nontargeted_uap(model, data, eps, cfg)
    if kind == "adaptive":
        return craft_adaptive_uap(model, data, y_t, eps, cfg, probe)
    raise ValueError(f"unknown attack kind {kind!r}; choose from {ATTACK_KINDS}")


__all__ = [
    "ATTACK_KINDS", "AttackConfig", "Perturbation", "apply_perturbation", "clamp_to_budget", "craft",
    "craft_adaptive_uap", "craft_nontargeted_uap", "craft_patch_uap", "craft_spgd_uap", "craft_targeted_uap",
    "load_perturbation", "patch_mask", "patch_side", "probe_entropy", "save_perturbation",
]
