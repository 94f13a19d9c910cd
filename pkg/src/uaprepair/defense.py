"""Democratic Training and adversarial-training baselines."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import torch
import torch.nn.functional as F

from .data import LabeledDataset
from .entropy import entropy_of_activations
from .model import NumericalError, make_optimizer
from .perturbation import Perturbation, clamp_to_budget

log = logging.getLogger(__name__)

BASELINE_MODES = ("targeted_pgd", "nontargeted_pgd", "known_uap")


@dataclass
class DefenseConfig:
    alpha: float = 0.5
    epochs: int = 5
    sg_iterations: int = 4
    epsilon: float = 10 / 255
    learning_rate: float = 0.01
    batch_size: int = 32
    probe: str | None = None  # None -> deepest probe
    seed: int = 0
    optimizer_kind: str = "sgd"
    momentum: float = 0.9

    def __post_init__(self):
        if not 0.0 < self.alpha < 1.0:
            raise ValueError(f"alpha must lie in (0, 1), got {self.alpha}")
        if self.epochs < 1:
            raise ValueError("epochs must be positive")
        if self.sg_iterations < 0:
            raise ValueError("sg_iterations must be non-negative")
        if not self.epsilon > 0:
            raise ValueError("epsilon must be positive")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be positive")


@dataclass
class TrainingLog:
    """Per-batch rows: epoch, batch, combined loss, clean loss, low-entropy loss, generated-sample entropy."""

    rows: list = field(default_factory=list)
    columns = ("epoch", "batch", "loss", "clean_loss", "low_entropy_loss", "generated_entropy")

    def add(self, **row):
        self.rows.append(row)

    def write(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=self.columns, delimiter="\t")
            w.writeheader()
            w.writerows(self.rows)
        return path

    def column(self, name):
        return [r[name] for r in self.rows]


def combined_loss(alpha: float, low_entropy_loss, clean_loss):
    return alpha * low_entropy_loss + (1.0 - alpha) * clean_loss


def _frozen(model):
    class _Ctx:
        def __enter__(self):
            self.flags = [p.requires_grad for p in model.parameters()]
            for p in model.parameters():
                p.requires_grad_(False)

        def __exit__(self, *exc):
            for p, f in zip(model.parameters(), self.flags):
                p.requires_grad_(f)

    return _Ctx()


def sample_generator(batch: torch.Tensor, model, m: int, eps: float, probe: str | None = None) -> torch.Tensor:
    """Move each image toward lower entropy at ``probe`` while staying in the eps-ball.

    ``m`` signed-gradient steps of size ``eps / 4`` on the negated layer
    entropy, each followed by projection onto the ball around ``batch`` and
    onto [0, 1].
    """
    if m < 1:
        raise ValueError("sample generator needs at least one iteration")
    probe = probe or model.deepest_probe
    if probe not in model.probe_names:
        raise KeyError(f"unknown probe {probe!r}; available: {model.probe_names}")
    was_training = model.training
    model.eval()
    x = batch.detach()
    with _frozen(model):
        for _ in range(m):
            x = x.clone().requires_grad_(True)
            _, acts = model.forward_with_probes(x, [probe])
            neg_entropy = -entropy_of_activations(acts[probe]).sum()
            (g,) = torch.autograd.grad(neg_entropy, x)
            x = clamp_to_budget(batch, x.detach() + (eps / 4) * g.sign(), eps)
    model.train(was_training)
    return x.detach()


def _batches(n, batch_size, gen):
    order = torch.randperm(n, generator=gen)
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]


def democratic_training(model, clean_set: LabeledDataset, cfg: DefenseConfig,
                        training_log: TrainingLog | None = None):
    """Finetune ``model`` on a small clean set mixed with its own low-entropy samples.

    Each batch contributes ``alpha * CE(low_entropy, y) + (1 - alpha) * CE(clean, y)``
    where both terms use the clean samples' true labels.
    """
    if clean_set.split_tag != "clean_subset":
        raise ValueError(f"democratic_training expects a clean_subset split, got {clean_set.split_tag!r}")
    if cfg.sg_iterations < 1:
        raise ValueError("sample generator needs at least one iteration")
    probe = cfg.probe or model.deepest_probe
    gen = torch.Generator().manual_seed(cfg.seed)
    opt = make_optimizer(model.parameters(), cfg.learning_rate, cfg.optimizer_kind, cfg.momentum)
    for epoch in range(cfg.epochs):
        for b, idx in enumerate(_batches(len(clean_set), cfg.batch_size, gen)):
            x, y = clean_set.images[idx], clean_set.labels[idx]
            x_en = sample_generator(x, model, cfg.sg_iterations, cfg.epsilon, probe)
            model.train()
            logits, acts = model.forward_with_probes(torch.cat([x_en, x]), [probe])
            k = len(x)
            loss_en = F.cross_entropy(logits[:k], y)
            loss_clean = F.cross_entropy(logits[k:], y)
            loss = combined_loss(cfg.alpha, loss_en, loss_clean)
            if not math.isfinite(loss.item()):
                raise NumericalError(f"democratic training loss diverged at epoch {epoch}, batch {b}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            if training_log is not None:
                with torch.no_grad():
                    h = float(entropy_of_activations(acts[probe][:k].detach()).mean())
                training_log.add(epoch=epoch, batch=b, loss=loss.item(), clean_loss=loss_clean.item(),
                                 low_entropy_loss=loss_en.item(), generated_entropy=h)
    model.eval()
    return model


def pgd_examples(model, x, y, m: int, eps: float, target_class: int | None = None) -> torch.Tensor:
    """Per-sample PGD with ``m`` steps of size ``eps / 4``, targeted when ``target_class`` is given."""
    model.eval()
    adv = x.detach()
    with _frozen(model):
        for _ in range(m):
            adv = adv.clone().requires_grad_(True)
            logits = model(adv)
            if target_class is None:
                obj = F.cross_entropy(logits, y)
            else:
                obj = -F.cross_entropy(logits, torch.full_like(y, int(target_class)))
            (g,) = torch.autograd.grad(obj, adv)
            adv = clamp_to_budget(x, adv.detach() + (eps / 4) * g.sign(), eps)
    return adv.detach()


def known_uap_batch(x: torch.Tensor, uaps, gen: torch.Generator, probability: float = 0.5):
    """Apply a uniformly chosen UAP to each sample with the given probability.

    Returns the batch and the boolean mask of perturbed rows.
    """
    hit = torch.rand(len(x), generator=gen) < probability
    which = torch.randint(len(uaps), (len(x),), generator=gen)
    out = x.clone()
    for i in torch.nonzero(hit).flatten().tolist():
        out[i] = uaps[int(which[i])].apply(x[i:i + 1])[0]
    return out, hit


def adversarial_training_baseline(model, data: LabeledDataset, mode: str, cfg: DefenseConfig,
                                  known_uaps: list[Perturbation] | None = None,
                                  target_class: int | None = None):
    """Finetune on adversarial inputs with the same iteration count, budget and data as Democratic Training.

    ``targeted_pgd`` and ``nontargeted_pgd`` craft per-sample PGD examples
    on the fly; ``known_uap`` perturbs each sample with probability 0.5
    using a uniformly chosen precomputed UAP.
    """
    if mode not in BASELINE_MODES:
        raise ValueError(f"unknown mode {mode!r}; choose from {BASELINE_MODES}")
    if mode == "known_uap" and not known_uaps:
        raise ValueError("known_uap mode needs at least one perturbation")
    if mode == "targeted_pgd" and target_class is None:
        raise ValueError("targeted_pgd mode needs the attack target class")
    gen = torch.Generator().manual_seed(cfg.seed)
    uap_gen = torch.Generator().manual_seed(cfg.seed + 1)
    opt = make_optimizer(model.parameters(), cfg.learning_rate, cfg.optimizer_kind, cfg.momentum)
    for epoch in range(cfg.epochs):
        for b, idx in enumerate(_batches(len(data), cfg.batch_size, gen)):
            x, y = data.images[idx], data.labels[idx]
            if mode == "known_uap":
                x_adv, _ = known_uap_batch(x, known_uaps, uap_gen)
            else:
                tc = target_class if mode == "targeted_pgd" else None
                x_adv = pgd_examples(model, x, y, cfg.sg_iterations, cfg.epsilon, tc)
            model.train()
            loss = F.cross_entropy(model(x_adv), y)
            if not math.isfinite(loss.item()):
                raise NumericalError(f"{mode} training loss diverged at epoch {epoch}, batch {b}")
            opt.zero_grad()
            loss.backward()
            opt.step()
    model.eval()
    return model
