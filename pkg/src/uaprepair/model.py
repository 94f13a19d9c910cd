"""Classifiers with named probe layers, baseline training and checkpoints."""

from __future__ import annotations

import json
import logging
import math
import time
from collections import OrderedDict
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable

import torch
import torch.nn as nn
import torch.nn.functional as F

from . import serialization
from .data import LabeledDataset

log = logging.getLogger(__name__)

ARCHITECTURES = ("small_cnn", "wide_small", "mlp")


class NumericalError(RuntimeError):
    """A loss became NaN or infinite during optimisation."""


class ProbedClassifier(nn.Module):
    """Feed-forward classifier built from named blocks.

    Each block ends at a probe point, so the activation captured under a
    probe name is exactly the tensor fed to the next block. The final block
    (``logits``) is never a probe.
    """

    def __init__(self, arch_id, input_shape, num_classes, blocks, probe_names, seed=0):
        super().__init__()
        self.arch_id = arch_id
        self.input_shape = tuple(int(v) for v in input_shape)
        self.num_classes = int(num_classes)
        self.seed = seed
        # module keys cannot contain dots, public block names can
        self.block_names = list(blocks.keys())
        self.blocks = nn.ModuleDict([(n.replace(".", "_"), b) for n, b in blocks.items()])
        self.probe_names = list(probe_names)
        names = self.block_names
        positions = [names.index(p) for p in self.probe_names]
        if positions != sorted(positions) or "logits" in self.probe_names:
            raise ValueError("probe names must follow block order and exclude the logits block")

    @property
    def deepest_probe(self) -> str:
        return self.probe_names[-1]

    def _check_input(self, x):
        if x.ndim != 4 or tuple(x.shape[1:]) != self.input_shape:
            raise ValueError(f"expected batch of shape (B, {', '.join(map(str, self.input_shape))}), "
                             f"got {tuple(x.shape)}")

    def forward(self, x):
        self._check_input(x)
        for block in self.blocks.values():
            x = block(x)
        return x

    def forward_with_probes(self, x, probes=None):
        """Return ``(logits, {probe: activation})``; ``probes=None`` captures all."""
        wanted = self.probe_names if probes is None else list(probes)
        unknown = [p for p in wanted if p not in self.probe_names]
        if unknown:
            raise KeyError(f"unknown probe(s) {unknown}; available: {self.probe_names}")
        self._check_input(x)
        captured = {}
        for name, block in zip(self.block_names, self.blocks.values()):
            x = block(x)
            if name in wanted:
                captured[name] = x
        return x, captured

    def num_parameters(self) -> int:
        return sum(p.numel() for p in self.parameters())

    def flat_parameters(self) -> torch.Tensor:
        return torch.cat([p.detach().reshape(-1) for p in self.parameters()])


class _Center(nn.Module):
    # maps [0, 1] pixels to roughly zero mean, unit scale
    def forward(self, x):
        return (x - 0.5) * 4.0


def _conv_blocks(c_in, widths, dense):
    c1, c2, c3 = widths
    return OrderedDict(
        [
            ("stage1.pool", nn.Sequential(_Center(), nn.Conv2d(c_in, c1, 3, padding=1), nn.ReLU(), nn.MaxPool2d(2))),
            ("stage2.pool", nn.Sequential(nn.Conv2d(c1, c2, 3, padding=1), nn.ReLU(), nn.MaxPool2d(2))),
            ("stage3.conv", nn.Sequential(nn.Conv2d(c2, c3, 3, padding=1), nn.ReLU())),
            ("final.pool", nn.Sequential(nn.AdaptiveAvgPool2d(1), nn.Flatten())),
            ("final.dense", nn.Sequential(nn.Linear(c3, dense), nn.ReLU())),
        ]
    )


def build_architecture(arch_id: str, input_shape, num_classes: int, seed: int = 0) -> ProbedClassifier:
    if arch_id not in ARCHITECTURES:
        raise ValueError(f"unknown architecture {arch_id!r}; choose from {ARCHITECTURES}")
    if len(input_shape) != 3 or min(input_shape) < 1:
        raise ValueError(f"input_shape must be (C, H, W), got {input_shape}")
    c, h, w = input_shape
    torch.manual_seed(seed)
    if arch_id in ("small_cnn", "wide_small"):
        if h < 4 or w < 4:
            raise ValueError(f"{arch_id} needs images of at least 4x4, got {h}x{w}")
        widths, dense = ((16, 32, 64), 128) if arch_id == "small_cnn" else ((32, 64, 128), 256)
        blocks = _conv_blocks(c, widths, dense)
        blocks["logits"] = nn.Linear(dense, num_classes)
        probes = ["stage1.pool", "stage2.pool", "stage3.conv", "final.pool", "final.dense"]
    else:
        d = c * h * w
        blocks = OrderedDict(
            [
                ("stage1.dense", nn.Sequential(_Center(), nn.Flatten(), nn.Linear(d, 256), nn.ReLU())),
                ("stage2.dense", nn.Sequential(nn.Linear(256, 128), nn.ReLU())),
                ("stage3.dense", nn.Sequential(nn.Linear(128, 128), nn.ReLU())),
                ("final.dense", nn.Sequential(nn.Linear(128, 64), nn.ReLU())),
                ("logits", nn.Linear(64, num_classes)),
            ]
        )
        probes = ["stage1.dense", "stage2.dense", "stage3.dense", "final.dense"]
    return ProbedClassifier(arch_id, input_shape, num_classes, blocks, probes, seed=seed)


def forward_with_probes(model: ProbedClassifier, batch, probes=None):
    return model.forward_with_probes(batch, probes)


def input_gradient(model: nn.Module, batch: torch.Tensor, scalar_loss_fn: Callable) -> torch.Tensor:
    """Gradient of ``scalar_loss_fn(model(batch))`` with respect to ``batch``."""
    x = batch.detach().clone().requires_grad_(True)
    loss = scalar_loss_fn(model(x))
    if not torch.is_tensor(loss) or loss.numel() != 1:
        raise ValueError("scalar_loss_fn must return a single-element tensor")
    if not loss.requires_grad:
        return torch.zeros_like(x)
    (grad,) = torch.autograd.grad(loss.reshape(()), x, allow_unused=True)
    return torch.zeros_like(x) if grad is None else grad


@dataclass
class TrainConfig:
    epochs: int = 3
    batch_size: int = 32
    learning_rate: float = 0.05
    seed: int = 0
    optimizer_kind: str = "sgd"
    momentum: float = 0.9

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be > 0")
        if self.optimizer_kind not in ("sgd", "sgd_momentum"):
            raise ValueError(f"optimizer_kind must be sgd or sgd_momentum, got {self.optimizer_kind!r}")


def make_optimizer(params, lr, kind="sgd", momentum=0.9):
    return torch.optim.SGD(params, lr=lr, momentum=momentum if kind == "sgd_momentum" else 0.0)


def train_baseline(model: ProbedClassifier, data: LabeledDataset, cfg: TrainConfig, history=None):
    """Train ``model`` in place with minibatch SGD on cross-entropy.

    Mean loss per epoch is appended to ``history`` when a list is passed.
    """
    if data.split_tag != "train":
        raise ValueError(f"train_baseline expects a train split, got {data.split_tag!r}")
    gen = torch.Generator().manual_seed(cfg.seed)
    opt = make_optimizer(model.parameters(), cfg.learning_rate, cfg.optimizer_kind, cfg.momentum)
    model.train()
    for epoch in range(cfg.epochs):
        t0 = time.time()
        total, count = 0.0, 0
        for xb, yb in data.batches(cfg.batch_size, gen):
            opt.zero_grad()
            loss = F.cross_entropy(model(xb), yb)
            if not torch.isfinite(loss):
                raise NumericalError(f"training loss became {loss.item()} in epoch {epoch}")
            loss.backward()
            opt.step()
            total += loss.item() * len(yb)
            count += len(yb)
        mean = total / count
        if history is not None:
            history.append(mean)
        log.info("epoch %d loss %.4f (%.1fs)", epoch, mean, time.time() - t0)
    model.eval()
    return model


@torch.no_grad()
def predict(model: nn.Module, images: torch.Tensor, batch_size: int = 256) -> torch.Tensor:
    model.eval()
    out = [model(images[i:i + batch_size]).argmax(dim=1) for i in range(0, len(images), batch_size)]
    return torch.cat(out) if out else torch.empty(0, dtype=torch.long)


def accuracy(model: nn.Module, data: LabeledDataset, batch_size: int = 256) -> float:
    pred = predict(model, data.images, batch_size)
    return int((pred == data.labels).sum()) / len(data)


# --------------------------------------------------------------------------- checkpoints


def save_checkpoint(model: ProbedClassifier, path, extra=None) -> Path:
    """Write ``manifest.json`` plus one ``<param>.bin`` blob per tensor."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    params = OrderedDict((k, v.detach().to(torch.float32)) for k, v in model.state_dict().items())
    files = {}
    for name, tensor in params.items():
        fname = name.replace("/", "_") + ".bin"
        serialization.write_tensor(path / fname, name, tensor)
        files[name] = fname
    manifest = {
        "arch_id": model.arch_id,
        "input_shape": list(model.input_shape),
        "num_classes": model.num_classes,
        "probe_names": model.probe_names,
        "seed": model.seed,
        "parameters": files,
        "checksum": serialization.checksum(params.values()),
        "created": time.strftime("%Y-%m-%dT%H:%M:%S"),
    }
    manifest.update(extra or {})
    (path / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return path


def load_checkpoint(path) -> ProbedClassifier:
    path = Path(path)
    try:
        manifest = json.loads((path / "manifest.json").read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise IOError(f"cannot read checkpoint manifest in {path}: {exc}") from exc
    model = build_architecture(manifest["arch_id"], manifest["input_shape"], manifest["num_classes"],
                               manifest.get("seed", 0))
    state = OrderedDict()
    for name, fname in manifest["parameters"].items():
        got_name, tensor = serialization.read_tensor(path / fname)
        if got_name != name:
            raise IOError(f"{fname}: header names {got_name!r}, manifest expects {name!r}")
        state[name] = tensor
    model.load_state_dict(state)
    model.eval()
    return model


def parameter_checksum(model: nn.Module) -> str:
    return serialization.checksum(t.detach() for t in model.state_dict().values())


def entropy_bound(width: int) -> float:
    return math.log(width)
