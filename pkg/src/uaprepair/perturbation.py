"""Universal perturbations: container, application, projection and file format."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

NORM_KINDS = ("linf",)


@dataclass
class Perturbation:
    """A universal perturbation.

    Without a mask ``delta`` is additive and bounded by ``epsilon`` in l-inf.
    With a boolean ``patch_mask`` (H x W) the masked pixels are *replaced* by
    ``delta`` (values in [0, 1]) and everything off the mask is zero.
    """

    delta: torch.Tensor
    epsilon: float
    norm_kind: str = "linf"
    patch_mask: torch.Tensor | None = None
    target_class: int | None = None
    seed: int = 0
    name: str = "uap"
    kind: str = "targeted"
    history: list = field(default_factory=list, repr=False, compare=False)

    def __post_init__(self):
        if self.norm_kind not in NORM_KINDS:
            raise ValueError(f"norm_kind must be one of {NORM_KINDS}")
        if self.epsilon < 0:
            raise ValueError("epsilon must be non-negative")
        if self.patch_mask is not None:
            self.patch_mask = self.patch_mask.to(torch.bool)

    @property
    def shape(self):
        return tuple(self.delta.shape)

    def linf(self) -> float:
        return float(self.delta.abs().max()) if self.delta.numel() else 0.0

    def check(self) -> None:
        """Raise ``ValueError`` if the budget or mask invariant is broken."""
        if self.patch_mask is None:
            if self.linf() > float(torch.tensor(self.epsilon, dtype=torch.float32)):
                raise ValueError(f"|delta|_inf = {self.linf()} exceeds epsilon = {self.epsilon}")
        else:
            off = self.delta[:, ~self.patch_mask]
            if off.numel() and float(off.abs().max()) != 0.0:
                raise ValueError("patch perturbation is non-zero outside its mask")
            if float(self.delta.min()) < 0.0 or float(self.delta.max()) > 1.0:
                raise ValueError("patch values must lie in [0, 1]")

    def apply(self, x: torch.Tensor) -> torch.Tensor:
        return apply_perturbation(x, self.delta, self.patch_mask)

    def as_input(self) -> torch.Tensor:
        """The perturbation on its own, shaped as a one-image batch."""
        d = self.delta if self.patch_mask is None else self.delta * self.patch_mask
        return d.unsqueeze(0)


def apply_perturbation(x, delta, mask=None):
    if mask is None:
        return (x + delta).clamp(0.0, 1.0)
    m = mask.to(x.dtype)
    return x * (1 - m) + delta * m


def project_linf(delta: torch.Tensor, eps: float) -> torch.Tensor:
    return delta.clamp(-eps, eps)


def clamp_to_budget(x_clean: torch.Tensor, x_pert: torch.Tensor, eps: float) -> torch.Tensor:
    """Project ``x_pert`` onto the l-inf ball of radius ``eps`` around ``x_clean`` and onto [0, 1]."""
    if not eps > 0:
        raise ValueError(f"eps must be positive, got {eps}")
    if x_clean.shape != x_pert.shape:
        raise ValueError(f"shape mismatch {tuple(x_clean.shape)} vs {tuple(x_pert.shape)}")
    r = torch.minimum(torch.maximum(x_pert, x_clean - eps), x_clean + eps)
    return r.clamp(0.0, 1.0)


def zero_perturbation(shape, eps=0.0, target_class=None, seed=0, kind="targeted") -> Perturbation:
    return Perturbation(torch.zeros(shape), float(eps), target_class=target_class, seed=seed, kind=kind)


def save_perturbation(pert: Perturbation, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = {
        "name": pert.name,
        "kind": pert.kind,
        "shape": list(pert.shape),
        "epsilon": pert.epsilon,
        "norm_kind": pert.norm_kind,
        "target_class": pert.target_class,
        "mask": pert.patch_mask is not None,
        "seed": pert.seed,
    }
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode() + b"\n")
        fh.write(np.ascontiguousarray(pert.delta.detach().numpy(), dtype="<f4").tobytes())
        if pert.patch_mask is not None:
            fh.write(np.packbits(pert.patch_mask.numpy().astype(np.uint8).reshape(-1)).tobytes())
    return path


def load_perturbation(path) -> Perturbation:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise IOError(f"cannot read perturbation file {path}: {exc}") from exc
    nl = raw.find(b"\n")
    try:
        header = json.loads(raw[:nl])
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise IOError(f"bad perturbation header in {path}") from exc
    shape = tuple(header["shape"])
    count = int(np.prod(shape))
    body = raw[nl + 1:]
    if len(body) < 4 * count:
        raise IOError(f"{path}: truncated perturbation data")
    delta = torch.from_numpy(np.frombuffer(body[: 4 * count], dtype="<f4").reshape(shape).copy())
    mask = None
    if header["mask"]:
        hw = shape[1] * shape[2]
        bits = np.frombuffer(body[4 * count:], dtype=np.uint8)
        if bits.size * 8 < hw:
            raise IOError(f"{path}: truncated patch mask")
        mask = torch.from_numpy(np.unpackbits(bits)[:hw].reshape(shape[1], shape[2]).astype(bool))
    return Perturbation(delta, header["epsilon"], header["norm_kind"], mask, header["target_class"],
                        header["seed"], header["name"], header.get("kind", "targeted"))
