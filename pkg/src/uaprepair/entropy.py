"""Layer-wise entropy and the clean / perturbed / UAP-only spectrum analysis.

A probe's post-activation tensor for one sample is flattened, passed through
a softmax, and its Shannon entropy is measured in nats.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .perturbation import Perturbation

POPULATIONS = ("clean", "perturbed", "uap")


def entropy_of_activations(act: torch.Tensor) -> torch.Tensor:
    """Differentiable per-sample entropy of ``softmax(flatten(act))``."""
    flat = act.reshape(act.shape[0], -1)
    logp = F.log_softmax(flat, dim=1)
    return -(logp.exp() * logp).sum(dim=1)


def layer_entropy(activation) -> float:
    """Entropy (nats) of one sample's probe activation."""
    a = torch.as_tensor(activation).detach().to(torch.float64).reshape(-1)
    if a.numel() == 0:
        raise ValueError("empty activation")
    if not torch.isfinite(a).all():
        raise ValueError("activation contains NaN or Inf")
    return float(entropy_of_activations(a.unsqueeze(0))[0])


def probe_entropy(model, batch, probe) -> torch.Tensor:
    """Per-sample entropy at ``probe``, keeping the autograd graph."""
    _, acts = model.forward_with_probes(batch, [probe])
    return entropy_of_activations(acts[probe])


@dataclass
class EntropySpectrum:
    probe_name: str
    values: np.ndarray
    layer_width: int
    summary: dict = field(default_factory=dict)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if not self.summary and self.values.size:
            q = np.percentile(self.values, [0, 25, 50, 75, 100])
            self.summary = dict(zip(("min", "q1", "median", "q3", "max"), (float(v) for v in q)))

    @property
    def median(self) -> float:
        return self.summary["median"]


@torch.no_grad()
def batch_spectrum(model, batch, probe_names, batch_size: int = 256) -> list[EntropySpectrum]:
    model.eval()
    values = {p: [] for p in probe_names}
    widths = {}
    for start in range(0, len(batch), batch_size):
        _, acts = model.forward_with_probes(batch[start:start + batch_size], probe_names)
        for p in probe_names:
            a = acts[p].double()
            widths[p] = int(a[0].numel())
            values[p].append(entropy_of_activations(a))
    return [EntropySpectrum(p, torch.cat(values[p]).numpy(), widths[p]) for p in probe_names]


def relative_gap(clean_median: float, perturbed_median: float) -> float:
    """(clean - perturbed) / clean; positive when the perturbation lowers entropy."""
    return (clean_median - perturbed_median) / clean_median


@dataclass
class AnalysisReport:
    probes: list
    spectra: dict  # (population, probe) -> EntropySpectrum
    gap: float
    gap_probe: str
    metadata: dict = field(default_factory=dict)

    def gaps(self) -> dict:
        return {p: relative_gap(self.spectra["clean", p].median, self.spectra["perturbed", p].median)
                for p in self.probes}

    def quartile_rows(self):
        for p in self.probes:
            for pop in POPULATIONS:
                s = self.spectra[pop, p]
                yield {"probe": p, "population": pop, "width": s.layer_width,
                       "max_entropy": math.log(s.layer_width), **s.summary}

    def write(self, path) -> Path:
        """One JSON record per probe x population, then a trailing summary record."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w") as fh:
            for p in self.probes:
                for pop in POPULATIONS:
                    s = self.spectra[pop, p]
                    fh.write(json.dumps({"probe": p, "population": pop, "width": s.layer_width,
                                         "summary": s.summary, "values": s.values.tolist()}) + "\n")
            fh.write(json.dumps({"gap": self.gap, "gap_probe": self.gap_probe, "gaps": self.gaps(),
                                 "metadata": self.metadata}) + "\n")
        return path

    def write_quartile_table(self, path) -> Path:
        path = Path(path)
        cols = ["probe", "population", "width", "max_entropy", "min", "q1", "median", "q3", "max"]
        lines = ["\t".join(cols)]
        for row in self.quartile_rows():
            lines.append("\t".join(f"{row[c]:.6f}" if isinstance(row[c], float) else str(row[c]) for c in cols))
        path.write_text("\n".join(lines) + "\n")
        return path

    @classmethod
    def read(cls, path) -> "AnalysisReport":
        records = [json.loads(line) for line in Path(path).read_text().splitlines() if line.strip()]
        tail = records.pop()
        spectra, probes = {}, []
        for r in records:
            spectra[r["population"], r["probe"]] = EntropySpectrum(r["probe"], r["values"], r["width"], r["summary"])
            if r["probe"] not in probes:
                probes.append(r["probe"])
        return cls(probes, spectra, tail["gap"], tail["gap_probe"], tail.get("metadata", {}))


def run_entropy_analysis(model, clean_batch: torch.Tensor, uap: Perturbation, probes) -> AnalysisReport:
    """Entropy spectra of clean inputs, the same inputs with ``uap`` applied, and ``uap`` alone.

    The gap statistic is measured at the deepest of ``probes``.
    """
    probes = list(probes)
    if not probes:
        raise ValueError("probe list is empty")
    order = [p for p in model.probe_names if p in probes]
    missing = set(probes) - set(order)
    if missing:
        raise KeyError(f"unknown probe(s) {sorted(missing)}; available: {model.probe_names}")
    if tuple(uap.delta.shape) != tuple(clean_batch.shape[1:]):
        raise ValueError(f"perturbation shape {tuple(uap.delta.shape)} does not match inputs "
                         f"{tuple(clean_batch.shape[1:])}")
    populations = {
        "clean": clean_batch,
        "perturbed": uap.apply(clean_batch),
        "uap": uap.as_input(),
    }
    spectra = {}
    for pop, batch in populations.items():
        for s in batch_spectrum(model, batch, order):
            spectra[pop, s.probe_name] = s
    deepest = order[-1]
    gap = relative_gap(spectra["clean", deepest].median, spectra["perturbed", deepest].median)
    return AnalysisReport(order, spectra, gap, deepest)
