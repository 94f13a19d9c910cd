"""Attack metrics, experiment reports and evaluation protocols.

Every rate is an exact integer count over an exact denominator, so results do
not depend on the evaluation batch size.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import torch

from .attack import AttackConfig, craft
from .data import LabeledDataset
from .entropy import batch_spectrum, relative_gap
from .model import predict
from .perturbation import Perturbation


@dataclass(frozen=True)
class Counts:
    """Prediction tallies for one perturbation on one evaluation set."""

    total: int
    non_target: int
    to_target: int  # non-target samples predicted as the target
    correct: int  # all samples predicted correctly
    correct_non_target: int
    changed: int  # predictions that differ from the clean prediction


def count_predictions(clean_pred, adv_pred, labels, y_t=None) -> Counts:
    clean_pred, adv_pred, labels = (torch.as_tensor(t) for t in (clean_pred, adv_pred, labels))
    correct = adv_pred == labels
    if y_t is None:
        non_target = torch.ones_like(labels, dtype=torch.bool)
        to_target = torch.zeros_like(non_target)
    else:
        non_target = labels != int(y_t)
        to_target = non_target & (adv_pred == int(y_t))
    return Counts(
        total=int(labels.numel()),
        non_target=int(non_target.sum()),
        to_target=int(to_target.sum()),
        correct=int(correct.sum()),
        correct_non_target=int((correct & non_target).sum()),
        changed=int((adv_pred != clean_pred).sum()),
    )


def success_rate_from_predictions(adv_pred, labels, y_t: int) -> float:
    c = count_predictions(adv_pred, adv_pred, labels, y_t)
    if c.non_target == 0:
        raise ValueError(f"every evaluation sample has the target label {y_t}")
    return c.to_target / c.non_target


def _predictions(model, test: LabeledDataset, pert: Perturbation | None, batch_size=256):
    x = test.images if pert is None else pert.apply(test.images)
    return predict(model, x, batch_size)


def success_rate(model, test: LabeledDataset, pert: Perturbation, y_t: int, batch_size: int = 256) -> float:
    """Fraction of non-target samples sent to ``y_t`` by the perturbation."""
    return success_rate_from_predictions(_predictions(model, test, pert, batch_size), test.labels, y_t)


def nontargeted_success_rate(model, test: LabeledDataset, pert: Perturbation, batch_size: int = 256) -> float:
    """Fraction of all samples whose prediction changes under the perturbation."""
    clean = _predictions(model, test, None, batch_size)
    adv = _predictions(model, test, pert, batch_size)
    return int((clean != adv).sum()) / len(test)


def adversarial_accuracy(model, test: LabeledDataset, pert: Perturbation, batch_size: int = 256) -> float:
    adv = _predictions(model, test, pert, batch_size)
    return int((adv == test.labels).sum()) / len(test)


def entropy_gap(model, images, pert: Perturbation, probe: str | None = None) -> float:
    """Relative drop of median entropy at ``probe`` (deepest by default) caused by ``pert``."""
    probe = probe or model.deepest_probe
    (clean,) = batch_spectrum(model, images, [probe])
    (adv,) = batch_spectrum(model, pert.apply(images), [probe])
    return relative_gap(clean.median, adv.median)


@dataclass
class EvalReport:
    sr: float
    aacc: float
    clean_acc: float
    delta_clean_acc: float
    entropy_gap: float
    nontargeted_sr: float = 0.0
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        for name in ("sr", "aacc", "clean_acc", "nontargeted_sr"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} = {v} is outside [0, 1]")

    def to_dict(self) -> dict:
        return asdict(self)

    def write(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), sort_keys=True) + "\n")
        return path

    @classmethod
    def read(cls, path) -> "EvalReport":
        return cls(**json.loads(Path(path).read_text()))


def evaluate(model, test: LabeledDataset, pert: Perturbation, y_t: int | None = None,
             reference_clean_acc: float | None = None, probe: str | None = None,
             metadata: dict | None = None, batch_size: int = 256) -> EvalReport:
    """Full report for one perturbation; ``y_t = None`` scores a non-targeted attack.

    The entropy gap is NaN for models without probe layers.
    """
    clean = _predictions(model, test, None, batch_size)
    adv = _predictions(model, test, pert, batch_size)
    c = count_predictions(clean, adv, test.labels, y_t)
    clean_acc = int((clean == test.labels).sum()) / len(test)
    if y_t is None:
        sr = c.changed / c.total
    else:
        if c.non_target == 0:
            raise ValueError(f"every evaluation sample has the target label {y_t}")
        sr = c.to_target / c.non_target
    meta = {"dataset": test.name, "perturbation": pert.name, "kind": pert.kind, "epsilon": pert.epsilon,
            "seed": pert.seed, "target_class": y_t, "timestamp": time.strftime("%Y-%m-%dT%H:%M:%S")}
    meta.update(metadata or {})
    return EvalReport(
        sr=sr,
        aacc=c.correct / c.total,
        clean_acc=clean_acc,
        delta_clean_acc=0.0 if reference_clean_acc is None else clean_acc - reference_clean_acc,
        entropy_gap=entropy_gap(model, test.images, pert, probe) if hasattr(model, "probe_names") else math.nan,
        nontargeted_sr=c.changed / c.total,
        metadata=meta,
    )


def adaptive_reattack_protocol(defended_model, attack_set: LabeledDataset, test: LabeledDataset, attack_kind: str,
                               y_t: int | None, eps: float, cfg: AttackConfig,
                               reference_clean_acc: float | None = None) -> tuple[EvalReport, Perturbation]:
    """Craft a fresh UAP against the defended model with the original budget and score it."""
    pert = craft(attack_kind, defended_model, attack_set, y_t, eps, cfg)
    target = None if attack_kind == "nontargeted" else y_t
    report = evaluate(defended_model, test, pert, target, reference_clean_acc,
                      metadata={"protocol": "reattack"})
    return report, pert


def epsilon_sweep(model, attack_set: LabeledDataset, test: LabeledDataset, y_t: int, eps_list,
                  cfg: AttackConfig, reference_clean_acc: float | None = None,
                  craft_against=None) -> list[EvalReport]:
    """One targeted UAP and report per budget; ``model`` stays fixed.

    UAPs are crafted against ``craft_against`` (default: ``model`` itself), so
    passing the undefended model scores its perturbations on a repaired one.
    """
    source = model if craft_against is None else craft_against
    reports = []
    for eps in eps_list:
        pert = craft("targeted", source, attack_set, y_t, float(eps), cfg)
        reports.append(evaluate(model, test, pert, y_t, reference_clean_acc,
                                metadata={"protocol": "epsilon_sweep"}))
    return reports


TABLE_COLUMNS = ("name", "aacc_before", "aacc_after", "sr_before", "sr_after", "delta_clean_acc", "minutes")


def summary_row(name: str, before: EvalReport, after: EvalReport, minutes: float) -> dict:
    return {"name": name, "aacc_before": before.aacc, "aacc_after": after.aacc, "sr_before": before.sr,
            "sr_after": after.sr, "delta_clean_acc": after.clean_acc - before.clean_acc, "minutes": minutes}


def write_summary_table(rows, path) -> Path:
    """Tab-separated table, one row per experiment."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = ["\t".join(TABLE_COLUMNS)]
    for r in rows:
        lines.append("\t".join(r[c] if isinstance(r[c], str) else f"{r[c]:.4f}" for c in TABLE_COLUMNS))
    path.write_text("\n".join(lines) + "\n")
    return path
