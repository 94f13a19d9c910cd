import math

import pytest
import torch

from uaprepair.data import LabeledDataset
from uaprepair.evaluation import (
    EvalReport,
    adversarial_accuracy,
    count_predictions,
    evaluate,
    nontargeted_success_rate,
    success_rate,
    success_rate_from_predictions,
    summary_row,
    write_summary_table,
)
from uaprepair.perturbation import Perturbation, zero_perturbation

from conftest import ConstantModel


class LookupModel(torch.nn.Module):
    """Sample ``i`` carries ``i / 100`` in pixel (0, 0, 0); a switch pixel selects the table."""

    def __init__(self, clean_pred, adv_pred, num_classes=4):
        super().__init__()
        self.tables = torch.tensor(clean_pred), torch.tensor(adv_pred)
        self.num_classes = num_classes

    def forward(self, x):
        idx = torch.round(x[:, 0, 0, 0] * 100).long()
        switched = x[:, 0, 0, 1] > 0.5
        pred = torch.where(switched, self.tables[1][idx], self.tables[0][idx])
        return torch.nn.functional.one_hot(pred, self.num_classes).float()


def _indexed_data(labels, num_classes=4):
    n = len(labels)
    x = torch.zeros(n, 1, 1, 2)
    x[:, 0, 0, 0] = torch.arange(n) / 100
    return LabeledDataset(x, torch.tensor(labels), num_classes, "test", "handmade")


SWITCH = Perturbation(torch.tensor([[[0.0, 0.9]]]), 0.9, name="switch")


def brute_force(labels, clean_pred, adv_pred, y_t):
    """Direct enumeration of every metric from the definitions."""
    nt = [i for i, y in enumerate(labels) if y != y_t]
    return {
        "sr": sum(1 for i in nt if adv_pred[i] == y_t) / len(nt),
        "aacc": sum(1 for i, y in enumerate(labels) if adv_pred[i] == y) / len(labels),
        "ntsr": sum(1 for a, b in zip(clean_pred, adv_pred) if a != b) / len(labels),
    }


HANDMADE = [
    # labels, clean predictions, adversarial predictions, target
    ([0, 1, 2, 3, 0, 1, 2, 3, 0, 1], [0, 1, 2, 3, 0, 1, 2, 3, 0, 1], [0, 0, 0, 3, 0, 0, 2, 0, 0, 1], 0),
    ([1, 1, 1, 1, 1, 2, 2, 2, 3, 3], [1, 1, 1, 0, 1, 2, 2, 2, 3, 3], [3, 3, 1, 3, 3, 3, 2, 3, 3, 3], 3),
    ([0, 0, 0, 0, 0, 0, 0, 0, 1, 2], [0, 0, 0, 0, 0, 0, 0, 0, 1, 2], [2, 2, 2, 2, 1, 1, 0, 0, 2, 2], 2),
]


@pytest.mark.parametrize("labels, clean, adv, y_t", HANDMADE)
def test_metrics_match_brute_force(labels, clean, adv, y_t):
    data = _indexed_data(labels)
    model = LookupModel(clean, adv)
    want = brute_force(labels, clean, adv, y_t)
    assert success_rate(model, data, SWITCH, y_t) == want["sr"]
    assert adversarial_accuracy(model, data, SWITCH) == want["aacc"]
    assert nontargeted_success_rate(model, data, SWITCH) == want["ntsr"]
    c = count_predictions(clean, adv, labels, y_t)
    assert c.to_target + c.correct_non_target <= c.non_target


@pytest.mark.parametrize("labels, clean, adv, y_t", HANDMADE)
def test_metrics_do_not_depend_on_batch_size(labels, clean, adv, y_t):
    data = _indexed_data(labels)
    model = LookupModel(clean, adv)
    ref = evaluate(model, data, SWITCH, y_t, batch_size=256)
    for bs in (1, 3, 7):
        r = evaluate(model, data, SWITCH, y_t, batch_size=bs)
        assert (r.sr, r.aacc, r.nontargeted_sr) == (ref.sr, ref.aacc, ref.nontargeted_sr)


def test_handcrafted_five_predictions():
    # predictions [y_t, y_t, other, other] on non-target samples plus one y_t-labelled sample
    assert success_rate_from_predictions([2, 2, 0, 1, 2], [0, 1, 1, 3, 2], 2) == 0.5


def test_constant_target_model():
    labels = [0, 1, 2, 3, 1, 2, 2, 3, 0, 0]  # two samples carry y_t = 1
    data = _indexed_data(labels)
    model = ConstantModel(1)
    pert = zero_perturbation((1, 1, 2))
    assert success_rate(model, data, pert, 1) == 8 / 8
    assert adversarial_accuracy(model, data, pert) == 2 / 10


def test_zero_delta_sr_is_confusion_into_target():
    labels = [0, 1, 2, 3, 0, 1, 2, 3, 0, 1]
    clean = [0, 0, 2, 0, 1, 1, 0, 3, 0, 1]
    model = LookupModel(clean, clean)
    data = _indexed_data(labels)
    pert = zero_perturbation((1, 1, 2))
    confusion = sum(1 for y, p in zip(labels, clean) if y != 0 and p == 0) / sum(1 for y in labels if y != 0)
    assert success_rate(model, data, pert, 0) == confusion
    assert nontargeted_success_rate(model, data, pert) == 0.0
    assert adversarial_accuracy(model, data, pert) == sum(1 for y, p in zip(labels, clean) if y == p) / 10


def test_all_target_set_is_rejected():
    data = _indexed_data([2, 2, 2])
    with pytest.raises(ValueError):
        success_rate(LookupModel([2] * 3, [2] * 3), data, SWITCH, 2)


def test_tiny_delta_below_margin_changes_nothing(tiny_model):
    # logits of a linear head are Lipschitz; keep only samples whose top-2 margin
    # exceeds the largest change any 1e-6 perturbation could cause
    x = torch.rand(64, 3, 8, 8, generator=torch.Generator().manual_seed(4))
    with torch.no_grad():
        logits = tiny_model(x)
    top2 = logits.topk(2, dim=1).values
    keep = (top2[:, 0] - top2[:, 1]) > 1e-3
    data = LabeledDataset(x[keep], logits[keep].argmax(1), 4, "test")
    delta = Perturbation(torch.full((3, 8, 8), 1e-6), 1e-6)
    assert len(data) > 10
    assert nontargeted_success_rate(tiny_model, data, delta) == 0.0


def test_random_predictions_accuracy_near_chance():
    n = 20000
    labels = torch.randint(10, (n,), generator=torch.Generator().manual_seed(1))
    preds = torch.randint(10, (n,), generator=torch.Generator().manual_seed(2))
    acc = count_predictions(preds, preds, labels).correct / n
    assert abs(acc - 0.1) <= 3 * math.sqrt(0.1 * 0.9 / n)


def test_report_roundtrip_and_table(tmp_path):
    before = EvalReport(0.8, 0.2, 0.95, 0.0, 0.3)
    after = EvalReport(0.05, 0.7, 0.94, -0.01, 0.01, metadata={"seed": 0})
    assert EvalReport.read(after.write(tmp_path / "r.json")) == after
    row = summary_row("toy", before, after, 1.5)
    assert row["delta_clean_acc"] == pytest.approx(-0.01)
    lines = write_summary_table([row], tmp_path / "t.tsv").read_text().splitlines()
    assert lines[0].split("\t") == ["name", "aacc_before", "aacc_after", "sr_before", "sr_after",
                                    "delta_clean_acc", "minutes"]
    assert lines[1].startswith("toy\t0.2000\t0.7000\t0.8000\t0.0500")
    with pytest.raises(ValueError):
        EvalReport(1.2, 0.0, 0.0, 0.0, 0.0)
