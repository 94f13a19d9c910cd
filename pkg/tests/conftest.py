import pytest
import torch

from uaprepair.data import LabeledDataset
from uaprepair.model import build_architecture


@pytest.fixture
def tiny_data():
    gen = torch.Generator().manual_seed(0)
    x = torch.rand(40, 3, 8, 8, generator=gen)
    y = torch.arange(40) % 4
    return LabeledDataset(x, y, 4, "train", "tiny")


@pytest.fixture
def tiny_model():
    return build_architecture("small_cnn", (3, 8, 8), 4, seed=0)


class ConstantModel(torch.nn.Module):
    """Always predicts ``label``; logits do not depend on the input."""

    def __init__(self, label, num_classes=4):
        super().__init__()
        self.label = label
        self.num_classes = num_classes
        self.bias = torch.nn.Parameter(torch.zeros(num_classes))

    def forward(self, x):
        logits = torch.zeros(len(x), self.num_classes) + self.bias
        logits[:, self.label] = 1.0
        return logits


CRITERIA: dict = {}


def record_criterion(label, title: str, passed: bool, detail: str) -> None:
    """Store one summary line; ``label`` is the criterion number, optionally with a suffix like ``"1b"``."""
    CRITERIA[str(label)] = f"criterion {label} [{'PASS' if passed else 'FAIL'}] {title}: {detail}"


def pytest_terminal_summary(terminalreporter):
    if CRITERIA:
        terminalreporter.section("acceptance criteria")
        for number in sorted(CRITERIA):
            terminalreporter.write_line(CRITERIA[number])
