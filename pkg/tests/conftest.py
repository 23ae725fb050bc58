from __future__ import annotations

import pytest
import torch

from mixforge.data import DatasetSpec, load_dataset
from mixforge.saliency import TeacherHandle
from mixforge.training import TaskConfig, train_task

torch.set_num_threads(1)

TOY_SPEC = DatasetSpec(name="toy-8", num_samples=512, test_samples=256, num_classes=2, image_size=(8, 8),
                       channels=1, seed=0)


@pytest.fixture(scope="session")
def toy_data():
    return load_dataset(TOY_SPEC), load_dataset(TOY_SPEC.with_split("test"))


@pytest.fixture(scope="session")
def toy_teacher(toy_data):
    """Toy CNN trained to near-perfect accuracy on the 2-class 8x8 set."""
    train, test = toy_data
    cfg = TaskConfig(arch="toy-cnn", epochs=30, lr=0.05, decay_epochs=(), batch_size=32, augment=False)
    model, metrics = train_task(train, test, cfg)
    assert metrics.final["top1"] >= 90.0
    return TeacherHandle(model, name="toy-cnn")


_ACCEPTANCE: list[str] = []


@pytest.fixture
def acceptance():
    """Record one PASS/FAIL line for an acceptance criterion, then assert it."""

    def record(number: int, title: str, passed: bool, detail: str) -> None:
        _ACCEPTANCE.append(f"[{'PASS' if passed else 'FAIL'}] criterion {number:>2}: {title} | {detail}")
        assert passed, detail

    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_ACCEPTANCE, key=lambda s: int(s.split("criterion")[1].split(":")[0])):
            terminalreporter.write_line(line)
