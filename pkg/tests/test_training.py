from __future__ import annotations

import math

import numpy as np
import pytest
import torch
import torch.nn as nn

from mixforge.data import DatasetSpec, load_dataset
from mixforge.errors import ConfigError, DivergenceError, InputError
from mixforge.mixer import MixedBatch, MixerConfig, MixStreams, build_mixer
from mixforge.models import ArchSpec, build_model, load_checkpoint
from mixforge.training import (
    RunMetrics,
    SearchConfig,
    StepOutput,
    DivergenceGuard,
    TaskConfig,
    evaluate,
    make_mixing,
    make_search_optimizer,
    search_step,
    soft_cross_entropy,
    task_step,
    train_mixer,
    train_task,
)


def test_soft_cross_entropy_worked_examples():
    assert math.isclose(float(soft_cross_entropy(torch.zeros(1, 10), torch.eye(10)[:1])), math.log(10), rel_tol=1e-6)
    assert math.isclose(float(soft_cross_entropy(torch.zeros(3, 2), torch.full((3, 2), 0.5))), math.log(2),
                        rel_tol=1e-6)
    logits = torch.tensor([[2.0, 0.0]])
    expected = -(0.25 * math.log(math.exp(2) / (math.exp(2) + 1)) + 0.75 * math.log(1 / (math.exp(2) + 1)))
    assert math.isclose(float(soft_cross_entropy(logits, torch.tensor([[0.25, 0.75]]))), expected, rel_tol=1e-6)


def test_soft_cross_entropy_rejects_non_simplex():
    with pytest.raises(InputError):
        soft_cross_entropy(torch.zeros(1, 2), torch.tensor([[0.7, 0.7]]))
    with pytest.raises(InputError):
        soft_cross_entropy(torch.zeros(1, 3), torch.tensor([[0.5, 0.5]]))


def _state(module):
    return {k: v.clone() for k, v in module.state_dict().items()}


def test_search_step_updates_mixer_only(toy_data, toy_teacher):
    train, _ = toy_data
    mixer = build_mixer(MixerConfig(k=2, image_size=(8, 8)), seed=0)
    opt = make_search_optimizer(mixer, SearchConfig(lr=0.01))
    teacher_before = toy_teacher.state_digest()
    mixer_before = _state(mixer)
    out = search_step(train.batch(np.arange(32)), toy_teacher, mixer, opt, rng=MixStreams.from_seed(0))
    assert math.isfinite(out.loss)
    assert toy_teacher.state_digest() == teacher_before
    for name in ("transform_net.out.weight", "mask_net.net.6.weight", "log_tau"):
        assert not torch.equal(mixer.state_dict()[name], mixer_before[name]), name


def test_task_step_leaves_mixer_and_teacher(toy_data, toy_teacher):
    train, _ = toy_data
    mixer = build_mixer(MixerConfig(k=2, image_size=(8, 8)), seed=0)
    before = _state(mixer)
    digest = toy_teacher.state_digest()
    model = build_model(ArchSpec("toy-cnn", 1, (8, 8), 2))
    opt = torch.optim.SGD(model.parameters(), lr=0.1)
    mixing = make_mixing("transformmix", 2, 0, teacher=toy_teacher, mixer=mixer)
    task_step(train.batch(np.arange(16)), model, opt, mixing)
    assert all(torch.equal(v, before[k]) for k, v in mixer.state_dict().items())
    assert toy_teacher.state_digest() == digest


def test_mix_prob_zero_matches_simple(toy_data, toy_teacher):
    train, test = toy_data
    mixer = build_mixer(MixerConfig(k=2, image_size=(8, 8)), seed=0)
    base = dict(arch="toy-cnn", epochs=2, lr=0.05, decay_epochs=(), batch_size=64)
    m1, r1 = train_task(train, test, TaskConfig(**base, strategy="simple"))
    m2, r2 = train_task(train, test, TaskConfig(**base, strategy="transformmix", mix_prob=0.0),
                        teacher=toy_teacher, mixer=mixer)
    assert all(torch.equal(a, b) for a, b in zip(m1.state_dict().values(), m2.state_dict().values()))
    assert [r["train_loss"] for r in r1.rows] == [r["train_loss"] for r in r2.rows]


class FixedLogits(nn.Module):
    """Returns preset logits row by row, in dataset order."""

    def __init__(self, table):
        super().__init__()
        self.table = torch.as_tensor(table, dtype=torch.float32)
        self.pos = 0

    def forward(self, x):
        out = self.table[self.pos : self.pos + len(x)]
        self.pos += len(x)
        return out


def test_evaluate_hand_fixture():
    ds = load_dataset(DatasetSpec(num_samples=6, num_classes=6, image_size=(8, 8), channels=1))
    labels = ds.labels.tolist()
    table = np.zeros((6, 6))
    # rows 0-1 correct, rows 2-3 second place, row 4 sixth place, row 5 all tied
    for i, y in enumerate(labels):
        if i < 2:
            table[i, y] = 5
        elif i < 4:
            table[i, (y + 1) % 6], table[i, y] = 5, 4
        elif i == 4:
            table[i] = 1
            table[i, y] = -1
    out = evaluate(FixedLogits(table), ds, batch_size=4)
    tie_hit = labels[5] == 0
    assert out["top1"] == pytest.approx(100 * (2 + tie_hit) / 6)
    assert out["top5"] == pytest.approx(100 * (4 + (labels[5] < 5)) / 6)


def test_top5_needs_five_classes(toy_data):
    _, test = toy_data
    with pytest.raises(ConfigError):
        evaluate(build_model(ArchSpec("toy-cnn", 1, (8, 8), 2)), test, top5=True)
    assert evaluate(build_model(ArchSpec("toy-cnn", 1, (8, 8), 2)), test)["top5"] is None


def test_zero_epochs_checkpoint_is_init(tmp_path, toy_data):
    train, test = toy_data
    cfg = TaskConfig(arch="toy-cnn", epochs=0, decay_epochs=(), seed=5)
    model, metrics = train_task(train, test, cfg, out_dir=tmp_path)
    loaded, _ = load_checkpoint(tmp_path / "model.pt")
    assert metrics.rows == []
    assert all(torch.equal(a, b) for a, b in zip(model.state_dict().values(), loaded.state_dict().values()))


def test_training_is_reproducible(toy_data, toy_teacher):
    train, test = toy_data
    cfg = SearchConfig(epochs=1, batch_size=32, steps_per_epoch=5, seed=3)
    a, ra = train_mixer(train, toy_teacher, cfg)
    b, rb = train_mixer(train, toy_teacher, cfg)
    assert ra.summary()["digest"] == rb.summary()["digest"]
    assert all(torch.equal(x, y) for x, y in zip(a.state_dict().values(), b.state_dict().values()))
    tcfg = TaskConfig(arch="toy-cnn", epochs=1, lr=0.05, decay_epochs=(), batch_size=64, strategy="cutmix")
    assert train_task(train, test, tcfg)[1].summary()["digest"] == train_task(train, test, tcfg)[1].summary()["digest"]


def test_train_mixer_writes_outputs(tmp_path, toy_data, toy_teacher):
    train, _ = toy_data
    train_mixer(train, toy_teacher, SearchConfig(epochs=2, batch_size=64, steps_per_epoch=2), out_dir=tmp_path)
    assert (tmp_path / "mixer.pt").exists() and (tmp_path / "mixer.json").exists()
    assert len((tmp_path / "metrics.csv").read_text().strip().splitlines()) == 3


def test_mixer_k_mismatch(toy_data, toy_teacher):
    train, test = toy_data
    mixer = build_mixer(MixerConfig(k=3, image_size=(8, 8)))
    with pytest.raises(ConfigError):
        train_task(train, test, TaskConfig(arch="toy-cnn", epochs=1, decay_epochs=(), strategy="transformmix"),
                   teacher=toy_teacher, mixer=mixer)


def test_mixer_strategy_needs_mixer():
    with pytest.raises(ConfigError):
        make_mixing("transformmix", 2, 0)


@pytest.mark.parametrize("kwargs", [
    {"decay_epochs": (50, 50)},
    {"decay_epochs": (300,)},
    {"strategy": "puzzle"},
    {"mix_prob": 1.5},
])
def test_task_config_validation(kwargs):
    with pytest.raises(ConfigError):
        TaskConfig(**kwargs)


def test_search_config_validation():
    with pytest.raises(ConfigError):
        SearchConfig(optimizer="adam")
    with pytest.raises(ConfigError):
        SearchConfig(batch_size=1, k=2)


def test_metrics_reject_inconsistent_accuracy():
    with pytest.raises(InputError):
        RunMetrics().add(epoch=1, top1=80.0, top5=70.0)


def test_divergence_guard(tmp_path):
    guard = DivergenceGuard(patience=3, dump_dir=tmp_path, stage="search")
    bad = StepOutput(float("nan"), MixedBatch(images=torch.zeros(2, 1, 4, 4), labels=torch.zeros(2, 2)))
    good = StepOutput(1.0, bad.mixed)
    guard.update(bad, 1)
    guard.update(bad, 2)
    guard.update(good, 3)
    guard.update(bad, 4)
    guard.update(bad, 5)
    with pytest.raises(DivergenceError) as info:
        guard.update(bad, 6)
    assert info.value.to_dict()["diagnostics"]["step"] == 6
    assert (tmp_path / "divergence.json").exists()
