from __future__ import annotations

import numpy as np
import pytest
import torch

from mixforge.baselines import cutmix, cutmix_boxes, iterative_mask_optimizer, mixup, paste_boxes
from mixforge.data import ImageBatch
from mixforge.errors import ParameterError
from mixforge.models import ToyCNN
from mixforge.saliency import TeacherHandle


def batch(n=6, seed=0):
    g = torch.Generator().manual_seed(seed)
    return ImageBatch(torch.rand(n, 1, 8, 8, generator=g), torch.arange(n) % 3, 3)


@pytest.mark.parametrize("fn", [mixup, cutmix])
def test_endpoints(fn):
    b = batch()
    one = fn(b, 1.0, np.random.default_rng(0), lam=1.0)
    assert torch.equal(one.images, b.images) and torch.equal(one.labels, b.one_hot())


def test_mixup_midpoint_and_linearity():
    b = batch()
    out = mixup(b, 1.0, np.random.default_rng(0), lam=0.5)
    partner = out.index[:, 1]
    assert torch.allclose(out.images, 0.5 * (b.images + b.images[partner]))
    assert torch.allclose(out.labels, 0.5 * (b.one_hot() + b.one_hot()[partner]))
    lam = np.linspace(0, 1, 6)
    out = mixup(b, 1.0, np.random.default_rng(0), lam=lam)
    w = torch.as_tensor(lam, dtype=torch.float32)[:, None, None, None]
    assert torch.allclose(out.images, w * b.images + (1 - w) * b.images[out.index[:, 1]], atol=1e-6)


def test_cutmix_labels_follow_realized_area():
    b = batch(32)
    out = cutmix(b, 1.0, np.random.default_rng(4))
    partner = out.index[:, 1]
    for i in range(32):
        area = float(out.masks[i, 1].mean())
        assert torch.allclose(out.labels[i], (1 - area) * b.one_hot()[i] + area * b.one_hot()[partner[i]])
        inside = out.masks[i, 1].bool()
        assert torch.equal(out.images[i, 0][inside], b.images[partner[i], 0][inside])


def test_paste_box_area_oracle():
    b = batch(2)
    index = torch.tensor([[0, 1], [1, 0]])
    out = paste_boxes(b, index, np.array([[0, 4, 0, 2], [2, 8, 1, 8]]))
    assert torch.allclose(out.coeffs[:, 1], torch.tensor([8 / 64, 42 / 64]))


def test_cutmix_boxes_stay_inside():
    lam = np.random.default_rng(0).random(500)
    boxes = cutmix_boxes(lam, (8, 8), np.random.default_rng(1))
    assert np.all(boxes >= 0) and np.all(boxes <= 8)
    assert np.all(boxes[:, 0] <= boxes[:, 1]) and np.all(boxes[:, 2] <= boxes[:, 3])


def test_alpha_must_be_positive():
    with pytest.raises(ParameterError):
        mixup(batch(), 0.0, np.random.default_rng(0))


def test_iterative_optimizer():
    teacher = TeacherHandle(ToyCNN(1, 3))
    b = batch()
    with pytest.raises(ParameterError):
        iterative_mask_optimizer(b, teacher, 0)
    out = iterative_mask_optimizer(b, teacher, 3, rng=np.random.default_rng(0))
    assert out.images.shape == b.images.shape
    assert out.masks.min() >= 0 and out.masks.max() <= 1
    assert torch.allclose(out.masks.sum(1), torch.ones(6, 8, 8))
    assert torch.allclose(out.labels.sum(1), torch.ones(6))
