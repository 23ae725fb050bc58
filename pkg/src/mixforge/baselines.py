"""Reference mixing baselines: Mixup, CutMix and an iterative mask optimizer.

The iterative optimizer is a timing comparator only. It optimizes one mask
per pair by gradient steps against the teacher, which is the cost profile
of per-image optimization methods.
"""

from __future__ import annotations

import numpy as np
import torch

from mixforge.data import ImageBatch, pair_batch
from mixforge.errors import ParameterError
from mixforge.mixer import MixedBatch
from mixforge.saliency import TeacherHandle


def _check_alpha(alpha: float) -> None:
    if not alpha > 0:
        raise ParameterError(f"alpha must be positive, got {alpha}")


def mixup(batch: ImageBatch, alpha: float, rng: np.random.Generator, num_classes: int | None = None,
          lam=None) -> MixedBatch:
    """Pixelwise convex combination with one Beta(alpha, alpha) weight per pair."""
    _check_alpha(alpha)
    n = len(batch)
    index = pair_batch(batch, 2, rng)
    if lam is None:
        lam = rng.beta(alpha, alpha, size=n)
    lam = torch.as_tensor(np.broadcast_to(np.asarray(lam, dtype=np.float64), (n,)).copy()).to(batch.images.dtype)
    onehot = batch.one_hot(num_classes)
    x1, x2 = batch.images, batch.images[index[:, 1]]
    w = lam[:, None, None, None]
    images = w * x1 + (1 - w) * x2
    labels = lam[:, None] * onehot + (1 - lam[:, None]) * onehot[index[:, 1]]
    coeffs = torch.stack([lam, 1 - lam], dim=1)
    return MixedBatch(images=images, labels=labels, coeffs=coeffs, index=index)


def cutmix_boxes(lam: np.ndarray, size: tuple[int, int], rng: np.random.Generator) -> np.ndarray:
    """Boxes (y0, y1, x0, x1) with nominal area fraction 1 - lam, clipped to the image."""
    h, w = size
    lam = np.asarray(lam, dtype=np.float64)
    cut = np.sqrt(1.0 - lam)
    ch, cw = (h * cut).astype(int), (w * cut).astype(int)
    cy = rng.integers(0, h, size=lam.shape)
    cx = rng.integers(0, w, size=lam.shape)
    y0, y1 = np.clip(cy - ch // 2, 0, h), np.clip(cy + ch - ch // 2, 0, h)
    x0, x1 = np.clip(cx - cw // 2, 0, w), np.clip(cx + cw - cw // 2, 0, w)
    return np.stack([y0, y1, x0, x1], axis=-1)


def paste_boxes(batch: ImageBatch, index: torch.Tensor, boxes: np.ndarray,
                num_classes: int | None = None) -> MixedBatch:
    """Paste each box from the partner image; label weight is the realized area."""
    n, _, h, w = batch.images.shape
    box_mask = torch.zeros(n, 1, h, w, dtype=batch.images.dtype)
    for i, (y0, y1, x0, x1) in enumerate(np.asarray(boxes).reshape(n, 4)):
        box_mask[i, :, y0:y1, x0:x1] = 1.0
    partner = index[:, 1]
    images = batch.images * (1 - box_mask) + batch.images[partner] * box_mask
    area = box_mask.flatten(1).sum(dim=1) / (h * w)
    lam = 1.0 - area
    onehot = batch.one_hot(num_classes)
    labels = lam[:, None] * onehot + area[:, None] * onehot[partner]
    masks = torch.cat([1 - box_mask, box_mask], dim=1)
    return MixedBatch(images=images, labels=labels, coeffs=torch.stack([lam, area], dim=1), index=index, masks=masks)


def cutmix(batch: ImageBatch, alpha: float, rng: np.random.Generator, num_classes: int | None = None,
           lam=None) -> MixedBatch:
    _check_alpha(alpha)
    n = len(batch)
    index = pair_batch(batch, 2, rng)
    if lam is None:
        lam = rng.beta(alpha, alpha, size=n)
    lam = np.broadcast_to(np.asarray(lam, dtype=np.float64), (n,))
    boxes = cutmix_boxes(lam, tuple(batch.images.shape[-2:]), rng)
    return paste_boxes(batch, index, boxes, num_classes)


def iterative_mask_optimizer(
    batch: ImageBatch,
    teacher: TeacherHandle,
    steps: int,
    alpha: float = 1.0,
    rng: np.random.Generator | None = None,
    num_classes: int | None = None,
    lr: float = 0.1,
) -> MixedBatch:
    """Per-pair sigmoid mask tuned by ``steps`` gradient steps on teacher soft cross-entropy."""
    if steps < 1:
        raise ParameterError(f"steps must be >= 1, got {steps}")
    _check_alpha(alpha)
    rng = rng or np.random.default_rng(0)
    n, _, h, w = batch.images.shape
    index = pair_batch(batch, 2, rng)
    lam = torch.as_tensor(rng.beta(alpha, alpha, size=n)).to(batch.images.dtype)
    onehot = batch.one_hot(num_classes or teacher.num_classes)
    target = lam[:, None] * onehot + (1 - lam[:, None]) * onehot[index[:, 1]]
    x1, x2 = batch.images, batch.images[index[:, 1]]

    logits = torch.zeros(n, 1, h, w, dtype=batch.images.dtype, requires_grad=True)
    opt = torch.optim.SGD([logits], lr=lr)
    for _ in range(steps):
        m = torch.sigmoid(logits)
        x = m * x1 + (1 - m) * x2
        loss = -(target * torch.log_softmax(teacher.logits(x), dim=1)).sum(dim=1).mean()
        opt.zero_grad()
        loss.backward()
        opt.step()

    with torch.no_grad():
        m = torch.sigmoid(logits)
        images = m * x1 + (1 - m) * x2
    masks = torch.cat([m, 1 - m], dim=1).detach()
    return MixedBatch(images=images, labels=target, coeffs=torch.stack([lam, 1 - lam], dim=1),
                      index=index, masks=masks)
