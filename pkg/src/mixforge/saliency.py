"""Class-activation-map saliency from a frozen teacher classifier."""

from __future__ import annotations

import torch
import torch.nn as nn

from mixforge.errors import InputError, NumericError, UnsupportedArchitectureError

CAM_CLASS_MODES = ("label", "predicted")


def _source_coords(n_in: int, n_out: int, device, dtype):
    # half-pixel centres, clamped at the borders (align_corners=False convention)
    scale = n_in / n_out
    src = (torch.arange(n_out, device=device, dtype=dtype) + 0.5) * scale - 0.5
    src = src.clamp(min=0.0, max=n_in - 1)
    i0 = src.floor().long()
    i1 = (i0 + 1).clamp(max=n_in - 1)
    frac = src - i0.to(dtype)
    return i0, i1, frac


def bilinear_resize(x: torch.Tensor, size: tuple[int, int]) -> torch.Tensor:
    """Resize the last two dims of ``x`` to ``size`` with bilinear interpolation.

    Written in lerp form ``a + (b - a) * t`` along each axis, so constant
    regions stay bit-exact and same-size calls return an unchanged copy.
    Differentiable with respect to ``x``.
    """
    out_h, out_w = int(size[0]), int(size[1])
    if out_h < 1 or out_w < 1:
        raise InputError(f"target size must be >= 1 in both dims, got {size}")
    in_h, in_w = x.shape[-2], x.shape[-1]
    if (in_h, in_w) == (out_h, out_w):
        return x.clone()
    dtype = x.dtype if x.is_floating_point() else torch.float32
    x = x.to(dtype)
    if in_w != out_w:
        i0, i1, t = _source_coords(in_w, out_w, x.device, dtype)
        a, b = x[..., i0], x[..., i1]
        x = a + (b - a) * t
    if in_h != out_h:
        i0, i1, t = _source_coords(in_h, out_h, x.device, dtype)
        a, b = x[..., i0, :], x[..., i1, :]
        x = a + (b - a) * t.unsqueeze(-1)
    return x


def normalize_map(raw) -> torch.Tensor:
    """Min-max normalize each map over its last two dims.

    A map with max == min becomes all 0.5 rather than all 0, so a featureless
    input still receives a non-zero share of the mask.
    """
    raw = torch.as_tensor(raw)
    if not raw.is_floating_point():
        raw = raw.to(torch.float64)
    if raw.dim() < 2:
        raise InputError(f"saliency map needs at least 2 dims, got shape {tuple(raw.shape)}")
    if not torch.isfinite(raw).all():
        raise NumericError("saliency map contains NaN or Inf")
    flat = raw.flatten(-2)
    lo = flat.min(dim=-1).values[..., None, None]
    hi = flat.max(dim=-1).values[..., None, None]
    span = hi - lo
    degenerate = span == 0
    out = (raw - lo) / torch.where(degenerate, torch.ones_like(span), span)
    return torch.where(degenerate, torch.full_like(out, 0.5), out)


def resize_saliency(saliency: torch.Tensor, target: tuple[int, int]) -> torch.Tensor:
    return bilinear_resize(torch.as_tensor(saliency), target).clamp(0.0, 1.0)


class TeacherHandle:
    """Read-only view of a trained classifier with a GAP + linear head.

    The wrapped model must expose ``features(x)`` returning the final
    convolutional maps and an ``nn.Linear`` classifier at ``fc``. All
    parameters are frozen and the model is put in eval mode.
    """

    def __init__(self, model: nn.Module, name: str | None = None):
        if not callable(getattr(model, "features", None)) or not isinstance(
            getattr(model, "fc", None), nn.Linear
        ):
            raise UnsupportedArchitectureError(
                f"{type(model).__name__} has no features()/fc structure; CAM needs "
                "final conv maps followed by global average pooling and a linear head"
            )
        model.eval()
        for p in model.parameters():
            p.requires_grad_(False)
        self.model = model
        self.name = name or type(model).__name__

    @property
    def num_classes(self) -> int:
        return self.model.fc.out_features

    @property
    def classifier_weight(self) -> torch.Tensor:
        return self.model.fc.weight

    @property
    def in_channels(self) -> int | None:
        return getattr(self.model, "in_channels", None)

    def feature_maps(self, images: torch.Tensor) -> torch.Tensor:
        with torch.no_grad():
            return self.model.features(images)

    def logits(self, images: torch.Tensor) -> torch.Tensor:
        # gradients may flow to the images, never to the weights
        return self.model(images)

    def predict(self, images: torch.Tensor) -> torch.Tensor:
        with torch.no_grad():
            return self.model(images).argmax(dim=1)

    def state_digest(self) -> bytes:
        return b"".join(
            t.detach().cpu().contiguous().numpy().tobytes() for t in self.model.state_dict().values()
        )


def compute_cam(
    images: torch.Tensor,
    class_ids: torch.Tensor | None,
    teacher: TeacherHandle,
    size: tuple[int, int] | None = None,
) -> torch.Tensor:
    """Normalized class activation maps, one per image, shape (B, H, W).

    ``class_ids=None`` uses the teacher's argmax prediction. ``size``
    defaults to the image resolution.
    """
    if images.dim() != 4:
        raise InputError(f"expected images of shape (B, C, H, W), got {tuple(images.shape)}")
    if teacher.in_channels is not None and images.shape[1] != teacher.in_channels:
        raise InputError(
            f"teacher expects {teacher.in_channels} input channels, got {images.shape[1]}"
        )
    if class_ids is None:
        class_ids = teacher.predict(images)
    class_ids = torch.as_tensor(class_ids, dtype=torch.long, device=images.device).reshape(-1)
    if class_ids.numel() != images.shape[0]:
        raise InputError("need exactly one class id per image")
    if class_ids.numel() and (class_ids.min() < 0 or class_ids.max() >= teacher.num_classes):
        raise InputError(f"class ids must lie in [0, {teacher.num_classes})")

    feats = teacher.feature_maps(images)
    weights = teacher.classifier_weight[class_ids].to(feats.dtype)
    raw = torch.einsum("bk,bkhw->bhw", weights, feats).clamp_min(0.0)
    raw = bilinear_resize(raw, size or tuple(images.shape[-2:]))
    return normalize_map(raw)


def cam_class_ids(labels: torch.Tensor | None, mode: str) -> torch.Tensor | None:
    if mode not in CAM_CLASS_MODES:
        raise InputError(f"cam class mode must be one of {CAM_CLASS_MODES}, got {mode!r}")
    return labels if mode == "label" else None

