"""The learnable mixing module.

Given k inputs, their CAM saliency, simplex coefficients and a noise field,
a localization network predicts one affine warp per input and a
spatial-preserving conv net predicts per-pixel logits. Masks are a
temperature softmax over those logits and the mixed image is the masked sum
of the warped inputs. Soft labels interpolate the one-hot labels with the
coefficients.
"""

from __future__ import annotations

import enum
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from mixforge.data import ImageBatch, pair_batch
from mixforge.errors import CheckpointError, ConsistencyError, InputError, NumericError, ParameterError
from mixforge.models import load_state, save_state
from mixforge.saliency import (
    TeacherHandle,
    bilinear_resize,
    cam_class_ids,
    compute_cam,
    resize_saliency,
)

MASK_SUM_TOL = 1e-6
IDENTITY_THETA = ((1.0, 0.0, 0.0), (0.0, 1.0, 0.0))
MIXER_FORMAT = 1


class MixStrategy(str, enum.Enum):
    FULL = "full"
    STN_ONLY = "stn_only"
    MPN_ONLY = "mpn_only"
    SOFTMAX_CAM = "softmax_cam"

    @property
    def learns_transforms(self) -> bool:
        return self in (MixStrategy.FULL, MixStrategy.STN_ONLY)

    @property
    def learns_masks(self) -> bool:
        return self in (MixStrategy.FULL, MixStrategy.MPN_ONLY)


@dataclass
class MixerConfig:
    k: int = 2
    image_size: tuple[int, int] = (32, 32)
    noise_grid: int = 4
    stn_channels: tuple[int, int] = (8, 10)
    stn_kernels: tuple[int, int] = (7, 5)
    stn_hidden: int = 32
    mask_layers: int = 3
    mask_channels: int = 32
    mask_kernel: int = 3
    tau_init: float = 1.0
    tau_min: float = 1e-3
    padding_mode: str = "zeros"

    def __post_init__(self):
        self.image_size = tuple(int(v) for v in self.image_size)
        self.stn_channels = tuple(self.stn_channels)
        self.stn_kernels = tuple(self.stn_kernels)
        if self.k < 2:
            raise ParameterError(f"k must be >= 2, got {self.k}")
        if min(self.image_size) < 4:
            raise ParameterError(f"mixer resolution must be at least 4x4, got {self.image_size}")
        if self.mask_layers < 1 or self.mask_kernel % 2 == 0:
            raise ParameterError("mask net needs >= 1 layer and an odd kernel size")
        if self.tau_init <= 0:
            raise ParameterError("tau_init must be positive")
        if self.padding_mode not in ("zeros", "reflection", "border"):
            raise ParameterError(f"unsupported padding mode {self.padding_mode!r}")

    @property
    def transform_in_channels(self) -> int:
        return 2 * self.k

    @property
    def mask_in_channels(self) -> int:
        return 2 * self.k - 1

    @classmethod
    def from_dict(cls, d: dict) -> "MixerConfig":
        return cls(**{k: v for k, v in d.items() if k in cls.__dataclass_fields__})


class TransformNet(nn.Module):
    """STN localization net: two conv/pool/ReLU stages, then a 2-layer head.

    The output layer starts at zero weights with identity-affine biases, so
    a fresh net predicts the identity warp for every input.
    """

    def __init__(self, cfg: MixerConfig):
        super().__init__()
        c1, c2 = cfg.stn_channels
        k1, k2 = cfg.stn_kernels
        self.k = cfg.k
        self.localization = nn.Sequential(
            nn.Conv2d(cfg.transform_in_channels, c1, k1, padding=k1 // 2),
            nn.MaxPool2d(2),
            nn.ReLU(),
            nn.Conv2d(c1, c2, k2, padding=k2 // 2),
            nn.MaxPool2d(2),
            nn.ReLU(),
        )
        with torch.no_grad():
            flat = self.localization(torch.zeros(1, cfg.transform_in_channels, *cfg.image_size)).numel()
        self.hidden = nn.Linear(flat, cfg.stn_hidden)
        self.out = nn.Linear(cfg.stn_hidden, cfg.k * 6)
        nn.init.zeros_(self.out.weight)
        with torch.no_grad():
            self.out.bias.copy_(torch.tensor(IDENTITY_THETA).flatten().repeat(cfg.k))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = self.localization(x).flatten(1)
        h = F.relu(self.hidden(h))
        return self.out(h).view(-1, self.k, 2, 3)


class MaskNet(nn.Module):
    def __init__(self, cfg: MixerConfig):
        super().__init__()
        layers = []
        c_in = cfg.mask_in_channels
        for _ in range(cfg.mask_layers):
            layers += [nn.Conv2d(c_in, cfg.mask_channels, cfg.mask_kernel, padding=cfg.mask_kernel // 2), nn.ReLU()]
            c_in = cfg.mask_channels
        layers.append(nn.Conv2d(c_in, cfg.k, 1))
        self.net = nn.Sequential(*layers)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.net(x)


class MixingModule(nn.Module):
    """Transform net, mask net and the log-temperature, trained jointly."""

    def __init__(self, cfg: MixerConfig | None = None):
        super().__init__()
        self.config = cfg or MixerConfig()
        self.transform_net = TransformNet(self.config)
        self.mask_net = MaskNet(self.config)
        self.log_tau = nn.Parameter(torch.tensor(math.log(self.config.tau_init)))

    @property
    def k(self) -> int:
        return self.config.k

    @property
    def tau(self) -> torch.Tensor:
        return self.log_tau.exp().clamp_min(self.config.tau_min)

    def subnetworks(self) -> dict[str, nn.Module]:
        return {"transform": self.transform_net, "mask": self.mask_net}


def build_mixer(cfg: MixerConfig | None = None, seed: int = 0) -> MixingModule:
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return MixingModule(cfg)


# ------------------------------------------------------------------ sampling


def sample_coefficients(alpha: float, k: int, rng: np.random.Generator, size: int | None = None) -> np.ndarray:
    """Dirichlet(alpha, ..., alpha) draws; for k=2 the first entry is Beta(alpha, alpha)."""
    if not alpha > 0:
        raise ParameterError(f"alpha must be positive, got {alpha}")
    if k < 2:
        raise ParameterError(f"k must be >= 2, got {k}")
    return rng.dirichlet([alpha] * k, size=size)


def sample_noise(
    rng: np.random.Generator,
    spatial: tuple[int, int],
    n: int | None = None,
    grid: int = 4,
    dtype=torch.float32,
) -> torch.Tensor:
    """A grid x grid standard-normal field upsampled to ``spatial``.

    Shape (H, W) when ``n`` is None, else (n, 1, H, W).
    """
    shape = (grid, grid) if n is None else (n, 1, grid, grid)
    low = torch.as_tensor(rng.standard_normal(shape), dtype=dtype)
    return bilinear_resize(low, spatial)


# ------------------------------------------------------------------ forward pieces


def _coefficient_planes(coeffs: torch.Tensor, k: int, size, like: torch.Tensor) -> torch.Tensor:
    # (B, k) -> (B, k-1, H, W) constant planes holding lambda_1..lambda_{k-1}
    c = coeffs[:, : k - 1].to(like)
    return c[:, :, None, None].expand(-1, -1, *size)


def _check_stack(saliencies: torch.Tensor, coeffs: torch.Tensor, k: int) -> None:
    if saliencies.dim() != 4 or saliencies.shape[1] != k:
        raise InputError(f"expected saliency stack (B, {k}, H, W), got {tuple(saliencies.shape)}")
    if coeffs.shape != (saliencies.shape[0], k):
        raise InputError(f"expected coefficients (B, {k}), got {tuple(coeffs.shape)}")


def transform_inputs(saliencies, coeffs, noise, k) -> torch.Tensor:
    size = saliencies.shape[-2:]
    if noise.shape != (saliencies.shape[0], 1, *size):
        raise InputError(f"noise must be (B, 1, {size[0]}, {size[1]}), got {tuple(noise.shape)}")
    return torch.cat([saliencies, _coefficient_planes(coeffs, k, size, saliencies), noise.to(saliencies)], dim=1)


def predict_transforms(
    saliencies: torch.Tensor, coeffs: torch.Tensor, noise: torch.Tensor, module: MixingModule
) -> torch.Tensor:
    """(B, k, H, W) saliency, (B, k) coefficients, (B, 1, H, W) noise -> (B, k, 2, 3)."""
    k = module.k
    coeffs = torch.as_tensor(coeffs)
    _check_stack(saliencies, coeffs, k)
    if tuple(saliencies.shape[-2:]) != module.config.image_size:
        raise InputError(
            f"transform net is built for {module.config.image_size}, got saliency of size "
            f"{tuple(saliencies.shape[-2:])}; resize the CAMs first"
        )
    return module.transform_net(transform_inputs(saliencies, coeffs, noise, k))


def identity_thetas(n: int, k: int | None = None, dtype=torch.float32) -> torch.Tensor:
    theta = torch.tensor(IDENTITY_THETA, dtype=dtype)
    return theta.expand(n, 2, 3).clone() if k is None else theta.expand(n, k, 2, 3).clone()


def apply_affine(field: torch.Tensor, theta: torch.Tensor, padding_mode: str = "zeros") -> torch.Tensor:
    """Backward-warp ``field`` (N, C, H, W) or (N, H, W) by ``theta`` (N, 2, 3).

    Output pixel p samples the input at ``theta @ [p; 1]`` in [-1, 1]
    normalized coordinates with bilinear interpolation; samples outside the
    source read as 0 under the default padding.
    """
    squeeze = field.dim() == 3
    if squeeze:
        field = field.unsqueeze(1)
    if theta.shape != (field.shape[0], 2, 3):
        raise InputError(f"theta must be ({field.shape[0]}, 2, 3), got {tuple(theta.shape)}")
    if not torch.isfinite(theta).all():
        raise NumericError("affine parameters contain NaN or Inf")
    theta = theta.to(field.dtype)
    if not theta.requires_grad and bool((theta == theta.new_tensor(IDENTITY_THETA)).all()):
        out = field.clone()
    else:
        grid = F.affine_grid(theta, list(field.shape), align_corners=False)
        out = F.grid_sample(field, grid, mode="bilinear", padding_mode=padding_mode, align_corners=False)
    return out.squeeze(1) if squeeze else out


def apply_affine_stack(fields: torch.Tensor, thetas: torch.Tensor, padding_mode: str = "zeros") -> torch.Tensor:
    """Warp a (B, k, ...) stack with (B, k, 2, 3) thetas."""
    b, k = fields.shape[:2]
    out = apply_affine(fields.flatten(0, 1), thetas.flatten(0, 1), padding_mode)
    return out.view(b, k, *out.shape[1:])


def mask_logits(warped_saliencies: torch.Tensor, coeffs: torch.Tensor, module: MixingModule) -> torch.Tensor:
    k = module.k
    coeffs = torch.as_tensor(coeffs)
    _check_stack(warped_saliencies, coeffs, k)
    size = warped_saliencies.shape[-2:]
    x = torch.cat([warped_saliencies, _coefficient_planes(coeffs, k, size, warped_saliencies)], dim=1)
    return module.mask_net(x)


def softmax_masks(logits: torch.Tensor, tau: torch.Tensor | float) -> torch.Tensor:
    """Per-pixel softmax over dim 1 with temperature ``tau``."""
    return torch.softmax(logits / tau, dim=1)


def predict_masks(
    warped_saliencies: torch.Tensor,
    coeffs: torch.Tensor,
    module: MixingModule,
    out_size: tuple[int, int] | None = None,
) -> torch.Tensor:
    """(B, k, H, W) warped saliency -> (B, k, H', W') masks summing to 1 per pixel.

    With ``out_size`` the logits are resampled before the softmax, which keeps
    the sum-to-one property exact at the new resolution.
    """
    logits = mask_logits(warped_saliencies, coeffs, module)
    if out_size is not None:
        logits = bilinear_resize(logits, out_size)
    return softmax_masks(logits, module.tau)


# ------------------------------------------------------------------ mixing


@dataclass
class MixedBatch:
    images: torch.Tensor  # (B, C, H, W)
    labels: torch.Tensor  # (B, num_classes) soft labels
    coeffs: torch.Tensor | None = None  # (B, k)
    index: torch.Tensor | None = None  # (B, k) source positions in the batch
    thetas: torch.Tensor | None = None  # (B, k, 2, 3)
    masks: torch.Tensor | None = None  # (B, k, H, W)
    cams: torch.Tensor | None = None  # (B, k, H, W)
    warped: torch.Tensor | None = None  # (B, k, C, H, W)
    extras: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return self.images.shape[0]


def mix(
    images: torch.Tensor,
    thetas: torch.Tensor,
    masks: torch.Tensor,
    coeffs: torch.Tensor,
    labels: torch.Tensor,
    padding_mode: str = "zeros",
) -> MixedBatch:
    """x' = sum_i m_i * warp(x_i, theta_i); y' = sum_i lambda_i y_i.

    images (B, k, C, H, W), thetas (B, k, 2, 3), masks (B, k, H, W),
    coeffs (B, k), labels (B, k, num_classes).
    """
    b, k = images.shape[:2]
    if masks.shape != (b, k, *images.shape[-2:]):
        raise InputError(f"masks must be {(b, k, *images.shape[-2:])}, got {tuple(masks.shape)}")
    with torch.no_grad():
        total = masks.sum(dim=1)
        if (total - 1).abs().max() > MASK_SUM_TOL or masks.min() < -MASK_SUM_TOL:
            raise ConsistencyError(
                f"mixing masks must be nonnegative and sum to 1 per pixel "
                f"(max deviation {(total - 1).abs().max().item():.3g})"
            )
    coeffs = torch.as_tensor(coeffs).to(images.dtype)
    warped = apply_affine_stack(images, thetas, padding_mode)
    mixed = (masks.unsqueeze(2).to(images.dtype) * warped).sum(dim=1)
    soft = (coeffs[:, :, None] * labels.to(images.dtype)).sum(dim=1)
    return MixedBatch(images=mixed, labels=soft, coeffs=coeffs, thetas=thetas, masks=masks, warped=warped)


@dataclass
class MixStreams:
    """Separate generators for pairing, coefficients and noise."""

    pairing: np.random.Generator
    coefficients: np.random.Generator
    noise: np.random.Generator

    @classmethod
    def from_seed(cls, seed: int, prefix: str = "mix") -> "MixStreams":
        from mixforge.seeding import substream

        return cls(
            substream(seed, f"{prefix}/pairing"),
            substream(seed, f"{prefix}/coefficients"),
            substream(seed, f"{prefix}/noise"),
        )

    @classmethod
    def coerce(cls, rng) -> "MixStreams":
        if isinstance(rng, cls):
            return rng
        if isinstance(rng, np.random.Generator):
            return cls(rng, rng, rng)
        return cls.from_seed(int(rng))


def mix_from_inputs(
    images: torch.Tensor,
    onehot: torch.Tensor,
    cams: torch.Tensor,
    index: torch.Tensor,
    coeffs: torch.Tensor,
    noise: torch.Tensor,
    module: MixingModule,
    strategy: MixStrategy = MixStrategy.FULL,
) -> MixedBatch:
    """Deterministic core of a mixing step once every random draw is fixed.

    ``cams`` are at image resolution. When that differs from the mixer's
    native resolution the CAMs are resized to it for both networks, the
    thetas are applied at image resolution, and mask logits are resampled
    back to image resolution before the softmax.
    """
    strategy = MixStrategy(strategy)
    b = images.shape[0]
    k = index.shape[1]
    if k != module.k:
        raise InputError(f"mixer is built for k={module.k}, got {k}-tuples")
    size = tuple(images.shape[-2:])
    native = module.config.image_size
    coeffs = torch.as_tensor(coeffs).to(images.dtype)
    xs = images[index]
    ys = onehot[index]
    s_full = cams[index].to(images.dtype)
    s_native = s_full if size == native else resize_saliency(s_full, native)
    out_size = None if size == native else size

    if strategy.learns_transforms:
        thetas = predict_transforms(s_native, coeffs, noise, module)
        s_warped = apply_affine_stack(s_native, thetas, module.config.padding_mode)
    else:
        thetas = identity_thetas(b, k, images.dtype)
        s_warped = s_native

    if strategy.learns_masks:
        masks = predict_masks(s_warped, coeffs, module, out_size)
    elif strategy is MixStrategy.SOFTMAX_CAM:
        masks = softmax_masks(s_full, module.tau)
    else:
        logits = s_warped if out_size is None else bilinear_resize(s_warped, out_size)
        masks = softmax_masks(logits, module.tau)

    out = mix(xs, thetas, masks, coeffs, ys, module.config.padding_mode)
    out.index = index
    out.cams = s_full
    return out


def mix_batch(
    batch: ImageBatch,
    teacher: TeacherHandle,
    module: MixingModule,
    strategy: MixStrategy | str = MixStrategy.FULL,
    alpha: float = 1.0,
    k: int | None = None,
    rng=None,
    num_classes: int | None = None,
    cam_class: str = "label",
    coeffs=None,
) -> MixedBatch:
    """Pair, extract CAMs, sample coefficients and noise, then mix.

    ``rng`` is a :class:`MixStreams`, a numpy Generator (shared by all
    draws) or an integer seed. ``coeffs`` overrides the coefficient draw.
    """
    k = k or module.k
    if len(batch) < k:
        raise InputError(f"batch of {len(batch)} is smaller than k={k}")
    streams = MixStreams.coerce(0 if rng is None else rng)
    n_cls = num_classes or batch.num_classes or teacher.num_classes
    index = pair_batch(batch, k, streams.pairing)
    cams = compute_cam(batch.images, cam_class_ids(batch.labels, cam_class), teacher)
    if coeffs is None:
        coeffs = sample_coefficients(alpha, k, streams.coefficients, size=len(batch))
    coeffs = torch.as_tensor(np.asarray(coeffs), dtype=batch.images.dtype).reshape(len(batch), k)
    noise = sample_noise(streams.noise, module.config.image_size, n=len(batch), grid=module.config.noise_grid,
                         dtype=batch.images.dtype)
    return mix_from_inputs(batch.images, batch.one_hot(n_cls), cams, index, coeffs, noise, module, strategy)


# ------------------------------------------------------------------ persistence


def mixer_metadata(module: MixingModule, **extra) -> dict:
    cfg = module.config
    meta = {
        "kind": "mixer",
        "format": MIXER_FORMAT,
        "k": cfg.k,
        "channel_counts": {"transform_in": cfg.transform_in_channels, "mask_in": cfg.mask_in_channels},
        "tau": float(module.tau.detach()),
        "architecture": asdict(cfg),
    }
    meta.update(extra)
    return meta


def save_mixer(module: MixingModule, path, **meta) -> Path:
    """Weights file plus JSON sidecar with k, alpha, strategy, channel counts,
    tau, architecture, source dataset and teacher identifier."""
    meta.setdefault("alpha", None)
    meta.setdefault("strategy", MixStrategy.FULL.value)
    meta.setdefault("source_dataset", None)
    meta.setdefault("teacher", None)
    return save_state(module.state_dict(), path, mixer_metadata(module, **meta))


def load_mixer(path) -> tuple[MixingModule, dict]:
    state, meta = load_state(path)
    if meta.get("kind") != "mixer" or "architecture" not in meta:
        raise CheckpointError(f"{path} is not a mixer checkpoint")
    cfg = MixerConfig.from_dict(meta["architecture"])
    module = MixingModule(cfg)
    try:
        module.load_state_dict(state, strict=True)
    except RuntimeError as exc:
        raise CheckpointError(f"mixer weights in {path} do not match its sidecar: {exc}") from exc
    return module, meta
