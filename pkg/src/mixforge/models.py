"""Architecture registry (teacher and task networks) and checkpoint I/O.

Every family exposes ``features(x)`` (final conv maps), a global average
pool and an ``nn.Linear`` head at ``fc``, which is what CAM extraction needs.
"""

from __future__ import annotations

import hashlib
import json
import os
import re
import tempfile
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Any

import torch
import torch.nn as nn
import torch.nn.functional as F

from mixforge.errors import CheckpointError, ConfigError

CHECKPOINT_FORMAT = 1


@dataclass(frozen=True)
class ArchSpec:
    family: str
    in_channels: int = 3
    image_size: tuple[int, int] = (32, 32)
    num_classes: int = 10

    @classmethod
    def from_dict(cls, d: dict) -> "ArchSpec":
        d = dict(d)
        if "image_size" in d:
            d["image_size"] = tuple(d["image_size"])
        return cls(**d)


class CAMNet(nn.Module):
    """Base for registered classifiers: logits = fc(GAP(features(x)))."""

    in_channels: int
    fc: nn.Linear

    def features(self, x: torch.Tensor) -> torch.Tensor:
        raise NotImplementedError

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.fc(self.features(x).mean(dim=(2, 3)))


class ToyCNN(CAMNet):
    """Two 3x3 conv layers; small enough for double-precision gradient checks."""

    def __init__(self, in_channels: int = 1, num_classes: int = 2, width: int = 8):
        super().__init__()
        self.in_channels = in_channels
        self.conv1 = nn.Conv2d(in_channels, width, 3, padding=1)
        self.conv2 = nn.Conv2d(width, 2 * width, 3, padding=1)
        self.fc = nn.Linear(2 * width, num_classes)

    def features(self, x):
        return F.relu(self.conv2(F.relu(self.conv1(x))))


class BasicBlock(nn.Module):
    expansion = 1

    def __init__(self, in_planes: int, planes: int, stride: int = 1):
        super().__init__()
        self.conv1 = nn.Conv2d(in_planes, planes, 3, stride=stride, padding=1, bias=False)
        self.bn1 = nn.BatchNorm2d(planes)
        self.conv2 = nn.Conv2d(planes, planes, 3, stride=1, padding=1, bias=False)
        self.bn2 = nn.BatchNorm2d(planes)
        self.shortcut = nn.Sequential()
        if stride != 1 or in_planes != planes:
            self.shortcut = nn.Sequential(
                nn.Conv2d(in_planes, planes, 1, stride=stride, bias=False), nn.BatchNorm2d(planes)
            )

    def forward(self, x):
        out = F.relu(self.bn1(self.conv1(x)))
        out = self.bn2(self.conv2(out))
        return F.relu(out + self.shortcut(x))


class PreActBlock(nn.Module):
    expansion = 1

    def __init__(self, in_planes: int, planes: int, stride: int = 1):
        super().__init__()
        self.bn1 = nn.BatchNorm2d(in_planes)
        self.conv1 = nn.Conv2d(in_planes, planes, 3, stride=stride, padding=1, bias=False)
        self.bn2 = nn.BatchNorm2d(planes)
        self.conv2 = nn.Conv2d(planes, planes, 3, stride=1, padding=1, bias=False)
        self.shortcut = None
        if stride != 1 or in_planes != planes:
            self.shortcut = nn.Conv2d(in_planes, planes, 1, stride=stride, bias=False)

    def forward(self, x):
        out = F.relu(self.bn1(x))
        shortcut = self.shortcut(out) if self.shortcut is not None else x
        out = self.conv1(out)
        out = self.conv2(F.relu(self.bn2(out)))
        return out + shortcut


class ResNet(CAMNet):
    """CIFAR-style ResNet: 3x3 stem, four stages, strides 1/2/2/2."""

    def __init__(self, block, num_blocks, in_channels=3, num_classes=10, preact=False):
        super().__init__()
        self.in_channels = in_channels
        self.preact = preact
        self._planes = 64
        self.conv1 = nn.Conv2d(in_channels, 64, 3, stride=1, padding=1, bias=False)
        self.bn1 = None if preact else nn.BatchNorm2d(64)
        self.layer1 = self._make_layer(block, 64, num_blocks[0], 1)
        self.layer2 = self._make_layer(block, 128, num_blocks[1], 2)
        self.layer3 = self._make_layer(block, 256, num_blocks[2], 2)
        self.layer4 = self._make_layer(block, 512, num_blocks[3], 2)
        self.bn_final = nn.BatchNorm2d(512) if preact else None
        self.fc = nn.Linear(512 * block.expansion, num_classes)

    def _make_layer(self, block, planes, n, stride):
        layers = []
        for s in [stride] + [1] * (n - 1):
            layers.append(block(self._planes, planes, s))
            self._planes = planes * block.expansion
        return nn.Sequential(*layers)

    def features(self, x):
        out = self.conv1(x)
        if self.bn1 is not None:
            out = F.relu(self.bn1(out))
        out = self.layer4(self.layer3(self.layer2(self.layer1(out))))
        if self.bn_final is not None:
            out = F.relu(self.bn_final(out))
        return out


class WideBasic(nn.Module):
    def __init__(self, in_planes: int, planes: int, stride: int = 1):
        super().__init__()
        self.bn1 = nn.BatchNorm2d(in_planes)
        self.conv1 = nn.Conv2d(in_planes, planes, 3, padding=1, bias=False)
        self.bn2 = nn.BatchNorm2d(planes)
        self.conv2 = nn.Conv2d(planes, planes, 3, stride=stride, padding=1, bias=False)
        self.shortcut = None
        if stride != 1 or in_planes != planes:
            self.shortcut = nn.Conv2d(in_planes, planes, 1, stride=stride, bias=False)

    def forward(self, x):
        out = self.conv1(F.relu(self.bn1(x)))
        out = self.conv2(F.relu(self.bn2(out)))
        return out + (self.shortcut(x) if self.shortcut is not None else x)


class WideResNet(CAMNet):
    def __init__(self, depth=28, widen=10, in_channels=3, num_classes=10):
        super().__init__()
        if (depth - 4) % 6:
            raise ConfigError(f"wide-resnet depth must be 6n+4, got {depth}")
        n = (depth - 4) // 6
        widths = [16, 16 * widen, 32 * widen, 64 * widen]
        self.in_channels = in_channels
        self.conv1 = nn.Conv2d(in_channels, widths[0], 3, padding=1, bias=False)
        blocks = []
        in_planes = widths[0]
        for stage, stride in zip(widths[1:], (1, 2, 2)):
            for s in [stride] + [1] * (n - 1):
                blocks.append(WideBasic(in_planes, stage, s))
                in_planes = stage
        self.blocks = nn.Sequential(*blocks)
        self.bn_final = nn.BatchNorm2d(in_planes)
        self.fc = nn.Linear(in_planes, num_classes)

    def features(self, x):
        return F.relu(self.bn_final(self.blocks(self.conv1(x))))


_WRN = re.compile(r"^wide-resnet-(\d+)-(\d+)$")

FAMILIES = ("toy-cnn", "resnet-18", "preact-resnet-18", "wide-resnet-28-10")


def _construct(spec: ArchSpec) -> CAMNet:
    c, n = spec.in_channels, spec.num_classes
    if spec.family == "toy-cnn":
        return ToyCNN(c, n)
    if spec.family == "resnet-18":
        return ResNet(BasicBlock, [2, 2, 2, 2], c, n)
    if spec.family == "preact-resnet-18":
        return ResNet(PreActBlock, [2, 2, 2, 2], c, n, preact=True)
    m = _WRN.match(spec.family)
    if m:
        return WideResNet(int(m.group(1)), int(m.group(2)), c, n)
    raise ConfigError(f"unknown architecture family {spec.family!r}; known: {', '.join(FAMILIES)}")


def build_model(spec: ArchSpec, seed: int = 0) -> CAMNet:
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        model = _construct(spec)
    model.arch_spec = spec
    return model


def feature_shape(model: CAMNet, spec: ArchSpec) -> tuple[int, ...]:
    was_training = model.training
    model.eval()
    with torch.no_grad():
        out = model.features(torch.zeros(1, spec.in_channels, *spec.image_size))
    model.train(was_training)
    return tuple(out.shape[1:])


def _atomic_write(path: Path, write) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    os.close(fd)
    try:
        write(tmp)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def sidecar_path(path) -> Path:
    return Path(path).with_suffix(".json")


def metrics_digest(metrics: Any) -> str:
    blob = json.dumps(metrics, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def save_state(state: dict, path, meta: dict) -> Path:
    """Write ``state`` (tensors) plus a JSON sidecar next to it, atomically."""
    path = Path(path)
    _atomic_write(path, lambda tmp: torch.save(state, tmp))
    _atomic_write(
        sidecar_path(path),
        lambda tmp: Path(tmp).write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n"),
    )
    return path


def load_state(path) -> tuple[dict, dict]:
    path = Path(path)
    side = sidecar_path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint not found: {path}")
    if not side.exists():
        raise CheckpointError(f"checkpoint sidecar not found: {side}")
    try:
        meta = json.loads(side.read_text())
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"corrupt checkpoint sidecar {side}: {exc}") from exc
    try:
        state = torch.load(path, map_location="cpu", weights_only=True)
    except Exception as exc:
        raise CheckpointError(f"corrupt checkpoint file {path}: {exc}") from exc
    if not isinstance(state, dict):
        raise CheckpointError(f"checkpoint {path} does not hold a state dict")
    return state, meta


def save_checkpoint(model: CAMNet, path, meta: dict | None = None) -> Path:
    spec = getattr(model, "arch_spec", None)
    if spec is None:
        raise CheckpointError("model was not built through build_model(); no arch spec attached")
    meta = dict(meta or {})
    meta["arch"] = asdict(spec)
    meta["format"] = CHECKPOINT_FORMAT
    meta.setdefault("kind", "classifier")
    return save_state(model.state_dict(), path, meta)


def load_checkpoint(path) -> tuple[CAMNet, dict]:
    state, meta = load_state(path)
    if "arch" not in meta:
        raise CheckpointError(f"checkpoint sidecar for {path} has no 'arch' entry")
    try:
        spec = ArchSpec.from_dict(meta["arch"])
    except TypeError as exc:
        raise CheckpointError(f"bad arch metadata in {path}: {exc}") from exc
    model = build_model(spec)
    try:
        model.load_state_dict(state, strict=True)
    except RuntimeError as exc:
        raise CheckpointError(f"weights in {path} do not match arch metadata: {exc}") from exc
    return model, meta
