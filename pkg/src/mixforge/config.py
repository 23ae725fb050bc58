"""Experiment configuration: one TOML file per experiment, sections mirror module configs.

Example::

    [experiment]
    name = "cifar10-desk"
    output_dir = "cifar10-desk"
    seeds = [0, 1, 2]
    strategy = "transformmix"

    [dataset]
    name = "cifar10"
    format = "cifar-bin"
    source = "~/data/cifar-10-batches-bin"
    num_classes = 10
    subset_fraction = 0.1

    [arch]
    family = "resnet-18"

    [search]
    epochs = 100

    [task]
    epochs = 60
    decay_epochs = [30, 45]
"""

from __future__ import annotations

import dataclasses
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib
import tomli_w

from mixforge.data import DatasetSpec
from mixforge.errors import ConfigError
from mixforge.mixer import MixerConfig
from mixforge.training import SearchConfig, TaskConfig

OUTPUT_ROOT_ENV = "MIXFORGE_OUTPUT_ROOT"


@dataclass
class ExperimentSection:
    name: str = "experiment"
    output_dir: str = "runs"
    seeds: list[int] = field(default_factory=lambda: [0])
    strategy: str = "transformmix"


@dataclass
class ArchSection:
    family: str = "resnet-18"


@dataclass
class TeacherSection:
    checkpoint: str | None = None


@dataclass
class MixerSection:
    checkpoint: str | None = None
    noise_grid: int = 4
    stn_channels: list[int] = field(default_factory=lambda: [8, 10])
    stn_kernels: list[int] = field(default_factory=lambda: [7, 5])
    stn_hidden: int = 32
    mask_layers: int = 3
    mask_channels: int = 32
    mask_kernel: int = 3
    tau_init: float = 1.0
    padding_mode: str = "zeros"
    # per-strategy checkpoints for ablation runs, e.g. {stn_only = "..."}
    checkpoints: dict[str, str] = field(default_factory=dict)

    def mixer_config(self, k: int, image_size) -> MixerConfig:
        return MixerConfig(
            k=k, image_size=tuple(image_size), noise_grid=self.noise_grid, stn_channels=tuple(self.stn_channels),
            stn_kernels=tuple(self.stn_kernels), stn_hidden=self.stn_hidden, mask_layers=self.mask_layers,
            mask_channels=self.mask_channels, mask_kernel=self.mask_kernel, tau_init=self.tau_init,
            padding_mode=self.padding_mode,
        )


@dataclass
class TransferSection:
    mixer_checkpoint: str | None = None


@dataclass
class VisualizeSection:
    n: int = 8
    lambda_sweep: bool = True
    lambdas: list[float] = field(default_factory=lambda: [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9])
    split: str = "test"


@dataclass
class BenchSection:
    batch_size: int = 128
    trials: int = 10
    steps: int = 100
    warmup: int = 1
    lr: float = 0.1


@dataclass
class ExperimentConfig:
    experiment: ExperimentSection = field(default_factory=ExperimentSection)
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    test_dataset: dict = field(default_factory=dict)
    arch: ArchSection = field(default_factory=ArchSection)
    teacher: TeacherSection = field(default_factory=TeacherSection)
    mixer: MixerSection = field(default_factory=MixerSection)
    search: dict = field(default_factory=dict)
    task: dict = field(default_factory=dict)
    transfer: TransferSection = field(default_factory=TransferSection)
    visualize: VisualizeSection = field(default_factory=VisualizeSection)
    bench: BenchSection = field(default_factory=BenchSection)
    source_path: str | None = None

    # -------------------------------------------------------------- derived

    def search_config(self, seed: int) -> SearchConfig:
        return _build(SearchConfig, {**self.search, "seed": seed}, "search")

    def task_config(self, seed: int, strategy: str | None = None) -> TaskConfig:
        values = {**self.task, "seed": seed, "arch": self.arch.family,
                  "strategy": strategy or self.experiment.strategy}
        values.setdefault("k", self.search.get("k", 2))
        values.setdefault("alpha", self.search.get("alpha", 1.0))
        return _build(TaskConfig, values, "task")

    def test_spec(self) -> DatasetSpec:
        values = {**dataclasses.asdict(self.dataset), "split": "test", "subset_fraction": 1.0}
        values.update(self.test_dataset)
        return _build(DatasetSpec, values, "test_dataset")

    def output_root(self) -> Path:
        root = Path(os.environ.get(OUTPUT_ROOT_ENV, "."))
        out = Path(self.experiment.output_dir).expanduser()
        return out if out.is_absolute() else root / out

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d.pop("source_path")
        return _drop_none(d)

    def dump(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(tomli_w.dumps(self.to_dict()))
        return path


def _drop_none(obj):
    if isinstance(obj, dict):
        return {k: _drop_none(v) for k, v in obj.items() if v is not None}
    if isinstance(obj, (list, tuple)):
        return [_drop_none(v) for v in obj]
    return obj


def _build(cls, values: dict, section: str):
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(values) - names
    if unknown:
        raise ConfigError(f"unknown key(s) in [{section}]: {', '.join(sorted(unknown))}")
    try:
        return cls(**values)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid [{section}] section: {exc}") from exc


SECTIONS = {
    "experiment": ExperimentSection,
    "dataset": DatasetSpec,
    "arch": ArchSection,
    "teacher": TeacherSection,
    "mixer": MixerSection,
    "transfer": TransferSection,
    "visualize": VisualizeSection,
    "bench": BenchSection,
}
FREE_SECTIONS = {"search": SearchConfig, "task": TaskConfig, "test_dataset": DatasetSpec}


def config_from_dict(raw: dict, source_path: str | None = None) -> ExperimentConfig:
    unknown = set(raw) - set(SECTIONS) - set(FREE_SECTIONS)
    if unknown:
        raise ConfigError(f"unknown config section(s): {', '.join(sorted(unknown))}")
    kwargs: dict[str, Any] = {}
    for name, cls in SECTIONS.items():
        kwargs[name] = _build(cls, raw.get(name, {}), name)
    for name, cls in FREE_SECTIONS.items():
        values = dict(raw.get(name, {}))
        allowed = {f.name for f in dataclasses.fields(cls)}
        bad = set(values) - allowed
        if bad:
            raise ConfigError(f"unknown key(s) in [{name}]: {', '.join(sorted(bad))}")
        kwargs[name] = values
    cfg = ExperimentConfig(**kwargs, source_path=source_path)
    cfg.search_config(cfg.experiment.seeds[0] if cfg.experiment.seeds else 0)
    if not cfg.experiment.seeds:
        raise ConfigError("[experiment] seeds must list at least one seed")
    return cfg


def load_config(path, seed: int | None = None, strategy: str | None = None) -> ExperimentConfig:
    """Read a TOML experiment file; ``seed``/``strategy`` override the file values."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        raw = tomllib.loads(path.read_text())
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"could not parse {path}: {exc}") from exc
    cfg = config_from_dict(raw, str(path))
    if seed is not None:
        cfg.experiment.seeds = [int(seed)]
    if strategy is not None:
        cfg.experiment.strategy = strategy
    return cfg
