"""Wall-clock comparison of single-pass mixing against iterative mask optimization."""

from __future__ import annotations

import statistics
import time
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np
import torch

from mixforge.baselines import iterative_mask_optimizer
from mixforge.data import ImageBatch
from mixforge.mixer import MixingModule, MixStrategy, MixStreams, mix_batch
from mixforge.saliency import TeacherHandle

DEFAULT_BATCH = 128
DEFAULT_TRIALS = 10


@dataclass
class MethodTiming:
    mean: float
    std: float
    trials: int
    times: list[float] = field(default_factory=list)


@dataclass
class TimingReport:
    batch_size: int
    trials: int
    steps: int
    image_shape: list[int]
    methods: dict[str, MethodTiming]

    @property
    def speedup(self) -> float:
        return self.methods["iterative"].mean / self.methods["transformmix"].mean

    def to_dict(self) -> dict:
        d = asdict(self)
        d["speedup"] = self.speedup
        return d


def time_callable(fn: Callable[[], object], trials: int, warmup: int = 1) -> MethodTiming:
    for _ in range(warmup):
        fn()
    times = []
    for _ in range(trials):
        start = time.perf_counter()
        fn()
        times.append(time.perf_counter() - start)
    std = statistics.stdev(times) if len(times) > 1 else 0.0
    return MethodTiming(mean=statistics.fmean(times), std=std, trials=trials, times=times)


def run_benchmark(
    batch: ImageBatch,
    teacher: TeacherHandle,
    mixer: MixingModule,
    trials: int = DEFAULT_TRIALS,
    steps: int = 100,
    warmup: int = 1,
    alpha: float = 1.0,
    lr: float = 0.1,
    seed: int = 0,
) -> TimingReport:
    """Time producing one mixed batch with each method; warm-up runs are excluded.

    The single-pass timing covers CAM extraction, sampling, both networks and
    the mix itself, and has no step budget to tune.
    """
    mixer.eval()
    n_cls = batch.num_classes or teacher.num_classes

    def single_pass():
        with torch.no_grad():
            return mix_batch(batch, teacher, mixer, MixStrategy.FULL, alpha, mixer.k, MixStreams.from_seed(seed),
                             num_classes=n_cls)

    def iterative():
        return iterative_mask_optimizer(batch, teacher, steps, alpha, np.random.default_rng(seed), n_cls, lr)

    methods = {
        "transformmix": time_callable(single_pass, trials, warmup),
        "iterative": time_callable(iterative, trials, warmup),
    }
    return TimingReport(batch_size=len(batch), trials=trials, steps=steps,
                        image_shape=list(batch.images.shape[1:]), methods=methods)
