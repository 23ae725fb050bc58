"""Acceptance criteria, one test and one PASS/FAIL summary line each.

Run ``pytest tests/test_acceptance.py -v``; the lines are printed in the
"acceptance criteria" section at the end of the session.
"""

from __future__ import annotations

import copy
import math
import os
import time
from pathlib import Path

import numpy as np
import pytest
import torch
from scipy import stats

from mixforge.benchmark import run_benchmark
from mixforge.data import DatasetSpec, ImageBatch, load_dataset
from mixforge.mixer import (
    MASK_SUM_TOL,
    MixerConfig,
    MixStrategy,
    MixStreams,
    apply_affine,
    apply_affine_stack,
    build_mixer,
    identity_thetas,
    mix,
    mix_batch,
    mix_from_inputs,
    predict_masks,
    predict_transforms,
    sample_coefficients,
    sample_noise,
)
from mixforge.models import ArchSpec, build_model
from mixforge.saliency import TeacherHandle, compute_cam
from mixforge.seeding import substream
from mixforge.training import (
    SearchConfig,
    TaskConfig,
    make_search_optimizer,
    search_loss,
    search_step,
    soft_cross_entropy,
    train_mixer,
    train_task,
)
from tests.oracles import warp_loop

CIFAR_ENV = "MIXFORGE_CIFAR10"


def perturb(module, scale, seed):
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in module.parameters():
            p.add_(scale * torch.randn(p.shape, generator=g, dtype=p.dtype))
    return module


def test_01_mask_normalization(acceptance):
    start = time.perf_counter()
    rng = np.random.default_rng(101)
    worst, n = 0.0, 0
    for trial in range(100):
        k = 2 + trial % 3
        size = (16, 16) if trial % 2 else (8, 8)
        mixer = perturb(build_mixer(MixerConfig(k=k, image_size=size), trial), float(rng.uniform(0.01, 2.0)), trial)
        with torch.no_grad():
            mixer.log_tau.fill_(float(rng.uniform(-7.0, 2.0)))
            cams = torch.as_tensor(rng.random((10, k, *size)), dtype=torch.float32)
            coeffs = torch.as_tensor(sample_coefficients(float(rng.uniform(0.1, 4)), k, rng, size=10),
                                     dtype=torch.float32)
            noise = sample_noise(rng, size, n=10)
            thetas = predict_transforms(cams, coeffs, noise, mixer)
            masks = predict_masks(apply_affine_stack(cams, thetas), coeffs, mixer)
        worst = max(worst, float((masks.sum(1) - 1).abs().max()))
        assert masks.min() >= 0
        n += 10
    elapsed = time.perf_counter() - start
    acceptance(1, "mask normalization", worst <= MASK_SUM_TOL and elapsed < 60,
               f"{n} inputs, max |sum-1| = {worst:.2e} (tol 1e-6), {elapsed:.1f}s (limit 60s)")


def test_02_warp_oracle(acceptance):
    start = time.perf_counter()
    rng = np.random.default_rng(202)
    fields = rng.random((100, 1, 16, 16))
    thetas = np.eye(2, 3)[None] + rng.normal(scale=0.4, size=(100, 2, 3))
    got = apply_affine(torch.tensor(fields, dtype=torch.float32), torch.tensor(thetas, dtype=torch.float32))
    worst = max(float(np.abs(got[i].numpy() - warp_loop(fields[i], thetas[i])).max()) for i in range(100))
    elapsed = time.perf_counter() - start
    acceptance(2, "warp oracle equivalence", worst <= 1e-5 and elapsed < 60,
               f"100 fields 16x16, max abs diff = {worst:.2e} (tol 1e-5), {elapsed:.1f}s")


def test_03_identity_contracts(acceptance):
    rng = np.random.default_rng(303)
    x = torch.as_tensor(rng.random((6, 3, 16, 16)), dtype=torch.float32)
    theta = identity_thetas(6).requires_grad_()  # forces the sampling path
    warp_err = float((apply_affine(x, theta) - x).detach().abs().max())

    mixer = build_mixer(MixerConfig(k=2, image_size=(16, 16)), seed=3)
    cams = torch.as_tensor(rng.random((6, 2, 16, 16)), dtype=torch.float32)
    coeffs = torch.as_tensor(sample_coefficients(1.0, 2, rng, size=6), dtype=torch.float32)
    with torch.no_grad():
        thetas = predict_transforms(cams, coeffs, sample_noise(rng, (16, 16), n=6), mixer)
    exact_identity = torch.equal(thetas, identity_thetas(6, 2))

    pair = torch.stack([x, x.flip(0)], dim=1)
    masks = torch.zeros(6, 2, 16, 16)
    masks[:, 0] = 1
    labels = torch.eye(2)[torch.tensor([[0, 1]] * 6)]
    out = mix(pair, identity_thetas(6, 2).requires_grad_(), masks, torch.tensor([[1.0, 0.0]] * 6), labels)
    mix_err = float((out.images - x).detach().abs().max())
    ok = warp_err <= 1e-6 and exact_identity and mix_err <= 1e-6
    acceptance(3, "identity contracts", ok,
               f"identity warp err {warp_err:.1e}, fresh thetas exact identity: {exact_identity}, "
               f"degenerate mix err {mix_err:.1e} (tol 1e-6)")


@pytest.mark.slow
def test_04_gradient_check(acceptance, toy_data, toy_teacher):
    start = time.perf_counter()
    train, _ = toy_data
    teacher = TeacherHandle(copy.deepcopy(toy_teacher.model).double(), name="toy-cnn-f64")
    mixer = perturb(build_mixer(MixerConfig(k=2, image_size=(8, 8)), seed=4).double(), 0.05, 4)
    with torch.no_grad():
        mixer.log_tau.fill_(math.log(0.7))
    batch = train.batch(np.arange(4))
    images = batch.images.double()
    rng = np.random.default_rng(404)
    index = torch.tensor([[0, 1], [1, 2], [2, 3], [3, 0]])
    coeffs = torch.as_tensor(sample_coefficients(1.0, 2, rng, size=4))
    noise = sample_noise(rng, (8, 8), n=4, dtype=torch.float64)
    cams = compute_cam(images, batch.labels, teacher)
    onehot = batch.one_hot(2).double()

    def loss_fn():
        mixed = mix_from_inputs(images, onehot, cams, index, coeffs, noise, mixer, MixStrategy.FULL)
        return soft_cross_entropy(teacher.logits(mixed.images), mixed.labels)

    mixer.zero_grad()
    loss_fn().backward()
    eps = 1e-6
    worst, worst_name, count = 0.0, "", 0
    for name, p in mixer.named_parameters():
        analytic = p.grad.detach().clone().flatten()
        numeric = torch.empty_like(analytic)
        flat = p.data.view(-1)
        with torch.no_grad():
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + eps
                hi = loss_fn().item()
                flat[i] = orig - eps
                lo = loss_fn().item()
                flat[i] = orig
                numeric[i] = (hi - lo) / (2 * eps)
        denom = max(float(analytic.norm()), float(numeric.norm()), 1e-12)
        rel = float((analytic - numeric).norm()) / denom
        count += flat.numel()
        if rel > worst:
            worst, worst_name = rel, name
    elapsed = time.perf_counter() - start
    acceptance(4, "gradient check (float64)", worst <= 1e-5 and elapsed < 300,
               f"{count} parameters, worst per-tensor relative error {worst:.2e} ({worst_name}), "
               f"tol 1e-5, {elapsed:.0f}s (limit 300s)")


def test_05_dirichlet_marginal(acceptance):
    pvals = {}
    for alpha in (0.2, 1.0, 2.0):
        draws = sample_coefficients(alpha, 2, substream(5, f"ks/{alpha}"), size=10_000)[:, 0]
        pvals[alpha] = stats.kstest(draws, stats.beta(alpha, alpha).cdf).pvalue
    ok = all(p > 0.01 for p in pvals.values())
    acceptance(5, "Dirichlet k=2 marginal vs Beta", ok,
               ", ".join(f"alpha={a}: p={p:.3f}" for a, p in pvals.items()) + " (need p > 0.01, n=10000)")


def _fixed_search_loss(mixer, teacher, dataset, seed=999):
    losses = []
    with torch.no_grad():
        for i, batch in enumerate(dataset.batches(64)):
            mixed = mix_batch(batch, teacher, mixer, "full", 1.0, rng=MixStreams.from_seed(seed + i),
                              num_classes=teacher.num_classes)
            losses.append(float(search_loss(mixed, teacher)))
    return float(np.mean(losses))


@pytest.mark.slow
def test_06_search_reduces_loss(acceptance, toy_data, toy_teacher):
    start = time.perf_counter()
    train, _ = toy_data
    results = []
    for seed in range(5):
        cfg = SearchConfig(batch_size=32, seed=seed)
        mixer = build_mixer(MixerConfig(k=2, image_size=train.image_size), seed)
        before = _fixed_search_loss(mixer, toy_teacher, train)
        opt = make_search_optimizer(mixer, cfg)
        shuffle = substream(seed, "accept/shuffle")
        streams = MixStreams.from_seed(seed, "accept/search")
        steps = 0
        while steps < 200:
            for batch in train.batches(cfg.batch_size, shuffle, min_size=2):
                search_step(batch, toy_teacher, mixer, opt, cfg.alpha, streams)
                steps += 1
                if steps == 200:
                    break
        results.append((before, _fixed_search_loss(mixer, toy_teacher, train)))
    wins = sum(after < before for before, after in results)
    elapsed = time.perf_counter() - start
    acceptance(6, "search stage lowers teacher loss", wins >= 4 and elapsed < 600,
               f"{wins}/5 seeds improved after 200 steps "
               + " ".join(f"{b:.3f}->{a:.3f}" for b, a in results) + f", {elapsed:.0f}s")


@pytest.mark.slow
def test_07_desk_scale_accuracy(acceptance, tmp_path):
    """Stratified 5,000-image CIFAR-10 subset, ResNet-18, 60 task epochs, 3 seeds.

    Needs the CIFAR-10 binary batches at ``$MIXFORGE_CIFAR10``; without them
    the criterion cannot be evaluated and is reported as failed.
    """
    source = os.environ.get(CIFAR_ENV)
    if not source or not Path(source).expanduser().exists():
        acceptance(7, "desk-scale directional accuracy", False,
                   f"not evaluated: CIFAR-10 binaries not found (set {CIFAR_ENV}); needs hours of accelerator time")
    spec = DatasetSpec(name="cifar10", source=source, format="cifar-bin", num_classes=10, subset_fraction=0.1)
    train, test = load_dataset(spec), load_dataset(DatasetSpec(**{**spec.__dict__, "split": "test",
                                                                   "subset_fraction": 1.0}))
    task = dict(arch="resnet-18", epochs=60, lr=0.1, decay_epochs=(30, 45), batch_size=128)
    top1 = {"simple": [], "softmax_cam": [], "transformmix": []}
    for seed in range(3):
        teacher_model, _ = train_task(train, test, TaskConfig(**task, seed=seed, strategy="simple"))
        teacher = TeacherHandle(teacher_model, name=f"resnet-18/seed{seed}")
        mixers = {}
        for strategy, mode in (("transformmix", "full"), ("softmax_cam", "softmax_cam")):
            mixers[strategy], _ = train_mixer(train, teacher, SearchConfig(epochs=20, seed=seed, strategy=mode))
        for strategy in top1:
            _, metrics = train_task(train, test, TaskConfig(**task, seed=seed, strategy=strategy),
                                    teacher=teacher, mixer=mixers.get(strategy))
            top1[strategy].append(metrics.final["top1"])
    mean = {s: float(np.mean(v)) for s, v in top1.items()}
    ok = mean["transformmix"] >= mean["simple"] + 0.3 and mean["transformmix"] >= mean["softmax_cam"]
    acceptance(7, "desk-scale directional accuracy", ok,
               ", ".join(f"{s} {m:.2f}" for s, m in mean.items()) + " (need tm >= simple + 0.3, tm >= softmax_cam)")


@pytest.mark.slow
def test_08_timing_protocol(acceptance):
    spec = ArchSpec("toy-cnn", 3, (32, 32), 10)
    teacher = TeacherHandle(build_model(spec, 8), name="toy-cnn")
    mixer = build_mixer(MixerConfig(k=2, image_size=(32, 32)), 8)
    g = torch.Generator().manual_seed(8)
    batch = ImageBatch(torch.randn(128, 3, 32, 32, generator=g), torch.randint(0, 10, (128,), generator=g), 10)
    start = time.perf_counter()
    report = run_benchmark(batch, teacher, mixer, trials=10, steps=100)
    elapsed = time.perf_counter() - start
    ok = report.batch_size == 128 and report.trials == 10 and report.speedup >= 4.0 and elapsed < 300
    acceptance(8, "timing benchmark protocol", ok,
               f"batch {report.batch_size}, {report.trials} trials, single pass "
               f"{report.methods['transformmix'].mean * 1e3:.1f} ms vs 100-step iterative "
               f"{report.methods['iterative'].mean * 1e3:.1f} ms, speedup {report.speedup:.1f}x (need >= 4x), "
               f"{elapsed:.0f}s")


def test_09_transfer(acceptance):
    src = DatasetSpec(name="toy-32", num_samples=256, test_samples=64, num_classes=2, image_size=(32, 32),
                      channels=1, seed=9)
    train = load_dataset(src)
    teacher_model, _ = train_task(train, None, TaskConfig(arch="toy-cnn", epochs=3, lr=0.05, decay_epochs=(),
                                                          batch_size=32, augment=False))
    teacher = TeacherHandle(teacher_model, name="toy-cnn-32")
    mixer, _ = train_mixer(train, teacher, SearchConfig(epochs=1, batch_size=32, steps_per_epoch=10, seed=9))
    frozen = {k: v.clone() for k, v in mixer.state_dict().items()}

    target = DatasetSpec(name="toy-64", num_samples=64, test_samples=32, num_classes=2, image_size=(64, 64),
                         channels=1, seed=10)
    big_train, big_test = load_dataset(target), load_dataset(target.with_split("test"))
    with torch.no_grad():
        mixed = mix_batch(big_train.batch(np.arange(16)), teacher, mixer, "full", rng=MixStreams.from_seed(9))
    shape_ok = mixed.images.shape == (16, 1, 64, 64) and mixed.masks.shape == (16, 2, 64, 64)
    sums_ok = float((mixed.masks.sum(1) - 1).abs().max()) <= MASK_SUM_TOL
    _, metrics = train_task(big_train, big_test, TaskConfig(arch="toy-cnn", epochs=1, lr=0.05, decay_epochs=(),
                                                            batch_size=16, strategy="transformmix"),
                            teacher=teacher, mixer=mixer)
    untouched = all(torch.equal(v, frozen[k]) for k, v in mixer.state_dict().items())
    trained = metrics.final["top1"] is not None and math.isfinite(metrics.final["train_loss"])

    # at the mixer's own resolution the transfer path must equal direct composition
    batch = train.batch(np.arange(8))
    rng = np.random.default_rng(99)
    index = torch.tensor([[i, (i + 3) % 8] for i in range(8)])
    coeffs = torch.as_tensor(sample_coefficients(1.0, 2, rng, size=8), dtype=torch.float32)
    noise = sample_noise(rng, (32, 32), n=8)
    with torch.no_grad():
        cams = compute_cam(batch.images, batch.labels, teacher)
        via = mix_from_inputs(batch.images, batch.one_hot(2), cams, index, coeffs, noise, mixer)
        s = cams[index]
        thetas = predict_transforms(s, coeffs, noise, mixer)
        masks = predict_masks(apply_affine_stack(s, thetas), coeffs, mixer)
        direct = mix(batch.images[index], thetas, masks, coeffs, batch.one_hot(2)[index])
    exact = torch.equal(via.images, direct.images) and torch.equal(via.labels, direct.labels)
    ok = shape_ok and sums_ok and untouched and trained and exact
    acceptance(9, "transfer mode", ok,
               f"32->64 mix shapes ok: {shape_ok}, mask sums ok: {sums_ok}, mixer unchanged by task run: "
               f"{untouched}, task epoch finished: {trained}, same-resolution equals direct: {exact}")


def test_10_three_way_mixing(acceptance):
    cfg = MixerConfig(k=3, image_size=(16, 16))
    mixer = perturb(build_mixer(cfg, 10), 0.1, 10)
    teacher = TeacherHandle(build_model(ArchSpec("toy-cnn", 1, (16, 16), 4), 10))
    g = torch.Generator().manual_seed(10)
    batch = ImageBatch(torch.randn(12, 1, 16, 16, generator=g), torch.arange(12) % 4, 4)
    with torch.no_grad():
        mixed = mix_batch(batch, teacher, mixer, "full", 1.0, 3, MixStreams.from_seed(10))
    channels = (mixer.transform_net.localization[0].in_channels, mixer.mask_net.net[0].in_channels)
    shapes = (tuple(mixed.thetas.shape[1:]), mixed.masks.shape[1])
    label_ok = float((mixed.labels.sum(1) - 1).abs().max()) <= 1e-6 and mixed.labels.min() >= 0
    worst = float((mixed.masks.sum(1) - 1).abs().max())
    ok = channels == (6, 5) and shapes == ((3, 2, 3), 3) and label_ok and worst <= 1e-6
    acceptance(10, "k=3 generalization", ok,
               f"input channels {channels} (need (6, 5)), outputs {shapes}, simplex labels: {label_ok}, "
               f"max |mask sum-1| {worst:.1e}")
