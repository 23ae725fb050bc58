"""``mixforge`` experiment harness.

    mixforge train-teacher|train-mixer|train-task|transfer|visualize|bench --config FILE [--seed N] [--strategy S]

Outputs land under ``$MIXFORGE_OUTPUT_ROOT/<experiment.output_dir>/<command>/...``
(the root defaults to the working directory). Every run directory holds the
resolved ``config.toml``. Failures exit non-zero and print a JSON error
object on stderr.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import statistics
import sys
from pathlib import Path

import numpy as np
import torch

from mixforge import plotting
from mixforge.benchmark import run_benchmark
from mixforge.config import ExperimentConfig, load_config
from mixforge.data import Dataset, ImageBatch, load_dataset
from mixforge.errors import ConfigError, DependencyError, InputError, MixforgeError
from mixforge.mixer import MixStreams, build_mixer, load_mixer, mix_batch, mix_from_inputs, sample_noise
from mixforge.models import ArchSpec, build_model, load_checkpoint
from mixforge.saliency import TeacherHandle, cam_class_ids, compute_cam
from mixforge.seeding import substream
from mixforge.training import (
    ABLATION_STRATEGIES,
    MIXER_STRATEGIES,
    STRATEGIES,
    train_mixer,
    train_task,
)

LOGGER = logging.getLogger("mixforge")

RESULTS_COLUMNS = ("strategy", "n_seeds", "top1_mean", "top1_std", "top5_mean", "top5_std")


def _write_json(path: Path, obj) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, default=str) + "\n")
    return path


def _run_dir(cfg: ExperimentConfig, *parts) -> Path:
    d = cfg.output_root().joinpath(*[str(p) for p in parts])
    d.mkdir(parents=True, exist_ok=True)
    cfg.dump(d / "config.toml")
    return d


def _datasets(cfg: ExperimentConfig) -> tuple[Dataset, Dataset]:
    return load_dataset(cfg.dataset), load_dataset(cfg.test_spec())


def _teacher_path(cfg: ExperimentConfig, seed: int) -> Path:
    if cfg.teacher.checkpoint:
        return Path(cfg.teacher.checkpoint).expanduser()
    return cfg.output_root() / "teacher" / f"seed_{seed}" / "model.pt"


def _load_teacher(cfg: ExperimentConfig, seed: int) -> TeacherHandle:
    path = _teacher_path(cfg, seed)
    if not path.exists():
        raise DependencyError(f"teacher checkpoint not found at {path}; run train-teacher first "
                              "or set [teacher] checkpoint")
    model, meta = load_checkpoint(path)
    return TeacherHandle(model, name=f"{meta['arch']['family']}:{path}")


def _mixer_path(cfg: ExperimentConfig, seed: int, strategy: str | None = None) -> Path:
    if strategy and strategy in cfg.mixer.checkpoints:
        return Path(cfg.mixer.checkpoints[strategy]).expanduser()
    if cfg.mixer.checkpoint:
        return Path(cfg.mixer.checkpoint).expanduser()
    return cfg.output_root() / "mixer" / f"seed_{seed}" / "mixer.pt"


def _load_mixer(path: Path):
    if not path.exists():
        raise DependencyError(f"mixer checkpoint not found at {path}; run train-mixer first "
                              "or set [mixer] checkpoint")
    return load_mixer(path)


def _finish_run(run_dir: Path, metrics, extra: dict | None = None) -> dict:
    summary = metrics.summary()
    summary.update(extra or {})
    _write_json(run_dir / "summary.json", summary)
    if metrics.rows:
        plotting.plot_metrics(metrics.rows, run_dir / "metrics.png")
    return summary


# ------------------------------------------------------------------ commands


def cmd_train_teacher(cfg: ExperimentConfig) -> dict:
    train, test = _datasets(cfg)
    out = {}
    for seed in cfg.experiment.seeds:
        run = _run_dir(cfg, "teacher", f"seed_{seed}")
        tcfg = cfg.task_config(seed, "simple")
        _, metrics = train_task(train, test, tcfg, out_dir=run, extra_meta={"role": "teacher"})
        out[seed] = _finish_run(run, metrics, {"role": "teacher", "checkpoint": str(run / "model.pt")})
    return out


def cmd_train_mixer(cfg: ExperimentConfig) -> dict:
    train, _ = _datasets(cfg)
    out = {}
    for seed in cfg.experiment.seeds:
        teacher = _load_teacher(cfg, seed)
        scfg = cfg.search_config(seed)
        mcfg = cfg.mixer.mixer_config(scfg.k, train.image_size)
        run = _run_dir(cfg, "mixer", f"seed_{seed}")
        mixer, metrics = train_mixer(train, teacher, scfg, mixer_config=mcfg, out_dir=run)
        out[seed] = _finish_run(run, metrics, {"role": "mixer", "tau": float(mixer.tau.detach()),
                                               "checkpoint": str(run / "mixer.pt"), "k": mixer.k,
                                               "transform_in_channels": mixer.config.transform_in_channels,
                                               "mask_in_channels": mixer.config.mask_in_channels})
    return out


def _expand_strategies(value: str) -> list[str]:
    if value == "ablation":
        return list(ABLATION_STRATEGIES)
    names = [s.strip() for s in value.split(",") if s.strip()]
    bad = [s for s in names if s not in STRATEGIES]
    if bad:
        raise ConfigError(f"unknown strategy {bad[0]!r}; known: {', '.join(STRATEGIES)}, ablation")
    return names


def _aggregate(per_seed: list[dict]) -> dict:
    out = {"n_seeds": len(per_seed)}
    for key in ("top1", "top5"):
        vals = [r[key] for r in per_seed if r.get(key) is not None]
        out[f"{key}_mean"] = statistics.fmean(vals) if vals else None
        out[f"{key}_std"] = statistics.stdev(vals) if len(vals) > 1 else (0.0 if vals else None)
    return out


def _write_results(run: Path, rows: list[dict]) -> None:
    with (run / "results.csv").open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=RESULTS_COLUMNS)
        writer.writeheader()
        for r in rows:
            writer.writerow({k: "" if r.get(k) is None else r.get(k) for k in RESULTS_COLUMNS})
    if rows and all(r.get("top1_mean") is not None for r in rows):
        plotting.plot_results(rows, run / "results.png")


def _task_runs(cfg: ExperimentConfig, train: Dataset, test: Dataset, strategies: list[str], kind: str,
               mixer_override: Path | None = None) -> dict:
    base = _run_dir(cfg, kind)
    rows, details = [], {}
    for strategy in strategies:
        finals = []
        for seed in cfg.experiment.seeds:
            tcfg = cfg.task_config(seed, strategy)
            teacher = mixer = None
            meta = {}
            if strategy in MIXER_STRATEGIES:
                teacher = _load_teacher(cfg, seed)
                path = mixer_override or _mixer_path(cfg, seed, strategy)
                mixer, mmeta = _load_mixer(path)
                meta = {"mixer_checkpoint": str(path), "mixer_source_dataset": mmeta.get("source_dataset"),
                        "mixer_resolution": list(mixer.config.image_size)}
            run = _run_dir(cfg, kind, strategy, f"seed_{seed}")
            _, metrics = train_task(train, test, tcfg, teacher=teacher, mixer=mixer, out_dir=run, extra_meta=meta)
            _finish_run(run, metrics, {"strategy": strategy, **meta})
            finals.append(metrics.final)
        row = {"strategy": strategy, **_aggregate(finals)}
        rows.append(row)
        details[strategy] = row
    _write_results(base, rows)
    _write_json(base / "summary.json", {"results": rows, "seeds": cfg.experiment.seeds})
    return details


def cmd_train_task(cfg: ExperimentConfig) -> dict:
    train, test = _datasets(cfg)
    return _task_runs(cfg, train, test, _expand_strategies(cfg.experiment.strategy), "task")


def cmd_transfer(cfg: ExperimentConfig) -> dict:
    """Apply a mixer trained elsewhere to the configured (target) dataset."""
    if not cfg.transfer.mixer_checkpoint:
        raise ConfigError("[transfer] mixer_checkpoint is required")
    path = Path(cfg.transfer.mixer_checkpoint).expanduser()
    mixer, _ = _load_mixer(path)
    k = cfg.task.get("k", cfg.search.get("k", mixer.k))
    if k != mixer.k:
        raise ConfigError(f"incompatible k: transfer mixer was trained for k={mixer.k}, config asks for k={k}")
    train, test = _datasets(cfg)
    strategies = [s for s in _expand_strategies(cfg.experiment.strategy)]
    return _task_runs(cfg, train, test, strategies, "transfer", mixer_override=path)


def _display(ds: Dataset):
    def to_display(x):
        return ds.denormalize(x if x.dim() == 3 else x.unsqueeze(0)).squeeze(0).clamp(0, 1)

    return to_display


def cmd_visualize(cfg: ExperimentConfig) -> dict:
    seed = cfg.experiment.seeds[0]
    spec = cfg.dataset if cfg.visualize.split == "train" else cfg.test_spec()
    ds = load_dataset(spec)
    n = cfg.visualize.n
    if n > len(ds):
        raise InputError(f"asked for {n} samples but the dataset has only {len(ds)}")
    teacher = _load_teacher(cfg, seed)
    mixer, _ = _load_mixer(_mixer_path(cfg, seed))
    mixer.eval()
    if n < mixer.k:
        raise InputError(f"need at least k={mixer.k} samples to mix")
    run = _run_dir(cfg, "visualize", f"seed_{seed}")
    idx = np.sort(substream(seed, "visualize/pick").choice(len(ds), size=n, replace=False))
    batch = ds.batch(idx)
    to_display = _display(ds)
    display_inputs = torch.stack([to_display(x) for x in batch.images])
    alpha = cfg.search.get("alpha", 1.0)
    with torch.no_grad():
        mixed = mix_batch(batch, teacher, mixer, "full", alpha, mixer.k, MixStreams.from_seed(seed, "visualize"),
                          num_classes=ds.num_classes)
    _, rows = plotting.mixing_grid(display_inputs, mixed, run / "grid.png", to_display)
    out = {"grid": str(run / "grid.png"), "rows": rows, "columns": n, "k": mixer.k, "tau": float(mixer.tau.detach())}

    if cfg.visualize.lambda_sweep:
        if mixer.k != 2:
            LOGGER.info("lambda sweep is defined for k=2 only; skipped")
        else:
            sweep = lambda_sweep(batch, teacher, mixer, cfg.visualize.lambdas, seed)
            plotting.lambda_sweep_grid(display_inputs, sweep, cfg.visualize.lambdas, run / "sweep.png", to_display)
            with (run / "sweep.csv").open("w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow(["lambda", "mask1_mean", "mask2_mean"])
                for lam, m in zip(cfg.visualize.lambdas, sweep):
                    w.writerow([lam, float(m.masks[0, 0].mean()), float(m.masks[0, 1].mean())])
            out["sweep"] = str(run / "sweep.png")
    _write_json(run / "summary.json", out)
    return out


def lambda_sweep(batch: ImageBatch, teacher: TeacherHandle, mixer, lambdas, seed: int = 0) -> list:
    """Mix the first two images of ``batch`` at each coefficient.

    ``lam`` is the share of the second input: coefficients are (1 - lam, lam).
    The noise draw is held fixed across the sweep.
    """
    images = batch.images[:2]
    labels = batch.labels[:2]
    onehot = torch.nn.functional.one_hot(labels, teacher.num_classes).to(images.dtype)
    cams = compute_cam(images, cam_class_ids(labels, "label"), teacher)
    index = torch.tensor([[0, 1]])
    noise = sample_noise(substream(seed, "visualize/sweep-noise"), mixer.config.image_size, n=1,
                         grid=mixer.config.noise_grid)
    out = []
    with torch.no_grad():
        for lam in lambdas:
            coeffs = torch.tensor([[1.0 - lam, lam]], dtype=images.dtype)
            out.append(mix_from_inputs(images, onehot, cams, index, coeffs, noise, mixer, "full"))
    return out


def cmd_bench(cfg: ExperimentConfig) -> dict:
    seed = cfg.experiment.seeds[0]
    ds = load_dataset(cfg.dataset)
    if _teacher_path(cfg, seed).exists():
        teacher = _load_teacher(cfg, seed)
    else:
        LOGGER.info("no teacher checkpoint; timing with an untrained %s", cfg.arch.family)
        spec = ArchSpec(cfg.arch.family, ds.channels, ds.image_size, ds.num_classes)
        teacher = TeacherHandle(build_model(spec, seed))
    mpath = _mixer_path(cfg, seed)
    if mpath.exists():
        mixer, _ = load_mixer(mpath)
    else:
        mixer = build_mixer(cfg.mixer.mixer_config(cfg.search.get("k", 2), ds.image_size), seed)
    bs = cfg.bench.batch_size
    idx = substream(seed, "bench/pick").choice(len(ds), size=bs, replace=len(ds) < bs)
    batch = ds.batch(idx)
    report = run_benchmark(batch, teacher, mixer, cfg.bench.trials, cfg.bench.steps, cfg.bench.warmup,
                           cfg.search.get("alpha", 1.0), cfg.bench.lr, seed)
    run = _run_dir(cfg, "bench")
    d = report.to_dict()
    _write_json(run / "timing.json", d)
    plotting.plot_timing(d, run / "timing.png")
    return d


COMMANDS = {
    "train-teacher": cmd_train_teacher,
    "train-mixer": cmd_train_mixer,
    "train-task": cmd_train_task,
    "transfer": cmd_transfer,
    "visualize": cmd_visualize,
    "bench": cmd_bench,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mixforge", description="Learned saliency-guided sample mixing")
    parser.add_argument("--log-level", default="INFO")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, fn in COMMANDS.items():
        p = sub.add_parser(name, help=(fn.__doc__ or "").strip().splitlines()[0] if fn.__doc__ else None)
        p.add_argument("--config", required=True, help="experiment TOML file")
        p.add_argument("--seed", type=int, default=None, help="run a single seed instead of the configured list")
        p.add_argument("--log-level", default=argparse.SUPPRESS)
        p.add_argument("--strategy", default=None,
                       help=f"mixing strategy ({', '.join(STRATEGIES)}), comma list, or 'ablation'")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.INFO),
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config, seed=args.seed, strategy=args.strategy)
        result = COMMANDS[args.command](cfg)
    except MixforgeError as exc:
        print(json.dumps(exc.to_dict(), default=str), file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - surface anything else as machine-readable too
        LOGGER.exception("unexpected failure")
        print(json.dumps({"error": "internal", "type": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
        return 1
    print(json.dumps({"command": args.command, "result": result}, default=str, sort_keys=True))
    return 0


if __name__ == "__main__":
    sys.exit(main())
