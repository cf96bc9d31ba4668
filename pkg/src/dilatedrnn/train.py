"""Training, evaluation and sweeps driven by a :class:`RunConfig`."""
from __future__ import annotations

import csv
import json
import logging
import math
import re
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Callable, Optional

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from .errors import ConfigurationError, NumericError
from .model import (
    DilatedRnnModel,
    DilationSchedule,
    backward,
    build_baseline,
    build_model,
    forward_interleaved,
    load_checkpoint,
    masked_accuracy,
    masked_loss,
    save_checkpoint,
)
from .numeric import INIT_SCHEMES, Rng, rmsprop_step
from .tasks import (
    CopyMemoryConfig,
    PixelSequenceConfig,
    TaskBatch,
    gen_copy_memory,
    load_mnist_idx,
    pixel_batch,
)

log = logging.getLogger(__name__)

CONFIG_VERSION = 1
TASKS = ("copy_memory", "pixel_mnist", "noisy_mnist")
ARCHITECTURES = ("dilated", "single", "stacked", "regular_skip")

# independent random streams under the run seed
INIT_STREAM, TRAIN_STREAM, VAL_STREAM = 0, 1, 2

METRICS_HEADER = ("iteration", "train_loss", "val_loss", "val_acc")


@dataclass
class RunConfig:
    seed: int
    task: str = "copy_memory"
    T: int = 100
    architecture: str = "dilated"
    cell: str = "vanilla"
    layers: int = 7
    base: int = 2
    start_exponent: int = 0
    hidden: int = 10
    skip_length: Optional[int] = None
    forget_bias: float = 1.0
    init: str = "standard_normal"
    lr: float = 0.001
    decay: float = 0.9
    epsilon: float = 1e-8
    batch_size: int = 128
    iterations: int = 5000
    eval_interval: int = 100
    val_batch: int = 512
    mnist_dir: Optional[str] = None
    permutation_seed: Optional[int] = None
    out: Optional[str] = None
    version: int = CONFIG_VERSION

    def __post_init__(self):
        if self.version != CONFIG_VERSION:
            raise ConfigurationError(f"config version {self.version} unsupported (expected {CONFIG_VERSION})")
        if self.task not in TASKS:
            raise ConfigurationError(f"task must be one of {TASKS}, got {self.task!r}")
        if self.architecture not in ARCHITECTURES:
            raise ConfigurationError(f"architecture must be one of {ARCHITECTURES}")
        for name in ("layers", "hidden", "batch_size", "iterations", "eval_interval", "val_batch", "T"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"{name} must be positive")
        if self.seed is None or self.seed < 0:
            raise ConfigurationError("a non-negative seed is mandatory")
        if not (self.lr > 0 and 0 <= self.decay < 1 and self.epsilon > 0):
            raise ConfigurationError("need lr > 0, 0 <= decay < 1, epsilon > 0")
        if self.init not in INIT_SCHEMES:
            raise ConfigurationError(f"init must be one of {INIT_SCHEMES}")
        if self.task != "copy_memory" and self.mnist_dir is None:
            raise ConfigurationError(f"task {self.task} needs mnist_dir")

    @property
    def schedule(self) -> DilationSchedule:
        return DilationSchedule(self.layers, self.base, self.start_exponent)


def _key_line(text: str, key: str) -> int:
    for k, line in enumerate(text.splitlines(), 1):
        if re.match(rf"\s*{re.escape(key)}\s*=", line):
            return k
    return 0


def parse_config_text(text: str, source: str = "<config>", **overrides) -> RunConfig:
    """Parse a TOML run config; unknown keys are rejected with their line number."""
    try:
        data = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigurationError(f"{source}: {exc}") from exc
    known = {f.name for f in fields(RunConfig)}
    for key in data:
        if key not in known:
            raise ConfigurationError(f"{source}:{_key_line(text, key)}: unknown key {key!r}")
    if "version" not in data:
        raise ConfigurationError(f"{source}: missing 'version' (expected {CONFIG_VERSION})")
    data.update({k: v for k, v in overrides.items() if v is not None})
    if "seed" not in data:
        raise ConfigurationError(f"{source}: 'seed' is mandatory")
    try:
        return RunConfig(**data)
    except TypeError as exc:
        raise ConfigurationError(f"{source}: {exc}") from exc


def load_config(path, **overrides) -> RunConfig:
    return parse_config_text(Path(path).read_text(), str(path), **overrides)


def config_to_toml(cfg: RunConfig) -> str:
    lines = []
    for key, value in asdict(cfg).items():
        if value is None:
            continue
        lines.append(f"{key} = {json.dumps(value)}")
    return "\n".join(lines) + "\n"


# -- tasks ------------------------------------------------------------------


class CopyMemorySource:
    num_classes = 10
    input_dim = 10

    def __init__(self, cfg: RunConfig):
        self.cfg = cfg

    def train_batch(self, iteration: int) -> TaskBatch:
        c = self.cfg
        rng = Rng(c.seed, TRAIN_STREAM, iteration)
        return gen_copy_memory(CopyMemoryConfig(c.T, c.batch_size, c.seed), rng)

    def validation_batch(self) -> TaskBatch:
        c = self.cfg
        return gen_copy_memory(CopyMemoryConfig(c.T, c.val_batch, c.seed), Rng(c.seed, VAL_STREAM))


MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}


def _find(directory: Path, stem: str) -> Path:
    for name in (stem, stem + ".gz"):
        if (directory / name).exists():
            return directory / name
    raise ConfigurationError(f"{directory} has no {stem}[.gz]")


class PixelSource:
    """Pixel-by-pixel MNIST; the last 5000 training images (1/12 if fewer) are held out."""

    num_classes = 10
    input_dim = 1

    def __init__(self, cfg: RunConfig):
        self.cfg = cfg
        directory = Path(cfg.mnist_dir)
        images, labels = load_mnist_idx(*(_find(directory, s) for s in MNIST_FILES["train"]))
        held = 5000 if len(images) > 12 * 5000 else max(1, len(images) // 12)
        self.train_images, self.train_labels = images[:-held], labels[:-held]
        self.val_images, self.val_labels = images[-held:], labels[-held:]
        pad = cfg.T if cfg.task == "noisy_mnist" else None
        self.seq_cfg = PixelSequenceConfig(cfg.permutation_seed, pad, cfg.seed)

    def train_batch(self, iteration: int) -> TaskBatch:
        rng = Rng(self.cfg.seed, TRAIN_STREAM, iteration)
        idx = rng.integers(0, len(self.train_images), self.cfg.batch_size)
        return pixel_batch(self.train_images[idx], self.train_labels[idx], self.seq_cfg, rng)

    def validation_batch(self) -> TaskBatch:
        n = min(self.cfg.val_batch, len(self.val_images))
        rng = Rng(self.cfg.seed, VAL_STREAM)
        return pixel_batch(self.val_images[:n], self.val_labels[:n], self.seq_cfg, rng)


def make_source(cfg: RunConfig):
    return CopyMemorySource(cfg) if cfg.task == "copy_memory" else PixelSource(cfg)


def make_model(cfg: RunConfig, input_dim: int, num_classes: int) -> DilatedRnnModel:
    rng = Rng(cfg.seed, INIT_STREAM)
    if cfg.architecture == "dilated":
        return build_model(cfg.cell, cfg.schedule, input_dim, cfg.hidden, num_classes, rng, cfg.forget_bias, cfg.init)
    return build_baseline(
        cfg.architecture,
        cfg.cell,
        input_dim=input_dim,
        hidden_dim=cfg.hidden,
        num_classes=num_classes,
        rng=rng,
        num_layers=cfg.layers,
        skip_length=cfg.skip_length,
        forget_bias=cfg.forget_bias,
        init=cfg.init,
    )


# -- training ---------------------------------------------------------------


@dataclass
class MetricsRecord:
    iteration: int
    train_loss: float
    val_loss: float
    val_acc: float
    seconds: float = 0.0

    def csv_row(self) -> list[str]:
        return [str(self.iteration), repr(self.train_loss), repr(self.val_loss), repr(self.val_acc)]


@dataclass
class TrainResult:
    out_dir: Path
    records: list[MetricsRecord]
    best: MetricsRecord
    wall_seconds: float
    param_count: int
    summary: dict = field(default_factory=dict)

    @property
    def final(self) -> MetricsRecord:
        return self.records[-1]


def evaluate(model: DilatedRnnModel, batch: TaskBatch) -> tuple[float, float]:
    acts = forward_interleaved(model, batch.inputs)
    loss, _ = masked_loss(acts.logits, batch.targets, batch.loss_mask)
    return loss, masked_accuracy(acts.logits, batch.targets, batch.loss_mask)


def _write_json(path: Path, record: dict):
    path.write_text(json.dumps(record, indent=2, sort_keys=True) + "\n")


def train(cfg: RunConfig, out_dir=None, clock: Callable[[], float] = time.perf_counter) -> TrainResult:
    """BPTT + RMSProp on fresh batches; checkpoint the best validation loss.

    Writes ``metrics.csv`` (deterministic), ``timing.csv`` (wall clock),
    ``best.npz`` and ``summary.json`` under ``out_dir``.
    """
    if out_dir is None and cfg.out is None:
        raise ConfigurationError("no output directory given")
    out = Path(out_dir if out_dir is not None else cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg = replace(cfg, out=str(out))
    source = make_source(cfg)
    model = make_model(cfg, source.input_dim, source.num_classes)
    params = model.parameters()
    val = source.validation_batch()
    log.info("training %s (%d parameters) for %d iterations", model.architecture, model.param_count(), cfg.iterations)

    records: list[MetricsRecord] = []
    best: MetricsRecord | None = None
    running: list[float] = []
    start = clock()
    with open(out / "metrics.csv", "w", newline="") as mfh, open(out / "timing.csv", "w", newline="") as tfh:
        metrics = csv.writer(mfh, lineterminator="\n")
        timing = csv.writer(tfh, lineterminator="\n")
        metrics.writerow(METRICS_HEADER)
        timing.writerow(("iteration", "seconds"))
        for it in range(1, cfg.iterations + 1):
            batch = source.train_batch(it)
            acts = forward_interleaved(model, batch.inputs)
            loss, dlogits = masked_loss(acts.logits, batch.targets, batch.loss_mask)
            try:
                if not math.isfinite(loss):
                    raise NumericError(f"non-finite training loss at iteration {it}")
                backward(model, acts, dlogits)
                for p in params:
                    rmsprop_step(p, cfg.lr, cfg.decay, cfg.epsilon)
            except NumericError as exc:
                _write_json(out / "diagnostic.json", {"iteration": it, "loss": repr(loss), "error": str(exc)})
                raise
            running.append(loss)
            if it % cfg.eval_interval == 0 or it == cfg.iterations:
                val_loss, val_acc = evaluate(model, val)
                rec = MetricsRecord(it, float(np.mean(running)), val_loss, val_acc, clock() - start)
                running.clear()
                records.append(rec)
                metrics.writerow(rec.csv_row())
                timing.writerow((it, f"{rec.seconds:.3f}"))
                mfh.flush()
                tfh.flush()
                if best is None or val_loss < best.val_loss:
                    best = rec
                    save_checkpoint(
                        model,
                        out / "best.npz",
                        {"iteration": it, "val_loss": val_loss, "val_acc": val_acc, "config": asdict(cfg)},
                    )
                log.info("iter %d train %.4f val %.4f acc %.3f", it, rec.train_loss, val_loss, val_acc)
    wall = clock() - start
    summary = {
        "config": asdict(cfg),
        "param_count": model.param_count(),
        "best": asdict(best),
        "final": asdict(records[-1]),
        "wall_seconds": wall,
    }
    _write_json(out / "summary.json", summary)
    return TrainResult(out, records, best, wall, model.param_count(), summary)


def evaluate_checkpoint(checkpoint, cfg: RunConfig) -> dict:
    """Evaluate a saved model on the run's seeded validation batch."""
    model, meta = load_checkpoint(checkpoint)
    source = make_source(cfg)
    if model.input_dim != source.input_dim or model.num_classes != source.num_classes:
        raise ConfigurationError(
            f"checkpoint expects input_dim={model.input_dim}, classes={model.num_classes}; "
            f"task {cfg.task} provides {source.input_dim}, {source.num_classes}"
        )
    loss, acc = evaluate(model, source.validation_batch())
    return {"val_loss": loss, "val_acc": acc, "checkpoint_iteration": meta["extra"].get("iteration")}


# -- sweeps -----------------------------------------------------------------


def sweep_configs(base: RunConfig, parameter: str, values) -> list[RunConfig]:
    """Derive one config per swept value.

    Sweeping ``start_exponent`` keeps the largest dilation fixed: each step
    up in ``l0`` drops the bottom layer, so ``layers`` shrinks by one.
    """
    out = []
    for v in values:
        if parameter == "start_exponent":
            layers = base.layers - v
            if layers < 1:
                raise ConfigurationError(f"start_exponent {v} leaves no layers out of {base.layers}")
            out.append(replace(base, start_exponent=v, layers=layers))
        elif parameter == "layers":
            out.append(replace(base, layers=v))
        else:
            raise ConfigurationError(f"cannot sweep {parameter!r}; use start_exponent or layers")
    return out


def ablate(base: RunConfig, parameter: str, values, out_dir=None, clock=time.perf_counter) -> list[dict]:
    if out_dir is None and base.out is None:
        raise ConfigurationError("no output directory given")
    out = Path(out_dir if out_dir is not None else base.out)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for value, cfg in zip(values, sweep_configs(base, parameter, values)):
        sub = out / f"{parameter}_{value}"
        res = train(replace(cfg, out=str(sub)), sub, clock)
        rows.append(
            {
                "parameter": parameter,
                "value": value,
                "layers": cfg.layers,
                "start_exponent": cfg.start_exponent,
                "wall_seconds": res.wall_seconds,
                "final_val_loss": res.final.val_loss,
                "final_val_acc": res.final.val_acc,
                "best_val_loss": res.best.val_loss,
            }
        )
    with open(out / "summary.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)
    return rows
