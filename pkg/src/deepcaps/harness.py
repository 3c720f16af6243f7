"""Training, evaluation, ensembling, benchmarking and analysis commands."""

from __future__ import annotations

import contextlib
import csv
import json
import logging
import os
import time
from dataclasses import asdict, dataclass, field
from importlib import resources

import numpy as np

from deepcaps.autodiff import Tensor, backward, current_tape, no_grad
from deepcaps.checkpoint import Checkpoint, capture, load_checkpoint, model_from_checkpoint, save_checkpoint
from deepcaps.data import Dataset, augment_batch, batch_iter, load_dataset, preprocess
from deepcaps.decoder import DEFAULT_SWEEP_RANGE, DEFAULT_SWEEP_STEPS, decode_offsets, mask_winner, \
    sweep_values, variance_rank
from deepcaps.errors import ArchitectureMismatchError, ConfigError, NonFiniteLossError
from deepcaps.imageio import tile_grid, write_pnm
from deepcaps.losses import MarginParams, total_loss
from deepcaps.model import ArchSpec, DeepCaps, build_model
from deepcaps.optim import Adam

log = logging.getLogger(__name__)

METRICS_HEADER = ["epoch", "step", "loss_total", "loss_margin", "loss_recon", "train_acc", "test_acc"]
TIMING_HEADER = ["epoch", "wall_time"]


def load_preset(name: str) -> dict:
    """Built-in JSON config shipped in ``deepcaps/configs``."""
    path = resources.files("deepcaps") / "configs" / f"{name}.json"
    if not path.is_file():
        raise ConfigError(f"no built-in config named {name!r}")
    return json.loads(path.read_text())


@dataclass
class OptimConfig:
    kind: str = "adam"
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    decay: float = 0.96


@dataclass
class AugmentConfig:
    max_shift: int = 0
    flip: bool = False


@dataclass
class RunConfig:
    arch: dict
    dataset: str = "mnist"
    data_dir: str = "data/mnist"
    train_subset: int | None = None
    test_subset: int | None = None
    resize: list | None = None
    margin: MarginParams = field(default_factory=MarginParams)
    optimizer: OptimConfig = field(default_factory=OptimConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    epochs: int = 3
    batch_size: int = 128
    eval_batch_size: int = 256
    seed: int = 0
    deterministic: bool = True
    mask_by: str = "label"
    out_dir: str = "runs/default"

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        d = dict(d)
        if "arch" not in d:
            raise ConfigError("run config needs an 'arch' entry (dict or built-in preset name)")
        arch = d.pop("arch")
        if isinstance(arch, str):
            arch = load_preset(arch)
        try:
            cfg = cls(arch=ArchSpec.from_dict(arch).to_dict(),
                      margin=MarginParams(**d.pop("margin", {})),
                      optimizer=OptimConfig(**d.pop("optimizer", {})),
                      augment=AugmentConfig(**d.pop("augment", {})), **d)
        except TypeError as e:
            raise ConfigError(f"bad run config: {e}") from None
        if cfg.optimizer.kind != "adam":
            raise ConfigError(f"unsupported optimizer {cfg.optimizer.kind!r}")
        if cfg.mask_by not in ("label", "argmax"):
            raise ConfigError(f"mask_by must be 'label' or 'argmax', got {cfg.mask_by!r}")
        if cfg.epochs < 0 or cfg.batch_size < 1:
            raise ConfigError("epochs must be >= 0 and batch_size >= 1")
        return cfg

    @classmethod
    def load(cls, path) -> "RunConfig":
        if not os.path.exists(path) and not str(path).endswith(".json"):
            return cls.from_dict(load_preset(str(path)))
        with open(path) as f:
            return cls.from_dict(json.load(f))

    def to_dict(self) -> dict:
        return json.loads(json.dumps(asdict(self)))


@dataclass
class MetricsRow:
    epoch: int
    step: int
    loss_total: float
    loss_margin: float
    loss_recon: float
    train_acc: float
    test_acc: float
    wall_time: float = 0.0

    def csv_fields(self):
        return [self.epoch, self.step, f"{self.loss_total:.9g}", f"{self.loss_margin:.9g}",
                f"{self.loss_recon:.9g}", f"{self.train_acc:.6f}", f"{self.test_acc:.6f}"]


@dataclass
class EvalResult:
    accuracy: float
    confusion: np.ndarray
    predictions: np.ndarray
    scores: np.ndarray  # per-class capsule norms [N, C]


@dataclass
class TrainResult:
    last: str
    best: str
    metrics_path: str
    rows: list


@contextlib.contextmanager
def deterministic_threads(enabled: bool):
    """Pin BLAS to one thread so reductions keep a fixed order."""
    if not enabled:
        yield
        return
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:  # pragma: no cover - threadpoolctl ships with the deps
        yield
        return
    with threadpool_limits(limits=1):
        yield


def load_run_data(cfg: RunConfig):
    train = load_dataset(cfg.dataset, cfg.data_dir, "train").subset(cfg.train_subset, cfg.seed)
    test = load_dataset(cfg.dataset, cfg.data_dir, "test").subset(cfg.test_subset, cfg.seed)
    return preprocess(train, cfg.resize), preprocess(test, cfg.resize)


def class_scores(model: DeepCaps, images: np.ndarray, batch_size: int = 256) -> np.ndarray:
    """Per-class capsule norms ``[N, C]`` in inference mode."""
    was = model.training
    model.eval()
    out = []
    try:
        with no_grad():
            for i in range(0, len(images), batch_size):
                caps = model.class_capsules(Tensor(images[i:i + batch_size].astype(model.dtype)))
                # float32 scores: a sum of up to 2**29 of them is exact in float64
                out.append(np.sqrt((caps.data.astype(np.float64) ** 2).sum(-1)).astype(np.float32))
    finally:
        model.train(was)
    return np.concatenate(out) if out else np.zeros((0, model.spec.class_caps.classes))


def _result(scores: np.ndarray, dataset: Dataset) -> EvalResult:
    preds = scores.argmax(axis=1)
    c = dataset.num_classes
    confusion = np.zeros((c, c), dtype=np.int64)
    np.add.at(confusion, (dataset.labels, preds), 1)
    acc = float((preds == dataset.labels).mean()) if len(dataset) else 0.0
    return EvalResult(acc, confusion, preds, scores)


def _check_compatible(model: DeepCaps, dataset: Dataset):
    if tuple(dataset.image_shape) != tuple(model.spec.input_shape):
        raise ArchitectureMismatchError(f"model input shape {tuple(model.spec.input_shape)} does not match "
                                        f"dataset images {dataset.image_shape}")
    if dataset.num_classes != model.spec.class_caps.classes:
        raise ArchitectureMismatchError(f"model has {model.spec.class_caps.classes} classes, dataset has "
                                        f"{dataset.num_classes}")


def evaluate(model, dataset: Dataset, batch_size: int = 256) -> EvalResult:
    """Accuracy (argmax of capsule norms) and confusion matrix (rows = true class)."""
    if not isinstance(model, DeepCaps):
        model = model_from_checkpoint(model)
    _check_compatible(model, dataset)
    return _result(class_scores(model, dataset.images, batch_size), dataset)


def ensemble_predict(members, dataset: Dataset, batch_size: int = 256) -> EvalResult:
    """Average per-class capsule norms over ``members`` (checkpoints, paths or models), then argmax."""
    models = [m if isinstance(m, DeepCaps) else model_from_checkpoint(m) for m in members]
    if not models:
        raise ValueError("ensemble needs at least one member")
    arch = models[0].spec.to_dict()
    for m in models[1:]:
        if m.spec.to_dict() != arch:
            raise ArchitectureMismatchError("ensemble members have different architectures")
    for m in models:
        _check_compatible(m, dataset)
    total = np.zeros((len(dataset), dataset.num_classes))
    for m in models:
        total += class_scores(m, dataset.images, batch_size)
    return _result(total / len(models), dataset)


def _write_csv(path, header, rows):
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def train(cfg: RunConfig, data=None) -> TrainResult:
    """Train from ``cfg``; ``data`` optionally supplies ``(train, test)`` datasets directly.

    Writes ``metrics.csv`` (deterministic), ``timing.csv`` (wall times),
    ``last.ckpt`` and ``best.ckpt`` (best test accuracy) into ``cfg.out_dir``.
    """
    train_ds, test_ds = data if data is not None else load_run_data(cfg)
    os.makedirs(cfg.out_dir, exist_ok=True)
    metrics_path = os.path.join(cfg.out_dir, "metrics.csv")
    last_path = os.path.join(cfg.out_dir, "last.ckpt")
    best_path = os.path.join(cfg.out_dir, "best.ckpt")
    model = build_model(cfg.arch, seed=cfg.seed)
    _check_compatible(model, train_ds)
    o = cfg.optimizer
    opt = Adam(model.parameters(), o.lr, o.beta1, o.beta2, o.eps, o.decay)
    config = cfg.to_dict()
    del config["out_dir"]  # where a run is written must not change what it writes
    rows, timing = [], []
    step, best_acc = 0, -1.0

    def snapshot(epoch, metrics):
        return capture(model, step, epoch, {"seed": cfg.seed, "next_epoch": epoch}, metrics, config)

    with deterministic_threads(cfg.deterministic):
        if cfg.epochs == 0:
            ck = snapshot(0, {})
            save_checkpoint(last_path, ck)
            save_checkpoint(best_path, ck)
        for epoch in range(cfg.epochs):
            t0 = time.perf_counter()
            opt.set_epoch(epoch)
            model.train()
            aug_rng = np.random.default_rng([cfg.seed, 1, epoch])
            sums = np.zeros(3)
            correct = seen = 0
            for images, onehot, _ in batch_iter(train_ds, cfg.batch_size, cfg.seed, epoch):
                images = augment_batch(images, cfg.augment.max_shift, aug_rng, cfg.augment.flip)
                images = images.astype(model.dtype)
                current_tape().clear()
                caps, recon = model(Tensor(images), onehot if cfg.mask_by == "label" else None)
                rep = total_loss(caps, onehot, recon, images, cfg.margin)
                loss = float(rep.total.data)
                if not np.isfinite(loss):
                    current_tape().clear()
                    raise NonFiniteLossError(f"non-finite loss {loss} at epoch {epoch} step {step}")
                backward(rep.total)
                opt.step()
                opt.zero_grad()
                step += 1
                b = len(images)
                sums += b * np.array([loss, rep.margin_term, rep.recon_term])
                correct += int((rep.class_norms.argmax(1) == onehot.argmax(1)).sum())
                seen += b
            test_acc = evaluate(model, test_ds, cfg.eval_batch_size).accuracy
            wall = time.perf_counter() - t0
            mean = sums / max(seen, 1)
            row = MetricsRow(epoch, step, *map(float, mean), correct / max(seen, 1), test_acc, wall)
            rows.append(row)
            timing.append([epoch, f"{wall:.3f}"])
            log.info("epoch %d step %d loss %.5f train_acc %.4f test_acc %.4f (%.1fs)", epoch, step,
                     row.loss_total, row.train_acc, test_acc, wall)
            _write_csv(metrics_path, METRICS_HEADER, [r.csv_fields() for r in rows])
            _write_csv(os.path.join(cfg.out_dir, "timing.csv"), TIMING_HEADER, timing)
            metrics = {k: v for k, v in zip(METRICS_HEADER, row.csv_fields())}
            ck = snapshot(epoch + 1, metrics)
            save_checkpoint(last_path, ck)
            if test_acc > best_acc:
                best_acc = test_acc
                save_checkpoint(best_path, ck)
    if cfg.epochs == 0:
        _write_csv(metrics_path, METRICS_HEADER, [])
        _write_csv(os.path.join(cfg.out_dir, "timing.csv"), TIMING_HEADER, [])
    return TrainResult(last_path, best_path, metrics_path, rows)


def benchmark_inference(model: DeepCaps, batch_sizes=(1,), iterations: int = 100, warmup: int = 3,
                        seed: int = 0):
    """Per-image forward latency (ms) over ``iterations`` timed runs per batch size."""
    rng = np.random.default_rng(seed)
    params = model.num_parameters()
    rows = []
    was = model.training
    model.eval()
    with no_grad():
        for bs in batch_sizes:
            x = Tensor(rng.random((bs, *model.spec.input_shape)).astype(model.dtype))
            for _ in range(warmup):
                model.class_capsules(x)
            times = []
            for _ in range(iterations):
                t0 = time.perf_counter()
                model.class_capsules(x)
                times.append((time.perf_counter() - t0) * 1e3 / bs)
            rows.append({"batch_size": bs, "mean_ms_per_image": float(np.mean(times)),
                         "median_ms_per_image": float(np.median(times)), "iterations": iterations,
                         "parameters": params})
    model.train(was)
    return rows


def select_samples(dataset: Dataset, selector="per-class") -> np.ndarray:
    """Sample indices: the first of each class in class order, or an explicit list."""
    if isinstance(selector, str) and selector == "per-class":
        idx = []
        for c in range(dataset.num_classes):
            hits = np.flatnonzero(dataset.labels == c)
            if len(hits):
                idx.append(int(hits[0]))
        return np.array(idx, dtype=np.int64)
    if isinstance(selector, str):
        selector = [int(s) for s in selector.split(",") if s]
    idx = np.asarray(selector, dtype=np.int64)
    if idx.size == 0 or idx.min() < 0 or idx.max() >= len(dataset):
        raise IndexError(f"sample indices out of range for dataset of {len(dataset)}")
    return idx


def activity_vectors(model: DeepCaps, images: np.ndarray, labels=None) -> np.ndarray:
    was = model.training
    model.eval()
    try:
        with no_grad():
            caps = model.class_capsules(Tensor(images.astype(model.dtype)))
            return mask_winner(caps, labels).values.data
    finally:
        model.train(was)


def cmd_perturb(model: DeepCaps, dataset: Dataset, dim: int, out_path, lo=DEFAULT_SWEEP_RANGE[0],
                hi=DEFAULT_SWEEP_RANGE[1], steps=DEFAULT_SWEEP_STEPS, selector="per-class",
                use_labels: bool = True, replace: bool = False) -> np.ndarray:
    """Write a grid with one row per selected sample and one column per sweep step.

    ``dim`` is 1-indexed. Each row perturbs the sample's winning capsule
    (true class when ``use_labels``) and decodes it.
    """
    if model.decoder is None:
        raise ConfigError("model has no decoder")
    d = model.spec.class_caps.dim
    if not 1 <= dim <= d:
        raise IndexError(f"dimension {dim} out of range 1..{d}")
    if steps < 1:
        raise ValueError("steps must be >= 1")
    idx = select_samples(dataset, selector)
    onehot = None
    if use_labels:
        onehot = np.zeros((len(idx), dataset.num_classes), dtype=np.float32)
        onehot[np.arange(len(idx)), dataset.labels[idx]] = 1
    acts = activity_vectors(model, dataset.images[idx], onehot)
    values = sweep_values(lo, hi, steps)
    rows = [decode_offsets(model.decoder, a, dim - 1, values, replace) for a in acts]
    grid = tile_grid(np.stack(rows))
    write_pnm(out_path, grid)
    return grid


def cmd_variance(model: DeepCaps, dataset: Dataset, out_dir, sweeps: int = 0, batch_size: int = 256,
                 steps: int = DEFAULT_SWEEP_STEPS):
    """Write ``variance.csv`` (dim 1-indexed, variance, rank) and optional sweep grids.

    With ``sweeps=k`` the top-k and bottom-k dimensions each get a
    ``sweep_dimXX.pgm`` grid of one sample per class.
    """
    os.makedirs(out_dir, exist_ok=True)
    ranked = variance_rank(model, dataset, batch_size)
    _write_csv(os.path.join(out_dir, "variance.csv"), ["dim", "variance", "rank"],
               [[dim + 1, f"{var:.9g}", r + 1] for r, (dim, var) in enumerate(ranked)])
    grids = []
    if sweeps:
        picks = [d for d, _ in ranked[:sweeps]] + [d for d, _ in ranked[-sweeps:]]
        for dim in dict.fromkeys(picks):
            path = os.path.join(out_dir, f"sweep_dim{dim + 1:02d}.{'pgm' if dataset.image_shape[-1] == 1 else 'ppm'}")
            cmd_perturb(model, dataset, dim + 1, path, steps=steps)
            grids.append(path)
    return ranked, grids
