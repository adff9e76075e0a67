"""Contrastive pretraining, Siamese fine-tuning, inference and evaluation.

Views are ordered as interleaved positive pairs ``(a0, b0, a1, b1, ...)``
so a single forward pass through one parameter set serves both Siamese
branches. Every augmentation seed is derived from ``(seed, epoch, slot,
branch)``, which keeps training deterministic for any worker count.
"""

from __future__ import annotations

import csv
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .channel import AugmentationRanges, augment, derive_seed
from .datasets import PacketStore, UnlabeledStore
from .errors import ConfigurationError, InputError
from .lora_phy import ComplexSignal
from .nn import (AdamState, ArchitectureSpec, ModelParams, PlateauScheduler, RffNet,
                 adam_step, load_checkpoint, save_checkpoint)
from .objectives import LossConfig, combined_loss, nt_xent, softmax_cross_entropy
from .representation import StftConfig, representation

WORKERS_ENV = "RFFI_WORKERS"
REPRESENTATIONS = ("spec", "cis")
# fixed key separating validation draws from training epochs
_VALIDATION_EPOCH = 2**32 - 1


def _workers() -> int:
    try:
        return max(1, int(os.environ.get(WORKERS_ENV, "1")))
    except ValueError:
        raise ConfigurationError(f"{WORKERS_ENV} must be an integer") from None


@dataclass(frozen=True)
class _TrainCommon:
    batch_pairs: int = 32
    temperature: float = 0.05
    ranges: AugmentationRanges = field(default_factory=AugmentationRanges)
    seed: int = 0
    reduce_patience: int = 10
    stop_patience: int = 30
    max_epochs: int | None = None
    max_steps: int | None = None
    val_fraction: float = 0.1
    arch: ArchitectureSpec = field(default_factory=ArchitectureSpec)
    stft: StftConfig = field(default_factory=StftConfig)
    representation: str = "spec"

    def __post_init__(self):
        if not self.lr > 0:
            raise ConfigurationError(f"lr must be > 0, got {self.lr}")
        if self.batch_pairs < 1:
            raise ConfigurationError(f"batch_pairs must be >= 1, got {self.batch_pairs}")
        if self.max_epochs is not None and self.max_epochs < 1:
            raise ConfigurationError(f"max_epochs must be >= 1, got {self.max_epochs}")
        if self.max_steps is not None and self.max_steps < 1:
            raise ConfigurationError(f"max_steps must be >= 1, got {self.max_steps}")
        if not 0 <= self.val_fraction < 1:
            raise ConfigurationError(f"val_fraction must lie in [0, 1), got {self.val_fraction}")
        if self.representation not in REPRESENTATIONS:
            raise ConfigurationError(f"representation must be one of {REPRESENTATIONS}")
        if self.reduce_patience < 1 or self.stop_patience < 1:
            raise ConfigurationError("scheduler patiences must be >= 1")
        LossConfig(self.temperature, self.batch_pairs)

    @property
    def loss(self) -> LossConfig:
        return LossConfig(self.temperature, self.batch_pairs)


@dataclass(frozen=True)
class PretrainConfig(_TrainCommon):
    lr: float = 0.001


@dataclass(frozen=True)
class FinetuneConfig(_TrainCommon):
    lr: float = 0.0003
    packets_per_device: int | None = None
    freeze_extractor: bool = False
    contrastive: bool = True

    def __post_init__(self):
        super().__post_init__()
        if self.packets_per_device is not None and self.packets_per_device < 1:
            raise ConfigurationError(f"packets_per_device must be >= 1, got {self.packets_per_device}")


@dataclass
class TrainResult:
    params: ModelParams
    metadata: dict
    log: list  # one dict per epoch: epoch, train_loss, val_loss, lr
    stopped_early: bool

    def save(self, path) -> None:
        save_checkpoint(self.params, path, self.metadata)

    def write_log(self, path) -> None:
        write_training_log(self.log, path)


def write_training_log(log, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "train_loss", "val_loss", "lr"])
        for row in log:
            w.writerow([row["epoch"], repr(row["train_loss"]), repr(row["val_loss"]), repr(row["lr"])])


# ---------------------------------------------------------------- views


def _view(samples: np.ndarray, fs: float, seed: int | None, ranges, stft, kind) -> np.ndarray:
    sig = ComplexSignal(samples, fs)
    if seed is not None:
        sig = augment(sig, ranges, seed)
    return representation(sig, stft, kind).astype(np.float32)


def _build_views(fetch, jobs, fs, ranges, stft, kind) -> np.ndarray:
    """``jobs`` is a list of (packet index, seed or None); ``fetch`` reads samples."""
    def one(job):
        idx, seed = job
        return _view(fetch(idx), fs, seed, ranges, stft, kind)

    workers = _workers()
    if workers > 1 and len(jobs) > 1:
        with ThreadPoolExecutor(workers) as pool:
            out = list(pool.map(one, jobs))
    else:
        out = [one(j) for j in jobs]
    return np.stack(out)


def _check_input_shape(arch: ArchitectureSpec, stft: StftConfig, kind: str, packet_len: int, fs: float):
    f, t = stft.output_shape(packet_len, fs)
    if kind == "cis":
        t -= 1
    if (f, t) != arch.input_shape:
        raise ConfigurationError(
            f"{kind} representation of {packet_len}-sample packets is {(f, t)}, "
            f"architecture expects {arch.input_shape}"
        )


def _metadata(stage: str, cfg: _TrainCommon, **extra) -> dict:
    return {"stage": stage, "representation": cfg.representation, "stft": cfg.stft.to_dict(),
            "seed": int(cfg.seed), **extra}


# ---------------------------------------------------------------- training loop


def _split(groups: dict, fraction: float, seed: int):
    """Seeded per-group hold-out. ``groups`` maps a key to packet indices."""
    rng = np.random.default_rng(derive_seed(seed, 7))
    train, val = [], []
    for key in sorted(groups):
        idx = np.array(groups[key])
        perm = rng.permutation(idx.size)
        n_val = int(round(fraction * idx.size))
        if fraction > 0 and idx.size >= 2:
            n_val = max(1, n_val)
        n_val = min(n_val, idx.size - 1)
        val.extend(idx[perm[:n_val]].tolist())
        train.extend(idx[perm[n_val:]].tolist())
    return sorted(train), sorted(val)


def _fit(params: ModelParams, cfg: _TrainCommon, epoch_batches, step_loss, val_loss, frozen,
         on_step=None):
    """Shared epoch loop: Adam updates, plateau schedule, early stop.

    ``epoch_batches(epoch)`` yields batches; ``step_loss(net, batch)`` runs
    forward and returns (loss, dz, dlogits); ``val_loss(net)`` returns the
    validation loss or None (then training loss drives the schedule).
    """
    net = RffNet(params)
    adam = AdamState()
    sched = PlateauScheduler(cfg.lr, patience=cfg.reduce_patience, stop_patience=cfg.stop_patience)
    lr = cfg.lr
    log = []
    stopped = False
    epoch = steps = 0
    while cfg.max_epochs is None or epoch < cfg.max_epochs:
        if cfg.max_steps is not None and steps >= cfg.max_steps:
            break
        total, views = 0.0, 0
        for step, batch in enumerate(epoch_batches(epoch)):
            loss, dz, dlogits, n = step_loss(net, batch)
            grads = net.backward(dz=dz, dlogits=dlogits)
            if on_step is not None:
                on_step(epoch, step, net.params)
            adam_step(params, grads, lr, adam, frozen)
            total += loss
            views += n
            steps += 1
        if views == 0:
            raise InputError("an epoch produced no training batches")
        train = total / views
        v = val_loss(net)
        monitor = train if v is None else v
        log.append({"epoch": epoch + 1, "train_loss": train, "val_loss": math.nan if v is None else v, "lr": lr})
        epoch += 1
        lr, stop = sched.step(monitor)
        if stop:
            stopped = True
            break
    return log, stopped


def _batched(seq, size):
    for i in range(0, len(seq), size):
        yield seq[i:i + size]


# ---------------------------------------------------------------- stage 1


def pretrain(dataset: UnlabeledStore, cfg: PretrainConfig = PretrainConfig(), on_step=None) -> TrainResult:
    """Self-supervised pretraining of the extractor with NT-Xent only.

    Each packet is augmented twice with independent seeds; the two views are
    the positive pair. Labels are never read (the store type has none).
    """
    if not isinstance(dataset, UnlabeledStore):
        raise ConfigurationError("pretraining takes an UnlabeledStore (use store.unlabeled())")
    if len(dataset) == 0:
        raise InputError("pretraining dataset is empty")
    _check_input_shape(cfg.arch, cfg.stft, cfg.representation, dataset.packet_len, dataset.fs)
    params = ModelParams.initialize(cfg.arch, derive_seed(cfg.seed, 1))
    train, val = _split({0: list(range(len(dataset)))}, cfg.val_fraction, cfg.seed)
    make = lambda jobs: _build_views(dataset.samples, jobs, dataset.fs, cfg.ranges, cfg.stft, cfg.representation)

    def epoch_batches(epoch):
        order = np.random.default_rng(derive_seed(cfg.seed, 2, epoch)).permutation(train)
        for b, chunk in enumerate(_batched(order.tolist(), cfg.batch_pairs)):
            base = b * cfg.batch_pairs
            jobs = [(idx, derive_seed(cfg.seed, epoch, base + k, branch))
                    for k, idx in enumerate(chunk) for branch in (0, 1)]
            yield make(jobs)

    def step_loss(net, x):
        z = net.forward_extract(x)
        loss, dz = nt_xent(z, cfg.loss)
        return loss, dz, None, x.shape[0]

    val_x = None
    if val:
        jobs = [(idx, derive_seed(cfg.seed, _VALIDATION_EPOCH, k, branch))
                for k, idx in enumerate(val) for branch in (0, 1)]
        val_x = make(jobs)

    def val_loss(net):
        if val_x is None or val_x.shape[0] < 4:
            return None
        total = 0.0
        for i in range(0, val_x.shape[0], 2 * cfg.batch_pairs):
            chunk = val_x[i:i + 2 * cfg.batch_pairs]
            if chunk.shape[0] >= 2:
                total += nt_xent(net.forward_extract(chunk), cfg.loss)[0]
        return total / val_x.shape[0]

    frozen = frozenset(params.classifier_names)
    log, stopped = _fit(params, cfg, epoch_batches, step_loss, val_loss, frozen, on_step)
    meta = _metadata("pretrain", cfg, packets=len(dataset))
    return TrainResult(params, meta, log, stopped)


# ---------------------------------------------------------------- stage 2


def _by_label(store: PacketStore) -> dict:
    groups: dict[int, list[int]] = {}
    for i, r in enumerate(store.records):
        groups.setdefault(r.device_label, []).append(i)
    return groups


def _pairs(rx1_idx, rx2_groups, labels1, rng):
    """Each rx1 packet gets a same-label rx2 partner drawn uniformly."""
    return [(i, int(rng.choice(rx2_groups[labels1[i]]))) for i in rx1_idx]


def finetune_siamese(ds_rx1: PacketStore, ds_rx2: PacketStore, init: ModelParams | None = None,
                     cfg: FinetuneConfig = FinetuneConfig(), on_step=None) -> TrainResult:
    """Siamese fine-tuning on cross-receiver positive pairs.

    Loss per batch is NT-Xent over the pairs plus cross-entropy on both
    elements (NT-Xent is dropped when ``cfg.contrastive`` is false). With
    ``init`` the extractor starts from a pretrained parameter set.
    """
    for s in (ds_rx1, ds_rx2):
        if not isinstance(s, PacketStore):
            raise ConfigurationError("fine-tuning needs labeled PacketStores")
        if len(s) == 0:
            raise InputError("fine-tuning store is empty")
    if ds_rx1.label_set != ds_rx2.label_set:
        raise ConfigurationError(
            f"label spaces differ: rx1 {sorted(ds_rx1.label_set)} vs rx2 {sorted(ds_rx2.label_set)}"
        )
    if ds_rx1.fs != ds_rx2.fs or ds_rx1.packet_len != ds_rx2.packet_len:
        raise ConfigurationError("stores disagree on sample rate or packet length")
    labels = sorted(ds_rx1.label_set)
    k = labels[-1] + 1
    if cfg.packets_per_device is not None:
        ds_rx1 = ds_rx1.take_per_label(cfg.packets_per_device)
        ds_rx2 = ds_rx2.take_per_label(cfg.packets_per_device)
    arch = replace(cfg.arch, num_classes=k)
    _check_input_shape(arch, cfg.stft, cfg.representation, ds_rx1.packet_len, ds_rx1.fs)
    params = ModelParams.initialize(arch, derive_seed(cfg.seed, 1))
    if init is not None:
        params.load_extractor(init)
    frozen = frozenset(params.extractor_names) if cfg.freeze_extractor else frozenset()

    lab1, lab2 = ds_rx1.labels, ds_rx2.labels
    tr1, va1 = _split(_by_label(ds_rx1), cfg.val_fraction, derive_seed(cfg.seed, 0))
    tr2, va2 = _split(_by_label(ds_rx2), cfg.val_fraction, derive_seed(cfg.seed, 1))
    g2_train = {lab: [i for i in tr2 if lab2[i] == lab] for lab in labels}
    g2_val = {lab: [i for i in va2 if lab2[i] == lab] or g2_train[lab] for lab in labels}
    n_pairs = min(len(tr1), len(tr2))
    fs = ds_rx1.fs

    def fetch(key):
        which, idx = key
        return (ds_rx1 if which == 0 else ds_rx2).samples(idx)

    make = lambda jobs: _build_views(fetch, jobs, fs, cfg.ranges, cfg.stft, cfg.representation)

    def pair_jobs(pairs, epoch, base):
        jobs, y = [], []
        for k_, (i, j) in enumerate(pairs):
            jobs.append(((0, i), derive_seed(cfg.seed, epoch, base + k_, 0)))
            jobs.append(((1, j), derive_seed(cfg.seed, epoch, base + k_, 1)))
            y.extend((lab1[i], lab1[i]))
        return jobs, np.array(y, dtype=np.int64)

    def epoch_batches(epoch):
        rng = np.random.default_rng(derive_seed(cfg.seed, 2, epoch))
        order = rng.permutation(tr1)[:n_pairs].tolist()
        pairs = _pairs(order, g2_train, lab1, rng)
        for b, chunk in enumerate(_batched(pairs, cfg.batch_pairs)):
            jobs, y = pair_jobs(chunk, epoch, b * cfg.batch_pairs)
            yield make(jobs), y

    def step_loss(net, batch):
        x, y = batch
        z = net.forward_extract(x)
        logits = net.forward_logits(z)
        loss, _, dz, dlogits = combined_loss(z, logits, y, cfg.loss, cfg.contrastive)
        return loss, dz, dlogits, x.shape[0]

    val_batch = None
    if va1:
        rng = np.random.default_rng(derive_seed(cfg.seed, 3))
        val_batch = pair_jobs(_pairs(va1, g2_val, lab1, rng), _VALIDATION_EPOCH, 0)
        val_batch = (make(val_batch[0]), val_batch[1])

    def val_loss(net):
        if val_batch is None:
            return None
        x, y = val_batch
        total = 0.0
        for i in range(0, x.shape[0], 2 * cfg.batch_pairs):
            xs, ys = x[i:i + 2 * cfg.batch_pairs], y[i:i + 2 * cfg.batch_pairs]
            z = net.forward_extract(xs)
            total += combined_loss(z, net.forward_logits(z), ys, cfg.loss, cfg.contrastive)[0]
        return total / x.shape[0]

    log, stopped = _fit(params, cfg, epoch_batches, step_loss, val_loss, frozen, on_step)
    meta = _metadata("finetune", cfg, num_classes=k, pretrained=init is not None,
                     contrastive=cfg.contrastive, packets_per_device=cfg.packets_per_device)
    return TrainResult(params, meta, log, stopped)


# ---------------------------------------------------------------- stage 3


@dataclass
class TrainedModel:
    """Parameters plus the representation they were trained on."""

    params: ModelParams
    stft: StftConfig = field(default_factory=StftConfig)
    representation: str = "spec"

    @classmethod
    def load(cls, path) -> "TrainedModel":
        path = Path(path)
        if not path.exists():
            raise InputError(f"checkpoint {path} does not exist")
        params, meta = load_checkpoint(path)
        return cls.from_result(params, meta)

    @classmethod
    def from_result(cls, params: ModelParams, meta: dict) -> "TrainedModel":
        stft = StftConfig.from_dict(meta["stft"]) if "stft" in meta else StftConfig()
        return cls(params, stft, meta.get("representation", "spec"))

    def predict_proba(self, views: np.ndarray, batch: int = 128) -> np.ndarray:
        net = RffNet(self.params)
        out = [net.forward_classify(net.forward_extract(views[i:i + batch]))
               for i in range(0, views.shape[0], batch)]
        return np.concatenate(out)


def _as_model(model) -> TrainedModel:
    if isinstance(model, TrainedModel):
        return model
    if isinstance(model, TrainResult):
        return TrainedModel.from_result(model.params, model.metadata)
    if isinstance(model, ModelParams):
        return TrainedModel(model)
    return TrainedModel.load(model)


def infer(model, signal: ComplexSignal) -> tuple[int, np.ndarray]:
    """Single-branch prediction: representation -> extractor -> classifier.
    No augmentation is applied."""
    m = _as_model(model)
    view = representation(signal, m.stft, m.representation).astype(np.float32)
    probs = m.predict_proba(view[None])[0]
    return int(np.argmax(probs)), probs


@dataclass
class EvalReport:
    overall_accuracy: float
    confusion: np.ndarray
    per_condition: dict  # (receiver_id, channel_tag) -> (correct, total)
    predictions: np.ndarray

    @property
    def total(self) -> int:
        return int(self.confusion.sum())

    def to_dict(self) -> dict:
        return {
            "overall_accuracy": self.overall_accuracy,
            "confusion": self.confusion.tolist(),
            "per_condition": {f"{r}/{t}": list(v) for (r, t), v in sorted(self.per_condition.items())},
            "predictions": self.predictions.tolist(),
        }

    def __eq__(self, other) -> bool:
        return isinstance(other, EvalReport) and self.to_dict() == other.to_dict()

    def summary(self) -> str:
        lines = [f"accuracy {self.overall_accuracy:.4f} ({int(np.trace(self.confusion))}/{self.total})"]
        for (r, t), (c, n) in sorted(self.per_condition.items()):
            lines.append(f"  receiver {r} {t}: {c / n:.4f} ({c}/{n})")
        return "\n".join(lines)

    def write_csv(self, accuracy_path, confusion_path) -> None:
        with open(accuracy_path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["receiver_id", "channel_tag", "correct", "total", "accuracy"])
            w.writerow(["all", "all", int(np.trace(self.confusion)), self.total, repr(self.overall_accuracy)])
            for (r, t), (c, n) in sorted(self.per_condition.items()):
                w.writerow([r, t, c, n, repr(c / n)])
        with open(confusion_path, "w", newline="") as fh:
            w = csv.writer(fh)
            k = self.confusion.shape[0]
            w.writerow(["true\\pred", *range(k)])
            for i, row in enumerate(self.confusion):
                w.writerow([i, *row.tolist()])


def report_from_predictions(labels, predictions, num_classes: int, conditions=None) -> EvalReport:
    labels = np.asarray(labels, dtype=np.int64)
    predictions = np.asarray(predictions, dtype=np.int64)
    if labels.size == 0:
        raise InputError("cannot evaluate an empty set")
    if labels.min() < 0 or labels.max() >= num_classes:
        raise InputError(f"labels must lie in [0, {num_classes})")
    confusion = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(confusion, (labels, predictions), 1)
    if conditions is None:
        conditions = [(0, "unknown")] * labels.size
    per = {}
    for key, y, p in zip(conditions, labels, predictions):
        c, n = per.get(key, (0, 0))
        per[key] = (c + int(y == p), n + 1)
    return EvalReport(float(np.trace(confusion) / labels.size), confusion, per, predictions)


def evaluate(model, test_store: PacketStore) -> EvalReport:
    """Accuracy, confusion matrix and per-(receiver, channel) slices."""
    if len(test_store) == 0:
        raise InputError("test store is empty")
    m = _as_model(model)
    k = m.params.arch.num_classes
    jobs = [(i, None) for i in range(len(test_store))]
    views = _build_views(test_store.samples, jobs, test_store.fs, None, m.stft, m.representation)
    preds = np.argmax(m.predict_proba(views), axis=1)
    conditions = [(r.receiver_id, r.channel_tag) for r in test_store.records]
    return report_from_predictions(test_store.labels, preds, k, conditions)
