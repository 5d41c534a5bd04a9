"""Training loop, k-fold experiment driver, metrics files and checkpoints."""
from __future__ import annotations

import csv
import dataclasses
import hashlib
import io
import json
import logging
import math
import os
import struct
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Iterator, Optional

import numpy as np

from . import capsnet
from .capsnet import Architecture, CapsNetParams
from .data import Dataset, FoldPlan, kfold_split
from .errors import (ChecksumError, ConfigError, FormatError, InvalidArgument,
                     VersionError)
from .routing import RoutingSpec
from .squash import SquashSpec

log = logging.getLogger("capskit")

TEST_EVAL_MODES = ("every", "final", "never")


@dataclass(frozen=True)
class TrainConfig:
    squash: str = "s2"
    routing: str = "dynamic"
    iterations: int = 3
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    batch_size: int = 128
    epochs: int = 10
    folds: int = 5               # 1 trains on everything with no validation fold
    seed: int = 0
    preset: str = "full"
    dataset: str = "mnist"
    train_size: Optional[int] = None   # leading slice of the training split
    test_size: Optional[int] = None
    test_eval: str = "every"     # every | final | never
    chunk_size: int = 32         # fixed gradient-reduction unit

    def __post_init__(self):
        try:
            SquashSpec.parse(self.squash)
        except InvalidArgument as exc:
            raise ConfigError(str(exc)) from None
        if self.routing not in ("dynamic", "self"):
            raise ConfigError(f"unknown routing {self.routing!r}; expected dynamic or self")
        if self.dataset not in ("mnist", "cifar10"):
            raise ConfigError(f"unknown dataset {self.dataset!r}; expected mnist or cifar10")
        if self.test_eval not in TEST_EVAL_MODES:
            raise ConfigError(f"test_eval must be one of {TEST_EVAL_MODES}")
        for name in ("lr", "adam_eps", "batch_size", "iterations", "chunk_size", "folds"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.epochs < 0:
            raise ConfigError(f"epochs must be >= 0, got {self.epochs}")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError("Adam betas must lie in [0, 1)")
        for name in ("train_size", "test_size"):
            v = getattr(self, name)
            if v is not None and v < 1:
                raise ConfigError(f"{name} must be positive when given")
        self.arch()   # validates the preset

    @property
    def squash_spec(self) -> SquashSpec:
        return SquashSpec.parse(self.squash)

    @property
    def routing_spec(self) -> RoutingSpec:
        if self.routing == "self":
            return RoutingSpec.self_routing(self.squash_spec)
        return RoutingSpec.dynamic(self.iterations, self.squash_spec)

    def arch(self) -> Architecture:
        return capsnet.preset(self.preset, self.routing_spec, self.dataset)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        extra = set(d) - known
        if extra:
            raise ConfigError(f"unknown config keys: {sorted(extra)}")
        return cls(**d)

    def replace(self, **kw) -> "TrainConfig":
        return dataclasses.replace(self, **kw)


# ---------------------------------------------------------------------------
# records

METRICS_HEADER = ["fold", "epoch", "train_acc", "val_acc", "test_acc",
                  "train_loss", "test_loss", "seconds"]


@dataclass
class EpochRecord:
    """One row of the metrics file.  Metrics that were not measured are ``None``."""

    fold: int
    epoch: int
    train_acc: float
    val_acc: Optional[float]
    test_acc: Optional[float]
    train_loss: float
    test_loss: Optional[float]
    seconds: float

    def row(self) -> list[str]:
        return ["" if v is None else repr(v) if isinstance(v, float) else str(v)
                for v in dataclasses.astuple(self)]

    @classmethod
    def from_row(cls, row) -> "EpochRecord":
        vals = [None if s == "" else float(s) for s in row]
        return cls(int(vals[0]), int(vals[1]), *vals[2:])

    def same_metrics(self, other: "EpochRecord") -> bool:
        """Equality ignoring wall-clock time."""
        a, b = dataclasses.astuple(self)[:-1], dataclasses.astuple(other)[:-1]
        return a == b


@dataclass
class FoldAbort:
    """Emitted instead of further records when the loss stops being finite."""

    fold: int
    epoch: int
    step: int
    loss: float
    lr: float
    message: str


def append_record(path, record: EpochRecord) -> None:
    new = not os.path.exists(path) or os.path.getsize(path) == 0
    with open(path, "a", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        if new:
            w.writerow(METRICS_HEADER)
        w.writerow(record.row())


def read_metrics(path) -> list[EpochRecord]:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0] != METRICS_HEADER:
        raise FormatError(f"{path}: missing metrics header")
    return [EpochRecord.from_row(r) for r in rows[1:]]


# ---------------------------------------------------------------------------
# optimizer

@dataclass
class AdamState:
    m: dict
    v: dict
    t: int = 0

    @classmethod
    def zeros(cls, params) -> "AdamState":
        named = _named(params)
        return cls({k: np.zeros_like(a) for k, a in named.items()},
                   {k: np.zeros_like(a) for k, a in named.items()})


def _named(params) -> dict:
    if isinstance(params, np.ndarray):
        return {"": params}
    if isinstance(params, dict):
        return params
    return dict(params.items())


def adam_step(params, grads, state: AdamState, t: int, lr=1e-3, beta1=0.9, beta2=0.999,
              eps=1e-8):
    """One in-place Adam update with bias correction; returns ``(params, state)``.

    ``params`` and ``grads`` may be arrays, dicts of arrays or :class:`CapsNetParams`.
    """
    if t < 1:
        raise InvalidArgument(f"step index must be >= 1, got {t}")
    p, g = _named(params), _named(grads)
    c1, c2 = 1.0 - beta1 ** t, 1.0 - beta2 ** t
    for name, value in p.items():
        grad = g[name]
        m, v = state.m[name], state.v[name]
        m *= beta1
        m += (1.0 - beta1) * grad
        v *= beta2
        v += (1.0 - beta2) * grad * grad
        value -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
    state.t = t
    return params, state


# ---------------------------------------------------------------------------
# batched evaluation with deterministic chunking

def _chunks(n: int, size: int):
    return [(i, min(i + size, n)) for i in range(0, n, size)]


def _map(fn, items, workers: int):
    if workers <= 1 or len(items) <= 1:
        return [fn(it) for it in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def batch_gradient(params: CapsNetParams, arch: Architecture, images, labels,
                   chunk_size: int = 32, workers: int = 1):
    """Summed loss, per-sample losses, summed grads and predictions for one batch.

    The batch is cut into fixed chunks whose gradients are added in chunk
    order, so the result does not depend on ``workers``.
    """
    spans = _chunks(len(labels), chunk_size)
    parts = _map(lambda s: capsnet.loss_and_grad(params, arch, images[s[0]:s[1]],
                                                 labels[s[0]:s[1]]), spans, workers)
    grads = parts[0][2]
    for p in parts[1:]:
        grads.add_(p[2])
    losses = np.concatenate([p[1] for p in parts])
    preds = np.concatenate([p[3] for p in parts])
    return float(np.sum(losses)), losses, grads, preds


def evaluate(params: CapsNetParams, arch: Architecture, dataset: Dataset,
             batch_size: int = 250, workers: int = 1) -> tuple[float, float]:
    """``(accuracy, mean margin loss)`` over ``dataset``."""
    if len(dataset) == 0:
        raise InvalidArgument("cannot evaluate on an empty dataset")

    def run(span):
        res = capsnet.forward(dataset.images[span[0]:span[1]], params, arch)
        lab = dataset.labels[span[0]:span[1]]
        return np.sum(res.predictions == lab), np.sum(capsnet.margin_loss(res.class_scores, lab))

    parts = _map(run, _chunks(len(dataset), batch_size), workers)
    correct = sum(int(c) for c, _ in parts)
    loss = math.fsum(float(l) for _, l in parts)
    return correct / len(dataset), loss / len(dataset)


# ---------------------------------------------------------------------------
# checkpoints

CKPT_MAGIC = b"CAPSKIT\x00"
CKPT_VERSION = 1
_DIGEST = 32


@dataclass
class Checkpoint:
    config: TrainConfig
    params: CapsNetParams
    adam: AdamState
    fold: int
    epoch: int           # number of completed epochs
    version: int = CKPT_VERSION
    records: list = field(default_factory=list)   # EpochRecords so far, for eval bookkeeping


def _npy(a: np.ndarray) -> bytes:
    buf = io.BytesIO()
    np.save(buf, a, allow_pickle=False)
    return buf.getvalue()


def _section(name: str, payload: bytes) -> bytes:
    key = name.encode()
    return struct.pack(">H", len(key)) + key + struct.pack(">Q", len(payload)) + payload


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    """Write ``ckpt`` atomically: magic, version, sections, SHA-256 trailer."""
    meta = {"config": ckpt.config.to_dict(), "fold": ckpt.fold, "epoch": ckpt.epoch,
            "adam_t": ckpt.adam.t,
            # wall-clock time is left out so identical runs give identical files
            "records": [dataclasses.replace(r, seconds=0.0).row() for r in ckpt.records]}
    body = [_section("meta", json.dumps(meta, sort_keys=True).encode())]
    for name, value in ckpt.params.items():
        body.append(_section("param/" + name, _npy(value)))
        body.append(_section("adam_m/" + name, _npy(ckpt.adam.m[name])))
        body.append(_section("adam_v/" + name, _npy(ckpt.adam.v[name])))
    blob = CKPT_MAGIC + struct.pack(">I", ckpt.version) + b"".join(body)
    blob += hashlib.sha256(blob).digest()
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(blob)
    os.replace(tmp, path)


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        blob = fh.read()
    head = len(CKPT_MAGIC) + 4
    if len(blob) < head + _DIGEST:
        raise ChecksumError(f"{path}: truncated checkpoint ({len(blob)} bytes)")
    if blob[:len(CKPT_MAGIC)] != CKPT_MAGIC:
        raise FormatError(f"{path}: not a capskit checkpoint")
    if hashlib.sha256(blob[:-_DIGEST]).digest() != blob[-_DIGEST:]:
        raise ChecksumError(f"{path}: checksum mismatch, file is corrupt or truncated")
    (version,) = struct.unpack(">I", blob[len(CKPT_MAGIC):head])
    if version != CKPT_VERSION:
        raise VersionError(f"{path}: checkpoint format version {version}, this build reads "
                           f"version {CKPT_VERSION}; re-save it with a matching release")
    sections, pos, end = {}, head, len(blob) - _DIGEST
    while pos < end:
        (klen,) = struct.unpack(">H", blob[pos:pos + 2])
        name = blob[pos + 2:pos + 2 + klen].decode()
        pos += 2 + klen
        (plen,) = struct.unpack(">Q", blob[pos:pos + 8])
        pos += 8
        sections[name] = blob[pos:pos + plen]
        pos += plen
    meta = json.loads(sections.pop("meta"))
    arrays = {k: np.load(io.BytesIO(v), allow_pickle=False) for k, v in sections.items()}
    names = [k.split("/", 1)[1] for k in arrays if k.startswith("param/")]
    params = CapsNetParams(**{n: arrays["param/" + n] for n in names})
    adam = AdamState({n: arrays["adam_m/" + n] for n in names},
                     {n: arrays["adam_v/" + n] for n in names}, meta["adam_t"])
    return Checkpoint(TrainConfig.from_dict(meta["config"]), params, adam, meta["fold"],
                      meta["epoch"], version, [EpochRecord.from_row(r) for r in meta["records"]])


# ---------------------------------------------------------------------------
# fold / experiment drivers

def _prepare(config: TrainConfig, train: Dataset, test: Optional[Dataset]):
    if config.train_size is not None:
        train = train.head(config.train_size)
    if test is not None and config.test_size is not None:
        test = test.head(config.test_size)
    return train, test


def fold_datasets(config: TrainConfig, train: Dataset, fold: int):
    """Training and validation sets for ``fold`` (no validation when ``folds == 1``)."""
    if config.folds == 1:
        if fold != 0:
            raise InvalidArgument("with folds=1 the only fold is 0")
        return train, None
    if not 0 <= fold < config.folds:
        raise InvalidArgument(f"fold {fold} out of range for {config.folds} folds")
    plan: FoldPlan = kfold_split(len(train), config.folds, config.seed)
    return train.subset(plan.train_indices(fold)), train.subset(plan.val_indices(fold))


def init_fold(config: TrainConfig, fold: int):
    arch = config.arch()
    params = capsnet.init_params(arch, np.random.default_rng([config.seed, fold]))
    return params, AdamState.zeros(params)


def train_step(params: CapsNetParams, adam: AdamState, arch: Architecture, images, labels,
               config: TrainConfig, workers: int = 1):
    """One Adam update on a batch; returns ``(summed loss, predictions)``.

    When the loss or a gradient is not finite the parameters are left alone
    and the predictions come back as ``None``.
    """
    loss, _, grads, preds = batch_gradient(params, arch, images, labels, config.chunk_size,
                                           workers)
    if not math.isfinite(loss) or not all(np.all(np.isfinite(g)) for _, g in grads.items()):
        return loss, None
    for _, g in grads.items():
        g /= len(labels)
    adam_step(params, grads, adam, adam.t + 1, config.lr, config.beta1, config.beta2,
              config.adam_eps)
    return loss, preds


def run_fold(config: TrainConfig, train: Dataset, fold: int = 0, test: Optional[Dataset] = None,
             metrics_path=None, checkpoint_path=None, resume: Optional[Checkpoint] = None,
             workers: int = 1, stop_after: Optional[int] = None) -> Iterator:
    """Train one fold, yielding an :class:`EpochRecord` per epoch.

    A non-finite loss ends the fold with a :class:`FoldAbort`.  With
    ``checkpoint_path`` the state is saved after every epoch; ``resume``
    continues from such a checkpoint.  ``stop_after`` ends the run after that
    many total epochs, which is how an interruption is simulated.
    """
    arch = config.arch()
    train, test = _prepare(config, train, test)
    fit, val = fold_datasets(config, train, fold)
    if resume is not None:
        if resume.config != config or resume.fold != fold:
            raise ConfigError("checkpoint was written for a different config or fold")
        params, adam, start = resume.params, resume.adam, resume.epoch
        records = list(resume.records)
    else:
        params, adam = init_fold(config, fold)
        start, records = 0, []
    last = config.epochs if stop_after is None else min(stop_after, config.epochs)
    n, bs = len(fit), config.batch_size
    for epoch in range(start, last):
        t0 = time.perf_counter()
        order = np.random.default_rng([config.seed, fold, epoch]).permutation(n)
        correct, loss_sum = 0, []
        for step, i in enumerate(range(0, n, bs)):
            idx = np.sort(order[i:i + bs])
            x, y = fit.images[idx], fit.labels[idx]
            loss, preds = train_step(params, adam, arch, x, y, config, workers)
            if preds is None:
                abort = FoldAbort(fold, epoch, step, loss, config.lr,
                                  f"non-finite loss/gradient at fold {fold} epoch {epoch} step "
                                  f"{step}: loss={loss}; lower the learning rate or check for "
                                  f"overflow in the squash")
                log.error(abort.message)
                yield abort
                return
            correct += int(np.sum(preds == y))
            loss_sum.append(loss)
        train_acc = correct / n if n else 0.0
        train_loss = math.fsum(loss_sum) / n if n else 0.0
        val_acc = evaluate(params, arch, val, workers=workers)[0] if val is not None and len(val) else None
        want_test = test is not None and len(test) and (
            config.test_eval == "every" or (config.test_eval == "final" and epoch == config.epochs - 1))
        test_acc, test_loss = evaluate(params, arch, test, workers=workers) if want_test else (None, None)
        rec = EpochRecord(fold, epoch, train_acc, val_acc, test_acc, train_loss, test_loss,
                          round(time.perf_counter() - t0, 3))
        records.append(rec)
        log.info("fold %d epoch %d: train_acc=%.4f train_loss=%.5f val_acc=%s test_acc=%s (%.1fs)",
                 fold, epoch, train_acc, train_loss, _fmt(val_acc), _fmt(test_acc), rec.seconds)
        if metrics_path is not None:
            append_record(metrics_path, rec)
        if checkpoint_path is not None:
            save_checkpoint(checkpoint_path,
                            Checkpoint(config, params, adam, fold, epoch + 1, records=records))
        yield rec


def _fmt(x):
    return "-" if x is None else f"{x:.4f}"


def train_fold(config: TrainConfig, train: Dataset, fold: int = 0, test=None, **kw):
    """Run :func:`run_fold` to completion; returns ``(records, abort or None)``."""
    records, abort = [], None
    for item in run_fold(config, train, fold, test, **kw):
        if isinstance(item, FoldAbort):
            abort = item
        else:
            records.append(item)
    return records, abort


@dataclass
class Summary:
    squash: str
    folds: int
    test_acc: tuple        # (mean, std) over completed folds, or None
    test_loss: tuple
    val_acc: tuple
    failures: list         # FoldAbort per failed fold
    final: list            # last EpochRecord per completed fold

    def row(self) -> list[str]:
        def ms(p, scale=1.0):
            return "" if p is None else f"{p[0] * scale:.3f} ± {p[1] * scale:.3f}"
        return [self.squash, ms(self.test_acc, 100), ms(self.test_loss, 1000), ms(self.val_acc, 100),
                f"{len(self.failures)}/{self.folds}"]


SUMMARY_HEADER = ["function", "test_acc_pct", "test_loss_x1000", "val_acc_pct", "failed_folds"]


def _mean_std(values):
    vals = [v for v in values if v is not None]
    if not vals:
        return None
    return float(np.mean(vals)), float(np.std(vals))


def run_experiment(config: TrainConfig, train: Dataset, test: Optional[Dataset] = None,
                   out_dir=None, workers: int = 1) -> Summary:
    """Train every fold and summarise final-epoch metrics as mean ± std."""
    finals, failures = [], []
    for fold in range(config.folds):
        metrics = None if out_dir is None else os.path.join(out_dir, "metrics.csv")
        records, abort = train_fold(config, train, fold, test, metrics_path=metrics,
                                    workers=workers)
        if abort is not None:
            failures.append(abort)
        elif records:
            finals.append(records[-1])
    return Summary(config.squash, config.folds,
                   _mean_std(r.test_acc for r in finals), _mean_std(r.test_loss for r in finals),
                   _mean_std(r.val_acc for r in finals), failures, finals)
