"""Mini-batch Adam training with early stopping and the head-count ablation.

The loop is deterministic for a fixed seed: parameter init, the per-epoch
shuffle (an independent stream per epoch), and single-threaded updates all
derive from it. Weight decay is classic L2 folded into the gradient before
the Adam moments.
"""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from timbrecls import evaluation, models
from timbrecls.layers import cross_entropy
from timbrecls.tensor import Rng

log = logging.getLogger(__name__)


class EmptyCache(ValueError):
    """Training requires non-empty train and validation data."""


class NonFiniteLoss(ArithmeticError):
    """Loss became NaN/Inf; training aborts instead of continuing."""


@dataclass
class TrainConfig:
    learning_rate: float = 1e-5
    weight_decay: float = 1e-5
    batch_size: int = 16
    beta1: float = 0.9
    beta2: float = 0.999
    eps_adam: float = 1e-8
    max_epochs: int = 300
    patience: int = 20
    seed: int = 42


@dataclass
class AdamState:
    """Per-parameter first/second moments plus the shared step counter."""

    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0

    @classmethod
    def for_params(cls, params: models.ParamSet) -> "AdamState":
        return cls(m={n: np.zeros_like(p.data) for n, p in params.items()},
                   v={n: np.zeros_like(p.data) for n, p in params.items()})


def adam_step(params: models.ParamSet, state: AdamState, cfg: TrainConfig) -> None:
    """One Adam update from the gradients currently stored on the parameters."""
    state.t += 1
    bias1 = 1.0 - cfg.beta1 ** state.t
    bias2 = 1.0 - cfg.beta2 ** state.t
    for name, p in params.items():
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        if cfg.weight_decay:
            g = g + cfg.weight_decay * p.data
        state.m[name] = cfg.beta1 * state.m[name] + (1.0 - cfg.beta1) * g
        state.v[name] = cfg.beta2 * state.v[name] + (1.0 - cfg.beta2) * (g * g)
        m_hat = state.m[name] / bias1
        v_hat = state.v[name] / bias2
        p.data -= cfg.learning_rate * m_hat / (np.sqrt(v_hat) + cfg.eps_adam)


@dataclass
class LogRow:
    epoch: int
    train_loss: float
    val_loss: float
    val_f1: float
    seconds: float


@dataclass
class TrainLog:
    rows: list[LogRow] = field(default_factory=list)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["epoch", "train_loss", "val_loss", "val_f1", "seconds"])
            for r in self.rows:
                writer.writerow([r.epoch, repr(r.train_loss), repr(r.val_loss),
                                 repr(r.val_f1), repr(r.seconds)])

    @classmethod
    def read_csv(cls, path) -> "TrainLog":
        rows = []
        with open(path, newline="") as f:
            for rec in csv.DictReader(f):
                rows.append(LogRow(epoch=int(rec["epoch"]),
                                   train_loss=float(rec["train_loss"]),
                                   val_loss=float(rec["val_loss"]),
                                   val_f1=float(rec["val_f1"]),
                                   seconds=float(rec["seconds"])))
        return cls(rows=rows)


@dataclass
class TrainResult:
    params: models.ParamSet
    log: TrainLog
    best_epoch: int
    best_val_loss: float
    checkpoint_path: Path | None = None


def _check_finite(value: float, what: str) -> float:
    if not math.isfinite(value):
        raise NonFiniteLoss(f"{what} is {value}")
    return value


def train(spec: models.ModelSpec, train_data, val_data, cfg: TrainConfig,
          work_dir=None) -> TrainResult:
    """Train until ``max_epochs`` or ``patience`` epochs without a better
    validation loss; returns the best-validation parameters.

    ``train_data``/``val_data`` are (values [n, n_mels, n_frames], labels)
    pairs. With a ``work_dir`` the best checkpoint and the training log are
    written there under the spec's tag.
    """
    train_values, train_labels = train_data
    val_values, val_labels = val_data
    if len(train_labels) == 0 or len(val_labels) == 0:
        raise EmptyCache("train and val splits must be non-empty")
    train_values = np.asarray(train_values, dtype=np.float64)
    train_labels = np.asarray(train_labels, dtype=np.int64)

    params = models.build(spec, Rng(cfg.seed))
    state = AdamState.for_params(params)
    train_log = TrainLog()
    best_val = math.inf
    best_epoch = 0
    best_snapshot = params.snapshot()

    n = len(train_labels)
    for epoch in range(1, cfg.max_epochs + 1):
        started = time.perf_counter()
        order = Rng.derive(cfg.seed, epoch).permutation(n)
        loss_sum = 0.0
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            batch = train_values[idx][:, None, :, :]
            logits = models.forward(params, batch)
            loss = cross_entropy(logits, train_labels[idx])
            _check_finite(float(loss.data), f"train loss at epoch {epoch}")
            params.zero_grad()
            loss.backward()
            adam_step(params, state, cfg)
            loss_sum += float(loss.data) * len(idx)
        train_loss = loss_sum / n

        report = evaluation.evaluate_model(params, val_values, val_labels)
        _check_finite(report.loss, f"val loss at epoch {epoch}")
        train_log.rows.append(LogRow(epoch=epoch, train_loss=train_loss,
                                     val_loss=report.loss,
                                     val_f1=report.weighted_f1,
                                     seconds=time.perf_counter() - started))
        log.info("epoch %d: train %.4f val %.4f f1 %.3f",
                 epoch, train_loss, report.loss, report.weighted_f1)

        if report.loss < best_val:
            best_val = report.loss
            best_epoch = epoch
            best_snapshot = params.snapshot()
        elif epoch - best_epoch >= cfg.patience:
            log.info("early stop at epoch %d (best %d)", epoch, best_epoch)
            break

    params.load_snapshot(best_snapshot)
    checkpoint_path = None
    if work_dir is not None:
        work_dir = Path(work_dir)
        work_dir.mkdir(parents=True, exist_ok=True)
        tag = spec.tag(cfg.seed)
        checkpoint_path = work_dir / f"{tag}.tmbc"
        models.save_checkpoint(checkpoint_path, params, seed=cfg.seed, epoch=best_epoch)
        train_log.write_csv(work_dir / f"{tag}.trainlog.csv")
    return TrainResult(params=params, log=train_log, best_epoch=best_epoch,
                       best_val_loss=best_val if train_log.rows else float("nan"),
                       checkpoint_path=checkpoint_path)


def run_ablation(train_data, val_data, test_data, cfg: TrainConfig,
                 heads=(1, 8, 16), include_fc: bool = True,
                 work_dir=None) -> list[dict]:
    """Train each attention variant plus the FC baseline; evaluate on test.

    Returns one row per model: {model, loss, precision, recall, f1}.
    """
    variants = [models.ModelSpec(kind=models.KIND_ATTENTION, heads=h) for h in heads]
    if include_fc:
        variants.append(models.ModelSpec(kind=models.KIND_FC))

    rows = []
    for spec in variants:
        name = f"attention_h{spec.heads}" if spec.kind == models.KIND_ATTENTION else "fc"
        log.info("ablation: training %s", name)
        result = train(spec, train_data, val_data, cfg, work_dir=work_dir)
        report = evaluation.evaluate_model(result.params, *test_data)
        rows.append({"model": name, "loss": report.loss,
                     "precision": report.weighted_precision,
                     "recall": report.weighted_recall,
                     "f1": report.weighted_f1})
    return rows


def format_ablation_table(rows) -> str:
    lines = [f"{'model':<16}{'loss':>8}{'P':>7}{'R':>7}{'F1':>7}"]
    for r in rows:
        lines.append(f"{r['model']:<16}{r['loss']:>8.3f}{r['precision']:>7.2f}"
                     f"{r['recall']:>7.2f}{r['f1']:>7.2f}")
    return "\n".join(lines)


def write_ablation_csv(path, rows) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=["model", "loss", "precision", "recall", "f1"])
        writer.writeheader()
        for r in rows:
            writer.writerow(r)
