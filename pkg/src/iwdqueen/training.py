"""Losses and the mini-batch training loop.

The Kappa term implements the printed soft-kappa formula verbatim by
default; note that its denominator divides only the cross term by ``B``,
so the term can go negative.  ``kappa_form="cohen"`` switches to the
textbook soft Cohen's kappa ``(po - pe) / (1 - pe)`` instead.
"""

from __future__ import annotations

import csv
import hashlib
import logging
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import numerics as nx
from .ddm_core import DdmRecord, normalize
from .errors import ConfigError, DomainError, NumericalError
from .evaluation import UNDEFINED, metrics_from_labels
from .models import BaseModel, classify
from .numerics import AdamState, Tensor, adam_step

log = logging.getLogger(__name__)

KAPPA_DEN_EPS = 1e-12
METRIC_COLUMNS = ["epoch", "train_loss", "train_bce", "train_kappa", "val_recall", "val_precision",
                  "val_f1", "val_oa", "val_kappa_metric", "kappa_skips"]


@dataclass
class TrainConfig:
    batch_size: int = 100
    epochs: int = 150
    lr: float = 1e-3
    seed: int = 0
    bce_weight: float = 1.0
    kappa_weight: float = 1.0
    clamp_eps: float = 1e-7
    kappa_form: str = "printed"

    def __post_init__(self):
        if not self.lr >= 0:
            raise ConfigError("lr must be non-negative")
        if self.batch_size < 1 or self.epochs < 0:
            raise ConfigError("batch_size must be >= 1 and epochs >= 0")
        if self.kappa_weight and self.batch_size < 2:
            raise ConfigError("kappa loss needs batch_size >= 2")
        if self.kappa_form not in ("printed", "cohen"):
            raise ConfigError(f"unknown kappa_form {self.kappa_form!r}")


def _labels(y) -> np.ndarray:
    y = np.asarray(y, dtype=np.float64)
    if y.size == 0:
        raise DomainError("empty batch")
    return y


def bce_loss(p, y, eps: float = 1e-7) -> Tensor:
    """Mean binary cross-entropy with ``p`` clamped to ``[eps, 1 - eps]``."""
    y = _labels(y)
    p = nx.clip(p, eps, 1.0 - eps)
    per = nx.add(nx.mul(y, nx.log(p)), nx.mul(1.0 - y, nx.log(nx.sub(1.0, p))))
    return nx.mul(nx.tsum(per), -1.0 / y.size)


def kappa_loss(p, y, form: str = "printed") -> Optional[Tensor]:
    """Soft-kappa loss, or ``None`` when the batch denominator vanishes."""
    y = _labels(y)
    p = nx.as_tensor(p)
    b = float(y.size)
    sp = nx.tsum(p)
    spy = nx.tsum(nx.mul(p, y))
    sy = float(y.sum())
    if form == "printed":
        num = nx.sub(nx.mul(spy, 2.0), nx.mul(sp, sy / b))
        den = nx.add(nx.sub(nx.tsum(nx.mul(p, p)), nx.mul(spy, 2.0 / b)), float(np.sum(y * y)))
    elif form == "cohen":
        po = nx.mul(nx.add(nx.sub(nx.mul(spy, 2.0), sp), b - sy), 1.0 / b)
        pe = nx.mul(nx.add(nx.mul(sp, sy), nx.mul(nx.sub(b, sp), b - sy)), 1.0 / b**2)
        num = nx.sub(po, pe)
        den = nx.sub(1.0, pe)
    else:
        raise ConfigError(f"unknown kappa_form {form!r}")
    if abs(float(den.data)) < KAPPA_DEN_EPS:
        return None
    return nx.sub(1.0, _divide(num, den))


def _divide(num: Tensor, den: Tensor) -> Tensor:
    inv = 1.0 / float(den.data)
    return nx.custom_op("div", num.data * inv, (num, den),
                        lambda g: (g * inv, -g * num.data * inv * inv))


@dataclass
class LossParts:
    total: Tensor
    bce: float
    kappa: Optional[float]

    @property
    def kappa_skipped(self) -> bool:
        return self.kappa is None


def total_loss(p, y, config: TrainConfig = None) -> LossParts:
    """BCE + soft-kappa (unit weights by default); kappa is dropped on degenerate batches."""
    config = config or TrainConfig()
    bce = bce_loss(p, y, config.clamp_eps)
    total = nx.mul(bce, config.bce_weight)
    kappa = None
    if config.kappa_weight and np.asarray(y).size >= 2:
        k = kappa_loss(p, y, config.kappa_form)
        if k is not None:
            kappa = float(k.data)
            total = nx.add(total, nx.mul(k, config.kappa_weight))
    return LossParts(total, float(bce.data), kappa)


# --- data ---------------------------------------------------------------------

def split_by_id(records: Sequence[DdmRecord], val_fraction: float = 0.2):
    """Deterministic train/val split on a SHA-256 hash of the record id."""
    train, val = [], []
    cut = int(round(val_fraction * 10_000))
    for r in records:
        h = int.from_bytes(hashlib.sha256(r.id.encode("utf-8")).digest()[:8], "big") % 10_000
        (val if h < cut else train).append(r)
    return train, val


def stack_records(records: Sequence[DdmRecord]) -> tuple[np.ndarray, np.ndarray]:
    """Normalised DDM stack ``(N, 17, 11)`` and label vector for labelled records."""
    if not records:
        raise DomainError("empty dataset")
    if any(r.label is None for r in records):
        raise DomainError("training records must be labelled")
    x = np.stack([normalize(r.ddm) for r in records])
    y = np.array([r.label for r in records], dtype=np.float64)
    return x, y


def predict_arrays(model: BaseModel, x: np.ndarray, batch_size: int = 500) -> np.ndarray:
    out = []
    with nx.no_grad():
        for i in range(0, len(x), batch_size):
            out.append(model.forward(x[i:i + batch_size], train=False).data)
    return np.concatenate(out) if out else np.zeros(0)


# --- loop -------------------------------------------------------------------

@dataclass
class TrainResult:
    model: BaseModel
    history: list = field(default_factory=list)
    kappa_skips: int = 0


def train(model: BaseModel, train_records, config: TrainConfig,
          val_records=None, metrics_csv=None, on_epoch=None) -> TrainResult:
    """Adam on ``BCE + kappa`` over seeded shuffled mini-batches.

    Fully deterministic given (seed, record order, config).  Parameters are
    updated in place on *model*.  Returns the per-epoch metric log.
    """
    x, y = stack_records(train_records)
    xv = yv = None
    if val_records:
        xv, yv = stack_records(val_records)
    rng = np.random.default_rng(config.seed)
    shuffle_rng, dropout_rng = rng.spawn(2)
    state = AdamState(lr=config.lr)
    names = sorted(model.params)
    result = TrainResult(model)
    writer = None
    if metrics_csv is not None:
        fh = open(metrics_csv, "w", newline="", encoding="utf-8")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(METRIC_COLUMNS)
    try:
        for epoch in range(1, config.epochs + 1):
            order = shuffle_rng.permutation(len(x))
            losses, bces, kappas, skips = [], [], [], 0
            for bi, start in enumerate(range(0, len(x), config.batch_size)):
                idx = order[start:start + config.batch_size]
                model.zero_grad()
                p = model.forward(x[idx], train=True, rng=dropout_rng)
                parts = total_loss(p, y[idx], config)
                loss = float(parts.total.data)
                if not np.isfinite(loss):
                    raise NumericalError(f"non-finite loss at epoch {epoch} batch {bi}")
                parts.total.backward()
                grads = {n: model.params[n].grad for n in names if model.params[n].grad is not None}
                new, state = adam_step({n: model.params[n].data for n in names}, grads, state)
                for n in names:
                    model.params[n].data = new[n]
                losses.append(loss)
                bces.append(parts.bce)
                if parts.kappa_skipped:
                    skips += 1
                else:
                    kappas.append(parts.kappa)
            row = {
                "epoch": epoch,
                "train_loss": float(np.mean(losses)),
                "train_bce": float(np.mean(bces)),
                "train_kappa": float(np.mean(kappas)) if kappas else None,
                "kappa_skips": skips,
            }
            if skips:
                log.info("epoch %d: kappa term skipped on %d batch(es)", epoch, skips)
            if xv is not None:
                m = metrics_from_labels(classify(predict_arrays(model, xv)), yv)
                row.update(val_recall=m.recall, val_precision=m.precision, val_f1=m.f1,
                           val_oa=m.oa, val_kappa_metric=m.kappa)
            result.history.append(row)
            result.kappa_skips += skips
            if writer is not None:
                writer.writerow([UNDEFINED if row.get(c) is None else row.get(c) for c in METRIC_COLUMNS])
                fh.flush()
            if on_epoch is not None:
                on_epoch(row)
    finally:
        if writer is not None:
            fh.close()
    return result
