"""Mini-batch SGD training, evaluation metrics, slide voting and feature export."""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from typing import Callable, Mapping, Optional, Sequence

import numpy as np

from patchforge import functional as F
from patchforge.data.loader import PatchSource
from patchforge.data.manifest import Manifest, PatchRecord
from patchforge.errors import ContractError, DivergenceError, InvalidInputError
from patchforge.models import Network
from patchforge.tensor import Tensor, no_grad

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    """SGD hyper-parameters. ``lr_decay`` is the multiplicative step after the second stage."""

    epochs: int = 10
    batch: int = 16
    lr: float = 0.05
    lr_second: float = 0.01
    lr_decay: float = 0.1
    milestones: Optional[tuple[int, ...]] = None
    momentum: float = 0.9
    seed: int = 0
    precision: str = "float32"

    def __post_init__(self):
        if self.lr <= 0 or self.lr_second <= 0 or self.lr_decay <= 0:
            raise ContractError("learning rates and decay must be positive")
        if self.batch < 1 or self.epochs < 0:
            raise ContractError("batch must be >= 1 and epochs >= 0")
        if self.milestones is not None:
            ms = tuple(int(m) for m in self.milestones)
            if any(b <= a for a, b in zip(ms, ms[1:])):
                raise ContractError(f"milestones must be strictly increasing, got {ms}")
            self.milestones = ms

    def resolved_milestones(self) -> tuple[int, ...]:
        if self.milestones is not None:
            return self.milestones
        m1 = max(1, round(self.epochs / 3))
        m2 = max(m1 + 1, round(2 * self.epochs / 3))
        return (m1, m2)

    def lr_at(self, epoch: int) -> float:
        """0.05 until the first milestone, 0.01 until the second, then x0.1 per milestone."""
        stage = sum(1 for m in self.resolved_milestones() if epoch >= m)
        if stage == 0:
            return self.lr
        return self.lr_second * self.lr_decay ** (stage - 1)


@dataclass
class TrainResult:
    losses: list[float] = field(default_factory=list)
    lrs: list[float] = field(default_factory=list)
    train_acc: list[float] = field(default_factory=list)

    def rows(self):
        return [(e, l, r) for e, (l, r) in enumerate(zip(self.losses, self.lrs))]


class SGD:
    """Heavy-ball momentum: v <- m*v + g; p <- p - lr*v."""

    def __init__(self, params: Sequence[Tensor], momentum: float = 0.9):
        self.params = list(params)
        self.momentum = momentum
        self.velocity = [np.zeros(p.shape, dtype=p.dtype) for p in self.params]

    def step(self, lr: float) -> None:
        for p, v in zip(self.params, self.velocity):
            if p.grad is None:
                continue
            v *= p.dtype.type(self.momentum)
            v += p.grad
            new = p.data - p.dtype.type(lr) * v
            new.flags.writeable = False
            p.data = new

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


def train_arrays(model: Network, n: int, get_batch: Callable[[np.ndarray], tuple[np.ndarray, np.ndarray]],
                 cfg: TrainConfig, on_epoch: Optional[Callable[[int, TrainResult], bool]] = None) -> TrainResult:
    """Core loop over sample indices ``0..n-1``; ``get_batch(idx)`` returns (inputs, labels).

    ``on_epoch`` may return True to stop early.
    """
    result = TrainResult()
    if cfg.epochs == 0:
        return result
    if n < 1:
        raise InvalidInputError("no training samples")
    rng = np.random.default_rng(cfg.seed)
    opt = SGD(model.parameters(), cfg.momentum)
    for epoch in range(cfg.epochs):
        model.train()  # on_epoch may have switched to eval mode
        lr = cfg.lr_at(epoch)
        order = rng.permutation(n)
        total, correct = 0.0, 0
        for start in range(0, n, cfg.batch):
            idx = order[start:start + cfg.batch]
            xb, yb = get_batch(idx)
            opt.zero_grad()
            try:
                rep = F.softmax_cross_entropy(model(Tensor(xb)), yb)
                rep.loss.backward()
                opt.step(lr)
            except FloatingPointError as exc:
                raise DivergenceError(epoch, lr, str(exc)) from None
            total += rep.value * len(idx)
            correct += int((rep.probs.argmax(axis=1) == rep.labels).sum())
        mean = total / n
        if not np.isfinite(mean):
            raise DivergenceError(epoch, lr)
        result.losses.append(mean)
        result.lrs.append(lr)
        result.train_acc.append(correct / n)
        log.info("epoch %d lr %.4g loss %.4f acc %.3f", epoch, lr, mean, correct / n)
        if on_epoch is not None and on_epoch(epoch, result):
            break
    model.eval()
    return result


def train(model: Network, manifest: Manifest, cfg: TrainConfig,
          source: Optional[PatchSource] = None,
          records: Optional[Sequence[PatchRecord]] = None) -> TrainResult:
    """Train in place on the alive records of ``manifest`` (or on ``records``)."""
    recs = list(records) if records is not None else manifest.alive()
    if not recs:
        raise InvalidInputError("manifest has no alive patches")
    src = source or PatchSource(manifest, dtype=model.dtype)
    labels = np.array([r.label for r in recs], dtype=np.int64)
    if labels.max() >= model.num_classes:
        raise InvalidInputError("labels exceed the model's class count")

    def get_batch(idx):
        return src.batch([recs[i] for i in idx]), labels[idx]

    return train_arrays(model, len(recs), get_batch, cfg)


# -- inference and metrics ----------------------------------------------------


def predict_logits(model: Network, x: np.ndarray, batch: int = 64,
                   deterministic: bool = True) -> np.ndarray:
    """Eval-mode logits. ``deterministic`` makes each row independent of batch composition."""
    model.eval()
    outs = []
    with no_grad(), F.batch_invariant(deterministic):
        for s in range(0, x.shape[0], batch):
            outs.append(model(Tensor(x[s:s + batch])).data)
    return np.concatenate(outs, axis=0)


def predict_probs_records(model: Network, source: PatchSource, records: Sequence[PatchRecord],
                          batch: int = 64, deterministic: bool = True) -> np.ndarray:
    """Softmax vector per record; rows match single-patch passes bit-for-bit when deterministic."""
    if model.input_channels != 3:
        raise InvalidInputError(f"model expects {model.input_channels} channels, patches have 3")
    model.eval()
    out = np.empty((len(records), model.num_classes), dtype=np.float64)
    with no_grad(), F.batch_invariant(deterministic):
        for s in range(0, len(records), batch):
            chunk = records[s:s + batch]
            xb = source.batch(chunk)
            if min(xb.shape[2:]) < model.min_size:
                raise InvalidInputError(f"patch size {xb.shape[2]} below model minimum {model.min_size}")
            out[s:s + len(chunk)] = F.softmax(model(Tensor(xb)).data.astype(np.float64))
    return out


@dataclass
class EvalReport:
    aca: float
    per_class: list[float]
    confusion: np.ndarray
    count: int
    split: str = ""

    def as_dict(self) -> dict:
        return {"split": self.split, "aca": self.aca, "count": self.count,
                "per_class": [None if np.isnan(v) else v for v in self.per_class],
                "confusion": self.confusion.tolist()}


def confusion_matrix(truth: Sequence[int], pred: Sequence[int], num_classes: int) -> np.ndarray:
    t = np.asarray(truth, dtype=np.int64)
    p = np.asarray(pred, dtype=np.int64)
    m = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(m, (t, p), 1)
    return m


def report_from_predictions(truth: Sequence[int], pred: Sequence[int], num_classes: int,
                            split: str = "") -> EvalReport:
    """ACA = trace/total; per-class ACA_k = M[k,k] / row_k (NaN for an empty row)."""
    m = confusion_matrix(truth, pred, num_classes)
    total = int(m.sum())
    rows = m.sum(axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        per = np.where(rows > 0, np.diag(m) / np.maximum(rows, 1), np.nan)
    aca = float(np.trace(m) / total) if total else float("nan")
    return EvalReport(aca, [float(v) for v in per], m, total, split)


def evaluate_logits(logits: np.ndarray, labels: Sequence[int], split: str = "") -> EvalReport:
    # np.argmax returns the first maximal index, which fixes the tie-break
    return report_from_predictions(labels, np.argmax(logits, axis=1), logits.shape[1], split)


def evaluate(model: Network, manifest: Manifest, source: Optional[PatchSource] = None,
             records: Optional[Sequence[PatchRecord]] = None, split: str = "") -> EvalReport:
    """Argmax predictions on every record (alive or not) against its label."""
    recs = list(records) if records is not None else list(manifest.records)
    src = source or PatchSource(manifest, dtype=model.dtype)
    probs = predict_probs_records(model, src, recs)
    return evaluate_logits(probs, [r.label for r in recs], split)


def fuse_slice_vote(predictions: Mapping[str, np.ndarray]) -> dict[str, int]:
    """Plurality of patch argmaxes per slide.

    Ties go to the tied class with the larger summed softmax confidence over
    the slide's patches, then to the lower class index.
    """
    out = {}
    for slide, probs in predictions.items():
        p = np.asarray(probs, dtype=np.float64)
        if p.ndim != 2 or p.shape[0] < 1:
            raise InvalidInputError(f"slide {slide!r} has no patch predictions")
        votes = np.bincount(p.argmax(axis=1), minlength=p.shape[1])
        tied = np.flatnonzero(votes == votes.max())
        if len(tied) == 1:
            out[slide] = int(tied[0])
        else:
            mass = p[:, tied].sum(axis=0)
            out[slide] = int(tied[np.argmax(mass)])
    return out


def group_by_slide(records: Sequence[PatchRecord], probs: np.ndarray) -> dict[str, np.ndarray]:
    groups: dict[str, list[int]] = {}
    for i, r in enumerate(records):
        groups.setdefault(r.slide_id, []).append(i)
    return {k: probs[v] for k, v in groups.items()}


def export_features(model: Network, source: PatchSource, records: Sequence[PatchRecord],
                    layer: str = "penultimate", batch: int = 64) -> list[tuple[str, int, np.ndarray]]:
    """One (patch id, label, feature vector) row per record."""
    if layer not in model.feature_layers():
        raise ContractError(f"unknown layer {layer!r}; choose from {sorted(model.feature_layers())}")
    model.eval()
    rows = []
    with no_grad(), F.batch_invariant():
        for s in range(0, len(records), batch):
            chunk = records[s:s + batch]
            feats = model.features(Tensor(source.batch(chunk)), layer).data
            feats = feats.reshape(feats.shape[0], -1)
            rows.extend((r.id, r.label, f.copy()) for r, f in zip(chunk, feats))
    return rows


# -- CSV writers --------------------------------------------------------------


def write_loss_csv(path, result: TrainResult) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "loss", "lr"])
        for e, loss, lr in result.rows():
            w.writerow([e, repr(float(loss)), repr(float(lr))])


def write_class_csv(path, report: EvalReport, classes: Sequence[str]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["class", "aca"])
        for name, v in zip(classes, report.per_class):
            w.writerow([name, "" if np.isnan(v) else repr(v)])


def write_confusion_csv(path, report: EvalReport, classes: Sequence[str]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["true\\pred", *classes])
        for name, row in zip(classes, report.confusion):
            w.writerow([name, *[int(v) for v in row]])


def write_features_csv(path, rows: Sequence[tuple[str, int, np.ndarray]]) -> None:
    dim = len(rows[0][2]) if rows else 0
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", "label", *[f"f{i}" for i in range(dim)]])
        for pid, label, vec in rows:
            if len(vec) != dim:
                raise ContractError("feature dimension varies across rows")
            w.writerow([pid, label, *[repr(float(v)) for v in vec]])


def write_slide_csv(path, labels: Mapping[str, int], classes: Sequence[str],
                    counts: Optional[Mapping[str, int]] = None) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["slide", "label", "class", "patches"])
        for sid in sorted(labels):
            w.writerow([sid, labels[sid], classes[labels[sid]], (counts or {}).get(sid, "")])
