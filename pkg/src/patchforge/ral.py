"""Reversed active learning: iterative removal of suspect training patches.

Each iteration scores every surviving patch with the previous model and
removes those whose top softmax probability is below ``theta``; each
removal increments the counter of the patch's original (pre-augmentation)
index. Originals whose counter has reached ``group_threshold`` then lose
all their remaining variants. The model is fine-tuned on what survives,
warm-started from the previous iteration.
"""
from __future__ import annotations

import copy
import csv
import json
import logging
from dataclasses import dataclass, field, replace
from typing import Any, Callable, Optional, Sequence

import numpy as np

from patchforge.data.loader import PatchSource
from patchforge.data.manifest import Manifest, PatchRecord
from patchforge.errors import ContractError, EmptySetError, StateError
from patchforge.train import TrainConfig, evaluate, predict_probs_records, train

log = logging.getLogger(__name__)

Scorer = Callable[[Any, Sequence[PatchRecord]], np.ndarray]
TrainFn = Callable[[Sequence[PatchRecord], Any, int], Any]
Evaluator = Callable[[Any], float]

CONFIDENCE = "confidence"
GROUP = "group"


@dataclass
class RALConfig:
    theta: float = 0.5
    group_threshold: int = 4
    max_iterations: int = 5
    patience: int = 1
    min_improvement: float = 0.0
    variants: int = 8

    def __post_init__(self):
        if not 0 <= self.theta < 1:
            raise ContractError(f"theta must lie in [0, 1), got {self.theta}")
        if not 1 <= self.group_threshold <= self.variants:
            raise ContractError(f"group threshold must lie in [1, {self.variants}]")
        if self.max_iterations < 1 or self.patience < 1:
            raise ContractError("max_iterations and patience must be >= 1")
        if self.min_improvement < 0:
            raise ContractError("min_improvement must be >= 0")


@dataclass(frozen=True)
class AuditEntry:
    patch_id: str
    orig_index: int
    iteration: int
    reason: str
    confidence: float
    mx: int

    def to_json(self) -> dict:
        return {"id": self.patch_id, "orig_index": self.orig_index, "iteration": self.iteration,
                "reason": self.reason, "confidence": self.confidence, "mx": self.mx}


@dataclass(frozen=True)
class HistoryRow:
    iteration: int
    set_size: int
    val_aca: float


@dataclass
class RALState:
    manifest: Manifest
    model: Any
    t: int = 1
    mx: dict[int, int] = field(default_factory=dict)
    history: list[HistoryRow] = field(default_factory=list)
    audit: list[AuditEntry] = field(default_factory=list)

    @classmethod
    def start(cls, manifest: Manifest, model: Any) -> "RALState":
        m = manifest.copy()
        return cls(manifest=m, model=model, mx={r.orig_index: 0 for r in m.records})

    @property
    def size(self) -> int:
        return sum(1 for r in self.manifest.records if r.alive)


def ral_iteration(state: RALState, cfg: RALConfig, scorer: Scorer,
                  train_fn: Optional[TrainFn] = None) -> RALState:
    """One refinement pass; mutates and returns ``state``.

    ``train_fn(alive_records, model, t)`` returns the fine-tuned model. When
    it is None the model stays frozen.
    """
    if state.t < 1:
        raise StateError(f"iteration counter must start at 1, got {state.t}")
    if state.model is None:
        raise StateError("no model to score with")
    t = state.t
    alive = [r for r in state.manifest.records if r.alive]
    if alive:
        probs = np.asarray(scorer(state.model, alive), dtype=np.float64)
        if probs.shape[0] != len(alive):
            raise ContractError(f"scorer returned {probs.shape[0]} rows for {len(alive)} patches")
        conf = probs.max(axis=1)
    else:
        conf = np.zeros(0)
    conf_of = {}
    for rec, c in zip(alive, conf):
        conf_of[rec.id] = float(c)
        if c < cfg.theta:
            rec.alive = False
            state.mx[rec.orig_index] = state.mx.get(rec.orig_index, 0) + 1
            state.audit.append(AuditEntry(rec.id, rec.orig_index, t, CONFIDENCE, float(c),
                                          state.mx[rec.orig_index]))
    for rec in alive:
        if rec.alive and state.mx.get(rec.orig_index, 0) >= cfg.group_threshold:
            rec.alive = False
            state.audit.append(AuditEntry(rec.id, rec.orig_index, t, GROUP, conf_of[rec.id],
                                          state.mx[rec.orig_index]))
    survivors = [r for r in state.manifest.records if r.alive]
    if not survivors:
        raise EmptySetError(f"iteration {t} removed every training patch; theta={cfg.theta} is too high")
    log.info("RAL iteration %d: %d -> %d patches", t, len(alive), len(survivors))
    if train_fn is not None:
        state.model = train_fn(survivors, copy.deepcopy(state.model), t)
    state.t = t + 1
    return state


@dataclass
class RALResult:
    manifest: Manifest
    model: Any
    best_iteration: int
    history: list[HistoryRow]
    audit: list[AuditEntry]
    state: RALState


def run_ral(manifest: Manifest, model: Any, cfg: RALConfig, scorer: Scorer,
            evaluator: Evaluator, train_fn: Optional[TrainFn] = None) -> RALResult:
    """Loop refinement iterations until validation ACA stops improving.

    An iteration counts as an improvement when its ACA beats the best so far
    by more than zero and by at least ``min_improvement``; ``patience``
    consecutive non-improvements stop the loop, as does passing
    ``max_iterations``. The result carries the manifest and model of the
    best iteration (iteration 0 is the unrefined starting point).
    """
    state = RALState.start(manifest, model)
    aca = float(evaluator(model))
    state.history.append(HistoryRow(0, state.size, aca))
    best_it, best_aca = 0, aca
    best_flags = [r.alive for r in state.manifest.records]
    best_model = copy.deepcopy(model)
    stale = 0
    while state.t <= cfg.max_iterations:
        ral_iteration(state, cfg, scorer, train_fn)
        k = state.t - 1
        aca = float(evaluator(state.model))
        state.history.append(HistoryRow(k, state.size, aca))
        log.info("RAL K=%d size=%d val_aca=%.4f", k, state.size, aca)
        if aca > best_aca and aca - best_aca >= cfg.min_improvement:
            best_it, best_aca = k, aca
            best_flags = [r.alive for r in state.manifest.records]
            best_model = copy.deepcopy(state.model)
            stale = 0
        else:
            stale += 1
            if stale >= cfg.patience:
                break
    refined = state.manifest.copy()
    for rec, flag in zip(refined.records, best_flags):
        rec.alive = flag
    return RALResult(refined, best_model, best_it, list(state.history), list(state.audit), state)


# -- default engine-backed callables -------------------------------------------


def score_patches(model, source: PatchSource, records: Sequence[PatchRecord],
                  batch: int = 64) -> np.ndarray:
    """Softmax vector per patch from the eval-mode model, independent of batching."""
    return predict_probs_records(model, source, list(records), batch, deterministic=True)


def make_scorer(source: PatchSource, batch: int = 64) -> Scorer:
    def scorer(model, records):
        return score_patches(model, source, records, batch)

    return scorer


def make_finetune(manifest: Manifest, cfg: TrainConfig, source: Optional[PatchSource] = None) -> TrainFn:
    src = source or PatchSource(manifest)

    def finetune(records, model, t):
        train(model, manifest, replace(cfg, seed=cfg.seed + t), source=src, records=records)
        return model

    return finetune


def make_evaluator(val: Manifest, source: Optional[PatchSource] = None) -> Evaluator:
    src = source or PatchSource(val)

    def evaluator(model):
        return evaluate(model, val, src).aca

    return evaluator


# -- reports ------------------------------------------------------------------


def removal_quality(manifest: Manifest) -> dict:
    """Precision/recall of removals against planted ground truth (records with ``truth``)."""
    tp = fp = fn = 0
    for r in manifest.records:
        if r.truth is None:
            continue
        bad = r.truth != r.label
        if not r.alive and bad:
            tp += 1
        elif not r.alive:
            fp += 1
        elif bad:
            fn += 1
    removed = tp + fp
    planted = tp + fn
    return {"removed": removed, "planted": planted, "true_removals": tp,
            "precision": tp / removed if removed else float("nan"),
            "recall": tp / planted if planted else float("nan")}


def write_audit_log(path, audit: Sequence[AuditEntry]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for e in audit:
            fh.write(json.dumps(e.to_json(), separators=(",", ":")) + "\n")


def read_audit_log(path) -> list[AuditEntry]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                o = json.loads(line)
                out.append(AuditEntry(o["id"], o["orig_index"], o["iteration"], o["reason"],
                                      o["confidence"], o["mx"]))
    return out


def write_history_csv(path, history: Sequence[HistoryRow]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["iteration", "set_size", "val_aca"])
        for row in history:
            w.writerow([row.iteration, row.set_size, repr(float(row.val_aca))])
