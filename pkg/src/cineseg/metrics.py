"""Evaluation: boundary AP and F1, turning-point agreement, and
gradient-times-activation modality importance.

Turning-point agreement definitions used throughout this repo: per TP
event the evaluator takes the single argmax scene; TA counts events
whose scene is in the gold set; PA counts events whose scene falls in
the gold set's closed index interval; D is |predicted - nearest gold| /
total scenes, averaged over events, times 100. Reports carry a flag
naming these as operational definitions.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import alignfuse as af
from . import numcore as nc
from .errors import ContractError, DataError

METRICS_SCHEMA = "cineseg-metrics"
METRICS_VERSION = 1
TP_DEFINITIONS_FLAG = "tp-agreement-definitions-local-to-this-repo"


@dataclass
class MetricsReport:
    task: str
    values: dict = field(default_factory=dict)
    flags: list = field(default_factory=list)
    threshold: float | None = None
    seed: int | None = None
    config_digest: str | None = None

    def to_json(self) -> dict:
        return {
            "schema": METRICS_SCHEMA,
            "version": METRICS_VERSION,
            "task": self.task,
            "values": {k: float(v) for k, v in sorted(self.values.items())},
            "flags": sorted(self.flags),
            "threshold": self.threshold,
            "seed": self.seed,
            "config_digest": self.config_digest,
        }

    def dumps(self) -> str:
        return json.dumps(self.to_json(), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, payload: dict) -> "MetricsReport":
        if payload.get("schema") != METRICS_SCHEMA:
            raise DataError(f"not a metrics report: schema {payload.get('schema')!r}")
        return cls(
            task=payload["task"],
            values=dict(payload["values"]),
            flags=list(payload["flags"]),
            threshold=payload["threshold"],
            seed=payload["seed"],
            config_digest=payload["config_digest"],
        )


# ---- boundary metrics ----


def average_precision(scores, labels) -> float:
    """Rank-accumulation AP: mean precision at each positive, scores
    descending, ties broken by original index."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise DataError(f"scores {scores.shape} and labels {labels.shape} must be matching vectors")
    if not (labels == 1).any():
        raise DataError("average precision needs at least one positive label")
    order = np.argsort(-scores, kind="stable")
    ranked = labels[order] == 1
    hits = np.cumsum(ranked)
    ranks = np.flatnonzero(ranked) + 1
    return float((hits[ranked] / ranks).mean())


def f1_at(scores, labels, threshold: float = 0.5):
    """F1 with predictions = (score >= threshold). Returns (f1, degenerate)
    where degenerate flags the no-predicted-positives fallback to 0."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels) == 1
    predicted = scores >= threshold
    if not predicted.any():
        return 0.0, True
    true_pos = (predicted & labels).sum()
    if true_pos == 0:
        return 0.0, False
    precision = true_pos / predicted.sum()
    recall = true_pos / labels.sum()
    return float(2 * precision * recall / (precision + recall)), False


def best_f1(scores, labels):
    """Best F1 over thresholds set at each unique score. Returns
    (f1, threshold)."""
    scores = np.asarray(scores, dtype=np.float64)
    best_value, best_threshold = 0.0, float("inf")
    for t in np.unique(scores):
        value, _ = f1_at(scores, labels, float(t))
        if value > best_value:
            best_value, best_threshold = value, float(t)
    return best_value, best_threshold


# ---- turning-point agreement ----


def tp_metrics(events):
    """Pooled TA/PA/D over TP events from any number of movies.

    events: iterable of (predicted_scene, gold_scene_set, total_scenes).
    Returns a dict with percentages for ta/pa and the scaled distance d.
    """
    events = list(events)
    if not events:
        raise DataError("tp_metrics needs at least one event")
    ta_hits, pa_hits, distances = 0, 0, []
    for predicted, gold, total_scenes in events:
        gold = sorted(int(g) for g in gold)
        if not gold:
            raise DataError("a turning point with an empty gold set cannot be scored")
        if total_scenes < 1:
            raise DataError("total_scenes must be positive")
        predicted = int(predicted)
        if predicted in gold:
            ta_hits += 1
        if gold[0] <= predicted <= gold[-1]:
            pa_hits += 1
        distances.append(min(abs(predicted - g) for g in gold) / total_scenes)
    n = len(events)
    return {
        "ta": 100.0 * ta_hits / n,
        "pa": 100.0 * pa_hits / n,
        "d": 100.0 * float(np.mean(distances)),
    }


# ---- modality importance ----


def modality_slices(config) -> list[slice]:
    width = config.width
    return [slice(m * width, (m + 1) * width) for m in range(config.num_modalities)]


def _normalize_importance(raw: np.ndarray):
    """ReLU then normalize across modalities; all-zero falls back to
    uniform with a flag."""
    raw = np.maximum(np.asarray(raw, dtype=np.float64), 0.0)
    total = raw.sum()
    if total <= 0.0:
        return np.full(raw.shape, 1.0 / raw.size), True
    return raw / total, False


def gradcam_importance(model, feats_list, task: str):
    """Per-modality importance for one input sequence.

    The selected output y* is the max-class logit at the key (middle)
    position for the scene task, and the sum over turning points of the
    max-shot logit for the act task. The head-weight gradient of y* is
    multiplied with the selected rows' activations, summed per modality
    channel slice, rectified, and normalized to sum to one. Returns
    (weights [M], uniform_fallback).
    """
    cfg = model.config
    head_w = model.params["head.w"]
    saved_grads = {name: p.grad for name, p in model.params.items()}
    head_w.grad = None
    try:
        with nc.Tape() as tape:
            rows = af.encode_sequence(model, feats_list)
            logits = af.apply_head(model, rows)
            if task == "scene":
                if logits.shape[0] % 2 == 0:
                    raise DataError("scene importance needs an odd window so the key row is central")
                key = logits.shape[0] // 2
                selections = [(key, int(np.argmax(logits.data[key])))]
            elif task == "act":
                selections = [
                    (int(np.argmax(logits.data[:, n])), n) for n in range(cfg.num_classes)
                ]
            else:
                raise ContractError(f"unknown importance task {task!r}")
            picked = [
                nc.narrow(nc.narrow(logits, -2, i, i + 1), -1, n, n + 1)
                for i, n in selections
            ]
            target = picked[0] if len(picked) == 1 else nc.concat(picked, -1)
            loss = nc.sum_all(target)
        nc.backward(tape, loss)
        grad = head_w.grad
    finally:
        for name, p in model.params.items():
            p.grad = saved_grads[name]

    raw = np.zeros(cfg.num_modalities)
    for i, n in selections:
        activation = rows.data[i]
        for m, channels in enumerate(modality_slices(cfg)):
            raw[m] += float((grad[channels, n] * activation[channels]).sum())
    return _normalize_importance(raw)
