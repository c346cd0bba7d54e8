"""Transfer of synopsis turning-point supervision onto shot predictions.

Shot-sentence attention (row softmax of scaled cosine similarities,
sharing the contrastive temperature) carries the synopsis model's
per-sentence turning-point logits onto shots. Both the carried target
distribution and the shot model's own prediction are normalized over
the shot axis per turning point, and the distillation loss is the sum
over turning points of KL(shot distribution || transferred target).
By default the targets are detached so distillation gradients reach
the shot model only.
"""

from __future__ import annotations

import numpy as np

from . import numcore as nc
from .errors import DataError, NumericError
from .numcore import Tensor

PROB_FLOOR = 1e-12
DEFAULT_LOSS_WEIGHTS = (1.0, 1.0, 10.0)  # contrastive, synopsis CE, distillation


def attention_weights(u, v, tau) -> Tensor:
    """Shot-over-sentence attention: row softmax of (u @ v.T) / tau."""
    u = u if isinstance(u, Tensor) else Tensor(u)
    v = v if isinstance(v, Tensor) else Tensor(v)
    sims = nc.div(nc.matmul(u, nc.transpose(v)), tau)
    return nc.softmax(sims, axis=1)


def transfer_targets(attn: Tensor, q) -> Tensor:
    """Carry sentence logits onto shots: shot-axis softmax of attn @ q.

    attn: [num_shots x num_sentences] row-stochastic; q: per-sentence
    turning-point logits [num_sentences x num_tp]. Columns of the result
    sum to one. Adding a constant to a column of q leaves the result
    unchanged because attention rows sum to one.
    """
    q = q if isinstance(q, Tensor) else Tensor(q)
    return nc.softmax(nc.matmul(attn, q), axis=0)


def shot_distribution(logits) -> Tensor:
    """Per turning point, the shot-axis softmax of the shot logits."""
    logits = logits if isinstance(logits, Tensor) else Tensor(logits)
    return nc.softmax(logits, axis=0)


def kd_loss(shot_probs, target_probs) -> Tensor:
    """Sum over turning points of KL(shot column || target column).

    Expects column-stochastic matrices [num_shots x num_tp]; entries are
    floored at 1e-12 before the logs.
    """
    o = shot_probs if isinstance(shot_probs, Tensor) else Tensor(shot_probs)
    p = target_probs if isinstance(target_probs, Tensor) else Tensor(target_probs)
    if o.shape != p.shape:
        raise DataError(f"distributions differ in shape: {o.shape} vs {p.shape}")
    log_o = nc.log(nc.clamp_min(o, PROB_FLOOR))
    log_p = nc.log(nc.clamp_min(p, PROB_FLOOR))
    return nc.sum_all(nc.mul(o, nc.sub(log_o, log_p)))


def synopsis_ce_loss(sentence_logits, tp_labels) -> Tensor:
    """Cross-entropy between sentence-axis softmax and the gold sentences.

    For each turning point the target is uniform over its gold sentence
    index set; the per-turning-point terms are summed.
    """
    q = sentence_logits if isinstance(sentence_logits, Tensor) else Tensor(sentence_logits)
    num_sentences, num_tp = q.shape
    if len(tp_labels) != num_tp:
        raise DataError(f"{len(tp_labels)} gold sets for {num_tp} turning points")
    target = np.zeros((num_sentences, num_tp))
    for n, gold in enumerate(tp_labels):
        if not gold:
            raise DataError(f"turning point {n} has an empty gold set")
        for s in gold:
            if not 0 <= s < num_sentences:
                raise DataError(f"gold sentence {s} out of range for {num_sentences} sentences")
            target[s, n] = 1.0 / len(gold)
    return nc.neg(nc.sum_all(nc.mul(nc.log_softmax(q, axis=0), target)))


def total_loss(contrastive, synopsis_ce, distillation, weights=DEFAULT_LOSS_WEIGHTS) -> Tensor:
    """Weighted sum of the three objectives; rejects non-finite components."""
    parts = {
        "contrastive": contrastive,
        "synopsis_ce": synopsis_ce,
        "distillation": distillation,
    }
    terms = []
    for (name, value), weight in zip(parts.items(), weights):
        value = value if isinstance(value, Tensor) else Tensor(value)
        if not np.isfinite(value.data).all():
            raise NumericError(f"{name} component of the total loss is not finite")
        terms.append(nc.mul(value, float(weight)))
    return nc.add(nc.add(terms[0], terms[1]), terms[2])
