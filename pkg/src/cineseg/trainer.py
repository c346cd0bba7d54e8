"""Optimizers and the two training loops: scene boundary windows with
class-weighted cross-entropy, and the joint act pipeline that alternates
the synchronization E-step with gradient steps on the combined objective.

Scene windows never cross movie edges during training; evaluation scores
every shot using mirror-padded windows and flags the padding in reports.
Act training treats a batch as several whole movies: the contrastive
loss pools them for negatives while the synopsis and distillation terms
are averaged per movie.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import alignfuse as af
from . import distill
from . import metrics as mx
from . import numcore as nc
from . import sync
from .errors import ConfigError, DataError, NumericError
from .numcore import Tensor

log = logging.getLogger(__name__)

MIRROR_EVAL_FLAG = "mirror-padded-eval"
ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


class Optimizer:
    """SGD or bias-corrected Adam over a named parameter dict."""

    def __init__(self, params: dict, kind: str = "adam", lr: float = 1e-4):
        if kind not in ("adam", "sgd"):
            raise ConfigError(f"unknown optimizer kind {kind!r}")
        if lr <= 0:
            raise ConfigError("learning rate must be positive")
        self.params = dict(params)
        self.kind = kind
        self.lr = float(lr)
        self.step_count = 0
        if kind == "adam":
            self._m = {n: np.zeros_like(p.data) for n, p in self.params.items()}
            self._v = {n: np.zeros_like(p.data) for n, p in self.params.items()}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self) -> None:
        self.step_count += 1
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            if not np.isfinite(g).all():
                raise NumericError(f"non-finite gradient for parameter '{name}'")
            if self.kind == "sgd":
                p.data -= self.lr * g
            else:
                m = self._m[name]
                v = self._v[name]
                m *= ADAM_BETA1
                m += (1.0 - ADAM_BETA1) * g
                v *= ADAM_BETA2
                v += (1.0 - ADAM_BETA2) * g * g
                m_hat = m / (1.0 - ADAM_BETA1 ** self.step_count)
                v_hat = v / (1.0 - ADAM_BETA2 ** self.step_count)
                p.data -= self.lr * m_hat / (np.sqrt(v_hat) + ADAM_EPS)


@dataclass
class TrainConfig:
    task: str = "scene"
    epochs: int = 20
    batch_size: int = 1024
    optimizer: str = "adam"
    lr: float = 1e-4
    seed: int = 0
    holdout: int = 2
    loss_weights: tuple = distill.DEFAULT_LOSS_WEIGHTS
    em_every: int = 1
    em_xi: float = sync.DEFAULT_BAND_XI
    em_percentile: float = sync.DEFAULT_PERCENTILE
    kd_joint: bool = False
    sync_dim: int = 128

    def validate(self) -> None:
        if self.task not in ("scene", "act"):
            raise ConfigError(f"unknown training task {self.task!r}")
        if self.epochs < 1:
            raise ConfigError("epochs must be at least 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be at least 1")
        if self.holdout < 1:
            raise ConfigError("holdout must leave at least one evaluation movie")
        if self.em_every < 1:
            raise ConfigError("em_every must be at least 1")
        if len(self.loss_weights) != 3:
            raise ConfigError("loss_weights needs exactly three entries")
        if self.sync_dim < 1:
            raise ConfigError("sync_dim must be positive")


ACT_DEFAULTS = TrainConfig(
    task="act", epochs=10, batch_size=4, optimizer="sgd", lr=1e-3
)


def weighted_scene_ce(logits: Tensor, labels) -> Tensor:
    """Class-weighted boundary cross-entropy, weight_c = batch/(2*count_c),
    normalized as a weighted mean. Single-class batches fall back to the
    unweighted mean with a warning."""
    labels = np.asarray(labels, dtype=np.int64)
    batch = labels.shape[0]
    if batch == 0:
        raise DataError("weighted_scene_ce needs a non-empty batch")
    if logits.shape != (batch, 2):
        raise DataError(f"expected logits ({batch}, 2), got {logits.shape}")
    if not np.isin(labels, (0, 1)).all():
        raise DataError("scene labels must be binary")
    counts = np.bincount(labels, minlength=2)
    if counts.min() == 0:
        log.warning("single-class batch (%d examples): unweighted cross-entropy", batch)
        weights = np.ones(batch)
    else:
        weights = (batch / (2.0 * counts))[labels]
    target = np.zeros((batch, 2))
    target[np.arange(batch), labels] = weights / weights.sum()
    return nc.neg(nc.sum_all(nc.mul(nc.log_softmax(logits, axis=-1), target)))


# ---- scene windows ----


def _reflect_indices(center: int, half: int, length: int) -> np.ndarray:
    idx = np.arange(center - half, center + half + 1)
    if length == 1:
        return np.zeros_like(idx)
    period = 2 * (length - 1)
    idx = np.abs(idx) % period
    return np.where(idx >= length, period - idx, idx)


def scene_training_windows(movies, window: int):
    """(movie_index, key_shot) pairs whose window stays inside the movie."""
    if window % 2 == 0:
        raise ConfigError("scene windows need an odd length")
    half = window // 2
    pairs = []
    for mi, movie in enumerate(movies):
        for t in range(half, movie.num_shots - half):
            pairs.append((mi, t))
    return pairs


def _window_batch(movies, pairs, window: int):
    half = window // 2
    per_modality = None
    labels = np.empty(len(pairs), dtype=np.int64)
    for row, (mi, t) in enumerate(pairs):
        movie = movies[mi]
        idx = np.arange(t - half, t + half + 1)
        if per_modality is None:
            per_modality = [
                np.empty((len(pairs), window, s.dim)) for s in movie.streams
            ]
        for m, stream in enumerate(movie.streams):
            per_modality[m][row] = stream.samples[idx]
        labels[row] = movie.scene_labels[t]
    return per_modality, labels


def scene_shot_scores(model, movie, rng=None) -> np.ndarray:
    """Boundary probability for every shot, with mirror-padded edge windows."""
    window = model.config.seq_len
    half = window // 2
    n = movie.num_shots
    if n <= half:
        raise DataError(
            f"movie {movie.movie_id} has {n} shots, too short for a {window}-shot window"
        )
    scores = np.empty(n)
    for start in range(0, n, 256):
        keys = range(start, min(start + 256, n))
        batch = [
            np.stack([s.samples[_reflect_indices(t, half, n)] for t in keys])
            for s in movie.streams
        ]
        logits = af.forward_scene(model, [Tensor(b) for b in batch], rng)
        probs = nc.softmax(logits, axis=-1)
        scores[start:start + len(batch[0])] = probs.data[:, 1]
    return scores


def scene_report(model, eval_movies, epoch: int, seed: int) -> mx.MetricsReport:
    all_scores, all_labels, per_movie_ap = [], [], []
    for movie in eval_movies:
        scores = scene_shot_scores(model, movie)
        all_scores.append(scores)
        all_labels.append(movie.scene_labels)
        per_movie_ap.append(mx.average_precision(scores, movie.scene_labels))
    scores = np.concatenate(all_scores)
    labels = np.concatenate(all_labels)
    flags = [MIRROR_EVAL_FLAG]
    f1, degenerate = mx.f1_at(scores, labels)
    if degenerate:
        flags.append("f1-no-predicted-positives")
    best, best_threshold = mx.best_f1(scores, labels)
    values = {
        "epoch": float(epoch),
        "ap": mx.average_precision(scores, labels),
        "ap_macro": float(np.mean(per_movie_ap)),
        "f1_at_threshold": f1,
        "best_f1": best,
        "best_f1_threshold": best_threshold,
        "positive_rate": float(np.mean(labels)),
    }
    return mx.MetricsReport(
        task="scene", values=values, flags=flags, threshold=0.5, seed=seed
    )


def _split(movies, holdout: int):
    if len(movies) <= holdout:
        raise ConfigError(
            f"{len(movies)} movies cannot spare {holdout} for evaluation"
        )
    return movies[:-holdout], movies[-holdout:]


def train_scene(movies, model_cfg: af.ModelConfig, cfg: TrainConfig, checkpoint_dir=None):
    """Returns (model, per-epoch reports incl. the pre-training one, logs)."""
    cfg.validate()
    if cfg.task != "scene":
        raise ConfigError("train_scene needs a scene TrainConfig")
    train_movies, eval_movies = _split(movies, cfg.holdout)
    shuffle_seed, dropout_seed, model_seed = np.random.SeedSequence(cfg.seed).spawn(3)
    shuffle_rng = np.random.default_rng(shuffle_seed)
    dropout_rng = np.random.default_rng(dropout_seed)
    model = af.FusionModel(model_cfg, model_seed)
    optimizer = Optimizer(model.params, cfg.optimizer, cfg.lr)

    pairs = scene_training_windows(train_movies, model_cfg.seq_len)
    if not pairs:
        raise DataError("no training windows fit inside the training movies")

    reports = [scene_report(model, eval_movies, 0, cfg.seed)]
    logs = []
    step = 0
    for epoch in range(1, cfg.epochs + 1):
        order = shuffle_rng.permutation(len(pairs))
        for start in range(0, len(order), cfg.batch_size):
            chosen = [pairs[i] for i in order[start:start + cfg.batch_size]]
            feats, labels = _window_batch(train_movies, chosen, model_cfg.seq_len)
            optimizer.zero_grad()
            with nc.Tape() as tape:
                logits = af.forward_scene(
                    model, [Tensor(f) for f in feats], dropout_rng
                )
                loss = weighted_scene_ce(logits, labels)
            step += 1
            logs.append(
                {
                    "step": step,
                    "epoch": epoch,
                    "losses": {"scene_ce": float(loss.data)},
                    "lr": cfg.lr,
                    "seed": cfg.seed,
                }
            )
            nc.backward(tape, loss)
            optimizer.step()
        reports.append(scene_report(model, eval_movies, epoch, cfg.seed))
        if checkpoint_dir is not None:
            save_scene_checkpoint(
                Path(checkpoint_dir) / f"epoch_{epoch:03d}.ckpt", model, epoch
            )
    return model, reports, logs


def save_scene_checkpoint(path, model, epoch: int | None = None) -> None:
    extra = {} if epoch is None else {"epoch": epoch}
    af.save_checkpoint(path, "scene", {"model": model.config}, model.params, extra)


def load_scene_checkpoint(path):
    kind, configs, arrays, extra = af.load_checkpoint(path)
    if kind != "scene":
        raise DataError(f"{path} holds a {kind!r} checkpoint, expected scene")
    model = af.FusionModel(configs["model"], seed=0)
    model.load_state(arrays)
    return model, extra


# ---- act pipeline ----


@dataclass
class ActPipeline:
    shot_model: af.FusionModel
    synopsis_model: af.FusionModel
    sync_head: sync.SyncHead
    max_p_col_dev: float = 0.0

    def named_params(self) -> dict:
        merged = {}
        for prefix, params in (
            ("shot.", self.shot_model.params),
            ("synopsis.", self.synopsis_model.params),
            ("", self.sync_head.params),
        ):
            for name, p in params.items():
                merged[prefix + name] = p
        return merged


def build_act_pipeline(shot_cfg, synopsis_cfg, sync_dim: int, seed) -> ActPipeline:
    if synopsis_cfg.num_modalities != 1:
        raise ConfigError("the synopsis model takes a single text modality")
    if shot_cfg.fused_width != synopsis_cfg.fused_width:
        raise ConfigError(
            "shot and synopsis fused widths must match for the shared sync head "
            f"({shot_cfg.fused_width} vs {synopsis_cfg.fused_width})"
        )
    if not isinstance(seed, np.random.SeedSequence):
        seed = np.random.SeedSequence(seed)
    tower_seed, head_seed = seed.spawn(2)
    # both towers draw from the same stream: parameters drawn before the
    # towers' shapes diverge (notably the input projections) start identical,
    # so the first expectation step scores shots against sentences through a
    # common random map instead of two unrelated ones
    return ActPipeline(
        af.FusionModel(shot_cfg, tower_seed),
        af.FusionModel(synopsis_cfg, tower_seed),
        sync.SyncHead(shot_cfg.fused_width, sync_dim, head_seed),
    )


def save_act_checkpoint(path, pipeline: ActPipeline, epoch: int | None = None) -> None:
    params = dict(pipeline.named_params())
    extra = {"max_p_col_dev": pipeline.max_p_col_dev}
    if epoch is not None:
        extra["epoch"] = epoch
    af.save_checkpoint(
        path,
        "act",
        {"shot": pipeline.shot_model.config, "synopsis": pipeline.synopsis_model.config},
        params,
        extra,
    )


def load_act_checkpoint(path):
    kind, configs, arrays, extra = af.load_checkpoint(path)
    if kind != "act":
        raise DataError(f"{path} holds a {kind!r} checkpoint, expected act")
    head_arrays = {k: v for k, v in arrays.items() if k.startswith("sync.")}
    proj_dim = head_arrays["sync.proj.w"].shape[1]
    pipeline = ActPipeline(
        af.FusionModel(configs["shot"], seed=0),
        af.FusionModel(configs["synopsis"], seed=0),
        sync.SyncHead(configs["shot"].fused_width, proj_dim, seed=0),
        max_p_col_dev=float(extra.get("max_p_col_dev", 0.0)),
    )
    pipeline.shot_model.load_state(
        {k[len("shot."):]: v for k, v in arrays.items() if k.startswith("shot.")}
    )
    pipeline.synopsis_model.load_state(
        {k[len("synopsis."):]: v for k, v in arrays.items() if k.startswith("synopsis.")}
    )
    for name, value in head_arrays.items():
        if pipeline.sync_head.params[name].shape != value.shape:
            raise DataError(f"sync head parameter '{name}' has shape {value.shape}")
        pipeline.sync_head.params[name] = Tensor(value, requires_grad=True)
    return pipeline, extra


def movie_inputs(movie):
    """(per-modality shot matrices, synopsis matrix) for the act pipeline."""
    if movie.synopsis_features is None or movie.tp_labels is None:
        raise DataError(f"movie {movie.movie_id} lacks synopsis supervision")
    return [s.samples for s in movie.streams], movie.synopsis_features


def _gold_span_shots(movie, tp: int) -> np.ndarray:
    sentences = movie.tp_labels[tp]
    return np.flatnonzero(movie.gold_sync[:, sentences].any(axis=1))


def _scene_partition(movie):
    cuts = np.flatnonzero(movie.scene_labels) + 1
    scene_of = np.searchsorted(cuts, np.arange(movie.num_shots), side="right")
    return scene_of, len(cuts) + 1


def act_eval(shot_model, movies):
    """Span hits at shot level plus scene-level agreement events."""
    hits, total, events = 0, 0, []
    for movie in movies:
        feats, _ = movie_inputs(movie)
        logits = af.forward_act(shot_model, feats)
        probs = distill.shot_distribution(logits).data
        scene_of, num_scenes = _scene_partition(movie)
        for tp in range(probs.shape[1]):
            span = _gold_span_shots(movie, tp)
            if span.size == 0:
                raise DataError(
                    f"movie {movie.movie_id} has no gold shots for turning point {tp}"
                )
            predicted_shot = int(np.argmax(probs[:, tp]))
            total += 1
            if predicted_shot in set(span.tolist()):
                hits += 1
            scene_scores = np.array(
                [probs[scene_of == s, tp].max() for s in range(num_scenes)]
            )
            events.append(
                (int(np.argmax(scene_scores)), set(scene_of[span].tolist()), num_scenes)
            )
    return hits, total, events


def act_report(pipeline, eval_movies, epoch: int, seed: int) -> mx.MetricsReport:
    hits, total, events = act_eval(pipeline.shot_model, eval_movies)
    values = {
        "epoch": float(epoch),
        "span_hits": float(hits),
        "span_total": float(total),
        "span_hit_rate": hits / total,
        "max_p_col_dev": pipeline.max_p_col_dev,
        **mx.tp_metrics(events),
    }
    return mx.MetricsReport(
        task="act",
        values=values,
        flags=[mx.TP_DEFINITIONS_FLAG],
        seed=seed,
    )


def _mean(parts):
    total = parts[0]
    for p in parts[1:]:
        total = nc.add(total, p)
    return nc.mul(total, 1.0 / len(parts)) if len(parts) > 1 else total


def train_act(movies, shot_cfg, synopsis_cfg, cfg: TrainConfig, checkpoint_dir=None):
    """Returns (pipeline, final per-movie SyncMatrix list, reports, logs)."""
    cfg.validate()
    if cfg.task != "act":
        raise ConfigError("train_act needs an act TrainConfig")
    train_movies, eval_movies = _split(movies, cfg.holdout)
    shuffle_seed, dropout_seed, model_seed = np.random.SeedSequence(cfg.seed).spawn(3)
    shuffle_rng = np.random.default_rng(shuffle_seed)
    dropout_rng = np.random.default_rng(dropout_seed)
    pipeline = build_act_pipeline(shot_cfg, synopsis_cfg, cfg.sync_dim, model_seed)
    head = pipeline.sync_head
    optimizer = Optimizer(pipeline.named_params(), cfg.optimizer, cfg.lr)

    inputs = [movie_inputs(m) for m in train_movies]
    bands = {}
    syncs = None
    reports = [act_report(pipeline, eval_movies, 0, cfg.seed)]
    logs = []
    step = 0
    for epoch in range(1, cfg.epochs + 1):
        if syncs is None or (epoch - 1) % cfg.em_every == 0:
            syncs = sync.run_e_step(
                pipeline.shot_model,
                pipeline.synopsis_model,
                head,
                inputs,
                cfg.em_xi,
                cfg.em_percentile,
            )
        order = shuffle_rng.permutation(len(train_movies))
        for start in range(0, len(order), cfg.batch_size):
            batch = order[start:start + cfg.batch_size]
            optimizer.zero_grad()
            step_dev = 0.0
            with nc.Tape() as tape:
                terms, ce_parts, kd_parts = [], [], []
                for mi in batch:
                    feats, synopsis = inputs[mi]
                    rows = af.encode_sequence(pipeline.shot_model, feats, dropout_rng)
                    syn_rows = af.encode_sequence(
                        pipeline.synopsis_model, [synopsis], dropout_rng
                    )
                    u = head.features(rows)
                    v = head.features(syn_rows)
                    shot_logits = af.apply_head(pipeline.shot_model, rows)
                    q = af.apply_head(pipeline.synopsis_model, syn_rows)
                    dims = syncs[mi].w.shape
                    if dims not in bands:
                        bands[dims] = sync.band_mask(*dims, cfg.em_xi)
                    terms.append((u, v, syncs[mi].w, bands[dims]))
                    ce_parts.append(
                        distill.synopsis_ce_loss(q, train_movies[mi].tp_labels)
                    )
                    if cfg.kd_joint:
                        attn = distill.attention_weights(u, v, head.tau())
                        targets = distill.transfer_targets(attn, q)
                    else:
                        attn = distill.attention_weights(
                            u.detach(), v.detach(), head.tau().detach()
                        )
                        targets = distill.transfer_targets(attn, q.detach())
                    step_dev = max(
                        step_dev,
                        float(np.abs(targets.data.sum(axis=0) - 1.0).max()),
                    )
                    kd_parts.append(
                        distill.kd_loss(distill.shot_distribution(shot_logits), targets)
                    )
                l_c = sync.m_step_loss(terms, head.tau())
                l_ce = _mean(ce_parts)
                l_kd = _mean(kd_parts)
                total = distill.total_loss(l_c, l_ce, l_kd, cfg.loss_weights)
            pipeline.max_p_col_dev = max(pipeline.max_p_col_dev, step_dev)
            step += 1
            logs.append(
                {
                    "step": step,
                    "epoch": epoch,
                    "losses": {
                        "contrastive": float(l_c.data),
                        "synopsis_ce": float(l_ce.data),
                        "distillation": float(l_kd.data),
                        "total": float(total.data),
                    },
                    "lr": cfg.lr,
                    "seed": cfg.seed,
                    "max_p_col_dev": step_dev,
                }
            )
            nc.backward(tape, total)
            optimizer.step()
            head.clamp_tau()
        reports.append(act_report(pipeline, eval_movies, epoch, cfg.seed))
        if checkpoint_dir is not None:
            save_act_checkpoint(
                Path(checkpoint_dir) / f"epoch_{epoch:03d}.ckpt", pipeline, epoch
            )
    final_syncs = sync.run_e_step(
        pipeline.shot_model,
        pipeline.synopsis_model,
        head,
        inputs,
        cfg.em_xi,
        cfg.em_percentile,
    )
    return pipeline, final_syncs, reports, logs
