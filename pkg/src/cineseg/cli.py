"""Command-line entry point wiring synthesis, training, synchronization,
evaluation, gradient checking, and modality importance.

Configuration is a flat key=value file (# comments allowed) plus
repeatable --set key=value overrides; every key must be in the active
command's registry, and dedicated flags (--movies, --shots, --seed) win
over both. Each run writes all outputs under one directory: --out names
it exactly, otherwise a timestamped default under runs/ is created. No
output file embeds a timestamp or an absolute path, so a re-run with
the same seed and inputs is byte-identical.

Exit codes: 0 ok, 2 config, 3 data, 4 numeric, 5 I/O.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import alignfuse as af
from . import dataio
from . import distill
from . import metrics as mx
from . import numcore as nc
from . import sync
from . import trainer
from .errors import BlobIOError, ConfigError, ContractError, DataError, NumericError
from .numcore import Tensor

GRADCHECK_TOLERANCE = 1e-4


# ---- config plumbing ----


def _parse_bool(text: str) -> bool:
    lowered = text.strip().lower()
    if lowered in ("true", "1", "yes"):
        return True
    if lowered in ("false", "0", "no"):
        return False
    raise ConfigError(f"expected a boolean, got {text!r}")


def _parse_modalities(text: str) -> tuple:
    """'visual:16,audio:12' -> (("visual", 16), ("audio", 12))."""
    out = []
    for part in text.split(","):
        name, sep, dim = part.strip().partition(":")
        if not sep or not name:
            raise ConfigError(f"modalities entries are name:dim, got {part!r}")
        out.append((name, int(dim)))
    return tuple(out)


SYNTH_KEYS = {
    "movies": (int, 4),
    "shots": (int, 200),
    "shots_jitter": (int, 0),
    "scenes": (int, 10),
    "sentences": (int, 5),
    "modalities": (_parse_modalities, (("visual", 16), ("audio", 12))),
    "latent_dim": (int, 32),
    "noise": (float, 0.1),
    "tp_jitter": (float, 0.01),
    "tp_motif_scale": (float, 0.0),
    "tp_motif_halfwidth": (int, 2),
    "cut_jitter": (float, 1.0 / 3.0),
    "shot_seconds": (float, 2.0),
}

SCENE_KEYS = {
    "model.seq_len": (int, 17),
    "model.align_len": (int, 2),
    "model.width": (int, 768),
    "model.ffn_width": (int, 3072),
    "model.unimodal_depth": (int, 2),
    "model.fusion_depth": (int, 1),
    "model.dropout": (float, 0.1),
    "model.num_heads": (int, 1),
    "model.align_pe_embed": (_parse_bool, True),
    "model.align_pe_tokens": (_parse_bool, True),
    "train.epochs": (int, 20),
    "train.batch_size": (int, 1024),
    "train.optimizer": (str, "adam"),
    "train.lr": (float, 1e-4),
    "train.holdout": (int, 2),
}

ACT_KEYS = {
    "shot.seq_len": (int, 3000),
    "shot.align_len": (int, 100),
    "shot.width": (int, 128),
    "shot.ffn_width": (int, 128),
    "shot.unimodal_depth": (int, 1),
    "shot.fusion_depth": (int, 1),
    "shot.dropout": (float, 0.5),
    "shot.num_heads": (int, 1),
    "shot.align_pe_embed": (_parse_bool, True),
    "shot.align_pe_tokens": (_parse_bool, True),
    "synopsis.seq_len": (int, 60),
    "synopsis.align_len": (int, 20),
    "synopsis.width": (int, 0),  # 0 = match the shot model's fused width
    "synopsis.ffn_width": (int, 128),
    "synopsis.unimodal_depth": (int, 1),
    "synopsis.fusion_depth": (int, 0),
    "synopsis.dropout": (float, 0.1),
    "train.epochs": (int, 10),
    "train.batch_size": (int, 4),
    "train.optimizer": (str, "sgd"),
    "train.lr": (float, 1e-3),
    "train.holdout": (int, 2),
    "train.em_every": (int, 1),
    "train.em_xi": (float, sync.DEFAULT_BAND_XI),
    "train.em_percentile": (float, sync.DEFAULT_PERCENTILE),
    "train.kd_joint": (_parse_bool, False),
    "train.sync_dim": (int, 128),
    "train.alpha_contrastive": (float, 1.0),
    "train.alpha_synopsis": (float, 1.0),
    "train.alpha_distill": (float, 10.0),
}

SYNC_KEYS = {
    "xi": (float, sync.DEFAULT_BAND_XI),
    "percentile": (float, sync.DEFAULT_PERCENTILE),
}

EVAL_KEYS: dict = {}

IMPORTANCE_KEYS = {
    "shot": (int, -1),  # scene task: key shot index, -1 = movie middle
}

GRADCHECK_KEYS = {
    "h": (float, 1e-5),
    "tolerance": (float, GRADCHECK_TOLERANCE),
}


def read_config_file(path) -> dict:
    entries = {}
    for ln, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        if not sep or not key.strip():
            raise ConfigError(f"{path}:{ln}: expected key=value, got {line!r}")
        entries[key.strip()] = value.strip()
    return entries


def resolve_config(registry: dict, config_path, sets) -> dict:
    resolved = {key: default for key, (_, default) in registry.items()}
    raw = {}
    if config_path:
        raw.update(read_config_file(config_path))
    for item in sets or ():
        key, sep, value = item.partition("=")
        if not sep or not key.strip():
            raise ConfigError(f"--set takes key=value, got {item!r}")
        raw[key.strip()] = value.strip()
    for key, text in raw.items():
        if key not in registry:
            raise ConfigError(f"unknown config key '{key}'")
        parse = registry[key][0]
        try:
            resolved[key] = parse(text)
        except ConfigError:
            raise
        except ValueError as exc:
            raise ConfigError(f"bad value for '{key}': {exc}") from exc
    return resolved


def _jsonable(value):
    if isinstance(value, tuple):
        return [_jsonable(v) for v in value]
    return value


def _run_dir(args) -> Path:
    out = args.out or f"runs/{args.command}-{time.strftime('%Y%m%d-%H%M%S')}"
    path = Path(out)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _write_json(path: Path, payload) -> None:
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def _write_config(out: Path, command: str, seed: int, resolved: dict) -> None:
    payload = {"command": command, "seed": seed}
    payload.update({k: _jsonable(v) for k, v in resolved.items()})
    _write_json(out / "config.json", payload)


def _print_json(payload) -> None:
    print(json.dumps(payload, indent=2, sort_keys=True))


# ---- synth ----


def cmd_synth(args) -> int:
    cfg_map = resolve_config(SYNTH_KEYS, args.config, args.set)
    if args.movies is not None:
        cfg_map["movies"] = args.movies
    if args.shots is not None:
        cfg_map["shots"] = args.shots
    synth_cfg = dataio.SynthConfig(
        **{k: v for k, v in cfg_map.items() if k != "movies"}
    )
    synth_cfg.validate()
    out = _run_dir(args)
    movies = dataio.make_dataset(synth_cfg, cfg_map["movies"], args.seed)
    dataio.save_dataset(movies, out)
    summary = {
        "movies": [
            {"movie_id": m.movie_id, "shots": m.num_shots} for m in movies
        ],
        "modalities": [[name, dim] for name, dim in synth_cfg.modalities],
        "scenes": synth_cfg.scenes,
        "sentences": synth_cfg.sentences,
        "seed": args.seed,
    }
    _write_config(out, "synth", args.seed, cfg_map)
    _write_json(out / "summary.json", summary)
    _print_json(summary)
    return 0


# ---- training ----


def _write_log(path: Path, logs) -> None:
    with open(path, "w") as fh:
        for record in logs:
            fh.write(json.dumps(record, sort_keys=True) + "\n")


def _write_reports(path: Path, reports) -> None:
    _write_json(path, [r.to_json() for r in reports])


def cmd_train_scene(args) -> int:
    cfg_map = resolve_config(SCENE_KEYS, args.config, args.set)
    movies = dataio.load_dataset(Path(args.data))
    model_cfg = af.ModelConfig(
        seq_len=cfg_map["model.seq_len"],
        align_len=cfg_map["model.align_len"],
        width=cfg_map["model.width"],
        ffn_width=cfg_map["model.ffn_width"],
        unimodal_depth=cfg_map["model.unimodal_depth"],
        fusion_depth=cfg_map["model.fusion_depth"],
        dropout=cfg_map["model.dropout"],
        num_classes=2,
        modality_dims=tuple(s.dim for s in movies[0].streams),
        num_heads=cfg_map["model.num_heads"],
        align_pe_embed=cfg_map["model.align_pe_embed"],
        align_pe_tokens=cfg_map["model.align_pe_tokens"],
    )
    train_cfg = trainer.TrainConfig(
        task="scene",
        epochs=cfg_map["train.epochs"],
        batch_size=cfg_map["train.batch_size"],
        optimizer=cfg_map["train.optimizer"],
        lr=cfg_map["train.lr"],
        seed=args.seed,
        holdout=cfg_map["train.holdout"],
    )
    out = _run_dir(args)
    ckpt_dir = out / "checkpoints"
    ckpt_dir.mkdir(exist_ok=True)
    model, reports, logs = trainer.train_scene(movies, model_cfg, train_cfg, ckpt_dir)
    trainer.save_scene_checkpoint(out / "model.ckpt", model, train_cfg.epochs)
    _write_log(out / "train_log.jsonl", logs)
    _write_reports(out / "reports.json", reports)
    _write_config(out, "train-scene", args.seed, cfg_map)
    _print_json(reports[-1].to_json())
    return 0


def cmd_train_act(args) -> int:
    cfg_map = resolve_config(ACT_KEYS, args.config, args.set)
    movies = dataio.load_dataset(Path(args.data))
    dims = tuple(s.dim for s in movies[0].streams)
    shot_cfg = af.ModelConfig(
        seq_len=cfg_map["shot.seq_len"],
        align_len=cfg_map["shot.align_len"],
        width=cfg_map["shot.width"],
        ffn_width=cfg_map["shot.ffn_width"],
        unimodal_depth=cfg_map["shot.unimodal_depth"],
        fusion_depth=cfg_map["shot.fusion_depth"],
        dropout=cfg_map["shot.dropout"],
        num_classes=5,
        modality_dims=dims,
        num_heads=cfg_map["shot.num_heads"],
        align_pe_embed=cfg_map["shot.align_pe_embed"],
        align_pe_tokens=cfg_map["shot.align_pe_tokens"],
    )
    synopsis_width = cfg_map["synopsis.width"] or shot_cfg.fused_width
    synopsis_cfg = af.ModelConfig(
        seq_len=cfg_map["synopsis.seq_len"],
        align_len=cfg_map["synopsis.align_len"],
        width=synopsis_width,
        ffn_width=cfg_map["synopsis.ffn_width"],
        unimodal_depth=cfg_map["synopsis.unimodal_depth"],
        fusion_depth=cfg_map["synopsis.fusion_depth"],
        dropout=cfg_map["synopsis.dropout"],
        num_classes=5,
        modality_dims=(sum(dims),),
    )
    train_cfg = trainer.TrainConfig(
        task="act",
        epochs=cfg_map["train.epochs"],
        batch_size=cfg_map["train.batch_size"],
        optimizer=cfg_map["train.optimizer"],
        lr=cfg_map["train.lr"],
        seed=args.seed,
        holdout=cfg_map["train.holdout"],
        loss_weights=(
            cfg_map["train.alpha_contrastive"],
            cfg_map["train.alpha_synopsis"],
            cfg_map["train.alpha_distill"],
        ),
        em_every=cfg_map["train.em_every"],
        em_xi=cfg_map["train.em_xi"],
        em_percentile=cfg_map["train.em_percentile"],
        kd_joint=cfg_map["train.kd_joint"],
        sync_dim=cfg_map["train.sync_dim"],
    )
    out = _run_dir(args)
    ckpt_dir = out / "checkpoints"
    ckpt_dir.mkdir(exist_ok=True)
    pipeline, syncs, reports, logs = trainer.train_act(
        movies, shot_cfg, synopsis_cfg, train_cfg, ckpt_dir
    )
    trainer.save_act_checkpoint(out / "model.ckpt", pipeline, train_cfg.epochs)
    sync_dir = out / "sync"
    sync_dir.mkdir(exist_ok=True)
    train_movies = movies[:-train_cfg.holdout]
    for movie, sm in zip(train_movies, syncs):
        _write_json(sync_dir / f"{movie.movie_id}.json", sync.sync_to_json(sm))
    _write_log(out / "train_log.jsonl", logs)
    _write_reports(out / "reports.json", reports)
    _write_config(out, "train-act", args.seed, cfg_map)
    _print_json(reports[-1].to_json())
    return 0


# ---- sync export ----


def cmd_sync(args) -> int:
    cfg_map = resolve_config(SYNC_KEYS, args.config, args.set)
    pipeline, _ = trainer.load_act_checkpoint(args.checkpoint)
    movies = dataio.load_dataset(Path(args.data))
    inputs = [trainer.movie_inputs(m) for m in movies]
    out = _run_dir(args)
    syncs = sync.run_e_step(
        pipeline.shot_model,
        pipeline.synopsis_model,
        pipeline.sync_head,
        inputs,
        cfg_map["xi"],
        cfg_map["percentile"],
    )
    summary = []
    for movie, sm in zip(movies, syncs):
        _write_json(out / f"{movie.movie_id}.json", sync.sync_to_json(sm))
        if args.pgm:
            sync.write_pgm(sm.w, out / f"{movie.movie_id}.pgm")
        summary.append(
            {
                "movie_id": movie.movie_id,
                "shots": int(sm.w.shape[0]),
                "sentences": int(sm.w.shape[1]),
                "assigned": int(sm.w.sum()),
            }
        )
    _write_config(out, "sync", args.seed, cfg_map)
    _write_json(out / "summary.json", {"movies": summary})
    _print_json({"movies": summary})
    return 0


# ---- evaluation ----


def _format(value: float) -> str:
    return f"{value:.17g}"


def _eval_scene(model, extra, movies, args, out: Path) -> mx.MetricsReport:
    report = trainer.scene_report(model, movies, int(extra.get("epoch", 0)), args.seed)
    with open(out / "scores.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["movie_id", "shot", "score", "label"])
        for movie in movies:
            scores = trainer.scene_shot_scores(model, movie)
            for t, score in enumerate(scores):
                writer.writerow(
                    [movie.movie_id, t, _format(score), int(movie.scene_labels[t])]
                )
    return report


def _eval_act(pipeline, extra, movies, args, out: Path) -> mx.MetricsReport:
    report = trainer.act_report(pipeline, movies, int(extra.get("epoch", 0)), args.seed)
    with open(out / "scores.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["movie_id", "shot"] + [f"tp{i}" for i in range(5)])
        for movie in movies:
            feats, _ = trainer.movie_inputs(movie)
            probs = distill.shot_distribution(
                af.forward_act(pipeline.shot_model, feats)
            ).data
            for t in range(probs.shape[0]):
                writer.writerow(
                    [movie.movie_id, t] + [_format(p) for p in probs[t]]
                )
    return report


def cmd_eval(args) -> int:
    cfg_map = resolve_config(EVAL_KEYS, args.config, args.set)
    kind, _, _, extra = af.load_checkpoint(args.checkpoint)
    movies = dataio.load_dataset(Path(args.data))
    out = _run_dir(args)
    if kind == "scene":
        model, extra = trainer.load_scene_checkpoint(args.checkpoint)
        report = _eval_scene(model, extra, movies, args, out)
    elif kind == "act":
        pipeline, extra = trainer.load_act_checkpoint(args.checkpoint)
        report = _eval_act(pipeline, extra, movies, args, out)
    else:
        raise DataError(f"cannot evaluate a {kind!r} checkpoint")
    _write_config(out, "eval", args.seed, cfg_map)
    (out / "report.json").write_text(report.dumps() + "\n")
    print(report.dumps())
    return 0


# ---- gradient checking ----


def _tiny_scene_setup(seed: int):
    cfg = af.ModelConfig(
        seq_len=5, align_len=2, width=8, ffn_width=16,
        unimodal_depth=1, fusion_depth=1, dropout=0.0,
        num_classes=2, modality_dims=(3, 2),
    )
    root = np.random.SeedSequence(seed)
    model_seed, data_seed = root.spawn(2)
    model = af.FusionModel(cfg, model_seed)
    rng = np.random.default_rng(data_seed)
    windows = [Tensor(rng.standard_normal((2, 5, d))) for d in cfg.modality_dims]
    labels = np.array([0, 1])

    def loss_fn():
        return trainer.weighted_scene_ce(af.forward_scene(model, windows), labels)

    return model.params, loss_fn


def _tiny_act_setup(seed: int):
    shot_cfg = af.ModelConfig(
        seq_len=5, align_len=2, width=8, ffn_width=16,
        unimodal_depth=1, fusion_depth=1, dropout=0.0,
        num_classes=5, modality_dims=(3, 2),
    )
    synopsis_cfg = af.ModelConfig(
        seq_len=3, align_len=2, width=16, ffn_width=16,
        unimodal_depth=1, fusion_depth=0, dropout=0.0,
        num_classes=5, modality_dims=(5,),
    )
    root = np.random.SeedSequence(seed)
    model_seed, data_seed = root.spawn(2)
    pipeline = trainer.build_act_pipeline(shot_cfg, synopsis_cfg, 6, model_seed)
    rng = np.random.default_rng(data_seed)
    shots = [rng.standard_normal((5, d)) for d in shot_cfg.modality_dims]
    synopsis = rng.standard_normal((3, 5))
    # the proportional diagonal keeps every shot and sentence inside the
    # band with at least one positive, so no query is skipped
    band = sync.band_mask(5, 3)
    w = np.zeros((5, 3))
    for i in range(5):
        w[i, (i * 3) // 5] = 1.0
    assert (w[band].sum() == 5) and not w[~band].any()
    tp_labels = [[0], [0], [1], [2], [2]]
    return pipeline, shots, synopsis, w, band, tp_labels


def _act_losses(pipeline, shots, synopsis, w, band, tp_labels):
    head = pipeline.sync_head
    rows = af.encode_sequence(pipeline.shot_model, shots)
    syn_rows = af.encode_sequence(pipeline.synopsis_model, [synopsis])
    u = head.features(rows)
    v = head.features(syn_rows)
    l_c = sync.m_step_loss([(u, v, w, band)], head.tau())
    q = af.apply_head(pipeline.synopsis_model, syn_rows)
    l_ce = distill.synopsis_ce_loss(q, tp_labels)
    attn = distill.attention_weights(u, v, head.tau())
    targets = distill.transfer_targets(attn, q)
    shot_logits = af.apply_head(pipeline.shot_model, rows)
    l_kd = distill.kd_loss(distill.shot_distribution(shot_logits), targets)
    return l_c, l_ce, l_kd


def _noise_gate(loss_scale: float, h: float) -> float:
    """Gradient magnitude below which central differences only measure
    the rounding noise of the loss evaluations (~eps*|f|/h), with a wide
    safety factor. Entries where both sides sit under the gate are
    structural zeros (e.g. attention key biases, which softmax cancels)
    and carry no comparable signal."""
    return 64.0 * np.finfo(np.float64).eps * max(1.0, abs(loss_scale)) / h


def _gated_rel_error(auto: np.ndarray, fd: np.ndarray, gate: float) -> float:
    live = (np.abs(auto) >= gate) | (np.abs(fd) >= gate)
    if not live.any():
        return 0.0
    return nc.max_rel_error(auto[live], fd[live])


def _autodiff_grads(params: dict, loss) -> dict:
    grads = {
        name: p.grad.copy() if p.grad is not None else np.zeros_like(p.data)
        for name, p in params.items()
    }
    nc.zero_grads(params.values())
    return grads, float(loss.data)


def _summarize(name: str, params: dict, errors: dict, tolerance: float) -> dict:
    worst_err, worst_param = 0.0, ""
    for pname, err in errors.items():
        if err > worst_err:
            worst_err, worst_param = err, pname
    return {
        "check": name,
        "parameters": len(params),
        "max_rel_error": worst_err,
        "worst_parameter": worst_param,
        "passed": worst_err < tolerance,
    }


def run_gradient_checks(seed: int = 0, h: float = 1e-5, tolerance: float = GRADCHECK_TOLERANCE):
    """Autodiff-vs-finite-difference checks for the three training losses
    on the tiny two-modality config; one result dict per loss."""
    params, loss_fn = _tiny_scene_setup(seed)
    with nc.Tape() as tape:
        loss = loss_fn()
    nc.backward(tape, loss)
    scene_grads, scene_scale = _autodiff_grads(params, loss)
    gate = _noise_gate(scene_scale, h)
    errors = {}
    for pname, p in params.items():
        fd = nc.fd_gradient(lambda: float(loss_fn().data), p, h)
        errors[pname] = _gated_rel_error(scene_grads[pname], fd, gate)
    results = [_summarize("scene_weighted_ce", params, errors, tolerance)]

    # the combined loss reuses the contrastive term, so one forward per
    # perturbation serves both finite-difference checks
    pipeline, shots, synopsis, w, band, tp_labels = _tiny_act_setup(seed)
    params = pipeline.named_params()

    def both_losses():
        l_c, l_ce, l_kd = _act_losses(pipeline, shots, synopsis, w, band, tp_labels)
        return l_c, distill.total_loss(l_c, l_ce, l_kd, distill.DEFAULT_LOSS_WEIGHTS)

    with nc.Tape() as tape:
        l_c, _ = both_losses()
    nc.backward(tape, l_c)
    contrastive_grads, c_scale = _autodiff_grads(params, l_c)
    with nc.Tape() as tape:
        _, total = both_losses()
    nc.backward(tape, total)
    combined_grads, t_scale = _autodiff_grads(params, total)

    c_gate = _noise_gate(c_scale, h)
    t_gate = _noise_gate(t_scale, h)
    c_errors, t_errors = {}, {}
    for pname, p in params.items():
        flat = p.data.reshape(-1)
        fd_c = np.zeros(flat.size)
        fd_t = np.zeros(flat.size)
        for i in range(flat.size):
            original = flat[i]
            flat[i] = original + h
            up_c, up_t = both_losses()
            flat[i] = original - h
            dn_c, dn_t = both_losses()
            flat[i] = original
            fd_c[i] = (float(up_c.data) - float(dn_c.data)) / (2.0 * h)
            fd_t[i] = (float(up_t.data) - float(dn_t.data)) / (2.0 * h)
        c_errors[pname] = _gated_rel_error(
            contrastive_grads[pname].reshape(-1), fd_c, c_gate
        )
        t_errors[pname] = _gated_rel_error(
            combined_grads[pname].reshape(-1), fd_t, t_gate
        )
    results.append(_summarize("contrastive", params, c_errors, tolerance))
    results.append(_summarize("combined", params, t_errors, tolerance))
    return results


def cmd_gradcheck(args) -> int:
    cfg_map = resolve_config(GRADCHECK_KEYS, args.config, args.set)
    results = run_gradient_checks(args.seed, cfg_map["h"], cfg_map["tolerance"])
    out = _run_dir(args)
    _write_config(out, "gradcheck", args.seed, cfg_map)
    _write_json(out / "gradcheck.json", results)
    header = f"{'check':<20} {'params':>6} {'max_rel_error':>14} {'worst':<24} status"
    print(header)
    for r in results:
        print(
            f"{r['check']:<20} {r['parameters']:>6} {r['max_rel_error']:>14.3e} "
            f"{r['worst_parameter']:<24} {'pass' if r['passed'] else 'FAIL'}"
        )
    if all(r["passed"] for r in results):
        print(f"all checks passed (tolerance {cfg_map['tolerance']:g})")
        return 0
    print(f"gradient check FAILED (tolerance {cfg_map['tolerance']:g})")
    return 4


# ---- modality importance ----


def cmd_importance(args) -> int:
    cfg_map = resolve_config(IMPORTANCE_KEYS, args.config, args.set)
    kind, _, _, _ = af.load_checkpoint(args.checkpoint)
    movies = dataio.load_dataset(Path(args.data))
    out = _run_dir(args)
    entries = []
    if kind == "scene":
        model, _ = trainer.load_scene_checkpoint(args.checkpoint)
        half = model.config.seq_len // 2
        for movie in movies:
            t = cfg_map["shot"] if cfg_map["shot"] >= 0 else movie.num_shots // 2
            if not 0 <= t < movie.num_shots:
                raise DataError(
                    f"shot {t} outside movie {movie.movie_id} ({movie.num_shots} shots)"
                )
            idx = trainer._reflect_indices(t, half, movie.num_shots)
            feats = [Tensor(s.samples[idx]) for s in movie.streams]
            weights, fallback = mx.gradcam_importance(model, feats, "scene")
            entries.append((movie, t, weights, fallback))
    elif kind == "act":
        pipeline, _ = trainer.load_act_checkpoint(args.checkpoint)
        model = pipeline.shot_model
        for movie in movies:
            feats, _ = trainer.movie_inputs(movie)
            weights, fallback = mx.gradcam_importance(
                model, [Tensor(f) for f in feats], "act"
            )
            entries.append((movie, None, weights, fallback))
    else:
        raise DataError(f"cannot analyze a {kind!r} checkpoint")
    payload = []
    for movie, t, weights, fallback in entries:
        record = {
            "movie_id": movie.movie_id,
            "task": kind,
            "weights": {
                s.name: float(w) for s, w in zip(movie.streams, weights)
            },
            "uniform_fallback": fallback,
        }
        if t is not None:
            record["shot"] = t
        payload.append(record)
    _write_config(out, "importance", args.seed, cfg_map)
    _write_json(out / "importance.json", payload)
    _print_json(payload)
    return 0


# ---- argument parsing ----


def _add_common(sub, with_data=False, with_checkpoint=False):
    sub.add_argument("--config", help="key=value config file")
    sub.add_argument("--seed", type=int, default=0, help="root seed (default 0)")
    sub.add_argument("--out", help="output directory (default: runs/<command>-<time>)")
    sub.add_argument(
        "--set", action="append", metavar="KEY=VALUE",
        help="override one config key (repeatable)",
    )
    if with_data:
        sub.add_argument("--data", required=True, help="dataset directory of movie manifests")
    if with_checkpoint:
        sub.add_argument("--checkpoint", required=True, help="checkpoint file")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cineseg",
        description="Scene and act segmentation experiments on synthetic movies.",
    )
    subs = parser.add_subparsers(dest="command", required=True)

    p = subs.add_parser("synth", help="generate a synthetic movie dataset")
    _add_common(p)
    p.add_argument("--movies", type=int, help="number of movies")
    p.add_argument("--shots", type=int, help="shots per movie")
    p.set_defaults(func=cmd_synth)

    p = subs.add_parser("train-scene", help="train the scene boundary model")
    _add_common(p, with_data=True)
    p.set_defaults(func=cmd_train_scene)

    p = subs.add_parser("train-act", help="train the act pipeline")
    _add_common(p, with_data=True)
    p.set_defaults(func=cmd_train_act)

    p = subs.add_parser("sync", help="export shot-sentence assignments")
    _add_common(p, with_data=True, with_checkpoint=True)
    p.add_argument("--pgm", action="store_true", help="also write graymap images")
    p.set_defaults(func=cmd_sync)

    p = subs.add_parser("eval", help="evaluate a checkpoint on a dataset")
    _add_common(p, with_data=True, with_checkpoint=True)
    p.set_defaults(func=cmd_eval)

    p = subs.add_parser("gradcheck", help="finite-difference gradient verification")
    _add_common(p)
    p.set_defaults(func=cmd_gradcheck)

    p = subs.add_parser("importance", help="per-modality importance weights")
    _add_common(p, with_data=True, with_checkpoint=True)
    p.set_defaults(func=cmd_importance)

    return parser


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    except (NumericError, ContractError) as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return 4
    except OSError as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return 5


if __name__ == "__main__":
    sys.exit(main())
