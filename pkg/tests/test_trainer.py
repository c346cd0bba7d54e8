"""Trainer tests: optimizer update rules, the class-weighted boundary
loss, window plumbing, and both training loops end to end at desk scale."""

import copy
import logging

import numpy as np
import pytest

from cineseg import alignfuse as af
from cineseg import numcore as nc
from cineseg import trainer
from cineseg.dataio import SynthConfig, make_dataset
from cineseg.errors import ConfigError, DataError, NumericError
from cineseg.numcore import Tensor


# ---- optimizer ----


def test_sgd_step_hand_case():
    p = Tensor(np.array(1.0), requires_grad=True)
    p.grad = np.array(1.0)
    trainer.Optimizer({"p": p}, kind="sgd", lr=0.1).step()
    assert float(p.data) == pytest.approx(0.9, abs=1e-15)


def test_adam_first_step_magnitude_is_lr():
    p = Tensor(np.array([1.0, -2.0]), requires_grad=True)
    p.grad = np.array([0.5, -3.0])
    trainer.Optimizer({"p": p}, kind="adam", lr=0.01).step()
    # bias-corrected first step moves by lr in the gradient sign direction
    assert p.data == pytest.approx([1.0 - 0.01, -2.0 + 0.01], abs=1e-6)


def test_zero_gradient_is_noop():
    for kind in ("sgd", "adam"):
        p = Tensor(np.array([3.0, 4.0]), requires_grad=True)
        p.grad = np.zeros(2)
        trainer.Optimizer({"p": p}, kind=kind, lr=0.5).step()
        assert np.array_equal(p.data, [3.0, 4.0])


def test_missing_gradient_is_skipped():
    p = Tensor(np.array(2.0), requires_grad=True)
    opt = trainer.Optimizer({"p": p}, kind="adam", lr=0.1)
    opt.step()
    assert float(p.data) == 2.0


def test_nonfinite_gradient_names_parameter():
    p = Tensor(np.array(1.0), requires_grad=True)
    p.grad = np.array(np.nan)
    opt = trainer.Optimizer({"encoder.w": p}, kind="sgd", lr=0.1)
    with pytest.raises(NumericError, match="encoder.w"):
        opt.step()


def test_optimizer_config_guards():
    p = Tensor(np.array(1.0), requires_grad=True)
    with pytest.raises(ConfigError):
        trainer.Optimizer({"p": p}, kind="rmsprop", lr=0.1)
    with pytest.raises(ConfigError):
        trainer.Optimizer({"p": p}, kind="sgd", lr=0.0)


def test_adam_descends_a_quadratic():
    p = Tensor(np.array([5.0, -3.0]), requires_grad=True)
    opt = trainer.Optimizer({"p": p}, kind="adam", lr=0.2)
    for _ in range(100):
        opt.zero_grad()
        p.grad = 2.0 * p.data
        opt.step()
    assert np.abs(p.data).max() < 0.5


def test_zero_grad_clears():
    p = Tensor(np.array(1.0), requires_grad=True)
    p.grad = np.array(2.0)
    opt = trainer.Optimizer({"p": p}, kind="sgd", lr=0.1)
    opt.zero_grad()
    assert p.grad is None


# ---- weighted scene cross-entropy ----


def unweighted_ce(logits, labels):
    shifted = logits - logits.max(axis=1, keepdims=True)
    logp = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    return -logp[np.arange(len(labels)), labels].mean()


def test_weighted_ce_uniform_logits_is_log2():
    logits = Tensor(np.zeros((3, 2)))
    loss = trainer.weighted_scene_ce(logits, [0, 0, 1])
    assert float(loss.data) == pytest.approx(np.log(2.0), abs=1e-12)


def test_weighted_ce_balanced_batch_equals_unweighted():
    rng = np.random.default_rng(0)
    logits = rng.standard_normal((6, 2))
    labels = np.array([0, 1, 0, 1, 0, 1])
    loss = trainer.weighted_scene_ce(Tensor(logits), labels)
    assert float(loss.data) == pytest.approx(unweighted_ce(logits, labels), abs=1e-12)


def test_weighted_ce_imbalanced_weights():
    # 1 positive among 10: class weights 10/(2*1)=5 and 10/(2*9)=5/9, so the
    # weighted mean puts half its mass on the positive example
    rng = np.random.default_rng(1)
    logits = rng.standard_normal((10, 2))
    labels = np.zeros(10, dtype=int)
    labels[3] = 1
    shifted = logits - logits.max(axis=1, keepdims=True)
    logp = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    per_example = -logp[np.arange(10), labels]
    expected = 0.5 * per_example[3] + (0.5 / 9.0) * np.delete(per_example, 3).sum()
    loss = trainer.weighted_scene_ce(Tensor(logits), labels)
    assert float(loss.data) == pytest.approx(expected, abs=1e-12)


def test_weighted_ce_single_class_warns_and_is_unweighted(caplog):
    rng = np.random.default_rng(2)
    logits = rng.standard_normal((4, 2))
    labels = np.zeros(4, dtype=int)
    with caplog.at_level(logging.WARNING, logger="cineseg.trainer"):
        loss = trainer.weighted_scene_ce(Tensor(logits), labels)
    assert any("single-class" in rec.message for rec in caplog.records)
    assert float(loss.data) == pytest.approx(unweighted_ce(logits, labels), abs=1e-12)


def test_weighted_ce_guards():
    with pytest.raises(DataError):
        trainer.weighted_scene_ce(Tensor(np.zeros((0, 2))), [])
    with pytest.raises(DataError):
        trainer.weighted_scene_ce(Tensor(np.zeros((2, 2))), [0, 2])
    with pytest.raises(DataError):
        trainer.weighted_scene_ce(Tensor(np.zeros((2, 3))), [0, 1])


def test_weighted_ce_gradient_matches_finite_differences():
    rng = np.random.default_rng(3)
    logits = Tensor(rng.standard_normal((5, 2)), requires_grad=True)
    labels = np.array([0, 1, 0, 0, 1])

    def run():
        return trainer.weighted_scene_ce(logits, labels)

    with nc.Tape() as tape:
        loss = run()
    nc.backward(tape, loss)
    fd = nc.fd_gradient(lambda: float(run().data), logits)
    assert nc.max_rel_error(logits.grad, fd) < 1e-6


# ---- windows ----


def test_reflect_indices_center():
    assert trainer._reflect_indices(5, 2, 10).tolist() == [3, 4, 5, 6, 7]


def test_reflect_indices_left_edge():
    assert trainer._reflect_indices(0, 2, 10).tolist() == [2, 1, 0, 1, 2]


def test_reflect_indices_right_edge():
    assert trainer._reflect_indices(9, 2, 10).tolist() == [7, 8, 9, 8, 7]


def test_training_windows_skip_movie_edges():
    movies = make_dataset(scene_synth(shots=12), movies=2, seed=0)
    pairs = trainer.scene_training_windows(movies, 5)
    keys = {(mi, t) for mi, t in pairs}
    assert all(2 <= t <= 9 for _, t in keys)
    assert len(keys) == 2 * 8


def test_training_windows_need_odd_length():
    with pytest.raises(ConfigError):
        trainer.scene_training_windows([], 4)


# ---- scene training ----


def scene_synth(shots=30, noise=0.1):
    return SynthConfig(
        shots=shots,
        scenes=4,
        sentences=2,
        modalities=(("visual", 6), ("audio", 4)),
        latent_dim=8,
        noise=noise,
    )


def scene_model_cfg():
    return af.ModelConfig(
        seq_len=5, align_len=2, width=8, ffn_width=16,
        unimodal_depth=1, fusion_depth=1, dropout=0.0,
        num_classes=2, modality_dims=(6, 4),
    )


def scene_train_cfg(**overrides):
    base = dict(task="scene", epochs=2, batch_size=32, optimizer="adam",
                lr=1e-3, seed=11, holdout=2)
    base.update(overrides)
    return trainer.TrainConfig(**base)


def test_train_scene_shapes_and_logs():
    movies = make_dataset(scene_synth(), movies=4, seed=1)
    model, reports, logs = trainer.train_scene(movies, scene_model_cfg(), scene_train_cfg())
    assert len(reports) == 3  # pre-training report plus one per epoch
    assert reports[0].values["epoch"] == 0.0
    for report in reports:
        assert 0.0 <= report.values["ap"] <= 1.0
        assert trainer.MIRROR_EVAL_FLAG in report.flags
        assert "ap_macro" in report.values
    # 2 train movies, 26 interior windows each, batch 32 -> 2 steps per epoch
    assert [rec["step"] for rec in logs] == [1, 2, 3, 4]
    assert all(np.isfinite(rec["losses"]["scene_ce"]) for rec in logs)
    assert all(rec["seed"] == 11 for rec in logs)


def test_train_scene_deterministic():
    movies = make_dataset(scene_synth(), movies=4, seed=2)
    runs = [
        trainer.train_scene(movies, scene_model_cfg(), scene_train_cfg())
        for _ in range(2)
    ]
    for name in runs[0][0].params:
        assert np.array_equal(runs[0][0].params[name].data, runs[1][0].params[name].data)
    assert [r.values for r in runs[0][1]] == [r.values for r in runs[1][1]]
    assert runs[0][2] == runs[1][2]


def test_train_scene_does_not_mutate_dataset():
    movies = make_dataset(scene_synth(), movies=4, seed=3)
    before = copy.deepcopy(
        [(m.streams[0].samples.copy(), m.scene_labels.copy()) for m in movies]
    )
    trainer.train_scene(movies, scene_model_cfg(), scene_train_cfg(epochs=1))
    for movie, (samples, labels) in zip(movies, before):
        assert np.array_equal(movie.streams[0].samples, samples)
        assert np.array_equal(movie.scene_labels, labels)


def test_train_scene_logged_loss_matches_recomputation():
    movies = make_dataset(scene_synth(), movies=4, seed=4)
    cfg = scene_train_cfg(epochs=1, batch_size=16)
    model_cfg = scene_model_cfg()
    _, _, logs = trainer.train_scene(movies, model_cfg, cfg)

    shuffle_seed, dropout_seed, model_seed = np.random.SeedSequence(cfg.seed).spawn(3)
    model = af.FusionModel(model_cfg, model_seed)
    train_movies = movies[:-cfg.holdout]
    pairs = trainer.scene_training_windows(train_movies, model_cfg.seq_len)
    order = np.random.default_rng(shuffle_seed).permutation(len(pairs))
    chosen = [pairs[i] for i in order[:cfg.batch_size]]
    feats, labels = trainer._window_batch(train_movies, chosen, model_cfg.seq_len)
    logits = af.forward_scene(model, [Tensor(f) for f in feats])
    loss = trainer.weighted_scene_ce(logits, labels)
    assert float(loss.data) == pytest.approx(logs[0]["losses"]["scene_ce"], abs=1e-9)


def test_train_scene_needs_spare_movies():
    movies = make_dataset(scene_synth(), movies=2, seed=5)
    with pytest.raises(ConfigError):
        trainer.train_scene(movies, scene_model_cfg(), scene_train_cfg())


def test_scene_scores_cover_every_shot():
    movies = make_dataset(scene_synth(), movies=1, seed=6)
    model = af.FusionModel(scene_model_cfg(), seed=0)
    scores = trainer.scene_shot_scores(model, movies[0])
    assert scores.shape == (movies[0].num_shots,)
    assert np.isfinite(scores).all()
    assert np.array_equal(scores, trainer.scene_shot_scores(model, movies[0]))


def test_scene_scores_reject_too_short_movie():
    movies = make_dataset(scene_synth(shots=12), movies=1, seed=7)
    cfg = af.ModelConfig(
        seq_len=25, align_len=2, width=8, ffn_width=16,
        unimodal_depth=0, fusion_depth=0, dropout=0.0,
        num_classes=2, modality_dims=(6, 4),
    )
    model = af.FusionModel(cfg, seed=0)
    with pytest.raises(DataError):
        trainer.scene_shot_scores(model, movies[0])


# ---- act training ----


def act_synth(noise=0.0):
    return SynthConfig(
        shots=40,
        scenes=5,
        sentences=5,
        modalities=(("content", 12),),
        latent_dim=8,
        noise=noise,
        tp_jitter=0.0,
    )


def act_model_cfgs():
    shot = af.ModelConfig(
        seq_len=40, align_len=4, width=12, ffn_width=16,
        unimodal_depth=1, fusion_depth=0, dropout=0.0,
        num_classes=5, modality_dims=(12,),
    )
    synopsis = af.ModelConfig(
        seq_len=8, align_len=3, width=12, ffn_width=16,
        unimodal_depth=1, fusion_depth=0, dropout=0.0,
        num_classes=5, modality_dims=(12,),
    )
    return shot, synopsis


def act_train_cfg(**overrides):
    base = dict(task="act", epochs=2, batch_size=2, optimizer="sgd",
                lr=1e-3, seed=21, holdout=2, sync_dim=8,
                em_percentile=90.0)
    base.update(overrides)
    return trainer.TrainConfig(**base)


def test_build_act_pipeline_width_guard():
    shot, synopsis = act_model_cfgs()
    bad = af.ModelConfig(
        seq_len=8, align_len=3, width=10, ffn_width=16,
        unimodal_depth=1, fusion_depth=0, dropout=0.0,
        num_classes=5, modality_dims=(10,),
    )
    with pytest.raises(ConfigError):
        trainer.build_act_pipeline(shot, bad, 8, seed=0)


def test_train_act_shapes_logs_and_target_columns():
    movies = make_dataset(act_synth(), movies=5, seed=8)
    shot, synopsis = act_model_cfgs()
    pipeline, syncs, reports, logs = trainer.train_act(
        movies, shot, synopsis, act_train_cfg()
    )
    assert len(reports) == 3
    assert len(syncs) == 3  # one per training movie
    for record in logs:
        losses = record["losses"]
        assert set(losses) == {"contrastive", "synopsis_ce", "distillation", "total"}
        assert all(np.isfinite(v) for v in losses.values())
        expected = (
            losses["contrastive"] + losses["synopsis_ce"] + 10.0 * losses["distillation"]
        )
        assert losses["total"] == pytest.approx(expected, abs=1e-9)
    assert pipeline.max_p_col_dev <= 1e-12
    for report in reports:
        assert {"span_hit_rate", "ta", "pa", "d"} <= set(report.values)


def test_train_act_deterministic():
    movies = make_dataset(act_synth(), movies=5, seed=9)
    shot, synopsis = act_model_cfgs()
    runs = [
        trainer.train_act(movies, shot, synopsis, act_train_cfg()) for _ in range(2)
    ]
    params_a = runs[0][0].named_params()
    params_b = runs[1][0].named_params()
    for name in params_a:
        assert np.array_equal(params_a[name].data, params_b[name].data)
    assert runs[0][3] == runs[1][3]
    for sa, sb in zip(runs[0][1], runs[1][1]):
        assert np.array_equal(sa.w, sb.w)


def test_train_act_detached_kd_leaves_synopsis_model_alone():
    movies = make_dataset(act_synth(), movies=5, seed=10)
    shot, synopsis = act_model_cfgs()
    cfg = act_train_cfg(epochs=1, loss_weights=(0.0, 0.0, 1.0))
    pipeline, _, _, _ = trainer.train_act(movies, shot, synopsis, cfg)
    fresh = trainer.build_act_pipeline(
        shot, synopsis, cfg.sync_dim, np.random.SeedSequence(cfg.seed).spawn(3)[2]
    )
    for name, p in pipeline.synopsis_model.params.items():
        assert np.array_equal(p.data, fresh.synopsis_model.params[name].data), name
    changed = any(
        not np.array_equal(p.data, fresh.shot_model.params[name].data)
        for name, p in pipeline.shot_model.params.items()
    )
    assert changed


def test_train_act_joint_kd_reaches_synopsis_model():
    movies = make_dataset(act_synth(), movies=5, seed=10)
    shot, synopsis = act_model_cfgs()
    cfg = act_train_cfg(epochs=1, loss_weights=(0.0, 0.0, 1.0), kd_joint=True)
    pipeline, _, _, _ = trainer.train_act(movies, shot, synopsis, cfg)
    fresh = trainer.build_act_pipeline(
        shot, synopsis, cfg.sync_dim, np.random.SeedSequence(cfg.seed).spawn(3)[2]
    )
    changed = any(
        not np.array_equal(p.data, fresh.synopsis_model.params[name].data)
        for name, p in pipeline.synopsis_model.params.items()
    )
    assert changed


def test_act_checkpoint_round_trip(tmp_path):
    movies = make_dataset(act_synth(), movies=5, seed=12)
    shot, synopsis = act_model_cfgs()
    pipeline, _, _, _ = trainer.train_act(
        movies, shot, synopsis, act_train_cfg(epochs=1)
    )
    path = tmp_path / "act.ckpt"
    trainer.save_act_checkpoint(path, pipeline, epoch=1)
    loaded, extra = trainer.load_act_checkpoint(path)
    assert extra["epoch"] == 1
    for name, p in pipeline.named_params().items():
        assert np.array_equal(p.data, loaded.named_params()[name].data)


def test_scene_checkpoint_round_trip(tmp_path):
    model = af.FusionModel(scene_model_cfg(), seed=3)
    path = tmp_path / "scene.ckpt"
    trainer.save_scene_checkpoint(path, model, epoch=4)
    loaded, extra = trainer.load_scene_checkpoint(path)
    assert extra["epoch"] == 4
    for name, p in model.params.items():
        assert np.array_equal(p.data, loaded.params[name].data)
    with pytest.raises(DataError):
        trainer.load_act_checkpoint(path)


def test_movie_inputs_requires_synopsis():
    movies = make_dataset(act_synth(), movies=1, seed=13)
    movies[0].synopsis_features = None
    with pytest.raises(DataError):
        trainer.movie_inputs(movies[0])


def test_act_eval_structure():
    movies = make_dataset(act_synth(), movies=2, seed=14)
    shot, _ = act_model_cfgs()
    model = af.FusionModel(shot, seed=1)
    hits, total, events = trainer.act_eval(model, movies)
    assert total == 10
    assert 0 <= hits <= total
    assert len(events) == 10
    for predicted, gold, num_scenes in events:
        assert 0 <= predicted < num_scenes
        assert gold and all(0 <= g < num_scenes for g in gold)
