import numpy as np
import numpy.testing as npt
import pytest

import cineseg.alignfuse as af
import cineseg.numcore as nc
from cineseg.errors import BlobIOError, ConfigError, DataError


def tiny_cfg(**kw):
    base = dict(
        seq_len=5,
        align_len=2,
        width=8,
        ffn_width=16,
        unimodal_depth=1,
        fusion_depth=1,
        dropout=0.0,
        num_classes=2,
        modality_dims=(3, 4),
    )
    base.update(kw)
    return af.ModelConfig(**base)


def rand_inputs(rng, cfg, batch=2, length=None):
    length = length or cfg.seq_len
    return [rng.normal(size=(batch, length, d)) for d in cfg.modality_dims]


# ---- alignment buckets ----


def test_align_index_17_shot_window():
    assert af.align_index(8, 17, 2) == 0
    assert af.align_index(9, 17, 2) == 1


def test_align_buckets_15_into_3():
    npt.assert_array_equal(af.align_buckets(15, 3), [0] * 5 + [1] * 5 + [2] * 5)


def test_align_index_synopsis_scale():
    assert af.align_index(20, 40, 20) == 10


def test_align_buckets_balanced_and_monotone():
    rng = np.random.default_rng(0)
    for _ in range(50):
        seq_len = int(rng.integers(1, 60))
        align_len = int(rng.integers(1, seq_len + 1))
        buckets = af.align_buckets(seq_len, align_len)
        assert buckets.min() >= 0 and buckets.max() < align_len
        assert (np.diff(buckets) >= 0).all()
        counts = np.bincount(buckets, minlength=align_len)
        assert counts.max() - counts.min() <= 1


# ---- config and init ----


def test_config_validation():
    with pytest.raises(ConfigError):
        tiny_cfg(num_classes=3).validate()
    with pytest.raises(ConfigError):
        tiny_cfg(align_len=6).validate()  # more buckets than positions
    with pytest.raises(ConfigError):
        tiny_cfg(dropout=1.0).validate()
    with pytest.raises(ConfigError):
        tiny_cfg(num_heads=3).validate()  # does not divide width
    with pytest.raises(ConfigError):
        tiny_cfg(modality_dims=()).validate()


def test_init_distributions():
    model = af.FusionModel(tiny_cfg(), seed=0)
    npt.assert_array_equal(model["mod0.embed_ln.g"].data, np.ones(8))
    npt.assert_array_equal(model["mod0.embed_ln.b"].data, np.zeros(8))
    npt.assert_array_equal(model["head.b"].data, np.zeros(2))
    assert abs(model["align_pe"].data.std() - 0.02) < 0.02
    assert np.abs(model["mod0.proj.w"].data).max() <= np.sqrt(6.0 / (3 + 8))
    assert np.abs(model["mod0.uni0.ffn.drop.w"].data).max() <= np.sqrt(6.0 / (16 + 8))


def test_same_seed_same_params():
    a = af.FusionModel(tiny_cfg(), seed=5)
    b = af.FusionModel(tiny_cfg(), seed=5)
    for name in a.params:
        assert a.params[name].data.tobytes() == b.params[name].data.tobytes()


# ---- forward structure ----


def test_scene_forward_shapes():
    rng = np.random.default_rng(1)
    cfg = tiny_cfg()
    model = af.FusionModel(cfg, seed=1)
    logits = af.forward_scene(model, rand_inputs(rng, cfg, batch=4))
    assert logits.shape == (4, 2)


def test_fusion_sequence_length_and_fused_width():
    rng = np.random.default_rng(2)
    cfg = tiny_cfg(
        seq_len=17, align_len=2, modality_dims=(3, 4, 5), num_classes=5, dropout=0.0
    )
    model = af.FusionModel(cfg, seed=2)
    collect = {}
    feats = [rng.normal(size=(17, d)) for d in cfg.modality_dims]
    af.forward_act(model, feats, collect=collect)
    assert collect["fusion_seq_lens"] == [3 * 2 + 17] * 3
    fused = collect["fused"]
    assert fused.shape == (1, 17, 3 * cfg.width)


def test_single_modality_fusion_degenerates():
    rng = np.random.default_rng(3)
    cfg = tiny_cfg(modality_dims=(6,), num_classes=5)
    model = af.FusionModel(cfg, seed=3)
    collect = {}
    logits = af.forward_synopsis(model, rng.normal(size=(5, 6)), collect=collect)
    assert logits.shape == (5, 5)
    assert collect["fusion_seq_lens"] == [2 + 5]
    assert collect["fused"].shape == (1, 5, cfg.width)


def test_shorter_inputs_use_leading_positions():
    rng = np.random.default_rng(4)
    cfg = tiny_cfg(seq_len=12, align_len=3, modality_dims=(6,), num_classes=5)
    model = af.FusionModel(cfg, seed=4)
    logits = af.forward_act(model, [rng.normal(size=(7, 6))])
    assert logits.shape == (7, 5)
    with pytest.raises(DataError):
        af.forward_act(model, [rng.normal(size=(13, 6))])


def test_input_length_shorter_than_align_len_still_buckets():
    # a 12-sentence synopsis under a 20-bucket alignment table
    buckets = af.align_buckets(12, 20)
    assert buckets.min() == 0 and buckets.max() < 20
    assert (np.diff(buckets) >= 0).all()


def test_embed_ablation_changes_exactly_the_alignment_addend():
    rng = np.random.default_rng(5)
    cfg = tiny_cfg()
    model_on = af.FusionModel(cfg, seed=7)
    model_off = af.FusionModel(tiny_cfg(align_pe_embed=False), seed=7)
    feats = rng.normal(size=(2, 5, 3))
    on, off = {}, {}
    af.embed_modality(model_on, feats, 0, collect=on)
    af.embed_modality(model_off, feats, 0, collect=off)
    addend = model_on["align_pe"].data[af.align_buckets(5, 2)]
    npt.assert_allclose(
        on["embed_pre_norm"][0].data - off["embed_pre_norm"][0].data,
        np.broadcast_to(addend, (2, 5, 8)),
        atol=1e-12,
    )


def test_bottleneck_tokens_with_zeroed_alignment_table():
    model = af.FusionModel(tiny_cfg(), seed=8)
    model["align_pe"].data[:] = 0.0
    prepared = af.make_bottleneck(model, 1)
    npt.assert_allclose(prepared.data, model["mod1.tokens"].data, atol=1e-15)


def test_alignment_table_is_shared():
    model = af.FusionModel(tiny_cfg(), seed=9)
    rng = np.random.default_rng(9)
    with nc.Tape() as tape:
        logits = af.forward_scene(model, rand_inputs(rng, model.config))
        loss = nc.sum_all(logits)
    nc.backward(tape, loss)
    # one table feeds both modality embeddings and both token sets
    assert model["align_pe"].grad is not None
    assert np.abs(model["align_pe"].grad).max() > 0


def test_permutation_equivariance_without_positions():
    rng = np.random.default_rng(10)
    cfg = tiny_cfg(seq_len=6, modality_dims=(4, 3), num_classes=5)
    model = af.FusionModel(cfg, seed=10)
    model["align_pe"].data[:] = 0.0
    for m in range(2):
        model[f"mod{m}.pe"].data[:] = 0.0
    feats = [rng.normal(size=(6, d)) for d in cfg.modality_dims]
    perm = rng.permutation(6)
    base = af.forward_act(model, feats).data
    permuted = af.forward_act(model, [f[perm] for f in feats]).data
    npt.assert_allclose(permuted, base[perm], atol=1e-10)


def test_dropout_train_vs_eval():
    rng = np.random.default_rng(11)
    cfg = tiny_cfg(dropout=0.5)
    model = af.FusionModel(cfg, seed=11)
    feats = rand_inputs(rng, cfg)
    eval_a = af.forward_scene(model, feats).data
    eval_b = af.forward_scene(model, feats).data
    npt.assert_array_equal(eval_a, eval_b)
    train = af.forward_scene(model, feats, rng=np.random.default_rng(0)).data
    assert np.abs(train - eval_a).max() > 1e-8


def test_scene_window_length_enforced():
    rng = np.random.default_rng(12)
    cfg = tiny_cfg()
    model = af.FusionModel(cfg, seed=12)
    with pytest.raises(DataError):
        af.forward_scene(model, rand_inputs(rng, cfg, length=4))
    with pytest.raises(ConfigError):
        af.forward_scene(
            af.FusionModel(tiny_cfg(seq_len=4, align_len=2), seed=0),
            rand_inputs(rng, tiny_cfg(seq_len=4, align_len=2)),
        )


def test_gradients_flow_to_every_group():
    rng = np.random.default_rng(13)
    cfg = tiny_cfg()
    model = af.FusionModel(cfg, seed=13)
    r = rng.normal(size=(2, 2))
    with nc.Tape() as tape:
        logits = af.forward_scene(model, rand_inputs(rng, cfg))
        loss = nc.sum_all(nc.mul(logits, r))
    nc.backward(tape, loss)
    for name, p in model.params.items():
        assert p.grad is not None, f"no gradient reached {name}"


def test_model_gradients_match_finite_differences_smoke():
    rng = np.random.default_rng(14)
    cfg = tiny_cfg()
    model = af.FusionModel(cfg, seed=14)
    feats = rand_inputs(rng, cfg)
    r = rng.normal(size=(2, 2))

    def make_loss():
        return nc.sum_all(nc.mul(af.forward_scene(model, feats), r))

    with nc.Tape() as tape:
        loss = make_loss()
    nc.backward(tape, loss)
    for name in ("align_pe", "mod0.tokens", "mod1.proj.w", "head.w",
                 "mod0.uni0.attn.q.w", "mod1.fus0.ffn.lift.w", "mod0.embed_ln.g"):
        p = model[name]
        fd = nc.fd_gradient(lambda: float(make_loss().data), p)
        err = nc.max_rel_error(p.grad, fd)
        assert err < 1e-4, f"{name}: rel err {err:.2e}"


def test_unimodal_depth_zero_passes_through():
    rng = np.random.default_rng(15)
    cfg = tiny_cfg(unimodal_depth=0, fusion_depth=0, modality_dims=(4,), num_classes=5)
    model = af.FusionModel(cfg, seed=15)
    logits = af.forward_act(model, [rng.normal(size=(5, 4))])
    assert logits.shape == (5, 5)


# ---- checkpoints ----


def test_checkpoint_round_trip_bit_exact(tmp_path):
    cfg = tiny_cfg()
    model = af.FusionModel(cfg, seed=16)
    path = tmp_path / "model.ckpt"
    af.save_checkpoint(path, "scene", {"model": cfg}, model.params, extra={"seed": 16})
    kind, configs, arrays, extra = af.load_checkpoint(path)
    assert kind == "scene" and extra == {"seed": 16}
    rebuilt = af.FusionModel(configs["model"], seed=0)
    rebuilt.load_state(arrays)
    for name in model.params:
        assert rebuilt[name].data.tobytes() == model[name].data.tobytes()
    # a second save of the loaded state reproduces the file byte for byte
    path2 = tmp_path / "again.ckpt"
    af.save_checkpoint(path2, "scene", {"model": cfg}, rebuilt.params, extra={"seed": 16})
    assert path.read_bytes() == path2.read_bytes()


def test_checkpoint_errors(tmp_path):
    cfg = tiny_cfg()
    model = af.FusionModel(cfg, seed=17)
    path = tmp_path / "model.ckpt"
    af.save_checkpoint(path, "scene", {"model": cfg}, model.params)
    with pytest.raises(BlobIOError):
        af.load_checkpoint(tmp_path / "nope.ckpt")
    data = path.read_bytes()
    (tmp_path / "cut.ckpt").write_bytes(data[:-16])
    with pytest.raises(BlobIOError) as exc:
        af.load_checkpoint(tmp_path / "cut.ckpt")
    assert "bytes" in str(exc.value)
    (tmp_path / "junk.ckpt").write_bytes(b"\x00\x01binary\n" + data)
    with pytest.raises(DataError):
        af.load_checkpoint(tmp_path / "junk.ckpt")


def test_load_state_rejects_mismatches():
    model = af.FusionModel(tiny_cfg(), seed=18)
    arrays = {k: v.data for k, v in model.params.items()}
    bad = dict(arrays)
    bad.pop("head.w")
    with pytest.raises(DataError):
        model.load_state(bad)
    bad2 = dict(arrays)
    bad2["head.w"] = np.zeros((1, 1))
    with pytest.raises(DataError):
        model.load_state(bad2)
