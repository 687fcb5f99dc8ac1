import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from avslowfast import functional as F
from avslowfast.model.config import (FUSION_STAGES, ConfigError, ModelConfig, channels, desk_config, preset,
                                     round_half_up, stage_table)
from avslowfast.model.network import (AudioToVisual, AVNonlocal, FastToSlow, build_model, fuse_slowfast)
from avslowfast.model.shapes import ShapeReport, ShapeRow, count_flops, count_params, infer_shapes
from avslowfast.nn import Init
from avslowfast.rng import stream
from avslowfast.tensor import Tensor, backward, no_grad

FULL = ModelConfig()
TABLE1 = {
    "slow": (64, 256, 512, 1024, 2048),
    "fast": (8, 32, 64, 128, 256),
    "audio": (32, 128, 256, 512, 1024),
}


def inputs(cfg, n=2, seed=0):
    rng = stream(seed, "model-inputs")
    return (Tensor(rng.standard_normal((n, 3, cfg.T, cfg.S, cfg.S))),
            Tensor(rng.standard_normal((n, 3, cfg.fast_frames, cfg.S, cfg.S))),
            Tensor(rng.standard_normal((n, 1, cfg.F_mel, cfg.T_a))))


# ---------------------------------------------------------------- configuration

def test_table1_widths_and_blocks():
    table = stage_table(FULL)
    for p, widths in TABLE1.items():
        assert tuple(s.get(p).out for s in table if s.name != "pool1") == widths
    assert [s.slow.blocks for s in table[2:]] == [3, 4, 6, 3]
    assert table[1].audio is None          # no pooling after the audio stem


def test_beta_a_half_gives_audio_res5_1024():
    res5 = stage_table(FULL)[-1]
    assert (res5.audio.out, res5.slow.out) == (1024, 2048)


def test_desk_widths_are_one_eighth_with_floor():
    cfg = desk_config()
    for spec in stage_table(cfg):
        for p, full in zip(("slow", "fast", "audio"), (spec.slow, spec.fast, spec.audio)):
            ref = {s.name: s for s in stage_table(FULL)}[spec.name].get(p)
            if full is not None:
                assert full.out == max(4, round_half_up(ref.out / 8))


def test_round_half_up_and_channel_floor():
    assert [round_half_up(x) for x in (0.5, 1.5, 2.5, 2.4999)] == [1, 2, 3, 2]
    assert channels(desk_config(), 8, 1 / 8) == 4


def test_temporal_kernels_per_pathway():
    table = stage_table(FULL)[2:]
    assert [s.slow.kernel[0] for s in table] == [1, 1, 3, 3]
    assert [s.fast.kernel[0] for s in table] == [3, 3, 3, 3]
    assert [s.audio.factorized for s in table] == [True, True, False, False]


def test_built_model_kernels():
    model = build_model(desk_config(), 0)
    assert model.stages["slow.res3"].blocks[0].a.kernel == (1, 1, 1)
    assert model.stages["slow.res4"].blocks[0].a.kernel == (3, 1, 1)
    assert model.stages["fast.res2"].blocks[0].a.kernel == (3, 1, 1)
    assert [c.kernel for c in model.stages["audio.res2"].blocks[0].b] == [(3, 1), (1, 3)]
    assert [c.kernel for c in model.stages["audio.res4"].blocks[0].b] == [(3, 3)]


@pytest.mark.parametrize("changes, key", [
    (dict(fusion_stages=("res5",)), "fusion_stages"),
    (dict(fusion_stages=("conv1",)), "fusion_stages"),
    (dict(alpha_f=1), "alpha_f"),
    (dict(alpha_a=2), "alpha_a"),
    (dict(beta_f=1.0), "beta_f"),
    (dict(beta_a=0.0), "beta_a"),
    (dict(T_a=36), "T_a"),
    (dict(fusion_kind="AtoX"), "fusion_kind"),
    (dict(avs_stages=("res2",)), "avs_stages"),
    (dict(pathways=("slow", "fast")), "fusion_stages"),
])
def test_invalid_configs_name_the_key(changes, key):
    with pytest.raises(ConfigError) as err:
        desk_config(**changes)
    assert err.value.key == key


def test_unknown_preset():
    with pytest.raises(ConfigError, match="preset"):
        preset("r101")


# ---------------------------------------------------------------- shapes

def test_table1_temporal_lengths():
    report = infer_shapes(FULL)
    assert FULL.raw_frames == 64
    for stage in ("conv1", "res2", "res3", "res4", "res5"):
        assert report.get(stage, "slow").t == 4
        assert report.get(stage, "fast").t == 32
    assert (report.get("conv1", "audio").h, report.get("conv1", "audio").t) == (80, 128)
    for stage, widths in zip(("conv1", "res2", "res3", "res4", "res5"), zip(*TABLE1.values())):
        assert tuple(report.get(stage, p).c for p in TABLE1) == widths


def test_four_stride_two_audio_stages_give_5_by_8():
    cfg = FULL.replace(audio_stage_strides=(2, 2, 2, 2))
    row = infer_shapes(cfg).get("res5", "audio")
    assert (row.h, row.t) == (80 // 16, 128 // 16) == (5, 8)


def test_default_audio_schedule_keeps_res2_resolution():
    report = infer_shapes(FULL)
    assert [(report.get(s, "audio").h, report.get(s, "audio").t)
            for s in ("res2", "res3", "res4", "res5")] == [(80, 128), (40, 64), (20, 32), (10, 16)]


def test_spatial_extents_full_scale():
    report = infer_shapes(FULL)
    assert [report.get(s, "slow").h for s in ("conv1", "pool1", "res2", "res3", "res4", "res5")] == \
        [112, 56, 56, 28, 14, 7]


def test_non_positive_extent_is_rejected_naming_the_stage():
    # padded convolutions keep every real config at extent >= 1, so feed a row directly
    with pytest.raises(ConfigError, match="res4"):
        ShapeReport().add(ShapeRow("res4", "audio", 0, 1, 1, 8))


def test_report_totals_are_row_sums():
    report = count_flops(FULL)
    assert report.total_flops == sum(r.flops for r in report.rows)
    assert report.total_params == sum(r.params for r in report.rows)
    assert report.total_flops == sum(report.pathway_flops(p) for p in {r.pathway for r in report.rows})


def test_csv_columns():
    lines = infer_shapes(desk_config()).to_csv().splitlines()
    assert lines[0] == "stage,pathway,t,h,w,c,flops,params"
    assert all(len(line.split(",")) == 8 for line in lines)


@pytest.mark.parametrize("kind", ["AtoFS", "AtoFtoS", "AVNonlocal"])
def test_forward_agrees_with_infer_shapes(kind):
    cfg = desk_config(fusion_kind=kind)
    model = build_model(cfg, 0)
    with no_grad():
        out = model(*inputs(cfg))
    report = infer_shapes(cfg)
    for (p, stage), feat in out.features.items():
        row = report.get(stage, p)
        if p == "audio":
            assert feat.shape == (2, row.c, row.h, row.t)
        else:
            assert feat.shape == (2, row.c, row.t, row.h, row.w)
    assert out.logits.shape == (2, cfg.num_classes)


# ---------------------------------------------------------------- FLOPs

def test_slowfast_only_flops():
    assert count_flops(preset("slowfast-r50-4x16")).gflops() == pytest.approx(36.1, rel=0.10)


@pytest.mark.parametrize("beta, paper", [(1 / 8, 36.0), (1 / 4, 36.8), (1 / 2, 39.8), (1, 51.9)])
def test_beta_a_flops(beta, paper):
    assert count_flops(FULL.replace(beta_a=beta)).gflops() == pytest.approx(paper, rel=0.10)


def test_flops_frozen_value():
    # multiply-add total of the default full-scale model at the 256 crop
    assert count_flops(FULL).total_flops == 39_264_669_696


@given(st.sets(st.sampled_from(FUSION_STAGES[:-1])), st.sampled_from(FUSION_STAGES[:-1]))
def test_adding_a_fusion_stage_never_decreases_flops(stages, extra):
    base = FULL.replace(fusion_stages=tuple(sorted(stages)) + ("pool5",))
    more = FULL.replace(fusion_stages=tuple(sorted(stages | {extra})) + ("pool5",))
    assert count_flops(more).total_flops >= count_flops(base).total_flops


# ---------------------------------------------------------------- parameters

def reference_params(cfg):
    """Independent count: walk the stage table layer by layer."""
    table = {s.name: s for s in stage_table(cfg)}
    bn = lambda c: 2 * c   # noqa: E731
    total = 0
    s1, f1, a1 = table["conv1"].slow, table["conv1"].fast, table["conv1"].audio
    total += 3 * s1.out * math.prod(s1.kernel) + bn(s1.out)
    total += 3 * f1.out * math.prod(f1.kernel) + bn(f1.out)
    total += a1.out * 9 + a1.out * a1.out * 9 + bn(a1.out)
    width = {"slow": s1.out, "fast": f1.out, "audio": a1.out}

    def lateral_fs():
        cf = width["fast"]
        width["slow"] += 2 * cf
        return cf * 2 * cf * 5 + bn(2 * cf)

    total += lateral_fs()
    for name in ("res2", "res3", "res4", "res5"):
        spec = table[name]
        for p in ("slow", "fast", "audio"):
            st_ = spec.get(p)
            for b in range(st_.blocks):
                ci = width[p] if b == 0 else st_.out
                if p == "audio":
                    centre = st_.inner ** 2 * (6 if st_.factorized else 9)
                else:
                    centre = st_.inner ** 2 * 9
                total += ci * st_.inner * (st_.kernel[0] if p != "audio" else 1) + centre
                total += st_.inner * st_.out + bn(st_.inner) * 2 + bn(st_.out)
                if b == 0 and (ci != st_.out or st_.stride[-1] > 1):
                    total += ci * st_.out + bn(st_.out)
            width[p] = st_.out
        if name in cfg.avs_stages:
            d = spec.slow.out + spec.fast.out + spec.audio.out
            total += bn(d) + d * spec.audio.out + 2 * spec.audio.out + 1
        if name == "res5":
            break
        total += lateral_fs()
        if name in cfg.fusion_stages:
            total += width["audio"] * width["slow"] * 5 + bn(width["slow"])
    d = width["slow"] + width["fast"] + width["audio"]
    return total + d * cfg.num_classes + cfg.num_classes


def test_full_scale_parameter_count_matches_layer_sum():
    assert count_params(FULL) == reference_params(FULL)


def test_desk_model_parameter_count_matches_analysis():
    cfg = desk_config()
    assert build_model(cfg, 0).num_parameters() == count_params(cfg) == reference_params(cfg)


def test_head_concat_width():
    assert FULL.audio_in_head
    head = count_flops(FULL).get("head", "fc")
    assert head.params == (2048 + 256 + 1024) * 400 + 400
    cfg = desk_config()
    assert build_model(cfg, 0).feature_dim == 256 + 32 + 128


# ---------------------------------------------------------------- fusion modules

def test_fast_to_slow_shape():
    m = FastToSlow(8, 8, init=Init(0), name="f")
    rng = stream(0, "f2s")
    out = fuse_slowfast(m, Tensor(rng.standard_normal((1, 8, 32, 3, 3))),
                        Tensor(rng.standard_normal((1, 64, 4, 3, 3))))
    assert out.shape == (1, 64 + 16, 4, 3, 3)


def test_fast_to_slow_zero_fast_appends_zeros():
    m = FastToSlow(4, 4, init=Init(0), name="f")
    slow = Tensor(stream(1, "slow").standard_normal((2, 6, 2, 3, 3)))
    out = m(Tensor(np.zeros((2, 4, 8, 3, 3))), slow).data
    assert np.array_equal(out[:, :6], slow.data)
    assert np.all(out[:, 6:] == 0.0)


def test_fast_to_slow_rejects_wrong_ratio():
    m = FastToSlow(4, 4, init=Init(0), name="f")
    with pytest.raises(ValueError, match="alpha_f"):
        m(Tensor(np.zeros((1, 4, 6, 2, 2))), Tensor(np.zeros((1, 3, 2, 2, 2))))


def test_audio_to_visual_shape_at_res3():
    m = AudioToVisual(256, 512, 8, init=Init(0), name="a2v")
    out = m(Tensor(stream(2, "a").standard_normal((2, 256, 20, 32))), 4)
    assert out.shape == (2, 512, 4, 1, 1)
    visual = Tensor(np.zeros((2, 512, 4, 3, 3)))
    assert F.add(visual, out).shape == visual.shape


def test_audio_to_visual_zero_audio_is_identity():
    m = AudioToVisual(6, 5, 4, init=Init(0), name="a2v")
    visual = stream(3, "v").standard_normal((2, 5, 2, 3, 3))
    out = F.add(Tensor(visual), m(Tensor(np.zeros((2, 6, 4, 8))), 2)).data
    assert np.array_equal(out, visual)


def test_audio_to_visual_rejects_non_multiple():
    m = AudioToVisual(6, 5, 4, init=Init(0), name="a2v")
    with pytest.raises(ValueError, match="audio length"):
        m(Tensor(np.zeros((1, 6, 4, 10))), 3)


def test_audio_gradient_reaches_stem_when_fused():
    cfg = desk_config(fusion_stages=("res3",), avs_stages=())
    model = build_model(cfg, 0)
    out = model(*inputs(cfg))
    backward(F.softmax_cross_entropy(out.logits, [0, 1]))
    assert np.abs(model.stems["audio"].conv_freq.weight.grad).sum() > 0


def test_audio_gradient_reaches_stem_through_fast_route():
    cfg = desk_config(fusion_kind="AtoFtoS", fusion_stages=("res2",), avs_stages=())
    model = build_model(cfg, 0)
    out = model(*inputs(cfg))
    backward(F.softmax_cross_entropy(out.logits, [0, 1]))
    assert np.abs(model.stems["audio"].conv_freq.weight.grad).sum() > 0


def attention_oracle(m, audio, visual):
    n, cv = visual.shape[:2]
    q = audio.reshape(n, audio.shape[1], -1).mean(axis=2) @ m.query.weight.data.T
    keys = np.einsum("oc,ncp->nop", m.key.weight.data[:, :, 0, 0, 0], visual.reshape(n, cv, -1))
    vals = np.einsum("oc,ncp->nop", m.value.weight.data[:, :, 0, 0, 0], visual.reshape(n, cv, -1))
    weights = np.zeros((n, keys.shape[2]))
    attended = np.zeros((n, keys.shape[1]))
    for i in range(n):
        aff = [sum(q[i, c] * keys[i, c, p] for c in range(keys.shape[1])) for p in range(keys.shape[2])]
        e = np.exp(np.array(aff) - max(aff))
        weights[i] = e / e.sum()
        for p in range(keys.shape[2]):
            attended[i] += weights[i, p] * vals[i, :, p]
    return attended, weights


def test_nonlocal_matches_loop_oracle():
    m = AVNonlocal(5, 16, init=Init(0), name="nl")
    rng = stream(4, "nl")
    audio, visual = rng.standard_normal((2, 5, 3, 4)), rng.standard_normal((2, 16, 2, 3, 3))
    attended, weights = m.attend(Tensor(audio), Tensor(visual))
    ref_att, ref_w = attention_oracle(m, audio, visual)
    assert np.max(np.abs(attended.data - ref_att)) < 1e-12
    assert np.max(np.abs(weights.data[:, 0] - ref_w)) < 1e-12


@given(st.integers(0, 10_000))
def test_nonlocal_weights_sum_to_one(seed):
    m = AVNonlocal(4, 8, init=Init(seed), name="nl")
    rng = stream(seed, "nl-sum")
    _, w = m.attend(Tensor(rng.standard_normal((3, 4, 2, 2))), Tensor(rng.standard_normal((3, 8, 2, 2, 3))))
    assert np.allclose(w.data.sum(axis=-1), 1.0, atol=1e-12)


def test_nonlocal_uniform_visual_gives_uniform_attention():
    m = AVNonlocal(4, 8, init=Init(1), name="nl")
    visual = np.broadcast_to(stream(5, "u").standard_normal((2, 8, 1, 1, 1)), (2, 8, 2, 3, 3)).copy()
    _, w = m.attend(Tensor(stream(6, "u").standard_normal((2, 4, 2, 2))), Tensor(visual))
    assert np.allclose(w.data, 1 / 18, atol=1e-15)


def test_nonlocal_channel_mismatch_rejected():
    m = AVNonlocal(4, 8, init=Init(1), name="nl")
    with pytest.raises(ValueError, match="channels"):
        m.attend(Tensor(np.zeros((1, 4, 2, 2))), Tensor(np.zeros((1, 6, 1, 2, 2))))


# ---------------------------------------------------------------- head and audio removal

def test_constant_features_give_fc_of_constant():
    cfg = desk_config()
    model = build_model(cfg, 0)
    head = model.head
    v = np.full((1, head.fc.weight.shape[1]), 0.3)
    a = np.full((1, head.fc_audio.weight.shape[1]), -0.2)
    logits = head(Tensor(v), Tensor(a), 0.0, (None, None)).data
    w = np.concatenate([head.fc.weight.data, head.fc_audio.weight.data], axis=1)
    assert np.allclose(logits, head.fc.bias.data + w @ np.concatenate([v, a], axis=1)[0], atol=1e-14)


def test_unused_audio_pathway_is_bit_identical_to_slowfast_build():
    av = build_model(desk_config(fusion_stages=(), avs_stages=()), 3)
    sf = build_model(desk_config(pathways=("slow", "fast"), fusion_stages=(), avs_stages=()), 3)
    with no_grad():
        a = av(*inputs(av.cfg)).logits.data
        b = sf(*inputs(sf.cfg)[:2], None).logits.data
    assert a.tobytes() == b.tobytes()


def test_build_is_deterministic_per_seed():
    a, b, c = (build_model(desk_config(), s) for s in (7, 7, 8))
    sa, sb, sc = a.state_dict(), b.state_dict(), c.state_dict()
    assert all(sa[k].tobytes() == sb[k].tobytes() for k in sa)
    assert any(sa[k].tobytes() != sc[k].tobytes() for k in sa if sa[k].std() > 0)
