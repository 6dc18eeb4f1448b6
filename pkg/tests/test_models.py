import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hapkit import checkpoint
from hapkit.errors import CheckpointError, CheckpointVersionError, PlanError, ShapeError, SpecError
from hapkit.models import (
    HEAD,
    IMPLANT,
    OUT_CHANNEL,
    PRUNE,
    AttentionBlock,
    AvgPool,
    Conv1x1,
    Conv3x3,
    Dense,
    HybridConv,
    ModelInstance,
    ModelSpec,
    ReLU,
    Softmax,
    attention_classifier,
    build,
    cost,
    mlp,
    rebuild,
    tiny_convnet,
)


def two_conv_spec():
    return ModelSpec((Conv3x3(4, 8, 8, 8), ReLU(), Conv3x3(8, 8, 8, 8), ReLU(), AvgPool(8), Dense(8, 3)))


def zero_groups(model, gids):
    flat = model.flat_params()
    for g in model.groups:
        if g.group_id in gids:
            flat[g.flat_indices(model.offsets)] = 0.0
    return model.with_params(model.unflatten(flat))


# -- specs and groups ------------------------------------------------------


def test_conv_groups_have_filter_plus_bias():
    spec = ModelSpec((Conv3x3(4, 8, 8, 8), ReLU(), AvgPool(8), Dense(8, 2)))
    conv = [g for g in build(spec).groups if g.layer == 0]
    assert len(conv) == 8
    assert all(g.p == 3 * 3 * 4 + 1 and g.kind == OUT_CHANNEL for g in conv)


def test_attention_head_groups():
    spec = ModelSpec((AttentionBlock(16, 4), Dense(16 * 2, 2)), input_shape=(2, 16))
    heads = [g for g in build(spec).groups if g.kind == HEAD]
    assert len(heads) == 4
    assert all(g.p == 4 * (16 * 4) for g in heads)


def test_dense_groups_per_output_unit():
    groups = [g for g in build(mlp([3, 2, 2])).groups if g.layer == 0]
    assert [g.p for g in groups] == [4, 4]


def test_output_layer_groups_are_not_prunable():
    model = build(mlp([3, 4, 2]))
    assert all(not g.prunable for g in model.groups if g.layer == 2)
    assert all(g.prunable for g in model.groups if g.layer == 0)


@pytest.mark.parametrize(
    "spec",
    [
        tiny_convnet(),
        mlp([5, 7, 3]),
        attention_classifier(),
        ModelSpec((Conv3x3(2, 3, 4, 4), ReLU(), Conv1x1(3, 5), ReLU(), AvgPool(2), Dense(20, 2))),
        ModelSpec((HybridConv(2, (True, False, True), 4, 4), ReLU(), AvgPool(4), Dense(3, 2))),
    ],
)
def test_groups_partition_parameters(spec):
    model = build(spec)
    seen = np.zeros(model.n_params, dtype=int)
    for g in model.groups:
        idx = g.flat_indices(model.offsets)
        assert g.p == len(idx) > 0
        seen[idx] += 1
    assert seen.max() <= 1
    ungrouped = int((seen == 0).sum())
    assert sum(g.p for g in model.groups) + ungrouped == model.n_params


def test_invalid_specs_are_rejected():
    with pytest.raises(SpecError):
        ModelSpec((Conv3x3(4, 8, 8, 8), Conv3x3(7, 8, 8, 8)))
    with pytest.raises(SpecError):
        ModelSpec((AttentionBlock(10, 4),), input_shape=(3, 10))
    with pytest.raises(SpecError):
        ModelSpec((Dense(3, 4), Softmax(), Dense(4, 2)))
    with pytest.raises(SpecError):
        build("not a spec")


def test_build_is_seeded_and_he_uniform():
    a, b, c = build(tiny_convnet(), 3), build(tiny_convnet(), 3), build(tiny_convnet(), 4)
    assert a == b and a != c
    w = a.params[0]
    assert np.abs(w).max() <= np.sqrt(6.0 / 9) and np.all(a.params[1] == 0)


def test_params_must_match_spec():
    model = build(mlp([3, 2]))
    with pytest.raises(ShapeError):
        ModelInstance(model.spec, (np.zeros((2, 3)), np.zeros(2)))


# -- cost ------------------------------------------------------------------


def test_conv_cost_by_hand():
    spec = ModelSpec((Conv3x3(4, 8, 8, 8),), "mse")
    report = cost(build(spec), (4, 8, 8))
    assert report.total_params == 296
    assert report.total_flops == 288 * 64 == 18_432
    assert report.total_params == sum(r[2] for r in report.layers)


def test_implanted_channel_has_one_ninth_of_the_weights():
    full = cost(ModelSpec((Conv3x3(4, 8, 8, 8),), "mse"))
    hybrid = cost(ModelSpec((HybridConv(4, (True,) + (False,) * 7, 8, 8),), "mse"))
    assert full.total_params - hybrid.total_params == 36 - 4


def test_empty_plan_leaves_cost_and_model_unchanged():
    model = build(tiny_convnet(), 1)
    same = rebuild(model, {})
    assert same == model
    assert cost(same) == cost(model)


def test_cost_rejects_bad_input_shape():
    with pytest.raises((ShapeError, SpecError)):
        cost(build(tiny_convnet()), (2, 8, 8))


@settings(max_examples=30, deadline=None)
@given(st.data())
def test_any_nonempty_prune_plan_reduces_params(data):
    model = build(tiny_convnet(channels=(4, 5, 6)), 0)
    by_layer = {}
    for g in model.prunable_groups:
        by_layer.setdefault(g.layer, []).append(g.group_id)
    decisions = {}
    for gids in by_layer.values():
        chosen = data.draw(st.lists(st.sampled_from(gids), max_size=len(gids) - 1, unique=True))
        decisions.update({g: PRUNE for g in chosen})
    smaller = rebuild(model, decisions)
    if decisions:
        assert cost(smaller).total_params < cost(model).total_params
    else:
        assert smaller == model


# -- rebuild ---------------------------------------------------------------


def test_prune_half_of_conv_channels_shrinks_next_layer():
    model = build(two_conv_spec(), 0)
    small = rebuild(model, {g: PRUNE for g in (0, 2, 4, 6)})
    assert small.spec.layers[0] == Conv3x3(4, 4, 8, 8)
    assert small.spec.layers[2] == Conv3x3(4, 8, 8, 8)
    np.testing.assert_array_equal(small.params[0], model.params[0][[1, 3, 5, 7]])
    np.testing.assert_array_equal(small.params[2], model.params[2][:, [1, 3, 5, 7]])


@pytest.mark.parametrize("seed", range(5))
def test_rebuild_matches_zero_masking(seed):
    rng = np.random.default_rng(seed)
    model = build(tiny_convnet(channels=(4, 5, 6)), seed)
    gids = [g.group_id for g in model.prunable_groups]
    pruned = set(rng.choice(gids, size=5, replace=False).tolist())
    per_layer = {}
    for g in model.prunable_groups:
        per_layer[g.layer] = per_layer.get(g.layer, 0) + (g.group_id not in pruned)
    if min(per_layer.values()) == 0:
        pytest.skip("draw emptied a layer")
    small = rebuild(model, {g: PRUNE for g in pruned})
    X = rng.normal(size=(7, 1, 8, 8))
    np.testing.assert_allclose(small.output(X), zero_groups(model, pruned).output(X), atol=1e-8)


def test_pruned_mlp_units_match_zero_masking(rng):
    model = build(mlp([4, 6, 5, 3]), 2)
    pruned = {1, 4, 7}
    small = rebuild(model, {g: PRUNE for g in pruned})
    X = rng.normal(size=(9, 4))
    np.testing.assert_allclose(small.output(X), zero_groups(model, pruned).output(X), atol=1e-10)


def test_pruned_head_matches_zeroed_head_output(rng):
    spec = ModelSpec((AttentionBlock(16, 4), Dense(3 * 16, 4)), "cross_entropy", (3, 16))
    model = build(spec, 0)
    head = [g for g in model.groups if g.kind == HEAD and g.index == 2][0]
    small = rebuild(model, {head.group_id: PRUNE})
    assert small.params[3].shape == (12, 16)
    wo = model.params[3].copy()
    wo[8:12] = 0.0  # head 2's output slice
    zeroed = model.with_params((*model.params[:3], wo, *model.params[4:]))
    X = rng.normal(size=(5, 3, 16))
    np.testing.assert_allclose(small.output(X), zeroed.output(X), atol=1e-10)


def test_rebuild_errors():
    model = build(two_conv_spec(), 0)
    with pytest.raises(PlanError, match="empty"):
        rebuild(model, {g: PRUNE for g in range(8)})
    with pytest.raises(PlanError):
        rebuild(model, {999: PRUNE})
    out_group = [g for g in model.groups if not g.prunable][0]
    with pytest.raises(PlanError):
        rebuild(model, {out_group.group_id: PRUNE})
    mlp_model = build(mlp([3, 4, 2]))
    with pytest.raises(PlanError):
        rebuild(mlp_model, {0: IMPLANT})


def test_rebuild_returns_new_instance():
    model = build(two_conv_spec(), 0)
    before = [p.copy() for p in model.params]
    rebuild(model, {0: PRUNE})
    assert all(np.array_equal(a, b) for a, b in zip(before, model.params))


# -- checkpoints -----------------------------------------------------------


@pytest.mark.parametrize(
    "spec",
    [
        tiny_convnet(),
        mlp([3, 5, 2], loss="mse"),
        attention_classifier(),
        ModelSpec((HybridConv(2, (False, True), 4, 4), ReLU(), AvgPool(4), Dense(2, 2), Softmax())),
    ],
)
def test_checkpoint_round_trip(spec):
    model = build(spec, 7)
    restored = checkpoint.load(checkpoint.save(model))
    assert restored == model
    assert restored.spec == model.spec
    assert [g.group_id for g in restored.groups] == [g.group_id for g in model.groups]


def test_checkpoint_file_round_trip(tmp_path):
    model = build(tiny_convnet(), 1)
    checkpoint.save_file(model, tmp_path / "m.ckpt")
    assert checkpoint.load_file(tmp_path / "m.ckpt") == model


def test_truncated_checkpoint_is_corrupt():
    payload = checkpoint.save(build(tiny_convnet(), 1))
    for cut in (3, 12, len(payload) // 2, len(payload) - 1):
        with pytest.raises(CheckpointError):
            checkpoint.load(payload[:cut])


def test_flipped_byte_fails_crc():
    payload = bytearray(checkpoint.save(build(mlp([2, 3, 2]), 1)))
    payload[-20] ^= 0xFF
    with pytest.raises(CheckpointError, match="CRC|crc|checksum"):
        checkpoint.load(bytes(payload))


def test_version_bump_is_rejected():
    payload = bytearray(checkpoint.save(build(mlp([2, 3, 2]), 1)))
    payload[8] += 1
    with pytest.raises(CheckpointVersionError):
        checkpoint.load(bytes(payload))


def test_bad_magic():
    with pytest.raises(CheckpointError):
        checkpoint.load(b"NOTACKPT" + bytes(20))
