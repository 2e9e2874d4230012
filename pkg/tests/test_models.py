"""Model builder structure, prediction semantics, and checkpoint persistence."""

import numpy as np
import pytest

from advr.autodiff import forward
from advr.errors import CheckpointError, GraphError
from advr.models import (
    Model,
    ModelSpec,
    build_model,
    load_checkpoint,
    predict,
    predict_batch,
    save_checkpoint,
    spec_from_text,
    spec_to_text,
)

TOY_VGG = ModelSpec(kind="vgg_like", input_shape=(1, 64, 65),
                    width_multiplier=0.125, seed=3)
TOY_SE = ModelSpec(kind="se_resnet", input_shape=(1, 32, 33),
                   width_multiplier=0.5, seed=4)
TOY_CUSTOM = ModelSpec(kind="custom", input_shape=(1, 8, 9), seed=5,
                       custom_conv=((4,), (6,)), custom_fc=(10,))


def test_vgg_shape_chain_toy_scale():
    m = build_model(TOY_VGG)
    s = m.graph.shapes
    # channels at 1/8 width; spatial dims halve with floor at every pool
    assert s["conv1_1"] == (8, 64, 65)
    assert s["pool1"] == (8, 32, 32)
    assert s["conv2_1"] == (16, 32, 32)
    assert s["pool2"] == (16, 16, 16)
    assert s["conv3_2"] == (32, 16, 16)
    assert s["pool3"] == (32, 8, 8)
    assert s["conv4_2"] == (64, 8, 8)
    assert s["pool4"] == (64, 4, 4)
    assert s["conv5_2"] == (64, 4, 4)
    assert s["pool5"] == (64, 2, 2)
    assert s["avgpool"] == (64, 7, 7)
    assert s["fc1"] == (512,)
    assert s["fc2"] == (512,)
    assert s["fc3"] == (2,)


def test_vgg_parameter_count_closed_form():
    m = build_model(TOY_VGG)
    chans = [8, 16, 32, 32, 64, 64, 64, 64]
    ins = [1, 8, 16, 32, 32, 64, 64, 64]
    expect = sum(o * i * 9 + o for o, i in zip(chans, ins))
    expect += 512 * (64 * 7 * 7) + 512 + 512 * 512 + 512 + 2 * 512 + 2
    assert m.graph.parameter_count() == expect


def test_se_resnet_structure_and_forward():
    m = build_model(TOY_SE)
    s = m.graph.shapes
    assert s["s1_conv_b"] == (8, 32, 33)
    assert s["s1_se_squeeze"] == (8, 1, 1)
    assert s["s1_se_reduce"] == (1,)   # max(1, 8 // 16)
    assert s["s1_se_expand"] == (8,)
    assert s["s1_se_scale"] == (8, 32, 33)
    assert s["s1_pool"] == (8, 16, 16)
    assert s["s4_pool"] == (64, 2, 2)
    assert s["gap"] == (64, 1, 1)
    assert s["fc"] == (2,)
    # channel-matched stages reuse the input as the skip; others project it
    assert "s1_skip" in s
    x = np.random.default_rng(0).normal(size=(1, 32, 33))
    label, scores = predict(m, x)
    assert scores.shape == (2,)
    assert label in (0, 1)


def test_custom_model_builds_and_runs():
    m = build_model(TOY_CUSTOM)
    assert m.graph.shapes["pool2"] == (6, 2, 2)
    assert m.graph.shapes["fc1"] == (10,)
    x = np.random.default_rng(1).normal(size=(1, 8, 9))
    label, _ = predict(m, x)
    assert label in (0, 1)


def test_predict_tie_breaks_to_class_zero():
    m = build_model(TOY_CUSTOM)
    m.graph.params["fc_out.w"][:] = 0.0
    m.graph.params["fc_out.b"][:] = 0.0
    x = np.random.default_rng(2).normal(size=(1, 8, 9))
    label, scores = predict(m, x)
    assert scores[0] == scores[1]
    assert label == 0


def test_predict_batch_order_invariant():
    m = build_model(TOY_CUSTOM)
    rng = np.random.default_rng(3)
    xs = [rng.normal(size=(1, 8, 9)) for _ in range(6)]
    labels = predict_batch(m, xs)
    assert labels[::-1] == predict_batch(m, xs[::-1])


def test_bad_specs_rejected():
    with pytest.raises(GraphError):
        ModelSpec(kind="resnext")
    with pytest.raises(GraphError):
        ModelSpec(width_multiplier=0.0)
    with pytest.raises(GraphError):
        ModelSpec(class_count=1)


def test_bare_custom_spec_is_a_linear_head():
    m = build_model(ModelSpec(kind="custom", input_shape=(1, 1, 1), seed=0))
    assert list(m.graph.shapes) == ["input", "fc_out"]
    assert m.graph.shapes["fc_out"] == (2,)


def test_spec_text_round_trip():
    for spec in (TOY_VGG, TOY_SE, TOY_CUSTOM, ModelSpec()):
        meta = {"epochs_trained": 7, "train_seed": 9, "config_digest": "abc123"}
        back_spec, back_meta = spec_from_text(spec_to_text(spec, meta))
        assert back_spec == spec
        assert back_meta == meta


# ---------------------------------------------------------------------------
# checkpoints


def _round_trip(tmp_path, spec):
    m = build_model(spec)
    m.meta = {"epochs_trained": 3, "train_seed": 11, "config_digest": "d" * 8}
    p = tmp_path / "m.ckpt"
    save_checkpoint(p, m)
    return m, load_checkpoint(p), p


def test_checkpoint_round_trip_bit_exact(tmp_path):
    m, back, _ = _round_trip(tmp_path, TOY_CUSTOM)
    assert back.spec == m.spec
    assert back.meta == m.meta
    assert set(back.graph.params) == set(m.graph.params)
    for k in m.graph.params:
        assert np.array_equal(back.graph.params[k], m.graph.params[k])
    x = np.random.default_rng(4).normal(size=(1, 8, 9))
    assert np.array_equal(forward(back.graph, x), forward(m.graph, x))


def test_checkpoint_round_trip_after_param_mutation(tmp_path):
    m = build_model(TOY_CUSTOM)
    rng = np.random.default_rng(5)
    for p in m.graph.params.values():
        p += rng.normal(size=p.shape).astype(np.float32)
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, m)
    back = load_checkpoint(path)
    for k in m.graph.params:
        assert np.array_equal(back.graph.params[k], m.graph.params[k])


def test_checkpoint_cross_load_matrix(tmp_path):
    spec_a = TOY_CUSTOM
    spec_b = ModelSpec(kind="custom", input_shape=(1, 8, 9), seed=5,
                       custom_conv=((4,), (8,)), custom_fc=(10,))
    pa, pb = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
    save_checkpoint(pa, build_model(spec_a))
    save_checkpoint(pb, build_model(spec_b))
    assert load_checkpoint(pa, expected_spec=spec_a).spec == spec_a
    assert load_checkpoint(pb, expected_spec=spec_b).spec == spec_b
    with pytest.raises(CheckpointError, match="does not match"):
        load_checkpoint(pa, expected_spec=spec_b)
    with pytest.raises(CheckpointError, match="does not match"):
        load_checkpoint(pb, expected_spec=spec_a)


def test_checkpoint_corruption_diagnostics(tmp_path):
    _, _, path = _round_trip(tmp_path, TOY_CUSTOM)
    data = path.read_bytes()
    bad = tmp_path / "bad.ckpt"

    bad.write_bytes(b"NOPE" + data[4:])
    with pytest.raises(CheckpointError, match="magic"):
        load_checkpoint(bad)

    bad.write_bytes(data[:4] + (99).to_bytes(4, "little") + data[8:])
    with pytest.raises(CheckpointError, match="version 99"):
        load_checkpoint(bad)

    # flip one byte inside the model spec text: digest must catch it
    text_start = 4 + 4 + 32 + 4
    corrupted = bytearray(data)
    corrupted[text_start + 5] ^= 0xFF
    bad.write_bytes(bytes(corrupted))
    with pytest.raises(CheckpointError, match="digest mismatch"):
        load_checkpoint(bad)

    bad.write_bytes(data[:len(data) // 2])
    with pytest.raises(CheckpointError, match="truncated"):
        load_checkpoint(bad)

    bad.write_bytes(data[:30])
    with pytest.raises(CheckpointError, match="truncated"):
        load_checkpoint(bad)

    bad.write_bytes(data + b"extra")
    with pytest.raises(CheckpointError, match="trailing"):
        load_checkpoint(bad)


def test_build_deterministic_in_seed():
    a = build_model(TOY_CUSTOM)
    b = build_model(TOY_CUSTOM)
    for k in a.graph.params:
        assert np.array_equal(a.graph.params[k], b.graph.params[k])
    c = build_model(ModelSpec(kind="custom", input_shape=(1, 8, 9), seed=6,
                              custom_conv=((4,), (6,)), custom_fc=(10,)))
    assert not np.array_equal(a.graph.params["conv1_1.w"], c.graph.params["conv1_1.w"])
