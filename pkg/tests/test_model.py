import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sesm import autodiff as ad
from sesm.autodiff import Tensor
from sesm.model import (
    SESM,
    ConfigError,
    SesmConfig,
    gumbel_sigmoid,
    load_checkpoint,
    read_checkpoint,
    save_checkpoint,
)
from sesm_testutil import random_model, real_batch, small_real_config, token_batch


def test_eval_threshold_is_strict():
    out, soft = gumbel_sigmoid(Tensor(np.array([-1e-3, 0.0, 1e-3])), 1.0, "eval")
    assert out.data.tolist() == [0.0, 0.0, 1.0]
    assert soft.data[1] == 0.5


def test_gumbel_modes_and_errors():
    logits = Tensor(np.zeros((2, 3)))
    with pytest.raises(ValueError):
        gumbel_sigmoid(logits, 0.0)
    with pytest.raises(ValueError):
        gumbel_sigmoid(logits, 1.0, "train")
    with pytest.raises(ValueError):
        gumbel_sigmoid(logits, 1.0, "bogus")
    out, soft = gumbel_sigmoid(logits, 1.0, "soft")
    assert out is soft


def test_train_mode_selection_rate_matches_sigmoid():
    # l + g - g' is logistic around l, so P(select) = sigmoid(l)
    rng = np.random.default_rng(0)
    l = np.array([-2.0, -0.5, 0.0, 1.0, 3.0])
    logits = Tensor(np.tile(l, (20000, 1)))
    out, _ = gumbel_sigmoid(logits, 0.7, "train", rng)
    assert set(np.unique(out.data)) <= {0.0, 1.0}
    np.testing.assert_allclose(out.data.mean(axis=0), 1 / (1 + np.exp(-l)), atol=0.015)


def test_straight_through_gradient_is_soft_gradient():
    rng = np.random.default_rng(1)
    x = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
    out, soft = gumbel_sigmoid(x, 0.5, "train", np.random.default_rng(2))
    ad.sum(out).backward()
    g_st = x.grad.copy()
    x.grad = None
    ad.sum(soft).backward()
    np.testing.assert_array_equal(g_st, x.grad)


def test_config_validation_lists_everything():
    errs = SesmConfig(num_heads=0, model_dim=0, input_mode="x", gumbel_temperature=0).validate()
    assert len(errs) >= 4
    with pytest.raises(ConfigError) as err:
        SESM(SesmConfig(num_heads=0, num_classes=1))
    assert len(err.value.errors) == 2


def test_forward_shapes_and_contracts():
    cfg = small_real_config()
    model = random_model(cfg)
    rng = np.random.default_rng(0)
    batch = real_batch(rng, b=5)
    out = model.predict(batch)
    n = int(np.ceil(batch.lengths.max() / 5))
    assert out.logits.shape == (5, 2)
    assert out.selection.shape == (5, 3, n)
    assert out.concepts.shape == (5, 3, 8)
    assert out.weights.shape == (5, 3)
    assert (out.weights.data >= 0).all()
    np.testing.assert_allclose(out.probs.sum(-1), 1.0, rtol=1e-12)


def test_too_long_and_mode_mismatch():
    model = random_model(small_real_config(max_len=4))
    rng = np.random.default_rng(0)
    with pytest.raises(ValueError, match="max_len"):
        model.predict(real_batch(rng, len_min=40, len_max=40))
    with pytest.raises(ValueError, match="mode"):
        model.predict(token_batch(rng))


def test_empty_selection_pools_to_zero_vector():
    model = random_model(small_real_config())
    batch = real_batch(np.random.default_rng(0), b=2)
    sel = np.zeros((2, 3, model.num_elements(int(batch.lengths.max()))))
    sel[:, 0, :2] = 1
    enc = model.encode(batch, selection_override=sel)
    expected = np.tanh(model.params["encoder.bias"].data)
    np.testing.assert_array_equal(enc.concepts.data[:, 1], np.broadcast_to(expected, (2, 8)))
    np.testing.assert_array_equal(enc.concepts.data[:, 2], np.broadcast_to(expected, (2, 8)))


@pytest.mark.parametrize("encoder_kind", ["mean-pool-projection", "cnn"])
def test_unselected_elements_do_not_affect_concepts(encoder_kind):
    model = random_model(small_real_config(encoder_kind=encoder_kind))
    rng = np.random.default_rng(4)
    emb = rng.normal(size=(2, 6, 8)).astype(np.float32)
    mask = np.ones((2, 6), dtype=np.float32)
    sel = (rng.random((2, 3, 6)) > 0.5).astype(np.float32)
    base = model.encode_concepts(Tensor(emb), Tensor(sel), mask).data
    noisy = emb + (1 - sel.max(axis=1))[:, :, None] * rng.normal(size=emb.shape).astype(np.float32) * 100
    # positions no head selects can change arbitrarily
    np.testing.assert_array_equal(model.encode_concepts(Tensor(noisy), Tensor(sel), mask).data, base)


def test_head_permutation_is_bit_identical():
    rng = np.random.default_rng(7)
    cfg = small_real_config(num_heads=4)
    model = random_model(cfg, seed=3)
    batch = real_batch(rng, b=6)
    before = model.predict(batch)
    order = np.array([2, 0, 3, 1])
    model.permute_heads(order)
    after = model.predict(batch)
    assert before.logits.data.tobytes() == after.logits.data.tobytes()
    np.testing.assert_array_equal(after.selection.data, before.selection.data[:, order])
    np.testing.assert_array_equal(after.weights.data, before.weights.data[:, order])


def test_batch_composition_does_not_change_outputs():
    rng = np.random.default_rng(5)
    model = random_model(small_real_config())
    batch = real_batch(rng, b=8)
    full = model.predict(batch).logits.data
    for i in range(8):
        n = batch.lengths[i]
        one = real_batch(rng, b=1)
        one.elements = batch.elements[i: i + 1, :n]
        one.lengths = batch.lengths[i: i + 1]
        np.testing.assert_allclose(model.predict(one).logits.data[0], full[i], atol=1e-5)


def test_head_mask_all_zero_gives_head_bias():
    model = random_model(small_real_config())
    batch = real_batch(np.random.default_rng(0), b=3)
    with ad.no_grad():
        out = model.forward(batch, head_mask=np.zeros((3, 3)))
    np.testing.assert_array_equal(out.logits.data, np.broadcast_to(model.params["head.bias"].data, (3, 2)))


def test_token_and_pair_modes_forward_and_backward():
    rng = np.random.default_rng(0)
    cfg = SesmConfig(input_mode="tokens", vocab_size=30, num_heads=2, model_dim=8, max_len=12, num_classes=3,
                     pair_mode=True, parameterizer_channels=(8,), parameterizer_hidden=8, pair_hidden=8)
    model = random_model(cfg)
    batch = token_batch(rng, b=3, pair=True)
    out = model.forward(batch, "train", rng=rng)
    assert out.logits.shape == (3, 3) and len(out.encodings) == 2
    ad.sum(out.logits).backward()
    assert model.params["pair.out.weight"].grad is not None
    with pytest.raises(ValueError):
        model.forward(token_batch(rng, b=3))


def test_padding_token_ids_out_of_range():
    cfg = SesmConfig(input_mode="tokens", vocab_size=5, num_heads=2, model_dim=4, max_len=8)
    model = random_model(cfg)
    batch = token_batch(np.random.default_rng(0), b=2, vocab=10)
    with pytest.raises(IndexError):
        model.predict(batch)


@pytest.mark.parametrize("dtype", [np.float32, np.float64])
def test_checkpoint_round_trip_is_bitwise(tmp_path, dtype):
    model = random_model(small_real_config(encoder_kind="cnn"), dtype=dtype)
    model.trained_epochs = 3
    extra = {"opt.m": np.arange(6, dtype=np.float64).reshape(2, 3)}
    save_checkpoint(tmp_path / "ck", model, extra, {"note": 1})
    loaded, manifest, rest = load_checkpoint(tmp_path / "ck")
    assert loaded.trained_epochs == 3 and loaded.dtype == np.dtype(dtype)
    assert manifest["extra"] == {"note": 1}
    for k, p in model.params.items():
        assert p.data.tobytes() == loaded.params[k].data.tobytes()
    np.testing.assert_array_equal(rest["opt.m"], extra["opt.m"])
    batch = real_batch(np.random.default_rng(0))
    assert model.predict(batch).logits.data.tobytes() == loaded.predict(batch).logits.data.tobytes()


def test_checkpoint_rejects_unknown_format(tmp_path):
    model = random_model(small_real_config())
    save_checkpoint(tmp_path / "ck", model)
    mpath = tmp_path / "ck" / "manifest.json"
    m = json.loads(mpath.read_text())
    m["version"] = 99
    mpath.write_text(json.dumps(m))
    with pytest.raises(ValueError, match="version"):
        read_checkpoint(tmp_path / "ck")
    with pytest.raises(FileNotFoundError):
        read_checkpoint(tmp_path / "nothing")


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(1, 6), st.sampled_from(["mean-pool-projection", "cnn"]))
def test_random_inputs_keep_invariants(seed, heads, kind):
    rng = np.random.default_rng(seed)
    model = random_model(small_real_config(num_heads=heads, encoder_kind=kind), seed=seed)
    batch = real_batch(rng, b=3, len_min=5, len_max=60)
    out = model.predict(batch)
    sel = out.selection.data
    assert set(np.unique(sel)) <= {0.0, 1.0}
    assert (sel * (1 - out.mask[:, None, :]) == 0).all()
    assert (out.weights.data >= 0).all()
    assert np.isfinite(out.logits.data).all()
