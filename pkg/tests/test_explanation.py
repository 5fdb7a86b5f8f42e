import csv
import io
import logging

import numpy as np
import pytest

from sesm import autodiff as ad
from sesm.autodiff import Tensor
from sesm.data import Dataset, Vocabulary
from sesm.explanation import (
    Explanation,
    HeadPart,
    UntrainedModelError,
    build_prototype_catalog,
    explain,
    recompose_logits,
    render_explanation,
)
from sesm.model import SesmConfig
from sesm.training import TrainConfig, Trainer, build_model
from sesm_testutil import motif_data, random_model, small_real_config, token_data


def part(head, indices, spans=(), weight=1.0, probs=(0.5, 0.5), supporting=True):
    return HeadPart(head=head, indices=list(indices), weight=weight, probs=list(probs), contribution=weight,
                    supporting=supporting, empty=not indices, concept=[0.0], spans=[list(s) for s in spans])


def test_untrained_model_is_refused(toy_data):
    model = random_model(small_real_config())
    with pytest.raises(UntrainedModelError):
        explain(model, toy_data, 0)
    assert explain(model, toy_data, 0, allow_untrained=True).input_id == 0


def test_explanation_contracts(trained_toy, toy_data):
    for item in toy_data.ids[:30]:
        expl = explain(trained_toy, toy_data, int(item))
        n = trained_toy.num_elements(len(toy_data.sequences[toy_data.position(int(item))]))
        assert expl.prediction == int(np.argmax(expl.probs))
        for p in expl.parts:
            assert all(0 <= i < n for i in p.indices)
            assert p.supporting == (int(np.argmax(p.probs)) == expl.prediction)
            assert p.weight >= 0 and p.empty == (not p.indices)
            assert p.contribution == pytest.approx(p.weight * np.linalg.norm(p.concept), rel=1e-6)
        # recomposition from stored parts reproduces the logits exactly
        assert recompose_logits(trained_toy, expl).tolist() == expl.logits


def test_explain_is_deterministic(trained_toy, toy_data):
    assert explain(trained_toy, toy_data, 3).to_json() == explain(trained_toy, toy_data, 3).to_json()


def test_empty_head_probabilities_come_from_zero_pool(trained_toy, toy_data):
    model = trained_toy
    expected = model.classify(Tensor(np.tanh(model.params["encoder.bias"].data)[None])).data[0].astype(np.float64)
    expected = np.exp(expected - expected.max())
    expected /= expected.sum()
    batch = toy_data.batch([0])
    n = model.num_elements(int(batch.lengths[0]))
    with ad.no_grad():
        out = model.forward(batch, "eval", selection_override=np.zeros((1, 3, n)))
        single = model.head_logits(out.concepts).data[0]
    for h in range(3):
        got = np.exp(single[h] - single[h].max())
        np.testing.assert_allclose(got / got.sum(), expected, rtol=1e-6)


def test_single_head_part_supports_prediction():
    ds = motif_data(num_samples=200)
    model = build_model(small_real_config(num_heads=1), 0)
    Trainer(model, ds.split_subset("train"), TrainConfig(epochs=4)).run()
    for i in ds.ids[:40]:
        expl = explain(model, ds, int(i))
        if expl.parts[0].weight > 0:
            assert expl.parts[0].supporting


def test_pair_mode_explanation():
    ds = token_data(num_samples=90, pair_mode=True, num_classes=3)
    cfg = SesmConfig(input_mode="tokens", vocab_size=len(ds.vocab), num_heads=2, model_dim=8, num_classes=3,
                     pair_mode=True, max_len=32, parameterizer_channels=(8,), parameterizer_hidden=8)
    model = build_model(cfg, 0)
    Trainer(model, ds, TrainConfig(epochs=1)).run()
    expl = explain(model, ds, 0)
    assert expl.pair_parts is not None and len(expl.pair_parts) == 2
    assert recompose_logits(model, expl).tolist() == expl.logits
    assert "hypothesis:" in render_explanation(expl, ds, "text")


def test_json_round_trip(trained_toy, toy_data):
    expl = explain(trained_toy, toy_data, 7)
    assert Explanation.from_json(render_explanation(expl, toy_data, "json")) == expl


def test_token_rendering_brackets_selection():
    vocab = Vocabulary(["great", "food", "bad", "service"])
    ds = Dataset("tokens", [vocab.encode("great food bad service".split())], [0], 2, [0], vocab=vocab)
    expl = Explanation(0, 0, [0.9, 0.1], [1.0, 0.0], [part(0, [2, 3])], mode="tokens")
    text = render_explanation(expl, ds, "text")
    assert "great food [bad service]" in text


def test_real_rendering_maps_segment_to_raw_span():
    ds = Dataset("real", [np.arange(60, dtype=float)], [1], 2, [0])
    expl = Explanation(0, 1, [0.2, 0.8], [0.0, 1.0], [part(0, [3], spans=[(30, 40)])], segment_stride=10,
                       segment_kernel=10)
    assert "segments 3 raw [30, 40)" in render_explanation(expl, ds, "text")
    rows = list(csv.reader(io.StringIO(render_explanation(expl, ds, "plot-data"))))
    assert rows[0] == ["position", "value", "head_id", "selected"]
    selected = [int(r[0]) for r in rows[1:] if r[3] == "1"]
    assert selected == list(range(30, 40))


def test_explain_spans_follow_stride(trained_toy, toy_data):
    expl = explain(trained_toy, toy_data, 2)
    for p in expl.parts:
        assert [s[0] for s in p.spans] == [i * 5 for i in p.indices]


def test_render_errors(trained_toy, toy_data):
    expl = explain(trained_toy, toy_data, 1)
    with pytest.raises(KeyError):
        render_explanation(expl, toy_data.subset([0]), "text")
    with pytest.raises(ValueError):
        render_explanation(expl, toy_data, "svg")


def test_catalog_contracts(trained_toy, toy_data, caplog):
    train = toy_data.split_subset("train")
    cat = build_prototype_catalog(trained_toy, train, 5)
    assert len(cat.heads) == 3
    for h, entries in enumerate(cat.heads):
        assert len(entries) == 5 and all(e.head == h for e in entries)
        acts = [e.activation for e in entries]
        assert acts == sorted(acts, reverse=True)
        assert all(-1 - 1e-9 <= e.consistency <= 1 + 1e-9 for e in entries)
    assert build_prototype_catalog(trained_toy, train, 5).to_json() == cat.to_json()
    one = build_prototype_catalog(trained_toy, train, 1)
    assert [h[0].input_id for h in one.heads] == [h[0].input_id for h in cat.heads]
    with caplog.at_level(logging.WARNING):
        everything = build_prototype_catalog(trained_toy, train.subset(np.arange(4)), 10)
    assert all(len(h) == 4 for h in everything.heads) and "exceeds" in caplog.text
    with pytest.raises(ValueError):
        build_prototype_catalog(trained_toy, train, 0)


def test_catalog_ties_break_by_id(trained_toy):
    seq = np.sin(np.arange(55) / 3.0)
    ds = Dataset("real", [seq.copy() for _ in range(6)], [0] * 6, 2, [0] * 6, ids=[40, 7, 12, 3, 25, 9])
    cat = build_prototype_catalog(trained_toy, ds, 4)
    for entries in cat.heads:
        assert [e.input_id for e in entries] == [3, 7, 9, 12]
