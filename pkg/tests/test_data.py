import json
import logging

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sesm.data import (
    PAD_ID,
    PAIR_LABELS,
    UNK_ID,
    DataError,
    DatasetSpec,
    Vocabulary,
    gen_motif_real,
    gen_motif_token,
    generate,
    load_csv_real,
    load_dataset,
    load_jsonl_tokens,
    save_dataset,
    segment_truth,
    selection_quality,
    stratified_split,
)
from sesm_testutil import motif_spec


def test_noise_free_sequences_match_up_to_motif_position():
    ds = gen_motif_real(motif_spec(noise=0.0, num_samples=20))
    for c in (0, 1):
        windows = [s[g.astype(bool)] for s, g, y in zip(ds.sequences, ds.ground_truth, ds.labels) if y == c]
        for w in windows[1:]:
            np.testing.assert_array_equal(w, windows[0])
        for s, g, y in zip(ds.sequences, ds.ground_truth, ds.labels):
            assert (s[~g.astype(bool)] == 0).all()


def test_generation_is_seed_deterministic():
    a, b = gen_motif_real(motif_spec(seed=9)), gen_motif_real(motif_spec(seed=9))
    assert a.content_hash() == b.content_hash()
    assert gen_motif_real(motif_spec(seed=10)).content_hash() != a.content_hash()
    t1 = gen_motif_token(DatasetSpec(source="synthetic-motif-token", seed=3))
    t2 = gen_motif_token(DatasetSpec(source="synthetic-motif-token", seed=3))
    assert t1.content_hash() == t2.content_hash()


def test_default_real_task_is_separable():
    ds = gen_motif_real(DatasetSpec(num_samples=1000, seed=0))
    assert ds.meta["oracle_accuracy"] >= 0.99
    lengths = [len(s) for s in ds.sequences]
    assert 150 <= min(lengths) and max(lengths) <= 200


def test_motif_longer_than_sequence_rejected():
    with pytest.raises(DataError):
        gen_motif_real(DatasetSpec(seq_len_min=10, seq_len_max=12, motif_len=20))


def test_ground_truth_marks_motif_window():
    ds = gen_motif_real(motif_spec(num_samples=30))
    for g in ds.ground_truth:
        idx = np.flatnonzero(g)
        assert len(idx) == 10 and (np.diff(idx) == 1).all()
    batch = ds.batch(np.arange(5))
    pad = np.arange(batch.elements.shape[1])[None] >= batch.lengths[:, None]
    assert (batch.ground_truth[pad] == 0).all()


def test_token_class_motifs_are_disjoint_and_planted():
    spec = DatasetSpec(source="synthetic-motif-token", num_samples=100, seed=1)
    ds = gen_motif_token(spec)
    motifs = ds.meta["layout"]["class_motifs"]
    sets = [set(t for g in grams for t in g) for grams in motifs]
    assert not sets[0] & sets[1]
    for seq, y, gt in zip(ds.sequences, ds.labels, ds.ground_truth):
        planted = set(seq[gt.astype(bool)].tolist())
        assert planted <= sets[y] and not planted & sets[1 - y]
        # Bayes rule from the planted tokens is perfect
        assert int(bool(set(seq.tolist()) & sets[1])) == y


def test_pair_mode_relation_rules():
    spec = DatasetSpec(source="synthetic-motif-token", num_samples=60, num_classes=3, pair_mode=True, seed=2)
    ds = gen_motif_token(spec)
    topics = ds.meta["layout"]["topics"]
    for i in range(len(ds)):
        pm = tuple(ds.sequences[i][ds.ground_truth[i].astype(bool)])
        hm = tuple(ds.pairs[i][ds.pair_ground_truth[i].astype(bool)])
        rel = PAIR_LABELS[ds.labels[i]]
        if rel == "entailment":
            assert pm == hm
        elif rel == "contradiction":
            assert any(pm == tuple(a) and hm == tuple(b) for a, b in topics)


def test_token_spec_validation():
    errs = DatasetSpec(source="synthetic-motif-token", vocab_size=4).validate()
    assert any("vocab_size" in e for e in errs)
    errs = DatasetSpec(split_ratios=(0.5, 0.5, 0.5), num_classes=1).validate()
    assert len(errs) == 2


def test_csv_histogram_and_lengths(tmp_path):
    p = tmp_path / "x.csv"
    row187 = ",".join(["0.5"] * 187)
    p.write_text(f"{row187},0\n{row187},0\n{row187},1\n")
    ds = load_csv_real(p)
    assert ds.class_counts() == {0: 2, 1: 1}
    assert all(len(s) == 187 for s in ds.sequences)


def test_csv_min_len_drops_and_logs(tmp_path, caplog):
    p = tmp_path / "x.csv"
    p.write_text(",".join(["1"] * 40) + ",0\n" + ",".join(["1"] * 60) + ",1\n")
    with caplog.at_level(logging.INFO):
        ds = load_csv_real(p, DatasetSpec(source="csv", path=str(p), min_len=50, max_len=55))
    assert len(ds) == 1 and len(ds.sequences[0]) == 55
    assert ds.meta["dropped_rows"] == [1] and "min_len" in caplog.text


def test_csv_errors_name_row(tmp_path):
    p = tmp_path / "bad.csv"
    p.write_text("1,2,0\n1,x,1\n")
    with pytest.raises(DataError, match=":2:"):
        load_csv_real(p)
    empty = tmp_path / "empty.csv"
    empty.write_text("")
    with pytest.raises(DataError, match="no usable rows"):
        load_csv_real(empty)


def test_jsonl_tokenizes_and_uses_unknown(tmp_path):
    p = tmp_path / "x.jsonl"
    lines = [{"text": "Good Food", "label": 1, "split": "train"},
             {"text": "bad food", "label": 0, "split": "train"},
             {"text": "great food", "label": 1, "split": "test"}]
    p.write_text("\n".join(json.dumps(x) for x in lines))
    ds, vocab = load_jsonl_tokens(p)
    assert vocab.decode(ds.sequences[0]) == ["good", "food"]
    assert ds.labels.tolist() == [1, 0, 1]
    assert ds.sequences[2][0] == UNK_ID  # "great" only appears in the test split


def test_jsonl_clips_long_reviews(tmp_path):
    p = tmp_path / "x.jsonl"
    p.write_text(json.dumps({"text": " ".join(f"w{i}" for i in range(26)), "label": 0}) + "\n")
    ds, _ = load_jsonl_tokens(p, DatasetSpec(source="jsonl", path=str(p), max_len=25))
    assert len(ds.sequences[0]) == 25 and ds.meta["clipped"] == [0]


def test_jsonl_malformed_line_number(tmp_path):
    p = tmp_path / "x.jsonl"
    p.write_text(json.dumps({"text": "a", "label": 0}) + "\n{not json}\n")
    with pytest.raises(DataError, match=":2:"):
        load_jsonl_tokens(p)


def test_vocabulary_reserved_ids():
    v = Vocabulary.build([["b", "a", "b"]])
    assert v.tokens[:2] == ["<pad>", "<unk>"] and v.index["<pad>"] == PAD_ID
    assert v.tokens[2:] == ["b", "a"]
    assert v.encode(["zzz"]).tolist() == [UNK_ID]


@settings(max_examples=50, deadline=None)
@given(st.lists(st.integers(0, 3), min_size=1, max_size=80), st.integers(0, 1000))
def test_split_is_disjoint_exhaustive_and_stratified(labels, seed):
    labels = np.array(labels)
    split = stratified_split(labels, (0.8, 0.1, 0.1), seed)
    assert split.shape == labels.shape and set(split.tolist()) <= {0, 1, 2}
    for c in np.unique(labels):
        if (labels == c).sum() >= 3:
            assert set(split[labels == c].tolist()) == {0, 1, 2}


@pytest.mark.parametrize("source", ["synthetic-motif-real", "synthetic-motif-token"])
def test_save_load_round_trip(tmp_path, source):
    spec = DatasetSpec(source=source, num_samples=40, seed=4)
    ds = generate(spec)
    save_dataset(ds, tmp_path / "d")
    back = load_dataset(tmp_path / "d")
    assert back.content_hash() == ds.content_hash()
    assert back.ids.tolist() == ds.ids.tolist()
    manifest = json.loads((tmp_path / "d" / "dataset.json").read_text())
    assert manifest["content_hash"] == ds.content_hash() and set(manifest["split_hashes"]) == {"train", "val", "test"}


def test_selection_quality_examples():
    gt = np.array([[0, 1, 1, 0]])
    assert selection_quality(np.array([[[0, 1, 1, 0]]]), gt) == {"precision": 1.0, "recall": 1.0, "f1": 1.0}
    empty = selection_quality(np.zeros((1, 2, 4)), gt)
    assert empty["precision"] == 0.0 and empty["recall"] == 0.0
    full = selection_quality(np.ones((1, 1, 4)), gt)
    assert full["recall"] == 1.0 and full["precision"] == 0.5
    with pytest.raises(DataError):
        selection_quality(np.ones((1, 1, 4)), None)


def test_segment_truth_window_overlap():
    truth = np.zeros((1, 30), dtype=int)
    truth[0, 12:15] = 1
    assert segment_truth(truth, [30], 10).tolist() == [[0, 1, 0]]
    assert segment_truth(truth, [25], 5).tolist() == [[0, 0, 1, 0, 0]]
