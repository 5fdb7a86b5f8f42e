"""Datasets: synthetic motif generators, CSV/JSONL loaders, vocabulary and splits.

Every dataset carries a per-item split code (0 train, 1 val, 2 test)
assigned by stratified sampling at creation, so a dataset on disk and its
splits are one artifact.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
from collections import Counter
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

logger = logging.getLogger(__name__)

SPLITS = ("train", "val", "test")
PAD_ID = 0
UNK_ID = 1
PAIR_LABELS = ("entailment", "neutral", "contradiction")
SOURCES = ("synthetic-motif-real", "synthetic-motif-token", "csv", "jsonl")


class DataError(ValueError):
    """Malformed, empty or inconsistent input data."""


@dataclass
class DatasetSpec:
    source: str = "synthetic-motif-real"
    num_samples: int = 1000
    num_classes: int = 2
    split_ratios: tuple[float, float, float] = (0.8, 0.1, 0.1)
    seed: int = 0
    # synthetic real-valued signals
    seq_len_min: int = 150
    seq_len_max: int = 200
    motif_len: int = 24
    noise: float = 0.3
    amplitude: float = 1.0
    # synthetic tokens
    token_len_min: int = 8
    token_len_max: int = 20
    vocab_size: int = 60
    ngram_len: int = 2
    motifs_per_class: int = 2
    pair_mode: bool = False
    # optional per-class sampling proportions (e.g. 9:1 imbalance)
    class_proportions: tuple[float, ...] | None = None
    # loaders
    path: str | None = None
    max_len: int | None = None
    min_len: int | None = None

    def validate(self) -> list[str]:
        errs = []
        if self.source not in SOURCES:
            errs.append(f"source must be one of {SOURCES}, got {self.source!r}")
        if len(self.split_ratios) != 3 or any(r < 0 for r in self.split_ratios):
            errs.append("split_ratios must be three non-negative numbers")
        elif abs(sum(self.split_ratios) - 1.0) > 1e-9:
            errs.append(f"split_ratios must sum to 1, got {sum(self.split_ratios)}")
        if self.num_classes < 2:
            errs.append("num_classes must be >= 2")
        if self.source.startswith("synthetic") and self.num_samples < 1:
            errs.append("num_samples must be >= 1")
        if self.source == "synthetic-motif-real":
            if self.seq_len_min < 1 or self.seq_len_max < self.seq_len_min:
                errs.append("need 1 <= seq_len_min <= seq_len_max")
            if self.motif_len < 1:
                errs.append("motif_len must be >= 1")
            elif self.motif_len > self.seq_len_min:
                errs.append(f"motif_len {self.motif_len} longer than sequence length {self.seq_len_min}")
            if self.noise < 0:
                errs.append("noise must be >= 0")
        if self.source == "synthetic-motif-token":
            if self.vocab_size <= 2 * self.num_classes:
                errs.append("vocab_size must exceed 2 * num_classes")
            need = _token_vocab_need(self)
            if self.vocab_size < need:
                errs.append(f"vocab_size {self.vocab_size} too small for the motif layout (need >= {need})")
            if self.pair_mode and self.num_classes != 3:
                errs.append("pair mode synthesizes 3 relation classes; set num_classes=3")
        if self.max_len is not None and self.max_len < 1:
            errs.append("max_len must be >= 1")
        if self.max_len is not None and self.source == "synthetic-motif-real" and self.max_len < self.motif_len:
            errs.append("max_len must be >= motif_len")
        if self.source == "synthetic-motif-token" and not 1 <= self.token_len_min <= self.token_len_max:
            errs.append("need 1 <= token_len_min <= token_len_max")
        if self.class_proportions is not None:
            if len(self.class_proportions) != self.num_classes or any(p <= 0 for p in self.class_proportions):
                errs.append("class_proportions needs one positive entry per class")
        if self.source in ("csv", "jsonl") and not self.path:
            errs.append(f"source {self.source} requires a path")
        return errs

    def to_dict(self) -> dict:
        d = asdict(self)
        d["split_ratios"] = list(self.split_ratios)
        if self.class_proportions is not None:
            d["class_proportions"] = list(self.class_proportions)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> DatasetSpec:
        known = {f.name for f in fields(cls)}
        kw = {k: v for k, v in d.items() if k in known}
        if "split_ratios" in kw:
            kw["split_ratios"] = tuple(kw["split_ratios"])
        if kw.get("class_proportions") is not None:
            kw["class_proportions"] = tuple(kw["class_proportions"])
        return cls(**kw)


@dataclass
class SequenceBatch:
    """A padded batch. ``elements`` is (B, L) raw scalars or token ids."""

    mode: str
    elements: np.ndarray
    lengths: np.ndarray
    labels: np.ndarray
    ids: np.ndarray
    ground_truth: np.ndarray | None = None
    pair: SequenceBatch | None = None

    def __len__(self) -> int:
        return len(self.lengths)


class Vocabulary:
    """Token <-> id map; id 0 is padding and id 1 the unknown token."""

    def __init__(self, tokens: list[str]):
        if tokens[:2] != ["<pad>", "<unk>"]:
            tokens = ["<pad>", "<unk>"] + [t for t in tokens if t not in ("<pad>", "<unk>")]
        self.tokens = list(tokens)
        self.index = {t: i for i, t in enumerate(self.tokens)}

    @classmethod
    def build(cls, corpus) -> Vocabulary:
        counts = Counter(tok for seq in corpus for tok in seq)
        ordered = sorted(counts, key=lambda t: (-counts[t], t))
        return cls(["<pad>", "<unk>"] + ordered)

    def __len__(self) -> int:
        return len(self.tokens)

    def encode(self, words) -> np.ndarray:
        return np.array([self.index.get(w, UNK_ID) for w in words], dtype=np.int64)

    def decode(self, ids) -> list[str]:
        return [self.tokens[int(i)] for i in ids]


@dataclass
class Dataset:
    mode: str
    sequences: list[np.ndarray]
    labels: np.ndarray
    num_classes: int
    split: np.ndarray
    ids: np.ndarray | None = None
    ground_truth: list[np.ndarray] | None = None
    pairs: list[np.ndarray] | None = None
    pair_ground_truth: list[np.ndarray] | None = None
    vocab: Vocabulary | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.split = np.asarray(self.split, dtype=np.int64)
        if self.ids is None:
            self.ids = np.arange(len(self.sequences), dtype=np.int64)
        self.ids = np.asarray(self.ids, dtype=np.int64)
        if not (len(self.sequences) == len(self.labels) == len(self.split) == len(self.ids)):
            raise DataError("sequences, labels, split and ids must have equal length")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise DataError("labels must lie in [0, num_classes)")

    def __len__(self) -> int:
        return len(self.sequences)

    @property
    def pair_mode(self) -> bool:
        return self.pairs is not None

    def position(self, item_id: int) -> int:
        hits = np.flatnonzero(self.ids == item_id)
        if not len(hits):
            raise KeyError(f"id {item_id} not in dataset (ids {self.ids.min()}..{self.ids.max()})")
        return int(hits[0])

    def subset(self, indices) -> Dataset:
        idx = np.asarray(indices, dtype=np.int64)
        pick = lambda xs: None if xs is None else [xs[i] for i in idx]  # noqa: E731
        return Dataset(
            mode=self.mode,
            sequences=pick(self.sequences),
            labels=self.labels[idx],
            num_classes=self.num_classes,
            split=self.split[idx],
            ids=self.ids[idx],
            ground_truth=pick(self.ground_truth),
            pairs=pick(self.pairs),
            pair_ground_truth=pick(self.pair_ground_truth),
            vocab=self.vocab,
            meta=self.meta,
        )

    def split_subset(self, name: str) -> Dataset:
        return self.subset(np.flatnonzero(self.split == SPLITS.index(name)))

    def class_counts(self) -> dict[int, int]:
        counts = np.bincount(self.labels, minlength=self.num_classes)
        return {c: int(n) for c, n in enumerate(counts)}

    def batch(self, indices=None) -> SequenceBatch:
        idx = np.arange(len(self)) if indices is None else np.asarray(indices, dtype=np.int64)
        main = _pad([self.sequences[i] for i in idx], self.mode)
        gt = None
        if self.ground_truth is not None:
            gt = _pad([self.ground_truth[i] for i in idx], "tokens")[0]
        pair = None
        if self.pairs is not None:
            pe, pl = _pad([self.pairs[i] for i in idx], self.mode)
            pgt = None
            if self.pair_ground_truth is not None:
                pgt = _pad([self.pair_ground_truth[i] for i in idx], "tokens")[0]
            pair = SequenceBatch(self.mode, pe, pl, self.labels[idx], self.ids[idx], pgt)
        return SequenceBatch(self.mode, main[0], main[1], self.labels[idx], self.ids[idx], gt, pair)

    def batches(self, batch_size: int, rng: np.random.Generator | None = None):
        order = np.arange(len(self)) if rng is None else rng.permutation(len(self))
        for start in range(0, len(order), batch_size):
            yield self.batch(order[start : start + batch_size])

    def content_hash(self) -> str:
        h = hashlib.sha256()
        h.update(self.mode.encode())
        for seq, lab, sp in zip(self.sequences, self.labels, self.split):
            h.update(np.ascontiguousarray(seq).tobytes())
            h.update(int(lab).to_bytes(8, "little") + int(sp).to_bytes(1, "little"))
        for extra in (self.pairs, self.ground_truth):
            for seq in extra or ():
                h.update(np.ascontiguousarray(seq).tobytes())
        return h.hexdigest()


def _pad(seqs: list[np.ndarray], mode: str) -> tuple[np.ndarray, np.ndarray]:
    if not seqs:
        raise DataError("cannot batch zero sequences")
    lengths = np.array([len(s) for s in seqs], dtype=np.int64)
    if (lengths == 0).any():
        raise DataError("empty sequence in batch")
    dtype = np.float64 if mode == "real" else np.int64
    out = np.zeros((len(seqs), int(lengths.max())), dtype=dtype)
    for i, s in enumerate(seqs):
        out[i, : len(s)] = s
    return out, lengths


# -- splitting ------------------------------------------------------------------


def stratified_split(labels, ratios=(0.8, 0.1, 0.1), seed: int = 0) -> np.ndarray:
    """Per-item split codes, stratified by class.

    When a class has at least as many items as there are non-empty splits,
    every such split receives at least one item of that class.
    """
    labels = np.asarray(labels)
    rng = np.random.default_rng([seed, 0x5E11])
    out = np.zeros(len(labels), dtype=np.int64)
    active = [i for i, r in enumerate(ratios) if r > 0]
    for c in np.unique(labels):
        idx = np.flatnonzero(labels == c)
        idx = idx[rng.permutation(len(idx))]
        n = len(idx)
        counts = [int(math.floor(n * r)) for r in ratios]
        if n >= len(active):
            for i in active:
                counts[i] = max(counts[i], 1)
        while sum(counts) > n:
            counts[int(np.argmax(counts))] -= 1
        counts[active[0]] += n - sum(counts)
        start = 0
        for code, k in enumerate(counts):
            out[idx[start : start + k]] = code
            start += k
    return out


# -- synthetic generators -------------------------------------------------------


def motif_shape(cls: int, length: int, amplitude: float = 1.0) -> np.ndarray:
    """Smooth class-specific waveform: bump, notch, then alternating wave shapes."""
    t = np.linspace(0.0, 1.0, length)
    sign = 1.0 if cls % 2 == 0 else -1.0
    periods = cls // 2 + 1
    if periods == 1:
        shape = np.sin(np.pi * t)
    else:
        shape = np.sin(np.pi * periods * t) * np.sin(np.pi * t)
    return sign * amplitude * shape


def _sample_labels(spec: DatasetSpec, rng: np.random.Generator) -> np.ndarray:
    if spec.class_proportions is None:
        probs = np.full(spec.num_classes, 1.0 / spec.num_classes)
    else:
        probs = np.asarray(spec.class_proportions, dtype=float)
        probs = probs / probs.sum()
    counts = np.floor(probs * spec.num_samples).astype(int)
    counts[: spec.num_samples - counts.sum()] += 1
    labels = np.repeat(np.arange(spec.num_classes), counts)
    return labels[rng.permutation(len(labels))]


def gen_motif_real(spec: DatasetSpec) -> Dataset:
    """Gaussian-noise signals with a class-specific motif planted at a random offset."""
    errs = [e for e in spec.validate() if "source" not in e]
    if errs:
        raise DataError("; ".join(errs))
    rng = np.random.default_rng([spec.seed, 1])
    labels = _sample_labels(spec, rng)
    seqs, truth = [], []
    for lab in labels:
        n = int(rng.integers(spec.seq_len_min, spec.seq_len_max + 1))
        x = rng.normal(0.0, spec.noise, size=n) if spec.noise > 0 else np.zeros(n)
        start = int(rng.integers(0, n - spec.motif_len + 1))
        x[start : start + spec.motif_len] += motif_shape(int(lab), spec.motif_len, spec.amplitude)
        gt = np.zeros(n, dtype=np.int64)
        gt[start : start + spec.motif_len] = 1
        seqs.append(x)
        truth.append(gt)
    ds = Dataset(
        mode="real",
        sequences=seqs,
        labels=labels,
        num_classes=spec.num_classes,
        split=stratified_split(labels, spec.split_ratios, spec.seed),
        ground_truth=truth,
        meta={"spec": spec.to_dict()},
    )
    ds.meta["oracle_accuracy"] = nearest_centroid_accuracy(ds)
    return ds


def nearest_centroid_accuracy(ds: Dataset) -> float:
    """Accuracy of a nearest-centroid classifier on the planted motif windows.

    Uses the ground-truth window of every item; a separability check on the
    generated data, not a model.
    """
    windows = np.stack([s[g.astype(bool)] for s, g in zip(ds.sequences, ds.ground_truth)])
    centroids = np.stack(
        [windows[ds.labels == c].mean(axis=0) if (ds.labels == c).any() else np.full(windows.shape[1], np.inf)
         for c in range(ds.num_classes)]
    )
    dist = ((windows[:, None, :] - centroids[None]) ** 2).sum(-1)
    return float((dist.argmin(axis=1) == ds.labels).mean())


def _token_vocab_need(spec: DatasetSpec) -> int:
    groups = spec.num_classes * spec.motifs_per_class
    if spec.pair_mode:
        groups = 2 * max(spec.motifs_per_class, 2)
    return 2 + groups * spec.ngram_len + 2


def _token_layout(spec: DatasetSpec):
    """Reserve motif n-grams right after pad/unk; the rest of the vocabulary is filler."""
    nxt = 2
    if spec.pair_mode:
        topics = max(spec.motifs_per_class, 2)
        motifs = []
        for _ in range(2 * topics):
            motifs.append(list(range(nxt, nxt + spec.ngram_len)))
            nxt += spec.ngram_len
        layout = {"topics": [(motifs[2 * t], motifs[2 * t + 1]) for t in range(topics)]}
    else:
        layout = {"class_motifs": []}
        for _ in range(spec.num_classes):
            grams = []
            for _ in range(spec.motifs_per_class):
                grams.append(list(range(nxt, nxt + spec.ngram_len)))
                nxt += spec.ngram_len
            layout["class_motifs"].append(grams)
    layout["filler"] = list(range(nxt, spec.vocab_size))
    return layout


def _plant(rng, grams: list[list[int]], length: int, filler: list[int]):
    seq = rng.choice(filler, size=length)
    gt = np.zeros(length, dtype=np.int64)
    # non-overlapping slots for each n-gram
    free = np.ones(length, dtype=bool)
    for g in grams:
        k = len(g)
        starts = [s for s in range(length - k + 1) if free[s : s + k].all()]
        s = int(rng.choice(starts))
        seq[s : s + k] = g
        gt[s : s + k] = 1
        free[s : s + k] = False
    return seq.astype(np.int64), gt


def gen_motif_token(spec: DatasetSpec) -> Dataset:
    """Filler-token sequences with class-specific n-grams planted at random positions.

    In pair mode each item is (premise, hypothesis) with 3 relation labels:
    entailment shares the premise motif, contradiction carries the opposing
    motif of the same topic, neutral carries a motif from another topic.
    """
    errs = [e for e in spec.validate() if "source" not in e]
    if errs:
        raise DataError("; ".join(errs))
    rng = np.random.default_rng([spec.seed, 2])
    layout = _token_layout(spec)
    filler = layout["filler"]
    lo = max(spec.token_len_min, spec.ngram_len * max(spec.motifs_per_class, 1))
    hi = max(spec.token_len_max, lo)
    if spec.max_len is not None:
        hi = min(hi, spec.max_len)
        lo = min(lo, hi)
    labels = _sample_labels(spec, rng)
    seqs, truth, pairs, pair_truth = [], [], [], []
    vocab = Vocabulary(["<pad>", "<unk>"] + [f"w{i}" for i in range(2, spec.vocab_size)])
    for lab in labels:
        if spec.pair_mode:
            topics = layout["topics"]
            t = int(rng.integers(len(topics)))
            premise_motif = topics[t][0]
            if PAIR_LABELS[lab] == "entailment":
                hyp_motif = topics[t][0]
            elif PAIR_LABELS[lab] == "contradiction":
                hyp_motif = topics[t][1]
            else:
                other = (t + 1 + int(rng.integers(len(topics) - 1))) % len(topics)
                hyp_motif = topics[other][int(rng.integers(2))]
            s, g = _plant(rng, [premise_motif], int(rng.integers(lo, hi + 1)), filler)
            ps, pg = _plant(rng, [hyp_motif], int(rng.integers(lo, hi + 1)), filler)
            pairs.append(ps)
            pair_truth.append(pg)
        else:
            grams = layout["class_motifs"][lab]
            k = int(rng.integers(1, len(grams) + 1))
            chosen = [grams[i] for i in sorted(rng.choice(len(grams), size=k, replace=False))]
            s, g = _plant(rng, chosen, int(rng.integers(lo, hi + 1)), filler)
        seqs.append(s)
        truth.append(g)
    return Dataset(
        mode="tokens",
        sequences=seqs,
        labels=labels,
        num_classes=spec.num_classes,
        split=stratified_split(labels, spec.split_ratios, spec.seed),
        ground_truth=truth,
        pairs=pairs if spec.pair_mode else None,
        pair_ground_truth=pair_truth if spec.pair_mode else None,
        vocab=vocab,
        meta={"spec": spec.to_dict(), "layout": layout},
    )


# -- file loaders -----------------------------------------------------------------


def load_csv_real(path, spec: DatasetSpec | None = None) -> Dataset:
    """One sequence per row: all but the last column are signal values, the last is the label.

    Rows longer than ``spec.max_len`` are truncated; rows shorter than
    ``spec.min_len`` are dropped (and logged).
    """
    spec = spec or DatasetSpec(source="csv", path=str(path))
    path = Path(path)
    if not path.exists():
        raise DataError(f"{path}: no such file")
    seqs, labels, dropped = [], [], []
    with path.open(newline="") as fh:
        for rowno, row in enumerate(csv.reader(fh), start=1):
            row = [c.strip() for c in row]
            while row and row[-1] == "":
                row.pop()
            if not row:
                continue
            if len(row) < 2:
                raise DataError(f"{path}:{rowno}: need at least one value and a label")
            try:
                values = np.array([float(v) for v in row[:-1]])
                label_f = float(row[-1])
            except ValueError as exc:
                raise DataError(f"{path}:{rowno}: non-numeric field ({exc})") from None
            if not np.isfinite(values).all() or label_f != int(label_f) or label_f < 0:
                raise DataError(f"{path}:{rowno}: values must be finite and the label a non-negative integer")
            if spec.min_len is not None and len(values) < spec.min_len:
                dropped.append(rowno)
                logger.info("%s:%d: dropped row of length %d < min_len %d", path, rowno, len(values), spec.min_len)
                continue
            if spec.max_len is not None:
                values = values[: spec.max_len]
            seqs.append(values)
            labels.append(int(label_f))
    if not seqs:
        raise DataError(f"{path}: no usable rows")
    labels = np.array(labels)
    num_classes = max(int(labels.max()) + 1, spec.num_classes if spec.source == "csv" else 2)
    ds = Dataset(
        mode="real",
        sequences=seqs,
        labels=labels,
        num_classes=num_classes,
        split=stratified_split(labels, spec.split_ratios, spec.seed),
        meta={"spec": spec.to_dict(), "dropped_rows": dropped},
    )
    ds.meta["class_counts"] = ds.class_counts()
    return ds


def tokenize(text: str) -> list[str]:
    return text.lower().split()


def load_jsonl_tokens(path, spec: DatasetSpec | None = None, vocab: Vocabulary | None = None):
    """Load ``{"text": ..., "label": ...}`` lines (``premise``/``hypothesis`` in pair mode).

    The vocabulary is built from the training split only unless one is
    given. Returns ``(dataset, vocabulary)``.
    """
    spec = spec or DatasetSpec(source="jsonl", path=str(path))
    path = Path(path)
    if not path.exists():
        raise DataError(f"{path}: no such file")
    texts, hyps, labels, given_ids, given_split = [], [], [], [], []
    with path.open() as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                if spec.pair_mode:
                    texts.append(tokenize(rec["premise"]))
                    hyps.append(tokenize(rec["hypothesis"]))
                else:
                    texts.append(tokenize(rec["text"]))
                lab = rec["label"]
                if isinstance(lab, str) and spec.pair_mode and lab in PAIR_LABELS:
                    lab = PAIR_LABELS.index(lab)
                if int(lab) != lab or int(lab) < 0:
                    raise ValueError("label must be a non-negative integer")
                labels.append(int(lab))
                given_ids.append(rec.get("id"))
                given_split.append(rec.get("split"))
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise DataError(f"{path}:{lineno}: malformed record ({exc})") from None
    if not texts:
        raise DataError(f"{path}: no records")
    labels = np.array(labels)
    if all(s in SPLITS for s in given_split):
        split = np.array([SPLITS.index(s) for s in given_split])
    else:
        split = stratified_split(labels, spec.split_ratios, spec.seed)
    clipped = []
    if spec.max_len is not None:
        for i, toks in enumerate(texts):
            if len(toks) > spec.max_len:
                texts[i] = toks[: spec.max_len]
                clipped.append(i)
        for i, toks in enumerate(hyps):
            if len(toks) > spec.max_len:
                hyps[i] = toks[: spec.max_len]
                clipped.append(i)
    if vocab is None:
        rows = np.flatnonzero(split == 0)
        train = [texts[i] for i in rows] + ([hyps[i] for i in rows] if spec.pair_mode else [])
        vocab = Vocabulary.build(train)
    for i, toks in enumerate(texts + hyps):
        if not toks:
            raise DataError(f"{path}: record {i % len(texts) + 1} has no tokens")
    ids = given_ids if all(isinstance(i, int) for i in given_ids) else None
    ds = Dataset(
        mode="tokens",
        sequences=[vocab.encode(t) for t in texts],
        labels=labels,
        num_classes=max(int(labels.max()) + 1, spec.num_classes),
        split=split,
        ids=ids,
        pairs=[vocab.encode(t) for t in hyps] if spec.pair_mode else None,
        vocab=vocab,
        meta={"spec": spec.to_dict(), "clipped": sorted(set(clipped))},
    )
    ds.meta["class_counts"] = ds.class_counts()
    return ds, vocab


# -- persistence ----------------------------------------------------------------

MANIFEST = "dataset.json"


def _spans(mask: np.ndarray) -> list[list[int]]:
    m = np.concatenate([[0], np.asarray(mask, dtype=np.int64), [0]])
    d = np.diff(m)
    return [[int(a), int(b)] for a, b in zip(np.flatnonzero(d == 1), np.flatnonzero(d == -1))]


def _from_spans(spans, n: int) -> np.ndarray:
    out = np.zeros(n, dtype=np.int64)
    for a, b in spans:
        out[a:b] = 1
    return out


def save_dataset(ds: Dataset, out_dir) -> Path:
    """Write the dataset as CSV (real) or JSONL (tokens) plus a JSON manifest."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if ds.mode == "real":
        data_file = out / "sequences.csv"
        with data_file.open("w", newline="") as fh:
            w = csv.writer(fh)
            for seq, lab in zip(ds.sequences, ds.labels):
                w.writerow([repr(float(v)) for v in seq] + [int(lab)])
    else:
        data_file = out / "sequences.jsonl"
        with data_file.open("w") as fh:
            for i in range(len(ds)):
                rec = {"id": int(ds.ids[i]), "label": int(ds.labels[i]), "split": SPLITS[ds.split[i]]}
                words = " ".join(ds.vocab.decode(ds.sequences[i]))
                if ds.pair_mode:
                    rec["premise"] = words
                    rec["hypothesis"] = " ".join(ds.vocab.decode(ds.pairs[i]))
                else:
                    rec["text"] = words
                fh.write(json.dumps(rec) + "\n")
    manifest = {
        "format": "sesm-dataset",
        "version": 1,
        "mode": ds.mode,
        "data_file": data_file.name,
        "num_classes": ds.num_classes,
        "ids": ds.ids.tolist(),
        "split": [SPLITS[s] for s in ds.split],
        "split_hashes": {
            name: hashlib.sha256(ds.ids[ds.split == k].tobytes()).hexdigest() for k, name in enumerate(SPLITS)
        },
        "content_hash": ds.content_hash(),
        "meta": _jsonable(ds.meta),
    }
    if ds.ground_truth is not None:
        manifest["ground_truth_spans"] = [_spans(g) for g in ds.ground_truth]
    if ds.pair_ground_truth is not None:
        manifest["pair_ground_truth_spans"] = [_spans(g) for g in ds.pair_ground_truth]
    if ds.vocab is not None:
        manifest["vocab"] = ds.vocab.tokens
    (out / MANIFEST).write_text(json.dumps(manifest, indent=1))
    return out / MANIFEST


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    return obj


def load_dataset(path) -> Dataset:
    """Load a dataset directory written by :func:`save_dataset`, a bare CSV or a bare JSONL file."""
    path = Path(path)
    if path.is_dir():
        mpath = path / MANIFEST
        if not mpath.exists():
            raise DataError(f"{path}: missing {MANIFEST}")
        manifest = json.loads(mpath.read_text())
        data_file = path / manifest["data_file"]
        split = np.array([SPLITS.index(s) for s in manifest["split"]])
        if manifest["mode"] == "real":
            raw = load_csv_real(data_file, DatasetSpec(source="csv", path=str(data_file)))
            ds = Dataset(
                mode="real",
                sequences=raw.sequences,
                labels=raw.labels,
                num_classes=manifest["num_classes"],
                split=split,
                ids=manifest["ids"],
            )
        else:
            spec = DatasetSpec.from_dict(manifest["meta"].get("spec", {}))
            spec = DatasetSpec(source="jsonl", path=str(data_file), pair_mode=spec.pair_mode, seed=spec.seed)
            vocab = Vocabulary(manifest["vocab"]) if "vocab" in manifest else None
            ds, _ = load_jsonl_tokens(data_file, spec, vocab)
            ds.num_classes = manifest["num_classes"]
        if len(ds) != len(manifest["ids"]):
            raise DataError(f"{path}: manifest lists {len(manifest['ids'])} items, data file has {len(ds)}")
        if "ground_truth_spans" in manifest:
            ds.ground_truth = [_from_spans(sp, len(s)) for sp, s in zip(manifest["ground_truth_spans"], ds.sequences)]
        if "pair_ground_truth_spans" in manifest:
            ds.pair_ground_truth = [_from_spans(sp, len(s)) for sp, s in zip(manifest["pair_ground_truth_spans"], ds.pairs)]
        ds.meta = manifest.get("meta", {})
        return ds
    if path.suffix == ".csv":
        return load_csv_real(path)
    if path.suffix in (".jsonl", ".json"):
        return load_jsonl_tokens(path)[0]
    raise DataError(f"{path}: unrecognised dataset (expected a directory, .csv or .jsonl)")


def generate(spec: DatasetSpec) -> Dataset:
    errs = spec.validate()
    if errs:
        raise DataError("; ".join(errs))
    if spec.source == "synthetic-motif-real":
        return gen_motif_real(spec)
    if spec.source == "synthetic-motif-token":
        return gen_motif_token(spec)
    if spec.source == "csv":
        return load_csv_real(spec.path, spec)
    return load_jsonl_tokens(spec.path, spec)[0]


# -- selection quality ----------------------------------------------------------


def segment_truth(truth: np.ndarray, lengths, stride: int, kernel: int | None = None) -> np.ndarray:
    """Map raw-position ground truth (B, L) to element level: an element is
    positive when its window overlaps any planted position."""
    kernel = kernel or stride
    truth = np.asarray(truth)
    lengths = np.asarray(lengths)
    n = int(np.ceil(lengths.max() / stride))
    out = np.zeros((truth.shape[0], n), dtype=np.int64)
    for i in range(n):
        a, b = i * stride, i * stride + kernel
        out[:, i] = truth[:, a:b].any(axis=1)
    valid = np.arange(n)[None, :] < np.ceil(lengths / stride)[:, None]
    return out * valid


def selection_quality(selection, ground_truth, lengths=None) -> dict[str, float]:
    """Precision/recall/F1 of the union-over-heads selection against planted positions.

    ``selection`` is (B, H, N) or (H, N); ``ground_truth`` is (B, N) or (N,)
    at the same element granularity. Scores are computed per input and
    averaged; an empty selection has precision 0.
    """
    if ground_truth is None:
        raise DataError("selection_quality needs a ground-truth mask")
    sel = np.asarray(selection)
    gt = np.asarray(ground_truth)
    if sel.ndim == 2:
        sel, gt = sel[None], gt[None]
    union = (sel > 0.5).any(axis=1)
    n = min(union.shape[1], gt.shape[1])
    union, gt = union[:, :n], gt[:, :n].astype(bool)
    if lengths is not None:
        valid = np.arange(n)[None, :] < np.asarray(lengths)[:, None]
        union, gt = union & valid, gt & valid
    tp = (union & gt).sum(1)
    ns, nt = union.sum(1), gt.sum(1)
    p = np.where(ns > 0, tp / np.maximum(ns, 1), 0.0)
    r = np.where(nt > 0, tp / np.maximum(nt, 1), 0.0)
    f1 = np.where(p + r > 0, 2 * p * r / np.maximum(p + r, 1e-300), 0.0)
    return {"precision": float(p.mean()), "recall": float(r.mean()), "f1": float(f1.mean())}
