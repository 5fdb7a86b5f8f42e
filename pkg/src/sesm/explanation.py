"""Per-input explanations and corpus-level prototype catalogs.

An :class:`Explanation` lists, for every head, the selected elements, the
head weight, the class probabilities predicted from that head's concept
alone, and whether that standalone prediction agrees with the model
(supporting) or not (contrary). Catalog entries reference training items
by id and element indices only.
"""

from __future__ import annotations

import csv
import io
import json
import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import Dataset
from .evaluation import head_relevance
from .model import SESM

logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1


class UntrainedModelError(RuntimeError):
    pass


@dataclass
class HeadPart:
    head: int
    indices: list[int]
    weight: float
    probs: list[float]
    contribution: float
    supporting: bool
    empty: bool
    concept: list[float]
    spans: list[list[int]] = field(default_factory=list)


@dataclass
class Explanation:
    input_id: int
    prediction: int
    probs: list[float]
    logits: list[float]
    parts: list[HeadPart]
    mode: str = "real"
    segment_stride: int = 1
    segment_kernel: int = 1
    pair_parts: list[HeadPart] | None = None

    def to_dict(self) -> dict:
        d = asdict(self)
        d["schema_version"] = SCHEMA_VERSION
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1)

    @classmethod
    def from_dict(cls, d: dict) -> Explanation:
        d = dict(d)
        version = d.pop("schema_version", SCHEMA_VERSION)
        if version != SCHEMA_VERSION:
            raise ValueError(f"unsupported explanation schema version {version}")
        d["parts"] = [HeadPart(**p) for p in d["parts"]]
        if d.get("pair_parts") is not None:
            d["pair_parts"] = [HeadPart(**p) for p in d["pair_parts"]]
        return cls(**d)

    @classmethod
    def from_json(cls, text: str) -> Explanation:
        return cls.from_dict(json.loads(text))

    def ranked_parts(self) -> list[HeadPart]:
        return sorted(self.parts, key=lambda p: (-p.contribution, p.head))


def _segment_spans(indices, stride: int, kernel: int, raw_len: int) -> list[list[int]]:
    return [[i * stride, min(i * stride + kernel, raw_len)] for i in indices]


def _side_parts(model: SESM, enc, single_logits: np.ndarray, pred: int, raw_len: int) -> list[HeadPart]:
    cfg = model.cfg
    real = cfg.input_mode == "real"
    sel = enc.selection.data[0]
    conc = enc.concepts.data[0]
    w = enc.weights.data[0]
    rel = head_relevance(conc, w)
    probs = np.exp(single_logits - single_logits.max(-1, keepdims=True))
    probs = probs / probs.sum(-1, keepdims=True)
    parts = []
    for h in range(cfg.num_heads):
        idx = np.flatnonzero(sel[h] > 0.5).tolist()
        parts.append(
            HeadPart(
                head=h,
                indices=idx,
                weight=float(w[h]),
                probs=probs[h].tolist(),
                contribution=float(rel[h]),
                supporting=bool(int(single_logits[h].argmax()) == pred),
                empty=not idx,
                concept=conc[h].tolist(),
                spans=_segment_spans(idx, cfg.conv_embed_stride, cfg.conv_embed_kernel, raw_len) if real else [],
            )
        )
    return parts


def explain(model: SESM, dataset: Dataset, input_id: int, allow_untrained: bool = False) -> Explanation:
    """Explain the eval-mode prediction for the item with id ``input_id``."""
    if model.trained_epochs == 0 and not allow_untrained:
        raise UntrainedModelError("model has not been trained; pass allow_untrained=True to explain anyway")
    if any(not np.isfinite(p.data).all() for p in model.params.values()):
        raise UntrainedModelError("model parameters are not finite")
    pos = dataset.position(input_id)
    batch = dataset.batch([pos])
    with ad.no_grad():
        out = model.forward(batch, "eval")
        encs = out.encodings
        other = encs[1].concepts if model.cfg.pair_mode else None
        single = model.head_logits(encs[0].concepts, other).data[0].astype(np.float64)
    pred = int(out.preds[0])
    parts = _side_parts(model, encs[0], single, pred, int(batch.lengths[0]))
    pair_parts = None
    if model.cfg.pair_mode:
        pair_parts = _side_parts(model, encs[1], single, pred, int(batch.pair.lengths[0]))
    return Explanation(
        input_id=int(input_id),
        prediction=pred,
        probs=out.probs[0].tolist(),
        logits=out.logits.data[0].astype(np.float64).tolist(),
        parts=parts,
        mode=model.cfg.input_mode,
        segment_stride=model.cfg.conv_embed_stride if model.cfg.input_mode == "real" else 1,
        segment_kernel=model.cfg.conv_embed_kernel if model.cfg.input_mode == "real" else 1,
        pair_parts=pair_parts,
    )


def recompose_logits(model: SESM, expl: Explanation) -> np.ndarray:
    """Final logits rebuilt from the stored parts: task head of sum_h p_h c_h."""

    def rep(parts):
        c = Tensor(np.array([[p.concept for p in parts]], dtype=model.dtype))
        w = Tensor(np.array([[p.weight for p in parts]], dtype=model.dtype))
        return model.aggregate(c, w)

    with ad.no_grad():
        if model.cfg.pair_mode:
            logits = model.classify_pair(rep(expl.parts), rep(expl.pair_parts))
        else:
            logits = model.classify(rep(expl.parts))
    return logits.data[0].astype(np.float64)


# -- prototype catalog -------------------------------------------------------------


@dataclass
class CatalogEntry:
    head: int
    input_id: int
    indices: list[int]
    activation: float
    consistency: float


@dataclass
class PrototypeCatalog:
    k: int
    heads: list[list[CatalogEntry]]

    def to_dict(self) -> dict:
        return {"schema_version": SCHEMA_VERSION, "k": self.k, "heads": [[asdict(e) for e in h] for h in self.heads]}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1)

    @classmethod
    def from_dict(cls, d: dict) -> PrototypeCatalog:
        return cls(k=d["k"], heads=[[CatalogEntry(**e) for e in h] for h in d["heads"]])


def build_prototype_catalog(model: SESM, dataset: Dataset, k: int, batch_size: int = 256) -> PrototypeCatalog:
    """Top-``k`` training items per head by activation ``p_h * ||c_h||``.

    Ties are broken by ascending input id. ``consistency`` is the cosine
    between the item's concept and the head's mean concept over the data.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    if k > len(dataset):
        logger.warning("k=%d exceeds dataset size %d; returning all items", k, len(dataset))
    H = model.cfg.num_heads
    acts, concepts, selections = [], [], []
    with ad.no_grad():
        for batch in dataset.batches(batch_size):
            enc = model.forward(batch, "eval").encodings[0]
            acts.append(head_relevance(enc.concepts.data, enc.weights.data).astype(np.float64))
            concepts.append(enc.concepts.data.astype(np.float64))
            for i, n in enumerate(enc.mask.sum(axis=1).astype(int)):
                selections.append(enc.selection.data[i, :, :n] > 0.5)
    acts = np.concatenate(acts)  # (M, H)
    concepts = np.concatenate(concepts)  # (M, H, d)
    ids = dataset.ids
    mean = concepts.mean(axis=0)  # (H, d)
    norms = np.linalg.norm(concepts, axis=-1) * np.linalg.norm(mean, axis=-1)[None]
    dots = (concepts * mean[None]).sum(-1)
    consistency = np.divide(dots, norms, out=np.zeros_like(dots), where=norms > 0)
    heads = []
    for h in range(H):
        order = np.lexsort((ids, -acts[:, h]))[:k]
        heads.append(
            [
                CatalogEntry(
                    head=h,
                    input_id=int(ids[i]),
                    indices=np.flatnonzero(selections[i][h]).tolist(),
                    activation=float(acts[i, h]),
                    consistency=float(consistency[i, h]),
                )
                for i in order
            ]
        )
    return PrototypeCatalog(k=k, heads=heads)


# -- rendering ---------------------------------------------------------------------


def _bracket(words: list[str], indices: set[int]) -> str:
    out, inside = [], False
    for i, w in enumerate(words):
        if i in indices and not inside:
            w = "[" + w
            inside = True
        if inside and (i + 1 not in indices):
            w = w + "]"
            inside = False
        out.append(w)
    return " ".join(out)


def _runs(indices: list[int]) -> list[tuple[int, int]]:
    runs = []
    for i in indices:
        if runs and i == runs[-1][1] + 1:
            runs[-1] = (runs[-1][0], i)
        else:
            runs.append((i, i))
    return runs


def _merge_spans(spans) -> list[list[int]]:
    merged: list[list[int]] = []
    for a, b in spans:
        if merged and a <= merged[-1][1]:
            merged[-1][1] = max(merged[-1][1], b)
        else:
            merged.append([a, b])
    return merged


def _text_side(expl: Explanation, parts, words) -> list[str]:
    lines = []
    for p in sorted(parts, key=lambda q: (-q.contribution, q.head)):
        probs = ", ".join(f"{x:.3f}" for x in p.probs)
        flag = "empty" if p.empty else ("supporting" if p.supporting else "contrary")
        head = f"head {p.head}: weight={p.weight:.3f} probs=[{probs}] {flag}"
        if expl.mode == "tokens":
            lines.append(f"{head}: {_bracket(words, set(p.indices))}")
        else:
            segs = ", ".join(f"{a}-{b}" if a != b else f"{a}" for a, b in _runs(p.indices)) or "-"
            spans = ", ".join(f"[{a}, {b})" for a, b in _merge_spans(p.spans)) or "-"
            lines.append(f"{head}: segments {segs} raw {spans}")
    return lines


def render_explanation(expl: Explanation, dataset: Dataset, fmt: str = "text") -> str:
    """Render as ``json``, ``text`` (per-head marked sub-sequences) or ``plot-data`` (CSV)."""
    try:
        pos = dataset.position(expl.input_id)
    except KeyError as exc:
        raise KeyError(f"input id {expl.input_id} missing from dataset") from exc
    seq = dataset.sequences[pos]
    if fmt == "json":
        return expl.to_json()
    if fmt == "text":
        words = dataset.vocab.decode(seq) if expl.mode == "tokens" and dataset.vocab is not None else [str(t) for t in seq]
        probs = ", ".join(f"{x:.3f}" for x in expl.probs)
        lines = [f"input {expl.input_id}: predicted class {expl.prediction} probs=[{probs}]"]
        lines += _text_side(expl, expl.parts, words)
        if expl.pair_parts is not None:
            hyp = dataset.pairs[pos]
            hwords = dataset.vocab.decode(hyp) if dataset.vocab is not None else [str(t) for t in hyp]
            lines.append("hypothesis:")
            lines += _text_side(expl, expl.pair_parts, hwords)
        return "\n".join(lines)
    if fmt == "plot-data":
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["position", "value", "head_id", "selected"])
        for p in expl.parts:
            if expl.mode == "real":
                chosen = np.zeros(len(seq), dtype=bool)
                for a, b in p.spans:
                    chosen[a:b] = True
            else:
                chosen = np.isin(np.arange(len(seq)), p.indices)
            for i, v in enumerate(seq):
                w.writerow([i, repr(float(v)) if expl.mode == "real" else int(v), p.head, int(chosen[i])])
        return buf.getvalue()
    raise ValueError(f"unknown format {fmt!r}; expected json, text or plot-data")
