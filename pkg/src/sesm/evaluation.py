"""Accuracy, macro precision/recall, prototype-deletion AOPC and per-head usage."""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .data import Dataset
from .losses import diversity_loss
from .model import SESM

logger = logging.getLogger(__name__)


def classification_metrics(preds, labels, num_classes: int) -> dict:
    """Accuracy and macro-averaged precision/recall over ``num_classes`` classes.

    A class with no predicted (or no true) members has precision (or
    recall) 0; it still counts in the macro mean.
    """
    preds = np.asarray(preds, dtype=np.int64)
    labels = np.asarray(labels, dtype=np.int64)
    if preds.shape != labels.shape:
        raise ValueError(f"preds {preds.shape} and labels {labels.shape} differ in shape")
    if preds.size == 0:
        raise ValueError("classification_metrics: empty input")
    conf = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(conf, (labels, preds), 1)
    tp = np.diag(conf).astype(float)
    pred_pos = conf.sum(axis=0)
    true_pos = conf.sum(axis=1)
    precision = np.divide(tp, pred_pos, out=np.zeros(num_classes), where=pred_pos > 0)
    recall = np.divide(tp, true_pos, out=np.zeros(num_classes), where=true_pos > 0)
    undefined = np.flatnonzero(pred_pos == 0)
    if len(undefined):
        logger.debug("precision undefined (no predictions) for classes %s; counted as 0", undefined.tolist())
    return {
        "accuracy": float(tp.sum() / preds.size),
        "macro_precision": float(precision.mean()),
        "macro_recall": float(recall.mean()),
        "per_class_precision": precision.tolist(),
        "per_class_recall": recall.tolist(),
        "confusion": conf.tolist(),
    }


def _softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def head_relevance(concepts: np.ndarray, weights: np.ndarray) -> np.ndarray:
    """Magnitude of each head's additive term, ``p_h * ||c_h||``: (B, H)."""
    return weights * np.linalg.norm(concepts, axis=-1)


def deletion_order(relevance: np.ndarray) -> np.ndarray:
    """Heads by decreasing relevance; equal relevance keeps the lower index first."""
    return np.argsort(-relevance, axis=-1, kind="stable")


def aopc_scores(model: SESM, dataset: Dataset, batch_size: int = 256) -> np.ndarray:
    """Per-input mean drop of the predicted-class probability as the top-1..H-1
    relevant heads are deleted (their weights zeroed in the aggregate)."""
    H = model.cfg.num_heads
    if H < 2:
        raise ValueError("AOPC needs at least 2 heads")
    scores = []
    with ad.no_grad():
        for batch in dataset.batches(batch_size):
            out = model.forward(batch, "eval")
            probs = _softmax(out.logits.data.astype(np.float64))
            pred = probs.argmax(axis=-1)
            rows = np.arange(len(pred))
            base = probs[rows, pred]
            rel = sum(head_relevance(e.concepts.data, e.weights.data) for e in out.encodings)
            order = deletion_order(rel)
            keep = np.ones((len(pred), H), dtype=model.dtype)
            drops = np.zeros(len(pred))
            for h in range(H - 1):
                keep[rows, order[:, h]] = 0
                reps = [model.aggregate(e.concepts, e.weights * keep) for e in out.encodings]
                logits = model.classify_pair(*reps) if model.cfg.pair_mode else model.classify(reps[0])
                drops += base - _softmax(logits.data.astype(np.float64))[rows, pred]
            scores.append(drops / (H - 1))
    return np.concatenate(scores)


def aopc(model: SESM, dataset: Dataset, batch_size: int = 256) -> float:
    return float(aopc_scores(model, dataset, batch_size).mean())


def head_statistics(model: SESM, dataset: Dataset, batch_size: int = 256) -> dict:
    """Per head: mean weight, mean selected fraction, and a histogram of the
    class predicted from that head's concept alone."""
    H, C = model.cfg.num_heads, model.cfg.num_classes
    w_sum = np.zeros(H)
    frac_sum = np.zeros(H)
    hist = np.zeros((H, C), dtype=np.int64)
    n = 0
    with ad.no_grad():
        for batch in dataset.batches(batch_size):
            out = model.forward(batch, "eval")
            enc = out.encodings[0]
            w_sum += enc.weights.data.sum(axis=0)
            frac_sum += (enc.selection.data.sum(axis=-1) / enc.mask.sum(axis=1, keepdims=True)).sum(axis=0)
            other = out.encodings[1].concepts if model.cfg.pair_mode else None
            single = model.head_logits(enc.concepts, other).data.argmax(axis=-1)  # (B, H)
            for h in range(H):
                hist[h] += np.bincount(single[:, h], minlength=C)
            n += len(batch)
    return {
        "mean_weight": (w_sum / n).tolist(),
        "mean_selection_fraction": (frac_sum / n).tolist(),
        "prediction_histogram": hist.tolist(),
    }


@dataclass
class EvalReport:
    accuracy: float
    macro_precision: float
    macro_recall: float
    per_class_precision: list[float]
    per_class_recall: list[float]
    aopc: float | None
    head_stats: dict = field(default_factory=dict)
    num_samples: int = 0
    diversity: float | None = None

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1)

    @classmethod
    def from_json(cls, text: str) -> EvalReport:
        return cls(**json.loads(text))

    def table(self) -> str:
        aopc = "n/a" if self.aopc is None else f"{self.aopc:.3f}"
        lines = [
            f"{'Acc.':>7} {'Avg.P':>7} {'Avg.R':>7} {'AOPC':>7}",
            f"{self.accuracy:7.3f} {self.macro_precision:7.3f} {self.macro_recall:7.3f} {aopc:>7}",
        ]
        if self.head_stats:
            lines.append("")
            lines.append(f"{'head':>4} {'weight':>8} {'select':>8}  single-head predictions")
            hs = self.head_stats
            for h, (w, f, hist) in enumerate(zip(hs["mean_weight"], hs["mean_selection_fraction"], hs["prediction_histogram"])):
                lines.append(f"{h:>4} {w:8.3f} {f:8.3f}  {hist}")
        return "\n".join(lines)


def evaluate(model: SESM, dataset: Dataset, batch_size: int = 256) -> EvalReport:
    if len(dataset) == 0:
        raise ValueError("evaluate: empty dataset")
    if dataset.mode != model.cfg.input_mode:
        raise ValueError(f"dataset mode {dataset.mode!r} does not match model input_mode {model.cfg.input_mode!r}")
    preds, labels, div = [], [], []
    with ad.no_grad():
        for batch in dataset.batches(batch_size):
            out = model.forward(batch, "eval")
            preds.append(out.preds)
            labels.append(batch.labels)
            div.append(float(diversity_loss(out.selection).data) * len(batch))
    m = classification_metrics(np.concatenate(preds), np.concatenate(labels), model.cfg.num_classes)
    score = aopc(model, dataset, batch_size) if model.cfg.num_heads >= 2 else None
    return EvalReport(
        accuracy=m["accuracy"],
        macro_precision=m["macro_precision"],
        macro_recall=m["macro_recall"],
        per_class_precision=m["per_class_precision"],
        per_class_recall=m["per_class_recall"],
        aopc=score,
        head_stats=head_statistics(model, dataset, batch_size),
        num_samples=len(dataset),
        diversity=sum(div) / len(dataset),
    )


def selection_overlap(selection: np.ndarray, mask: np.ndarray) -> float:
    """Mean over inputs and head pairs of the fraction of valid positions both heads select."""
    s = np.asarray(selection) > 0.5
    b, h, _ = s.shape
    if h < 2:
        return 0.0
    both = (s[:, :, None, :] & s[:, None, :, :]).sum(-1) / np.asarray(mask).sum(1)[:, None, None]
    iu = np.triu_indices(h, k=1)
    return float(both[:, iu[0], iu[1]].mean())
