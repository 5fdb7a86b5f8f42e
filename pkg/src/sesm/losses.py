"""Training objective: task cross-entropy plus diversity, stability and locality terms."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


@dataclass
class LossWeights:
    diversity: float = 0.1
    stability: float = 0.1
    locality: float = 0.1
    d_min: float = 2.0
    class_weights: tuple[float, ...] | None = None

    def validate(self) -> list[str]:
        errs = []
        for name in ("diversity", "stability", "locality"):
            if getattr(self, name) < 0:
                errs.append(f"lambda_{name} must be >= 0")
        if not self.d_min > 0:
            errs.append("d_min must be > 0")
        if self.class_weights is not None and any(w <= 0 for w in self.class_weights):
            errs.append("class_weights must be positive")
        return errs


def task_loss(logits: Tensor, labels, class_weights=None) -> Tensor:
    """Mean cross-entropy; with class weights, the weight-normalised mean
    ``sum_i w[y_i] * nll_i / sum_i w[y_i]``."""
    labels = np.asarray(labels, dtype=np.int64)
    n, c = logits.shape
    if labels.shape != (n,):
        raise ValueError(f"task_loss: {len(labels)} labels for {n} logits rows")
    if (labels < 0).any() or (labels >= c).any():
        raise ValueError(f"task_loss: label out of range [0, {c})")
    logp = ad.log_softmax(logits, axis=-1)
    picked = ad.take(logp, (np.arange(n), labels))
    if class_weights is None:
        return -ad.mean(picked)
    cw = np.asarray(class_weights, dtype=logits.dtype)
    if cw.shape != (c,):
        raise ValueError(f"task_loss: need {c} class weights, got {cw.shape}")
    w = cw[labels]
    return -ad.sum(picked * w) * (1.0 / float(w.sum()))


def diversity_loss(selection, d_min: float = 2.0) -> Tensor:
    """Per input ``sum_{i<j} relu(d_min - ||s_i - s_j||^2)`` over head rows; batch mean.

    ``selection`` is (B, H, N) or a single (H, N).
    """
    s = selection if isinstance(selection, Tensor) else Tensor(selection)
    if s.ndim == 2:
        s = ad.reshape(s, (1,) + s.shape)
    b, h, n = s.shape
    if h < 2:
        return Tensor(np.zeros((), dtype=s.dtype))
    diff = ad.reshape(s, (b, h, 1, n)) - ad.reshape(s, (b, 1, h, n))
    dist = ad.sum(diff * diff, axis=-1)  # (B, H, H)
    upper = np.triu(np.ones((h, h), dtype=s.dtype), k=1)
    hinge = ad.relu(d_min - dist) * upper
    return ad.sum(hinge) * (1.0 / b)


def cosine_distance_sum(concepts) -> tuple[Tensor, int]:
    """Unnormalised ``sum_h sum_{i<j} (1 - cos(c_i^h, c_j^h))`` and its term count.

    ``concepts`` is (B, H, d).
    """
    c = concepts if isinstance(concepts, Tensor) else Tensor(concepts)
    b, h, d = c.shape
    if b < 2:
        return Tensor(np.zeros((), dtype=c.dtype)), 0
    per_head = ad.transpose(c, (1, 0, 2))  # (H, B, d)
    sq = ad.sum(per_head * per_head, axis=-1, keepdims=True)
    # zero vectors normalise to zero, so their cosine with anything is 0
    unit = per_head / ad.sqrt(sq + (sq.data == 0).astype(c.dtype))
    cos = ad.matmul(unit, ad.transpose(unit))  # (H, B, B)
    upper = np.triu(np.ones((b, b), dtype=c.dtype), k=1)
    terms = h * b * (b - 1) // 2
    return ad.sum((1.0 - cos) * upper), terms


def stability_loss(concepts) -> Tensor:
    """Mean pairwise cosine distance between same-head concepts across the batch.

    Normalised by ``H * B (B-1) / 2`` so the value lies in [0, 2]; 0 when B < 2.
    """
    total, terms = cosine_distance_sum(concepts)
    return total * (1.0 / terms) if terms else total


def locality_loss(selection, mask) -> Tensor:
    """Batch mean of ``sum_h (1/N) sum_i s_{h,i}`` with N the unpadded length."""
    s = selection if isinstance(selection, Tensor) else Tensor(selection)
    mask = np.asarray(mask, dtype=s.dtype)
    if s.ndim == 2:
        s = ad.reshape(s, (1,) + s.shape)
        mask = mask.reshape(1, -1)
    lengths = mask.sum(axis=1)
    frac = ad.sum(s * mask[:, None, :], axis=-1) / lengths[:, None]  # (B, H)
    return ad.sum(frac) * (1.0 / s.shape[0])


def total_loss(parts: dict[str, Tensor], weights: LossWeights) -> tuple[Tensor, dict[str, float]]:
    """``task + l_d * diversity + l_s * stability + l_l * locality``.

    Returns the scalar and a float breakdown whose weighted terms re-sum to it.
    """
    # combine in float64 so the float breakdown re-sums to the scalar exactly
    total = ad.cast(parts["task"], np.float64)
    breakdown = {"task": float(parts["task"].data)}
    for name, lam in (("diversity", weights.diversity), ("stability", weights.stability), ("locality", weights.locality)):
        term = parts.get(name)
        if term is None:
            continue
        breakdown[name] = float(term.data)
        if lam:
            total = total + ad.cast(term, np.float64) * lam
    breakdown["total"] = float(total.data)
    return total, breakdown


def sesm_losses(out, labels, weights: LossWeights, use_soft: bool = True) -> tuple[Tensor, dict[str, float]]:
    """All four terms for a forward output; pair models average the regularisers over both sides.

    Diversity and locality use the relaxed selections when ``use_soft``.
    """
    parts = {"task": task_loss(out.logits, labels, weights.class_weights)}
    div = stab = loc = None
    for enc in out.encodings:
        sel = enc.soft_selection if use_soft else enc.selection
        d = diversity_loss(sel, weights.d_min)
        s = stability_loss(enc.concepts)
        lo = locality_loss(sel, enc.mask)
        div = d if div is None else div + d
        stab = s if stab is None else stab + s
        loc = lo if loc is None else loc + lo
    k = 1.0 / len(out.encodings)
    parts.update(diversity=div * k, stability=stab * k, locality=loc * k)
    return total_loss(parts, weights)
