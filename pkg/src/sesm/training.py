"""End-to-end training: AdamW, seeded random streams, checkpoint/resume, history log."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import NumericError
from .data import Dataset
from .losses import LossWeights, sesm_losses
from .model import SESM, load_checkpoint, save_checkpoint

logger = logging.getLogger(__name__)

STREAMS = {"init": 0, "shuffle": 1, "gumbel": 2}


class TrainingDiverged(ArithmeticError):
    def __init__(self, message: str, last_finite: dict | None):
        self.last_finite = last_finite
        super().__init__(f"{message}; last finite loss breakdown: {last_finite}")


def rng_streams(seed: int) -> dict[str, np.random.Generator]:
    """Independent generators per consumer, all derived from one seed."""
    return {name: np.random.default_rng([int(seed), key]) for name, key in STREAMS.items()}


@dataclass
class TrainConfig:
    batch_size: int = 32
    epochs: int = 30
    learning_rate: float = 5e-3
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    loss: LossWeights = field(default_factory=LossWeights)
    class_weighting: bool = False
    tau_anneal: bool = False
    tau_final: float = 0.5
    clip_norm: float = 5.0
    warmup_steps: int = 0
    checkpoint_every: int = 0
    eval_every: int = 1
    debug: bool = False

    def validate(self) -> list[str]:
        errs = list(self.loss.validate())
        if self.batch_size < 1:
            errs.append("batch_size must be >= 1")
        if self.batch_size < 2 and self.loss.stability > 0:
            errs.append("batch_size must be >= 2 when the stability weight is > 0")
        if self.epochs < 0:
            errs.append("epochs must be >= 0")
        if not self.learning_rate > 0:
            errs.append("learning_rate must be > 0")
        if self.weight_decay < 0:
            errs.append("weight_decay must be >= 0")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            errs.append("betas must lie in [0, 1)")
        if not self.tau_final > 0:
            errs.append("tau_final must be > 0")
        if self.eval_every < 1:
            errs.append("eval_every must be >= 1")
        return errs

    def to_dict(self) -> dict:
        d = asdict(self)
        if self.loss.class_weights is not None:
            d["loss"]["class_weights"] = list(self.loss.class_weights)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> TrainConfig:
        known = {f.name for f in fields(cls)}
        kw = {k: v for k, v in d.items() if k in known and k != "loss"}
        loss = d.get("loss", {})
        if isinstance(loss, dict):
            if loss.get("class_weights") is not None:
                loss = dict(loss, class_weights=tuple(loss["class_weights"]))
            loss = LossWeights(**loss)
        return cls(loss=loss, **kw)


# -- optimizer --------------------------------------------------------------------


def adamw_step(params, grads, state, lr, beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.01):
    """One decoupled-weight-decay Adam update, in place.

    ``params``/``grads`` are dicts of arrays; ``state`` holds ``step``, ``m``
    and ``v`` (created on first use). Decay multiplies the weights by
    ``1 - lr * weight_decay`` and never enters the moment estimates.
    """
    state["step"] = state.get("step", 0) + 1
    t = state["step"]
    m, v = state.setdefault("m", {}), state.setdefault("v", {})
    bc1 = 1.0 - beta1**t
    bc2 = 1.0 - beta2**t
    for name, p in params.items():
        g = grads.get(name)
        if name not in m:
            m[name] = np.zeros_like(p)
            v[name] = np.zeros_like(p)
        if m[name].shape != p.shape:
            raise ValueError(f"adamw_step: state for {name} has shape {m[name].shape}, param {p.shape}")
        if weight_decay:
            p *= p.dtype.type(1.0 - lr * weight_decay)
        if g is None:
            continue
        m[name] *= beta1
        m[name] += (1.0 - beta1) * g
        v[name] *= beta2
        v[name] += (1.0 - beta2) * g * g
        mhat = m[name] / bc1
        vhat = v[name] / bc2
        p -= (lr * mhat / (np.sqrt(vhat) + eps)).astype(p.dtype)
    return params, state


class AdamW:
    def __init__(self, params: dict[str, ad.Tensor], lr=1e-3, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.01, debug=False):
        self.params = params
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.debug = debug
        self.state: dict = {"step": 0, "m": {}, "v": {}}
        self.skipped = 0

    def step(self, lr: float | None = None) -> bool:
        """Apply one update from ``param.grad``; returns False when skipped for non-finite grads."""
        grads = {k: p.grad for k, p in self.params.items() if p.grad is not None}
        if not all(np.isfinite(g).all() for g in grads.values()):
            if self.debug:
                raise NumericError("AdamW: non-finite gradient")
            self.skipped += 1
            logger.warning("AdamW: skipped step with non-finite gradient")
            return False
        arrays = {k: p.data for k, p in self.params.items()}
        adamw_step(arrays, grads, self.state, self.lr if lr is None else lr, *self.betas, self.eps, self.weight_decay)
        return True

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def state_tensors(self) -> dict[str, np.ndarray]:
        out = {}
        for k in self.params:
            if k in self.state["m"]:
                out[f"optim.m.{k}"] = self.state["m"][k]
                out[f"optim.v.{k}"] = self.state["v"][k]
        return out

    def load_state_tensors(self, step: int, tensors: dict[str, np.ndarray]) -> None:
        self.state = {"step": int(step), "m": {}, "v": {}}
        for k, p in self.params.items():
            if f"optim.m.{k}" in tensors:
                self.state["m"][k] = np.array(tensors[f"optim.m.{k}"], dtype=p.dtype)
                self.state["v"][k] = np.array(tensors[f"optim.v.{k}"], dtype=p.dtype)


def clip_grad_norm(params, max_norm: float) -> float:
    """Scale all grads so their global L2 norm is at most ``max_norm``; returns the pre-clip norm."""
    grads = [p.grad for p in params if p.grad is not None]
    total = math.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads))
    if max_norm and total > max_norm:
        scale = max_norm / (total + 1e-12)
        for p in params:
            if p.grad is not None:
                p.grad = (p.grad * scale).astype(p.grad.dtype)
    return total


def inverse_frequency_weights(labels, num_classes: int) -> tuple[float, ...]:
    """``n / (C * n_c)``; classes absent from the labels get weight 1."""
    counts = np.bincount(np.asarray(labels), minlength=num_classes).astype(float)
    n = counts.sum()
    return tuple(float(n / (num_classes * c)) if c > 0 else 1.0 for c in counts)


# -- trainer ----------------------------------------------------------------------


def evaluate_accuracy(model: SESM, ds: Dataset, batch_size: int = 256) -> float:
    correct = 0
    with ad.no_grad():
        for batch in ds.batches(batch_size):
            correct += int((model.forward(batch, "eval").preds == batch.labels).sum())
    return correct / len(ds)


class Trainer:
    """Stateful training loop; :meth:`save`/:meth:`load` capture everything
    needed to continue bit-exactly (weights, moments, RNG states, history)."""

    def __init__(self, model: SESM, train_set: Dataset, cfg: TrainConfig, val_set: Dataset | None = None,
                 log_path=None, on_step=None):
        errs = cfg.validate()
        if errs:
            raise ValueError("; ".join(errs))
        if len(train_set) == 0:
            raise ValueError("training set is empty")
        self.model = model
        self.train_set = train_set
        self.val_set = val_set
        self.cfg = cfg
        self.log_path = Path(log_path) if log_path else None
        self.on_step = on_step
        self.rngs = rng_streams(cfg.seed)
        self.optimizer = AdamW(model.params, cfg.learning_rate, (cfg.beta1, cfg.beta2), cfg.eps, cfg.weight_decay, cfg.debug)
        self.loss_weights = cfg.loss
        if cfg.class_weighting and cfg.loss.class_weights is None:
            cw = inverse_frequency_weights(train_set.labels, model.cfg.num_classes)
            self.loss_weights = LossWeights(**{**asdict(cfg.loss), "class_weights": cw})
        self.epoch = 0
        self.history: list[dict] = []
        self.last_finite: dict | None = None

    def tau(self, epoch: int) -> float:
        start = self.model.cfg.gumbel_temperature
        if not self.cfg.tau_anneal or self.cfg.epochs <= 1:
            return start
        frac = min(epoch / (self.cfg.epochs - 1), 1.0)
        return start + (self.cfg.tau_final - start) * frac

    def _lr(self) -> float:
        if self.cfg.warmup_steps > 0:
            return self.cfg.learning_rate * min(1.0, (self.optimizer.state["step"] + 1) / self.cfg.warmup_steps)
        return self.cfg.learning_rate

    def run_epoch(self) -> dict:
        model, cfg = self.model, self.cfg
        tau = self.tau(self.epoch)
        sums: dict[str, float] = {}
        seen = correct = 0
        H = model.cfg.num_heads
        sel_sum = np.zeros(H)
        for batch in self.train_set.batches(cfg.batch_size, self.rngs["shuffle"]):
            model.zero_grad()
            out = model.forward(batch, "train", rng=self.rngs["gumbel"], tau=tau)
            loss, parts = sesm_losses(out, batch.labels, self.loss_weights, use_soft=True)
            if not all(math.isfinite(v) for v in parts.values()):
                raise TrainingDiverged(f"non-finite loss at epoch {self.epoch}", self.last_finite)
            self.last_finite = parts
            loss.backward()
            clip_grad_norm(model.parameters(), cfg.clip_norm)
            self.optimizer.step(self._lr())
            if self.on_step is not None:
                self.on_step(dict(parts, epoch=self.epoch, step=self.optimizer.state["step"]))
            b = len(batch)
            seen += b
            correct += int((out.preds == batch.labels).sum())
            for k, v in parts.items():
                sums[k] = sums.get(k, 0.0) + v * b
            for enc in out.encodings:
                frac = enc.selection.data.sum(axis=-1) / enc.mask.sum(axis=1, keepdims=True)
                sel_sum += frac.sum(axis=0) / len(out.encodings)
        record = {"epoch": self.epoch, "tau": tau}
        record.update({k: v / seen for k, v in sums.items()})
        record["train_acc"] = correct / seen
        record["selection_fraction"] = (sel_sum / seen).tolist()
        if self.val_set is not None and len(self.val_set) and (self.epoch + 1) % cfg.eval_every == 0:
            record["val_acc"] = evaluate_accuracy(model, self.val_set)
        self.epoch += 1
        model.trained_epochs += 1
        self.history.append(record)
        if self.log_path is not None:
            self.log_path.parent.mkdir(parents=True, exist_ok=True)
            with self.log_path.open("a") as fh:
                fh.write(json.dumps(record) + "\n")
        return record

    def run(self, until_epoch: int | None = None, checkpoint_dir=None) -> list[dict]:
        """Train up to ``until_epoch`` (default: ``cfg.epochs``) total epochs."""
        target = self.cfg.epochs if until_epoch is None else until_epoch
        while self.epoch < target:
            self.run_epoch()
            if checkpoint_dir and self.cfg.checkpoint_every and self.epoch % self.cfg.checkpoint_every == 0:
                self.save(Path(checkpoint_dir) / f"epoch-{self.epoch:04d}")
        return self.history

    def save(self, path) -> Path:
        extra = {
            "trainer": {
                "epoch": self.epoch,
                "optimizer_step": self.optimizer.state["step"],
                "rng_states": {k: g.bit_generator.state for k, g in self.rngs.items()},
                "history": self.history,
                "train_config": self.cfg.to_dict(),
                "loss_weights": {**asdict(self.loss_weights),
                                 "class_weights": None if self.loss_weights.class_weights is None
                                 else list(self.loss_weights.class_weights)},
            }
        }
        return save_checkpoint(path, self.model, self.optimizer.state_tensors(), extra)

    @classmethod
    def load(cls, path, train_set: Dataset, val_set: Dataset | None = None, log_path=None, on_step=None) -> Trainer:
        model, manifest, tensors = load_checkpoint(path)
        info = manifest["extra"].get("trainer")
        if info is None:
            raise ValueError(f"{path}: checkpoint carries no trainer state")
        cfg = TrainConfig.from_dict(info["train_config"])
        tr = cls(model, train_set, cfg, val_set, log_path, on_step)
        lw = dict(info["loss_weights"])
        if lw.get("class_weights") is not None:
            lw["class_weights"] = tuple(lw["class_weights"])
        tr.loss_weights = LossWeights(**lw)
        tr.optimizer.load_state_tensors(info["optimizer_step"], tensors)
        for k, st in info["rng_states"].items():
            tr.rngs[k].bit_generator.state = st
        tr.epoch = info["epoch"]
        tr.history = list(info["history"])
        return tr


def build_model(model_cfg, seed: int, dtype=np.float32) -> SESM:
    return SESM(model_cfg, rng=rng_streams(seed)["init"], dtype=dtype)


def train(model: SESM, train_set: Dataset, cfg: TrainConfig, val_set: Dataset | None = None,
          log_path=None, on_step=None) -> tuple[SESM, list[dict]]:
    """Train ``model`` in place for ``cfg.epochs`` epochs; returns ``(model, history)``."""
    trainer = Trainer(model, train_set, cfg, val_set, log_path, on_step)
    trainer.run()
    return model, trainer.history
