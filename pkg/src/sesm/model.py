"""The self-explaining selective sequence classifier.

Forward pass for one sequence X of N elements:

1. embed: element embeddings E (N x d) from non-overlapping Conv1d windows
   (real signals) or a lookup table (tokens);
2. conceptize: per head h, logits = (Q_h K_h^T w_h) / sqrt(d) and a binary
   selection s_h = GumbelSigmoid(logits);
3. encode: c_h = Enc(E masked by s_h), one encoder shared by all heads;
4. parameterize: p = Softplus(MLP(pool(CNN(E)))), one weight per head;
5. aggregate: rep = sum_h p_h c_h, then a task head produces class logits.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import SequenceBatch

INPUT_MODES = ("real", "tokens")
ENCODER_KINDS = ("mean-pool-projection", "cnn")
MODES = ("train", "eval", "soft")
CHECKPOINT_FORMAT = "sesm-checkpoint"
CHECKPOINT_VERSION = 1


class ConfigError(ValueError):
    def __init__(self, errors: list[str]):
        self.errors = list(errors)
        super().__init__("; ".join(self.errors))


@dataclass
class SesmConfig:
    num_heads: int = 4
    model_dim: int = 16
    max_len: int = 32
    input_mode: str = "real"
    conv_embed_kernel: int = 10
    conv_embed_stride: int = 10
    encoder_kind: str = "mean-pool-projection"
    parameterizer_channels: tuple[int, ...] = (16, 16)
    parameterizer_hidden: int = 16
    num_classes: int = 2
    gumbel_temperature: float = 1.0
    pair_mode: bool = False
    pair_hidden: int = 32
    vocab_size: int = 0

    def validate(self) -> list[str]:
        errs = []
        if self.num_heads < 1:
            errs.append("num_heads must be >= 1")
        if self.model_dim < 1:
            errs.append("model_dim must be >= 1")
        if self.max_len < 1:
            errs.append("max_len must be >= 1")
        if self.input_mode not in INPUT_MODES:
            errs.append(f"input_mode must be one of {INPUT_MODES}")
        if self.conv_embed_kernel < 1 or self.conv_embed_stride < 1:
            errs.append("conv_embed_kernel and conv_embed_stride must be >= 1")
        if self.encoder_kind not in ENCODER_KINDS:
            errs.append(f"encoder_kind must be one of {ENCODER_KINDS}")
        if not self.parameterizer_channels or any(c < 1 for c in self.parameterizer_channels):
            errs.append("parameterizer_channels must be a non-empty list of positive ints")
        if self.parameterizer_hidden < 1 or self.pair_hidden < 1:
            errs.append("hidden sizes must be >= 1")
        if self.num_classes < 2:
            errs.append("num_classes must be >= 2")
        if not self.gumbel_temperature > 0:
            errs.append("gumbel_temperature must be > 0")
        if self.input_mode == "tokens" and self.vocab_size < 3:
            errs.append("tokens mode needs vocab_size >= 3 (pad, unk and at least one word)")
        return errs

    def to_dict(self) -> dict:
        d = asdict(self)
        d["parameterizer_channels"] = list(self.parameterizer_channels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> SesmConfig:
        known = {f.name for f in fields(cls)}
        kw = {k: v for k, v in d.items() if k in known}
        if "parameterizer_channels" in kw:
            kw["parameterizer_channels"] = tuple(int(c) for c in kw["parameterizer_channels"])
        return cls(**kw)


# -- Gumbel-Sigmoid ------------------------------------------------------------


def gumbel_sigmoid(logits: Tensor, tau: float, mode: str = "eval", rng: np.random.Generator | None = None):
    """Binary relaxation of Bernoulli(sigmoid(logits)).

    Returns ``(out, soft)``. In ``train`` mode ``soft = sigmoid((l + g - g')/tau)``
    with independent standard Gumbel ``g, g'`` and ``out`` is the hard
    threshold ``soft > 0.5`` carrying the gradient of ``soft``
    (straight-through). ``eval`` is noise-free and hard. ``soft`` mode is
    noise-free and returns the relaxation itself (a smooth path for gradient
    checks).
    """
    if not tau > 0:
        raise ValueError("gumbel_sigmoid: temperature must be > 0")
    if mode == "train":
        if rng is None:
            raise ValueError("gumbel_sigmoid: train mode needs a random generator")
        noise = rng.gumbel(size=logits.shape) - rng.gumbel(size=logits.shape)
        soft = ad.sigmoid((logits + noise.astype(logits.dtype)) * (1.0 / tau))
        return ad.straight_through(soft.data > 0.5, soft), soft
    if mode == "eval":
        soft = ad.sigmoid(logits * (1.0 / tau))
        return Tensor((soft.data > 0.5).astype(logits.dtype)), soft
    if mode == "soft":
        soft = ad.sigmoid(logits * (1.0 / tau))
        return soft, soft
    raise ValueError(f"unknown mode {mode!r}; expected one of {MODES}")


# -- forward artifacts ------------------------------------------------------------


@dataclass
class Encoding:
    """Interpretability artifacts for one side of the input (B items)."""

    mask: np.ndarray  # (B, N) validity
    embedded: Tensor  # (B, N, d)
    logits: Tensor  # (B, H, N) selection logits
    selection: Tensor  # (B, H, N) values used downstream
    soft_selection: Tensor  # (B, H, N) relaxed values
    concepts: Tensor  # (B, H, d)
    weights: Tensor  # (B, H)
    rep: Tensor  # (B, d)


@dataclass
class ForwardOutput:
    logits: Tensor
    encodings: list[Encoding] = field(default_factory=list)

    @property
    def probs(self) -> np.ndarray:
        z = self.logits.data.astype(np.float64)
        z = z - z.max(axis=-1, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=-1, keepdims=True)

    @property
    def preds(self) -> np.ndarray:
        return self.logits.data.argmax(axis=-1)

    @property
    def selection(self) -> Tensor:
        return self.encodings[0].selection

    @property
    def concepts(self) -> Tensor:
        return self.encodings[0].concepts

    @property
    def weights(self) -> Tensor:
        return self.encodings[0].weights

    @property
    def mask(self) -> np.ndarray:
        return self.encodings[0].mask


# -- the model --------------------------------------------------------------------


class SESM:
    """Parameters live in ``self.params`` (name -> Tensor) in a fixed order."""

    def __init__(self, cfg: SesmConfig, rng: np.random.Generator | None = None, dtype=np.float32):
        errs = cfg.validate()
        if errs:
            raise ConfigError(errs)
        self.cfg = cfg
        self.dtype = np.dtype(dtype)
        rng = rng if rng is not None else np.random.default_rng(0)
        self.params: dict[str, Tensor] = {}
        self.trained_epochs = 0
        self._init_params(rng)

    # -- parameters ----------------------------------------------------------
    def _add(self, name: str, value: np.ndarray) -> None:
        self.params[name] = Tensor(np.asarray(value, dtype=self.dtype), requires_grad=True)

    def _init_params(self, rng: np.random.Generator) -> None:
        cfg = self.cfg
        d, H = cfg.model_dim, cfg.num_heads

        def normal(shape, fan_in):
            return rng.normal(0.0, 1.0 / math.sqrt(fan_in), size=shape)

        if cfg.input_mode == "real":
            k = cfg.conv_embed_kernel
            self._add("embed.weight", normal((d, 1, k), k))
            self._add("embed.bias", np.zeros(d))
        else:
            table = rng.normal(0.0, 1.0, size=(cfg.vocab_size, d))
            table[0] = 0.0
            self._add("embed.table", table)
        self._add("concept.query", normal((H, d, d), d))
        self._add("concept.key", normal((H, d, d), d))
        self._add("concept.query_bias", np.zeros((H, 1, d)))
        self._add("concept.key_bias", np.zeros((H, 1, d)))
        self._add("concept.squeeze", normal((H, cfg.max_len), 4.0))
        if cfg.encoder_kind == "cnn":
            self._add("encoder.conv_weight", normal((d, d, 3), 3 * d))
            self._add("encoder.conv_bias", np.zeros(d))
        self._add("encoder.weight", normal((d, d), d))
        self._add("encoder.bias", np.zeros(d))
        prev = d
        for i, ch in enumerate(cfg.parameterizer_channels):
            self._add(f"param.conv{i}.weight", normal((ch, prev, 3), 3 * prev))
            self._add(f"param.conv{i}.bias", np.zeros(ch))
            prev = ch
        self._add("param.hidden.weight", normal((prev, cfg.parameterizer_hidden), prev))
        self._add("param.hidden.bias", np.zeros(cfg.parameterizer_hidden))
        self._add("param.out.weight", normal((cfg.parameterizer_hidden, H), cfg.parameterizer_hidden))
        self._add("param.out.bias", np.zeros(H))
        if cfg.pair_mode:
            self._add("pair.hidden.weight", normal((4 * d, cfg.pair_hidden), 4 * d))
            self._add("pair.hidden.bias", np.zeros(cfg.pair_hidden))
            self._add("pair.out.weight", normal((cfg.pair_hidden, cfg.num_classes), cfg.pair_hidden))
            self._add("pair.out.bias", np.zeros(cfg.num_classes))
        else:
            self._add("head.weight", normal((d, cfg.num_classes), d))
            self._add("head.bias", np.zeros(cfg.num_classes))

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        missing = set(self.params) ^ set(state)
        if missing:
            raise KeyError(f"state mismatch on {sorted(missing)}")
        for k, v in state.items():
            if tuple(v.shape) != self.params[k].shape:
                raise ValueError(f"{k}: shape {v.shape} != {self.params[k].shape}")
            self.params[k].data = np.array(v, dtype=self.dtype)

    def permute_heads(self, order) -> None:
        """Reorder head parameter blocks in place (conceptizer head h with weight unit h)."""
        order = np.asarray(order)
        for name in ("concept.query", "concept.key", "concept.query_bias", "concept.key_bias", "concept.squeeze"):
            self.params[name].data = np.ascontiguousarray(self.params[name].data[order])
        self.params["param.out.weight"].data = np.ascontiguousarray(self.params["param.out.weight"].data[:, order])
        self.params["param.out.bias"].data = np.ascontiguousarray(self.params["param.out.bias"].data[order])

    # -- components ----------------------------------------------------------
    def num_elements(self, raw_len: int) -> int:
        if self.cfg.input_mode == "real":
            return -(-raw_len // self.cfg.conv_embed_stride)
        return raw_len

    def embed(self, batch: SequenceBatch) -> tuple[Tensor, np.ndarray]:
        """Element embeddings (B, N, d) with padded positions zeroed, plus the (B, N) mask."""
        cfg = self.cfg
        if batch.mode != cfg.input_mode:
            raise ValueError(f"batch mode {batch.mode!r} does not match model input_mode {cfg.input_mode!r}")
        lengths = np.asarray(batch.lengths)
        if len(lengths) == 0 or (lengths < 1).any():
            raise ValueError("embed: empty sequence")
        if cfg.input_mode == "real":
            stride, k = cfg.conv_embed_stride, cfg.conv_embed_kernel
            counts = -(-lengths // stride)
            n = int(counts.max())
            width = (n - 1) * stride + k
            raw = np.zeros((len(lengths), width), dtype=self.dtype)
            take = min(width, batch.elements.shape[1])
            raw[:, :take] = batch.elements[:, :take]
            valid_raw = np.arange(width)[None, :] < lengths[:, None]
            raw = raw * valid_raw
            x = ad.conv1d(Tensor(raw[:, None, :]), self.params["embed.weight"], stride=stride)
            x = x + ad.reshape(self.params["embed.bias"], (1, -1, 1))
            emb = ad.transpose(x, (0, 2, 1))
        else:
            counts = lengths
            n = int(counts.max())
            ids = np.asarray(batch.elements[:, :n], dtype=np.int64)
            emb = ad.embedding_lookup(self.params["embed.table"], ids)
        if n > cfg.max_len:
            raise ValueError(f"sequence of {n} elements exceeds max_len {cfg.max_len}")
        mask = (np.arange(n)[None, :] < counts[:, None]).astype(self.dtype)
        return emb * mask[:, :, None], mask

    def selection_logits(self, emb: Tensor, mask: np.ndarray) -> Tensor:
        """(Q K^T w) / sqrt(d) for every head: (B, H, N)."""
        d = self.cfg.model_dim
        n = emb.shape[1]
        x = ad.reshape(emb, (emb.shape[0], 1, n, d))
        q = ad.matmul(x, self.params["concept.query"]) + self.params["concept.query_bias"]
        k = ad.matmul(x, self.params["concept.key"]) + self.params["concept.key_bias"]
        pair = ad.matmul(q, ad.transpose(k))  # (B, H, N, N)
        w = self.params["concept.squeeze"][:, :n]  # (H, N)
        w = ad.reshape(w, (1, w.shape[0], n)) * mask[:, None, :]
        logits = ad.matmul(pair, ad.reshape(w, (w.shape[0], w.shape[1], n, 1)))
        return ad.reshape(logits, logits.shape[:3]) * (1.0 / math.sqrt(d))

    def conceptize(self, emb: Tensor, mask: np.ndarray, mode: str = "eval", rng=None, tau: float | None = None):
        """Returns ``(logits, selection, soft_selection)``; padded positions are 0."""
        tau = self.cfg.gumbel_temperature if tau is None else tau
        logits = self.selection_logits(emb, mask)
        out, soft = gumbel_sigmoid(logits, tau, mode, rng)
        m = mask[:, None, :]
        return logits, out * m, soft * m

    def encode_concepts(self, emb: Tensor, selection: Tensor, mask: np.ndarray) -> Tensor:
        """c_h = Enc(X masked by s_h) for all heads: (B, H, d).

        Elements with s = 0 enter only through a multiplication by zero, so
        they contribute exactly nothing.
        """
        sel = selection * mask[:, None, :]
        count = ad.clamp_min(ad.sum(sel, axis=-1, keepdims=True), 1.0)
        if self.cfg.encoder_kind == "cnn":
            b, h, n = sel.shape
            d = self.cfg.model_dim
            x = ad.reshape(emb, (b, 1, n, d)) * ad.reshape(sel, (b, h, n, 1))
            x = ad.transpose(ad.reshape(x, (b * h, n, d)), (0, 2, 1))
            y = ad.conv1d(x, self.params["encoder.conv_weight"], padding=1)
            y = ad.relu(y + ad.reshape(self.params["encoder.conv_bias"], (1, -1, 1)))
            y = y * ad.reshape(sel, (b * h, 1, n))
            pooled = ad.reshape(ad.sum(y, axis=-1), (b, h, d)) / count
        else:
            pooled = ad.matmul(sel, emb) / count  # (B, H, d)
        return ad.tanh(ad.matmul(pooled, self.params["encoder.weight"]) + self.params["encoder.bias"])

    def parameterize(self, emb: Tensor, mask: np.ndarray) -> Tensor:
        """Non-negative head weights (B, H) from the whole sequence."""
        x = ad.transpose(emb, (0, 2, 1))  # (B, d, N)
        m = mask[:, None, :]
        for i in range(len(self.cfg.parameterizer_channels)):
            x = ad.conv1d(x, self.params[f"param.conv{i}.weight"], padding=1)
            x = ad.relu(x + ad.reshape(self.params[f"param.conv{i}.bias"], (1, -1, 1))) * m
        pooled = ad.sum(x, axis=-1) / mask.sum(axis=1, keepdims=True)
        h = ad.relu(ad.matmul(pooled, self.params["param.hidden.weight"]) + self.params["param.hidden.bias"])
        return ad.softplus(self._head_units(h, self.params["param.out.weight"]) + self.params["param.out.bias"])

    @staticmethod
    def _head_units(h: Tensor, w: Tensor) -> Tensor:
        # element-wise product + reduction: each output unit is computed the
        # same way regardless of its column index
        prod = ad.reshape(h, (h.shape[0], h.shape[1], 1)) * w
        return ad.sum(prod, axis=1)

    @staticmethod
    def aggregate(concepts: Tensor, weights: Tensor) -> Tensor:
        """sum_h p_h c_h over the head axis: (B, H, d), (B, H) -> (B, d)."""
        terms = concepts * ad.reshape(weights, weights.shape + (1,))
        return ad.sorted_sum(terms, axis=-2)

    def classify(self, rep: Tensor) -> Tensor:
        if self.cfg.pair_mode:
            raise ValueError("classify: model is in pair mode; use classify_pair")
        return ad.matmul(rep, self.params["head.weight"]) + self.params["head.bias"]

    def classify_pair(self, rep_p: Tensor, rep_h: Tensor) -> Tensor:
        """MLP over [p, h, p - h, p * h]."""
        if not self.cfg.pair_mode:
            raise ValueError("classify_pair: model is not in pair mode")
        feats = ad.concat([rep_p, rep_h, rep_p - rep_h, rep_p * rep_h], axis=-1)
        hid = ad.relu(ad.matmul(feats, self.params["pair.hidden.weight"]) + self.params["pair.hidden.bias"])
        return ad.matmul(hid, self.params["pair.out.weight"]) + self.params["pair.out.bias"]

    def head_logits(self, concepts: Tensor, pair_concepts: Tensor | None = None) -> Tensor:
        """Task head applied to each unweighted concept: (B, H, C)."""
        if self.cfg.pair_mode:
            if pair_concepts is None:
                raise ValueError("pair mode needs both sides' concepts")
            return self.classify_pair(concepts, pair_concepts)
        return self.classify(concepts)

    # -- full pass -----------------------------------------------------------
    def encode(
        self,
        batch: SequenceBatch,
        mode: str = "eval",
        rng=None,
        tau: float | None = None,
        head_mask=None,
        selection_override=None,
        weight_override=None,
    ) -> Encoding:
        emb, mask = self.embed(batch)
        logits, sel, soft = self.conceptize(emb, mask, mode, rng, tau)
        if selection_override is not None:
            sel = Tensor(np.asarray(selection_override, dtype=self.dtype) * mask[:, None, :])
            soft = sel
        concepts = self.encode_concepts(emb, sel, mask)
        weights = self.parameterize(emb, mask)
        if weight_override is not None:
            weights = Tensor(np.broadcast_to(np.asarray(weight_override, dtype=self.dtype), weights.shape).copy())
        agg_weights = weights if head_mask is None else weights * np.asarray(head_mask, dtype=self.dtype)
        rep = self.aggregate(concepts, agg_weights)
        return Encoding(mask, emb, logits, sel, soft, concepts, weights, rep)

    def forward(self, batch: SequenceBatch, mode: str = "eval", rng=None, tau=None, head_mask=None, **overrides):
        """Run the model; ``head_mask`` (B, H) zeroes heads' terms in the aggregate."""
        if mode not in MODES:
            raise ValueError(f"unknown mode {mode!r}; expected one of {MODES}")
        if self.cfg.pair_mode:
            if batch.pair is None:
                raise ValueError("pair-mode model needs a batch with a hypothesis side")
            enc_p = self.encode(batch, mode, rng, tau, head_mask, **overrides)
            enc_h = self.encode(batch.pair, mode, rng, tau, head_mask, **overrides)
            return ForwardOutput(self.classify_pair(enc_p.rep, enc_h.rep), [enc_p, enc_h])
        enc = self.encode(batch, mode, rng, tau, head_mask, **overrides)
        return ForwardOutput(self.classify(enc.rep), [enc])

    __call__ = forward

    def predict(self, batch: SequenceBatch) -> ForwardOutput:
        with ad.no_grad():
            return self.forward(batch, "eval")


# -- checkpoints ----------------------------------------------------------------


def save_checkpoint(path, model: SESM, extra_tensors: dict[str, np.ndarray] | None = None, extra: dict | None = None) -> Path:
    """Write ``manifest.json`` + ``weights.bin`` (little-endian) into directory ``path``."""
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    entries, chunks, offset = [], [], 0
    tensors = [(f"model.{k}", v.data) for k, v in model.params.items()]
    tensors += list((extra_tensors or {}).items())
    for name, arr in tensors:
        arr = np.asarray(arr)
        dt = np.dtype("<f8") if arr.dtype == np.float64 else np.dtype("<f4")
        buf = np.ascontiguousarray(arr, dtype=dt).tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset, "dtype": dt.str})
        chunks.append(buf)
        offset += len(buf)
    manifest = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "config": model.cfg.to_dict(),
        "dtype": model.dtype.name,
        "trained_epochs": model.trained_epochs,
        "tensors": entries,
        "extra": extra or {},
    }
    (out / "weights.bin").write_bytes(b"".join(chunks))
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1))
    return out


def read_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    path = Path(path)
    mpath = path / "manifest.json"
    if not mpath.exists():
        raise FileNotFoundError(f"{path}: not a checkpoint directory (no manifest.json)")
    manifest = json.loads(mpath.read_text())
    if manifest.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path}: unknown checkpoint format {manifest.get('format')!r}")
    if manifest.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {manifest.get('version')}")
    blob = (path / "weights.bin").read_bytes()
    tensors = {}
    for e in manifest["tensors"]:
        dt = np.dtype(e["dtype"])
        count = int(np.prod(e["shape"])) if e["shape"] else 1
        arr = np.frombuffer(blob, dtype=dt, count=count, offset=e["offset"])
        tensors[e["name"]] = arr.reshape(e["shape"]).astype(dt.newbyteorder("="))
    return manifest, tensors


def load_checkpoint(path) -> tuple[SESM, dict, dict[str, np.ndarray]]:
    """Returns ``(model, manifest, non-model tensors)``."""
    manifest, tensors = read_checkpoint(path)
    cfg = SesmConfig.from_dict(manifest["config"])
    model = SESM(cfg, dtype=np.dtype(manifest.get("dtype", "float32")))
    model.load_state_dict({k[len("model."):]: v for k, v in tensors.items() if k.startswith("model.")})
    model.trained_epochs = int(manifest.get("trained_epochs", 0))
    rest = {k: v for k, v in tensors.items() if not k.startswith("model.")}
    return model, manifest, rest
