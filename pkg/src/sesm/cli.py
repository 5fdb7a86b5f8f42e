"""``sesm`` command-line interface.

Exit codes: 0 success, 1 usage or configuration error, 2 data error,
3 numeric failure (divergence, non-finite values).
"""

from __future__ import annotations

import argparse
import copy
import csv
import json
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .config import RunConfig, format_value, load_config, load_spec
from .data import DataError, Dataset, generate, load_dataset, save_dataset
from .evaluation import evaluate
from .explanation import UntrainedModelError, build_prototype_catalog, explain, render_explanation
from .model import ConfigError, load_checkpoint
from .training import Trainer, TrainingDiverged, build_model

logger = logging.getLogger("sesm")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
FORMAT_SUFFIX = {"json": "json", "text": "txt", "plot-data": "csv"}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _kv(text: str) -> tuple[str, str]:
    if "=" not in text:
        raise argparse.ArgumentTypeError(f"expected key=value, got {text!r}")
    k, v = text.split("=", 1)
    return k.strip(), v.strip()


def _int_list(text: str) -> list[int]:
    try:
        vals = [int(t) for t in text.split(",") if t.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from exc
    if not vals:
        raise argparse.ArgumentTypeError("empty list")
    return vals


# -- shared helpers -----------------------------------------------------------------


def _load_data(path) -> Dataset:
    p = Path(path)
    if not p.exists():
        raise DataError(f"{p}: no such dataset")
    return load_dataset(p)


def _split(ds: Dataset, name: str) -> Dataset:
    if name == "all":
        return ds
    sub = ds.split_subset(name)
    if len(sub) == 0:
        raise DataError(f"dataset has no items in split {name!r}")
    return sub


def _load_model(path):
    p = Path(path)
    if not (p / "manifest.json").exists():
        raise DataError(f"{p}: not a checkpoint directory")
    try:
        return load_checkpoint(p)
    except (ValueError, KeyError) as exc:
        raise DataError(f"{p}: cannot load checkpoint ({exc})") from exc


def _run_overrides(args) -> dict[str, str]:
    ov = dict(args.set or [])
    for flag, key in (("seed", "train.seed"), ("epochs", "train.epochs"), ("heads", "model.num_heads"),
                      ("lr", "train.learning_rate"), ("batch_size", "train.batch_size")):
        val = getattr(args, flag, None)
        if val is not None:
            ov[key] = str(val)
    if getattr(args, "class_weights", None) is not None:
        ov["train.class_weighting"] = format_value(args.class_weights)
    if getattr(args, "out", None):
        ov["out"] = args.out
    return ov


def _fit_to_data(cfg: RunConfig, ds: Dataset) -> None:
    """Fill the model fields that the data determines."""
    m = cfg.model
    m.input_mode = ds.mode
    m.num_classes = ds.num_classes
    m.pair_mode = ds.pair_mode
    if ds.mode == "tokens":
        m.vocab_size = len(ds.vocab)
        longest = max(len(s) for s in ds.sequences)
        if ds.pair_mode:
            longest = max(longest, max(len(s) for s in ds.pairs))
    else:
        longest = -(-max(len(s) for s in ds.sequences) // m.conv_embed_stride)
    if longest > m.max_len:
        logger.info("raising model.max_len from %d to %d to fit the data", m.max_len, longest)
        m.max_len = longest


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


# -- commands -----------------------------------------------------------------------


def cmd_gen_data(args) -> int:
    spec = load_spec(args.spec, dict(args.set or []))
    if args.seed is not None:
        spec.seed = args.seed
    ds = generate(spec)
    out = _out_dir(args)
    manifest = save_dataset(ds, out)
    print(f"wrote {len(ds)} items to {out} (content hash {ds.content_hash()})")
    logger.info("manifest: %s", manifest)
    return EXIT_OK


def _train_one(cfg: RunConfig, ds: Dataset, out: Path, dtype: str = "float32", resume=None) -> dict:
    """Train on the train split, keep final and best-validation checkpoints; returns a summary."""
    train_set = _split(ds, "train")
    val_set = ds.split_subset("val")
    val_set = val_set if len(val_set) else None
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.resolved").write_text(cfg.dumps())
    log_path = out / "history.jsonl"
    ckpt = out / "checkpoints"
    if resume:
        trainer = Trainer.load(resume, train_set, val_set, log_path)
        trainer.cfg.epochs = cfg.train.epochs
    else:
        log_path.unlink(missing_ok=True)
        model = build_model(cfg.model, cfg.train.seed, np.dtype(dtype))
        trainer = Trainer(model, train_set, cfg.train, val_set, log_path)
    best = -1.0
    if trainer.epoch == 0:
        trainer.save(ckpt / "best")
    try:
        while trainer.epoch < cfg.train.epochs:
            rec = trainer.run_epoch()
            if cfg.train.checkpoint_every and trainer.epoch % cfg.train.checkpoint_every == 0:
                trainer.save(ckpt / f"epoch-{trainer.epoch:04d}")
            score = rec.get("val_acc", rec["train_acc"])
            if score > best:
                best = score
                trainer.save(ckpt / "best")
            logger.info("epoch %d: %s", rec["epoch"], {k: v for k, v in rec.items() if k != "epoch"})
    except TrainingDiverged as exc:
        diag = {"error": str(exc), "last_finite_losses": exc.last_finite, "epoch": trainer.epoch,
                "history": trainer.history}
        (out / "divergence.json").write_text(json.dumps(diag, indent=1))
        trainer.save(ckpt / "last")
        raise
    trainer.save(ckpt / "final")
    return {"epochs": trainer.epoch, "best_score": best, "history": trainer.history, "model": trainer.model}


def cmd_train(args) -> int:
    cfg = load_config(args.config, _run_overrides(args))
    ds = _load_data(args.data)
    _fit_to_data(cfg, ds)
    errs = cfg.validate()
    if errs:
        raise ConfigError(errs)
    out = _out_dir(args)
    res = _train_one(cfg, ds, out, args.dtype, args.resume)
    last = res["history"][-1] if res["history"] else {}
    print(f"trained {res['epochs']} epochs; final train_acc={last.get('train_acc', float('nan')):.4f}"
          f" val_acc={last.get('val_acc', float('nan')):.4f}; checkpoints in {out / 'checkpoints'}")
    return EXIT_OK


def cmd_eval(args) -> int:
    model, _, _ = _load_model(args.checkpoint)
    ds = _split(_load_data(args.data), args.split)
    if ds.mode != model.cfg.input_mode:
        raise DataError(f"dataset mode {ds.mode!r} does not match checkpoint input_mode {model.cfg.input_mode!r}")
    report = evaluate(model, ds, args.batch_size)
    out = _out_dir(args)
    (out / "eval_report.json").write_text(report.to_json())
    print(report.table())
    return EXIT_OK


def _parse_ids(text: str, ds: Dataset) -> list[int]:
    try:
        ids = [int(t) for t in text.split(",") if t.strip()]
    except ValueError as exc:
        raise UsageError(f"--ids must be comma-separated integers, got {text!r}") from exc
    known = set(ds.ids.tolist())
    missing = [i for i in ids if i not in known]
    if missing:
        raise DataError(f"unknown ids {missing}; available ids {int(ds.ids.min())}..{int(ds.ids.max())}")
    return ids


def cmd_explain(args) -> int:
    model, _, _ = _load_model(args.checkpoint)
    ds = _load_data(args.data)
    ids = _parse_ids(args.ids, ds)
    out = _out_dir(args)
    for i in ids:
        expl = explain(model, ds, i, allow_untrained=args.allow_untrained)
        text = render_explanation(expl, ds, args.format)
        path = out / f"explain-{i}.{FORMAT_SUFFIX[args.format]}"
        path.write_text(text if text.endswith("\n") else text + "\n")
        if args.format == "text":
            print(text)
        print(f"wrote {path}")
    return EXIT_OK


def cmd_prototypes(args) -> int:
    if args.k < 1:
        raise UsageError("--k must be >= 1")
    model, _, _ = _load_model(args.checkpoint)
    ds = _split(_load_data(args.data), args.split)
    if model.trained_epochs == 0 and not args.allow_untrained:
        raise UntrainedModelError("checkpoint is untrained; pass --allow-untrained to build a catalog anyway")
    catalog = build_prototype_catalog(model, ds, args.k)
    out = _out_dir(args)
    (out / "catalog.json").write_text(catalog.to_json())
    if args.plot_data:
        with (out / "catalog-plot-data.csv").open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["head_id", "rank", "input_id", "position", "value", "selected"])
            stride = model.cfg.conv_embed_stride if model.cfg.input_mode == "real" else 1
            kernel = model.cfg.conv_embed_kernel if model.cfg.input_mode == "real" else 1
            for h, entries in enumerate(catalog.heads):
                for rank, e in enumerate(entries):
                    seq = ds.sequences[ds.position(e.input_id)]
                    chosen = np.zeros(len(seq), dtype=bool)
                    for j in e.indices:
                        chosen[j * stride: j * stride + kernel] = True
                    for pos, v in enumerate(seq):
                        w.writerow([h, rank, e.input_id, pos, v, int(chosen[pos])])
    for h, entries in enumerate(catalog.heads):
        ids = ", ".join(f"{e.input_id}({e.activation:.3f})" for e in entries)
        print(f"head {h}: {ids}")
    print(f"wrote {out / 'catalog.json'}")
    return EXIT_OK


SWEEP_FIELDS = ["heads", "accuracy", "macro_precision", "macro_recall", "aopc", "diversity", "epochs"]


def _sweep_run(cfg: RunConfig, ds: Dataset, heads: int, out: Path, dtype: str) -> dict:
    cfg.model.num_heads = heads
    res = _train_one(cfg, ds, out / f"heads-{heads}", dtype)
    test = ds.split_subset("test")
    report = evaluate(res["model"], test if len(test) else ds)
    (out / f"heads-{heads}" / "eval_report.json").write_text(report.to_json())
    return {"heads": heads, "accuracy": report.accuracy, "macro_precision": report.macro_precision,
            "macro_recall": report.macro_recall, "aopc": report.aopc, "diversity": report.diversity,
            "epochs": res["epochs"]}


def _write_sweep(path: Path, rows: list[dict]) -> None:
    with path.open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=SWEEP_FIELDS)
        w.writeheader()
        for r in rows:
            w.writerow({k: ("n/a" if r[k] is None else r[k]) for k in SWEEP_FIELDS})


def cmd_sweep_heads(args) -> int:
    base = load_config(args.config, _run_overrides(args))
    ds = _load_data(args.data)
    _fit_to_data(base, ds)
    errs = []
    for h in args.heads_list:
        if h < 1:
            errs.append(f"--heads: {h} is not a positive head count")
    errs += base.validate()
    if errs:
        raise ConfigError(errs)
    out = _out_dir(args)
    (out / "config.resolved").write_text(base.dumps())
    table = out / "sweep.csv"
    rows: list[dict] = []
    try:
        if args.parallel > 1:
            with ProcessPoolExecutor(args.parallel) as pool:
                futures = [pool.submit(_sweep_run, copy.deepcopy(base), ds, h, out, args.dtype)
                           for h in args.heads_list]
                for fut in futures:
                    rows.append(fut.result())
                    _write_sweep(table, rows)
        else:
            for h in args.heads_list:
                rows.append(_sweep_run(copy.deepcopy(base), ds, h, out, args.dtype))
                _write_sweep(table, rows)
    finally:
        _write_sweep(table, rows)
    print(f"{'H':>4} {'Acc.':>7} {'AOPC':>7} {'L_div':>8}")
    for r in rows:
        aopc = "n/a" if r["aopc"] is None else f"{r['aopc']:.3f}"
        print(f"{r['heads']:>4} {r['accuracy']:7.3f} {aopc:>7} {r['diversity']:8.4f}")
    print(f"wrote {table}")
    return EXIT_OK


# -- parser -------------------------------------------------------------------------


def _add_run_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="flat key = value run config file")
    p.add_argument("--data", required=True, help="dataset directory written by gen-data (or a .csv/.jsonl file)")
    p.add_argument("--out", required=True, help="output directory; created if missing")
    p.add_argument("--set", action="append", type=_kv, metavar="KEY=VALUE",
                   help="override one config key, e.g. --set loss.locality=0.2 (repeatable)")
    p.add_argument("--seed", type=int, help="override train.seed")
    p.add_argument("--epochs", type=int, help="override train.epochs")
    p.add_argument("--lr", type=float, help="override train.learning_rate")
    p.add_argument("--batch-size", type=int, help="override train.batch_size")
    p.add_argument("--class-weights", action=argparse.BooleanOptionalAction, default=None,
                   help="weight the task loss by inverse class frequency")
    p.add_argument("--dtype", choices=("float32", "float64"), default="float32", help="parameter precision")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="sesm", description="Train, evaluate and explain selective sequence models.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-data", help="generate or import a dataset")
    p.add_argument("--spec", help="dataset spec file (key = value; keys as in data.*)")
    p.add_argument("--out", required=True, help="output directory; created if missing")
    p.add_argument("--seed", type=int, help="override the dataset seed")
    p.add_argument("--set", action="append", type=_kv, metavar="KEY=VALUE", help="override one spec key (repeatable)")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a model; writes final and best-validation checkpoints")
    _add_run_flags(p)
    p.add_argument("--heads", type=int, help="override model.num_heads")
    p.add_argument("--resume", help="continue from a checkpoint written by train")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint: accuracy, macro P/R, AOPC, per-head stats")
    p.add_argument("--checkpoint", required=True, help="checkpoint directory")
    p.add_argument("--data", required=True, help="dataset directory or file")
    p.add_argument("--split", choices=("train", "val", "test", "all"), default="test", help="split to evaluate")
    p.add_argument("--out", required=True, help="directory for eval_report.json")
    p.add_argument("--batch-size", type=int, default=256, help="evaluation batch size")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("explain", help="write per-input explanations")
    p.add_argument("--checkpoint", required=True, help="checkpoint directory")
    p.add_argument("--data", required=True, help="dataset directory or file")
    p.add_argument("--ids", required=True, help="comma-separated input ids")
    p.add_argument("--format", choices=tuple(FORMAT_SUFFIX), default="text", help="artifact format")
    p.add_argument("--out", required=True, help="directory for the artifacts")
    p.add_argument("--allow-untrained", action="store_true", help="explain even if the checkpoint was never trained")
    p.set_defaults(func=cmd_explain)

    p = sub.add_parser("prototypes", help="build the per-head prototype catalog")
    p.add_argument("--checkpoint", required=True, help="checkpoint directory")
    p.add_argument("--data", required=True, help="dataset directory or file")
    p.add_argument("--k", type=int, default=10, help="entries per head")
    p.add_argument("--split", choices=("train", "val", "test", "all"), default="train", help="split to scan")
    p.add_argument("--out", required=True, help="directory for catalog.json")
    p.add_argument("--plot-data", action="store_true", help="also write catalog-plot-data.csv")
    p.add_argument("--allow-untrained", action="store_true", help="accept a checkpoint that was never trained")
    p.set_defaults(func=cmd_prototypes)

    p = sub.add_parser("sweep-heads", help="train and evaluate one model per head count")
    _add_run_flags(p)
    p.add_argument("--heads", dest="heads_list", type=_int_list, default=[2, 4, 8, 16],
                   help="comma-separated head counts (default 2,4,8,16)")
    p.add_argument("--parallel", type=int, default=1, help="worker processes (default 1, sequential)")
    p.set_defaults(func=cmd_sweep_heads)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, UsageError) as exc:
        errors = exc.errors if isinstance(exc, ConfigError) else [str(exc)]
        for e in errors:
            print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, FileNotFoundError, KeyError, UntrainedModelError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (TrainingDiverged, ad.NumericError, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except OSError as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
