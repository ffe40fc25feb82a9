"""Command-line entry point: ``ordermarg <subcommand> [flags]``.

Every subcommand writes its outputs under ``--out`` (default ``$ORDERMARG_OUT``
or ``./ordermarg-out``) together with ``run-<subcommand>.json``, a manifest
listing the resolved configuration, input hashes and a SHA-256 for every file
the run wrote.  ``ordermarg rerun <manifest>`` replays a recorded run.

Measured wall-clock columns (see ``fileio.TIMING_COLUMNS``) are the only
run-to-run differences with ``--threads 1``; manifest checksums blank them
and name them under ``timing_columns``.  Set ``SOURCE_DATE_EPOCH`` to pin
the manifest timestamp.

Exit codes: 0 success, 1 runtime or contract error, 2 usage error.
"""
from __future__ import annotations

import argparse
import datetime as _dt
import hashlib
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .bench import FIELDS as BENCH_FIELDS
from .bench import sweep_K
from .classifier import (ORDERINGS, STRATEGIES, accuracy_by_prefix, dataset_discriminative_maps,
                         discriminative_map, draw_orders, image_seed, per_token_accuracy,
                         score_dataset)
from .data import (CORRUPTIONS, SHAPES, ImageDataset, MixtureSpec, ShapeSpec, apply_corruption,
                   make_mixture_dataset, make_shape_dataset)
from .errors import ConfigError, OrderMargError
from .fileio import (atomic_write_text, dumps, read_codebook, read_dataset, sha256_file,
                     write_codebook, timing_columns, untimed_sha256, write_grid_csv,
                     write_image_dataset, write_pgm,
                     write_records_csv, write_token_dataset)
from .model import ModelConfig
from .tokenizer import (calibrate_noise_tmax, encode_batch, extract_patches, fit_codebook,
                        grid_shape, noise_curve, noisy_encode)
from .train import (ImageSource, TokenSource, TrainConfig, checkpoint_load, checkpoint_save,
                    evaluate, new_state, train)

OUT_ENV = "ORDERMARG_OUT"
DEFAULT_OUT = "ordermarg-out"


class UsageError(Exception):
    """Bad flags or a malformed configuration file (exit code 2)."""


def _int_list(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from exc


def _float_list(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from exc


# -- run bookkeeping -----------------------------------------------------

class Run:
    """Collects written files and input hashes for the manifest."""

    def __init__(self, args: argparse.Namespace, argv: list[str]):
        self.args = args
        self.argv = argv
        self.out = Path(args.out)
        self.out.mkdir(parents=True, exist_ok=True)
        self.outputs: list[Path] = []
        self.inputs: dict[str, str] = {}

    def path(self, name: str) -> Path:
        p = self.out / name
        p.parent.mkdir(parents=True, exist_ok=True)
        return p

    def wrote(self, *paths) -> None:
        for p in paths:
            p = Path(p)
            if p.is_dir():
                self.outputs.extend(sorted(q for q in p.rglob("*") if q.is_file()))
            else:
                self.outputs.append(p)

    def used(self, path) -> None:
        if path:
            self.inputs[str(path)] = content_hash(path)

    def finish(self) -> Path:
        files, timing = {}, {}
        for p in self.outputs:
            if p.exists():
                name = p.relative_to(self.out).as_posix()
                files[name] = untimed_sha256(p)
                if timing_columns(p):
                    timing[name] = timing_columns(p)
        config = {k: v for k, v in sorted(vars(self.args).items())
                  if k not in ("handler", "config", "out")}
        manifest = {
            "tool": f"ordermarg {__version__}",
            "subcommand": self.args.command,
            "argv": self.argv,
            "cwd": os.getcwd(),
            "config": config,
            "seeds": {k: v for k, v in config.items() if "seed" in k},
            "inputs": self.inputs,
            "outputs": dict(sorted(files.items())),
            "timing_columns": timing,
            "timestamp": timestamp(),
        }
        path = self.out / f"run-{self.args.command}.json"
        atomic_write_text(path, dumps(manifest))
        return path


def timestamp() -> str:
    """UTC time of the run; honours ``SOURCE_DATE_EPOCH`` for reproducible manifests."""
    epoch = os.environ.get("SOURCE_DATE_EPOCH")
    when = (_dt.datetime.fromtimestamp(int(epoch), _dt.timezone.utc) if epoch
            else _dt.datetime.now(_dt.timezone.utc).replace(microsecond=0))
    return when.isoformat()


def content_hash(path) -> str:
    """SHA-256 of a file, or of the sorted (relative path, file hash) list of a directory."""
    path = Path(path)
    if path.is_file():
        return sha256_file(path)
    if not path.is_dir():
        raise ConfigError(f"input {path} does not exist")
    lines = [f"{q.relative_to(path).as_posix()} {sha256_file(q)}"
             for q in sorted(path.rglob("*")) if q.is_file()]
    return hashlib.sha256("\n".join(lines).encode()).hexdigest()


# -- shared loading ------------------------------------------------------

def load_model(run: Run):
    run.used(run.args.checkpoint)
    return checkpoint_load(run.args.checkpoint)


def load_eval_tokens(run: Run, state=None):
    """Tokens and labels of the requested split, tokenizing images if needed."""
    args = run.args
    run.used(args.data)
    ds, manifest = read_dataset(args.data)
    ds = ds.subset(args.split) if args.split != "all" else ds
    if len(ds) == 0:
        raise ConfigError(f"split {args.split!r} of {args.data} is empty")
    if args.limit:
        ds = ds.head(args.limit)
    if isinstance(ds, ImageDataset):
        images = ds.images
        if args.corruption != "none":
            images = apply_corruption(images, args.corruption, args.severity, args.corruption_seed)
        cb = _codebook(run, state)
        return encode_batch(images, cb), ds.labels, grid_shape(images.shape[1:], cb)
    if args.corruption != "none":
        raise ConfigError("corruptions apply to image datasets only")
    return ds.tokens, ds.labels, ds.grid


def _codebook(run: Run, state=None):
    if getattr(run.args, "codebook", None):
        run.used(run.args.codebook)
        return read_codebook(run.args.codebook)
    cb = (state.extra or {}).get("codebook") if state is not None else None
    if cb is None:
        raise ConfigError("image data needs --codebook (the checkpoint carries none)")
    return cb


def ordering_for(run: Run, state) -> str:
    """``--ordering``, defaulting to the order family the checkpoint was trained on."""
    if run.args.ordering != "auto":
        return run.args.ordering
    return "raster" if state.config.mode == "raster" else "random"


def _check_classes(model, labels):
    if labels.size and labels.max() >= model.n_classes:
        raise ConfigError(f"labels reach {labels.max()} but the model has {model.n_classes} classes")


# -- subcommands ---------------------------------------------------------

def cmd_make_data(run: Run) -> None:
    a = run.args
    target = run.path("dataset")
    if a.kind == "mixture":
        spec = MixtureSpec(n_classes=a.classes, n_tokens=a.tokens, vocab=a.vocab,
                           concentration=a.concentration, seed=a.seed)
        ds = make_mixture_dataset(spec, a.per_class)
        write_token_dataset(target, ds.tokens, ds.labels, ds.split, ds.grid, ds.vocab,
                            ds.n_classes, spec.to_dict())
    else:
        classes = tuple(a.shapes.split(",")) if a.shapes else SHAPES
        spec = ShapeSpec(image_size=a.image_size, classes=classes, n_per_class=a.per_class,
                         seed=a.seed)
        ds = make_shape_dataset(spec)
        images = ds.images
        meta = spec.to_dict() | {"n_classes": spec.n_classes}
        if a.corruption != "none":
            images = apply_corruption(images, a.corruption, a.severity, a.corruption_seed)
            meta["corruption"] = {"kind": a.corruption, "severity": a.severity,
                                  "seed": a.corruption_seed}
        write_image_dataset(target, images, ds.labels, ds.split, meta, ds.class_names)
    run.wrote(target)


def cmd_fit_codebook(run: Run) -> None:
    a = run.args
    run.used(a.data)
    ds, _ = read_dataset(a.data)
    if not isinstance(ds, ImageDataset):
        raise ConfigError("fit-codebook needs an image dataset")
    images = ds.subset("train").images
    patches = extract_patches(images, a.patch, a.patch).reshape(-1, a.patch * a.patch)
    cb = fit_codebook(patches, a.vocab, a.iters, a.seed, a.patch, a.patch)
    path = run.path("codebook.bin")
    write_codebook(path, cb)
    objective = [{"iteration": i, "objective": float(v)} for i, v in enumerate(cb.history)]
    write_records_csv(run.path("codebook_objective.csv"), objective, ["iteration", "objective"])
    run.wrote(path, run.path("codebook_objective.csv"))


def cmd_tokenize(run: Run) -> None:
    a = run.args
    run.used(a.data)
    run.used(a.codebook)
    ds, manifest = read_dataset(a.data)
    if not isinstance(ds, ImageDataset):
        raise ConfigError("tokenize needs an image dataset")
    cb = read_codebook(a.codebook)
    tokens = (noisy_encode(ds.images, cb, a.noise_t, a.seed) if a.noise_t > 0
              else encode_batch(ds.images, cb))
    grid = grid_shape(ds.images.shape[1:], cb)
    target = run.path("tokens")
    write_token_dataset(target, tokens, ds.labels, ds.split, grid, cb.vocab, ds.n_classes,
                        {"source": manifest.get("spec", {}), "noise_t": a.noise_t})
    run.wrote(target)


def train_config_from(a) -> TrainConfig:
    if a.noise_tmax != "auto":
        try:
            float(a.noise_tmax)
        except ValueError:
            raise ConfigError(f"--noise-tmax must be a number or 'auto', got {a.noise_tmax!r}")
    return TrainConfig(steps=a.steps, warmup=a.warmup, peak_lr=a.peak_lr, batch_size=a.batch_size,
                       weight_decay=a.weight_decay, grad_clip=a.grad_clip, mode=a.mode,
                       noise_tmax=0.0 if a.noise_tmax == "auto" else float(a.noise_tmax),
                       noise_target_flip=a.noise_target_flip, crop_pad=a.crop_pad, seed=a.seed,
                       eval_every=a.eval_every, eval_K=a.eval_k, log_every=a.log_every)


def cmd_train(run: Run) -> None:
    a = run.args
    run.used(a.data)
    ds, _ = read_dataset(a.data)
    tcfg = train_config_from(a)
    cb = None
    if isinstance(ds, ImageDataset):
        if not a.codebook:
            raise ConfigError("training on images needs --codebook")
        run.used(a.codebook)
        cb = read_codebook(a.codebook)
        tr = ds.subset("train")
        if a.noise_tmax == "auto":
            tmax = calibrate_noise_tmax(tr.images[:500], cb, tcfg.noise_target_flip, a.seed)
            tcfg = TrainConfig.from_dict(tcfg.to_dict() | {"noise_tmax": tmax})
        source = ImageSource(tr.images, tr.labels, cb)
        n_tokens = int(np.prod(grid_shape(tr.images.shape[1:], cb)))
        vocab, val = cb.vocab, ds.subset("val")
        val_tokens = encode_batch(val.images, cb) if len(val) else None
    else:
        if tcfg.crop_pad or a.noise_tmax == "auto" or tcfg.noise_tmax > 0:
            raise ConfigError("crop and latent-noise augmentation need an image dataset")
        tr, val = ds.subset("train"), ds.subset("val")
        source = TokenSource(tr.tokens, tr.labels)
        n_tokens, vocab = tr.tokens.shape[1], ds.vocab
        val_tokens = val.tokens if len(val) else None
    mcfg = ModelConfig(n_layers=a.layers, n_heads=a.heads, d_model=a.d_model, d_ff=a.d_ff,
                       n_tokens=n_tokens, vocab=vocab, n_classes=ds.n_classes)
    if a.resume:
        run.used(a.resume)
        state = checkpoint_load(a.resume, expected_model=mcfg, expected_train=tcfg)
    else:
        state = new_state(mcfg, tcfg, codebook=cb)
    eval_fn = None
    if tcfg.eval_every and val_tokens is not None:
        ordering = "raster" if tcfg.mode == "raster" else "random"
        eval_fn = lambda m: evaluate(m, val_tokens, val.labels, tcfg.eval_K, "lower_bound",
                                     a.seed, ordering=ordering)["accuracy"]
    log = run.path("metrics.csv")
    if not a.resume and log.exists():
        log.unlink()
    if a.until is not None and not state.step <= a.until <= tcfg.steps:
        raise ConfigError(f"--until {a.until} outside [{state.step}, {tcfg.steps}]")
    train(state, source, until=a.until, log_path=log, eval_fn=eval_fn)
    ck = run.path("checkpoint")
    checkpoint_save(state, ck)
    run.wrote(log, ck)


def cmd_eval(run: Run) -> None:
    a = run.args
    state = load_model(run)
    tokens, labels, _ = load_eval_tokens(run, state)
    _check_classes(state.model, labels)
    ordering = ordering_for(run, state)
    scores = score_dataset(tokens, labels, a.k, a.seed, state.model, threads=a.threads,
                           ordering=ordering)
    per_class = scores.scores(a.strategy)
    pred = np.argmax(per_class, axis=1)
    rec = {"accuracy": float(np.mean(pred == labels)), "K": a.k, "strategy": a.strategy,
           "ordering": ordering, "seed": a.seed, "n": int(len(labels)),
           "per_class_accuracy": {int(c): float(np.mean(pred[labels == c] == c))
                                  for c in np.unique(labels)}}
    fields = ["index", "label", "prediction"] + [f"score_{c}" for c in range(per_class.shape[1])]
    rows = [{"index": i, "label": int(labels[i]), "prediction": int(pred[i]),
             **{f"score_{c}": float(v) for c, v in enumerate(per_class[i])}}
            for i in range(len(labels))]
    write_records_csv(run.path("predictions.csv"), rows, fields)
    rec |= {"dataset": str(a.data), "split": a.split, "corruption": a.corruption,
            "severity": a.severity if a.corruption != "none" else None}
    atomic_write_text(run.path("eval.json"), dumps(rec))
    run.wrote(run.path("predictions.csv"), run.path("eval.json"))
    print(f"accuracy {rec['accuracy']:.4f} (K={a.k}, {a.strategy}, n={rec['n']})")


def cmd_heatmap(run: Run) -> None:
    a = run.args
    state = load_model(run)
    tokens, labels, grid = load_eval_tokens(run, state)
    model = state.model
    ordering = ordering_for(run, state)
    if a.average:
        scores = score_dataset(tokens, labels, a.k, a.seed, model, threads=a.threads,
                               ordering=ordering)
        heat, _ = dataset_discriminative_maps(scores, a.seed)
        heat = heat.mean(axis=0).reshape(grid)
    else:
        if not 0 <= a.index < len(labels):
            raise ConfigError(f"--index {a.index} outside 0..{len(labels) - 1}")
        c_true = int(labels[a.index]) if a.c_true is None else a.c_true
        c_false = (c_true + 1) % model.n_classes if a.c_false is None else a.c_false
        orders = draw_orders(a.k, tokens.shape[1], image_seed(a.seed, a.index), ordering)
        heat = discriminative_map(tokens[a.index], c_true, c_false, model, orders=orders,
                                  grid=grid)
    write_pgm(run.path("heatmap.pgm"), heat)
    write_grid_csv(run.path("heatmap.csv"), heat)
    run.wrote(run.path("heatmap.pgm"), run.path("heatmap.pgm.txt"), run.path("heatmap.csv"))


def _dataset_scores(run: Run):
    state = load_model(run)
    tokens, labels, grid = load_eval_tokens(run, state)
    _check_classes(state.model, labels)
    return score_dataset(tokens, labels, run.args.k, run.args.seed, state.model,
                         threads=run.args.threads, ordering=ordering_for(run, state)), grid


def cmd_token_acc(run: Run) -> None:
    scores, grid = _dataset_scores(run)
    acc = per_token_accuracy(scores, grid)
    write_grid_csv(run.path("token_acc.csv"), acc)
    write_pgm(run.path("token_acc.pgm"), acc)
    run.wrote(run.path("token_acc.csv"), run.path("token_acc.pgm"), run.path("token_acc.pgm.txt"))


def cmd_prefix_curve(run: Run) -> None:
    scores, _ = _dataset_scores(run)
    curve = accuracy_by_prefix(scores)
    rows = [{"step": n + 1, "prefix_length": n, "accuracy": float(v)} for n, v in enumerate(curve)]
    write_records_csv(run.path("prefix_curve.csv"), rows, ["step", "prefix_length", "accuracy"])
    run.wrote(run.path("prefix_curve.csv"))


def cmd_drop_ablate(run: Run) -> None:
    scores, _ = _dataset_scores(run)
    n = scores.per_token.shape[-1]
    top = n - 1 if run.args.max_drop is None else min(run.args.max_drop, n - 1)
    rows = [{"n_dropped": d, "drop_first_accuracy": scores.accuracy("lower_bound", d, 0),
             "drop_last_accuracy": scores.accuracy("lower_bound", 0, d)} for d in range(top + 1)]
    fields = ["n_dropped", "drop_first_accuracy", "drop_last_accuracy"]
    write_records_csv(run.path("drop_ablate.csv"), rows, fields)
    run.wrote(run.path("drop_ablate.csv"))


def cmd_strategy_ablate(run: Run) -> None:
    a = run.args
    state = load_model(run)
    tokens, labels, _ = load_eval_tokens(run, state)
    _check_classes(state.model, labels)
    scores = score_dataset(tokens, labels, max(a.ks), a.seed, state.model, threads=a.threads,
                           ordering=ordering_for(run, state))
    rows = [{"K": k, **{s: scores.first_k(k).accuracy(s) for s in STRATEGIES}} for k in a.ks]
    write_records_csv(run.path("strategy_ablate.csv"), rows, ["K", *STRATEGIES])
    run.wrote(run.path("strategy_ablate.csv"))


def cmd_noise_study(run: Run) -> None:
    a = run.args
    run.used(a.data)
    run.used(a.codebook)
    ds, _ = read_dataset(a.data)
    if not isinstance(ds, ImageDataset):
        raise ConfigError("noise-study needs an image dataset")
    ds = ds.subset(a.split) if a.split != "all" else ds
    if a.limit:
        ds = ds.head(a.limit)
    cb = read_codebook(a.codebook)
    ts = sorted(set([0.0] + list(a.ts)))
    rows = noise_curve(ds.images, cb, ts, range(a.seed, a.seed + a.n_seeds))
    base = rows[0]["mse"]
    for r in rows:
        r["relative_mse_growth"] = (r["mse"] - base) / base if base > 0 else float("inf")
    write_records_csv(run.path("noise_study.csv"), rows,
                      ["t", "flipped_ratio", "mse", "relative_mse_growth"])
    run.wrote(run.path("noise_study.csv"))


def cmd_bench(run: Run) -> None:
    a = run.args
    state = load_model(run)
    tokens, labels, _ = load_eval_tokens(run, state)
    _check_classes(state.model, labels)
    records = sweep_K(state.model, tokens, labels, a.ks, a.strategy, a.seed, runs=a.runs,
                      warmup=a.warmup_runs, dataset_id=content_hash(a.data)[:12],
                      model_id=content_hash(a.checkpoint)[:12], threads=a.threads,
                      ordering=ordering_for(run, state))
    write_records_csv(run.path("bench.csv"), [r.to_dict() for r in records], list(BENCH_FIELDS))
    run.wrote(run.path("bench.csv"))


def cmd_rerun(run: Run) -> None:
    """Handled in :func:`main`; never reached."""
    raise AssertionError


# -- argument parsing ----------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--out", default=os.environ.get(OUT_ENV, DEFAULT_OUT),
                        help=f"output directory (default: ${OUT_ENV} or ./{DEFAULT_OUT})")
    common.add_argument("--config", help="JSON file of flag values; explicit flags win")
    common.add_argument("--seed", type=int, default=0, help="base random seed")
    common.add_argument("--threads", type=int, default=1,
                        help="worker threads for scoring; 1 is fully deterministic")

    evaldata = argparse.ArgumentParser(add_help=False)
    evaldata.add_argument("--checkpoint", required=True, help="checkpoint directory from `train`")
    evaldata.add_argument("--data", required=True, help="dataset directory (images or tokens)")
    evaldata.add_argument("--codebook", help="codebook file (default: the checkpoint's own)")
    evaldata.add_argument("--split", default="test", choices=["train", "val", "test", "all"])
    evaldata.add_argument("--limit", type=int, default=0, help="use only the first n examples")
    evaldata.add_argument("--corruption", default="none", choices=["none", *CORRUPTIONS],
                          help="corrupt images before tokenizing")
    evaldata.add_argument("--severity", type=int, default=3, choices=range(1, 6))
    evaldata.add_argument("--corruption-seed", type=int, default=1234)
    evaldata.add_argument("--k", type=int, default=1, help="orders per image")
    evaldata.add_argument("--ordering", default="auto", choices=["auto", *ORDERINGS],
                          help="sampled orders or the identity; auto follows the training mode")

    p = argparse.ArgumentParser(prog="ordermarg", description=__doc__.split("\n\n")[0])
    p.add_argument("--version", action="version", version=f"ordermarg {__version__}")
    sub = p.add_subparsers(dest="command", required=True, metavar="SUBCOMMAND")

    s = sub.add_parser("make-data", parents=[common], help="generate a mixture or shape dataset")
    s.add_argument("--kind", choices=["mixture", "shapes"], default="shapes")
    s.add_argument("--per-class", type=int, default=500)
    s.add_argument("--classes", type=int, default=8, help="mixture: number of classes")
    s.add_argument("--tokens", type=int, default=16, help="mixture: positions per sequence")
    s.add_argument("--vocab", type=int, default=16, help="mixture: vocabulary size")
    s.add_argument("--concentration", type=float, default=1.0, help="mixture: Dirichlet alpha")
    s.add_argument("--image-size", type=int, default=32, help="shapes: side length in pixels")
    s.add_argument("--shapes", default="", help=f"shapes: comma list from {','.join(SHAPES)}")
    s.add_argument("--corruption", default="none", choices=["none", *CORRUPTIONS])
    s.add_argument("--severity", type=int, default=3, choices=range(1, 6))
    s.add_argument("--corruption-seed", type=int, default=1234)
    s.set_defaults(handler=cmd_make_data)

    s = sub.add_parser("fit-codebook", parents=[common], help="k-means codebook on training patches")
    s.add_argument("--data", required=True)
    s.add_argument("--vocab", type=int, default=64)
    s.add_argument("--patch", type=int, default=4, help="square patch side in pixels")
    s.add_argument("--iters", type=int, default=30)
    s.set_defaults(handler=cmd_fit_codebook)

    s = sub.add_parser("tokenize", parents=[common], help="encode an image dataset to token grids")
    s.add_argument("--data", required=True)
    s.add_argument("--codebook", required=True)
    s.add_argument("--noise-t", type=float, default=0.0, help="latent corruption level t")
    s.set_defaults(handler=cmd_tokenize)

    d = TrainConfig()
    m = ModelConfig()
    s = sub.add_parser("train", parents=[common], help="train a raster or any-order model")
    s.add_argument("--data", required=True, help="image dataset (with --codebook) or token dataset")
    s.add_argument("--codebook")
    s.add_argument("--resume", help="checkpoint to continue from")
    s.add_argument("--until", type=int, help="stop (and checkpoint) at this step")
    s.add_argument("--mode", choices=["raster", "random_order"], default=d.mode)
    s.add_argument("--steps", type=int, default=d.steps)
    s.add_argument("--warmup", type=int, default=d.warmup)
    s.add_argument("--peak-lr", type=float, default=d.peak_lr)
    s.add_argument("--batch-size", type=int, default=d.batch_size)
    s.add_argument("--weight-decay", type=float, default=d.weight_decay)
    s.add_argument("--grad-clip", type=float, default=d.grad_clip)
    s.add_argument("--noise-tmax", default="0",
                   help="latent-noise augmentation t ~ U[0, tmax]; 'auto' calibrates tmax")
    s.add_argument("--noise-target-flip", type=float, default=d.noise_target_flip)
    s.add_argument("--crop-pad", type=int, default=d.crop_pad)
    s.add_argument("--eval-every", type=int, default=d.eval_every)
    s.add_argument("--eval-k", type=int, default=d.eval_K)
    s.add_argument("--log-every", type=int, default=d.log_every)
    s.add_argument("--layers", type=int, default=m.n_layers)
    s.add_argument("--heads", type=int, default=m.n_heads)
    s.add_argument("--d-model", type=int, default=m.d_model)
    s.add_argument("--d-ff", type=int, default=m.d_ff)
    s.set_defaults(handler=cmd_train)

    s = sub.add_parser("eval", parents=[common, evaldata], help="top-1 accuracy with K orders")
    s.add_argument("--strategy", choices=STRATEGIES, default="lower_bound")
    s.set_defaults(handler=cmd_eval)

    s = sub.add_parser("heatmap", parents=[common, evaldata], help="discriminative map (PGM + CSV)")
    s.add_argument("--index", type=int, default=0, help="example within the split")
    s.add_argument("--c-true", type=int, help="default: the example's label")
    s.add_argument("--c-false", type=int, help="default: the next class index")
    s.add_argument("--average", action="store_true",
                   help="average maps over the split against random wrong classes")
    s.set_defaults(handler=cmd_heatmap)

    s = sub.add_parser("token-acc", parents=[common, evaldata], help="per-position accuracy grid")
    s.set_defaults(handler=cmd_token_acc)

    s = sub.add_parser("prefix-curve", parents=[common, evaldata], help="accuracy by prefix length")
    s.set_defaults(handler=cmd_prefix_curve)

    s = sub.add_parser("drop-ablate", parents=[common, evaldata],
                       help="accuracy when discarding first or last predicted tokens")
    s.add_argument("--max-drop", type=int, help="default: N-1")
    s.set_defaults(handler=cmd_drop_ablate)

    s = sub.add_parser("strategy-ablate", parents=[common, evaldata],
                       help="lower_bound vs log_mean_exp across K")
    s.add_argument("--ks", type=_int_list, default=[1, 5, 20])
    s.set_defaults(handler=cmd_strategy_ablate)

    s = sub.add_parser("noise-study", parents=[common],
                       help="flipped-token ratio and reconstruction MSE against t")
    s.add_argument("--data", required=True)
    s.add_argument("--codebook", required=True)
    s.add_argument("--split", default="test", choices=["train", "val", "test", "all"])
    s.add_argument("--limit", type=int, default=0)
    s.add_argument("--ts", type=_float_list, default=[0.05, 0.1, 0.2, 0.3, 0.4, 0.5])
    s.add_argument("--n-seeds", type=int, default=10)
    s.set_defaults(handler=cmd_noise_study)

    s = sub.add_parser("bench", parents=[common, evaldata], help="accuracy and seconds per image vs K")
    s.add_argument("--ks", type=_int_list, default=[1, 2, 5, 10, 20])
    s.add_argument("--strategy", choices=STRATEGIES, default="lower_bound")
    s.add_argument("--runs", type=int, default=30, help="timed classifications per K (>= 30)")
    s.add_argument("--warmup-runs", type=int, default=5)
    s.set_defaults(handler=cmd_bench)

    s = sub.add_parser("rerun", help="replay the run recorded in a manifest")
    s.add_argument("manifest")
    s.set_defaults(handler=cmd_rerun)
    return p


def _subparser(parser: argparse.ArgumentParser, name: str) -> argparse.ArgumentParser:
    for action in parser._subparsers._group_actions:
        if name in action.choices:
            return action.choices[name]
    raise UsageError(f"unknown subcommand {name!r}")


def parse(argv: list[str]) -> argparse.Namespace:
    """Parse flags, layering ``--config`` values under explicit flags."""
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "config", None):
        try:
            overrides = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            parser.error(f"cannot read --config {args.config}: {exc}")
        if not isinstance(overrides, dict):
            parser.error("--config must hold a JSON object")
        sp = _subparser(parser, args.command)
        known = {a.dest for a in sp._actions}
        unknown = sorted(set(k.replace("-", "_") for k in overrides) - known)
        if unknown:
            parser.error(f"unknown keys in --config: {', '.join(unknown)}")
        sp.set_defaults(**{k.replace("-", "_"): v for k, v in overrides.items()})
        args = parser.parse_args(argv)
    if getattr(args, "threads", 1) < 1:
        parser.error("--threads must be >= 1")
    if args.command == "bench" and args.runs < 30:
        parser.error("--runs must be at least 30")
    if getattr(args, "k", 1) < 1:
        parser.error("--k must be >= 1")
    return args


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = parse(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        if args.command == "rerun":
            manifest = json.loads(Path(args.manifest).read_text())
            here = os.getcwd()
            os.chdir(manifest.get("cwd", here))
            try:
                return main(manifest["argv"])
            finally:
                os.chdir(here)
        run = Run(args, argv)
        args.handler(run)
        path = run.finish()
        print(f"wrote {len(run.outputs)} file(s); manifest {path}", file=sys.stderr)
        return 0
    except (OrderMargError, ValueError, IndexError, FloatingPointError, OSError, KeyError) as exc:
        print(f"ordermarg {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
