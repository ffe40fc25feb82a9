"""Trained models shared by the slow tests, cached on disk.

Cache entries are keyed by the recipe and a hash of the package sources that
training depends on, so editing them retrains instead of reusing stale weights.  Set
``ORDERMARG_TEST_CACHE`` to move the cache.
"""
from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np

import ordermarg
from ordermarg.classifier import STRATEGIES, score_dataset
from ordermarg.data import (MixtureSpec, ShapeSpec, apply_corruption, make_mixture_dataset,
                            make_shape_dataset)
from ordermarg.fileio import read_codebook, write_codebook
from ordermarg.model import ModelConfig
from ordermarg.tokenizer import encode_batch, extract_patches, fit_codebook
from ordermarg.train import (ImageSource, TokenSource, TrainConfig, checkpoint_load,
                             checkpoint_save, new_state, train)

CACHE = Path(os.environ.get("ORDERMARG_TEST_CACHE",
                            Path(__file__).resolve().parents[1] / ".cache" / "trained"))

MIXTURE_SPEC = dict(n_classes=8, n_tokens=16, vocab=16, concentration=1.0)
MIXTURE_PER_CLASS = 1000
MIXTURE_MODEL = dict(n_layers=2, n_heads=4, d_model=64, d_ff=128)
MIXTURE_TRAIN = dict(steps=2000, warmup=200, peak_lr=3e-3, batch_size=32, weight_decay=0.01,
                     log_every=100)

SHAPE_PER_CLASS = 1000
SHAPE_PATCH = 8
SHAPE_VOCAB = 64
SHAPE_MODEL = dict(n_layers=2, n_heads=4, d_model=64, d_ff=128)
SHAPE_TRAIN = dict(steps=8000, warmup=800, peak_lr=2e-3, batch_size=32, weight_decay=0.05,
                   log_every=100)


NOT_TRAINING = {"cli.py", "bench.py"}


@lru_cache(maxsize=None)
def source_hash() -> str:
    root = Path(ordermarg.__file__).parent
    h = hashlib.sha256()
    for path in sorted(root.rglob("*.py")):
        if path.name in NOT_TRAINING:
            continue
        h.update(path.relative_to(root).as_posix().encode())
        h.update(path.read_bytes())
    return h.hexdigest()[:16]


def _key(recipe: dict) -> str:
    blob = json.dumps({"recipe": recipe, "src": source_hash()}, sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:20]


def _train_cached(recipe: dict, build):
    """Load the checkpoint for ``recipe`` or train it with ``build()`` and save it.

    Returns the state, the training log rows (step, loss) and the training
    wall-clock seconds recorded when the run was made.
    """
    path = CACHE / _key(recipe)
    if not (path / "manifest.json").exists():
        path.mkdir(parents=True, exist_ok=True)
        log = path / "metrics.csv"
        log.unlink(missing_ok=True)
        state, source = build()
        train(state, source, log_path=log)
        checkpoint_save(state, path)
    lines = (path / "metrics.csv").read_text().splitlines()[1:]
    rows = [(int(r.split(",")[0]), float(r.split(",")[1])) for r in lines]
    return checkpoint_load(path), rows, float(lines[-1].split(",")[3])


@dataclass
class MixtureRun:
    spec: MixtureSpec
    train: object
    test: object
    model: object
    log: list
    train_seconds: float


@lru_cache(maxsize=None)
def mixture_run(seed: int) -> MixtureRun:
    spec = MixtureSpec(seed=seed, **MIXTURE_SPEC)
    ds = make_mixture_dataset(spec, MIXTURE_PER_CLASS)
    tr, te = ds.subset("train"), ds.subset("test")
    mcfg = ModelConfig(n_tokens=spec.n_tokens, vocab=spec.vocab, n_classes=spec.n_classes,
                       **MIXTURE_MODEL)
    tcfg = TrainConfig(mode="random_order", seed=seed, **MIXTURE_TRAIN)
    recipe = {"kind": "mixture", "spec": spec.to_dict(), "per_class": MIXTURE_PER_CLASS,
              "model": mcfg.to_dict(), "train": tcfg.to_dict()}
    state, log, seconds = _train_cached(recipe, lambda: (new_state(mcfg, tcfg),
                                                         TokenSource(tr.tokens, tr.labels)))
    return MixtureRun(spec, tr, te, state.model, log, seconds)


@dataclass
class ShapeRun:
    """A shape dataset, its codebook and the raster and random-order models trained on it."""
    seed: int
    train: object
    test: object
    codebook: object
    test_tokens: np.ndarray
    random_order: object
    raster: object
    logs: dict


@lru_cache(maxsize=None)
def shape_splits(seed: int):
    ds = make_shape_dataset(ShapeSpec(n_per_class=SHAPE_PER_CLASS, seed=seed))
    return ds.subset("train"), ds.subset("test")


@lru_cache(maxsize=None)
def shape_codebook(seed: int, vocab: int = SHAPE_VOCAB):
    """k-means codebook on the training patches of shape dataset ``seed``, cached on disk."""
    tr, _ = shape_splits(seed)
    recipe = {"kind": "codebook", "seed": seed, "per_class": SHAPE_PER_CLASS,
              "patch": SHAPE_PATCH, "vocab": vocab}
    path = CACHE / f"{_key(recipe)}.codebook"
    if not path.exists():
        patches = extract_patches(tr.images, SHAPE_PATCH, SHAPE_PATCH).reshape(-1, SHAPE_PATCH ** 2)
        path.parent.mkdir(parents=True, exist_ok=True)
        write_codebook(path, fit_codebook(patches, vocab, 30, seed, SHAPE_PATCH, SHAPE_PATCH))
    return read_codebook(path)


def shape_data(seed: int):
    tr, te = shape_splits(seed)
    return tr, te, shape_codebook(seed)


@lru_cache(maxsize=None)
def shape_run(seed: int) -> ShapeRun:
    tr, te, cb = shape_data(seed)
    n = (32 // SHAPE_PATCH) ** 2
    mcfg = ModelConfig(n_tokens=n, vocab=SHAPE_VOCAB, n_classes=tr.n_classes, **SHAPE_MODEL)
    models, logs = {}, {}
    for mode in ("random_order", "raster"):
        tcfg = TrainConfig(mode=mode, seed=seed, **SHAPE_TRAIN)
        recipe = {"kind": "shapes", "seed": seed, "per_class": SHAPE_PER_CLASS,
                  "patch": SHAPE_PATCH, "vocab": SHAPE_VOCAB,
                  "model": mcfg.to_dict(), "train": tcfg.to_dict()}
        state, logs[mode], _ = _train_cached(recipe, lambda: (new_state(mcfg, tcfg, codebook=cb),
                                                           ImageSource(tr.images, tr.labels, cb)))
        models[mode] = state.model
    return ShapeRun(seed, tr, te, cb, encode_batch(te.images, cb), models["random_order"],
                    models["raster"], logs)


EVAL_K = 20
REPORT_KS = (1, 2, 5, 10, 20)
CORRUPTION = ("gaussian_noise", 3)


def corruption_seed(seed: int) -> int:
    return 7919 + seed


@lru_cache(maxsize=None)
def shape_accuracies(seed: int) -> dict:
    """Test accuracies of both shape models, clean and corrupted, cached on disk.

    Keys look like ``clean/random/K5/lower_bound`` or ``noisy/raster/K1/lower_bound``.
    Random-order accuracies at every K come from one K=20 pass (prefix property).
    """
    recipe = {"kind": "shape-accuracies", "seed": seed, "K": EVAL_K, "corruption": CORRUPTION,
              "corruption_seed": corruption_seed(seed)}
    path = CACHE / f"{_key(recipe)}.json"
    if path.exists():
        return json.loads(path.read_text())
    run = shape_run(seed)
    noisy = apply_corruption(run.test.images, *CORRUPTION, corruption_seed(seed))
    labels = run.test.labels
    out = {}
    for name, tokens in (("clean", run.test_tokens), ("noisy", encode_batch(noisy, run.codebook))):
        scores = score_dataset(tokens, labels, EVAL_K, seed, run.random_order)
        for k in REPORT_KS:
            for strategy in STRATEGIES:
                out[f"{name}/random/K{k}/{strategy}"] = scores.first_k(k).accuracy(strategy)
        raster = score_dataset(tokens, labels, 1, seed, run.raster, ordering="raster")
        out[f"{name}/raster/K1/lower_bound"] = raster.accuracy()
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(out, indent=1, sort_keys=True))
    return out
