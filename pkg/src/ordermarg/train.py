"""Training loop, evaluation and checkpoints.

Every random choice at step ``s`` comes from ``default_rng([seed, s])``, so a
run resumed from a checkpoint replays exactly the batches, crops, noise
levels and orders of an uninterrupted run.
"""
from __future__ import annotations

import math
import time
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from . import compute as C
from .classifier import STRATEGIES, score_dataset
from .errors import ConfigError, ContractError, NonFiniteError, OrderMargError
from .fileio import read_bundle, write_bundle
from .model import AnyOrderTransformer, LikelihoodModel, ModelConfig, is_decayed
from .tokenizer import Codebook, encode_batch, noisy_encode

MODES = ("raster", "random_order")
CHECKPOINT_KIND = "ordermarg-train-state/1"


class TrainingDiverged(OrderMargError):
    """The loss or a gradient became non-finite."""


@dataclass
class TrainConfig:
    steps: int = 20000
    warmup: int = 1000
    peak_lr: float = 3e-4
    batch_size: int = 64
    weight_decay: float = 0.05
    grad_clip: float = 1.0
    mode: str = "random_order"
    noise_tmax: float = 0.0          # t ~ U[0, noise_tmax]; 0 disables latent-noise augmentation
    noise_target_flip: float = 0.15  # used when calibrating noise_tmax automatically
    crop_pad: int = 0                # pad-and-crop jitter in pixels; 0 disables
    seed: int = 0
    eval_every: int = 0
    eval_K: int = 1
    log_every: int = 100

    def __post_init__(self):
        if self.steps < 1 or not 0 <= self.warmup < self.steps:
            raise ConfigError(f"need 0 <= warmup < steps (warmup={self.warmup}, steps={self.steps})")
        if self.peak_lr < 0:
            raise ConfigError("peak_lr must be non-negative")
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be positive")
        if not 0.0 <= self.noise_tmax <= 1.0:
            raise ConfigError("noise_tmax must lie in [0, 1]")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown TrainConfig fields: {sorted(unknown)}")
        return cls(**d)


def lr_at(step: int, cfg: TrainConfig) -> float:
    """Linear warmup 0 -> peak over ``warmup`` steps, then cosine decay to 0 at ``steps``."""
    if not 0 <= step <= cfg.steps:
        raise ContractError(f"step {step} outside [0, {cfg.steps}]")
    if step < cfg.warmup:
        return cfg.peak_lr * step / cfg.warmup
    progress = (step - cfg.warmup) / (cfg.steps - cfg.warmup)
    return cfg.peak_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


class AdamW:
    """Adam with decoupled weight decay on matrices/embeddings."""

    def __init__(self, params: dict[str, C.Tensor], betas=(0.9, 0.95), eps=1e-8):
        self.params = params
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self, lr: float, weight_decay: float) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                g = np.zeros_like(p.data)
            m, v = self.m[name], self.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            update = (m / c1) / (np.sqrt(v / c2) + self.eps)
            if weight_decay and is_decayed(name):
                update = update + weight_decay * p.data
            p.data -= np.float32(lr) * update.astype(p.data.dtype)


# -- batch sources -------------------------------------------------------

class TokenSource:
    """Pre-tokenized sequences (e.g. the analytic mixture)."""

    def __init__(self, tokens: np.ndarray, labels: np.ndarray):
        if len(tokens) == 0:
            raise ContractError("empty training set")
        self.tokens = np.asarray(tokens)
        self.labels = np.asarray(labels)

    def sample(self, rng: np.random.Generator, batch: int, cfg: TrainConfig):
        idx = rng.integers(0, len(self.labels), batch)
        return self.tokens[idx], self.labels[idx]


class ImageSource:
    """Images tokenized on the fly with optional pad-and-crop and latent noise."""

    def __init__(self, images: np.ndarray, labels: np.ndarray, codebook: Codebook):
        if len(images) == 0:
            raise ContractError("empty training set")
        self.images = np.asarray(images, dtype=np.float64)
        self.labels = np.asarray(labels)
        self.codebook = codebook

    def sample(self, rng: np.random.Generator, batch: int, cfg: TrainConfig):
        idx = rng.integers(0, len(self.labels), batch)
        imgs = self.images[idx]
        if cfg.crop_pad > 0:
            imgs = random_crop(imgs, cfg.crop_pad, rng)
        if cfg.noise_tmax > 0:
            t = rng.uniform(0.0, cfg.noise_tmax, batch)
            tokens = noisy_encode(imgs, self.codebook, t, int(rng.integers(2 ** 63)))
        else:
            tokens = encode_batch(imgs, self.codebook)
        return tokens, self.labels[idx]


def random_crop(images: np.ndarray, pad: int, rng: np.random.Generator) -> np.ndarray:
    """Edge-pad by ``pad`` pixels, then crop back to size at a random offset."""
    b, h, w = images.shape[:3]
    padded = np.pad(images, ((0, 0), (pad, pad), (pad, pad)) + ((0, 0),) * (images.ndim - 3),
                    mode="edge")
    offs = rng.integers(0, 2 * pad + 1, size=(b, 2))
    return np.stack([padded[i, y:y + h, x:x + w] for i, (y, x) in enumerate(offs)])


def batch_orders(rng: np.random.Generator, batch: int, n: int, mode: str) -> np.ndarray:
    if mode == "raster":
        return np.tile(np.arange(n), (batch, 1))
    return rng.permuted(np.tile(np.arange(n), (batch, 1)), axis=1)


# -- training ------------------------------------------------------------

@dataclass
class TrainState:
    model: AnyOrderTransformer
    optimizer: AdamW
    config: TrainConfig
    step: int = 0
    extra: dict | None = None   # e.g. the codebook the model was trained on


def new_state(model_config: ModelConfig, cfg: TrainConfig, init_seed: int | None = None,
              codebook: Codebook | None = None) -> TrainState:
    model = AnyOrderTransformer(model_config, seed=cfg.seed if init_seed is None else init_seed)
    extra = {"codebook": codebook} if codebook is not None else {}
    return TrainState(model, AdamW(model.params), cfg, 0, extra)


def grad_norm(params: dict[str, C.Tensor]) -> float:
    return math.sqrt(sum(float((p.grad.astype(np.float64) ** 2).sum())
                         for p in params.values() if p.grad is not None))


def train_step(state: TrainState, tokens: np.ndarray, labels: np.ndarray,
               orders: np.ndarray) -> float:
    """One AdamW update on a batch; returns the mean cross-entropy before the update."""
    cfg, model = state.config, state.model
    if len(tokens) == 0:
        raise ContractError("empty batch")
    lr = lr_at(state.step, cfg)
    C.zero_grad(model.params.values())
    try:
        loss = model.loss(tokens, orders, labels)
        value = float(loss.data)
        C.backward(loss)
    except NonFiniteError as exc:
        raise TrainingDiverged(f"step {state.step}: {exc} (lr={lr:.3g})") from exc
    gn = grad_norm(model.params)
    if not math.isfinite(value) or not math.isfinite(gn):
        raise TrainingDiverged(f"step {state.step}: loss={value}, grad_norm={gn}, lr={lr:.3g}")
    if cfg.grad_clip and gn > cfg.grad_clip:
        scale = np.float32(cfg.grad_clip / gn)
        for p in model.params.values():
            if p.grad is not None:
                p.grad *= scale
    state.optimizer.step(lr, cfg.weight_decay)
    state.step += 1
    return value


def train(state: TrainState, source, until: int | None = None, log_path=None,
          eval_fn=None, clock=time.perf_counter) -> list[dict]:
    """Run steps ``state.step .. until - 1`` (default: to ``config.steps``).

    Appends one CSV row per ``log_every`` steps to ``log_path`` with columns
    step, loss, lr, wall_clock, eval_accuracy.
    """
    cfg = state.config
    until = cfg.steps if until is None else until
    if not state.step <= until <= cfg.steps:
        raise ContractError(f"cannot train from step {state.step} to {until}")
    n_tokens = state.model.n_tokens
    rows = []
    start = clock()
    window = []
    log = None
    if log_path is not None:
        new = not Path(log_path).exists()
        log = open(log_path, "a")
        if new:
            log.write("step,loss,lr,wall_clock,eval_accuracy\n")
    try:
        while state.step < until:
            rng = np.random.default_rng([cfg.seed, state.step])
            tokens, labels = source.sample(rng, cfg.batch_size, cfg)
            orders = batch_orders(rng, len(labels), n_tokens, cfg.mode)
            lr = lr_at(state.step, cfg)
            window.append(train_step(state, tokens, labels, orders))
            done = state.step
            if done % cfg.log_every == 0 or done == until:
                acc = ""
                if eval_fn is not None and cfg.eval_every and done % cfg.eval_every == 0:
                    acc = float(eval_fn(state.model))
                row = {"step": done, "loss": float(np.mean(window)), "lr": lr,
                       "wall_clock": clock() - start, "eval_accuracy": acc}
                rows.append(row)
                window = []
                if log is not None:
                    log.write(f"{row['step']},{row['loss']!r},{row['lr']!r},"
                              f"{row['wall_clock']:.3f},{acc if acc == '' else repr(acc)}\n")
                    log.flush()
    finally:
        if log is not None:
            log.close()
    return rows


# -- evaluation ----------------------------------------------------------

def evaluate(model: LikelihoodModel, tokens: np.ndarray, labels: np.ndarray, K: int,
             strategy: str, seed: int, threads: int = 1, ordering: str = "random") -> dict:
    """Top-1 accuracy of order-marginalized classification over a labelled set."""
    if strategy not in STRATEGIES:
        raise ContractError(f"unknown strategy {strategy!r}")
    labels = np.asarray(labels)
    if len(labels) == 0:
        raise ContractError("empty dataset")
    scores = score_dataset(tokens, labels, K, seed, model, threads=threads, ordering=ordering)
    pred = scores.predictions(strategy)
    per_class = {int(c): float(np.mean(pred[labels == c] == c))
                 for c in range(model.n_classes) if np.any(labels == c)}
    return {"accuracy": float(np.mean(pred == labels)), "per_class_accuracy": per_class,
            "K": int(K), "strategy": strategy, "seed": int(seed), "n": int(len(labels)),
            "ordering": ordering}


# -- checkpoints ---------------------------------------------------------

def checkpoint_save(state: TrainState, directory) -> None:
    tensors = {f"param/{k}": p.data for k, p in state.model.params.items()}
    tensors.update({f"adam_m/{k}": v for k, v in state.optimizer.m.items()})
    tensors.update({f"adam_v/{k}": v for k, v in state.optimizer.v.items()})
    meta = {"kind": CHECKPOINT_KIND, "model_config": state.model.config.to_dict(),
            "train_config": state.config.to_dict(), "step": state.step,
            "adam_t": state.optimizer.t, "seeds": {"train": state.config.seed}}
    cb = (state.extra or {}).get("codebook")
    if cb is not None:
        tensors.update({"codebook/centroids": cb.centroids, "codebook/mean": cb.mean,
                        "codebook/std": cb.std})
        meta["codebook"] = {"patch_h": cb.patch_h, "patch_w": cb.patch_w, "channels": cb.channels}
    write_bundle(directory, tensors, meta)


def checkpoint_load(directory, expected_model: ModelConfig | None = None,
                    expected_train: TrainConfig | None = None) -> TrainState:
    """Restore a train state; refuses on checksum or configuration mismatch."""
    tensors, meta = read_bundle(directory)
    if meta.get("kind") != CHECKPOINT_KIND:
        raise ConfigError(f"{directory}: not a training checkpoint")
    mcfg = ModelConfig(**meta["model_config"])
    tcfg = TrainConfig.from_dict(meta["train_config"])
    if expected_model is not None and expected_model != mcfg:
        raise ConfigError(f"model config mismatch:\n  checkpoint: {mcfg.to_dict()}\n"
                          f"  requested:  {expected_model.to_dict()}")
    if expected_train is not None and expected_train != tcfg:
        raise ConfigError(f"train config mismatch:\n  checkpoint: {tcfg.to_dict()}\n"
                          f"  requested:  {expected_train.to_dict()}")
    params = {k.split("/", 1)[1]: C.Tensor(v, requires_grad=True, name=k.split("/", 1)[1])
              for k, v in tensors.items() if k.startswith("param/")}
    model = AnyOrderTransformer(mcfg, params)
    opt = AdamW(model.params)
    opt.t = meta["adam_t"]
    for k in opt.m:
        opt.m[k] = tensors[f"adam_m/{k}"]
        opt.v[k] = tensors[f"adam_v/{k}"]
    extra = {}
    if "codebook" in meta:
        g = meta["codebook"]
        extra["codebook"] = Codebook(tensors["codebook/centroids"].astype(np.float64),
                                     g["patch_h"], g["patch_w"], g["channels"],
                                     mean=tensors["codebook/mean"].astype(np.float64),
                                     std=tensors["codebook/std"].astype(np.float64))
    return TrainState(model, opt, tcfg, meta["step"], extra)
