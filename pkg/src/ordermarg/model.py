"""Any-order decoder-only transformer over interleaved position/token sequences.

For an image with N tokens, a permutation ``perm`` (``perm[n]`` = original grid
index emitted at step n) and a class c, the input has length 2N+1::

    slot 0       class embedding of c
    slot 2n+1    position-instruction embedding of perm[n]
    slot 2n+2    token embedding of x[perm[n]] + grid-position embedding of perm[n]

The hidden state at slot 2n+1 predicts x[perm[n]].  With plain causal masking
that prediction sees the class, every earlier (position, token) pair and the
position it has to fill, and nothing else.  The identity permutation gives an
ordinary raster-order model.
"""
from __future__ import annotations

import threading
from dataclasses import asdict, dataclass

import numpy as np

from . import compute as C
from .errors import ConfigError, ContractError, DimensionError, TokenIndexError


class ForwardCounter:
    """Process-wide count of model forward passes (one per scored sequence)."""

    def __init__(self):
        self._count = 0
        self._lock = threading.Lock()

    def add(self, n: int) -> None:
        with self._lock:
            self._count += int(n)

    @property
    def count(self) -> int:
        return self._count

    def reset(self) -> None:
        with self._lock:
            self._count = 0


NFE = ForwardCounter()


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int = 4
    n_heads: int = 4
    d_model: int = 128
    d_ff: int = 512
    n_tokens: int = 64
    vocab: int = 64
    n_classes: int = 8

    def __post_init__(self):
        for name in ("n_layers", "n_heads", "d_model", "d_ff", "n_tokens", "vocab", "n_classes"):
            if getattr(self, name) < 1:
                raise ConfigError(f"ModelConfig.{name} must be positive")
        if self.d_model % self.n_heads:
            raise ConfigError(f"d_model={self.d_model} not divisible by n_heads={self.n_heads}")

    @property
    def seq_len(self) -> int:
        return 2 * self.n_tokens + 1

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class OrderLogLik:
    perm: np.ndarray
    label: int
    per_token: np.ndarray

    @property
    def total(self) -> float:
        return float(np.sum(self.per_token, dtype=np.float64))


def validate_perms(perms: np.ndarray, n: int) -> np.ndarray:
    perms = np.asarray(perms)
    if perms.ndim != 2 or perms.shape[1] != n:
        raise ContractError(f"permutations must have shape [B, {n}], got {perms.shape}")
    if not np.array_equal(np.sort(perms, axis=1), np.broadcast_to(np.arange(n), perms.shape)):
        raise ContractError("not a bijection on 0..N-1")
    return perms.astype(np.int64, copy=False)


def targets_in_order(tokens: np.ndarray, perms: np.ndarray) -> np.ndarray:
    """Token emitted at each step: ``tokens[b, perms[b, n]]``."""
    return np.take_along_axis(tokens, perms, axis=1)


class LikelihoodModel:
    """Anything that returns order-conditional per-token log-probabilities.

    Subclasses implement ``_per_token`` for validated int arrays; the public
    entry points validate inputs and count one forward pass per sequence.
    """

    n_classes: int
    n_tokens: int
    vocab: int

    def _check(self, tokens, perms, classes):
        tokens = np.asarray(tokens)
        classes = np.asarray(classes)
        if tokens.ndim != 2 or tokens.shape[1] != self.n_tokens:
            raise DimensionError(f"tokens must have shape [B, {self.n_tokens}], got {tokens.shape}")
        perms = validate_perms(perms, self.n_tokens)
        if classes.shape != (tokens.shape[0],) or perms.shape[0] != tokens.shape[0]:
            raise DimensionError("tokens, perms and classes disagree on batch size")
        if tokens.size and (tokens.min() < 0 or tokens.max() >= self.vocab):
            raise TokenIndexError(f"token id outside [0, {self.vocab})")
        if classes.size and (classes.min() < 0 or classes.max() >= self.n_classes):
            raise TokenIndexError(f"class id outside [0, {self.n_classes})")
        return tokens.astype(np.int64, copy=False), perms, classes.astype(np.int64, copy=False)

    def per_token_logliks(self, tokens, perms, classes) -> np.ndarray:
        """``out[b, n] = log p(x[perm[b, n]] | prefix, class[b])`` for a batch."""
        tokens, perms, classes = self._check(tokens, perms, classes)
        out = self._per_token(tokens, perms, classes)
        NFE.add(tokens.shape[0])
        return out

    def forward_logliks(self, tokens, perm, label: int) -> OrderLogLik:
        perm = np.asarray(perm)
        per = self.per_token_logliks(np.asarray(tokens).reshape(1, -1), perm.reshape(1, -1),
                                     np.array([label]))
        return OrderLogLik(perm=perm.copy(), label=int(label), per_token=per[0])

    def _per_token(self, tokens, perms, classes) -> np.ndarray:
        raise NotImplementedError


class TabularModel(LikelihoodModel):
    """Position-wise categorical model: ``log p = log_table[c, j, x_j]``.

    The prefix is ignored, which is exact for data whose positions are
    independent given the class.
    """

    def __init__(self, log_table):
        self.log_table = np.asarray(log_table, dtype=np.float64)
        self.n_classes, self.n_tokens, self.vocab = self.log_table.shape

    def _per_token(self, tokens, perms, classes):
        emitted = targets_in_order(tokens, perms)
        return self.log_table[classes[:, None], perms, emitted]


class UniformModel(TabularModel):
    def __init__(self, n_classes: int, n_tokens: int, vocab: int):
        super().__init__(np.full((n_classes, n_tokens, vocab), -np.log(vocab)))


def _trunc_normal(rng: np.random.Generator, shape, std: float) -> np.ndarray:
    x = rng.standard_normal(shape)
    bad = np.abs(x) > 2.0
    while bad.any():
        x[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(x) > 2.0
    return x * std


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    d, ff = cfg.d_model, cfg.d_ff
    shapes = {
        "tok_emb": (cfg.vocab, d),
        "pos_query": (cfg.n_tokens, d),
        "pos_token": (cfg.n_tokens, d),
        "cls_emb": (cfg.n_classes, d),
    }
    for i in range(cfg.n_layers):
        p = f"h{i}."
        shapes.update({
            p + "ln1.g": (d,), p + "ln1.b": (d,),
            p + "attn.w_qkv": (d, 3 * d), p + "attn.b_qkv": (3 * d,),
            p + "attn.w_o": (d, d), p + "attn.b_o": (d,),
            p + "ln2.g": (d,), p + "ln2.b": (d,),
            p + "mlp.w1": (d, ff), p + "mlp.b1": (ff,),
            p + "mlp.w2": (ff, d), p + "mlp.b2": (d,),
        })
    shapes.update({"ln_f.g": (d,), "ln_f.b": (d,), "head.w": (d, cfg.vocab), "head.b": (cfg.vocab,)})
    return shapes


def init_params(cfg: ModelConfig, seed: int, dtype=np.float32) -> dict[str, C.Tensor]:
    """Truncated-normal(0.02) weights, zero biases, unit LN gains, zero output head."""
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in param_shapes(cfg).items():
        leaf = name.rsplit(".", 1)[-1]
        if name == "head.w" or leaf.startswith("b"):
            arr = np.zeros(shape)
        elif leaf == "g":
            arr = np.ones(shape)
        else:
            arr = _trunc_normal(rng, shape, 0.02)
        params[name] = C.Tensor(arr.astype(dtype), requires_grad=True, name=name)
    return params


def is_decayed(name: str) -> bool:
    """Weight decay applies to matrices and embedding tables only."""
    return len(name.split(".")) == 1 or name.rsplit(".", 1)[-1].startswith("w")


def sequence_layout(tokens: np.ndarray, perms: np.ndarray, classes: np.ndarray):
    """Index arrays ``[B, 2N+1]`` per embedding table (-1 = table unused at that slot).

    Returns ``(cls_idx, pos_query_idx, tok_idx, pos_token_idx)``.
    """
    b, n = tokens.shape
    length = 2 * n + 1
    cls_idx = np.full((b, length), -1, dtype=np.int64)
    posq = np.full((b, length), -1, dtype=np.int64)
    tok = np.full((b, length), -1, dtype=np.int64)
    post = np.full((b, length), -1, dtype=np.int64)
    cls_idx[:, 0] = classes
    posq[:, 1::2] = perms
    tok[:, 2::2] = targets_in_order(tokens, perms)
    post[:, 2::2] = perms
    return cls_idx, posq, tok, post


class AnyOrderTransformer(LikelihoodModel):
    def __init__(self, config: ModelConfig, params: dict[str, C.Tensor] | None = None,
                 seed: int = 0):
        self.config = config
        self.params = params if params is not None else init_params(config, seed)
        expected = param_shapes(config)
        if set(self.params) != set(expected) or any(
                self.params[k].shape != s for k, s in expected.items()):
            raise ConfigError("parameter set does not match ModelConfig")
        self.n_classes = config.n_classes
        self.n_tokens = config.n_tokens
        self.vocab = config.vocab
        self._pred_slots = np.arange(1, config.seq_len, 2)

    @property
    def dtype(self):
        return self.params["tok_emb"].dtype

    def astype(self, dtype) -> "AnyOrderTransformer":
        params = {k: C.Tensor(v.data.astype(dtype), requires_grad=True, name=k)
                  for k, v in self.params.items()}
        return AnyOrderTransformer(self.config, params)

    def embed(self, tokens, perms, classes) -> C.Tensor:
        p = self.params
        return C.embed_sum([p["cls_emb"], p["pos_query"], p["tok_emb"], p["pos_token"]],
                           sequence_layout(tokens, perms, classes))

    def build_sequence(self, tokens, perm, label: int) -> C.Tensor:
        """Embedded ``[2N+1, d]`` input for one image, order and class."""
        tokens, perms, classes = self._check(np.asarray(tokens).reshape(1, -1),
                                             np.asarray(perm).reshape(1, -1), np.array([label]))
        emb = self.embed(tokens, perms, classes)
        return C.Tensor(emb.data[0])

    def logits(self, tokens, perms, classes) -> C.Tensor:
        """``[B, N, V]`` next-token logits at each step; records a graph when grads are on."""
        p = self.params
        cfg = self.config
        h = self.embed(tokens, perms, classes)
        for i in range(cfg.n_layers):
            pre = f"h{i}."
            a = C.layer_norm(h, p[pre + "ln1.g"], p[pre + "ln1.b"])
            a = C.linear(a, p[pre + "attn.w_qkv"], p[pre + "attn.b_qkv"])
            a = C.causal_attention(a, cfg.n_heads)
            h = C.add(h, C.linear(a, p[pre + "attn.w_o"], p[pre + "attn.b_o"]))
            m = C.layer_norm(h, p[pre + "ln2.g"], p[pre + "ln2.b"])
            m = C.gelu(C.linear(m, p[pre + "mlp.w1"], p[pre + "mlp.b1"]))
            h = C.add(h, C.linear(m, p[pre + "mlp.w2"], p[pre + "mlp.b2"]))
        h = C.select(h, self._pred_slots, axis=1)
        h = C.layer_norm(h, p["ln_f.g"], p["ln_f.b"])
        return C.linear(h, p["head.w"], p["head.b"])

    def loss(self, tokens, perms, classes) -> C.Tensor:
        """Mean next-token cross-entropy over all N steps of every sequence."""
        tokens, perms, classes = self._check(tokens, perms, classes)
        logits = self.logits(tokens, perms, classes)
        NFE.add(tokens.shape[0])
        return C.mean_all(C.cross_entropy(logits, targets_in_order(tokens, perms)))

    def _per_token(self, tokens, perms, classes):
        with C.no_grad():
            z = self.logits(tokens, perms, classes).data
        logp = C.log_softmax_array(z)
        return np.take_along_axis(logp, targets_in_order(tokens, perms)[..., None], axis=-1)[..., 0]

    def generate(self, label: int, perm, temperature: float = 1.0, seed: int = 0) -> np.ndarray:
        """Ancestral sampling along ``perm``; one forward pass per step.

        Temperatures at or below 1e-6 decode greedily (lowest id on ties).
        """
        if temperature <= 0:
            raise ContractError("temperature must be positive")
        rng = np.random.default_rng(seed)
        n = self.n_tokens
        perm = validate_perms(np.asarray(perm).reshape(1, -1), n)
        tokens = np.zeros((1, n), dtype=np.int64)
        classes = np.array([label])
        self._check(tokens, perm, classes)
        for step in range(n):
            with C.no_grad():
                z = self.logits(tokens, perm, classes).data[0, step].astype(np.float64)
            NFE.add(1)
            if temperature <= 1e-6:
                x = int(np.argmax(z))
            else:
                logp = C.log_softmax_array(z / temperature)
                x = int(rng.choice(self.vocab, p=np.exp(logp) / np.exp(logp).sum()))
            tokens[0, perm[0, step]] = x
        return tokens[0]
