"""Synthetic datasets: an analytic token mixture and procedural shape images.

The mixture draws every position independently from a class-specific
categorical table, so ``p(x | c)`` and the Bayes posterior are exact.  The
shape images stand in for natural photos; corruptions give a distribution
shift with a monotone severity scale.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from .errors import ConfigError, ContractError, DimensionError

SPLITS = {"train": 0, "val": 1, "test": 2}

_MASK64 = np.uint64(0xFFFFFFFFFFFFFFFF)


def _splitmix64(x: np.ndarray) -> np.ndarray:
    with np.errstate(over="ignore"):
        z = (x + np.uint64(0x9E3779B97F4A7C15)) & _MASK64
        z = ((z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)) & _MASK64
        z = ((z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)) & _MASK64
        return z ^ (z >> np.uint64(31))


def split_assignment(n: int, seed: int) -> np.ndarray:
    """80/10/10 train/val/test by hashing (seed, sample index)."""
    idx = np.arange(n, dtype=np.uint64)
    h = _splitmix64(_splitmix64(np.full(n, seed, dtype=np.uint64)) ^ idx) % np.uint64(10)
    out = np.zeros(n, dtype=np.int64)
    out[h == 8] = SPLITS["val"]
    out[h == 9] = SPLITS["test"]
    return out


@dataclass
class TokenDataset:
    tokens: np.ndarray          # [n, N]
    labels: np.ndarray          # [n]
    split: np.ndarray           # [n] values from SPLITS
    vocab: int
    n_classes: int
    grid: tuple[int, int]

    def __len__(self):
        return len(self.labels)

    def subset(self, which: str) -> "TokenDataset":
        keep = self.split == SPLITS[which]
        return TokenDataset(self.tokens[keep], self.labels[keep], self.split[keep],
                            self.vocab, self.n_classes, self.grid)

    def head(self, n: int) -> "TokenDataset":
        return TokenDataset(self.tokens[:n], self.labels[:n], self.split[:n],
                            self.vocab, self.n_classes, self.grid)


@dataclass
class ImageDataset:
    images: np.ndarray          # [n, H, W] in [0, 1]
    labels: np.ndarray
    split: np.ndarray
    n_classes: int
    class_names: tuple[str, ...] = ()

    def __len__(self):
        return len(self.labels)

    def subset(self, which: str) -> "ImageDataset":
        keep = self.split == SPLITS[which]
        return ImageDataset(self.images[keep], self.labels[keep], self.split[keep],
                            self.n_classes, self.class_names)

    def head(self, n: int) -> "ImageDataset":
        return ImageDataset(self.images[:n], self.labels[:n], self.split[:n],
                            self.n_classes, self.class_names)


# -- analytic mixture ----------------------------------------------------

@dataclass
class MixtureSpec:
    n_classes: int = 8
    n_tokens: int = 16
    vocab: int = 16
    concentration: float = 0.5
    seed: int = 0
    explicit_tables: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.explicit_tables is not None:
            t = np.asarray(self.explicit_tables, dtype=np.float64)
            if t.ndim != 3:
                raise ConfigError("tables must be [M, N, V]")
            self.n_classes, self.n_tokens, self.vocab = t.shape
            self.explicit_tables = t
        if min(self.n_classes, self.n_tokens, self.vocab) < 1 or self.concentration <= 0:
            raise ConfigError("mixture extents and concentration must be positive")

    @classmethod
    def from_tables(cls, tables) -> "MixtureSpec":
        return cls(explicit_tables=np.asarray(tables, dtype=np.float64))

    @cached_property
    def tables(self) -> np.ndarray:
        """``theta[c, j, v]``; Dirichlet-drawn unless given explicitly."""
        if self.explicit_tables is not None:
            t = self.explicit_tables
            if (t < 0).any() or np.abs(t.sum(axis=-1) - 1.0).max() > 1e-9:
                raise ConfigError("each table row must be a probability vector")
            return t
        rng = np.random.default_rng(self.seed)
        t = rng.dirichlet(np.full(self.vocab, self.concentration),
                          size=(self.n_classes, self.n_tokens))
        t = np.maximum(t, 1e-12)
        return t / t.sum(axis=-1, keepdims=True)

    @property
    def log_tables(self) -> np.ndarray:
        with np.errstate(divide="ignore"):
            return np.log(self.tables)

    def to_dict(self) -> dict:
        d = {"n_classes": self.n_classes, "n_tokens": self.n_tokens, "vocab": self.vocab,
             "concentration": self.concentration, "seed": self.seed}
        if self.explicit_tables is not None:
            d["explicit_tables"] = self.explicit_tables.tolist()
        return d


def _grid_for(n: int) -> tuple[int, int]:
    r = int(np.sqrt(n))
    while n % r:
        r -= 1
    return (r, n // r)


def make_mixture_dataset(spec: MixtureSpec, n_per_class: int) -> TokenDataset:
    """Class-balanced iid draws; sample ``i`` uses its own seed ``(spec.seed, i)``."""
    m, n = spec.n_classes, spec.n_tokens
    cum = np.cumsum(spec.tables, axis=-1)
    labels = np.repeat(np.arange(m), n_per_class)
    tokens = np.empty((len(labels), n), dtype=np.int64)
    for i, c in enumerate(labels):
        u = np.random.default_rng([spec.seed, i]).random(n)
        tokens[i] = (u[:, None] >= cum[c]).sum(axis=1)
    np.minimum(tokens, spec.vocab - 1, out=tokens)
    return TokenDataset(tokens, labels, split_assignment(len(labels), spec.seed),
                        spec.vocab, m, _grid_for(n))


def class_loglik(spec: MixtureSpec, tokens: np.ndarray) -> np.ndarray:
    """``log p(x | c)`` for ``[N]`` -> ``[M]`` or ``[B, N]`` -> ``[B, M]``."""
    tokens = np.asarray(tokens)
    single = tokens.ndim == 1
    tokens = tokens.reshape(-1, spec.n_tokens)
    logt = spec.log_tables                                   # [M, N, V]
    per = logt[:, np.arange(spec.n_tokens)[None, :], tokens]  # [M, B, N]
    out = per.sum(axis=-1).T
    return out[0] if single else out


def true_posterior(spec: MixtureSpec, tokens: np.ndarray) -> np.ndarray:
    """Exact ``p(c | x)`` under a uniform class prior, normalized in log space."""
    ll = class_loglik(spec, tokens)
    top = ll.max(axis=-1, keepdims=True)
    if not np.isfinite(top).all():
        raise ContractError("sequence has zero probability under every class")
    w = np.exp(ll - top)
    return w / w.sum(axis=-1, keepdims=True)


def bayes_predict(spec: MixtureSpec, tokens: np.ndarray) -> np.ndarray:
    return np.argmax(class_loglik(spec, tokens), axis=-1)


# -- shape images --------------------------------------------------------

SHAPES = ("rectangle", "disc", "cross", "ring", "stripes", "triangle", "diamond", "frame")


def _shape_mask(name: str, u: np.ndarray, v: np.ndarray) -> np.ndarray:
    au, av = np.abs(u), np.abs(v)
    if name == "rectangle":
        return (au <= 1.0) & (av <= 0.6)
    if name == "disc":
        return u * u + v * v <= 1.0
    if name == "cross":
        return ((au <= 0.3) & (av <= 1.0)) | ((av <= 0.3) & (au <= 1.0))
    if name == "ring":
        r2 = u * u + v * v
        return (r2 <= 1.0) & (r2 >= 0.55 ** 2)
    if name == "stripes":
        band = np.floor((v + 1.0) * 2.5).astype(int)
        return (au <= 1.0) & (av <= 1.0) & (band % 2 == 0)
    if name == "triangle":
        return (v <= 1.0) & (v >= -1.0) & (au <= (v + 1.0) / 2.0)
    if name == "diamond":
        return au + av <= 1.0
    if name == "frame":
        mx = np.maximum(au, av)
        return (mx <= 1.0) & (mx >= 0.6)
    raise ConfigError(f"unknown shape {name!r}")


@dataclass(frozen=True)
class ShapeSpec:
    image_size: int = 32
    classes: tuple[str, ...] = SHAPES
    n_per_class: int = 500
    position_jitter: float = 6.0            # max center offset in pixels, per axis
    scale_range: tuple[float, float] = (0.35, 0.7)   # half-size as a fraction of half the image
    intensity_range: tuple[float, float] = (0.5, 1.0)
    background_range: tuple[float, float] = (0.0, 0.3)
    pixel_noise: float = 0.05
    supersample: int = 4
    seed: int = 0

    def __post_init__(self):
        if not 4 <= self.image_size <= 64:
            raise ConfigError("image_size must lie in [4, 64]")
        if not self.classes:
            raise ConfigError("need at least one shape class")
        for name in self.classes:
            _shape_mask(name, np.zeros(1), np.zeros(1))
        for lo, hi in (self.scale_range, self.intensity_range, self.background_range):
            if lo > hi:
                raise ConfigError("nuisance ranges must be (low, high)")

    @property
    def n_classes(self) -> int:
        return len(self.classes)

    def to_dict(self) -> dict:
        return {"image_size": self.image_size, "classes": list(self.classes),
                "n_per_class": self.n_per_class, "position_jitter": self.position_jitter,
                "scale_range": list(self.scale_range),
                "intensity_range": list(self.intensity_range),
                "background_range": list(self.background_range),
                "pixel_noise": self.pixel_noise, "supersample": self.supersample,
                "seed": self.seed}


def render_shape(spec: ShapeSpec, label: int, rng: np.random.Generator) -> np.ndarray:
    """One image containing a single instance of ``spec.classes[label]``."""
    size, ss = spec.image_size, spec.supersample
    half = size / 2.0
    cy, cx = half + rng.uniform(-spec.position_jitter, spec.position_jitter, size=2)
    s = half * rng.uniform(*spec.scale_range)
    fg = rng.uniform(*spec.intensity_range)
    bg = rng.uniform(*spec.background_range)
    coords = (np.arange(size * ss) + 0.5) / ss
    yy, xx = np.meshgrid(coords, coords, indexing="ij")
    mask = _shape_mask(spec.classes[label], (xx - cx) / s, (yy - cy) / s).astype(np.float64)
    cover = mask.reshape(size, ss, size, ss).mean(axis=(1, 3))
    img = bg + (fg - bg) * cover
    if spec.pixel_noise > 0:
        img = img + spec.pixel_noise * rng.standard_normal(img.shape)
    return np.clip(img, 0.0, 1.0)


def make_shape_dataset(spec: ShapeSpec) -> ImageDataset:
    """Balanced, bit-reproducible; sample ``i`` draws from ``rng((seed, i))``."""
    labels = np.tile(np.arange(spec.n_classes), spec.n_per_class)
    images = np.stack([render_shape(spec, int(c), np.random.default_rng([spec.seed, i]))
                       for i, c in enumerate(labels)])
    return ImageDataset(images, labels, split_assignment(len(labels), spec.seed),
                        spec.n_classes, tuple(spec.classes))


# -- corruptions ---------------------------------------------------------

NOISE_SIGMA = (0.04, 0.08, 0.12, 0.18, 0.26)
QUANT_LEVELS = (64, 32, 16, 8, 4)
CORRUPTIONS = ("gaussian_noise", "quantize")


def apply_corruption(images: np.ndarray, kind: str, severity: int, seed: int) -> np.ndarray:
    """Gaussian pixel noise or bit-depth reduction at severity 1..5, clamped to [0, 1]."""
    if kind not in CORRUPTIONS:
        raise ConfigError(f"unknown corruption {kind!r}; choose from {CORRUPTIONS}")
    if not 1 <= severity <= 5:
        raise ConfigError(f"severity {severity} outside 1..5")
    images = np.asarray(images, dtype=np.float64)
    if kind == "gaussian_noise":
        eps = np.random.default_rng(seed).standard_normal(images.shape)
        out = images + NOISE_SIGMA[severity - 1] * eps
    else:
        steps = QUANT_LEVELS[severity - 1] - 1
        out = np.round(images * steps) / steps
    return np.clip(out, 0.0, 1.0)


def knn_accuracy(train_x: np.ndarray, train_y: np.ndarray, test_x: np.ndarray,
                 test_y: np.ndarray, k: int = 5) -> float:
    """Plain pixel-space k-nearest-neighbour accuracy (majority vote, lowest label on ties)."""
    a = train_x.reshape(len(train_x), -1)
    b = test_x.reshape(len(test_x), -1)
    if a.shape[1] != b.shape[1]:
        raise DimensionError("train and test images differ in size")
    d = (b * b).sum(1)[:, None] - 2 * b @ a.T + (a * a).sum(1)[None, :]
    nn = np.argsort(d, axis=1, kind="stable")[:, :k]
    votes = train_y[nn]
    n_cls = int(max(train_y.max(), test_y.max())) + 1
    counts = np.stack([(votes == c).sum(1) for c in range(n_cls)], axis=1)
    return float(np.mean(np.argmax(counts, axis=1) == test_y))
