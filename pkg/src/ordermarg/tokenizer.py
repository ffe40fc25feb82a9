"""k-means patch codebook: images <-> token grids, plus latent-noise corruption.

Patches are flattened row-major as ``(patch_h, patch_w, channels)``.  Token
grids are flattened row-major too, so token ``i * W_t + j`` is the patch at
grid row ``i``, column ``j``.

Corruption happens on standardized patch vectors (per-coordinate zero mean,
unit variance over the codebook's training patches) so that a noise level
``t`` means the same thing for any dataset.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ContractError, DimensionError, TokenIndexError


@dataclass
class Codebook:
    centroids: np.ndarray          # [V, D], pixel space
    patch_h: int
    patch_w: int
    channels: int = 1
    mean: np.ndarray | None = None  # [D] standardization stats of the training patches
    std: np.ndarray | None = None
    history: list[float] = field(default_factory=list, repr=False, compare=False)

    def __post_init__(self):
        self.centroids = np.asarray(self.centroids, dtype=np.float64)
        v, d = self.centroids.shape
        if v < 1 or d != self.patch_h * self.patch_w * self.channels:
            raise ConfigError(f"centroids {self.centroids.shape} do not match patch geometry")
        if not np.isfinite(self.centroids).all():
            raise ConfigError("centroids must be finite")
        if self.mean is None:
            self.mean = np.zeros(d)
        if self.std is None:
            self.std = np.ones(d)
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.std = np.asarray(self.std, dtype=np.float64)

    @property
    def vocab(self) -> int:
        return self.centroids.shape[0]

    @property
    def dim(self) -> int:
        return self.centroids.shape[1]

    def standardize(self, patches: np.ndarray) -> np.ndarray:
        return (patches - self.mean) / self.std

    def unstandardize(self, z: np.ndarray) -> np.ndarray:
        return z * self.std + self.mean


@dataclass
class TokenGrid:
    ids: np.ndarray   # [H_t, W_t] ints
    vocab: int

    def __post_init__(self):
        self.ids = np.asarray(self.ids, dtype=np.int64)
        if self.ids.ndim != 2:
            raise DimensionError(f"token grid must be 2-D, got shape {self.ids.shape}")
        if self.ids.size and (self.ids.min() < 0 or self.ids.max() >= self.vocab):
            raise TokenIndexError(f"token id outside [0, {self.vocab})")

    @property
    def shape(self) -> tuple[int, int]:
        return self.ids.shape

    @property
    def flat(self) -> np.ndarray:
        return self.ids.reshape(-1)


# -- patches ---------------------------------------------------------------

def _as_batch(images: np.ndarray) -> np.ndarray:
    """``[H, W]`` -> ``[1, H, W, 1]``; ``[B, H, W]`` -> ``[B, H, W, 1]``; 4-D passes through."""
    images = np.asarray(images, dtype=np.float64)
    if images.ndim == 2:
        return images[None, :, :, None]
    if images.ndim == 3:
        return images[..., None]
    return images


def extract_patches(images: np.ndarray, patch_h: int, patch_w: int) -> np.ndarray:
    """``[B, H, W(, C)]`` (or one ``[H, W]`` image) -> ``[B, H_t*W_t, D]``."""
    batch = _as_batch(images)
    b, h, w, c = batch.shape
    if h % patch_h or w % patch_w:
        raise DimensionError(f"image {h}x{w} not divisible into {patch_h}x{patch_w} patches")
    ht, wt = h // patch_h, w // patch_w
    p = batch.reshape(b, ht, patch_h, wt, patch_w, c).transpose(0, 1, 3, 2, 4, 5)
    return p.reshape(b, ht * wt, patch_h * patch_w * c)


def assemble_patches(patches: np.ndarray, grid: tuple[int, int], patch_h: int, patch_w: int,
                     channels: int = 1) -> np.ndarray:
    """Inverse of :func:`extract_patches` for ``[B, N, D]`` -> ``[B, H, W(, C)]``."""
    b = patches.shape[0]
    ht, wt = grid
    img = patches.reshape(b, ht, wt, patch_h, patch_w, channels).transpose(0, 1, 3, 2, 4, 5)
    img = img.reshape(b, ht * patch_h, wt * patch_w, channels)
    return img[..., 0] if channels == 1 else img


# -- k-means -------------------------------------------------------------

def squared_distances(points: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    """``|x - c|^2`` for all pairs, in float64 via the expanded form, clipped at 0."""
    d = (points * points).sum(axis=1)[:, None] - 2.0 * points @ centroids.T
    d += (centroids * centroids).sum(axis=1)[None, :]
    return np.maximum(d, 0.0)


def nearest(points: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    """Index of the closest centroid; ties go to the lowest index."""
    return np.argmin(squared_distances(points, centroids), axis=1)


def kmeans_pp_init(points: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    """k-means++ seeding.

    RNG protocol: first center ``rng.integers(n)``; each later center
    ``rng.choice(n, p=d2 / d2.sum())`` where d2 is the squared distance to the
    nearest chosen center.  If every point coincides with a center, the next
    center is the lowest-index point not yet chosen.
    """
    n = len(points)
    chosen = [int(rng.integers(n))]
    d2 = ((points - points[chosen[0]]) ** 2).sum(axis=1)
    for _ in range(1, k):
        total = d2.sum()
        if total > 0:
            idx = int(rng.choice(n, p=d2 / total))
        else:
            idx = next(i for i in range(n) if i not in set(chosen))
        chosen.append(idx)
        d2 = np.minimum(d2, ((points - points[idx]) ** 2).sum(axis=1))
    return points[chosen].copy()


def lloyd_step(points: np.ndarray, centroids: np.ndarray) -> tuple[np.ndarray, np.ndarray, float]:
    """One assignment + update; empty clusters move to the worst-served point.

    Returns ``(new_centroids, labels, objective_before_update)``.
    """
    dist = squared_distances(points, centroids)
    labels = np.argmin(dist, axis=1)
    point_cost = dist[np.arange(len(points)), labels]
    objective = float(point_cost.mean())
    k, dim = centroids.shape
    sums = np.zeros((k, dim))
    np.add.at(sums, labels, points)
    counts = np.bincount(labels, minlength=k)
    new = centroids.copy()
    filled = counts > 0
    new[filled] = sums[filled] / counts[filled, None]
    cost = point_cost.copy()
    for j in np.flatnonzero(~filled):
        far = int(np.argmax(cost))
        new[j] = points[far]
        cost[far] = 0.0
    return new, labels, objective


def kmeans(points: np.ndarray, k: int, iters: int, seed: int) -> tuple[np.ndarray, list[float]]:
    """Lloyd's algorithm from a k-means++ start.

    Returns the centroids and the mean squared quantization error before each
    update plus once after the last one (``iters + 1`` entries unless the
    centroids stop moving earlier).
    """
    points = np.asarray(points, dtype=np.float64)
    if k < 1:
        raise ConfigError("need at least one centroid")
    if len(points) < k:
        raise ConfigError(f"{len(points)} patches cannot support {k} centroids")
    rng = np.random.default_rng(seed)
    centroids = kmeans_pp_init(points, k, rng)
    history = []
    for _ in range(iters):
        new, _, obj = lloyd_step(points, centroids)
        history.append(obj)
        if np.array_equal(new, centroids):
            centroids = new
            break
        centroids = new
    labels = nearest(points, centroids)
    history.append(float(((points - centroids[labels]) ** 2).sum(axis=1).mean()))
    return centroids, history


def fit_codebook(patches: np.ndarray, vocab: int, iters: int, seed: int, patch_h: int,
                 patch_w: int, channels: int = 1) -> Codebook:
    """k-means codebook over ``[P, D]`` patch vectors."""
    patches = np.asarray(patches, dtype=np.float64).reshape(-1, patch_h * patch_w * channels)
    if len(patches) < vocab:
        raise ConfigError(f"{len(patches)} patches cannot support V={vocab}")
    if vocab > 1 and len(np.unique(patches, axis=0)) < vocab:
        raise ConfigError(f"fewer than V={vocab} distinct patches; centroids would coincide")
    centroids, history = kmeans(patches, vocab, iters, seed)
    std = patches.std(axis=0)
    std[std < 1e-8] = 1.0
    # Stored as float32 on disk; round now so a reloaded codebook tokenizes identically.
    f32 = lambda a: a.astype(np.float32).astype(np.float64)  # noqa: E731
    return Codebook(f32(centroids), patch_h, patch_w, channels, mean=f32(patches.mean(axis=0)),
                    std=f32(std), history=history)


# -- encode / decode -----------------------------------------------------

def encode_patches(patches: np.ndarray, cb: Codebook) -> np.ndarray:
    flat = patches.reshape(-1, cb.dim)
    return nearest(flat, cb.centroids).reshape(patches.shape[:-1])


def encode_batch(images: np.ndarray, cb: Codebook) -> np.ndarray:
    """``[B, H, W]`` images -> ``[B, N]`` token ids."""
    return encode_patches(extract_patches(images, cb.patch_h, cb.patch_w), cb)


def grid_shape(image_shape: tuple[int, ...], cb: Codebook) -> tuple[int, int]:
    h, w = image_shape[:2]
    if h % cb.patch_h or w % cb.patch_w:
        raise DimensionError(f"image {h}x{w} not divisible into {cb.patch_h}x{cb.patch_w} patches")
    return h // cb.patch_h, w // cb.patch_w


def encode(image: np.ndarray, cb: Codebook) -> TokenGrid:
    image = np.asarray(image)
    ht, wt = grid_shape(image.shape, cb)
    return TokenGrid(encode_batch(image[None], cb)[0].reshape(ht, wt), cb.vocab)


def decode_batch(tokens: np.ndarray, grid: tuple[int, int], cb: Codebook) -> np.ndarray:
    tokens = np.asarray(tokens)
    if tokens.size and (tokens.min() < 0 or tokens.max() >= cb.vocab):
        raise TokenIndexError(f"token id outside [0, {cb.vocab})")
    patches = cb.centroids[tokens.reshape(tokens.shape[0], -1)]
    return assemble_patches(patches, grid, cb.patch_h, cb.patch_w, cb.channels)


def decode(tg: TokenGrid, cb: Codebook) -> np.ndarray:
    if tg.vocab > cb.vocab or (tg.ids.size and tg.ids.max() >= cb.vocab):
        raise TokenIndexError(f"token id outside [0, {cb.vocab})")
    return decode_batch(tg.ids[None], tg.shape, cb)[0]


# -- corruption study ----------------------------------------------------

def corrupt_latents(z: np.ndarray, t: float, seed) -> np.ndarray:
    """``(1 - t) * z + t * eps`` with ``eps ~ N(0, I)``; ``t = 0`` returns ``z`` unchanged."""
    if not 0.0 <= t <= 1.0:
        raise ContractError(f"noise level t={t} outside [0, 1]")
    z = np.asarray(z, dtype=np.float64)
    if t == 0.0:
        return z.copy()
    eps = np.random.default_rng(seed).standard_normal(z.shape)
    return (1.0 - t) * z + t * eps


def noisy_encode(images: np.ndarray, cb: Codebook, t, seed) -> np.ndarray:
    """Tokenize after corrupting standardized patches; ``t`` may be per image."""
    patches = extract_patches(images, cb.patch_h, cb.patch_w)
    t_arr = np.broadcast_to(np.asarray(t, dtype=np.float64), (patches.shape[0],))
    if (t_arr < 0).any() or (t_arr > 1).any():
        raise ContractError("noise level outside [0, 1]")
    z = cb.standardize(patches)
    eps = np.random.default_rng(seed).standard_normal(z.shape)
    tt = t_arr[:, None, None]
    return encode_patches(cb.unstandardize((1.0 - tt) * z + tt * eps), cb)


def flipped_ratio(a, b) -> float:
    a = a.ids if isinstance(a, TokenGrid) else np.asarray(a)
    b = b.ids if isinstance(b, TokenGrid) else np.asarray(b)
    if a.shape != b.shape:
        raise DimensionError(f"token grids differ in geometry: {a.shape} vs {b.shape}")
    return float(np.mean(a != b)) if a.size else 0.0


def reconstruction_error(original: np.ndarray, reconstructed: np.ndarray) -> float:
    original = np.asarray(original, dtype=np.float64)
    reconstructed = np.asarray(reconstructed, dtype=np.float64)
    if original.shape != reconstructed.shape:
        raise DimensionError(f"extents differ: {original.shape} vs {reconstructed.shape}")
    return float(np.mean((original - reconstructed) ** 2))


def noise_curve(images: np.ndarray, cb: Codebook, ts, seeds) -> list[dict]:
    """Mean flipped ratio and reconstruction MSE (vs the clean image) per noise level."""
    images = np.asarray(images, dtype=np.float64)
    clean = encode_batch(images, cb)
    grid = grid_shape(images.shape[1:], cb)
    rows = []
    for t in ts:
        flips, mses = [], []
        for s in seeds:
            toks = noisy_encode(images, cb, t, s)
            flips.append(flipped_ratio(clean, toks))
            mses.append(reconstruction_error(images, decode_batch(toks, grid, cb)))
        rows.append({"t": float(t), "flipped_ratio": float(np.mean(flips)),
                     "mse": float(np.mean(mses))})
    return rows


def flip_onset(images: np.ndarray, cb: Codebook, target: float, seeds,
               tol: float = 1e-3) -> float:
    """Smallest ``t`` whose seed-averaged flipped ratio reaches ``target`` (bisection)."""
    clean = encode_batch(images, cb)

    def flips(t):
        return np.mean([flipped_ratio(clean, noisy_encode(images, cb, t, s)) for s in seeds])

    lo, hi = 0.0, 1.0
    if flips(hi) < target:
        return 1.0
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if flips(mid) >= target:
            hi = mid
        else:
            lo = mid
    return hi


def calibrate_noise_tmax(images: np.ndarray, cb: Codebook, target: float = 0.15,
                         seed: int = 0, tol: float = 2e-3) -> float:
    """``t_max`` such that ``t ~ U[0, t_max]`` flips ``target`` of the tokens on average."""
    clean = encode_batch(images, cb)
    rng = np.random.default_rng(seed)
    u = rng.random(len(images))

    def flips(tmax):
        return flipped_ratio(clean, noisy_encode(images, cb, u * tmax, seed))

    lo, hi = 0.0, 1.0
    if flips(hi) < target:
        return 1.0
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if flips(mid) >= target:
            hi = mid
        else:
            lo = mid
    return hi
