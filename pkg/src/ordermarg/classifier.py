"""Order-marginalized generative classification.

For each image, K token orders are sampled once and shared by all M classes;
the model scores the M*K (class, order) sequences and the per-class scores are
either the average order-conditional log-likelihood (``lower_bound``) or the
log of the average likelihood (``log_mean_exp``).

Reductions over orders use ``math.fsum`` so a score depends only on the
multiset of orders, never on the order they were listed in.
"""
from __future__ import annotations

import itertools
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .errors import ContractError
from .model import LikelihoodModel

STRATEGIES = ("lower_bound", "log_mean_exp")
ORDERINGS = ("random", "raster")
MAX_ENUMERATE = 7


@dataclass
class ClassScores:
    scores: np.ndarray      # [M]
    strategy: str
    orders: np.ndarray      # [K, N], shared by every class

    @property
    def K(self) -> int:
        return len(self.orders)

    @property
    def predicted(self) -> int:
        """Argmax; the lowest class index wins ties."""
        return int(np.argmax(self.scores))


def sample_orders(K: int, N: int, seed) -> np.ndarray:
    """K independent uniform permutations (duplicates allowed).

    Drawn one after another from ``default_rng(seed)``, so the first k rows of
    ``sample_orders(K, ...)`` equal ``sample_orders(k, ...)`` for the same seed.
    """
    if K < 1:
        raise ContractError("need at least one order")
    rng = np.random.default_rng(seed)
    return np.stack([rng.permutation(N) for _ in range(K)])


def draw_orders(K: int, N: int, seed, ordering: str = "random") -> np.ndarray:
    """Orders for one image: ``sample_orders``, or K copies of the identity for ``raster``."""
    if ordering == "random":
        return sample_orders(K, N, seed)
    if ordering == "raster":
        if K < 1:
            raise ContractError("need at least one order")
        return np.tile(np.arange(N), (K, 1))
    raise ContractError(f"unknown ordering {ordering!r}; choose from {ORDERINGS}")


def enumerate_orders(N: int) -> np.ndarray:
    """All N! permutations in lexicographic order."""
    if N > MAX_ENUMERATE:
        raise ContractError(f"refusing to enumerate {N}! orders (limit N <= {MAX_ENUMERATE})")
    return np.array(list(itertools.permutations(range(N))), dtype=np.int64).reshape(-1, N)


def image_seed(seed: int, index: int) -> tuple[int, int]:
    """Order seed for the ``index``-th image of a dataset pass."""
    return (int(seed), int(index))


def order_logliks(tokens, orders, model: LikelihoodModel, classes=None,
                  threads: int = 1) -> np.ndarray:
    """Per-token log-probabilities ``[M, K, N]`` (step-indexed) for one image.

    With ``threads > 1`` the M*K sequences are split across worker threads;
    results are identical because each sequence is scored independently.
    """
    tokens = np.asarray(tokens).reshape(-1)
    orders = np.atleast_2d(np.asarray(orders))
    if len(orders) == 0:
        raise ContractError("orders must be nonempty")
    classes = np.arange(model.n_classes) if classes is None else np.asarray(classes)
    m, k = len(classes), len(orders)
    cls = np.repeat(classes, k)                 # class-major, order-minor
    perms = np.tile(orders, (m, 1))
    toks = np.broadcast_to(tokens, (m * k, tokens.size))
    if threads > 1 and m * k > 1:
        bounds = np.linspace(0, m * k, min(threads, m * k) + 1).astype(int)
        with ThreadPoolExecutor(threads) as pool:
            parts = list(pool.map(lambda ab: model.per_token_logliks(
                toks[ab[0]:ab[1]], perms[ab[0]:ab[1]], cls[ab[0]:ab[1]]),
                zip(bounds[:-1], bounds[1:])))
        per = np.concatenate(parts)
    else:
        per = model.per_token_logliks(toks, perms, cls)
    return per.astype(np.float64).reshape(m, k, -1)


def to_positions(per_token: np.ndarray, orders: np.ndarray) -> np.ndarray:
    """Re-index step-ordered values ``[..., K, N]`` by original grid position."""
    out = np.empty_like(per_token)
    idx = np.broadcast_to(orders, per_token.shape)
    np.put_along_axis(out, idx, per_token, axis=-1)
    return out


def _fmean(values: np.ndarray) -> float:
    return math.fsum(values.tolist()) / len(values)


def lower_bound_from_totals(totals: np.ndarray) -> np.ndarray:
    """``totals[M, K]`` -> mean over K per class."""
    return np.array([_fmean(row) for row in totals])


def log_mean_exp_from_totals(totals: np.ndarray) -> np.ndarray:
    """``totals[M, K]`` -> ``logsumexp_k(total) - ln K`` per class."""
    out = np.empty(len(totals))
    k = totals.shape[1]
    for c, row in enumerate(totals):
        top = row.max()
        if top == -np.inf:
            out[c] = -np.inf
            continue
        out[c] = top + math.log(math.fsum(np.exp(row - top).tolist())) - math.log(k)
    return out


def aggregate(totals: np.ndarray, strategy: str) -> np.ndarray:
    if strategy == "lower_bound":
        return lower_bound_from_totals(totals)
    if strategy == "log_mean_exp":
        return log_mean_exp_from_totals(totals)
    raise ContractError(f"unknown strategy {strategy!r}; choose from {STRATEGIES}")


def score_lower_bound(tokens, orders, model: LikelihoodModel) -> ClassScores:
    orders = np.atleast_2d(np.asarray(orders))
    totals = order_logliks(tokens, orders, model).sum(axis=-1)
    return ClassScores(lower_bound_from_totals(totals), "lower_bound", orders)


def score_log_mean_exp(tokens, orders, model: LikelihoodModel) -> ClassScores:
    orders = np.atleast_2d(np.asarray(orders))
    totals = order_logliks(tokens, orders, model).sum(axis=-1)
    return ClassScores(log_mean_exp_from_totals(totals), "log_mean_exp", orders)


def classify(tokens, K: int, strategy: str, seed, model: LikelihoodModel,
             log_prior=None, threads: int = 1, ordering: str = "random") -> tuple[int, ClassScores]:
    """Predict ``argmax_c score(c) + log_prior(c)`` with K orders shared across classes.

    Costs exactly M*K forward passes.  ``log_prior`` defaults to uniform (zero).
    ``ordering="raster"`` scores with the identity order, as a raster-trained
    model expects.
    """
    if strategy not in STRATEGIES:
        raise ContractError(f"unknown strategy {strategy!r}; choose from {STRATEGIES}")
    tokens = np.asarray(tokens).reshape(-1)
    orders = draw_orders(K, tokens.size, seed, ordering)
    totals = order_logliks(tokens, orders, model, threads=threads).sum(axis=-1)
    result = ClassScores(aggregate(totals, strategy), strategy, orders)
    decision = result.scores if log_prior is None else result.scores + np.asarray(log_prior)
    return int(np.argmax(decision)), result


def truncated_scores(tokens, orders, drop_first: int, drop_last: int,
                     model: LikelihoodModel) -> ClassScores:
    """Lower bound using only steps ``drop_first .. N - drop_last - 1`` of each order."""
    orders = np.atleast_2d(np.asarray(orders))
    n = orders.shape[1]
    if drop_first < 0 or drop_last < 0 or drop_first + drop_last >= n:
        raise ContractError(f"dropping {drop_first}+{drop_last} of {n} steps leaves nothing")
    per = order_logliks(tokens, orders, model)
    totals = per[..., drop_first:n - drop_last].sum(axis=-1)
    return ClassScores(lower_bound_from_totals(totals), "lower_bound", orders)


def discriminative_map(tokens, c_true: int, c_false: int, model: LikelihoodModel,
                       K: int = 1, seed=0, orders=None, grid=None) -> np.ndarray:
    """``clip(mean_k log p_k(x_j | c_true) - mean_k log p_k(x_j | c_false), 0)`` per position.

    Per-token values are averaged over the shared orders at each original grid
    position before the class difference is taken.
    """
    if c_true == c_false:
        raise ContractError("c_true and c_false must differ")
    tokens = np.asarray(tokens).reshape(-1)
    if orders is None:
        orders = sample_orders(K, tokens.size, seed)
    orders = np.atleast_2d(np.asarray(orders))
    per = to_positions(order_logliks(tokens, orders, model, classes=[c_true, c_false]), orders)
    avg = per.mean(axis=1)
    heat = np.maximum(avg[0] - avg[1], 0.0)
    return heat.reshape(grid) if grid is not None else heat


# -- dataset-level scoring -----------------------------------------------

@dataclass
class DatasetScores:
    """Per-token log-probabilities for a labelled set under per-image shared orders."""
    per_token: np.ndarray   # [n, M, K, N] step-indexed
    orders: np.ndarray      # [n, K, N]
    labels: np.ndarray      # [n]
    seed: int

    @property
    def K(self) -> int:
        return self.orders.shape[1]

    def first_k(self, k: int) -> "DatasetScores":
        """The same pass restricted to its first k orders (== scoring with K=k)."""
        if not 1 <= k <= self.K:
            raise ContractError(f"K={k} not available (have {self.K})")
        return DatasetScores(self.per_token[:, :, :k], self.orders[:, :k], self.labels, self.seed)

    def totals(self, drop_first: int = 0, drop_last: int = 0) -> np.ndarray:
        n = self.per_token.shape[-1]
        return self.per_token[..., drop_first:n - drop_last].sum(axis=-1)

    def scores(self, strategy: str, drop_first: int = 0, drop_last: int = 0) -> np.ndarray:
        totals = self.totals(drop_first, drop_last)
        return np.stack([aggregate(t, strategy) for t in totals])

    def predictions(self, strategy: str = "lower_bound", drop_first: int = 0,
                    drop_last: int = 0) -> np.ndarray:
        return np.argmax(self.scores(strategy, drop_first, drop_last), axis=1)

    def accuracy(self, strategy: str = "lower_bound", drop_first: int = 0,
                 drop_last: int = 0) -> float:
        return float(np.mean(self.predictions(strategy, drop_first, drop_last) == self.labels))


def score_dataset(tokens: np.ndarray, labels: np.ndarray, K: int, seed: int,
                  model: LikelihoodModel, batch_sequences: int = 1024,
                  threads: int = 1, ordering: str = "random") -> DatasetScores:
    """Score every image with K orders seeded by :func:`image_seed`.

    Image ``i`` gets exactly the orders ``classify(..., seed=image_seed(seed, i))``
    would draw.  Costs ``n * M * K`` forward passes.
    """
    tokens = np.asarray(tokens)
    labels = np.asarray(labels)
    n_img, n = tokens.shape
    if n_img == 0:
        raise ContractError("empty dataset")
    m = model.n_classes
    orders = np.stack([draw_orders(K, n, image_seed(seed, i), ordering) for i in range(n_img)])
    per_image = m * K
    chunk = max(1, batch_sequences // per_image)
    starts = list(range(0, n_img, chunk))

    def run(start):
        stop = min(start + chunk, n_img)
        b = stop - start
        cls = np.tile(np.repeat(np.arange(m), K), b)
        perms = np.repeat(orders[start:stop], m, axis=0).reshape(-1, n)
        toks = np.repeat(tokens[start:stop], per_image, axis=0)
        return model.per_token_logliks(toks, perms, cls).astype(np.float64).reshape(b, m, K, n)

    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            parts = list(pool.map(run, starts))
    else:
        parts = [run(s) for s in starts]
    return DatasetScores(np.concatenate(parts), orders, labels, seed)


def per_token_accuracy(scores: DatasetScores, grid: tuple[int, int] | None = None) -> np.ndarray:
    """Accuracy of ``argmax_c`` of each position's order-averaged log-probability."""
    pos = to_positions(scores.per_token, scores.orders[:, None])   # [n, M, K, N]
    pred = np.argmax(pos.mean(axis=2), axis=1)                    # [n, N]
    acc = (pred == scores.labels[:, None]).mean(axis=0)
    return acc.reshape(grid) if grid is not None else acc


def accuracy_by_prefix(scores: DatasetScores) -> np.ndarray:
    """Entry n: accuracy of the per-step class prediction at step n (prefix length n),
    averaged over images and their K orders."""
    pred = np.argmax(scores.per_token, axis=1)                    # [n, K, N]
    return (pred == scores.labels[:, None, None]).mean(axis=(0, 1))


def dataset_discriminative_maps(scores: DatasetScores, rng_seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Maps for every image against one randomly chosen wrong class each."""
    n_img, m = scores.per_token.shape[:2]
    rng = np.random.default_rng(rng_seed)
    wrong = np.array([(int(y) + int(rng.integers(1, m))) % m for y in scores.labels])
    pos = to_positions(scores.per_token, scores.orders[:, None]).mean(axis=2)   # [n, M, N]
    idx = np.arange(n_img)
    heat = np.maximum(pos[idx, scores.labels] - pos[idx, wrong], 0.0)
    return heat, wrong
