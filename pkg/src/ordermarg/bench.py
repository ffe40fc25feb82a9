"""Accuracy against cost: sweep the number of orders K and time classification.

Every record reports the forward-pass count (M*K per image), accuracy on the
evaluation set and per-image wall-clock statistics.  Timing covers scoring
only; tokenization happens once, before the timed region.
"""
from __future__ import annotations

import platform
import time
from dataclasses import asdict, dataclass

import numpy as np

from .classifier import STRATEGIES, classify, image_seed, score_dataset
from .errors import ContractError
from .model import NFE, LikelihoodModel

WARMUP_RUNS = 5
MIN_TIMED_RUNS = 30
FIELDS = ("K", "strategy", "nfe", "mean_seconds", "p50_seconds", "p95_seconds", "accuracy",
          "n_images", "timed_runs", "dataset_id", "model_id", "hardware")


@dataclass
class BenchRecord:
    K: int
    strategy: str
    nfe: int
    mean_seconds: float
    p50_seconds: float
    p95_seconds: float
    accuracy: float
    n_images: int
    timed_runs: int
    dataset_id: str
    model_id: str
    hardware: str

    def to_dict(self) -> dict:
        return asdict(self)


def hardware_note() -> str:
    return f"{platform.machine()} {platform.processor() or 'cpu'} python{platform.python_version()}"


def time_classification(tokens: np.ndarray, K: int, strategy: str, seed: int,
                        model: LikelihoodModel, runs: int = MIN_TIMED_RUNS,
                        warmup: int = WARMUP_RUNS, threads: int = 1,
                        clock=time.perf_counter, ordering: str = "random") -> np.ndarray:
    """Seconds per single-image ``classify`` call, cycling through ``tokens``.

    ``warmup`` calls are discarded.  Each timed call must cost exactly M*K
    forward passes; anything else is reported as a contract violation.
    """
    if runs < 1:
        raise ContractError("need at least one timed run")
    n = len(tokens)
    for i in range(warmup):
        classify(tokens[i % n], K, strategy, image_seed(seed, i % n), model, threads=threads,
                 ordering=ordering)
    out = np.empty(runs)
    expected = model.n_classes * K
    for r in range(runs):
        i = r % n
        before = NFE.count
        start = clock()
        classify(tokens[i], K, strategy, image_seed(seed, i), model, threads=threads,
                 ordering=ordering)
        out[r] = clock() - start
        if NFE.count - before != expected:
            raise ContractError(f"classify used {NFE.count - before} forward passes, expected {expected}")
    return out


def sweep_K(model: LikelihoodModel, tokens: np.ndarray, labels: np.ndarray, Ks, strategy: str,
            seed: int, runs: int = MIN_TIMED_RUNS, warmup: int = WARMUP_RUNS,
            dataset_id: str = "", model_id: str = "", threads: int = 1,
            clock=time.perf_counter, ordering: str = "random") -> list[BenchRecord]:
    """One record per K.

    Accuracy comes from one scoring pass at ``max(Ks)``, truncated to each K;
    by the prefix property of :func:`sample_orders` this equals a separate
    evaluation at that K with the same seed.
    """
    Ks = [int(k) for k in Ks]
    if not Ks or min(Ks) < 1:
        raise ContractError("K list must be nonempty and positive")
    if strategy not in STRATEGIES:
        raise ContractError(f"unknown strategy {strategy!r}")
    tokens = np.asarray(tokens)
    scores = score_dataset(tokens, labels, max(Ks), seed, model, threads=threads,
                           ordering=ordering)
    hw = hardware_note()
    records = []
    for k in Ks:
        secs = time_classification(tokens, k, strategy, seed, model, runs, warmup, threads, clock,
                                   ordering)
        records.append(BenchRecord(
            K=k, strategy=strategy, nfe=model.n_classes * k, mean_seconds=float(secs.mean()),
            p50_seconds=float(np.percentile(secs, 50)), p95_seconds=float(np.percentile(secs, 95)),
            accuracy=scores.first_k(k).accuracy(strategy), n_images=int(len(tokens)),
            timed_runs=int(runs), dataset_id=dataset_id, model_id=model_id, hardware=hw))
    return records
