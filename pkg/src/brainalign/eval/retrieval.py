"""Top-1 cosine retrieval between paired brain and image embeddings.

Forward retrieval: a brain row must pick its own image among a pool of
candidates.  Backward: an image row must pick its own brain row.  Exemplar:
the pool is the whole gallery.  Rows are paired by index.  A probe counts as
correct only when its pair scores strictly higher than every distractor.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .._kernels import pool_top1_hits


@dataclass(frozen=True)
class RetrievalReport:
    forward_acc: float
    backward_acc: float
    exemplar_acc: float
    pool_size: int
    trials: int

    def to_dict(self) -> dict:
        return asdict(self)


def _normalize(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    x = x.reshape(x.shape[0], -1)
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    if np.any(norms == 0):
        raise ValueError("zero-norm embedding row")
    return x / norms


def cosine_matrix(queries, candidates) -> np.ndarray:
    q, c = _normalize(queries), _normalize(candidates)
    if q.shape != c.shape:
        raise ValueError(f"paired embeddings differ in shape: {q.shape} vs {c.shape}")
    return q @ c.T


def draw_pools(n: int, pool: int, trials: int, rng: np.random.Generator) -> np.ndarray:
    """(trials, n, pool - 1) distractor indices; row i never contains i.

    Each trial uses every item once as probe, with ``pool - 1`` distinct
    distractors drawn uniformly from the other items.
    """
    if pool > n:
        raise ValueError(f"pool {pool} larger than the {n} available items")
    if pool < 1:
        raise ValueError("pool must be >= 1")
    out = np.empty((trials, n, pool - 1), dtype=np.int64)
    if pool == 1:
        return out
    for t in range(trials):
        if pool == n:
            pick = np.tile(np.arange(n - 1), (n, 1))
        else:
            keys = rng.random((n, n - 1))
            pick = np.argpartition(keys, pool - 2, axis=1)[:, :pool - 1]
        # map [0, n-1) onto the items other than the probe
        out[t] = pick + (pick >= np.arange(n)[:, None])
    return out


def _pooled_accuracy(sim: np.ndarray, pool: int, trials: int, rng) -> float:
    n = sim.shape[0]
    pools = draw_pools(n, pool, trials, rng)
    probes = np.arange(n)
    hits = sum(pool_top1_hits(sim, probes, pools[t]) for t in range(trials))
    return hits / (n * trials)


def retrieval_forward(brain, image, pool: int = 300, trials: int = 30, rng=None) -> float:
    rng = np.random.default_rng(0) if rng is None else rng
    return _pooled_accuracy(cosine_matrix(brain, image), pool, trials, rng)


def retrieval_backward(brain, image, pool: int = 300, trials: int = 30, rng=None) -> float:
    rng = np.random.default_rng(0) if rng is None else rng
    return _pooled_accuracy(cosine_matrix(image, brain), pool, trials, rng)


def retrieval_exemplar(brain, gallery) -> float:
    sim = cosine_matrix(brain, gallery)
    if sim.shape[0] == 1:
        return 1.0
    masked = sim.copy()
    np.fill_diagonal(masked, -np.inf)
    return float(np.mean(np.diag(sim) > masked.max(axis=1)))


def retrieval_report(brain, image, pool: int = 300, trials: int = 30, rng=None) -> RetrievalReport:
    """All three accuracies; forward and backward share one seeded stream."""
    rng = np.random.default_rng(0) if rng is None else rng
    n = np.asarray(brain).shape[0]
    pool = min(pool, n)
    return RetrievalReport(
        forward_acc=retrieval_forward(brain, image, pool, trials, rng),
        backward_acc=retrieval_backward(brain, image, pool, trials, rng),
        exemplar_acc=retrieval_exemplar(brain, image),
        pool_size=pool,
        trials=trials,
    )
