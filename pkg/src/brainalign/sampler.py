"""Cross-subject batch composition.

``ours``: a dominant subject is drawn with probability proportional to its
training-set size; ``round(theta * B)`` entries come from it and the rest are
drawn uniformly from the pooled samples of all other subjects.
``ours_r`` keeps the dominant block but draws the remainder subject-first.
``random`` draws all B entries from the pooled union, ``stratified`` takes
``B // K`` per subject and hands out the remainder round-robin.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping, Optional, Sequence

import numpy as np

STRATEGIES = ("ours", "ours_r", "random", "stratified")


@dataclass(frozen=True, eq=False)
class BatchPlan:
    subject_ids: tuple[str, ...]     # code -> subject id
    subjects: np.ndarray             # (B,) subject codes
    indices: np.ndarray              # (B,) sample index within the subject's partition
    dominant_subject: Optional[str]  # None for random / stratified with K > 1

    @property
    def entries(self) -> list[tuple[str, int]]:
        return [(self.subject_ids[s], int(i)) for s, i in zip(self.subjects.tolist(), self.indices.tolist())]

    def __len__(self):
        return int(self.subjects.shape[0])

    def count(self, subject_id: str) -> int:
        return int(np.count_nonzero(self.subjects == self.subject_ids.index(subject_id)))


def subject_probabilities(sizes: Mapping[str, int]) -> dict[str, float]:
    if not sizes:
        raise ValueError("no subjects given")
    for sid, n in sizes.items():
        if n <= 0:
            raise ValueError(f"subject {sid!r} has no samples")
    total = math.fsum(sizes.values())
    return {sid: n / total for sid, n in sizes.items()}


def dominant_block_size(batch_size: int, theta: float) -> int:
    # Python's round() is half-to-even
    return int(round(theta * batch_size))


def _draw(rng: np.random.Generator, n: int, k: int) -> np.ndarray:
    """k indices in [0, n): without replacement when n >= k."""
    if k == 0:
        return np.zeros(0, dtype=np.int64)
    if n >= k:
        return rng.choice(n, size=k, replace=False).astype(np.int64)
    return rng.integers(0, n, size=k, dtype=np.int64)


def _pooled(rng, sizes: np.ndarray, codes: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
    """k draws uniform over the union of the given subjects' samples."""
    part = sizes[codes]
    flat = _draw(rng, int(part.sum()), k)
    bounds = np.cumsum(part)
    which = np.searchsorted(bounds, flat, side="right")
    starts = bounds - part
    return codes[which], flat - starts[which]


def compose_batch(
    sizes: Mapping[str, int],
    batch_size: int,
    theta: float,
    strategy: str,
    rng: np.random.Generator,
) -> BatchPlan:
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    if not 0.0 <= theta <= 1.0:
        raise ValueError(f"theta must lie in [0, 1], got {theta}")
    if strategy not in STRATEGIES:
        raise ValueError(f"unknown strategy {strategy!r}; expected one of {STRATEGIES}")
    probs = subject_probabilities(sizes)
    ids = tuple(sizes)
    n = np.array([sizes[s] for s in ids], dtype=np.int64)
    K = len(ids)

    if K == 1:
        return BatchPlan(ids, np.zeros(batch_size, dtype=np.int64), _draw(rng, int(n[0]), batch_size), ids[0])

    if strategy == "random":
        subj, idx = _pooled(rng, n, np.arange(K), batch_size)
        return BatchPlan(ids, subj, idx, None)

    if strategy == "stratified":
        per = np.full(K, batch_size // K, dtype=np.int64)
        start = int(rng.integers(0, K))
        for r in range(batch_size % K):
            per[(start + r) % K] += 1
        subj = np.repeat(np.arange(K), per)
        idx = np.concatenate([_draw(rng, int(n[k]), int(per[k])) for k in range(K)])
        return BatchPlan(ids, subj, idx, None)

    p = np.array([probs[s] for s in ids])
    dom = int(rng.choice(K, p=p))
    n_dom = dominant_block_size(batch_size, theta)
    n_rest = batch_size - n_dom
    dom_idx = _draw(rng, int(n[dom]), n_dom)
    others = np.array([k for k in range(K) if k != dom], dtype=np.int64)
    if strategy == "ours":
        rest_subj, rest_idx = _pooled(rng, n, others, n_rest)
    else:  # ours_r
        picks = others[rng.integers(0, others.size, size=n_rest)]
        rest_subj = np.sort(picks, kind="stable")
        rest_idx = np.concatenate(
            [np.zeros(0, dtype=np.int64)]
            + [_draw(rng, int(n[k]), int(np.count_nonzero(picks == k))) for k in others])
    subj = np.concatenate([np.full(n_dom, dom, dtype=np.int64), rest_subj.astype(np.int64)])
    idx = np.concatenate([dom_idx, rest_idx.astype(np.int64)])
    return BatchPlan(ids, subj, idx, ids[dom])


def batches_per_epoch(sizes: Mapping[str, int], batch_size: int) -> int:
    return math.ceil(sum(sizes.values()) / batch_size)


def epoch_plans(sizes, batch_size, theta, strategy, rng) -> list[BatchPlan]:
    return [compose_batch(sizes, batch_size, theta, strategy, rng)
            for _ in range(batches_per_epoch(sizes, batch_size))]


@dataclass(frozen=True)
class SamplerStats:
    n_plans: int
    dominant_fraction_mean: float
    dominant_frequency: dict[str, float]
    sample_frequency: dict[str, float]
    dominant_counts: dict[str, int]


def batch_statistics(plans: Sequence[BatchPlan]) -> SamplerStats:
    if not plans:
        raise ValueError("no plans given")
    ids = plans[0].subject_ids
    totals = np.zeros(len(ids), dtype=np.int64)
    dom_counts = np.zeros(len(ids), dtype=np.int64)
    fracs = []
    for plan in plans:
        totals += np.bincount(plan.subjects, minlength=len(ids))
        if plan.dominant_subject is not None:
            code = ids.index(plan.dominant_subject)
            dom_counts[code] += 1
            fracs.append(np.count_nonzero(plan.subjects == code) / len(plan))
    n_dom = int(dom_counts.sum())
    return SamplerStats(
        n_plans=len(plans),
        dominant_fraction_mean=float(np.mean(fracs)) if fracs else float("nan"),
        dominant_frequency={s: (dom_counts[k] / n_dom if n_dom else float("nan")) for k, s in enumerate(ids)},
        sample_frequency={s: totals[k] / totals.sum() for k, s in enumerate(ids)},
        dominant_counts={s: int(dom_counts[k]) for k, s in enumerate(ids)},
    )
