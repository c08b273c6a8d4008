"""Caption metrics: BLEU-k and ROUGE-L natively, everything else through external scorers.

Native scorers tokenise by lower-casing, dropping ASCII punctuation and
splitting on whitespace.  They are meant for self-consistent comparisons;
numbers comparable with other work should come from the reference toolkits
plugged in through :class:`ScorerRegistry`.
"""

from __future__ import annotations

import math
import shlex
import string
import subprocess
from collections import Counter
from typing import Iterable, Sequence

from .._kernels import lcs_length
from ..core import BrainAlignError

ROUGE_BETA = 1.2
UNAVAILABLE = "unavailable"
_STRIP = str.maketrans("", "", string.punctuation)


def tokenize(text: str) -> list[str]:
    return text.lower().translate(_STRIP).split()


def _ngrams(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def _closest_ref_len(c: int, ref_lens: Iterable[int]) -> int:
    return min(ref_lens, key=lambda r: (abs(r - c), r))


def _clipped_counts(cand: list[str], refs: list[list[str]], k: int) -> tuple[list[int], list[int]]:
    matched, total = [], []
    for n in range(1, k + 1):
        counts = _ngrams(cand, n)
        max_ref: Counter = Counter()
        for r in refs:
            for g, c in _ngrams(r, n).items():
                max_ref[g] = max(max_ref[g], c)
        matched.append(sum(min(c, max_ref[g]) for g, c in counts.items()))
        total.append(max(0, len(cand) - n + 1))
    return matched, total


def _combine(matched, total, c_len, r_len) -> float:
    if c_len == 0 or any(m == 0 for m in matched) or any(t == 0 for t in total):
        return 0.0
    log_p = sum(math.log(m / t) for m, t in zip(matched, total)) / len(matched)
    bp = 1.0 if c_len > r_len else math.exp(1.0 - r_len / c_len)
    return bp * math.exp(log_p)


def bleu_k(candidate: str, references: Sequence[str], k: int = 4) -> float:
    """Sentence BLEU-k: geometric mean of clipped 1..k-gram precisions times brevity penalty.

    The reference length is the one closest to the candidate length (shorter
    wins ties).  No smoothing: any zero precision gives 0.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    if not references:
        raise ValueError("at least one reference is required")
    cand = tokenize(candidate)
    refs = [tokenize(r) for r in references]
    matched, total = _clipped_counts(cand, refs, k)
    return _combine(matched, total, len(cand), _closest_ref_len(len(cand), [len(r) for r in refs]))


def corpus_bleu(candidates: Sequence[str], references: Sequence[Sequence[str]], k: int = 4) -> float:
    """Corpus BLEU-k with n-gram statistics and lengths pooled over all pairs."""
    if len(candidates) != len(references):
        raise ValueError("candidates and references must pair up")
    matched = [0] * k
    total = [0] * k
    c_len = r_len = 0
    for cand_text, ref_texts in zip(candidates, references):
        if not ref_texts:
            raise ValueError("at least one reference is required per candidate")
        cand = tokenize(cand_text)
        refs = [tokenize(r) for r in ref_texts]
        m, t = _clipped_counts(cand, refs, k)
        matched = [a + b for a, b in zip(matched, m)]
        total = [a + b for a, b in zip(total, t)]
        c_len += len(cand)
        r_len += _closest_ref_len(len(cand), [len(r) for r in refs])
    return _combine(matched, total, c_len, r_len)


def _lcs(a: list[str], b: list[str]) -> int:
    vocab: dict[str, int] = {}
    ia = [vocab.setdefault(t, len(vocab)) for t in a]
    ib = [vocab.setdefault(t, len(vocab)) for t in b]
    return lcs_length(ia, ib)


def _f_beta(p: float, r: float, beta: float) -> float:
    if p == 0.0 or r == 0.0:
        return 0.0
    return (1 + beta ** 2) * p * r / (r + beta ** 2 * p)


def rouge_l(candidate: str, reference: str, beta: float = ROUGE_BETA) -> float:
    """LCS-based F-measure, F = (1 + b^2) P R / (R + b^2 P)."""
    c, r = tokenize(candidate), tokenize(reference)
    if not c or not r:
        return 0.0
    lcs = _lcs(c, r)
    return _f_beta(lcs / len(c), lcs / len(r), beta)


def rouge_l_multi(candidate: str, references: Sequence[str], beta: float = ROUGE_BETA) -> float:
    """Multi-reference ROUGE-L: best precision and best recall over references, then F."""
    c = tokenize(candidate)
    if not c or not references:
        return 0.0
    p_best = r_best = 0.0
    for ref in references:
        r = tokenize(ref)
        if not r:
            continue
        lcs = _lcs(c, r)
        p_best = max(p_best, lcs / len(c))
        r_best = max(r_best, lcs / len(r))
    return _f_beta(p_best, r_best, beta)


# --------------------------------------------------------------------------
# external scorers
# --------------------------------------------------------------------------

class ScorerError(BrainAlignError):
    pass


def _clean(text: str) -> str:
    return " ".join(text.replace("\t", " ").split())


def encode_pairs(pairs: Sequence[tuple[str, Sequence[str]]]) -> str:
    """One line per pair: candidate, then each reference, tab-separated."""
    return "".join("\t".join([_clean(c), *(_clean(r) for r in refs)]) + "\n" for c, refs in pairs)


class ScorerRegistry:
    """Named external scoring commands.

    A scorer reads ``candidate<TAB>ref1<TAB>ref2...`` lines on stdin and
    writes one decimal score per line on stdout.
    """

    def __init__(self):
        self._commands: dict[str, list[str]] = {}

    def register(self, name: str, command) -> None:
        self._commands[name] = shlex.split(command) if isinstance(command, str) else list(command)

    def unregister(self, name: str) -> None:
        self._commands.pop(name, None)

    def names(self) -> list[str]:
        return sorted(self._commands)

    def copy(self) -> "ScorerRegistry":
        other = ScorerRegistry()
        other._commands = {k: list(v) for k, v in self._commands.items()}
        return other

    def score(self, name: str, pairs: Sequence[tuple[str, Sequence[str]]], timeout: float = 600):
        """Per-pair scores, or ``UNAVAILABLE`` when the scorer is unknown or not installed."""
        cmd = self._commands.get(name)
        if cmd is None:
            return UNAVAILABLE
        try:
            proc = subprocess.run(cmd, input=encode_pairs(pairs), capture_output=True, text=True, timeout=timeout)
        except FileNotFoundError:
            return UNAVAILABLE
        if proc.returncode != 0:
            raise ScorerError(f"scorer {name!r} exited with {proc.returncode}: {proc.stderr.strip()[:500]}")
        lines = [ln for ln in proc.stdout.splitlines() if ln.strip()]
        if len(lines) != len(pairs):
            raise ScorerError(f"scorer {name!r} returned {len(lines)} scores for {len(pairs)} pairs")
        try:
            scores = [float(ln) for ln in lines]
        except ValueError as exc:
            raise ScorerError(f"scorer {name!r} emitted a non-decimal line: {exc}") from None
        if not all(math.isfinite(s) for s in scores):
            raise ScorerError(f"scorer {name!r} emitted a non-finite score")
        return scores


default_registry = ScorerRegistry()


def register_scorer(name: str, scorer) -> None:
    default_registry.register(name, scorer)


def caption_report(
    candidates: Sequence[str],
    references: Sequence[Sequence[str]],
    metrics: Sequence[str] = (),
    registry: ScorerRegistry | None = None,
) -> dict:
    """Corpus BLEU-1..4, mean ROUGE-L and the mean of each requested external metric."""
    registry = default_registry if registry is None else registry
    out: dict = {f"BLEU{k}": corpus_bleu(candidates, references, k) for k in range(1, 5)}
    out["ROUGE_L"] = (sum(rouge_l_multi(c, r) for c, r in zip(candidates, references)) / len(candidates)
                      if candidates else float("nan"))
    pairs = list(zip(candidates, references))
    for name in metrics:
        scores = registry.score(name, pairs)
        out[name] = scores if scores == UNAVAILABLE else (sum(scores) / len(scores) if scores else float("nan"))
    return out
