"""Evaluation metrics: BLEU-4, column-wise image edit distance, exact match.

All metrics are pure functions.  Image metrics operate on binarized
{0,1} grids with 1 = ink (dark-on-light convention).
"""
from __future__ import annotations

from collections import Counter
from dataclasses import dataclass

import numpy as np


class MetricError(Exception):
    pass


# ---------------------------------------------------------------------
# BLEU-4
# ---------------------------------------------------------------------

SENTENCE_EPS = 1e-9


def _ngram_counts(seq, n: int) -> Counter:
    return Counter(tuple(seq[i:i + n]) for i in range(len(seq) - n + 1))


def _pair_counts(candidate, reference, n: int) -> tuple[int, int]:
    """(clipped matches, candidate n-gram count) for one pair."""
    cand = _ngram_counts(candidate, n)
    ref = _ngram_counts(reference, n)
    matches = sum(min(c, ref[g]) for g, c in cand.items())
    return matches, max(len(candidate) - n + 1, 0)


def bleu4(candidates, references, mode: str = "corpus") -> float:
    """Cumulative 4-gram BLEU over parallel token-sequence lists.

    corpus mode pools n-gram counts across all pairs (zero pooled
    precision gives 0); sentence mode averages per-pair scores, with
    zero-numerator precisions replaced by eps = 1e-9.  In both modes an
    order with no candidate n-grams at all is skipped rather than scored.
    """
    if len(candidates) != len(references):
        raise MetricError(
            f"bleu4: {len(candidates)} candidates vs {len(references)} references")
    if not candidates:
        raise MetricError("bleu4: empty input")
    if mode == "sentence":
        return float(np.mean([_sentence_bleu(c, r) for c, r in zip(candidates, references)]))
    if mode != "corpus":
        raise MetricError(f"bleu4: unknown mode {mode!r}")
    matches = [0] * 4
    totals = [0] * 4
    c_len = 0
    r_len = 0
    for cand, ref in zip(candidates, references):
        cand, ref = list(cand), list(ref)
        c_len += len(cand)
        r_len += len(ref)
        for n in range(1, 5):
            m, t = _pair_counts(cand, ref, n)
            matches[n - 1] += m
            totals[n - 1] += t
    # orders with no candidate n-grams anywhere (all sequences shorter
    # than n) carry no evidence and are skipped, so identical corpora of
    # short sequences still score 1; a zero precision at a present order
    # zeroes the whole score
    present = [(m, t) for m, t in zip(matches, totals) if t > 0]
    if not present or any(m == 0 for m, _ in present):
        return 0.0
    log_p = sum(np.log(m / t) for m, t in present) / len(present)
    return float(_brevity(c_len, r_len) * np.exp(log_p))


def _sentence_bleu(candidate, reference) -> float:
    candidate, reference = list(candidate), list(reference)
    if not candidate:
        return 0.0
    log_p = 0.0
    orders = 0
    for n in range(1, 5):
        m, t = _pair_counts(candidate, reference, n)
        if t == 0:
            # candidate too short to contain any n-gram of this order;
            # skip rather than smooth, as in corpus mode
            continue
        log_p += np.log(m / t if m > 0 else SENTENCE_EPS)
        orders += 1
    if orders == 0:
        return 0.0
    return float(_brevity(len(candidate), len(reference)) * np.exp(log_p / orders))


def _brevity(c_len: int, r_len: int) -> float:
    if c_len >= r_len:
        return 1.0
    if c_len == 0:
        return 0.0
    return float(np.exp(1.0 - r_len / c_len))


def sentence_bleu4(candidate, reference) -> float:
    """Smoothed single-pair BLEU in [0, 1]; the RL reward function."""
    return _sentence_bleu(candidate, reference)


# ---------------------------------------------------------------------
# image metrics
# ---------------------------------------------------------------------

def binarize(image: np.ndarray, threshold: float = 0.5) -> np.ndarray:
    """Grayscale [0,1] -> {0,1} with 1 = ink; strict pixel < threshold."""
    if not 0.0 < threshold < 1.0:
        raise MetricError(f"binarize: threshold must be in (0, 1), got {threshold}")
    return (np.asarray(image) < threshold).astype(np.uint8)


def levenshtein(a, b) -> int:
    """Edit distance with unit insert/delete/substitute costs."""
    a, b = list(a), list(b)
    if len(a) < len(b):
        a, b = b, a
    prev = list(range(len(b) + 1))
    for i, x in enumerate(a, start=1):
        cur = [i]
        for j, y in enumerate(b, start=1):
            cur.append(min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (x != y)))
        prev = cur
    return prev[-1]


def _column_strings(binary: np.ndarray) -> list[str]:
    return ["".join("1" if v else "0" for v in binary[:, j]) for j in range(binary.shape[1])]


def edit_distance_score(truth: np.ndarray, test: np.ndarray) -> float:
    """1 - (column-wise Levenshtein / truth width), clamped at 0.

    Both images are taken as binary {0,1} grids; columns become 0/1
    strings compared as sequence elements.
    """
    truth = np.asarray(truth)
    test = np.asarray(test)
    if truth.ndim != 2 or test.ndim != 2:
        raise MetricError("edit_distance_score: images must be 2-D")
    if truth.shape[1] == 0:
        raise MetricError("edit_distance_score: zero-width truth image")
    e = levenshtein(_column_strings(truth), _column_strings(test)) / truth.shape[1]
    return max(0.0, 1.0 - e)


def strip_whitespace_columns(binary: np.ndarray) -> np.ndarray:
    """Drop columns with no ink."""
    keep = binary.any(axis=0)
    return binary[:, keep]


def exact_match(truth: np.ndarray, test: np.ndarray, strip_ws: bool = False) -> bool:
    truth = np.asarray(truth)
    test = np.asarray(test)
    if strip_ws:
        truth = strip_whitespace_columns(truth)
        test = strip_whitespace_columns(test)
    return truth.shape == test.shape and bool((truth == test).all())


@dataclass
class MetricReport:
    """One evaluation row; fields follow the summary-table column order."""
    bleu4: float
    edit_distance_score: float
    exact_match: bool
    exact_match_no_ws: bool

    COLUMNS = ("BLEU", "Image Edit Distance", "Exact Match", "Exact Match (-ws)")

    def row(self) -> tuple:
        return (self.bleu4, self.edit_distance_score, self.exact_match, self.exact_match_no_ws)


def evaluate_pair(cand_tokens, ref_tokens, cand_image, ref_image,
                  threshold: float = 0.5) -> MetricReport:
    """Full per-example report; images may be None to skip image metrics."""
    b = sentence_bleu4(cand_tokens, ref_tokens)
    if cand_image is None or ref_image is None:
        return MetricReport(b, 0.0, False, False)
    truth = binarize(ref_image, threshold)
    test = binarize(cand_image, threshold)
    return MetricReport(
        bleu4=b,
        edit_distance_score=edit_distance_score(truth, test),
        exact_match=exact_match(truth, test, strip_ws=False),
        exact_match_no_ws=exact_match(truth, test, strip_ws=True),
    )
