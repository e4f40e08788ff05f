"""Objective metrics: accent-class accuracy against oracles, log-F0
distribution by accent class, speaker similarity, and BLEU@4.

Accent class indices carry no inherent H/L meaning, so oracle accuracy
first fits the best binary labeling of the codebook on a calibration
set (exhaustive over all 2^K assignments) and then applies it frozen.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .corpus import Alignment, mora_spans
from .errors import InputError, NumericError

AlvOraclePair = tuple[Sequence[int], str]


def mora_majority_alv(phoneme_alvs: Sequence[int], codebook_size: int) -> list[int]:
    """Collapse per-phoneme classes to one class per CV mora by majority,
    ties to the lowest index."""
    if len(phoneme_alvs) % 2 != 0:
        raise InputError(f"odd phoneme count {len(phoneme_alvs)} cannot form morae")
    out = []
    for start, end in mora_spans(len(phoneme_alvs)):
        counts = np.bincount(
            np.asarray(phoneme_alvs[start:end]), minlength=codebook_size
        )
        out.append(int(counts.argmax()))
    return out


def _mapping_from_bits(bits: int, codebook_size: int) -> dict[int, str]:
    return {k: ("H" if (bits >> k) & 1 else "L") for k in range(codebook_size)}


def fit_alv_mapping(
    pairs: Iterable[AlvOraclePair], codebook_size: int
) -> dict[int, str]:
    """Exhaustive scan over all 2^K class-to-H/L assignments, maximizing
    mora accuracy on the given pairs. Ties resolve to the lowest bit
    pattern, so the result is deterministic."""
    mora_alvs: list[int] = []
    mora_oracle: list[str] = []
    for alvs, oracle in pairs:
        _validate_pair(alvs, oracle)
        mora_alvs.extend(mora_majority_alv(alvs, codebook_size))
        mora_oracle.extend(oracle)
    if not mora_alvs:
        raise InputError("no morae to fit a mapping on")
    alv_arr = np.asarray(mora_alvs)
    is_h = np.asarray([s == "H" for s in mora_oracle])
    best_bits, best_hits = 0, -1
    for bits in range(2**codebook_size):
        maps_h = np.asarray(
            [(bits >> k) & 1 == 1 for k in range(codebook_size)]
        )
        hits = int((maps_h[alv_arr] == is_h).sum())
        if hits > best_hits:
            best_bits, best_hits = bits, hits
    return _mapping_from_bits(best_bits, codebook_size)


def _validate_pair(alvs: Sequence[int], oracle: str | None) -> None:
    if oracle is None:
        raise InputError("utterance has no oracle accent labels")
    if len(alvs) != 2 * len(oracle):
        raise InputError(
            f"{len(alvs)} phoneme classes vs {len(oracle)} oracle morae"
        )


def alv_oracle_accuracy(
    pairs: Iterable[AlvOraclePair],
    codebook_size: int,
    mapping: dict[int, str] | None = None,
) -> tuple[float, dict[int, str]]:
    """Fraction of morae whose mapped class equals the oracle symbol.

    With mapping=None the optimal assignment is fitted on these same
    pairs (callers wanting a frozen mapping fit it on a calibration
    split first and pass it in).
    """
    pairs = list(pairs)
    if mapping is None:
        mapping = fit_alv_mapping(pairs, codebook_size)
    total = hits = 0
    for alvs, oracle in pairs:
        _validate_pair(alvs, oracle)
        for mora_class, symbol in zip(
            mora_majority_alv(alvs, codebook_size), oracle
        ):
            hits += mapping[mora_class] == symbol
            total += 1
    if total == 0:
        raise InputError("no morae to score")
    return hits / total, mapping


@dataclass
class ClassStats:
    count: int
    mean: float | None = None
    std: float | None = None
    quartiles: tuple[float, float, float] | None = None


@dataclass
class Logf0Report:
    stats: dict[int, ClassStats]
    points: list[tuple[int, float]]
    excluded_phonemes: int
    increasing_permutation: list[int] | None
    min_gap: float | None


def increasing_permutation(
    means: dict[int, float]
) -> tuple[list[int] | None, float | None]:
    """Class order with strictly increasing means, or None if means tie.
    Gap is the smallest adjacent difference (None with < 2 classes)."""
    if not means:
        return None, None
    order = sorted(means, key=lambda k: (means[k], k))
    if len(order) == 1:
        return order, None
    diffs = [means[b] - means[a] for a, b in zip(order, order[1:])]
    if min(diffs) <= 0.0:
        return None, min(diffs)
    return order, min(diffs)


def logf0_by_alv(
    entries: Iterable[tuple[Sequence[int], np.ndarray, Alignment]],
    codebook_size: int,
) -> Logf0Report:
    """Bucket per-phoneme mean log-F0 by accent class.

    Each entry is (per-phoneme classes, frame log-F0 with 0 = unvoiced,
    alignment). Phonemes with no voiced frames are excluded and counted.
    """
    buckets: dict[int, list[float]] = {k: [] for k in range(codebook_size)}
    points: list[tuple[int, float]] = []
    excluded = 0
    for alvs, log_f0, alignment in entries:
        log_f0 = np.asarray(log_f0, dtype=np.float64).reshape(-1)
        if len(alvs) != len(alignment.spans):
            raise InputError(
                f"{len(alvs)} classes for {len(alignment.spans)} phonemes"
            )
        for (idx, start, end), k in zip(alignment.spans, alvs):
            segment = log_f0[start:end]
            voiced = segment[segment != 0]
            if voiced.size == 0:
                excluded += 1
                continue
            value = float(voiced.mean())
            buckets[int(k)].append(value)
            points.append((int(k), value))
    stats: dict[int, ClassStats] = {}
    means: dict[int, float] = {}
    for k in range(codebook_size):
        vals = np.asarray(buckets[k])
        if vals.size == 0:
            stats[k] = ClassStats(count=0)
            continue
        q1, q2, q3 = np.percentile(vals, [25, 50, 75])
        stats[k] = ClassStats(
            count=int(vals.size),
            mean=float(vals.mean()),
            std=float(vals.std()),
            quartiles=(float(q1), float(q2), float(q3)),
        )
        means[k] = float(vals.mean())
    perm, gap = increasing_permutation(means)
    return Logf0Report(stats, points, excluded, perm, gap)


def write_points_csv(points: Sequence[tuple[int, float]], path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = ["alv_class,log_f0"]
    lines.extend(f"{k},{v:.6f}" for k, v in points)
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def write_stats_table(stats: dict[int, ClassStats], path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = ["alv_class\tcount\tmean\tstd\tq1\tmedian\tq3"]
    for k in sorted(stats):
        s = stats[k]
        if s.count == 0:
            lines.append(f"{k}\t0\t-\t-\t-\t-\t-")
        else:
            q1, q2, q3 = s.quartiles
            lines.append(
                f"{k}\t{s.count}\t{s.mean:.6f}\t{s.std:.6f}"
                f"\t{q1:.6f}\t{q2:.6f}\t{q3:.6f}"
            )
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


class DeskSpeakerEmbedder:
    """Four prosody statistics per utterance: mean/std of voiced log-F0
    and mean/std of frames-per-phoneme. A stand-in for a real speaker
    verification embedding; values are only comparable within a run."""

    def embed(self, log_f0: np.ndarray, durations: np.ndarray) -> np.ndarray:
        log_f0 = np.asarray(log_f0, dtype=np.float64).reshape(-1)
        durations = np.asarray(durations, dtype=np.float64).reshape(-1)
        voiced = log_f0[log_f0 != 0]
        if voiced.size == 0 or durations.size == 0:
            raise InputError("cannot embed an empty or fully unvoiced utterance")
        return np.array(
            [voiced.mean(), voiced.std(), durations.mean(), durations.std()]
        )


def cosine(u: np.ndarray, v: np.ndarray) -> float:
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu == 0 or nv == 0:
        raise NumericError("cosine undefined for zero-norm embedding")
    return float(np.dot(u, v) / (nu * nv))


def speaker_similarity(
    synth: tuple[np.ndarray, np.ndarray],
    references: Sequence[tuple[np.ndarray, np.ndarray]],
    embedder: DeskSpeakerEmbedder | None = None,
) -> float:
    """Cosine between the synthetic utterance's embedding and the mean
    embedding of the reference set (mean first, cosine second)."""
    if len(references) == 0:
        raise InputError("reference utterance set is empty")
    embedder = embedder or DeskSpeakerEmbedder()
    ref_embs = np.stack([embedder.embed(f, d) for f, d in references])
    return cosine(embedder.embed(*synth), ref_embs.mean(axis=0))


def _ngram_counts(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


PRECISION_FLOOR = 1e-9


def corpus_bleu4(
    candidates: Sequence[Sequence[str]],
    references_list: Sequence[Sequence[Sequence[str]]],
) -> float:
    """Corpus-level BLEU with modified n-gram precision (n = 1..4),
    brevity penalty against closest reference lengths, and a precision
    floor of 1e-9 where a populated order has zero matches. Orders with
    no candidate n-grams anywhere are dropped from the geometric mean so
    short identical sentences still score 1.0.
    """
    if len(candidates) != len(references_list):
        raise InputError(
            f"{len(candidates)} candidates vs {len(references_list)} reference sets"
        )
    if not candidates:
        raise InputError("empty candidate list")
    matches = [0] * 4
    totals = [0] * 4
    cand_len = 0
    ref_len = 0
    for cand, refs in zip(candidates, references_list):
        if len(cand) == 0:
            raise InputError("empty candidate sentence")
        if len(refs) == 0:
            raise InputError("empty reference set")
        cand_len += len(cand)
        ref_len += min(
            (len(r) for r in refs),
            key=lambda rl: (abs(rl - len(cand)), rl),
        )
        for n in range(1, 5):
            cand_counts = _ngram_counts(cand, n)
            if not cand_counts:
                continue
            max_ref = Counter()
            for r in refs:
                for gram, c in _ngram_counts(r, n).items():
                    if c > max_ref[gram]:
                        max_ref[gram] = c
            totals[n - 1] += sum(cand_counts.values())
            matches[n - 1] += sum(
                min(c, max_ref[gram]) for gram, c in cand_counts.items()
            )
    log_sum = 0.0
    effective = 0
    for n in range(4):
        if totals[n] == 0:
            continue
        p = matches[n] / totals[n] if matches[n] > 0 else PRECISION_FLOOR
        log_sum += math.log(p)
        effective += 1
    if effective == 0:
        raise InputError("no candidate n-grams at any order")
    bp = 1.0 if cand_len > ref_len else math.exp(1.0 - ref_len / cand_len)
    return bp * math.exp(log_sum / effective)


def bleu4(candidate: Sequence[str], references: Sequence[Sequence[str]]) -> float:
    return corpus_bleu4([candidate], [references])


def two_means_split(values: np.ndarray) -> np.ndarray:
    """Exhaustive optimal 1-D split into low/high clusters.

    Returns a boolean array, True for the higher-mean cluster. Minimizes
    total within-cluster squared error over all contiguous splits of the
    sorted values; ties keep the earliest split. A single value is
    labelled low.
    """
    values = np.asarray(values, dtype=np.float64).reshape(-1)
    n = values.size
    if n == 0:
        raise InputError("no values to split")
    if n == 1:
        return np.array([False])
    order = np.argsort(values, kind="stable")
    sorted_vals = values[order]

    def sse(x: np.ndarray) -> float:
        return float(((x - x.mean()) ** 2).sum()) if x.size else 0.0

    best_s, best_cost = 1, math.inf
    for s in range(1, n):
        cost = sse(sorted_vals[:s]) + sse(sorted_vals[s:])
        if cost < best_cost - 1e-12:
            best_s, best_cost = s, cost
    labels = np.zeros(n, dtype=bool)
    labels[order[best_s:]] = True
    return labels


def score_accent_from_f0(mora_values: np.ndarray, oracle: str) -> np.ndarray:
    """Per-mora correctness of the H/L pattern implied by mora-level
    log-F0 means, judged by the optimal two-cluster split (higher
    cluster = H)."""
    mora_values = np.asarray(mora_values, dtype=np.float64).reshape(-1)
    if mora_values.size != len(oracle):
        raise InputError(
            f"{mora_values.size} mora values vs {len(oracle)} oracle symbols"
        )
    predicted_h = two_means_split(mora_values)
    oracle_h = np.array([s == "H" for s in oracle])
    return predicted_h == oracle_h
