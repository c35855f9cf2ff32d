"""Word error rate with S/D/I breakdown, a mel-statistics similarity proxy and
the evaluation report.

The similarity score is NOT a speaker-verification embedding: it is the cosine
between per-bin (mean, std) vectors of two normalized mel segments.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .errors import EmptyInputError


@dataclass(frozen=True)
class WerBreakdown:
    wer: float
    S: int
    D: int
    I: int  # noqa: E741
    n_ref_words: int

    def to_dict(self) -> dict:
        return asdict(self)


def normalize_text(text: str) -> list[str]:
    return text.lower().split()


def align_counts(ref: list, hyp: list) -> tuple[int, int, int]:
    """(S, D, I) of a minimum-edit alignment of two word lists.

    The backtrace walks from the end and prefers, among optimal moves, a match
    or substitution, then an insertion, then a deletion.
    """
    n, m = len(ref), len(hyp)
    # cost[i][j]: edits turning ref[:i] into hyp[:j]
    cost = [list(range(m + 1))]
    for i in range(1, n + 1):
        prev = cost[-1]
        left = i
        row = [i]
        r = ref[i - 1]
        for j in range(1, m + 1):
            best = prev[j - 1] + (r != hyp[j - 1])
            if left + 1 < best:
                best = left + 1
            if prev[j] + 1 < best:
                best = prev[j] + 1
            row.append(best)
            left = best
        cost.append(row)
    s = d = ins = 0
    i, j = n, m
    while i or j:
        c = cost[i][j]
        if i and j and c == cost[i - 1][j - 1] + (ref[i - 1] != hyp[j - 1]):
            s += ref[i - 1] != hyp[j - 1]
            i, j = i - 1, j - 1
        elif j and c == cost[i][j - 1] + 1:
            ins += 1
            j -= 1
        else:
            d += 1
            i -= 1
    return s, d, ins


def wer(ref: str, hyp: str) -> WerBreakdown:
    r, h = normalize_text(ref), normalize_text(hyp)
    if not r:
        raise EmptyInputError("reference transcript is empty")
    s, d, i = align_counts(r, h)
    return WerBreakdown((s + d + i) / len(r), s, d, i, len(r))


def corpus_wer(pairs) -> WerBreakdown:
    """Pooled WER: counts summed over (ref, hyp) pairs before dividing."""
    parts = [wer(r, h) for r, h in pairs]
    if not parts:
        raise EmptyInputError("corpus_wer needs at least one pair")
    s, d, i = (sum(getattr(p, k) for p in parts) for k in ("S", "D", "I"))
    n = sum(p.n_ref_words for p in parts)
    return WerBreakdown((s + d + i) / n, s, d, i, n)


# -- similarity proxy ---------------------------------------------------------


def stat_vector(mel) -> np.ndarray:
    x = np.asarray(mel, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] == 0:
        raise EmptyInputError("mel segment is empty")
    return np.concatenate([x.mean(0), x.std(0)])


def cosine(a, b) -> float:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    den = np.linalg.norm(a) * np.linalg.norm(b)
    if den == 0.0:
        return 1.0 if np.array_equal(a, b) else 0.0
    return float(np.clip(a @ b / den, -1.0, 1.0))


def mel_stat_similarity(prompt_mel, continuation_mel) -> float:
    """Proxy speaker similarity in [-1, 1]; see the module docstring."""
    return cosine(stat_vector(prompt_mel), stat_vector(continuation_mel))


# -- report -------------------------------------------------------------------


def evaluation_report(utterances: list[dict], duration: dict | None = None) -> dict:
    """``utterances`` rows carry ``utt_id``, ``ref`` and ``hyp`` plus optional
    extra fields (e.g. ``regen_mse``, ``similarity``), copied through."""
    rows = []
    for u in utterances:
        row = dict(u)
        row["wer"] = wer(u["ref"], u["hyp"]).to_dict()
        rows.append(row)
    pooled = corpus_wer([(u["ref"], u["hyp"]) for u in utterances]).to_dict() if utterances else None
    summary = {"wer": pooled}
    for key in ("regen_mse", "baseline_mse", "similarity"):
        vals = [u[key] for u in utterances if key in u]
        if vals:
            summary[f"mean_{key}"] = float(np.mean(vals))
    return {"utterances": rows, "summary": summary, "duration": duration}


def write_report(path, report: dict) -> Path:
    path = Path(path)
    path.write_text(json.dumps(report, indent=2, sort_keys=True))
    return path
