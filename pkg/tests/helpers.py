"""Fixtures and independent oracles shared by the unit and acceptance tests."""

from __future__ import annotations

from functools import lru_cache

import numpy as np

from wordconf.wordpiece import WordPieceVocab

# pinned vocabulary for the "good morning" example: both {_mor, ning} and
# {_morn, ing} exist, and greedy encoding picks the latter
GOOD_MORNING_PIECES = [
    *(p for ch in "dgimnor" for p in ("_" + ch, ch)),
    "_go", "od", "_mor", "ning", "_morn", "ing", "_mom",
]
GOOD_MORNING_HYP = ["_go", "od", "_mor", "ning", "_mom"]
GOOD_MORNING_REF = ["good", "morning"]


def good_morning_vocab() -> WordPieceVocab:
    return WordPieceVocab(GOOD_MORNING_PIECES)


def ids(vocab: WordPieceVocab, pieces) -> list[int]:
    return [vocab.index[p] for p in pieces]


_RANK = {"match": 0, "substitute": 1, "delete": 2, "insert": 3}


def brute_force_alignment(hyp, ref):
    """Exhaustive recursion over every edit script (no memoisation).

    Returns ``(cost, ops)`` for the minimum-cost script; among equal costs
    the op sequence that is lexicographically smallest under the preference
    match < substitute < delete < insert, read from the start.
    """
    if not hyp and not ref:
        return 0, ()
    options = []
    if hyp and ref:
        op = "match" if hyp[0] == ref[0] else "substitute"
        c, rest = brute_force_alignment(hyp[1:], ref[1:])
        options.append((c + (op == "substitute"), (op, *rest)))
    if ref:
        c, rest = brute_force_alignment(hyp, ref[1:])
        options.append((c + 1, ("delete", *rest)))
    if hyp:
        c, rest = brute_force_alignment(hyp[1:], ref)
        options.append((c + 1, ("insert", *rest)))
    return min(options, key=lambda o: (o[0], [_RANK[x] for x in o[1]]))


def memo_alignment(hyp, ref):
    """Same recursion as :func:`brute_force_alignment`, memoised on suffix
    positions. The best script for a suffix pair does not depend on how it
    was reached, so this stays exact while covering length-8 inputs fast."""
    hyp, ref = tuple(hyp), tuple(ref)

    @lru_cache(maxsize=None)
    def best(i, j):
        if i == len(hyp) and j == len(ref):
            return 0, ()
        options = []
        if i < len(hyp) and j < len(ref):
            op = "match" if hyp[i] == ref[j] else "substitute"
            c, rest = best(i + 1, j + 1)
            options.append((c + (op == "substitute"), (op, *rest)))
        if j < len(ref):
            c, rest = best(i, j + 1)
            options.append((c + 1, ("delete", *rest)))
        if i < len(hyp):
            c, rest = best(i + 1, j)
            options.append((c + 1, ("insert", *rest)))
        return min(options, key=lambda o: (o[0], [_RANK[x] for x in o[1]]))

    return best(0, 0)


def pairwise_auc(confs, labels) -> float:
    """O(n^2) count of correctly ordered (correct, incorrect) pairs."""
    pos = [c for c, y in zip(confs, labels) if y == 1]
    neg = [c for c, y in zip(confs, labels) if y == 0]
    total = 0.0
    for p in pos:
        for n in neg:
            total += 1.0 if p > n else 0.5 if p == n else 0.0
    return total / (len(pos) * len(neg))


def threshold_sweep_auc_pr(confs, labels) -> float:
    """AUC-PR for the incorrect class by sweeping every distinct threshold
    on ``1 - conf`` and summing recall steps times precision."""
    score = 1.0 - np.asarray(confs, dtype=float)
    wrong = 1 - np.asarray(labels)
    area, prev_recall = 0.0, 0.0
    for t in sorted(set(score.tolist()), reverse=True):
        flagged = score >= t
        tp = float((wrong & flagged).sum())
        recall = tp / wrong.sum()
        precision = tp / flagged.sum()
        area += (recall - prev_recall) * precision
        prev_recall = recall
    return area


# one line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE_LINES: list[str] = []


def criterion(n: int, ok: bool, detail: str) -> None:
    line = f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    assert ok, line
