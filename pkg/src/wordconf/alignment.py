"""Levenshtein alignment and the correctness targets derived from it.

Hypothesis positions are labelled 1 when the alignment marks them as a match
and 0 when they are inserted or substituted. Deleted reference tokens have no
hypothesis position; they only count towards WER.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Hashable, Sequence

from .wordpiece import Segmentation, WordPieceVocab, decode, encode

MATCH, SUB, DEL, INS = "match", "substitute", "delete", "insert"
# preference among equal-cost choices while tracing forward
_ORDER = (MATCH, SUB, DEL, INS)


@dataclass(frozen=True)
class EditOp:
    op: str
    hyp: int | None
    ref: int | None


@dataclass(frozen=True)
class EditScript:
    ops: tuple[EditOp, ...]
    cost: int

    def hyp_ops(self) -> list[str]:
        """One op name per hypothesis position, in order."""
        return [o.op for o in self.ops if o.hyp is not None]

    def counts(self) -> dict[str, int]:
        out = dict.fromkeys(_ORDER, 0)
        for o in self.ops:
            out[o.op] += 1
        return out


def _suffix_costs(hyp: Sequence[Hashable], ref: Sequence[Hashable]) -> list[list[int]]:
    """``d[i][j]``: edit distance between ``hyp[i:]`` and ``ref[j:]``."""
    n, m = len(hyp), len(ref)
    d = [[0] * (m + 1) for _ in range(n + 1)]
    d[n] = list(range(m, -1, -1))
    for i in range(n - 1, -1, -1):
        h, row, below = hyp[i], d[i], d[i + 1]
        row[m] = n - i
        for j in range(m - 1, -1, -1):
            row[j] = min(below[j + 1] + (h != ref[j]), row[j + 1] + 1, below[j] + 1)
    return d


def edit_distance(hyp: Sequence[Hashable], ref: Sequence[Hashable]) -> EditScript:
    """Minimum unit-cost edit script turning ``ref`` into ``hyp``.

    The cost table is built over suffixes and the script is traced from the
    start of both sequences. At each step the first optimal choice in the
    order match, substitute, delete, insert is taken, so among all optimal
    scripts the one returned is lexicographically smallest under that order.
    """
    d = _suffix_costs(hyp, ref)
    n, m = len(hyp), len(ref)
    ops, i, j = [], 0, 0
    while i < n or j < m:
        here = d[i][j]
        if i < n and j < m and d[i + 1][j + 1] + (hyp[i] != ref[j]) == here:
            ops.append(EditOp(MATCH if hyp[i] == ref[j] else SUB, i, j))
            i, j = i + 1, j + 1
        elif j < m and d[i][j + 1] + 1 == here:
            ops.append(EditOp(DEL, None, j))
            j += 1
        else:
            ops.append(EditOp(INS, i, None))
            i += 1
    return EditScript(tuple(ops), d[0][0])


@dataclass(frozen=True)
class LabelSet:
    wp_labels: tuple[int, ...]
    word_labels: tuple[int, ...]
    eow_mask: tuple[int, ...]
    deletions: int


def wp_labels(hyp_seg: Segmentation, ref_seg: Segmentation) -> list[int]:
    """Per hypothesis piece: 1 if aligned as a match against the reference pieces."""
    script = edit_distance(hyp_seg.wp_ids, ref_seg.wp_ids)
    return [int(op == MATCH) for op in script.hyp_ops()]


def word_labels(hyp_seg: Segmentation, ref_words: Sequence[str],
                vocab: WordPieceVocab) -> tuple[list[int], list[int], int]:
    """Word correctness ``d(w)``, end-of-word mask, and deletion count."""
    hyp_words = decode(hyp_seg, vocab) if len(hyp_seg) else []
    script = edit_distance(hyp_words, list(ref_words))
    labels = [int(op == MATCH) for op in script.hyp_ops()]
    return labels, hyp_seg.eow_mask(), script.counts()[DEL]


def label_hypothesis(hyp_seg: Segmentation, ref_words: Sequence[str],
                     vocab: WordPieceVocab) -> LabelSet:
    ref_seg = encode(ref_words, vocab) if ref_words else vocab.segmentation([])
    dw, eow, dels = word_labels(hyp_seg, ref_words, vocab)
    return LabelSet(tuple(wp_labels(hyp_seg, ref_seg)), tuple(dw), tuple(eow), dels)


class UndefinedWERError(ValueError):
    """WER requested for an empty reference with a non-empty hypothesis."""


def utterance_targets(hyp_words: Sequence[str], ref_words: Sequence[str]) -> tuple[float, float]:
    """``(WCR, WER)`` for one utterance. WCR of an empty hypothesis is 0."""
    script = edit_distance(list(hyp_words), list(ref_words))
    c = script.counts()
    wcr = c[MATCH] / len(hyp_words) if hyp_words else 0.0
    if not ref_words:
        if hyp_words:
            raise UndefinedWERError("reference is empty but hypothesis is not")
        return wcr, 0.0
    return wcr, (c[SUB] + c[INS] + c[DEL]) / len(ref_words)


def error_counts(hyp_words: Sequence[str], ref_words: Sequence[str]) -> tuple[int, int]:
    """``(errors, reference length)``: the WER numerator and denominator."""
    c = edit_distance(list(hyp_words), list(ref_words)).counts()
    return c[SUB] + c[INS] + c[DEL], len(ref_words)
