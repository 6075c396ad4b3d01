"""Word-piece vocabulary: BPE-style construction, greedy encoding,
boundary-marker decoding, and enumeration of alternative segmentations.

A word's first piece carries the boundary marker ``_``, so decoding a piece
sequence back to words is unique; encoding a word is not.
"""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path
from typing import Iterable, Sequence

MARKER = "_"


class WordPieceError(ValueError):
    """Input cannot be expressed with this vocabulary."""


class MalformedSegmentationError(WordPieceError):
    """Piece sequence does not start with a word-boundary piece."""


@dataclass(frozen=True)
class Segmentation:
    wp_ids: tuple[int, ...]
    word_starts: tuple[bool, ...]

    def __len__(self) -> int:
        return len(self.wp_ids)

    @property
    def n_words(self) -> int:
        return sum(self.word_starts)

    def eow_mask(self) -> list[int]:
        """1 at the final piece of every word."""
        m = len(self.wp_ids)
        return [int(i == m - 1 or self.word_starts[i + 1]) for i in range(m)]

    def word_spans(self) -> list[tuple[int, int]]:
        """Half-open ``(start, end)`` piece ranges, one per word."""
        spans, start = [], None
        for i, s in enumerate(self.word_starts):
            if s:
                if start is not None:
                    spans.append((start, i))
                start = i
        if start is not None:
            spans.append((start, len(self.word_starts)))
        return spans


class WordPieceVocab:
    def __init__(self, pieces: Sequence[str], boundary_marker: str = MARKER):
        if boundary_marker != MARKER:
            raise WordPieceError(f"unsupported boundary marker {boundary_marker!r}")
        self.pieces = list(pieces)
        self.boundary_marker = boundary_marker
        self.index = {p: i for i, p in enumerate(self.pieces)}
        if len(self.index) != len(self.pieces):
            raise WordPieceError("duplicate pieces in vocabulary")
        self.alphabet = sorted({ch for p in self.pieces for ch in p.lstrip(MARKER)})
        for ch in self.alphabet:
            if ch not in self.index or MARKER + ch not in self.index:
                raise WordPieceError(f"character {ch!r} lacks a bare or boundary piece")
        self.max_len = max(len(p) for p in self.pieces)

    def __len__(self) -> int:
        return len(self.pieces)

    def __eq__(self, other) -> bool:
        return isinstance(other, WordPieceVocab) and self.pieces == other.pieces

    def __hash__(self) -> int:
        return hash(tuple(self.pieces))

    def is_start(self, wp_id: int) -> bool:
        return self.pieces[wp_id].startswith(MARKER)

    def segmentation(self, wp_ids: Iterable[int]) -> Segmentation:
        ids = tuple(int(i) for i in wp_ids)
        for i in ids:
            if not 0 <= i < len(self.pieces):
                raise WordPieceError(f"piece id {i} outside vocabulary of {len(self.pieces)}")
        return Segmentation(ids, tuple(self.is_start(i) for i in ids))

    def to_json(self) -> dict:
        return {"version": 1, "boundary_marker": self.boundary_marker, "pieces": self.pieces}

    @classmethod
    def from_json(cls, obj: dict) -> "WordPieceVocab":
        if obj.get("version") != 1:
            raise WordPieceError(f"unsupported vocab version {obj.get('version')!r}")
        return cls(obj["pieces"], obj.get("boundary_marker", MARKER))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=1) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "WordPieceVocab":
        return cls.from_json(json.loads(Path(path).read_text()))


def build_vocab(corpus: Iterable[str], target_size: int) -> WordPieceVocab:
    """Greedy pair-merge vocabulary of exactly ``target_size`` pieces.

    Starts from every character with and without the boundary marker, then
    repeatedly merges the most frequent adjacent pair (ties go to the
    lexicographically smallest pair). Word order in ``corpus`` is irrelevant.
    """
    counts = Counter(w for w in corpus if w)
    if not counts:
        raise WordPieceError("corpus is empty")
    alphabet = sorted({ch for w in counts for ch in w})
    if MARKER in alphabet:
        raise WordPieceError("words may not contain the boundary marker")
    pieces = [p for ch in alphabet for p in (MARKER + ch, ch)]
    if target_size < len(pieces):
        raise WordPieceError(f"target_size {target_size} below alphabet coverage {len(pieces)}")
    known = set(pieces)
    words = {tuple([MARKER + w[0], *w[1:]]): n for w, n in sorted(counts.items())}

    while len(pieces) < target_size:
        pairs: Counter = Counter()
        for syms, n in words.items():
            for a, b in zip(syms, syms[1:]):
                pairs[a, b] += n
        candidates = [(-n, pair) for pair, n in pairs.items() if pair[0] + pair[1] not in known]
        if not candidates:
            raise WordPieceError(f"corpus supports only {len(pieces)} pieces, asked {target_size}")
        _, (a, b) = min(candidates)
        merged = a + b
        pieces.append(merged)
        known.add(merged)
        words = {_merge(syms, a, b): n for syms, n in words.items()}
    return WordPieceVocab(pieces)


def _merge(syms: tuple[str, ...], a: str, b: str) -> tuple[str, ...]:
    out, i = [], 0
    while i < len(syms):
        if i + 1 < len(syms) and syms[i] == a and syms[i + 1] == b:
            out.append(a + b)
            i += 2
        else:
            out.append(syms[i])
            i += 1
    return tuple(out)


def _encode_word(word: str, vocab: WordPieceVocab) -> list[int]:
    if not word:
        raise WordPieceError("cannot encode an empty word")
    ids, pos, prefix = [], 0, MARKER
    while pos < len(word):
        for end in range(min(len(word), pos + vocab.max_len), pos, -1):
            wp = vocab.index.get(prefix + word[pos:end])
            if wp is not None:
                ids.append(wp)
                pos = end
                break
        else:
            raise WordPieceError(f"character {word[pos]!r} of {word!r} not in vocabulary")
        prefix = ""
    return ids


def encode(words: Sequence[str], vocab: WordPieceVocab) -> Segmentation:
    """Greedy longest-match segmentation, word by word."""
    if not words:
        raise WordPieceError("nothing to encode")
    ids = [i for w in words for i in _encode_word(w, vocab)]
    return vocab.segmentation(ids)


def decode(seg: Segmentation | Sequence[int], vocab: WordPieceVocab) -> list[str]:
    ids = seg.wp_ids if isinstance(seg, Segmentation) else tuple(seg)
    words: list[str] = []
    for n, i in enumerate(ids):
        piece = vocab.pieces[i]
        if piece.startswith(MARKER):
            words.append(piece[1:])
        elif n == 0:
            raise MalformedSegmentationError(f"sequence starts with non-boundary piece {piece!r}")
        else:
            words[-1] += piece
    return words


@lru_cache(maxsize=65536)
def _all_segmentations(word: str, vocab: WordPieceVocab) -> tuple[tuple[int, ...], ...]:
    # suffix[k]: every way to cover word[k:] with bare pieces
    n = len(word)
    suffix: list[list[tuple[int, ...]]] = [[] for _ in range(n + 1)]
    suffix[n] = [()]
    for k in range(n - 1, 0, -1):
        for end in range(k + 1, min(n, k + vocab.max_len) + 1):
            wp = vocab.index.get(word[k:end])
            if wp is not None:
                suffix[k].extend((wp, *rest) for rest in suffix[end])
    out = []
    for end in range(1, min(n, vocab.max_len) + 1):
        wp = vocab.index.get(MARKER + word[:end])
        if wp is not None:
            out.extend((wp, *rest) for rest in suffix[end])
    out.sort(key=lambda ids: (len(ids), [vocab.pieces[i] for i in ids]))
    return tuple(out)


def alternative_segmentations(word: str, vocab: WordPieceVocab,
                              max_alts: int | None = None) -> list[Segmentation]:
    """Every valid segmentation of ``word``, fewest pieces first, then
    lexicographic by piece strings; truncated to ``max_alts``."""
    _encode_word(word, vocab)  # raises on unencodable characters
    alts = _all_segmentations(word, vocab)
    if max_alts is not None:
        alts = alts[:max_alts]
    return [vocab.segmentation(ids) for ids in alts]
