"""Synthetic stand-in for a frozen two-pass recognizer.

References are drawn from a head/tail lexicon and pushed through a word
error channel to form an n-best list. A fixed, randomly initialised rescorer
then produces, for every hypothesis piece, the penultimate activation, the
softmax log posterior of the hypothesised piece, and the top-K log
probabilities, exactly the quantities a confidence module reads off a real
second-pass decoder. Corrupted positions get their logit lowered by a random
margin, so posteriors carry real but imperfect error signal.
"""

from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass, field
from functools import cached_property
from typing import Iterator, Sequence

import numpy as np

from .alignment import MATCH, edit_distance
from .wordpiece import (
    Segmentation,
    WordPieceVocab,
    alternative_segmentations,
    build_vocab,
    encode,
)

ROUND_DECIMALS = 6


class ConfigError(ValueError):
    """Generator configuration is inconsistent."""


_ONSETS = ["b", "d", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z",
           "ch", "sh", "br", "tr", "st", "pl", "gr", "f", "h", "j", "w"]
_VOWELS = ["a", "e", "i", "o", "u", "ai", "ou", "ee"]
_CODAS = ["", "", "", "n", "r", "l", "s", "t", "m", "ng", "rd", "x"]
# rare-word syllables: mostly distinct letters, so long-tail pieces are recognisable
_TAIL_ONSETS = ["kh", "zh", "q", "x", "y", "ts", "dj", "kw", "v", "th"]
_TAIL_VOWELS = ["ao", "ue", "y", "ei", "ia", "oe"]
_TAIL_CODAS = ["", "", "q", "kh", "z", "ck"]


def synthetic_words(n: int, rng: np.random.Generator, min_syll: int, max_syll: int,
                    exclude: set[str] = frozenset(), max_chars: int = 12,
                    syllables=(_ONSETS, _VOWELS, _CODAS)) -> list[str]:
    onsets, vowels, codas = syllables
    out: list[str] = []
    seen = set(exclude)
    while len(out) < n:
        k = int(rng.integers(min_syll, max_syll + 1))
        w = "".join(rng.choice(onsets) + rng.choice(vowels) + rng.choice(codas)
                    for _ in range(k))
        if w not in seen and len(w) <= max_chars:
            seen.add(w)
            out.append(w)
    return out


def _zipf(n: int, s: float = 1.0) -> list[float]:
    f = 1.0 / np.arange(1, n + 1) ** s
    return (f / f.sum()).tolist()


@dataclass
class LexiconSpec:
    """Word inventory, sentence lengths, and the error channel.

    Rates are per reference word. Tail words have every rate's hazard
    multiplied by ``tail_multiplier``. Hypotheses after the first in each
    n-best list are drawn with rates scaled by ``beam_error_scale`` (beam
    alternatives are noisier than the best path).
    """

    head_words: list[str]
    head_freqs: list[float]
    tail_words: list[str]
    tail_freqs: list[float]
    tail_prob: float = 0.1
    sub_rate: float = 0.05
    ins_rate: float = 0.015
    del_rate: float = 0.015
    tail_multiplier: float = 4.0
    min_words: int = 2
    max_words: int = 8
    mismatch_rate: float = 0.1
    beam_error_scale: float = 1.5
    shared_confusion_prob: float = 0.5
    difficulty_std: float = 0.8
    # rate multiplier for the word after a deleted or substituted one
    burst_multiplier: float = 8.0

    def __post_init__(self):
        for name in ("tail_prob", "sub_rate", "ins_rate", "del_rate", "mismatch_rate",
                     "shared_confusion_prob"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ConfigError(f"{name}={v} outside [0, 1]")
        if self.difficulty_std < 0.0:
            raise ConfigError("difficulty_std must be >= 0")
        if self.tail_multiplier < 1.0:
            raise ConfigError("tail_multiplier must be >= 1")
        if self.sub_rate + self.del_rate > 1.0:
            raise ConfigError("sub_rate + del_rate must not exceed 1")
        if self.burst_multiplier < 1.0:
            raise ConfigError("burst_multiplier must be >= 1")
        if not 1 <= self.min_words <= self.max_words:
            raise ConfigError("need 1 <= min_words <= max_words")
        if len(self.head_words) != len(self.head_freqs) or len(self.tail_words) != len(self.tail_freqs):
            raise ConfigError("word and frequency lists differ in length")
        if not self.head_words:
            raise ConfigError("head lexicon is empty")

    @classmethod
    def synthetic(cls, n_head: int = 500, n_tail: int = 1000, seed: int = 0, **overrides):
        rng = np.random.default_rng(seed)
        head = synthetic_words(n_head, rng, 1, 2)
        tail = synthetic_words(n_tail, rng, 2, 3, exclude=set(head),
                               syllables=(_TAIL_ONSETS, _TAIL_VOWELS, _TAIL_CODAS))
        return cls(head, _zipf(n_head), tail, _zipf(n_tail, 0.5), **overrides)

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, obj: dict) -> "LexiconSpec":
        obj = dict(obj)
        if "head_words" not in obj:
            synth = {k: obj.pop(k) for k in ("n_head", "n_tail", "seed") if k in obj}
            return cls.synthetic(**synth, **obj)
        return cls(**obj)

    def with_rates(self, **changes) -> "LexiconSpec":
        d = asdict(self)
        d.update(changes)
        return LexiconSpec(**d)

    def vocab_corpus(self, scale: int = 2000) -> list[str]:
        """Frequency-weighted word list used to learn the piece inventory."""
        out = []
        for w, f in zip(self.head_words, self.head_freqs):
            out.extend([w] * max(1, round(scale * f)))
        out.extend(self.tail_words)
        return out

    @cached_property
    def _tail_set(self) -> frozenset[str]:
        return frozenset(self.tail_words)

    @cached_property
    def _confusables(self) -> dict[str, list[str]]:
        words = self.head_words + self.tail_words
        by2: dict[str, list[str]] = {}
        by1: dict[str, list[str]] = {}
        for w in words:
            by2.setdefault(w[:2], []).append(w)
            by1.setdefault(w[:1], []).append(w)
        out = {}
        for w in words:
            cands = [c for c in by2[w[:2]] if c != w] or [c for c in by1[w[:1]] if c != w]
            out[w] = cands or [c for c in self.head_words if c != w]
        return out

    def is_tail(self, word: str) -> bool:
        return word in self._tail_set

    def confusable(self, word: str, rng: np.random.Generator) -> str:
        """A substitute sharing as long a prefix as the lexicon allows."""
        cands = self._confusables.get(word) or [w for w in self.head_words if w != word]
        return cands[int(rng.integers(len(cands)))]

    def sample_word(self, rng: np.random.Generator, tail_prob: float | None = None) -> str:
        p = self.tail_prob if tail_prob is None else tail_prob
        if self.tail_words and rng.random() < p:
            return self.tail_words[int(rng.choice(len(self.tail_words), p=self.tail_freqs))]
        return self.head_words[int(rng.choice(len(self.head_words), p=self.head_freqs))]

    def sample_sentence(self, rng: np.random.Generator) -> list[str]:
        n = int(rng.integers(self.min_words, self.max_words + 1))
        return [self.sample_word(rng) for _ in range(n)]


@dataclass
class AsrSpec:
    """Dimensions and behaviour of the frozen pseudo-recognizer."""

    d_e: int = 32
    d_emb: int = 32
    d_phi: int = 32
    K: int = 4
    max_positions: int = 64
    beam_capacity: int = 16
    seed: int = 1234
    boost: float = 12.0
    margin_mean: float = 3.0
    margin_std: float = 1.5
    tail_margin_scale: float = 0.5
    logit_noise: float = 1.0
    acoustic_noise: float = 0.5
    piece_bias_std: float = 2.0
    difficulty_shift: float = 2.5

    def to_json(self) -> dict:
        return asdict(self)


@dataclass
class Hypothesis:
    wp: tuple[int, ...]
    logpost: np.ndarray
    topk: np.ndarray
    phi: np.ndarray
    score: float
    meta: dict = field(default_factory=dict, compare=False, repr=False)

    def __len__(self) -> int:
        return len(self.wp)

    def to_json(self) -> dict:
        return {"wp": list(self.wp), "logpost": self.logpost.tolist(),
                "topk": self.topk.tolist(), "phi": self.phi.tolist(), "score": self.score}

    @classmethod
    def from_json(cls, obj: dict) -> "Hypothesis":
        m = len(obj["wp"])
        return cls(tuple(obj["wp"]), np.array(obj["logpost"], dtype=np.float64).reshape(m),
                   np.array(obj["topk"], dtype=np.float64).reshape(m, -1),
                   np.array(obj["phi"], dtype=np.float64).reshape(m, -1), float(obj["score"]))


@dataclass
class Utterance:
    id: str
    ref: list[str]
    acoustic: np.ndarray
    nbest: list[Hypothesis]

    def to_json(self) -> dict:
        return {"id": self.id, "ref": list(self.ref), "acoustic": self.acoustic.tolist(),
                "nbest": [h.to_json() for h in self.nbest]}

    @classmethod
    def from_json(cls, obj: dict) -> "Utterance":
        return cls(obj["id"], list(obj["ref"]), np.array(obj["acoustic"], dtype=np.float64),
                   [Hypothesis.from_json(h) for h in obj["nbest"]])


def rescore(hyp: Hypothesis) -> float:
    """Sequence log probability: the sum of per-piece log posteriors."""
    return float(np.sum(hyp.logpost))


def _log_softmax(x: np.ndarray) -> np.ndarray:
    z = x - x.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


class SyntheticASR:
    """Frozen tables and rescorer weights; a pure function of (vocab, spec)."""

    def __init__(self, vocab: WordPieceVocab, spec: AsrSpec | None = None):
        self.vocab = vocab
        self.spec = spec = spec or AsrSpec()
        rng = np.random.default_rng(spec.seed)
        v = len(vocab)
        self.wp_emb = rng.normal(0.0, 1.0 / np.sqrt(spec.d_emb), (v, spec.d_emb))
        self.pos_emb = rng.normal(0.0, 0.3 / np.sqrt(spec.d_emb), (spec.max_positions, spec.d_emb))
        self.char_vecs = {ch: rng.normal(0.0, 1.0, spec.d_e) for ch in vocab.alphabet}
        d_in = spec.d_e + spec.d_emb
        self.w_hidden = rng.normal(0.0, 1.5 / np.sqrt(d_in), (d_in, spec.d_phi))
        self.b_hidden = rng.normal(0.0, 0.1, spec.d_phi)
        self.w_out = rng.normal(0.0, 2.0 / np.sqrt(spec.d_phi), (spec.d_phi, v))
        # per-piece over/under-confidence that only a model seeing the piece can undo
        self.piece_bias = rng.normal(0.0, spec.piece_bias_std, v)
        self._word_ac: dict[str, np.ndarray] = {}

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        for arr in (self.wp_emb, self.pos_emb, self.w_hidden, self.w_out, self.piece_bias):
            h.update(np.ascontiguousarray(arr).tobytes())
        return h.hexdigest()[:16]

    def word_acoustic(self, word: str) -> np.ndarray:
        """Prefix-weighted character sum: words sharing a prefix sound alike."""
        vec = self._word_ac.get(word)
        if vec is None:
            vec = sum(0.75**k * self.char_vecs[ch] for k, ch in enumerate(word))
            vec = vec / np.linalg.norm(vec)
            self._word_ac[word] = vec
        return vec

    def posteriors(self, wp: Sequence[int], contexts: np.ndarray, penalties: np.ndarray,
                   rng: np.random.Generator, shift: float = 0.0):
        """Run the rescorer over one hypothesis (teacher-forced on its own pieces).

        Returns ``(phi, full log-probabilities)`` with one row per piece.
        """
        spec = self.spec
        ids = np.asarray(wp)
        pos = np.minimum(np.arange(len(ids)), spec.max_positions - 1)
        x = np.concatenate([contexts, self.wp_emb[ids] + self.pos_emb[pos]], axis=1)
        phi = np.tanh(x @ self.w_hidden + self.b_hidden)
        logits = phi @ self.w_out
        rows = np.arange(len(ids))
        boost = spec.boost + self.piece_bias[ids] - shift - penalties
        logits[rows, ids] += boost + rng.normal(0.0, spec.logit_noise, len(ids))
        return phi, _log_softmax(logits)


@dataclass
class _HypWord:
    word: str
    ref_index: int
    corrupted: bool
    tail_error: bool
    inserted: bool = False


def channel_words(ref: Sequence[str], lex: LexiconSpec, rng: np.random.Generator,
                  scale: float = 1.0, shared: Sequence[str] | None = None,
                  head_scale: float = 1.0, tail_scale: float | None = None) -> list[_HypWord]:
    """Corrupt one reference by word substitution, deletion and insertion.

    Head words use ``scale * head_scale`` times the base rates, tail words
    ``scale * tail_scale`` (default: the lexicon's tail multiplier). Errors
    cluster: a word following a deletion or substitution gets its rates
    multiplied by ``lex.burst_multiplier``.
    """
    tail_scale = lex.tail_multiplier if tail_scale is None else tail_scale
    p_err = lex.del_rate + lex.sub_rate
    out: list[_HypWord] = []
    burst = False
    for j, w in enumerate(ref):
        r = scale * (tail_scale if lex.is_tail(w) else head_scale)
        if burst:
            r *= lex.burst_multiplier
        u = rng.random()
        e = _scaled(p_err, r)
        burst = u < e
        if burst and u < e * lex.del_rate / p_err:
            pass
        elif burst:
            if shared is not None and rng.random() < lex.shared_confusion_prob:
                sub = shared[j]
            else:
                sub = lex.confusable(w, rng)
            out.append(_HypWord(sub, j, True, lex.is_tail(w)))
        else:
            out.append(_HypWord(w, j, False, False))
        if rng.random() < _scaled(lex.ins_rate, r):
            out.append(_HypWord(lex.sample_word(rng, tail_prob=0.0), j, True, False, True))
    return out


def _scaled(p: float, r: float) -> float:
    """Scale a rate's hazard by ``r``: about ``p * r`` when small; 0 and 1 stay put."""
    return 1.0 - (1.0 - p) ** r


def segment_word(word: str, vocab: WordPieceVocab, mismatch_rate: float,
                 rng: np.random.Generator) -> tuple[int, ...]:
    """Canonical pieces, or with probability ``mismatch_rate`` a different
    valid segmentation with at most one extra piece."""
    canon = encode([word], vocab).wp_ids
    if mismatch_rate <= 0.0 or rng.random() >= mismatch_rate:
        return canon
    alts = [s.wp_ids for s in alternative_segmentations(word, vocab, max_alts=8)
            if s.wp_ids != canon and len(s.wp_ids) <= len(canon) + 1]
    if not alts:
        return canon
    return alts[int(rng.integers(len(alts)))]


def has_alternative(word: str, vocab: WordPieceVocab) -> bool:
    canon = encode([word], vocab).wp_ids
    return any(s.wp_ids != canon and len(s.wp_ids) <= len(canon) + 1
               for s in alternative_segmentations(word, vocab, max_alts=8))


def _wrong_pieces(hw: _HypWord, pieces: Sequence[int], ref: Sequence[str],
                  vocab: WordPieceVocab) -> list[bool]:
    """Pieces the recognizer is unsure of: all of an inserted word, and the
    pieces of a substitute that do not align with the reference word (a
    shared prefix is recognised confidently)."""
    if not hw.corrupted:
        return [False] * len(pieces)
    if hw.inserted:
        return [True] * len(pieces)
    target = encode([ref[hw.ref_index]], vocab).wp_ids
    return [op != MATCH for op in edit_distance(pieces, target).hyp_ops()]


def _round(a: np.ndarray) -> np.ndarray:
    return np.round(a, ROUND_DECIMALS) + 0.0  # + 0.0 folds -0.0 into 0.0


def make_utterance(idx: int, lex: LexiconSpec, asr: SyntheticASR, H: int, seed: int,
                   debug: bool = False, ref: list[str] | None = None) -> Utterance:
    rng = np.random.default_rng([seed, idx])
    spec, vocab = asr.spec, asr.vocab
    if ref is None:
        ref = lex.sample_sentence(rng)

    spans, rows = [], []
    for w in ref:
        dur = int(rng.integers(1, 4))
        base = asr.word_acoustic(w)
        spans.append((len(rows), len(rows) + dur))
        rows.extend(base + rng.normal(0.0, spec.acoustic_noise, spec.d_e) for _ in range(dur))
    acoustic = np.array(rows)
    word_ctx = np.array([acoustic[a:b].mean(axis=0) for a, b in spans])

    # utterance difficulty: scales every error rate and lowers every posterior
    z = rng.normal()
    difficulty = float(np.exp(lex.difficulty_std * z))
    shared = [lex.confusable(w, rng) for w in ref]
    hyps: list[Hypothesis] = []
    seen: set[tuple[int, ...]] = set()
    attempt = 0
    while len(hyps) < H:
        scale = difficulty * (1.0 if attempt == 0 else lex.beam_error_scale)
        words = channel_words(ref, lex, rng, scale, shared)
        attempt += 1
        if not words:
            if attempt < 50 * H:
                continue
            words = [_HypWord(w, j, False, False) for j, w in enumerate(ref)]
        wp: list[int] = []
        ctx, pen, corrupt = [], [], []
        for hw in words:
            pieces = segment_word(hw.word, vocab, lex.mismatch_rate, rng)
            wp.extend(pieces)
            for wrong in _wrong_pieces(hw, pieces, ref, vocab):
                ctx.append(word_ctx[hw.ref_index])
                if wrong:
                    m = max(0.0, rng.normal(spec.margin_mean, spec.margin_std))
                    pen.append(m * (spec.tail_margin_scale if hw.tail_error else 1.0))
                else:
                    pen.append(0.0)
                corrupt.append(hw.corrupted)
        key = tuple(wp)
        if key in seen and attempt < 50 * H:
            continue
        seen.add(key)
        phi, logp = asr.posteriors(wp, np.array(ctx), np.array(pen), rng,
                                   shift=spec.difficulty_shift * lex.difficulty_std * z)
        rows_ = np.arange(len(wp))
        logpost = _round(logp[rows_, wp])
        topk = _round(-np.sort(-logp, axis=1)[:, :spec.K])
        meta = {"words": [hw.word for hw in words], "corrupted": corrupt}
        if debug:
            meta["full_logprobs"] = logp
        h = Hypothesis(key, logpost, topk, _round(phi), 0.0, meta)
        h.score = rescore(h)
        hyps.append(h)
    order = sorted(range(len(hyps)), key=lambda i: -hyps[i].score)
    return Utterance(f"utt{idx:06d}", list(ref), _round(acoustic), [hyps[i] for i in order])


def generate_dataset(lex: LexiconSpec, asr: SyntheticASR, n_utts: int, H: int = 8,
                     seed: int = 0, debug: bool = False, start: int = 0) -> Iterator[Utterance]:
    """Stream ``n_utts`` utterances; utterance ``i`` depends only on ``(seed, i)``."""
    if H < 1:
        raise ConfigError("H must be at least 1")
    if H > asr.spec.beam_capacity:
        raise ConfigError(f"H={H} exceeds beam capacity {asr.spec.beam_capacity}")
    for i in range(start, start + n_utts):
        yield make_utterance(i, lex, asr, H, seed, debug)


def dataset_header(asr: SyntheticASR, **extra) -> dict:
    spec = asr.spec
    head = {"version": 1, "K": spec.K, "d_e": spec.d_e, "d_phi": spec.d_phi,
            "d_emb": spec.d_emb, "max_positions": spec.max_positions,
            "pieces": asr.vocab.pieces, "asr_fingerprint": asr.fingerprint(),
            "asr_emb": {"wp": asr.wp_emb.tolist(), "pos": asr.pos_emb.tolist()}}
    head.update(extra)
    return head


def default_vocab(lex: LexiconSpec, size: int = 256) -> WordPieceVocab:
    return build_vocab(lex.vocab_corpus(), size)


def segmentation_of(hyp: Hypothesis, vocab: WordPieceVocab) -> Segmentation:
    return vocab.segmentation(hyp.wp)
