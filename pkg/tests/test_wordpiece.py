import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from helpers import ids, good_morning_vocab
from wordconf.wordpiece import (
    MalformedSegmentationError,
    WordPieceError,
    WordPieceVocab,
    alternative_segmentations,
    build_vocab,
    decode,
    encode,
)


@pytest.fixture(scope="module")
def vocab():
    return good_morning_vocab()


@pytest.fixture(scope="module")
def learned():
    corpus = ["low"] * 5 + ["lower"] * 2 + ["newest"] * 6 + ["widest"] * 3
    return build_vocab(corpus, 30)


def pieces(vocab, seg):
    return [vocab.pieces[i] for i in seg.wp_ids]


class TestBuildVocab:
    def test_exact_size(self, learned):
        assert len(learned) == 30

    def test_base_pieces_come_first(self, learned):
        alphabet = sorted(set("lowernewestwidest"))
        assert learned.pieces[:2 * len(alphabet)] == [p for c in alphabet for p in ("_" + c, c)]

    def test_most_frequent_pair_merged_first(self, learned):
        # "es" and "st" each occur 9 times; "e"+"s" wins the tie
        assert learned.pieces[20:22] == ["es", "est"]

    def test_deterministic_and_order_free(self):
        a = build_vocab(["alpha", "beta", "gamma", "alpha"], 25)
        b = build_vocab(["gamma", "alpha", "alpha", "beta"], 25)
        assert a.pieces == b.pieces

    def test_empty_corpus(self):
        with pytest.raises(WordPieceError):
            build_vocab([], 10)

    def test_size_below_alphabet(self):
        with pytest.raises(WordPieceError):
            build_vocab(["abc"], 3)

    def test_size_beyond_corpus(self):
        with pytest.raises(WordPieceError):
            build_vocab(["ab"], 100)


class TestVocabFile:
    def test_round_trip(self, learned, tmp_path):
        path = tmp_path / "vocab.json"
        learned.save(path)
        assert WordPieceVocab.load(path) == learned

    def test_layout(self, vocab):
        obj = vocab.to_json()
        assert obj["version"] == 1 and obj["boundary_marker"] == "_"
        assert obj["pieces"] == vocab.pieces

    def test_bad_version(self, vocab):
        obj = vocab.to_json() | {"version": 7}
        with pytest.raises(WordPieceError):
            WordPieceVocab.from_json(obj)

    def test_missing_character_piece(self):
        with pytest.raises(WordPieceError):
            WordPieceVocab(["_a", "a", "_b"])


class TestEncodeDecode:
    def test_good_morning(self, vocab):
        seg = encode(["good", "morning"], vocab)
        assert pieces(vocab, seg) == ["_go", "od", "_morn", "ing"]
        assert seg.word_starts == (True, False, True, False)

    def test_decode_good_morning_hyp(self, vocab):
        hyp = ids(vocab, ["_go", "od", "_mor", "ning", "_mom"])
        assert decode(hyp, vocab) == ["good", "morning", "mom"]

    def test_single_char_word(self, vocab):
        assert pieces(vocab, encode(["i"], vocab)) == ["_i"]

    def test_unknown_character(self, vocab):
        with pytest.raises(WordPieceError):
            encode(["zoo"], vocab)

    def test_malformed(self, vocab):
        with pytest.raises(MalformedSegmentationError):
            decode(ids(vocab, ["od", "_go"]), vocab)

    def test_eow_mask(self, vocab):
        seg = vocab.segmentation(ids(vocab, ["_go", "od", "_mor", "ning", "_mom"]))
        assert seg.eow_mask() == [0, 1, 0, 1, 1]
        assert seg.word_spans() == [(0, 2), (2, 4), (4, 5)]

    @settings(max_examples=100, deadline=None)
    @given(st.lists(st.text(alphabet="dgimnor", min_size=1, max_size=9), min_size=1, max_size=5))
    def test_round_trip(self, words):
        vocab = good_morning_vocab()
        assert decode(encode(words, vocab), vocab) == words


class TestAlternatives:
    def test_morning_has_both(self, vocab):
        alts = [pieces(vocab, s) for s in alternative_segmentations("morning", vocab)]
        assert ["_mor", "ning"] in alts and ["_morn", "ing"] in alts
        assert alts[:2] == [["_mor", "ning"], ["_morn", "ing"]]

    def test_ordering_and_truncation(self, vocab):
        alts = alternative_segmentations("morning", vocab)
        lens = [len(s) for s in alts]
        assert lens == sorted(lens) and lens[-1] == 7
        assert len(alternative_segmentations("morning", vocab, max_alts=3)) == 3

    def test_single_segmentation(self, vocab):
        assert [pieces(vocab, s) for s in alternative_segmentations("i", vocab)] == [["_i"]]

    @settings(max_examples=100, deadline=None)
    @given(st.text(alphabet="dgimnor", min_size=1, max_size=8))
    def test_all_decode_to_word(self, word):
        vocab = good_morning_vocab()
        alts = alternative_segmentations(word, vocab)
        assert alts and all(decode(s, vocab) == [word] for s in alts)
        assert len({s.wp_ids for s in alts}) == len(alts)
        assert encode([word], vocab).wp_ids in {s.wp_ids for s in alts}
