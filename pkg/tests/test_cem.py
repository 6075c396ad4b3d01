import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from helpers import GOOD_MORNING_HYP, GOOD_MORNING_REF, ids, good_morning_vocab
from wordconf import autodiff as ad
from wordconf.alignment import label_hypothesis
from wordconf.autodiff import Tensor
from wordconf.cem import (
    CemConfig,
    ConfigError,
    Corpus,
    TrainingDivergedError,
    WPMLP,
    aggregate_word_confidence,
    build_model,
    load_checkpoint,
    make_batch,
    n_attend,
    predict,
    read_word_confidence,
    save_checkpoint,
    softmax_baseline,
    train,
    train_examples,
    word_loss,
    wp_loss,
)
from wordconf.synth import Hypothesis, LexiconSpec, SyntheticASR, dataset_header, default_vocab, generate_dataset

MODEL_VARIANTS = ["wp_mlp", "wp_xformer", "e2e_xformer", "delib"]


@pytest.fixture(scope="module")
def corpus():
    lex = LexiconSpec.synthetic()
    asr = SyntheticASR(default_vocab(lex))
    return Corpus(dataset_header(asr), list(generate_dataset(lex, asr, 60, 8, seed=21)))


def model_for(corpus, variant, **kw):
    if variant == "delib":
        kw.setdefault("n_hyps", 2)
    config = corpus.fill_config(CemConfig(variant=variant, **kw))
    return build_model(config, corpus.asr_wp_emb, corpus.asr_pos_emb)


def batch_for(corpus, model, utts=range(4), rank=0):
    return make_batch(corpus, [(u, rank) for u in utts], n_attend(model.config))


class TestGoodMorning:
    def setup_method(self):
        self.vocab = good_morning_vocab()
        self.seg = self.vocab.segmentation(ids(self.vocab, GOOD_MORNING_HYP))
        self.ls = label_hypothesis(self.seg, GOOD_MORNING_REF, self.vocab)

    def test_word_loss(self):
        c = np.array([0.3, 0.8, 0.2, 0.6, 0.35])
        got = word_loss(Tensor(c), self.ls.word_labels, self.ls.eow_mask).item()
        assert got == -(math.log(0.8) + math.log(0.6) + math.log(1 - 0.35))

    def test_wp_loss_hand_value(self):
        c = np.array([0.9, 0.9, 0.2, 0.2, 0.1])
        want = -(2 * math.log(0.9) + 2 * math.log(0.8) + math.log(0.9))
        assert wp_loss(Tensor(c), self.ls.wp_labels).item() == pytest.approx(want, rel=1e-14)

    def test_readout_positions(self):
        c = [0.1, 0.2, 0.3, 0.4, 0.5]
        assert read_word_confidence(c, self.seg) == [0.2, 0.4, 0.5]

    def test_word_loss_is_masked_wp_loss(self):
        c = Tensor(np.array([0.3, 0.8, 0.2, 0.6, 0.35]))
        eow = np.array(self.ls.eow_mask, dtype=float)
        scattered = np.zeros(5)
        scattered[eow.astype(bool)] = self.ls.word_labels
        assert word_loss(c, self.ls.word_labels, eow).item() == wp_loss(c, scattered, eow).item()


class TestLosses:
    @given(st.integers(1, 20))
    def test_half_confidence(self, m):
        labels = np.arange(m) % 2
        assert wp_loss(Tensor(np.full(m, 0.5)), labels).item() == pytest.approx(m * math.log(2))

    def test_perfect_is_near_zero(self):
        d = np.array([1, 0, 1, 1, 0])
        assert wp_loss(Tensor(d.astype(float)), d).item() == pytest.approx(-5 * math.log(1 - 1e-7))

    def test_confident_correct_words(self):
        assert word_loss(Tensor(np.full(3, 1 - 1e-9)), [1, 1, 1], [1, 1, 1]).item() < 1e-6


class TestAggregation:
    def test_mean(self):
        vocab = good_morning_vocab()
        seg = vocab.segmentation(ids(vocab, ["_go", "od"]))
        assert aggregate_word_confidence([0.2, 0.4], seg) == [pytest.approx(0.3)]

    def test_single_piece_words(self):
        vocab = good_morning_vocab()
        seg = vocab.segmentation(ids(vocab, ["_g", "_o", "_d"]))
        assert aggregate_word_confidence([0.1, 0.5, 0.9], seg) == [0.1, 0.5, 0.9]

    @given(st.lists(st.floats(0.01, 0.99), min_size=2, max_size=2))
    def test_mean_within_range(self, c):
        vocab = good_morning_vocab()
        (w,) = aggregate_word_confidence(c, vocab.segmentation(ids(vocab, ["_go", "od"])))
        assert min(c) - 1e-15 <= w <= max(c) + 1e-15

    def test_softmax_baseline(self):
        vocab = good_morning_vocab()
        seg = vocab.segmentation(ids(vocab, ["_go", "od", "_mom"]))
        hyp = Hypothesis(seg.wp_ids, np.log([0.8, 0.6, 1.0]), np.zeros((3, 4)), np.zeros((3, 2)), 0.0)
        out = softmax_baseline(hyp, seg)
        assert out.word_conf == [pytest.approx(0.7), 1.0]
        assert out.utterance_conf == np.mean(out.word_conf)


class TestConfig:
    @pytest.mark.parametrize("kw", [
        {"variant": "nope"}, {"variant": "wp_mlp", "loss_level": "word"},
        {"variant": "e2e_xformer", "loss_level": "wp"}, {"variant": "delib", "n_hyps": 0},
        {"aggregator": "min"},
    ])
    def test_rejects(self, kw):
        with pytest.raises(ConfigError):
            CemConfig(**kw)

    def test_depths(self):
        assert CemConfig(variant="wp_xformer").n_blocks == 1
        assert CemConfig(variant="e2e_xformer").n_blocks == 2

    def test_json_round_trip(self):
        c = CemConfig(variant="delib", n_hyps=3, lr=0.01)
        assert CemConfig.from_json(c.to_json()) == c


class TestModels:
    @pytest.mark.parametrize("variant", MODEL_VARIANTS)
    def test_outputs_in_range(self, corpus, variant):
        model = model_for(corpus, variant)
        for i, out in enumerate(predict(model, corpus.subset(range(6)))):
            assert len(out.word_conf) == corpus.seg(i, 0).n_words
            assert all(0.0 < c < 1.0 for c in out.wp_conf + out.word_conf)
            assert out.utterance_conf == float(np.mean(out.word_conf))

    def test_zero_mlp_is_half(self, corpus):
        model = model_for(corpus, "wp_mlp")
        assert isinstance(model, WPMLP)
        for p in model.parameters():
            p.data[...] = 0.0
        batch = batch_for(corpus, model)
        np.testing.assert_array_equal(model.forward(batch).data[batch.valid], 0.5)

    @pytest.mark.parametrize("variant", ["wp_xformer", "e2e_xformer", "delib"])
    def test_padding_invariance(self, corpus, variant):
        model = model_for(corpus, variant)
        lengths = [len(u.nbest[0]) for u in corpus.utts]
        short, long = int(np.argmin(lengths)), int(np.argmax(lengths))
        alone = model.forward(batch_for(corpus, model, [short])).data[0]
        padded = model.forward(batch_for(corpus, model, [short, long])).data[0, :len(alone)]
        np.testing.assert_allclose(padded, alone, atol=1e-10, rtol=0)

    def test_single_piece_word_readout(self, corpus):
        model = model_for(corpus, "e2e_xformer")
        batch = batch_for(corpus, model, [0])
        out = model.outputs(batch)[0]
        for (a, b), w in zip(batch.segs[0].word_spans(), out.word_conf):
            if b - a == 1:
                assert w == out.wp_conf[a]

    def test_causal_no_leak(self, corpus):
        model = model_for(corpus, "e2e_xformer")
        u = max(range(len(corpus)), key=lambda i: corpus.seg(i, 0).n_words)
        batch = batch_for(corpus, model, [u])
        first_end = corpus.seg(u, 0).word_spans()[0][1]
        before = model.forward(batch).data[0, :first_end]
        rng = np.random.default_rng(0)
        batch.phi[0, first_end:] += rng.normal(0, 5, batch.phi[0, first_end:].shape)
        batch.logpost[0, first_end:] -= 3.0
        after = model.forward(batch).data[0, :first_end]
        np.testing.assert_array_equal(after, before)

    def test_delib_permutation_invariance(self, corpus):
        model = model_for(corpus, "delib", n_hyps=4)
        batch = batch_for(corpus, model, range(3))
        base = model.forward(batch).data
        batch.attend = batch.attend[:, ::-1].copy()
        np.testing.assert_allclose(model.forward(batch).data, base, atol=1e-10, rtol=0)

    def test_delib_sees_other_hypotheses(self, corpus):
        model = model_for(corpus, "delib", n_hyps=4)
        batch = batch_for(corpus, model, range(3))
        base = model.forward(batch).data
        batch.hyp_ids = np.roll(batch.hyp_ids, 1, axis=1)
        assert not np.allclose(model.forward(batch).data, base)

    def test_delib_too_many_hyps(self, corpus):
        model = model_for(corpus, "delib", n_hyps=9)
        with pytest.raises(ConfigError):
            batch_for(corpus, model)

    def test_dedicated_embedding_parameters(self, corpus):
        shared = model_for(corpus, "e2e_xformer").num_parameters()
        own = model_for(corpus, "e2e_xformer", dedicated_emb=True).num_parameters()
        assert own - shared == len(corpus.vocab) * corpus.header["d_emb"]

    @pytest.mark.parametrize("variant", MODEL_VARIANTS)
    def test_gradients(self, corpus, variant):
        model = model_for(corpus, variant)
        batch = make_batch(corpus, train_examples(corpus, [0, 1], 4), n_attend(model.config))
        rep = ad.grad_check(model, batch, n_coords=40, seed=1)
        assert rep.passed, rep.worst

    @pytest.mark.parametrize("variant", ["wp_mlp", "delib"])
    def test_checkpoint_round_trip(self, corpus, variant, tmp_path):
        model = model_for(corpus, variant, dedicated_emb=variant == "delib")
        save_checkpoint(model, tmp_path / "m.json", [{"epoch": 0}])
        back = load_checkpoint(tmp_path / "m.json")
        sub = corpus.subset(range(5))
        assert [o.wp_conf for o in predict(back, sub)] == [o.wp_conf for o in predict(model, sub)]

    def test_checkpoint_mismatch(self, corpus, tmp_path):
        import json

        save_checkpoint(model_for(corpus, "wp_mlp"), tmp_path / "m.json")
        obj = json.loads((tmp_path / "m.json").read_text())
        obj["version"] = 99
        (tmp_path / "m.json").write_text(json.dumps(obj))
        with pytest.raises(ConfigError):
            load_checkpoint(tmp_path / "m.json")


class TestTraining:
    def test_smoke_and_determinism(self, corpus):
        tr, dev = corpus.subset(range(50)), corpus.subset(range(50, 60))
        cfg = CemConfig(variant="e2e_xformer", epochs=2, seed=3)
        a = train(cfg, tr, dev)
        b = train(cfg, tr, dev)
        first, second = a.history
        assert second["train_loss"] < first["train_loss"]
        assert a.history == b.history
        assert all(np.isfinite(e["dev_nce"]) for e in a.history)

    def test_keeps_best_epoch(self, corpus):
        tr, dev = corpus.subset(range(30)), corpus.subset(range(50, 60))
        res = train(CemConfig(variant="wp_mlp", epochs=3, lr=0.02, seed=1), tr, dev)
        scores = [h["dev_nce"] for h in res.history]
        assert res.best_epoch == int(np.argmax(scores))

    def test_divergence(self, corpus, monkeypatch):
        def boom(self, batch):
            raise ad.NonFiniteError("non-finite values produced by log")

        monkeypatch.setattr(WPMLP, "loss", boom)
        with pytest.raises(TrainingDivergedError):
            train(CemConfig(variant="wp_mlp", epochs=1), corpus.subset(range(8)))

    def test_softmax_is_not_trainable(self, corpus):
        with pytest.raises(ConfigError):
            train(CemConfig(variant="softmax_baseline"), corpus)
