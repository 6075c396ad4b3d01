"""Confidence estimation modules (CEMs) and their training loop.

Variants:

``softmax_baseline``
    Piece confidence is the recognizer's own posterior; no parameters.
``wp_mlp``
    Three-layer MLP per piece, trained on piece labels; word confidence is
    the mean over the word's pieces.
``wp_xformer``
    Same, with the middle layer replaced by one decoder block (causal
    self-attention over pieces plus cross-attention to the acoustics).
``e2e_xformer``
    Decoder stack trained with the word-level loss; word confidence is read
    at each word's final piece.
``delib``
    ``e2e_xformer`` whose blocks also attend to BiLSTM encodings of ``H``
    hypotheses, concatenated along time without positions.
"""

from __future__ import annotations

import copy
import json
import logging
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .alignment import LabelSet, label_hypothesis, utterance_targets
from .autodiff import Tensor
from .features import FeatureConfig, assemble
from .metrics import EvalRecord, UndefinedMetricError, nce
from .nn import BiLSTM, DecoderBlock, LayerNorm, Linear, Module
from .synth import Hypothesis, Utterance
from .wordpiece import Segmentation, WordPieceVocab, decode

log = logging.getLogger(__name__)

VARIANTS = ("softmax_baseline", "wp_mlp", "wp_xformer", "e2e_xformer", "delib")
WP_LEVEL = {"softmax_baseline", "wp_mlp", "wp_xformer"}
CHECKPOINT_VERSION = 1


class ConfigError(ValueError):
    """Inconsistent CEM configuration."""


class TrainingDivergedError(RuntimeError):
    """Loss or parameters became non-finite."""


@dataclass
class CemConfig:
    variant: str = "e2e_xformer"
    d_model: int = 32
    heads: int = 4
    d_ff: int = 64
    mlp_hidden: tuple[int, int] = (64, 32)
    n_blocks: int | None = None
    n_hyps: int = 8
    aggregator: str = "mean"
    loss_level: str | None = None
    use_topk: bool = True
    use_logpost: bool = True
    dedicated_emb: bool = False
    lr: float = 1e-3
    batch: int = 16
    epochs: int = 5
    train_hyps: int = 4
    seed: int = 0
    # filled from the dataset header at training time
    vocab_size: int = 0
    d_emb: int = 32
    d_phi: int = 32
    d_e: int = 32
    K: int = 4
    max_positions: int = 64
    asr_fingerprint: str = ""

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}")
        expected = "wp" if self.variant in WP_LEVEL else "word"
        if self.loss_level is None:
            self.loss_level = expected
        elif self.loss_level != expected:
            raise ConfigError(f"{self.variant} trains with the {expected}-level loss, "
                              f"not {self.loss_level!r}")
        if self.aggregator != "mean":
            raise ConfigError("only the mean aggregator is supported")
        if self.variant == "delib" and self.n_hyps < 1:
            raise ConfigError("deliberation needs n_hyps >= 1")
        if self.n_blocks is None:
            self.n_blocks = 1 if self.variant == "wp_xformer" else 2
        self.mlp_hidden = tuple(self.mlp_hidden)

    @property
    def features(self) -> FeatureConfig:
        return FeatureConfig(self.use_topk, self.use_logpost, self.dedicated_emb)

    @property
    def feature_width(self) -> int:
        return self.features.width(self.d_emb, self.d_phi, self.K)

    def to_json(self) -> dict:
        d = asdict(self)
        d["mlp_hidden"] = list(self.mlp_hidden)
        return d

    @classmethod
    def from_json(cls, obj: dict) -> "CemConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(obj) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**obj)


# ---------------------------------------------------------------------------
# data


class Corpus:
    """Utterances plus everything needed to label and featurize them."""

    def __init__(self, header: dict, utts: Sequence[Utterance]):
        self.header = header
        self.vocab = WordPieceVocab(header["pieces"])
        self.asr_wp_emb = np.asarray(header["asr_emb"]["wp"], dtype=np.float64)
        self.asr_pos_emb = np.asarray(header["asr_emb"]["pos"], dtype=np.float64)
        self.utts = list(utts)
        self._labels: dict[tuple[int, int], LabelSet] = {}
        self._segs: dict[tuple[int, int], Segmentation] = {}

    def __len__(self) -> int:
        return len(self.utts)

    @property
    def fingerprint(self) -> str:
        return self.header.get("asr_fingerprint", "")

    def seg(self, u: int, h: int) -> Segmentation:
        key = (u, h)
        if key not in self._segs:
            self._segs[key] = self.vocab.segmentation(self.utts[u].nbest[h].wp)
        return self._segs[key]

    def labels(self, u: int, h: int) -> LabelSet:
        key = (u, h)
        if key not in self._labels:
            self._labels[key] = label_hypothesis(self.seg(u, h), self.utts[u].ref, self.vocab)
        return self._labels[key]

    def subset(self, indices: Sequence[int]) -> "Corpus":
        return Corpus(self.header, [self.utts[i] for i in indices])

    def fill_config(self, config: CemConfig) -> CemConfig:
        h = self.header
        return replace(config, vocab_size=len(self.vocab), d_emb=h["d_emb"], d_phi=h["d_phi"],
                       d_e=h["d_e"], K=h["K"], max_positions=h["max_positions"],
                       asr_fingerprint=self.fingerprint)


@dataclass
class Batch:
    ids: np.ndarray          # (B, M) piece ids, 0 on padding
    valid: np.ndarray        # (B, M) bool
    phi: np.ndarray          # (B, M, d_phi)
    logpost: np.ndarray      # (B, M)
    topk: np.ndarray         # (B, M, K)
    acoustic: np.ndarray     # (B, T, d_e)
    ac_valid: np.ndarray     # (B, T) bool
    wp_labels: np.ndarray    # (B, M)
    word_targets: np.ndarray  # (B, M) word label at each word end
    eow: np.ndarray          # (B, M) end-of-word mask
    hyp_ids: np.ndarray      # (S, Mh) pieces of every attended hypothesis
    hyp_len: np.ndarray      # (S,)
    attend: np.ndarray       # (B, H) rows of hyp_ids attended by each example
    segs: list[Segmentation] = field(default_factory=list)

    @property
    def size(self) -> int:
        return self.ids.shape[0]


def _pad(rows: Sequence[np.ndarray], width: int | None = None, fill=0.0) -> np.ndarray:
    n = max(len(r) for r in rows)
    tail = rows[0].shape[1:]
    out = np.full((len(rows), n, *tail), fill, dtype=np.asarray(rows[0]).dtype)
    for i, r in enumerate(rows):
        out[i, :len(r)] = r
    return out


def make_batch(corpus: Corpus, examples: Sequence[tuple[int, int]], n_attend: int = 0,
               with_labels: bool = True) -> Batch:
    """Pad a list of ``(utterance, hypothesis rank)`` examples into arrays.

    With ``n_attend == 1`` each example attends to its own hypothesis; with
    ``n_attend > 1`` to the top ``n_attend`` entries of its n-best list.
    """
    hyps = [corpus.utts[u].nbest[h] for u, h in examples]
    if any(len(h) == 0 for h in hyps):
        raise ValueError("cannot score an empty hypothesis")
    lens = [len(h) for h in hyps]
    m = max(lens)
    b = len(examples)
    valid = np.arange(m)[None, :] < np.array(lens)[:, None]
    ids = _pad([np.asarray(h.wp, dtype=np.int64) for h in hyps]).astype(np.int64)
    acs = [corpus.utts[u].acoustic for u, _ in examples]
    ac_len = np.array([len(a) for a in acs])
    ac_valid = np.arange(max(ac_len))[None, :] < ac_len[:, None]

    wp_lab = np.zeros((b, m))
    word_t = np.zeros((b, m))
    eow = np.zeros((b, m))
    segs = []
    for i, (u, h) in enumerate(examples):
        seg = corpus.seg(u, h)
        segs.append(seg)
        mask = np.array(seg.eow_mask(), dtype=np.float64)
        eow[i, :lens[i]] = mask
        if with_labels:
            ls = corpus.labels(u, h)
            wp_lab[i, :lens[i]] = ls.wp_labels
            word_t[i, np.nonzero(mask)[0]] = ls.word_labels

    uniq: dict[tuple[int, int], int] = {}
    attend = np.zeros((b, max(n_attend, 0)), dtype=np.int64)
    for i, (u, h) in enumerate(examples):
        if n_attend == 1:
            keys = [(u, h)]
        else:
            nb = len(corpus.utts[u].nbest)
            if n_attend > nb:
                raise ConfigError(f"asked to attend to {n_attend} hypotheses, "
                                  f"utterance {corpus.utts[u].id} has {nb}")
            keys = [(u, k) for k in range(n_attend)]
        for j, key in enumerate(keys):
            attend[i, j] = uniq.setdefault(key, len(uniq))
    if uniq:
        seqs = [np.asarray(corpus.utts[u].nbest[h].wp, dtype=np.int64) for u, h in uniq]
        hyp_len = np.array([len(s) for s in seqs])
        hyp_ids = _pad(seqs).astype(np.int64)
    else:
        hyp_len = np.zeros(0, dtype=np.int64)
        hyp_ids = np.zeros((0, 1), dtype=np.int64)

    return Batch(ids, valid, _pad([h.phi for h in hyps]), _pad([h.logpost for h in hyps]),
                 _pad([h.topk for h in hyps]), _pad(acs), ac_valid, wp_lab, word_t, eow,
                 hyp_ids, hyp_len, attend, segs)


# ---------------------------------------------------------------------------
# losses and aggregation


def wp_loss(conf: Tensor, labels, mask=None) -> Tensor:
    """Binary cross-entropy summed over hypothesis pieces."""
    return ad.bce(conf, labels, mask)


def word_loss(conf: Tensor, word_labels, eow_mask) -> Tensor:
    """Word-level cross-entropy applied through the end-of-word mask.

    ``conf`` holds one output per piece; only outputs at word-final pieces
    enter the loss, against that word's label. ``word_labels`` may be given
    per word (one entry per mask hit) or already scattered per piece.
    """
    eow = np.asarray(eow_mask, dtype=np.float64)
    labels = np.asarray(word_labels, dtype=np.float64)
    if labels.shape != eow.shape:
        scattered = np.zeros_like(eow)
        scattered[eow.astype(bool)] = labels.ravel()
        labels = scattered
    return ad.bce(conf, labels, eow)


def aggregate_word_confidence(wp_conf: Sequence[float], seg: Segmentation,
                              agg: str = "mean") -> list[float]:
    if agg != "mean":
        raise ConfigError("only the mean aggregator is supported")
    c = np.asarray(wp_conf, dtype=np.float64)
    return [float(c[a:b].mean()) for a, b in seg.word_spans()]


def read_word_confidence(wp_conf: Sequence[float], seg: Segmentation) -> list[float]:
    """Word confidence read at each word's final piece."""
    c = np.asarray(wp_conf, dtype=np.float64)
    return [float(c[b - 1]) for _, b in seg.word_spans()]


@dataclass
class ConfidenceOutput:
    wp_conf: list[float]
    word_conf: list[float]
    utterance_conf: float

    @classmethod
    def from_words(cls, wp_conf, word_conf) -> "ConfidenceOutput":
        word_conf = [float(x) for x in word_conf]
        utt = float(np.mean(word_conf)) if word_conf else float("nan")
        return cls([float(x) for x in wp_conf], word_conf, utt)


def softmax_baseline(hyp: Hypothesis, seg: Segmentation) -> ConfidenceOutput:
    """Posterior of each hypothesized piece, averaged per word."""
    wp = np.exp(hyp.logpost)
    return ConfidenceOutput.from_words(wp, aggregate_word_confidence(wp, seg))


# ---------------------------------------------------------------------------
# models


class CemModel(Module):
    """Shared plumbing: embedding tables, masks, losses, word readout."""

    def __init__(self, config: CemConfig, asr_wp_emb: np.ndarray, asr_pos_emb: np.ndarray):
        self.config = config
        rng = np.random.default_rng(config.seed)
        self.rng = rng
        if config.dedicated_emb:
            self.emb = Tensor(rng.normal(0.0, 1.0 / np.sqrt(config.d_emb),
                                         (config.vocab_size, config.d_emb)), requires_grad=True)
        else:
            self.emb = Tensor(np.array(asr_wp_emb, dtype=np.float64))
        self.pos = Tensor(np.array(asr_pos_emb, dtype=np.float64))

    @property
    def word_level(self) -> bool:
        return self.config.loss_level == "word"

    def features(self, batch: Batch) -> Tensor:
        return assemble(batch.ids, batch.phi, batch.logpost, batch.topk, self.emb, self.pos,
                        self.config.features)

    def forward(self, batch: Batch) -> Tensor:
        raise NotImplementedError

    def loss(self, batch: Batch) -> Tensor:
        conf = self.forward(batch)
        if self.word_level:
            return word_loss(conf, batch.word_targets, batch.eow)
        return wp_loss(conf, batch.wp_labels, batch.valid)

    def outputs(self, batch: Batch) -> list[ConfidenceOutput]:
        conf = self.forward(batch).data
        outs = []
        for i, seg in enumerate(batch.segs):
            wp = conf[i, :len(seg)]
            words = (read_word_confidence(wp, seg) if self.word_level
                     else aggregate_word_confidence(wp, seg, self.config.aggregator))
            outs.append(ConfidenceOutput.from_words(wp, words))
        return outs

    @staticmethod
    def self_mask(batch: Batch) -> np.ndarray:
        m = batch.ids.shape[1]
        causal = np.tril(np.ones((m, m), dtype=bool))
        return causal[None] & batch.valid[:, None, :]

    @staticmethod
    def acoustic_mask(batch: Batch) -> np.ndarray:
        b, m = batch.ids.shape
        return np.broadcast_to(batch.ac_valid[:, None, :], (b, m, batch.ac_valid.shape[1]))


def _head(x: Tensor) -> Tensor:
    b, m, _ = x.shape
    return ad.sigmoid(x.reshape(b, m))


class WPMLP(CemModel):
    def __init__(self, config, asr_wp_emb, asr_pos_emb):
        super().__init__(config, asr_wp_emb, asr_pos_emb)
        h1, h2 = config.mlp_hidden
        self.l1 = Linear(config.feature_width, h1, self.rng)
        self.l2 = Linear(h1, h2, self.rng)
        self.l3 = Linear(h2, 1, self.rng)

    def forward(self, batch: Batch) -> Tensor:
        x = ad.gelu(self.l1(self.features(batch)))
        x = ad.gelu(self.l2(x))
        return _head(self.l3(x))


class XformerCem(CemModel):
    """Input layer, ``n_blocks`` decoder blocks, output layer."""

    def __init__(self, config, asr_wp_emb, asr_pos_emb, memory_dims=None):
        super().__init__(config, asr_wp_emb, asr_pos_emb)
        d = config.d_model
        memory_dims = memory_dims or [config.d_e]
        self.inp = Linear(config.feature_width, d, self.rng)
        self.blocks = [DecoderBlock(d, memory_dims, config.heads, config.d_ff, self.rng)
                       for _ in range(config.n_blocks)]
        self.ln_out = LayerNorm(d)
        self.out = Linear(d, 1, self.rng)

    def memories(self, batch: Batch) -> list[tuple[Tensor, np.ndarray]]:
        return [(Tensor(batch.acoustic), self.acoustic_mask(batch))]

    def forward(self, batch: Batch) -> Tensor:
        x = ad.gelu(self.inp(self.features(batch)))
        smask = self.self_mask(batch)
        mems = self.memories(batch)
        for block in self.blocks:
            x = block(x, smask, mems)
        return _head(self.out(self.ln_out(x)))


class DelibCem(XformerCem):
    def __init__(self, config, asr_wp_emb, asr_pos_emb):
        if config.d_model % 2:
            raise ConfigError("deliberation needs an even d_model")
        super().__init__(config, asr_wp_emb, asr_pos_emb,
                         memory_dims=[config.d_e, config.d_model])
        self.encoder = BiLSTM(config.d_emb, config.d_model // 2, self.rng)

    def memories(self, batch: Batch) -> list[tuple[Tensor, np.ndarray]]:
        acoustic = super().memories(batch)
        if batch.attend.shape[1] != self.config.n_hyps:
            raise ConfigError(f"batch attends to {batch.attend.shape[1]} hypotheses, "
                              f"model expects {self.config.n_hyps}")
        enc = self.encoder(ad.take_rows(self.emb, batch.hyp_ids), batch.hyp_len)
        s, mh, d = enc.shape
        # pack the valid positions of each example's attended hypotheses
        rows = [np.concatenate([r * mh + np.arange(batch.hyp_len[r]) for r in att])
                for att in batch.attend]
        width = max(len(r) for r in rows)
        flat = np.zeros((len(rows), width), dtype=np.int64)
        key_valid = np.zeros((len(rows), width), dtype=bool)
        for i, r in enumerate(rows):
            flat[i, :len(r)] = r
            key_valid[i, :len(r)] = True
        h_mem = ad.take_rows(enc.reshape(s * mh, d), flat)
        m = batch.ids.shape[1]
        return acoustic + [(h_mem, np.broadcast_to(key_valid[:, None, :], (len(rows), m, width)))]


def build_model(config: CemConfig, asr_wp_emb, asr_pos_emb) -> CemModel:
    cls = {"wp_mlp": WPMLP, "wp_xformer": XformerCem, "e2e_xformer": XformerCem,
           "delib": DelibCem}.get(config.variant)
    if cls is None:
        raise ConfigError(f"{config.variant} has no trainable model")
    return cls(config, asr_wp_emb, asr_pos_emb)


# ---------------------------------------------------------------------------
# evaluation


def n_attend(config: CemConfig) -> int:
    return config.n_hyps if config.variant == "delib" else 0


def predict(model: CemModel | None, corpus: Corpus, hyp_rank: int = 0,
            batch_size: int = 64, variant: str | None = None) -> list[ConfidenceOutput]:
    """Confidence for one hypothesis rank of every utterance (top-1 by default).

    ``model=None`` means the softmax baseline.
    """
    if model is None:
        return [softmax_baseline(u.nbest[hyp_rank], corpus.seg(i, hyp_rank))
                for i, u in enumerate(corpus.utts)]
    outs: list[ConfidenceOutput] = []
    for start in range(0, len(corpus), batch_size):
        ex = [(u, hyp_rank) for u in range(start, min(start + batch_size, len(corpus)))]
        outs.extend(model.outputs(make_batch(corpus, ex, n_attend(model.config), False)))
    return outs


def eval_records(outputs: Sequence[ConfidenceOutput], corpus: Corpus,
                 hyp_rank: int = 0) -> list[EvalRecord]:
    recs = []
    for i, (out, u) in enumerate(zip(outputs, corpus.utts)):
        ls = corpus.labels(i, hyp_rank)
        hyp_words = decode(corpus.seg(i, hyp_rank), corpus.vocab)
        wcr, wer = utterance_targets(hyp_words, u.ref)
        recs.append(EvalRecord(u.id, out.word_conf, list(ls.word_labels), ls.deletions,
                               wcr, wer, out.utterance_conf))
    return recs


def dev_nce(model: CemModel, corpus: Corpus) -> float:
    recs = eval_records(predict(model, corpus), corpus)
    confs = [c for r in recs for c in r.word_confs]
    labels = [d for r in recs for d in r.word_labels]
    try:
        return nce(confs, labels)
    except UndefinedMetricError:
        return float("nan")


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainResult:
    model: CemModel
    history: list[dict]
    best_epoch: int


def train_examples(corpus: Corpus, utt_indices: Sequence[int], n_hyps: int) -> list[tuple[int, int]]:
    return [(u, h) for u in utt_indices for h in range(min(n_hyps, len(corpus.utts[u].nbest)))]


def evaluate_loss(model: CemModel, corpus: Corpus, batch_size: int = 64) -> float:
    """Mean per-utterance training objective over a whole corpus."""
    total = 0.0
    cfg = model.config
    for start in range(0, len(corpus), batch_size):
        idx = range(start, min(start + batch_size, len(corpus)))
        batch = make_batch(corpus, train_examples(corpus, idx, cfg.train_hyps), n_attend(cfg))
        total += model.loss(batch).item()
    return total / len(corpus)


def train(config: CemConfig, train_set: Corpus, dev_set: Corpus | None = None,
          progress=None) -> TrainResult:
    """Adam training; keeps the parameters of the best dev-NCE epoch.

    Each utterance contributes its top ``train_hyps`` hypotheses; the loss
    sums over them and is divided by the number of utterances in the batch.
    """
    if config.variant == "softmax_baseline":
        raise ConfigError("the softmax baseline has nothing to train")
    config = train_set.fill_config(config)
    if dev_set is not None and dev_set.fingerprint != train_set.fingerprint:
        raise ConfigError("train and dev sets come from different recognizers")
    model = build_model(config, train_set.asr_wp_emb, train_set.asr_pos_emb)
    params = model.parameters()
    opt = ad.Adam(params, lr=config.lr)
    rng = np.random.default_rng([config.seed, 1])
    history: list[dict] = []
    best, best_epoch, best_params = -np.inf, -1, None
    na = n_attend(config)

    for epoch in range(config.epochs):
        order = rng.permutation(len(train_set))
        losses = []
        for start in range(0, len(order), config.batch):
            idx = order[start:start + config.batch]
            batch = make_batch(train_set, train_examples(train_set, idx, config.train_hyps), na)
            try:
                loss = model.loss(batch) * (1.0 / len(idx))
                grads = ad.backward(loss, params)
            except ad.NonFiniteError as exc:
                raise TrainingDivergedError(f"epoch {epoch}, step {len(losses)}: {exc}") from exc
            losses.append(loss.item())
            opt.step(grads)
        entry = {"epoch": epoch, "train_loss": float(np.mean(losses)),
                 "first_step_loss": losses[0], "last_step_loss": losses[-1]}
        if dev_set is not None:
            entry["dev_nce"] = dev_nce(model, dev_set)
            score = entry["dev_nce"]
        else:
            score = -entry["train_loss"]
        history.append(entry)
        log.info("%s epoch %d: %s", config.variant, epoch, entry)
        if progress:
            progress(entry)
        if score > best:
            best, best_epoch = score, epoch
            best_params = [p.data.copy() for p in params]
    if best_params is not None:
        for p, saved in zip(params, best_params):
            p.data = saved
    return TrainResult(model, history, best_epoch)


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(model: CemModel, path: str | Path, history: list[dict] | None = None) -> None:
    obj = {"version": CHECKPOINT_VERSION, "config": model.config.to_json(),
           "params": {name: [list(t.shape), t.data.ravel().tolist()]
                      for name, t in model.named_tensors().items()}}
    if history is not None:
        obj["history"] = history
    Path(path).write_text(json.dumps(obj) + "\n")


def load_checkpoint(path: str | Path) -> CemModel:
    obj = json.loads(Path(path).read_text())
    return model_from_json(obj)


def model_from_json(obj: dict) -> CemModel:
    if obj.get("version") != CHECKPOINT_VERSION:
        raise ConfigError(f"unsupported checkpoint version {obj.get('version')!r}")
    config = CemConfig.from_json(obj["config"])
    params = obj["params"]
    wp_shape, _ = params["emb"]
    pos_shape, pos = params["pos"]
    placeholder = np.zeros((config.vocab_size, config.d_emb))
    model = build_model(config, placeholder, np.array(pos).reshape(pos_shape))
    tensors = model.named_tensors()
    if set(tensors) != set(params):
        raise ConfigError(f"checkpoint parameters do not match model: "
                          f"{sorted(set(tensors) ^ set(params))}")
    for name, t in tensors.items():
        shape, values = params[name]
        if tuple(shape) != t.shape:
            raise ConfigError(f"{name}: checkpoint shape {shape} != model {t.shape}")
        t.data = np.array(values, dtype=np.float64).reshape(shape)
    return model


def clone_model(model: CemModel) -> CemModel:
    return copy.deepcopy(model)
