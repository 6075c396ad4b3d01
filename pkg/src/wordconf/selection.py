"""Route utterances between two recognizers by thresholding confidence.

System A is the recognizer the CEM scores. An utterance goes to system B
when A's utterance confidence is strictly below the threshold, so ``t = 0``
keeps everything on A and ``t = 1`` sends everything to B.
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .alignment import error_counts
from .synth import LexiconSpec, channel_words

CONF_EPS = 1e-7


class SelectionError(ValueError):
    pass


@dataclass(frozen=True)
class SelectionInput:
    id: str
    conf_a: float
    errors_a: int
    ref_len_a: int
    errors_b: int
    ref_len_b: int

    def __post_init__(self):
        if self.ref_len_a < 1 or self.ref_len_b < 1:
            raise SelectionError(f"{self.id}: WER denominators must be >= 1")
        if not 0.0 < self.conf_a < 1.0:
            raise SelectionError(f"{self.id}: confidence {self.conf_a} outside (0, 1)")


@dataclass(frozen=True)
class SweepPoint:
    threshold: float
    wer: float
    fraction_on_device: float


def default_grid(n: int = 101) -> np.ndarray:
    return np.linspace(0.0, 1.0, n)


def sweep(inputs: Sequence[SelectionInput], thresholds: Iterable[float]) -> list[SweepPoint]:
    """Pooled WER and the share of utterances kept on A, per threshold."""
    t = np.asarray(list(thresholds), dtype=np.float64)
    if t.size == 0:
        return []
    if (t < 0).any() or (t > 1).any() or (np.diff(t) < 0).any():
        raise SelectionError("thresholds must be sorted and inside [0, 1]")
    if not inputs:
        raise SelectionError("no utterances to route")
    conf = np.array([x.conf_a for x in inputs])
    ea = np.array([x.errors_a for x in inputs], dtype=np.float64)
    eb = np.array([x.errors_b for x in inputs], dtype=np.float64)
    na = np.array([x.ref_len_a for x in inputs], dtype=np.float64)
    nb = np.array([x.ref_len_b for x in inputs], dtype=np.float64)
    to_b = conf[None, :] < t[:, None]
    errors = np.where(to_b, eb, ea).sum(axis=1)
    words = np.where(to_b, nb, na).sum(axis=1)
    kept = 1.0 - to_b.mean(axis=1)
    return [SweepPoint(float(a), float(w), float(f)) for a, w, f in zip(t, errors / words, kept)]


def pick_threshold(sweeps: Sequence[Sequence[SweepPoint]], policy: str = "minimax_regret") -> float:
    """One threshold shared by every test set.

    ``minimax_regret`` minimises the worst excess WER over each set's own
    best threshold; ``mean_wer`` minimises the unweighted mean WER across
    sets. Ties go to the smallest threshold.
    """
    if not sweeps or any(len(s) == 0 for s in sweeps):
        raise SelectionError("empty sweep")
    grid = [p.threshold for p in sweeps[0]]
    if any([p.threshold for p in s] != grid for s in sweeps):
        raise SelectionError("sweeps use different threshold grids")
    wer = np.array([[p.wer for p in s] for s in sweeps])
    if policy == "minimax_regret":
        cost = (wer - wer.min(axis=1, keepdims=True)).max(axis=0)
    elif policy == "mean_wer":
        cost = wer.mean(axis=0)
    else:
        raise SelectionError(f"unknown policy {policy!r}")
    return float(grid[int(np.argmin(cost))])


@dataclass(frozen=True)
class SystemB:
    """Second recognizer: the same channel with its own head and tail rate
    multipliers. The defaults make it weaker on head words and stronger on
    tail words than system A."""

    head_scale: float = 1.75
    tail_scale: float = 2.0
    seed: int = 9

    def errors(self, idx: int, ref: Sequence[str], lex: LexiconSpec) -> tuple[int, int]:
        rng = np.random.default_rng([self.seed, idx])
        words = channel_words(ref, lex, rng, head_scale=self.head_scale,
                              tail_scale=self.tail_scale)
        return error_counts([w.word for w in words], ref)


def build_inputs(ids: Sequence[str], refs: Sequence[Sequence[str]],
                 hyps_a: Sequence[Sequence[str]], confs_a: Sequence[float],
                 lex: LexiconSpec, system_b: SystemB = SystemB()) -> list[SelectionInput]:
    """Pair A's top hypothesis and confidence with a fresh system-B output.

    Confidences are clipped into the open unit interval so that ``t = 1``
    routes every utterance.
    """
    out = []
    for i, (uid, ref, hyp, conf) in enumerate(zip(ids, refs, hyps_a, confs_a)):
        ea, na = error_counts(list(hyp), list(ref))
        eb, nb = system_b.errors(i, ref, lex)
        conf = float(np.clip(conf, CONF_EPS, 1.0 - CONF_EPS))
        out.append(SelectionInput(uid, conf, ea, na, eb, nb))
    return out


def system_wer(inputs: Sequence[SelectionInput], system: str) -> float:
    if system == "a":
        return sum(x.errors_a for x in inputs) / sum(x.ref_len_a for x in inputs)
    return sum(x.errors_b for x in inputs) / sum(x.ref_len_b for x in inputs)


def write_inputs(inputs: Sequence[SelectionInput], path: str | Path) -> None:
    with open(path, "w") as f:
        for x in inputs:
            f.write(json.dumps(asdict(x)) + "\n")


def read_inputs(path: str | Path) -> list[SelectionInput]:
    with open(path) as f:
        return [SelectionInput(**json.loads(line)) for line in f if line.strip()]


def write_sweep_tsv(points: Sequence[SweepPoint], path: str | Path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, delimiter="\t", lineterminator="\n")
        w.writerow(["threshold", "wer", "fraction_on_device"])
        for p in points:
            w.writerow([f"{p.threshold:.6f}", f"{p.wer:.6f}", f"{p.fraction_on_device:.6f}"])
