"""Synthetic benchmark: every CEM variant on fresh data per seed, plus the
routing experiment on a head-heavy and a tail-heavy test set.

Run as ``python -m wordconf.benchmark --out DIR``.
"""

from __future__ import annotations

import argparse
import json
import logging
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from statistics import median

import numpy as np

from .cem import CemConfig, Corpus, eval_records, predict, train
from .metrics import calibration_curve, flatten, report, roc_curve
from .selection import SystemB, build_inputs, default_grid, pick_threshold, sweep, system_wer
from .synth import AsrSpec, LexiconSpec, SyntheticASR, dataset_header, default_vocab, generate_dataset
from .wordpiece import decode

log = logging.getLogger(__name__)

SOFTMAX = "softmax"
CHAIN = (SOFTMAX, "wp_mlp", "wp_xformer", "e2e_xformer", "delib8")
# True where the step to the next model must be a strict improvement
STRICT = (True, False, True, False)
METRICS = ("nce", "auc_roc")
# head-set WER may exceed system A's by at most 0.1 WER points (percent)
HEAD_WER_SLACK = 0.001


@dataclass
class BenchmarkConfig:
    n_train: int = 2000
    n_dev: int = 250
    n_eval: int = 500
    n_tail: int = 500
    heavy_tail_prob: float = 0.5
    H: int = 8
    epochs: int = 5
    lr: float = 1e-3
    models: tuple[str, ...] = ("wp_mlp", "wp_xformer", "e2e_xformer", "delib1", "delib8")
    selection_model: str = "delib8"
    lexicon: dict = field(default_factory=dict)
    asr: dict = field(default_factory=dict)
    cem: dict = field(default_factory=dict)
    system_b: dict = field(default_factory=dict)


def model_config(name: str, cfg: BenchmarkConfig, seed: int) -> CemConfig:
    kw = {"epochs": cfg.epochs, "lr": cfg.lr, "seed": seed, **cfg.cem}
    if name.startswith("delib"):
        return CemConfig(variant="delib", n_hyps=int(name[5:]), **kw)
    return CemConfig(variant=name, **kw)


def _corpus(lex, asr, n, H, seed) -> Corpus:
    return Corpus(dataset_header(asr), list(generate_dataset(lex, asr, n, H, seed)))


def _round(x: float) -> float:
    return float(f"{x:.10g}")


def _selection(model, head: Corpus, tail: Corpus, lex: LexiconSpec, system_b: SystemB) -> dict:
    def inputs(c: Corpus):
        outs = predict(model, c)
        hyps = [decode(c.seg(i, 0), c.vocab) for i in range(len(c))]
        return build_inputs([u.id for u in c.utts], [u.ref for u in c.utts], hyps,
                            [o.utterance_conf for o in outs], lex, system_b)

    grid = default_grid()
    sets = {"head": inputs(head), "tail": inputs(tail)}
    sweeps = {k: sweep(v, grid) for k, v in sets.items()}
    chosen = pick_threshold([sweeps["head"], sweeps["tail"]])
    wer = {k: {"a": system_wer(v, "a"), "b": system_wer(v, "b")} for k, v in sets.items()}
    tail_best = min(wer["tail"].values())
    feasible = [h.threshold for h, t in zip(sweeps["head"], sweeps["tail"])
                if t.wer < tail_best and h.wer <= wer["head"]["a"] + HEAD_WER_SLACK]
    at = {k: next(p for p in s if p.threshold == chosen) for k, s in sweeps.items()}
    return {
        "wer": {k: {s: _round(w) for s, w in v.items()} for k, v in wer.items()},
        "endpoints": {k: {"t0": [_round(s[0].wer), s[0].fraction_on_device],
                          "t1": [_round(s[-1].wer), s[-1].fraction_on_device]}
                      for k, s in sweeps.items()},
        "chosen_threshold": chosen,
        "at_chosen": {k: {"wer": _round(p.wer), "fraction_on_device": _round(p.fraction_on_device)}
                      for k, p in at.items()},
        "feasible_thresholds": [_round(t) for t in feasible],
        "sweeps": {k: [[_round(p.threshold), _round(p.wer), _round(p.fraction_on_device)]
                       for p in s] for k, s in sweeps.items()},
    }


def run_seed(seed: int, cfg: BenchmarkConfig = BenchmarkConfig()) -> dict:
    """Everything one seed produces, as plain JSON-ready data."""
    t0 = time.perf_counter()
    lex = LexiconSpec.synthetic(**cfg.lexicon)
    asr = SyntheticASR(default_vocab(lex), AsrSpec(**cfg.asr))
    base = 1000 * seed
    tr = _corpus(lex, asr, cfg.n_train, cfg.H, base + 1)
    dev = _corpus(lex, asr, cfg.n_dev, cfg.H, base + 2)
    ev = _corpus(lex, asr, cfg.n_eval, cfg.H, base + 3)
    tail = _corpus(lex.with_rates(tail_prob=cfg.heavy_tail_prob), asr, cfg.n_tail, cfg.H, base + 4)

    metrics, curves, history, models = {}, {}, {}, {}
    for name in (SOFTMAX, *cfg.models):
        if name == SOFTMAX:
            model = None
        else:
            res = train(model_config(name, cfg, seed), tr, dev)
            model = models[name] = res.model
            history[name] = res.history
        metrics[name] = {}
        for split, corpus in (("eval", ev), ("tail", tail)):
            recs = eval_records(predict(model, corpus), corpus)
            rep = report(recs)
            rep["bins"] = [{k: (None if v is None else _round(v) if isinstance(v, float) else v)
                            for k, v in b.items()} for b in rep["bins"]]
            metrics[name][split] = {k: (_round(v) if isinstance(v, float) else v)
                                    for k, v in rep.items()}
            confs, labels = flatten(recs)
            if split == "eval":
                fpr, tpr, _ = roc_curve(confs, labels)
                curves.setdefault("roc", {})[name] = [fpr.tolist(), tpr.tolist()]
            curves.setdefault(f"calibration_{split}", {})[name] = calibration_curve(confs, labels).to_json()
        log.info("seed %d %s: %s", seed, name,
                 {k: metrics[name]["eval"][k] for k in METRICS})

    sel, t_sel = None, time.perf_counter()
    if cfg.selection_model in models:
        sel = _selection(models[cfg.selection_model], ev, tail, lex,
                         SystemB(**cfg.system_b))
    now = time.perf_counter()
    return {
        "seed": seed,
        "config": asdict(cfg),
        "metrics": metrics,
        "history": history,
        "selection": sel,
        "curves": curves,
        "timing": {"total": now - t0, "selection": now - t_sel},
    }


def deterministic_view(result: dict) -> bytes:
    """Canonical bytes of a seed result, without wall-clock fields."""
    return json.dumps({k: v for k, v in result.items() if k != "timing"}, sort_keys=True).encode()


def run(seeds, cfg: BenchmarkConfig = BenchmarkConfig(), workers: int = 1) -> list[dict]:
    if workers > 1 and len(seeds) > 1:
        with ProcessPoolExecutor(min(workers, len(seeds))) as pool:
            return list(pool.map(run_seed, seeds, [cfg] * len(seeds)))
    return [run_seed(s, cfg) for s in seeds]


def medians(results: list[dict], split: str = "eval") -> dict[str, dict[str, float]]:
    names = results[0]["metrics"].keys()
    return {n: {m: median(r["metrics"][n][split][m] for r in results)
                for m in (*METRICS, "auc_pr", "ece", "wcr_rmse", "wer_rmse")}
            for n in names}


def check_ordering(med: dict[str, dict[str, float]]) -> dict[str, bool]:
    """Each link of the chain, per metric, plus the deliberation depth check."""
    out = {}
    for metric in METRICS:
        for (a, b), strict in zip(zip(CHAIN, CHAIN[1:]), STRICT):
            if a not in med or b not in med:
                continue
            x, y = med[a][metric], med[b][metric]
            out[f"{metric}: {a} {'<' if strict else '<='} {b}"] = x < y if strict else x <= y
    if "delib1" in med and "delib8" in med:
        out["nce: delib1 <= delib8"] = med["delib1"]["nce"] <= med["delib8"]["nce"]
    return out


def main(argv=None) -> int:
    p = argparse.ArgumentParser(description="run the synthetic CEM benchmark")
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    p.add_argument("--config", help="JSON overrides for BenchmarkConfig")
    p.add_argument("--out", required=True)
    p.add_argument("--workers", type=int, default=None)
    p.add_argument("--no-plots", action="store_true")
    args = p.parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    from . import io as wio

    overrides = json.loads(Path(args.config).read_text()) if args.config else {}
    cfg = BenchmarkConfig(**overrides)
    workers = wio.worker_count(args.workers)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    results = run(args.seeds, cfg, workers)
    for r in results:
        wio.write_json(out / f"seed{r['seed']}.json", {k: v for k, v in r.items() if k != "curves"})
    med = medians(results)
    summary = {"median_eval": med, "median_tail": medians(results, "tail"),
               "ordering": check_ordering(med)}
    wio.write_json(out / "summary.json", summary)
    if not args.no_plots:
        _plots(results[0], out)
    wio.write_manifest(out, "benchmark", vars(args), asdict(cfg))
    print(json.dumps(summary["ordering"], indent=2))
    return 0


def _plots(result: dict, out: Path) -> None:
    from .metrics import Calibration, CalibrationBin
    from .plotting import reliability_diagram, roc_plot, selection_plot
    from .selection import SweepPoint

    roc_plot({k: tuple(map(np.asarray, v)) for k, v in result["curves"]["roc"].items()},
             out / "roc.png", title="eval split")
    for split in ("eval", "tail"):
        curves = {}
        for name, bins in result["curves"][f"calibration_{split}"].items():
            cal_bins = [CalibrationBin(**b) for b in bins]
            curves[name] = Calibration(cal_bins, result["metrics"][name][split]["ece"])
        reliability_diagram({k: curves[k] for k in (SOFTMAX, "e2e_xformer") if k in curves},
                            out / f"reliability_{split}.png", title=f"{split} split")
    sel = result["selection"]
    if sel:
        sweeps = {k: [SweepPoint(*p) for p in v] for k, v in sel["sweeps"].items()}
        selection_plot(sweeps, out / "selection.png", chosen=sel["chosen_threshold"])


if __name__ == "__main__":
    raise SystemExit(main())
