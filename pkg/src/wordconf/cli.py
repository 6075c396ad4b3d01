"""Command line: generate data, label it, train and evaluate CEMs, route
utterances between recognizers.

Exit status: 0 on success, 1 for usage or validation errors, 2 for runtime
failures (divergence, failed gradient check, I/O trouble mid-run).
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import io as wio
from .cem import (
    VARIANTS,
    CemConfig,
    ConfigError,
    build_model,
    eval_records,
    load_checkpoint,
    make_batch,
    n_attend,
    predict,
    save_checkpoint,
    train,
    train_examples,
)
from .metrics import calibration_curve, flatten, report, roc_curve
from .selection import (
    SystemB,
    build_inputs,
    default_grid,
    pick_threshold,
    sweep,
    system_wer,
    write_sweep_tsv,
)
from .synth import AsrSpec, LexiconSpec, SyntheticASR, dataset_header, default_vocab, make_utterance
from .wordpiece import WordPieceVocab, decode

log = logging.getLogger("wordconf")
SOFTMAX = "softmax"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _read_json(path: str | None) -> dict:
    if not path:
        return {}
    obj = json.loads(Path(path).read_text())
    if not isinstance(obj, dict):
        raise ConfigError(f"{path}: expected a JSON object")
    return obj


def _named(pairs: list[str], what: str) -> dict[str, str]:
    out = {}
    for p in pairs:
        name, sep, path = p.partition("=")
        if not sep or not name or not path:
            raise ConfigError(f"{what} must look like name=path, got {p!r}")
        out[name] = path
    return out


def _tsv(path: Path, header: list[str], rows) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, delimiter="\t", lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([f"{x:.6f}" if isinstance(x, float) else x for x in row])


# ---------------------------------------------------------------------------
# data


def _lexicon(cfg: dict) -> LexiconSpec:
    return LexiconSpec.from_json(cfg.get("lexicon", {}))


def cmd_gen_vocab(args) -> int:
    cfg = _read_json(args.config)
    vocab = default_vocab(_lexicon(cfg), cfg.get("vocab_size", 256))
    vocab.save(args.out)
    wio.write_manifest(args.out, "gen-vocab", vars(args), cfg)
    print(f"{len(vocab)} pieces -> {args.out}")
    return 0


def _generate_chunk(job):
    lex_json, asr_json, pieces, H, seed, start, stop = job
    lex = LexiconSpec.from_json(lex_json)
    asr = SyntheticASR(WordPieceVocab(pieces), AsrSpec(**asr_json))
    return [make_utterance(i, lex, asr, H, seed) for i in range(start, stop)]


def cmd_gen_data(args) -> int:
    cfg = _read_json(args.config)
    lex = _lexicon(cfg)
    vocab = (WordPieceVocab.load(args.vocab) if args.vocab
             else default_vocab(lex, cfg.get("vocab_size", 256)))
    asr_spec = AsrSpec(**cfg.get("asr", {}))
    asr = SyntheticASR(vocab, asr_spec)
    n, H = int(cfg.get("n_utts", 500)), int(cfg.get("H", 8))
    if n < 1:
        raise ConfigError("n_utts must be >= 1")
    if not 1 <= H <= asr_spec.beam_capacity:
        raise ConfigError(f"H={H} outside 1..{asr_spec.beam_capacity}")
    header = dataset_header(asr, lexicon=lex.to_json(), seed=args.seed, H=H)
    workers = wio.worker_count()
    chunk = max(1, -(-n // (4 * workers)))
    jobs = [(lex.to_json(), asr_spec.to_json(), vocab.pieces, H, args.seed, s, min(n, s + chunk))
            for s in range(0, n, chunk)]

    def utterances():
        if workers == 1:
            for job in jobs:
                yield from _generate_chunk(job)
        else:
            with ProcessPoolExecutor(workers) as pool:
                for part in pool.map(_generate_chunk, jobs):
                    yield from part

    count = wio.write_dataset(args.out, header, utterances())
    wio.write_manifest(args.out, "gen-data", vars(args), cfg, args.seed)
    print(f"{count} utterances -> {args.out}")
    return 0


def cmd_label(args) -> int:
    corpus = wio.load_corpus(args.data)
    wio.write_jsonl(args.out, wio.label_rows(corpus))
    wio.write_manifest(args.out, "label", vars(args))
    return 0


# ---------------------------------------------------------------------------
# models


def cmd_train(args) -> int:
    cfg = _read_json(args.config)
    cfg.update(variant=args.variant, seed=args.seed)
    config = CemConfig.from_json(cfg)
    tr = wio.load_corpus(args.train)
    dev = wio.load_corpus(args.dev) if args.dev else None

    def progress(entry):
        print(json.dumps(entry), flush=True)

    result = train(config, tr, dev, progress)
    save_checkpoint(result.model, args.out, result.history)
    wio.write_manifest(args.out, "train", vars(args), result.model.config.to_json(), args.seed)
    print(f"best epoch {result.best_epoch} -> {args.out}")
    return 0


def _load_model(spec: str):
    return None if spec == SOFTMAX else load_checkpoint(spec)


def _evaluate(model, corpus, n_bins):
    recs = eval_records(predict(model, corpus), corpus)
    return recs, report(recs, n_bins)


def cmd_eval(args) -> int:
    from .plotting import reliability_diagram, roc_plot

    model = _load_model(args.checkpoint)
    corpus = wio.load_corpus(args.data)
    recs, rep = _evaluate(model, corpus, args.bins)
    out = Path(args.report)
    wio.write_json(out, rep)
    stem = out.with_suffix("")
    confs, labels = flatten(recs)
    fpr, tpr, thr = roc_curve(confs, labels)
    _tsv(stem.with_name(stem.name + ".roc.tsv"), ["threshold", "fpr", "tpr"],
         zip([float(t) for t in thr], fpr.tolist(), tpr.tolist()))
    cal = calibration_curve(confs, labels, args.bins)
    _calibration_tsv(stem.with_name(stem.name + ".calibration.tsv"), cal)
    if not args.no_plots:
        name = "softmax" if model is None else model.config.variant
        roc_plot({name: (fpr, tpr)}, stem.with_name(stem.name + ".roc.png"))
        reliability_diagram({name: cal}, stem.with_name(stem.name + ".reliability.png"))
    wio.write_manifest(out, "eval", vars(args))
    print(json.dumps({k: rep[k] for k in ("nce", "auc_roc", "auc_pr", "wcr_rmse", "wer_rmse", "ece")}))
    return 0


def _calibration_tsv(path: Path, cal) -> None:
    _tsv(path, ["lo", "hi", "count", "mass", "mean_conf", "accuracy"],
         ([b.lo, b.hi, b.count, b.mass, "" if b.empty else b.mean_conf,
           "" if b.empty else b.accuracy] for b in cal.bins))


def cmd_calibrate(args) -> int:
    from .plotting import reliability_diagram

    corpus = wio.load_corpus(args.data)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    curves, summary = {}, {}
    for name, spec in _named(args.model, "--model").items():
        confs, labels = flatten(eval_records(predict(_load_model(spec), corpus), corpus))
        cal = calibration_curve(confs, labels, args.bins)
        _calibration_tsv(out / f"calibration_{name}.tsv", cal)
        curves[name] = cal
        summary[name] = {"ece": cal.ece, "bins": cal.to_json()}
    wio.write_json(out / "calibration.json", summary)
    if not args.no_plots:
        reliability_diagram(curves, out / "reliability.png", title=Path(args.data).name)
    wio.write_manifest(out, "calibrate", vars(args))
    print(json.dumps({k: v["ece"] for k, v in summary.items()}))
    return 0


def selection_inputs(model, corpus, system_b: SystemB):
    lex = LexiconSpec.from_json(corpus.header["lexicon"]) if "lexicon" in corpus.header else None
    if lex is None:
        raise ConfigError("dataset header lacks the lexicon needed to simulate system B")
    outs = predict(model, corpus)
    hyps = [decode(corpus.seg(i, 0), corpus.vocab) for i in range(len(corpus))]
    return build_inputs([u.id for u in corpus.utts], [u.ref for u in corpus.utts], hyps,
                        [o.utterance_conf for o in outs], lex, system_b)


def cmd_select(args) -> int:
    from .plotting import selection_plot

    model = _load_model(args.checkpoint)
    system_b = SystemB(**_read_json(args.system_b))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    grid = default_grid(args.grid)
    sweeps, summary = {}, {}
    for name, path in _named(args.set, "--set").items():
        inputs = selection_inputs(model, wio.load_corpus(path), system_b)
        wio.write_jsonl(out / f"inputs_{name}.jsonl", (vars(x) for x in inputs))
        sweeps[name] = sweep(inputs, grid)
        write_sweep_tsv(sweeps[name], out / f"sweep_{name}.tsv")
        summary[name] = {"wer_a": system_wer(inputs, "a"), "wer_b": system_wer(inputs, "b")}
    t = pick_threshold(list(sweeps.values()), args.policy)
    for name, pts in sweeps.items():
        at = next(p for p in pts if p.threshold == t)
        summary[name].update(wer_at_threshold=at.wer, fraction_on_device=at.fraction_on_device)
    result = {"threshold": t, "policy": args.policy, "sets": summary}
    wio.write_json(out / "selection.json", result)
    if not args.no_plots:
        selection_plot(sweeps, out / "selection.png", chosen=t)
    wio.write_manifest(out, "select", vars(args))
    print(json.dumps(result))
    return 0


def cmd_gradcheck(args) -> int:
    corpus = wio.load_corpus(args.data)
    cfg = _read_json(args.config)
    cfg.update(variant=args.variant, seed=args.seed)
    config = corpus.fill_config(CemConfig.from_json(cfg))
    model = build_model(config, corpus.asr_wp_emb, corpus.asr_pos_emb)
    n = min(args.n_utts, len(corpus))
    batch = make_batch(corpus, train_examples(corpus, range(n), config.train_hyps), n_attend(config))
    rep = ad.grad_check(model, batch, eps=args.eps, tol=args.tol, n_coords=args.coords,
                        seed=args.seed)
    print(json.dumps({"variant": args.variant, "max_rel_err": rep.max_rel_err,
                      "n_checked": rep.n_checked, "tol": rep.tol, "passed": rep.passed,
                      "worst": rep.worst}))
    return 0 if rep.passed else 2


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="wordconf", description=__doc__.splitlines()[0])
    p.add_argument("--log-level", default="WARNING")
    p.add_argument("--overwrite", action="store_true", help="replace existing outputs")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("gen-vocab", help="learn a piece inventory from the lexicon")
    s.add_argument("--config")
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_gen_vocab)

    s = sub.add_parser("gen-data", help="generate a synthetic n-best dataset")
    s.add_argument("--config")
    s.add_argument("--vocab")
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(fn=cmd_gen_data)

    s = sub.add_parser("label", help="write piece and word targets for every hypothesis")
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_label)

    s = sub.add_parser("train", help="train one CEM variant")
    s.add_argument("--variant", required=True, choices=[v for v in VARIANTS if v != "softmax_baseline"])
    s.add_argument("--train", required=True)
    s.add_argument("--dev")
    s.add_argument("--config")
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(fn=cmd_train)

    s = sub.add_parser("eval", help="metrics report, ROC and calibration data")
    s.add_argument("--checkpoint", required=True, help=f"checkpoint path or '{SOFTMAX}'")
    s.add_argument("--data", required=True)
    s.add_argument("--report", required=True)
    s.add_argument("--bins", type=int, default=10)
    s.add_argument("--no-plots", action="store_true")
    s.set_defaults(fn=cmd_eval)

    s = sub.add_parser("calibrate", help="reliability data for several models")
    s.add_argument("--model", action="append", required=True, metavar="NAME=CHECKPOINT")
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--bins", type=int, default=10)
    s.add_argument("--no-plots", action="store_true")
    s.set_defaults(fn=cmd_calibrate)

    s = sub.add_parser("select", help="threshold sweep for routing to a second recognizer")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--set", action="append", required=True, metavar="NAME=DATA")
    s.add_argument("--system-b", help="JSON with head_scale, tail_scale, seed")
    s.add_argument("--policy", default="minimax_regret", choices=["minimax_regret", "mean_wer"])
    s.add_argument("--grid", type=int, default=101)
    s.add_argument("--out", required=True)
    s.add_argument("--no-plots", action="store_true")
    s.set_defaults(fn=cmd_select)

    s = sub.add_parser("gradcheck", help="central-difference check of a fresh model")
    s.add_argument("--variant", required=True, choices=[v for v in VARIANTS if v != "softmax_baseline"])
    s.add_argument("--data", required=True)
    s.add_argument("--config")
    s.add_argument("--n-utts", type=int, default=2)
    s.add_argument("--coords", type=int, default=100)
    s.add_argument("--eps", type=float, default=1e-5)
    s.add_argument("--tol", type=float, default=1e-3)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(fn=cmd_gradcheck)
    return p


def _check_fresh(args) -> None:
    """Outputs are write-once unless ``--overwrite`` is given."""
    target = getattr(args, "report", None) or getattr(args, "out", None)
    if target is None or args.overwrite:
        return
    p = Path(target)
    if p.is_file() or (p.is_dir() and wio.manifest_path(p).exists()):
        raise FileExistsError(f"{p} already exists; pass --overwrite to replace it")


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(level=args.log_level.upper(), format="%(levelname)s %(name)s: %(message)s")
    try:
        _check_fresh(args)
        return args.fn(args)
    except (ValueError, KeyError, TypeError, FileNotFoundError, FileExistsError,
            IsADirectoryError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - any other failure is a runtime error
        print(f"runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
