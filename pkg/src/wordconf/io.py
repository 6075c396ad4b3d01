"""Dataset, label and manifest files.

A dataset file is JSONL: one header object, then one utterance per line.
"""

from __future__ import annotations

import json
import os
import subprocess
from importlib import metadata
from pathlib import Path
from typing import Iterable, Iterator

from .alignment import utterance_targets
from .cem import Corpus
from .synth import Utterance
from .wordpiece import decode

DATASET_VERSION = 1
THREADS_ENV = "CONF_E2E_THREADS"


class DataFileError(ValueError):
    """A data file is missing its header or has the wrong version."""


def _dumps(obj) -> str:
    return json.dumps(obj, allow_nan=False, separators=(",", ":"))


def write_dataset(path: str | Path, header: dict, utts: Iterable[Utterance]) -> int:
    """Stream utterances to ``path``; returns how many were written."""
    n = 0
    with open(path, "w") as f:
        f.write(_dumps(header) + "\n")
        for u in utts:
            f.write(_dumps(u.to_json()) + "\n")
            n += 1
    return n


def read_header(path: str | Path) -> dict:
    with open(path) as f:
        return _check_header(f.readline(), path)


def _check_header(line: str, path) -> dict:
    try:
        header = json.loads(line)
    except json.JSONDecodeError as exc:
        raise DataFileError(f"{path}: first line is not a JSON header") from exc
    if not isinstance(header, dict) or header.get("version") != DATASET_VERSION or "K" not in header:
        raise DataFileError(f"{path}: missing or unsupported dataset header")
    return header


def iter_dataset(path: str | Path) -> tuple[dict, Iterator[Utterance]]:
    f = open(path)
    header = _check_header(f.readline(), path)

    def rows():
        with f:
            for line in f:
                if line.strip():
                    yield Utterance.from_json(json.loads(line))

    return header, rows()


def load_corpus(path: str | Path) -> Corpus:
    header, rows = iter_dataset(path)
    return Corpus(header, list(rows))


def label_rows(corpus: Corpus) -> Iterator[dict]:
    """One row per (utterance, hypothesis rank) with every training target."""
    for i, u in enumerate(corpus.utts):
        for h in range(len(u.nbest)):
            ls = corpus.labels(i, h)
            words = decode(corpus.seg(i, h), corpus.vocab) if len(u.nbest[h]) else []
            wcr, wer = utterance_targets(words, u.ref)
            yield {"id": u.id, "rank": h, "wp_labels": list(ls.wp_labels),
                   "word_labels": list(ls.word_labels), "eow_mask": list(ls.eow_mask),
                   "deletions": ls.deletions, "wcr": wcr, "wer": wer}


def write_jsonl(path: str | Path, rows: Iterable[dict], header: dict | None = None) -> None:
    with open(path, "w") as f:
        if header is not None:
            f.write(_dumps(header) + "\n")
        for row in rows:
            f.write(_dumps(row) + "\n")


def write_json(path: str | Path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True, allow_nan=False) + "\n")


def version_string() -> str:
    """Package version, plus ``git describe`` output when run from a checkout."""
    try:
        base = metadata.version("artifact")
    except metadata.PackageNotFoundError:
        base = "0+unknown"
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty", "--tags"],
                             cwd=Path(__file__).parent, capture_output=True, text=True,
                             timeout=5, check=True)
        return f"{base}+g{out.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        return base


def manifest_path(out: str | Path) -> Path:
    out = Path(out)
    return out / "manifest.json" if out.is_dir() else out.with_name(out.name + ".manifest.json")


def write_manifest(out: str | Path, command: str, args: dict, config: dict | None = None,
                   seed: int | None = None) -> Path:
    """Record how an output was produced, next to it."""
    path = manifest_path(out)
    args = {k: v for k, v in args.items() if not callable(v)}
    write_json(path, {"command": command, "args": args, "config": config, "seed": seed,
                      "version": version_string()})
    return path


def worker_count(default: int | None = None) -> int:
    """Worker processes allowed, capped by ``CONF_E2E_THREADS`` when set."""
    n = default or os.cpu_count() or 1
    raw = os.environ.get(THREADS_ENV)
    if raw:
        try:
            cap = int(raw)
        except ValueError as exc:
            raise ValueError(f"{THREADS_ENV} must be an integer, got {raw!r}") from exc
        if cap < 1:
            raise ValueError(f"{THREADS_ENV} must be >= 1")
        n = min(n, cap)
    return max(1, n)
