"""A small end-to-end CLI pipeline run in a working directory with relative paths."""

import os
from contextlib import contextmanager
from pathlib import Path

from knlab.cli import main


@contextmanager
def chdir(path):
    old = os.getcwd()
    os.chdir(path)
    try:
        yield
    finally:
        os.chdir(old)


def steps(jobs: int) -> list[list[str]]:
    j = ["--jobs", str(jobs)]
    small = ["--layers", "2", "--d-model", "16", "--d-mlp", "32", "--heads", "2", "--max-len", "12"]
    return [
        ["gen-corpus", "--kind", "agreement", "--paradigms", "det_noun=60", "--train-sentences", "300",
         "--out", "corpus"],
        ["train", "--corpus", "corpus", *small, "--epochs", "1", "--max-steps", "40", "--batch-size", "16",
         "--lr", "3e-3", "--out", "train"],
        ["attribute", "--model", "train/model.knlb", "--pairs", "corpus/pairs.jsonl", "--number-class", "plural",
         "--limit", "6", "--steps", "4", "--out", "attr", *j],
        ["kn-search", "--maps", "attr/maps.jsonl", "--label", "plural", "--out", "kn"],
        ["edit-effect", "--model", "train/model.knlb", "--kn", "kn/knset.json", "--pairs", "corpus/pairs.jsonl",
         "--number-class", "plural", "--limit", "20", "--out", "effect", *j],
        ["reliability", "--model", "train/model.knlb", "--kn", "kn/knset.json", "--pairs", "corpus/pairs.jsonl",
         "--limit", "20", "--out", "rel", *j],
        ["trace", "--model", "train/model.knlb", "--prompt", "carl sees ___ dogs .", "--subject", "dogs",
         "--target", "these", "--out", "trace", *j],
        ["gen-corpus", "--kind", "facts", "--n-capitals", "6", "--n-people", "6", "--n-fields", "4",
         "--out", "facts"],
        ["train", "--corpus", "facts", *small, "--epochs", "1", "--max-steps", "20", "--batch-size", "16",
         "--out", "ftrain"],
        ["eval-symmetry", "--model", "ftrain/model.knlb", "--records", "facts/symmetry_capital_of.jsonl",
         "--steps", "3", "--limit", "3", "--out", "sym", *j],
        ["eval-synonym", "--model", "ftrain/model.knlb", "--records", "facts/synonym.jsonl", "--editor",
         "kn-boost", "--steps", "3", "--limit", "3", "--out", "syn", *j],
        ["report", "sym/report.json", "syn/report.json", "--formats", "csv,json", "--out", "report"],
    ]


def run_pipeline(workdir: Path, jobs: int = 1) -> list[int]:
    workdir.mkdir(parents=True, exist_ok=True)
    codes = []
    with chdir(workdir):
        for argv in steps(jobs):
            codes.append(main(argv))
            if codes[-1] != 0:
                break
    return codes


def artifacts(workdir: Path) -> dict[str, bytes]:
    """Every emitted CSV/JSON/JSONL/SVG/checkpoint, keyed by relative path; the run.log sidecar is left out."""
    out = {}
    for path in sorted(workdir.rglob("*")):
        if path.is_file() and path.name != "run.log":
            out[str(path.relative_to(workdir))] = path.read_bytes()
    return out
