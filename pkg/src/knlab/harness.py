"""Edit-evaluation battery: reliability, generality, locality, symmetry, synonymy.

An editor is any callable ``editor(model, request) -> edited_model``; it
must leave ``model`` untouched.  Every metric is an exact ratio of integer
counts, with degenerate cases excluded and counted rather than dropped.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from .attribution import attribute
from .corpora import EvalRecord, FactTuple
from .exceptions import DataError
from .kn_search import SearchConfig, refine_threshold
from .lm import EditedModel, PromptModel
from .model import EditSpec

SCHEMA_VERSION = 1
CSV_COLUMNS = ("model_id", "editor_id", "dataset_id", "metric", "score", "num", "den", "excluded")


@dataclass(frozen=True)
class EditRequest:
    prompt: str  # edit prompt with a blank
    s: str
    t: str
    t_star: str
    relation: str = ""


@dataclass
class MetricResult:
    metric: str
    num: int
    den: int
    excluded: int = 0

    @property
    def score(self) -> float:
        return self.num / self.den if self.den else 0.0

    def to_dict(self) -> dict:
        return {"metric": self.metric, "score": self.score, "num": self.num, "den": self.den,
                "excluded": self.excluded}


@dataclass
class EvalReport:
    model_id: str
    editor_id: str
    dataset_id: str
    metrics: list[MetricResult]
    seed: int | None = None
    provenance: dict = field(default_factory=dict)

    def metric(self, name: str) -> MetricResult:
        for m in self.metrics:
            if m.metric == name:
                return m
        raise KeyError(name)

    def to_dict(self) -> dict:
        return {"model_id": self.model_id, "editor_id": self.editor_id, "dataset_id": self.dataset_id,
                "seed": self.seed, "provenance": self.provenance,
                "metrics": [m.to_dict() for m in self.metrics]}

    @classmethod
    def from_dict(cls, d) -> "EvalReport":
        metrics = [MetricResult(m["metric"], int(m["num"]), int(m["den"]), int(m.get("excluded", 0)))
                   for m in d["metrics"]]
        return cls(d["model_id"], d["editor_id"], d["dataset_id"], metrics, d.get("seed"), d.get("provenance", {}))

    def __eq__(self, other) -> bool:
        return isinstance(other, EvalReport) and self.to_dict() == other.to_dict()


def _editor_id(editor) -> str:
    return getattr(editor, "editor_id", getattr(editor, "__name__", type(editor).__name__))


def _prefers(model, prompt: str, a: str, b: str) -> bool:
    d = model.distribution(prompt)
    return bool(d[model.vocab.id(a)] > d[model.vocab.id(b)])


def _argmax(model, prompt: str) -> int:
    return int(np.argmax(model.distribution(prompt)))


def _sample_other(rng, options: Sequence[str], exclude: str) -> str:
    pool = [o for o in options if o != exclude]
    if not pool:
        raise DataError(f"no alternative target for {exclude!r}")
    return pool[int(rng.integers(len(pool)))]


def eval_reliability_generality_locality(model, editor, facts: Sequence[FactTuple],
                                         unrelated: Sequence[str], seed: int = 0,
                                         model_id: str = "model", dataset_id: str = "kb") -> EvalReport:
    """Edit each fact's first template from t to a sampled t*.

    reliability: the edited template flips; generality: held-out templates
    flip; locality: argmax on every ``unrelated`` prompt is unchanged.
    """
    if not facts:
        raise DataError("no facts to edit")
    rng = np.random.default_rng(seed)
    targets: dict[str, list[str]] = {}
    for f in facts:
        targets.setdefault(f.relation, [])
        if f.t not in targets[f.relation]:
            targets[f.relation].append(f.t)
    base_argmax = [_argmax(model, p) for p in unrelated]
    rel = MetricResult("reliability", 0, 0)
    gen = MetricResult("generality", 0, 0)
    loc = MetricResult("locality", 0, 0)
    for f in facts:
        t_star = _sample_other(rng, targets[f.relation], f.t)
        prompt = f.prompt(0)
        edited = editor(model, EditRequest(prompt, f.s, f.t, t_star, f.relation))
        if _prefers(model, prompt, f.t, t_star):
            rel.den += 1
            rel.num += int(_prefers(edited, prompt, t_star, f.t))
        else:
            rel.excluded += 1
        if len(f.templates) < 2:
            gen.excluded += 1
        for i in range(1, len(f.templates)):
            held = f.prompt(i)
            if _prefers(model, held, f.t, t_star):
                gen.den += 1
                gen.num += int(_prefers(edited, held, t_star, f.t))
            else:
                gen.excluded += 1
        for p, before in zip(unrelated, base_argmax):
            loc.den += 1
            loc.num += int(_argmax(edited, p) == before)
    return EvalReport(model_id, _editor_id(editor), dataset_id, [rel, gen, loc], seed,
                      {"n_facts": len(facts), "n_unrelated": len(unrelated)})


def _eval_records(model, editor, records: Sequence[EvalRecord], metric: str,
                  model_id: str, dataset_id: str) -> EvalReport:
    if not records:
        raise DataError("no evaluation records")
    result = MetricResult(metric, 0, 0)
    for r in records:
        if _prefers(model, r.eval_prompt, r.eval_expected, r.eval_original):
            result.excluded += 1
            continue
        req = EditRequest(r.edit_prompt, r.subject, r.edit_target_old, r.edit_target_new, r.relation)
        edited = editor(model, req)
        result.den += 1
        result.num += int(_prefers(edited, r.eval_prompt, r.eval_expected, r.eval_original))
    return EvalReport(model_id, _editor_id(editor), dataset_id, [result], None, {"n_records": len(records)})


def eval_symmetry(model, editor, records: Sequence[EvalRecord], model_id: str = "model",
                  dataset_id: str = "symmetry") -> EvalReport:
    """Share of edits after which the inverse prompt prefers s over the old inverse answer.

    Records whose unedited inverse prompt already prefers s are excluded.
    """
    return _eval_records(model, editor, records, "symmetry", model_id, dataset_id)


def eval_synonym(model, editor, records: Sequence[EvalRecord], model_id: str = "model",
                 dataset_id: str = "synonym") -> EvalReport:
    """Share of edits after which the synonym prompt prefers synonym(t*) over synonym(t)."""
    for r in records:
        if not r.eval_expected or not r.eval_original:
            raise DataError(f"record for {r.subject!r} lacks a synonym mapping")
    return _eval_records(model, editor, records, "synonym", model_id, dataset_id)


# ---------------------------------------------------------------------------
# editors for TransformerLM-backed PromptModels


class KNSuppressionEditor:
    """Find KNs of the old target on the edit prompt and zero them."""

    editor_id = "kn-suppress"

    def __init__(self, steps: int = 20, search: SearchConfig = SearchConfig(), scope: str = "all_tokens"):
        self.steps = steps
        self.search = search
        self.scope = scope

    def knowledge_neurons(self, model: PromptModel, prompt: str, token: str):
        ids, pos = model.encode(prompt)
        amap = attribute(model.model, ids, pos, model.vocab.id(token), steps=self.steps, scope=self.scope)
        return refine_threshold([amap], self.search).neurons

    def __call__(self, model: PromptModel, request: EditRequest) -> EditedModel:
        neurons = self.knowledge_neurons(model, request.prompt, request.t)
        return EditedModel(model, EditSpec.suppress(neurons, self.scope))


class KNBoostEditor(KNSuppressionEditor):
    """Find KNs of the new target on the edit prompt and amplify them."""

    editor_id = "kn-boost"

    def __init__(self, factor: float = 2.0, **kwargs):
        super().__init__(**kwargs)
        self.factor = factor

    def __call__(self, model: PromptModel, request: EditRequest) -> EditedModel:
        neurons = self.knowledge_neurons(model, request.prompt, request.t_star)
        return EditedModel(model, EditSpec.scale(neurons, self.factor, self.scope))


EDITORS: dict[str, Callable[..., object]] = {"kn-suppress": KNSuppressionEditor, "kn-boost": KNBoostEditor}


# ---------------------------------------------------------------------------
# report files


def reports_csv(reports: Iterable[EvalReport]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for r in reports:
        for m in r.metrics:
            w.writerow([r.model_id, r.editor_id, r.dataset_id, m.metric, repr(m.score), m.num, m.den, m.excluded])
    return buf.getvalue()


def reports_json(reports: Iterable[EvalReport]) -> str:
    return json.dumps({"schema_version": SCHEMA_VERSION, "reports": [r.to_dict() for r in reports]},
                      sort_keys=True, indent=2) + "\n"


def load_reports(path) -> list[EvalReport]:
    try:
        bundle = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"{path}: cannot read report bundle ({exc})") from exc
    if bundle.get("schema_version") != SCHEMA_VERSION:
        raise DataError(f"{path}: unsupported report schema version {bundle.get('schema_version')!r}")
    return [EvalReport.from_dict(d) for d in bundle["reports"]]


def _metric_svg(metric: str, rows: list[tuple[str, float]], width: int = 480, bar_h: int = 22) -> str:
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{30 + bar_h * len(rows)}">',
             f'<text x="4" y="16" font-size="12">{metric}</text>']
    for i, (label, score) in enumerate(rows):
        y = 24 + i * bar_h
        parts.append(f'<rect x="200" y="{y}" width="{score * (width - 210):.2f}" height="{bar_h - 4}" fill="#1f77b4"/>')
        parts.append(f'<text x="4" y="{y + bar_h - 8}" font-size="10">{label} {score:.4f}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def emit_report(reports: Sequence[EvalReport], out_dir, formats: Iterable[str] = ("csv", "json")) -> list[Path]:
    """Write ``reports.csv`` / ``reports.json`` / one SVG bar chart per metric."""
    formats = set(formats)
    unknown = formats - {"csv", "json", "svg"}
    if unknown:
        raise DataError(f"unknown report format(s): {sorted(unknown)}")
    out = Path(out_dir)
    written = []
    try:
        out.mkdir(parents=True, exist_ok=True)
        if "csv" in formats:
            path = out / "reports.csv"
            path.write_text(reports_csv(reports), encoding="utf-8")
            written.append(path)
        if "json" in formats:
            path = out / "reports.json"
            path.write_text(reports_json(reports), encoding="utf-8")
            written.append(path)
        if "svg" in formats:
            by_metric: dict[str, list[tuple[str, float]]] = {}
            for r in reports:
                for m in r.metrics:
                    by_metric.setdefault(m.metric, []).append((f"{r.editor_id}/{r.dataset_id}", m.score))
            for metric, rows in sorted(by_metric.items()):
                path = out / f"{metric}.svg"
                path.write_text(_metric_svg(metric, rows), encoding="utf-8")
                written.append(path)
    except OSError as exc:
        raise DataError(f"cannot write reports under {out}: {exc}") from exc
    return written
