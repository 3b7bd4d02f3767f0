"""Lookup-table models and scripted editors for exercising the harness.

A ``LookupTableModel`` answers each known prompt with a fixed distribution.
Scripted editors return a copy with some prompts rewired, so every metric
outcome is known in advance.
"""

from __future__ import annotations

from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .corpora import EvalRecord
from .exceptions import DataError
from .vocab import Vocabulary

TOP = 0.9


def peaked(vocab: Vocabulary, token: str, top: float = TOP) -> np.ndarray:
    """Distribution with ``top`` on ``token`` and the rest spread evenly."""
    d = np.full(len(vocab), (1.0 - top) / (len(vocab) - 1))
    d[vocab.id(token)] = top
    return d


class LookupTableModel:
    def __init__(self, vocab: Vocabulary, table: Mapping[str, np.ndarray],
                 edit_fn: Callable[[str, np.ndarray, object], np.ndarray] | None = None):
        self.vocab = vocab
        self.table = {k: np.asarray(v, dtype=np.float64) for k, v in table.items()}
        self.edit_fn = edit_fn

    @classmethod
    def from_answers(cls, vocab: Vocabulary, answers: Mapping[str, str], **kwargs) -> "LookupTableModel":
        return cls(vocab, {p: peaked(vocab, a) for p, a in answers.items()}, **kwargs)

    def distribution(self, prompt: str, edit=None) -> np.ndarray:
        try:
            d = self.table[prompt]
        except KeyError:
            raise DataError(f"lookup model has no entry for {prompt!r}") from None
        if edit is not None:
            if self.edit_fn is None:
                raise DataError("this lookup model does not accept edits")
            d = self.edit_fn(prompt, d, edit)
        return d.copy()

    def rewired(self, answers: Mapping[str, str]) -> "LookupTableModel":
        table = dict(self.table)
        for p, a in answers.items():
            table[p] = peaked(self.vocab, a)
        return LookupTableModel(self.vocab, table, self.edit_fn)


def swap_top_two(prompt: str, d: np.ndarray, edit) -> np.ndarray:
    order = np.argsort(-d, kind="stable")
    out = d.copy()
    out[order[0]], out[order[1]] = d[order[1]], d[order[0]]
    return out


class ScriptedEditor:
    """Rewires the prompts ``script(request)`` names, on a copy of the model."""

    def __init__(self, script: Callable[[object], Mapping[str, str]], editor_id: str = "scripted"):
        self.script = script
        self.editor_id = editor_id

    def __call__(self, model: LookupTableModel, request) -> LookupTableModel:
        return model.rewired(self.script(request))


def forward_only_editor() -> ScriptedEditor:
    return ScriptedEditor(lambda req: {req.prompt: req.t_star}, "forward-only")


def symmetric_editor(records: Sequence[EvalRecord], fraction: float = 1.0) -> ScriptedEditor:
    """Also fixes the inverse prompt, for the first ``fraction`` of ``records``."""
    k = int(round(fraction * len(records)))
    inverse = {(r.edit_prompt, r.edit_target_new): (r.eval_prompt, r.eval_expected) for r in records[:k]}

    def script(req):
        updates = {req.prompt: req.t_star}
        if (req.prompt, req.t_star) in inverse:
            p, a = inverse[(req.prompt, req.t_star)]
            updates[p] = a
        return updates

    return ScriptedEditor(script, f"symmetric-{fraction:g}")


def records_model(vocab: Vocabulary, records: Iterable[EvalRecord]) -> LookupTableModel:
    """A lookup model that answers every record's edit and eval prompts as before the edit."""
    answers = {}
    for r in records:
        answers[r.edit_prompt] = r.edit_target_old
        answers[r.eval_prompt] = r.eval_original
    return LookupTableModel.from_answers(vocab, answers)
