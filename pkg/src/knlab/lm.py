"""String-level view of a model: distributions at the blank of a prompt.

Anything with a ``vocab`` (``Vocabulary``) and ``distribution(prompt, edit)``
can be evaluated by the editing and harness code; ``PromptModel`` adapts a
``TransformerLM``, ``EditedModel`` pins an edit onto any such model.
"""

from __future__ import annotations

from typing import Protocol, Sequence

import numpy as np

from .corpora import encode_prompt
from .exceptions import DataError
from .model import EditSpec, TransformerLM
from .training import pad_batch
from .vocab import Vocabulary


class LanguageModel(Protocol):
    vocab: Vocabulary

    def distribution(self, prompt: str, edit=None) -> np.ndarray: ...


def distributions(model, prompts: Sequence[str], edit=None) -> np.ndarray:
    """(N, V) distributions, batched when the model supports it."""
    if hasattr(model, "distributions"):
        return model.distributions(prompts, edit)
    return np.stack([model.distribution(p, edit) for p in prompts])


def prob(model, prompt: str, token: str, edit=None) -> float:
    return float(model.distribution(prompt, edit)[model.vocab.id(token)])


class PromptModel:
    """Adapter from blank-marked prompts to a ``TransformerLM``."""

    batch_size = 256

    def __init__(self, model: TransformerLM, vocab: Vocabulary):
        if len(vocab) != model.config.vocab_size:
            raise DataError(f"vocabulary has {len(vocab)} entries, model expects {model.config.vocab_size}")
        self.model = model
        self.vocab = vocab

    def encode(self, prompt: str) -> tuple[list[int], int]:
        return encode_prompt(self.vocab, prompt, self.model.config.mode)

    def distribution(self, prompt: str, edit: EditSpec | None = None) -> np.ndarray:
        ids, pos = self.encode(prompt)
        return self.model.probs_batch(np.array([ids]), [pos], edit=edit)[0]

    def distributions(self, prompts: Sequence[str], edit: EditSpec | None = None) -> np.ndarray:
        out = []
        for start in range(0, len(prompts), self.batch_size):
            encoded = [self.encode(p) for p in prompts[start:start + self.batch_size]]
            ids, valid = pad_batch([e[0] for e in encoded], self.vocab.pad_id)
            out.append(self.model.probs_batch(ids, [e[1] for e in encoded], key_mask=valid, edit=edit))
        if not out:
            return np.zeros((0, len(self.vocab)))
        return np.concatenate(out)


class EditedModel:
    """A non-destructive view of ``base`` with ``edit`` always applied."""

    def __init__(self, base, edit):
        self.base = base
        self.edit = edit
        self.vocab = base.vocab

    def distribution(self, prompt: str, edit=None) -> np.ndarray:
        if edit is not None:
            raise ValueError("EditedModel already carries an edit")
        return self.base.distribution(prompt, self.edit)

    def distributions(self, prompts, edit=None) -> np.ndarray:
        if edit is not None:
            raise ValueError("EditedModel already carries an edit")
        return distributions(self.base, prompts, self.edit)
